use super::{ObjectSpec, ShapeKind};

/// Whether the pixel centered at `(px, py)` lies inside `obj`.
pub fn covers(obj: &ObjectSpec, px: f32, py: f32) -> bool {
    let [x, y] = obj.position;
    let s = obj.size;
    let (dx, dy) = (px - x, py - y);
    match obj.shape {
        ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
        ShapeKind::Circle => dx * dx + dy * dy <= s * s,
        // Apex at (x, y - s), base from (x - s, y + s) to (x + s, y + s).
        ShapeKind::Triangle => dy >= -s && dy <= s && dx.abs() <= (dy + s) * 0.5,
    }
}
