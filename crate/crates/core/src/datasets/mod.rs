//! Synthetic multi-object sprite scenes with exact visible-region masks.

mod format;
mod jitter;
mod raster;

pub use format::{build_dataset, read_dataset, write_dataset, DatasetManifest, FORMAT_VERSION};
pub use jitter::{adjust_hue, apply_jitter, color_jitter_object, hsv_to_rgb, rgb_to_hsv, JitterParams};
pub use raster::covers;
pub(crate) use format::atomic_write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Tensor};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn id(self) -> u8 {
        match self {
            ShapeKind::Square => 0,
            ShapeKind::Circle => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

/// One sprite. `size` is the half-width (square, triangle) or radius
/// (circle); `position` is the `(x, y)` center in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: [f32; 3],
    pub size: f32,
    pub position: [f32; 2],
    /// Depth rank, 1 = bottom-most. Higher ranks are drawn on top.
    pub z_order: u8,
}

/// Record of a jitter applied to one object by [`color_jitter_object`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterAnnotation {
    /// Index into `objects` of the recolored object.
    pub object: usize,
    pub params: JitterParams,
}

/// One scene: image in `[-1, 1]`, masks (index 0 = background) and the
/// property table. Mask `k > 0` is the visible region of `objects[k - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub height: usize,
    pub width: usize,
    /// Row-major `(height, width, 3)`.
    pub image: Vec<f32>,
    /// `n_objects + 1` masks of `height * width` pixels.
    pub masks: Vec<Vec<bool>>,
    pub objects: Vec<ObjectSpec>,
    pub jitter: Option<JitterAnnotation>,
}

impl SceneRecord {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Entity index per pixel (0 = background).
    pub fn label_map(&self) -> Vec<usize> {
        let mut labels = vec![0; self.num_pixels()];
        for (k, m) in self.masks.iter().enumerate() {
            for (l, &on) in labels.iter_mut().zip(m) {
                if on {
                    *l = k;
                }
            }
        }
        labels
    }

    pub fn foreground_pixels(&self) -> usize {
        self.masks[0].iter().filter(|&&b| !b).count()
    }

    /// Image as a `(height, width, 3)` tensor.
    pub fn image_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.image.iter().map(|&v| F::from_f64(v as f64)).collect(),
        )
    }

    /// Checks the mask invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.num_pixels();
        if self.image.len() != n * 3 {
            return Err("image length".into());
        }
        if self.masks.len() != self.objects.len() + 1 {
            return Err("mask count".into());
        }
        if self.masks.iter().any(|m| m.len() != n) {
            return Err("mask length".into());
        }
        for p in 0..n {
            let on = self.masks.iter().filter(|m| m[p]).count();
            if on != 1 {
                return Err(format!("pixel {p} covered by {on} masks"));
            }
        }
        let mut z: Vec<u8> = self.objects.iter().map(|o| o.z_order).collect();
        z.sort_unstable();
        z.dedup();
        if z.len() != self.objects.len() {
            return Err("duplicate z_order".into());
        }
        Ok(())
    }
}

/// Stack record images into a `(batch, height, width, 3)` tensor.
pub fn batch_images<F: Float>(records: &[&SceneRecord]) -> Result<Tensor<F>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Precondition("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(records.len() * h * w * 3);
    for r in records {
        if (r.height, r.width) != (h, w) {
            return Err(Error::Shape("records in a batch differ in size".into()));
        }
        data.extend(r.image.iter().map(|&v| F::from_f64(v as f64)));
    }
    Ok(Tensor::new(vec![records.len(), h, w, 3], data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Background {
    /// Every scene uses this gray level in `[0, 1]`.
    Fixed { gray: f32 },
    /// Gray level drawn uniformly from `[min, max]` per scene.
    SampledGray { min: f32, max: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub n_scenes: usize,
    pub object_count_range: [usize; 2],
    /// Range of object half-widths in pixels.
    pub size_range: [f32; 2],
    /// RGB colors in `[0, 1]`.
    pub palette: Vec<[f32; 3]>,
    pub background: Background,
    pub rng_seed: u64,
    /// Objects with fewer visible pixels cause the layout to be resampled.
    pub min_visible_pixels: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            height: 48,
            width: 48,
            n_scenes: 5000,
            object_count_range: [2, 4],
            size_range: [4.0, 8.0],
            palette: vec![
                [0.9, 0.1, 0.1],
                [0.1, 0.8, 0.1],
                [0.1, 0.2, 0.9],
                [0.95, 0.85, 0.1],
                [0.85, 0.1, 0.85],
                [0.1, 0.85, 0.85],
            ],
            background: Background::SampledGray { min: 0.25, max: 0.55 },
            rng_seed: 0,
            min_visible_pixels: 8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image {}x{} smaller than 16x16", self.height, self.width));
        }
        let [lo, hi] = self.object_count_range;
        if hi < lo {
            return bad(format!("object_count_range [{lo}, {hi}] is empty"));
        }
        if hi > 254 {
            return bad("at most 254 objects per scene".into());
        }
        let [smin, smax] = self.size_range;
        if !(smin > 0.0 && smax >= smin) {
            return bad(format!("size_range [{smin}, {smax}] invalid"));
        }
        if smax > self.height.min(self.width) as f32 {
            return bad(format!(
                "objects of size {smax} cannot fit a {}x{} image",
                self.height, self.width
            ));
        }
        if self.palette.is_empty() {
            return bad("palette is empty".into());
        }
        if let Background::SampledGray { min, max } = self.background {
            if max < min {
                return bad("background gray range is empty".into());
            }
        }
        Ok(())
    }

    /// Index of the palette entry closest to `color`.
    pub fn color_id(&self, color: [f32; 3]) -> usize {
        let d = |p: &[f32; 3]| (0..3).map(|c| (p[c] - color[c]).powi(2)).sum::<f32>();
        (0..self.palette.len())
            .min_by(|&a, &b| d(&self.palette[a]).total_cmp(&d(&self.palette[b])))
            .unwrap_or(0)
    }
}

const MAX_LAYOUT_ATTEMPTS: usize = 1000;

/// Deterministic per-scene seed derived from a dataset seed and an index.
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut x = dataset_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn sample_object(rng: &mut ChaCha8Rng, config: &DatasetConfig, z_order: u8) -> ObjectSpec {
    let shape = ShapeKind::ALL[rng.gen_range(0..3)];
    let color = config.palette[rng.gen_range(0..config.palette.len())];
    let [smin, smax] = config.size_range;
    let size = if smax > smin { rng.gen_range(smin..=smax) } else { smin };
    let x = rng.gen_range(0.0..(config.width - 1) as f32);
    let y = rng.gen_range(0.0..(config.height - 1) as f32);
    ObjectSpec {
        shape,
        color,
        size,
        position: [x, y],
        z_order,
    }
}

/// Fraction of the object's unclipped raster that lies inside the frame.
fn in_frame_fraction(obj: &ObjectSpec, h: usize, w: usize) -> f32 {
    let s = obj.size.ceil() as i64 + 1;
    let (cx, cy) = (obj.position[0] as i64, obj.position[1] as i64);
    let (mut total, mut inside) = (0usize, 0usize);
    for py in cy - s..=cy + s {
        for px in cx - s..=cx + s {
            if covers(obj, px as f32, py as f32) {
                total += 1;
                if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                    inside += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f32 / total as f32
    }
}

/// Paints objects in ascending z-order; returns the entity index per pixel.
fn paint(objects: &[ObjectSpec], h: usize, w: usize) -> Vec<usize> {
    let mut labels = vec![0usize; h * w];
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| objects[i].z_order);
    for i in order {
        let obj = &objects[i];
        for py in 0..h {
            for px in 0..w {
                if covers(obj, px as f32, py as f32) {
                    labels[py * w + px] = i + 1;
                }
            }
        }
    }
    labels
}

/// Generates one scene as a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &DatasetConfig) -> Result<SceneRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let [lo, hi] = config.object_count_range;
    let n = rng.gen_range(lo..=hi);
    let gray = match config.background {
        Background::Fixed { gray } => gray,
        Background::SampledGray { min, max } => {
            if max > min {
                rng.gen_range(min..=max)
            } else {
                min
            }
        }
    };

    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let mut objects = Vec::with_capacity(n);
        while objects.len() < n {
            let obj = sample_object(&mut rng, config, objects.len() as u8 + 1);
            if in_frame_fraction(&obj, h, w) >= 0.25 {
                objects.push(obj);
            }
        }
        let labels = paint(&objects, h, w);
        let mut visible = vec![0usize; n + 1];
        for &l in &labels {
            visible[l] += 1;
        }
        if visible[1..].iter().any(|&v| v < config.min_visible_pixels.max(1)) {
            continue;
        }

        let bg = 2.0 * gray - 1.0;
        let mut image = vec![bg; h * w * 3];
        let mut masks = vec![vec![false; h * w]; n + 1];
        for (p, &l) in labels.iter().enumerate() {
            masks[l][p] = true;
            if l > 0 {
                let c = objects[l - 1].color;
                for ch in 0..3 {
                    image[p * 3 + ch] = 2.0 * c[ch] - 1.0;
                }
            }
        }
        return Ok(SceneRecord {
            height: h,
            width: w,
            image,
            masks,
            objects,
            jitter: None,
        });
    }
    Err(Error::InvalidConfig(format!(
        "could not place {n} visible objects after {MAX_LAYOUT_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            height: 24,
            width: 24,
            n_scenes: 4,
            object_count_range: [2, 3],
            size_range: [3.0, 6.0],
            ..Default::default()
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let cfg = DatasetConfig {
            object_count_range: [0, 0],
            background: Background::Fixed { gray: 0.25 },
            ..small()
        };
        let r = generate_scene(3, &cfg).unwrap();
        assert_eq!(r.n_objects(), 0);
        assert_eq!(r.masks.len(), 1);
        assert!(r.masks[0].iter().all(|&b| b));
        assert!(r.image.iter().all(|&v| v == -0.5));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(11, &small()).unwrap();
        let b = generate_scene(11, &small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(12, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_objects_that_cannot_fit() {
        let cfg = DatasetConfig {
            size_range: [4.0, 30.0],
            ..small()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_bad_ranges() {
        let cfg = DatasetConfig {
            object_count_range: [3, 2],
            ..small()
        };
        assert!(cfg.validate().is_err());
        let cfg = DatasetConfig {
            height: 8,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn records_satisfy_invariants() {
        let cfg = small();
        for seed in 0..50 {
            let r = generate_scene(seed, &cfg).unwrap();
            r.validate().unwrap();
            assert!((2..=3).contains(&r.n_objects()));
            for m in &r.masks[1..] {
                assert!(m.iter().filter(|&&b| b).count() >= cfg.min_visible_pixels);
            }
            for o in &r.objects {
                assert!(o.size >= 3.0 && o.size <= 6.0);
                assert!(in_frame_fraction(o, 24, 24) >= 0.25);
            }
        }
    }

    #[test]
    fn color_ids_match_palette() {
        let cfg = DatasetConfig::default();
        for (i, c) in cfg.palette.iter().enumerate() {
            assert_eq!(cfg.color_id(*c), i);
        }
    }

    #[test]
    fn scene_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| scene_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
    }
}
