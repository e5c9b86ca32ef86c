//! PNG grids of equally sized RGB tiles.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};

const GAP: usize = 2;

/// An RGB tile with values in `[0, 1]`, row-major `(h, w, 3)`.
#[derive(Clone, Debug)]
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tile {
    pub fn rgb(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        Tile { height, width, data }
    }

    /// A single-channel map shown as gray.
    pub fn gray(height: usize, width: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), height * width);
        Tile::rgb(height, width, values.iter().flat_map(|&v| [v, v, v]).collect())
    }
}

/// Rows of tiles laid out on a white canvas.
pub struct Grid {
    pub rows: Vec<Vec<Tile>>,
}

impl Grid {
    pub fn columns(&self) -> usize {
        self.rows.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn render(&self) -> (usize, usize, Vec<u8>) {
        let first = self.rows.iter().flatten().next();
        let (th, tw) = first.map_or((0, 0), |t| (t.height, t.width));
        let cols = self.columns();
        let w = cols * tw + (cols + 1) * GAP;
        let h = self.rows.len() * th + (self.rows.len() + 1) * GAP;
        let mut px = vec![255u8; w * h * 3];
        for (r, row) in self.rows.iter().enumerate() {
            for (c, tile) in row.iter().enumerate() {
                let (x0, y0) = (GAP + c * (tw + GAP), GAP + r * (th + GAP));
                for y in 0..tile.height.min(th) {
                    for x in 0..tile.width.min(tw) {
                        for ch in 0..3 {
                            let v = tile.data[(y * tile.width + x) * 3 + ch];
                            px[((y0 + y) * w + x0 + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                    }
                }
            }
        }
        (w, h, px)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (w, h, px) = self.render();
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header()?.write_image_data(&px)?;
        Ok(())
    }
}
