use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{JitterAnnotation, SceneRecord};
use crate::{Error, Result};

/// Chosen jitter factors. Brightness, contrast and saturation are
/// multiplicative (1 = identity); `hue` is a rotation in cycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

/// Default jitter ranges at strength 1.
const BRIGHTNESS: f32 = 0.5;
const CONTRAST: f32 = 0.5;
const SATURATION: f32 = 0.5;
const HUE: f32 = 0.5;

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

pub fn rgb_to_hsv(c: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = c;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return [0.0, s, v];
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    [h / 6.0, s, v]
}

pub fn hsv_to_rgb(c: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = c;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates the hue of an RGB color in `[0, 1]` by `shift` cycles.
pub fn adjust_hue(c: [f32; 3], shift: f32) -> [f32; 3] {
    let [h, s, v] = rgb_to_hsv(c);
    hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v])
}

/// Recolors the pixels of mask `mask_index` with explicit parameters.
/// Steps equal to the identity are skipped, so identity parameters leave
/// the image bitwise unchanged.
pub fn apply_jitter(record: &SceneRecord, mask_index: usize, params: JitterParams) -> SceneRecord {
    let mut out = record.clone();
    let mask = &record.masks[mask_index];
    let idx: Vec<usize> = (0..record.num_pixels()).filter(|&p| mask[p]).collect();
    let mut px: Vec<[f32; 3]> = idx
        .iter()
        .map(|&p| {
            let i = &record.image[p * 3..p * 3 + 3];
            [(i[0] + 1.0) * 0.5, (i[1] + 1.0) * 0.5, (i[2] + 1.0) * 0.5]
        })
        .collect();
    let clamp = |c: [f32; 3]| c.map(|v| v.clamp(0.0, 1.0));
    let mut changed = false;

    if params.brightness != 1.0 {
        changed = true;
        for c in &mut px {
            *c = clamp(c.map(|v| v * params.brightness));
        }
    }
    if params.contrast != 1.0 && !px.is_empty() {
        changed = true;
        let mean = px.iter().map(|&c| luma(c)).sum::<f32>() / px.len() as f32;
        for c in &mut px {
            *c = clamp(c.map(|v| (v - mean) * params.contrast + mean));
        }
    }
    if params.saturation != 1.0 {
        changed = true;
        for c in &mut px {
            let g = luma(*c);
            *c = clamp(c.map(|v| (v - g) * params.saturation + g));
        }
    }
    if params.hue != 0.0 {
        changed = true;
        for c in &mut px {
            *c = clamp(adjust_hue(*c, params.hue));
        }
    }
    if changed {
        for (&p, c) in idx.iter().zip(&px) {
            for ch in 0..3 {
                out.image[p * 3 + ch] = 2.0 * c[ch] - 1.0;
            }
        }
    }
    out
}

/// Applies a random brightness/contrast/saturation/hue perturbation,
/// scaled by `strength`, to one randomly chosen object.
pub fn color_jitter_object(record: &SceneRecord, seed: u64, strength: f32) -> Result<SceneRecord> {
    if record.n_objects() == 0 {
        return Err(Error::Precondition("color jitter needs at least one object".into()));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Precondition(format!("jitter strength {strength} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = rng.gen_range(0..record.n_objects());
    let mut factor = |range: f32| {
        let r = range * strength;
        if r > 0.0 {
            rng.gen_range((1.0 - r).max(0.0)..=1.0 + r)
        } else {
            1.0
        }
    };
    let brightness = factor(BRIGHTNESS);
    let contrast = factor(CONTRAST);
    let saturation = factor(SATURATION);
    let hr = HUE * strength;
    let hue = if hr > 0.0 { rng.gen_range(-hr..=hr) } else { 0.0 };
    let params = JitterParams {
        brightness,
        contrast,
        saturation,
        hue,
    };
    let mut out = apply_jitter(record, object + 1, params);
    out.jitter = Some(JitterAnnotation { object, params });
    Ok(out)
}
