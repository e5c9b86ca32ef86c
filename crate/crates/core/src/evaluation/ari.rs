//! Adjusted Rand index and label extraction from soft masks.

use std::collections::HashMap;

use slotenergy_autograd::{Float, Tensor};

use crate::datasets::SceneRecord;
use crate::{Error, Result};

fn comb2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index between two labelings of the same points.
///
/// When both labelings put every point in one cluster the index is 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Precondition("ARI needs at least two points".into()));
    }
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&n| comb2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| comb2(n)).sum();
    let expected = sum_a * sum_b / comb2(a.len() as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Per-pixel argmax over the slot axis of `(K, h, w)` masks; ties go to
/// the lowest slot index.
pub fn masks_to_labels<F: Float>(masks: &Tensor<F>) -> Vec<usize> {
    let s = masks.shape();
    let k = s[0];
    let n: usize = s[1..].iter().product();
    let d = masks.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for slot in 1..k {
                if d[slot * n + p] > d[best * n + p] {
                    best = slot;
                }
            }
            best
        })
        .collect()
}

/// ARI over ground-truth foreground pixels of `record`, or `None` when the
/// scene has fewer than two such pixels.
pub fn foreground_ari<F: Float>(pred_masks: &Tensor<F>, record: &SceneRecord) -> Result<Option<f64>> {
    let s = pred_masks.shape();
    if s.len() != 3 || s[1] != record.height || s[2] != record.width {
        return Err(Error::Shape(format!(
            "masks {s:?} do not match a {}x{} scene",
            record.height, record.width
        )));
    }
    let truth = record.label_map();
    let pred = masks_to_labels(pred_masks);
    let (t, p): (Vec<usize>, Vec<usize>) = truth
        .iter()
        .zip(&pred)
        .filter(|(&t, _)| t != 0)
        .map(|(&t, &p)| (t, p))
        .unzip();
    if t.len() < 2 {
        return Ok(None);
    }
    ari(&t, &p).map(Some)
}

/// Intersection over union of two binary masks; 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binary region of each slot under the argmax labeling.
pub fn slot_regions(labels: &[usize], k: usize) -> Vec<Vec<bool>> {
    (0..k)
        .map(|slot| labels.iter().map(|&l| l == slot).collect())
        .collect()
}
