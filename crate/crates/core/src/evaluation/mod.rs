//! Segmentation and representation metrics, plus the harnesses that run a
//! trained model over a dataset.

mod ari;
mod hungarian;
mod probe;

pub use ari::{ari, foreground_ari, iou, masks_to_labels, slot_regions};
pub use hungarian::{hungarian, Assignment};
pub use probe::{probe_eval, probe_fit, r_squared, LinearProbe, ProbeModel, ProbeSample, Property, PropertyScore};

use serde::{Deserialize, Serialize};
use slotenergy_autograd::Float;

use crate::datasets::{batch_images, DatasetConfig, SceneRecord};
use crate::model::{Inference, Model};
use crate::params::Params;
use crate::sampler::SamplerConfig;
use crate::{Error, Result};

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AriSummary {
    /// Per-scene foreground ARI, in dataset order, skipped scenes omitted.
    pub scores: Vec<f64>,
    /// Scenes with no foreground.
    pub skipped: usize,
    pub mean: f64,
    pub sd: f64,
}

impl AriSummary {
    fn from_scores(scores: Vec<f64>, skipped: usize) -> Self {
        let (mean, sd) = mean_sd(&scores);
        AriSummary {
            scores,
            skipped,
            mean,
            sd,
        }
    }
}

/// Runs inference over `scenes` in batches, passing each batch with its
/// results to `visit`. Batch `i` uses sampler seed `seed + i`.
pub fn for_each_batch<F: Float>(
    model: &Model,
    params: &Params<F>,
    scenes: &[SceneRecord],
    sampler: &SamplerConfig,
    seed: u64,
    batch_size: usize,
    mut visit: impl FnMut(&[SceneRecord], &Inference<F>) -> Result<()>,
) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    for (i, chunk) in scenes.chunks(batch_size).enumerate() {
        let refs: Vec<&SceneRecord> = chunk.iter().collect();
        let images = batch_images::<F>(&refs)?;
        let out = model.infer(params, &images, sampler, seed.wrapping_add(i as u64))?;
        visit(chunk, &out)?;
    }
    Ok(())
}

/// Foreground ARI of the model's final-state masks on every scene.
pub fn evaluate_ari<F: Float>(
    model: &Model,
    params: &Params<F>,
    scenes: &[SceneRecord],
    sampler: &SamplerConfig,
    seed: u64,
    batch_size: usize,
) -> Result<AriSummary> {
    let mut scores = Vec::new();
    let mut skipped = 0;
    for_each_batch(model, params, scenes, sampler, seed, batch_size, |chunk, out| {
        for (b, record) in chunk.iter().enumerate() {
            match foreground_ari(&out.reconstruction.masks.index0(b), record)? {
                Some(s) => scores.push(s),
                None => skipped += 1,
            }
        }
        Ok(())
    })?;
    Ok(AriSummary::from_scores(scores, skipped))
}

/// Matches predicted slots to ground-truth objects by maximum IoU of their
/// argmax regions. Returns `(slot, object)` pairs with positive overlap.
pub fn match_slots<F: Float>(
    masks: &slotenergy_autograd::Tensor<F>,
    record: &SceneRecord,
) -> Result<Vec<(usize, usize)>> {
    let k = masks.shape()[0];
    let regions = slot_regions(&masks_to_labels(masks), k);
    let objects = &record.masks[1..];
    let overlap: Vec<Vec<f64>> = regions
        .iter()
        .map(|r| objects.iter().map(|o| iou(r, o)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = overlap.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let assignment = hungarian(&cost)?;
    Ok(assignment
        .pairs()
        .filter(|&(s, o)| overlap[s][o] > 0.0)
        .collect())
}

/// Final-state latents of matched slots, paired with their objects.
#[allow(clippy::too_many_arguments)]
pub fn collect_probe_samples<F: Float>(
    model: &Model,
    params: &Params<F>,
    scenes: &[SceneRecord],
    dataset: &DatasetConfig,
    sampler: &SamplerConfig,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<ProbeSample>> {
    let mut samples = Vec::new();
    for_each_batch(model, params, scenes, sampler, seed, batch_size, |chunk, out| {
        let z = &out.trajectory.final_state().latents;
        for (b, record) in chunk.iter().enumerate() {
            let zb = z.index0(b);
            let dz = zb.shape()[1];
            for (slot, obj) in match_slots(&out.reconstruction.masks.index0(b), record)? {
                let object = record.objects[obj].clone();
                samples.push(ProbeSample {
                    latent: zb.data()[slot * dz..(slot + 1) * dz].iter().map(|v| v.as_f64()).collect(),
                    color_id: dataset.color_id(object.color),
                    object,
                });
            }
        }
        Ok(())
    })?;
    Ok(samples)
}

/// Foreground ARI with `k_test` slots on scenes that may hold more objects
/// than seen in training. `k_test` must leave room for the background.
pub fn eval_ood_counts<F: Float>(
    model: &Model,
    params: &Params<F>,
    scenes: &[SceneRecord],
    k_test: usize,
    sampler: &SamplerConfig,
    seed: u64,
    batch_size: usize,
) -> Result<AriSummary> {
    let most = scenes.iter().map(SceneRecord::n_objects).max().unwrap_or(0);
    if k_test < most + 1 {
        return Err(Error::Precondition(format!(
            "{k_test} slots cannot cover {most} objects plus background"
        )));
    }
    let sampler = SamplerConfig {
        num_slots: k_test,
        ..sampler.clone()
    };
    evaluate_ari(model, params, scenes, &sampler, seed, batch_size)
}

/// Axes of an inference-time ablation; the grid is their product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpace {
    pub epsilon: Vec<f64>,
    pub steps: Vec<usize>,
    pub noise_scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub epsilon: f64,
    pub steps: usize,
    pub noise_scale: f64,
}

impl AblationPoint {
    pub fn apply(&self, sampler: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            noise_scale: self.noise_scale,
            ..sampler.clone()
        }
    }
}

impl AblationSpace {
    pub fn points(&self) -> Vec<AblationPoint> {
        let mut out = Vec::new();
        for &epsilon in &self.epsilon {
            for &steps in &self.steps {
                for &noise_scale in &self.noise_scale {
                    out.push(AblationPoint {
                        epsilon,
                        steps,
                        noise_scale,
                    });
                }
            }
        }
        out
    }
}

/// One grid point's scores across seeds; failed runs land in `errors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow<P> {
    pub point: P,
    pub scores: Vec<f64>,
    pub errors: Vec<String>,
    pub mean: f64,
    pub sd: f64,
}

/// Evaluates `run` at every point and seed. A failing run is recorded and
/// the grid continues.
pub fn ablation_grid<P: Clone>(
    points: &[P],
    seeds: &[u64],
    mut run: impl FnMut(&P, u64) -> Result<f64>,
) -> Vec<AblationRow<P>> {
    points
        .iter()
        .map(|p| {
            let mut scores = Vec::new();
            let mut errors = Vec::new();
            for &seed in seeds {
                match run(p, seed) {
                    Ok(s) => scores.push(s),
                    Err(e) => errors.push(format!("seed {seed}: {e}")),
                }
            }
            let (mean, sd) = mean_sd(&scores);
            AblationRow {
                point: p.clone(),
                scores,
                errors,
                mean,
                sd,
            }
        })
        .collect()
}

/// Mask mass outside the background slot, as a fraction of the image. The
/// background slot is whichever holds the most mass on ground-truth
/// background pixels.
pub fn foreground_mask_mass<F: Float>(masks: &slotenergy_autograd::Tensor<F>, record: &SceneRecord) -> f64 {
    let k = masks.shape()[0];
    let n = record.num_pixels();
    let d = masks.data();
    let bg = &record.masks[0];
    let on_bg = |slot: usize| -> f64 {
        (0..n).filter(|&p| bg[p]).map(|p| d[slot * n + p].as_f64()).sum()
    };
    let background = (0..k)
        .max_by(|&a, &b| on_bg(a).total_cmp(&on_bg(b)))
        .unwrap_or(0);
    let total: f64 = (0..k)
        .filter(|&s| s != background)
        .map(|s| d[s * n..(s + 1) * n].iter().map(|v| v.as_f64()).sum::<f64>())
        .sum();
    total / n as f64
}
