//! End-to-end training: Adam on the reconstruction loss of the final
//! Langevin state, with warmup plus cosine decay and global-norm clipping.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Graph, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::datasets::{batch_images, scene_seed, SceneRecord};
use crate::model::{Model, ModelConfig};
use crate::params::Params;
use crate::sampler::ChainNoise;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Step at which the cosine reaches zero; `None` means `steps`.
    pub decay_steps: Option<u64>,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Keep Adam moments in the final checkpoint.
    pub final_optimizer_state: bool,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 32,
            learning_rate: 2e-4,
            warmup_steps: 2500,
            decay_steps: None,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
            final_optimizer_state: false,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if self.horizon() < self.warmup_steps {
            return bad("decay_steps is shorter than warmup_steps");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive");
        }
        self.model.validate()
    }

    pub fn horizon(&self) -> u64 {
        self.decay_steps.unwrap_or(self.steps)
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `horizon`.
pub fn learning_rate(peak: f64, warmup: u64, horizon: u64, step: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= horizon {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (horizon - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean squared error over all entries.
pub fn reconstruction_loss<F: Float>(recon: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let sum: f64 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / recon.numel() as f64)
}

pub fn global_norm<F: Float>(grads: &Params<F>) -> f64 {
    grads
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_by_global_norm<F: Float>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Float> {
    pub m: Params<F>,
    pub v: Params<F>,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &Params<F>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based update count.
pub fn adam_update<F: Float>(
    params: &mut Params<F>,
    grads: &Params<F>,
    state: &mut AdamState<F>,
    config: &AdamConfig,
    lr: f64,
    t: u64,
) {
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        let m = state.m.get_mut(&name).expect("moment layout matches parameters");
        let v = state.v.get_mut(&name).expect("moment layout matches parameters");
        let p = params.get_mut(&name).unwrap();
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gd = gi.as_f64();
            let md = b1 * mi.as_f64() + (1.0 - b1) * gd;
            let vd = b2 * vi.as_f64() + (1.0 - b2) * gd * gd;
            *mi = F::from_f64(md);
            *vi = F::from_f64(vd);
            let step = lr * (md / c1) / ((vd / c2).sqrt() + config.eps);
            *pi = F::from_f64(pi.as_f64() - step);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F: Float> {
    pub params: Params<F>,
    pub adam: AdamState<F>,
    /// Number of completed updates.
    pub step: u64,
    pub seed: u64,
}

impl<F: Float> TrainState<F> {
    pub fn init(model: &Model, seed: u64) -> Self {
        let params = model.init_params(seed);
        TrainState {
            adam: AdamState::new(&params),
            params,
            step: 0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Batch-mean energy at each Langevin step.
    pub energies: Vec<f64>,
}

/// Seed for the randomness of update `step`, derived from the run seed.
pub fn step_seed(seed: u64, step: u64, stream: u64) -> u64 {
    scene_seed(scene_seed(seed, step), stream)
}

/// Loss and parameter gradients of one batch, without updating.
pub fn loss_and_grad<F: Float>(
    model: &Model,
    params: &Params<F>,
    images: &Tensor<F>,
    noise: &ChainNoise<F>,
) -> Result<(f64, Params<F>, Vec<f64>)> {
    let graph = Graph::new();
    let bound = params.bind(&graph);
    let out = model.loss_graph(&graph, &bound, images, noise)?;
    let loss = out.loss.item().as_f64();
    let energies = out
        .energies
        .iter()
        .map(|e| {
            let t = e.value();
            t.sum().as_f64() / t.numel() as f64
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let grads = bound.grad(&graph, out.loss);
    Ok((loss, grads, energies))
}

/// One clipped Adam update on `images`, with chain noise derived from
/// the state's seed and step.
pub fn train_step<F: Float>(
    model: &Model,
    state: &mut TrainState<F>,
    images: &Tensor<F>,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let noise = ChainNoise::draw(
        &model.config.sampler,
        images.shape()[0],
        model.config.latent_dim,
        step_seed(state.seed, state.step, 1),
    );
    train_step_with_noise(model, state, images, &noise, config)
}

/// One clipped Adam update with explicit chain noise.
pub fn train_step_with_noise<F: Float>(
    model: &Model,
    state: &mut TrainState<F>,
    images: &Tensor<F>,
    noise: &ChainNoise<F>,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let (loss, mut grads, energies) = loss_and_grad(model, &state.params, images, noise)?;
    let grad_norm = clip_by_global_norm(&mut grads, config.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm at step {}", state.step)));
    }
    let lr = learning_rate(config.learning_rate, config.warmup_steps, config.horizon(), state.step);
    adam_update(&mut state.params, &grads, &mut state.adam, &config.adam, lr, state.step + 1);
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss,
        grad_norm,
        lr,
        energies,
    })
}

/// Scene indices of the batch used at `step`.
pub fn batch_indices(seed: u64, step: u64, n_scenes: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, step, 0));
    if batch <= n_scenes {
        sample_indices(&mut rng, n_scenes, batch).into_vec()
    } else {
        (0..batch).map(|i| i % n_scenes).collect()
    }
}

pub fn metrics_header(steps: usize) -> String {
    let mut h = String::from("step,loss,grad_norm,lr");
    for t in 0..steps {
        h.push_str(&format!(",energy_{t}"));
    }
    h
}

pub fn metrics_row(m: &StepMetrics) -> String {
    let mut row = format!("{},{:.8e},{:.6e},{:.6e}", m.step, m.loss, m.grad_norm, m.lr);
    for e in &m.energies {
        row.push_str(&format!(",{e:.6e}"));
    }
    row
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Where `fit` writes its outputs.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn latest(&self) -> PathBuf {
        self.root.join(LATEST_CHECKPOINT)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(FINAL_CHECKPOINT)
    }
}

fn open_metrics(path: &Path, header: &str, truncate_after: Option<u64>) -> Result<BufWriter<File>> {
    let keep: Vec<String> = match (truncate_after, fs::read_to_string(path)) {
        (Some(step), Ok(text)) => text
            .lines()
            .skip(1)
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= step)
            })
            .map(str::to_string)
            .collect(),
        _ => Vec::new(),
    };
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for line in keep {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(BufWriter::new(f))
}

/// Trains on `scenes`, writing metrics and periodic checkpoints under
/// `run`. With `resume`, continues from the saved state.
pub fn fit<F: Float>(
    config: &TrainConfig,
    scenes: &[SceneRecord],
    run: &RunDir,
    resume: Option<Checkpoint<F>>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainState<F>> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let model = Model::new(config.model.clone())?;
    fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    let mut state = match resume {
        Some(ckpt) => {
            if ckpt.model != config.model {
                return Err(Error::Precondition(
                    "checkpoint model config differs from the training config".into(),
                ));
            }
            ckpt.into_train_state(&model)?
        }
        None => TrainState::init(&model, config.seed),
    };
    let header = metrics_header(config.model.sampler.steps);
    let resumed = (state.step > 0).then_some(state.step);
    let mut log = open_metrics(&run.metrics(), &header, resumed)?;

    while state.step < config.steps {
        let idx = batch_indices(state.seed, state.step, scenes.len(), config.batch_size);
        let batch: Vec<&SceneRecord> = idx.iter().map(|&i| &scenes[i]).collect();
        let images = batch_images::<F>(&batch)?;
        let m = train_step(&model, &mut state, &images, config)?;
        on_step(&m);
        if m.step % config.log_every == 0 {
            writeln!(log, "{}", metrics_row(&m)).map_err(|e| Error::io(run.metrics(), e))?;
            log.flush().map_err(|e| Error::io(run.metrics(), e))?;
        }
        if m.step % config.checkpoint_every == 0 {
            Checkpoint::from_state(&config.model, &state, true).save(&run.latest())?;
        }
    }
    Checkpoint::from_state(&config.model, &state, config.final_optimizer_state)
        .save(&run.final_checkpoint())?;
    Ok(state)
}

/// Loads the latest checkpoint of `run` if one exists.
pub fn latest_checkpoint<F: Float>(run: &RunDir) -> Result<Option<Checkpoint<F>>> {
    let path = run.latest();
    if path.exists() {
        checkpoint::load(&path).map(Some)
    } else {
        Ok(None)
    }
}
