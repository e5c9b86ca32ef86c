use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use slotenergy::autograd::Tensor;
use slotenergy::checkpoint::{self, Checkpoint};
use slotenergy::datasets::{batch_images, build_dataset, read_dataset, DatasetConfig, DatasetManifest, SceneRecord};
use slotenergy::decoder::SceneReconstruction;
use slotenergy::evaluation::{
    self, ablation_grid, collect_probe_samples, eval_ood_counts, evaluate_ari, foreground_ari,
    foreground_mask_mass, mean_sd, probe_eval, probe_fit, AblationSpace,
};
use slotenergy::model::{Inference, Model};
use slotenergy::sampler::SamplerConfig;
use slotenergy::training::{fit, latest_checkpoint, RunDir, TrainConfig};

use crate::config::{parse_overrides, persist, resolve};
use crate::images::{Grid, Tile};
use crate::{Common, Mode};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SLOTENERGY_OUTPUT_ROOT";

fn output_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(default)
    })
}

fn configure<T: Serialize + serde::de::DeserializeOwned>(defaults: &T, common: &Common, out: &Path) -> Result<T> {
    let overrides = parse_overrides(&common.overrides)?;
    let cfg = resolve(defaults, common.config.as_deref(), &overrides)?;
    persist(&cfg, out)?;
    Ok(cfg)
}

fn load_scenes(path: &Path) -> Result<(DatasetManifest, Vec<SceneRecord>)> {
    read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint<f32>)> {
    let ckpt = checkpoint::load::<f32>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((Model::new(ckpt.model.clone())?, ckpt))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub train: DatasetConfig,
    pub test: DatasetConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let train = DatasetConfig {
            object_count_range: [2, 3],
            ..DatasetConfig::default()
        };
        GenDataConfig {
            test: DatasetConfig {
                n_scenes: 320,
                rng_seed: 1,
                ..train.clone()
            },
            train,
        }
    }
}

pub fn gen_data(common: &Common) -> Result<()> {
    let out = output_dir(common, "data");
    let cfg = configure(&GenDataConfig::default(), common, &out)?;
    for (name, ds) in [("train", &cfg.train), ("test", &cfg.test)] {
        let path = out.join(format!("{name}.bin"));
        let m = build_dataset(ds, &path)?;
        println!("{}: {} scenes, sha256 {}", path.display(), m.n_scenes, m.checksum);
    }
    Ok(())
}

pub fn train(data: &Path, resume: bool, common: &Common) -> Result<()> {
    let out = output_dir(common, "train");
    let run = RunDir::new(out.clone());
    let previous = latest_checkpoint::<f32>(&run)?;
    if previous.is_some() && !resume {
        bail!("{} already holds a checkpoint; pass --resume to continue it", out.display());
    }
    let cfg = configure(&TrainConfig::default(), common, &out)?;
    let (_, scenes) = load_scenes(data)?;
    if let Some(c) = &previous {
        eprintln!("resuming at step {}", c.step);
    }
    let state = fit::<f32>(&cfg, &scenes, &run, previous, |m| {
        if m.step % cfg.log_every.max(1) == 0 {
            eprintln!("step {} loss {:.5} grad_norm {:.3} lr {:.2e}", m.step, m.loss, m.grad_norm, m.lr);
        }
    })?;
    println!("trained to step {}; final checkpoint {}", state.step, run.final_checkpoint().display());
    Ok(())
}

/// Settings of the inference commands, defaulting to the checkpoint's
/// sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Number of scenes to score, 0 for all.
    pub limit: usize,
    pub sampler: SamplerConfig,
}

impl InferConfig {
    fn from_model(model: &Model) -> Self {
        InferConfig {
            seed: 0,
            batch_size: 16,
            limit: 0,
            sampler: model.config.sampler.clone(),
        }
    }

    fn take<'a>(&self, scenes: &'a [SceneRecord]) -> &'a [SceneRecord] {
        match self.limit {
            0 => scenes,
            n => &scenes[..n.min(scenes.len())],
        }
    }
}

fn slot_tiles(rec: &SceneReconstruction<f32>, b: usize) -> (Vec<Tile>, Vec<Tile>) {
    let s = rec.masks.shape();
    let (k, h, w) = (s[1], s[2], s[3]);
    let masks = rec.masks.index0(b);
    let rgb = rec.slot_rgb.index0(b);
    let mut slots = Vec::new();
    let mut mask_tiles = Vec::new();
    for slot in 0..k {
        let m = &masks.data()[slot * h * w..(slot + 1) * h * w];
        let c = &rgb.data()[slot * h * w * 3..(slot + 1) * h * w * 3];
        slots.push(Tile::rgb(h, w, c.iter().enumerate().map(|(i, v)| v * m[i / 3]).collect()));
        mask_tiles.push(Tile::gray(h, w, m));
    }
    (slots, mask_tiles)
}

fn recon_tile(rec: &SceneReconstruction<f32>, b: usize) -> Tile {
    let s = rec.image.shape();
    Tile::rgb(s[1], s[2], rec.image.index0(b).data().to_vec())
}

fn input_tile(r: &SceneRecord) -> Tile {
    Tile::rgb(r.height, r.width, r.image.clone())
}

/// One row per recorded state: reconstruction then every slot.
fn step_grid(model: &Model, params: &slotenergy::Params<f32>, out: &Inference<f32>, b: usize) -> Result<Grid> {
    let mut rows = Vec::new();
    for rec in model.decode_trajectory(params, &out.trajectory)? {
        let mut row = vec![recon_tile(&rec, b)];
        row.extend(slot_tiles(&rec, b).0);
        rows.push(row);
    }
    Ok(Grid { rows })
}

fn parse_indices(text: &str, n: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let i: usize = part.parse().with_context(|| format!("bad scene index {part:?}"))?;
        if i >= n {
            bail!("scene {i} out of range for a dataset of {n}");
        }
        out.push(i);
    }
    Ok(out)
}

fn energy_rows(out: &Inference<f32>) -> Vec<Vec<f64>> {
    out.trajectory
        .energies
        .iter()
        .map(|e| e.data().iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn decompose(ckpt: &Path, data: &Path, scenes: &str, common: &Common) -> Result<()> {
    let out_dir = output_dir(common, "decompose");
    let (model, c) = load_model(ckpt)?;
    let mut cfg = configure(&InferConfig::from_model(&model), common, &out_dir)?;
    cfg.sampler.record_trajectory = true;
    let (_, records) = load_scenes(data)?;
    let picked = parse_indices(scenes, records.len())?;
    let chosen: Vec<&SceneRecord> = picked.iter().map(|&i| &records[i]).collect();
    let images = batch_images::<f32>(&chosen)?;
    let out = model.infer(&c.params, &images, &cfg.sampler, cfg.seed)?;

    let mut slot_rows = Vec::new();
    let mut mask_rows = Vec::new();
    let mut energies = csv::Writer::from_path(out_dir.join("energies.csv"))?;
    energies.write_record(["scene", "step", "energy"])?;
    let per_step = energy_rows(&out);
    for (b, (&idx, record)) in picked.iter().zip(&chosen).enumerate() {
        let (slots, masks) = slot_tiles(&out.reconstruction, b);
        let head = [input_tile(record), recon_tile(&out.reconstruction, b)];
        slot_rows.push(head.iter().cloned().chain(slots).collect());
        mask_rows.push(head.into_iter().chain(masks).collect());
        step_grid(&model, &c.params, &out, b)?.save(&out_dir.join(format!("steps_{idx}.png")))?;
        for (t, e) in per_step.iter().enumerate() {
            energies.write_record([idx.to_string(), t.to_string(), e[b].to_string()])?;
        }
    }
    energies.flush()?;
    Grid { rows: slot_rows }.save(&out_dir.join("slots.png"))?;
    Grid { rows: mask_rows }.save(&out_dir.join("masks.png"))?;
    let aris: Vec<Option<f64>> = chosen
        .iter()
        .enumerate()
        .map(|(b, r)| foreground_ari(&out.reconstruction.masks.index0(b), r))
        .collect::<slotenergy::Result<_>>()?;
    write_json(
        &out_dir.join("summary.json"),
        &json!({ "scenes": picked, "foreground_ari": aris, "mean_energy_per_step": out.trajectory.mean_energies() }),
    )?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn manipulate(
    ckpt: &Path,
    data: &Path,
    data_b: Option<&Path>,
    a: usize,
    b: usize,
    mode: Mode,
    common: &Common,
) -> Result<()> {
    let out_dir = output_dir(common, "manipulate");
    let (model, c) = load_model(ckpt)?;
    let mut cfg = configure(&InferConfig::from_model(&model), common, &out_dir)?;
    cfg.sampler.record_trajectory = true;
    let (_, set_a) = load_scenes(data)?;
    let set_b = match data_b {
        Some(p) => load_scenes(p)?.1,
        None => set_a.clone(),
    };
    let ra = set_a.get(a).with_context(|| format!("scene {a} out of range"))?;
    let rb = set_b.get(b).with_context(|| format!("scene {b} out of range"))?;
    let xa = batch_images::<f32>(&[ra])?;
    let xb = batch_images::<f32>(&[rb])?;
    let weight = match mode {
        Mode::Combine => 1.0,
        Mode::Subtract => -1.0,
    };
    let out = model.infer_composed(&c.params, &[(&xa, 1.0), (&xb, weight)], &cfg.sampler, cfg.seed)?;
    let plain = model.infer(&c.params, &xa, &cfg.sampler, cfg.seed)?;

    let (slots, masks) = slot_tiles(&out.reconstruction, 0);
    let head = [input_tile(ra), input_tile(rb), recon_tile(&out.reconstruction, 0)];
    Grid {
        rows: vec![head.iter().cloned().chain(slots).collect(), head.into_iter().chain(masks).collect()],
    }
    .save(&out_dir.join("result.png"))?;
    step_grid(&model, &c.params, &out, 0)?.save(&out_dir.join("steps.png"))?;
    let mut energies = csv::Writer::from_path(out_dir.join("energies.csv"))?;
    energies.write_record(["step", "energy"])?;
    for (t, e) in energy_rows(&out).iter().enumerate() {
        energies.write_record([t.to_string(), e[0].to_string()])?;
    }
    energies.flush()?;
    let mass = foreground_mask_mass(&out.reconstruction.masks.index0(0), ra);
    let plain_mass = foreground_mask_mass(&plain.reconstruction.masks.index0(0), ra);
    write_json(
        &out_dir.join("summary.json"),
        &json!({
            "mode": format!("{mode:?}").to_lowercase(),
            "scene_a": a,
            "scene_b": b,
            "foreground_mask_mass": mass,
            "plain_foreground_mask_mass": plain_mass,
        }),
    )?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

pub struct EvalFlags {
    pub seeds: u64,
    pub oracle: bool,
    pub probe_train: Option<PathBuf>,
    pub ood: Option<PathBuf>,
    pub k_test: Option<usize>,
}

fn oracle_masks(r: &SceneRecord) -> Tensor<f32> {
    Tensor::new(
        vec![r.masks.len(), r.height, r.width],
        r.masks.iter().flatten().map(|&m| m as u8 as f32).collect(),
    )
}

pub fn eval(ckpt: &Path, data: &Path, flags: &EvalFlags, common: &Common) -> Result<()> {
    let out_dir = output_dir(common, "eval");
    let (model, c) = load_model(ckpt)?;
    let cfg = configure(&InferConfig::from_model(&model), common, &out_dir)?;
    let (manifest, records) = load_scenes(data)?;
    let scenes = cfg.take(&records);
    if flags.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if let (Some(path), None) = (&flags.ood, flags.k_test) {
        bail!("--ood {} needs --k-test", path.display());
    }

    let mut per_scene = csv::Writer::from_path(out_dir.join("ari.csv"))?;
    per_scene.write_record(["seed", "scene", "foreground_ari"])?;
    let mut seed_means = Vec::new();
    for s in 0..flags.seeds {
        let seed = cfg.seed + s;
        let scores: Vec<Option<f64>> = if flags.oracle {
            scenes
                .iter()
                .map(|r| foreground_ari(&oracle_masks(r), r))
                .collect::<slotenergy::Result<_>>()?
        } else {
            let mut v = Vec::new();
            evaluation::for_each_batch(&model, &c.params, scenes, &cfg.sampler, seed, cfg.batch_size, |chunk, out| {
                for (b, r) in chunk.iter().enumerate() {
                    v.push(foreground_ari(&out.reconstruction.masks.index0(b), r)?);
                }
                Ok(())
            })?;
            v
        };
        for (i, a) in scores.iter().enumerate() {
            if let Some(a) = a {
                per_scene.write_record([seed.to_string(), i.to_string(), a.to_string()])?;
            }
        }
        let valid: Vec<f64> = scores.into_iter().flatten().collect();
        seed_means.push(mean_sd(&valid).0);
        eprintln!("seed {seed}: foreground ARI {:.4}", seed_means.last().unwrap());
    }
    per_scene.flush()?;
    let (mean, sd) = mean_sd(&seed_means);
    let mut summary = json!({
        "checkpoint": ckpt,
        "dataset": data,
        "scenes": scenes.len(),
        "oracle": flags.oracle,
        "foreground_ari": { "mean": mean, "sd": sd, "per_seed": seed_means },
    });
    println!("foreground ARI {mean:.4} ± {sd:.4} over {} seed(s)", flags.seeds);

    if let Some(path) = &flags.probe_train {
        let (train_manifest, train_records) = load_scenes(path)?;
        let train = cfg.take(&train_records);
        let fit_samples = collect_probe_samples(&model, &c.params, train, &train_manifest.config, &cfg.sampler, cfg.seed, cfg.batch_size)?;
        let test_samples = collect_probe_samples(&model, &c.params, scenes, &manifest.config, &cfg.sampler, cfg.seed + 1, cfg.batch_size)?;
        let scores = probe_eval(&probe_fit(&fit_samples)?, &test_samples)?;
        let mut w = csv::Writer::from_path(out_dir.join("probe.csv"))?;
        w.write_record(["property", "metric", "value"])?;
        for s in &scores {
            w.write_record([s.property.name(), &s.metric, &s.value.to_string()])?;
            println!("probe {} {} {:.4}", s.property.name(), s.metric, s.value);
        }
        w.flush()?;
        summary["probe"] = json!({ "train_samples": fit_samples.len(), "test_samples": test_samples.len(), "scores": scores });
    }

    if let (Some(path), Some(k_test)) = (&flags.ood, flags.k_test) {
        let (_, ood_records) = load_scenes(path)?;
        let ood = eval_ood_counts(&model, &c.params, cfg.take(&ood_records), k_test, &cfg.sampler, cfg.seed, cfg.batch_size)?;
        let in_dist = SamplerConfig {
            num_slots: k_test,
            ..cfg.sampler.clone()
        };
        let base = evaluate_ari(&model, &c.params, scenes, &in_dist, cfg.seed, cfg.batch_size)?;
        println!("OOD foreground ARI {:.4} (in-distribution {:.4})", ood.mean, base.mean);
        summary["ood"] = json!({ "k_test": k_test, "ari": ood.mean, "sd": ood.sd, "in_distribution_ari": base.mean, "drop": base.mean - ood.mean });
    }
    write_json(&out_dir.join("summary.json"), &summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub space: AblationSpace,
    pub infer: InferConfig,
}

pub fn ablate(ckpt: &Path, data: &Path, common: &Common) -> Result<()> {
    let out_dir = output_dir(common, "ablate");
    let (model, c) = load_model(ckpt)?;
    let defaults = AblateConfig {
        seeds: vec![0],
        space: AblationSpace {
            epsilon: vec![0.01, 0.05, 0.1],
            steps: vec![3, 5],
            noise_scale: vec![1.0, 0.0],
        },
        infer: InferConfig::from_model(&model),
    };
    let cfg = configure(&defaults, common, &out_dir)?;
    let (_, records) = load_scenes(data)?;
    let scenes = cfg.infer.take(&records);
    let points = cfg.space.points();
    let rows = ablation_grid(&points, &cfg.seeds, |p, seed| {
        let s = evaluate_ari(&model, &c.params, scenes, &p.apply(&cfg.infer.sampler), seed, cfg.infer.batch_size)?;
        eprintln!("epsilon {} T {} noise {} seed {seed}: {:.4}", p.epsilon, p.steps, p.noise_scale, s.mean);
        Ok(s.mean)
    });
    let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))?;
    w.write_record(["epsilon", "T", "noise_scale", "mean_ari", "sd_ari", "runs", "failures", "deterministic_limit"])?;
    for r in &rows {
        w.write_record([
            r.point.epsilon.to_string(),
            r.point.steps.to_string(),
            r.point.noise_scale.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.scores.len().to_string(),
            r.errors.len().to_string(),
            (r.point.noise_scale == 0.0).to_string(),
        ])?;
    }
    w.flush()?;
    let summary: Vec<_> = rows
        .iter()
        .map(|r| json!({ "point": r.point, "scores": r.scores, "errors": r.errors, "mean": r.mean, "sd": r.sd, "deterministic_limit": r.point.noise_scale == 0.0 }))
        .collect();
    write_json(&out_dir.join("summary.json"), &json!({ "rows": summary }))?;
    println!("{} grid points written to {}", rows.len(), out_dir.display());
    Ok(())
}

pub fn export(ckpt: &Path, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let m = checkpoint::export(ckpt, out)?;
    println!("exported {} arrays at step {} to {}", m.arrays.len(), m.step, out.display());
    Ok(())
}
