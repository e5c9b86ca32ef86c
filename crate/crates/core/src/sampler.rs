//! Langevin inference of slot latents.
//!
//! One step is `z' = z - ε ∇_z E(z) + sqrt(2ε) · w · η`: a descent step on
//! the energy plus Gaussian noise scaled by `w` (`noise_scale`). With
//! `w = 0` the chain is plain gradient descent on `E`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Graph, Tensor, Var};

use crate::energy::{LatentEnergy, LatentSet};
use crate::params::{Bound, Params};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    StandardNormal,
    /// Per-dimension Gaussian with learned mean and log standard deviation.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of Langevin steps `T`.
    #[serde(rename = "T")]
    pub steps: usize,
    pub epsilon: f64,
    pub noise_scale: f64,
    /// Number of slots `K`.
    #[serde(rename = "K")]
    pub num_slots: usize,
    pub init: LatentInit,
    pub record_trajectory: bool,
    /// Backpropagate through the last step only.
    pub truncate_gradient: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 3,
            epsilon: 0.1,
            noise_scale: 1.0,
            num_slots: 4,
            init: LatentInit::StandardNormal,
            record_trajectory: true,
            truncate_gradient: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale {} must be >= 0",
                self.noise_scale
            )));
        }
        if self.num_slots == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        Ok(())
    }

    fn noise_coef(&self) -> f64 {
        (2.0 * self.epsilon).sqrt() * self.noise_scale
    }
}

/// Parameters of the learned initial distribution, each of length `Dz`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitParams<F: Float> {
    pub mean: Tensor<F>,
    pub log_std: Tensor<F>,
}

pub const INIT_MEAN: &str = "init.mean";
pub const INIT_LOG_STD: &str = "init.log_std";

impl<F: Float> InitParams<F> {
    pub fn zeros(latent_dim: usize) -> Self {
        InitParams {
            mean: Tensor::zeros([latent_dim]),
            log_std: Tensor::zeros([latent_dim]),
        }
    }

    pub fn from_params(p: &Params<F>) -> Option<Self> {
        Some(InitParams {
            mean: p.get(INIT_MEAN)?.clone(),
            log_std: p.get(INIT_LOG_STD)?.clone(),
        })
    }

    pub fn insert_into(&self, p: &mut Params<F>) {
        p.insert(INIT_MEAN, self.mean.clone());
        p.insert(INIT_LOG_STD, self.log_std.clone());
    }
}

/// Recorded chain: `steps + 1` states and, when recorded, energies.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<F: Float> {
    pub states: Vec<LatentSet<F>>,
    /// Per-item energies `(batch,)` at each recorded state.
    pub energies: Vec<Tensor<F>>,
}

impl<F: Float> Trajectory<F> {
    pub fn final_state(&self) -> &LatentSet<F> {
        self.states.last().expect("trajectory always holds the initial state")
    }

    /// Batch-mean energy at each recorded state.
    pub fn mean_energies(&self) -> Vec<f64> {
        self.energies
            .iter()
            .map(|e| e.sum().as_f64() / e.numel() as f64)
            .collect()
    }
}

/// All randomness of one chain: the initialization draw and one noise
/// tensor per step, each `(batch, K, Dz)`.
#[derive(Clone, Debug)]
pub struct ChainNoise<F: Float> {
    pub init: Tensor<F>,
    pub steps: Vec<Tensor<F>>,
}

impl<F: Float> ChainNoise<F> {
    pub fn draw(config: &SamplerConfig, batch: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [batch, config.num_slots, latent_dim];
        let n = batch * config.num_slots * latent_dim;
        let mut draw = || {
            Tensor::new(
                shape.to_vec(),
                (0..n)
                    .map(|_| F::from_f64(StandardNormal.sample(&mut rng)))
                    .collect::<Vec<F>>(),
            )
        };
        let init = draw();
        let steps = (0..config.steps).map(|_| draw()).collect();
        ChainNoise { init, steps }
    }

    /// Applies the same slot permutation to every tensor.
    pub fn permute_slots(&self, perm: &[usize]) -> Self {
        ChainNoise {
            init: crate::energy::permute_slots(&self.init, perm),
            steps: self
                .steps
                .iter()
                .map(|t| crate::energy::permute_slots(t, perm))
                .collect(),
        }
    }
}

fn init_from_noise<F: Float>(
    config: &SamplerConfig,
    init_params: Option<&InitParams<F>>,
    noise: &Tensor<F>,
) -> Result<LatentSet<F>> {
    match config.init {
        LatentInit::StandardNormal => LatentSet::new(noise.clone()),
        LatentInit::Learned => {
            let ip = init_params.ok_or_else(|| {
                Error::Precondition("learned initialization requires init parameters".into())
            })?;
            let dz = noise.shape()[2];
            if ip.mean.numel() != dz || ip.log_std.numel() != dz {
                return Err(Error::Shape(format!(
                    "init parameters must have length {dz}"
                )));
            }
            let mut out = noise.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let d = i % dz;
                *v = ip.mean.data()[d] + ip.log_std.data()[d].exp() * *v;
            }
            LatentSet::new(out)
        }
    }
}

/// Draws `z⁰` for `batch` scenes.
pub fn init_latents<F: Float>(
    config: &SamplerConfig,
    latent_dim: usize,
    init_params: Option<&InitParams<F>>,
    batch: usize,
    seed: u64,
) -> Result<LatentSet<F>> {
    config.validate()?;
    let noise = ChainNoise::<F>::draw(
        &SamplerConfig {
            steps: 0,
            ..config.clone()
        },
        batch,
        latent_dim,
        seed,
    );
    init_from_noise(config, init_params, &noise.init)
}

/// One Langevin update with externally supplied noise.
pub fn langevin_step<F: Float>(
    energy: &impl LatentEnergy<F>,
    z: &LatentSet<F>,
    epsilon: f64,
    noise_scale: f64,
    noise: &Tensor<F>,
) -> Result<LatentSet<F>> {
    Ok(langevin_step_with_energy(energy, z, epsilon, noise_scale, noise)?.0)
}

fn langevin_step_with_energy<F: Float>(
    energy: &impl LatentEnergy<F>,
    z: &LatentSet<F>,
    epsilon: f64,
    noise_scale: f64,
    noise: &Tensor<F>,
) -> Result<(LatentSet<F>, Tensor<F>)> {
    if noise.shape() != z.latents.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match latents {:?}",
            noise.shape(),
            z.latents.shape()
        )));
    }
    let (e, grad) = energy.value_and_grad(&z.latents);
    if !grad.all_finite() {
        let bad = grad.data().iter().filter(|v| !v.is_finite()).count();
        return Err(Error::NonFinite(format!(
            "energy gradient has {bad} non-finite entries (energy {:?}, |z|² {})",
            e.data(),
            z.latents.sq_norm()
        )));
    }
    let eps = F::from_f64(epsilon);
    let c = F::from_f64((2.0 * epsilon).sqrt() * noise_scale);
    let mut next = z.latents.clone();
    for ((v, &g), &n) in next.data_mut().iter_mut().zip(grad.data()).zip(noise.data()) {
        *v = *v - eps * g + c * n;
    }
    Ok((LatentSet { latents: next }, e))
}

/// Runs the chain from explicit noise.
pub fn sample_with_noise<F: Float>(
    energy: &impl LatentEnergy<F>,
    config: &SamplerConfig,
    init_params: Option<&InitParams<F>>,
    noise: &ChainNoise<F>,
) -> Result<Trajectory<F>> {
    config.validate()?;
    if noise.steps.len() != config.steps {
        return Err(Error::Shape("noise does not match the step count".into()));
    }
    let mut z = init_from_noise(config, init_params, &noise.init)?;
    let mut states = vec![z.clone()];
    let mut energies = Vec::new();
    for eta in &noise.steps {
        let (next, e) = langevin_step_with_energy(energy, &z, config.epsilon, config.noise_scale, eta)?;
        if config.record_trajectory {
            energies.push(e);
            states.push(next.clone());
        }
        z = next;
    }
    if config.record_trajectory {
        let g = Graph::new();
        energies.push(energy.energy_var(&g, g.leaf(z.latents.clone())).tensor());
    } else if config.steps > 0 {
        states.push(z);
    }
    Ok(Trajectory { states, energies })
}

/// Initializes and runs `config.steps` Langevin steps for `batch` scenes.
pub fn sample<F: Float>(
    energy: &impl LatentEnergy<F>,
    config: &SamplerConfig,
    latent_dim: usize,
    init_params: Option<&InitParams<F>>,
    batch: usize,
    seed: u64,
) -> Result<Trajectory<F>> {
    let noise = ChainNoise::draw(config, batch, latent_dim, seed);
    sample_with_noise(energy, config, init_params, &noise)
}

/// Differentiable initial state inside a training graph.
pub fn init_latents_graph<'g, F: Float>(
    graph: &'g Graph<F>,
    config: &SamplerConfig,
    params: &Bound<'g, F>,
    noise: &Tensor<F>,
) -> Result<Var<'g, F>> {
    let eta = graph.leaf(noise.clone());
    match config.init {
        LatentInit::StandardNormal => Ok(eta),
        LatentInit::Learned => {
            let (mean, log_std) = params
                .try_var(INIT_MEAN)
                .zip(params.try_var(INIT_LOG_STD))
                .ok_or_else(|| {
                    Error::Precondition("learned initialization requires init parameters".into())
                })?;
            Ok(eta.mul_broadcast(log_std.exp()).add_broadcast(mean))
        }
    }
}

/// Output of a differentiable chain.
pub struct ChainGraph<'g, F: Float> {
    pub states: Vec<Var<'g, F>>,
    /// Per-item energies `(batch,)` at states `0..T`.
    pub energies: Vec<Var<'g, F>>,
}

/// Builds the `T`-step chain inside `graph`, keeping `∇_z E` as graph
/// nodes so that a loss on the final state can be differentiated with
/// respect to everything the energy depends on.
pub fn langevin_chain_graph<'g, F: Float>(
    graph: &'g Graph<F>,
    energy: &dyn Fn(Var<'g, F>) -> Var<'g, F>,
    z0: Var<'g, F>,
    noise_steps: &[Tensor<F>],
    config: &SamplerConfig,
) -> Result<ChainGraph<'g, F>> {
    let mut z = z0;
    let mut states = vec![z];
    let mut energies = Vec::with_capacity(noise_steps.len());
    let coef = config.noise_coef();
    for (t, eta) in noise_steps.iter().enumerate() {
        if config.truncate_gradient && t + 1 == noise_steps.len() {
            z = z.detach();
        }
        let e = energy(z);
        let grad = graph.grad(e.sum_all(), &[z])[0];
        if !grad.value().all_finite() {
            return Err(Error::NonFinite(format!("energy gradient at Langevin step {t}")));
        }
        let mut next = z.sub(grad.scale(config.epsilon));
        if coef != 0.0 {
            next = next.add(graph.leaf(eta.clone()).scale(coef));
        }
        energies.push(e);
        z = next;
        states.push(z);
    }
    Ok(ChainGraph { states, energies })
}

/// `E(z) = ½‖z‖²` per batch item.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadraticEnergy;

impl<F: Float> LatentEnergy<F> for QuadraticEnergy {
    fn energy_var<'g>(&self, _graph: &'g Graph<F>, z: Var<'g, F>) -> Var<'g, F> {
        let s = z.shape();
        z.square().reshape(&[s[0], s[1] * s[2]]).sum_axis(1).scale(0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(steps: usize) -> SamplerConfig {
        SamplerConfig {
            steps,
            num_slots: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_keep_only_the_initialization() {
        let t = sample::<f64>(&QuadraticEnergy, &cfg(0), 4, None, 2, 1).unwrap();
        assert_eq!(t.states.len(), 1);
        assert_eq!(t.energies.len(), 1);
    }

    #[test]
    fn trajectory_has_steps_plus_one_states() {
        for steps in [1, 2, 5] {
            let t = sample::<f64>(&QuadraticEnergy, &cfg(steps), 4, None, 2, 1).unwrap();
            assert_eq!(t.states.len(), steps + 1);
            assert_eq!(t.energies.len(), steps + 1);
        }
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let a = sample::<f64>(&QuadraticEnergy, &cfg(3), 4, None, 2, 9).unwrap();
        let b = sample::<f64>(&QuadraticEnergy, &cfg(3), 4, None, 2, 9).unwrap();
        assert_eq!(a, b);
        let c = sample::<f64>(&QuadraticEnergy, &cfg(3), 4, None, 2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stationary_point_is_fixed_without_noise() {
        let z = LatentSet::new(Tensor::<f64>::zeros([1, 2, 3])).unwrap();
        let noise = Tensor::from_f64([1, 2, 3], &[1.0, -2.0, 0.5, 0.3, 0.1, 9.0]);
        let next = langevin_step(&QuadraticEnergy, &z, 0.1, 0.0, &noise).unwrap();
        assert_eq!(next, z);
    }

    #[test]
    fn quadratic_update_is_closed_form() {
        let z = init_latents::<f64>(&cfg(1), 5, None, 2, 3).unwrap();
        let noise = ChainNoise::<f64>::draw(&cfg(1), 2, 5, 4).steps.remove(0);
        // Powers of two make both forms of the update round identically.
        let (eps, w) = (0.125, 0.75);
        let next = langevin_step(&QuadraticEnergy, &z, eps, w, &noise).unwrap();
        let c = (2.0f64 * eps).sqrt() * w;
        for ((a, &zi), &ni) in next.latents.data().iter().zip(z.latents.data()).zip(noise.data()) {
            assert_eq!(*a, (1.0 - eps) * zi + c * ni);
        }
        let next = langevin_step(&QuadraticEnergy, &z, 0.1, 1.0, &noise).unwrap();
        let c = (0.2f64).sqrt();
        for ((a, &zi), &ni) in next.latents.data().iter().zip(z.latents.data()).zip(noise.data()) {
            assert!((a - ((1.0 - 0.1) * zi + c * ni)).abs() <= 1e-15);
        }
    }

    #[test]
    fn learned_init_with_zero_std_returns_the_mean() {
        let c = SamplerConfig {
            init: LatentInit::Learned,
            ..cfg(0)
        };
        let ip = InitParams {
            mean: Tensor::from_f64([3], &[0.5, -1.0, 2.0]),
            log_std: Tensor::full([3], f64::NEG_INFINITY),
        };
        let z = init_latents(&c, 3, Some(&ip), 2, 0).unwrap();
        for chunk in z.latents.data().chunks(3) {
            assert_eq!(chunk, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn learned_init_requires_parameters() {
        let c = SamplerConfig {
            init: LatentInit::Learned,
            ..cfg(0)
        };
        assert!(matches!(
            init_latents::<f64>(&c, 3, None, 1, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn standard_normal_moments() {
        let c = SamplerConfig {
            num_slots: 1,
            ..cfg(0)
        };
        let z = init_latents::<f64>(&c, 4, None, 25_000, 17).unwrap();
        let n = 25_000.0;
        for d in 0..4 {
            let vals: Vec<f64> = z.latents.data().iter().skip(d).step_by(4).copied().collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.02, "{mean}");
            assert!((var - 1.0).abs() < 0.05, "{var}");
        }
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        struct Broken;
        impl LatentEnergy<f64> for Broken {
            fn energy_var<'g>(&self, _g: &'g Graph<f64>, z: Var<'g, f64>) -> Var<'g, f64> {
                let s = z.shape();
                z.powf(0.5).reshape(&[s[0], s[1] * s[2]]).sum_axis(1)
            }
        }
        let z = LatentSet::new(Tensor::from_f64([1, 1, 2], &[0.0, 1.0])).unwrap();
        let err = langevin_step(&Broken, &z, 0.1, 0.0, &Tensor::zeros([1, 1, 2])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn graph_chain_matches_value_chain() {
        let c = cfg(3);
        let noise = ChainNoise::<f64>::draw(&c, 2, 4, 5);
        let t = sample_with_noise(&QuadraticEnergy, &c, None, &noise).unwrap();
        let g = Graph::new();
        let z0 = g.leaf(noise.init.clone());
        let chain = langevin_chain_graph(&g, &|z| QuadraticEnergy.energy_var(&g, z), z0, &noise.steps, &c)
            .unwrap();
        for (a, b) in chain.states.iter().zip(&t.states) {
            assert!(a.value().max_abs_diff(&b.latents) < 1e-14);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            SamplerConfig { epsilon: 0.0, ..cfg(1) },
            SamplerConfig { noise_scale: -1.0, ..cfg(1) },
            SamplerConfig { num_slots: 0, ..cfg(1) },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
