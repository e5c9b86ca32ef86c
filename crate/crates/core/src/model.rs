//! The full model: encoder, energy, sampler and decoder wired together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Graph, Tensor, Var};

use crate::decoder::{DecodedGraph, Decoder, DecoderConfig, SceneReconstruction};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap};
use crate::energy::{compose_energies, EnergyConfig, EnergyFunction, EnergyModel};
use crate::params::{Bound, Params};
use crate::sampler::{
    self, ChainNoise, InitParams, LatentInit, SamplerConfig, Trajectory,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Slot latent width `Dz`.
    pub latent_dim: usize,
    pub encoder: EncoderConfig,
    pub energy: EnergyConfig,
    pub decoder: DecoderConfig,
    pub sampler: SamplerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 48,
            width: 48,
            latent_dim: 64,
            encoder: EncoderConfig::default(),
            energy: EnergyConfig::default(),
            decoder: DecoderConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("latent_dim", self.latent_dim),
            ("encoder.channels", self.encoder.channels),
            ("encoder.feature_dim", self.encoder.feature_dim),
            ("decoder.channels", self.decoder.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, k) in [("encoder.kernel", self.encoder.kernel), ("decoder.kernel", self.decoder.kernel)] {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be odd, got {k}")));
            }
        }
        if self.energy.blocks == 0 || self.energy.self_attention_blocks == 0 {
            return Err(Error::InvalidConfig("energy needs at least one block".into()));
        }
        self.sampler.validate()
    }
}

/// Result of inference on a batch.
#[derive(Clone, Debug)]
pub struct Inference<F: Float> {
    pub trajectory: Trajectory<F>,
    pub reconstruction: SceneReconstruction<F>,
}

/// Nodes of one training forward pass.
pub struct TrainGraph<'g, F: Float> {
    pub loss: Var<'g, F>,
    /// Per-item energies at each Langevin step, `T` entries.
    pub energies: Vec<Var<'g, F>>,
    pub decoded: DecodedGraph<'g, F>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub energy: EnergyModel,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            encoder: Encoder::new(config.encoder.clone()),
            energy: EnergyModel::new(
                config.energy.clone(),
                config.encoder.feature_dim,
                config.latent_dim,
            ),
            decoder: Decoder::new(
                config.decoder.clone(),
                config.latent_dim,
                config.height,
                config.width,
            ),
            config,
        })
    }

    pub fn init_params<F: Float>(&self, seed: u64) -> Params<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        self.encoder.init_params(&mut p, &mut rng);
        self.energy.init_params(&mut p, &mut rng);
        self.decoder.init_params(&mut p, &mut rng);
        if self.config.sampler.init == LatentInit::Learned {
            InitParams::zeros(self.config.latent_dim).insert_into(&mut p);
        }
        p
    }

    fn check_images<F: Float>(&self, images: &Tensor<F>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.height || s[2] != self.config.width || s[3] != 3 {
            return Err(Error::Shape(format!(
                "expected (batch, {}, {}, 3) images, got {s:?}",
                self.config.height, self.config.width
            )));
        }
        Ok(())
    }

    pub fn features<F: Float>(&self, params: &Params<F>, images: &Tensor<F>) -> Result<FeatureMap<F>> {
        self.check_images(images)?;
        self.encoder.encode(params, images)
    }

    /// Energy `z ↦ E(h, z)` conditioned on one batch of images.
    pub fn energy_for<'a, F: Float>(
        &'a self,
        params: &'a Params<F>,
        images: &Tensor<F>,
    ) -> Result<EnergyFunction<'a, F>> {
        let h = self.features(params, images)?;
        compose_energies(&self.energy, params, vec![(h, 1.0)])
    }

    pub fn decode<F: Float>(&self, params: &Params<F>, z: &Tensor<F>) -> Result<SceneReconstruction<F>> {
        self.decoder.decode(params, z)
    }

    /// Samples latents from `energy` with `sampler` and decodes the final
    /// state.
    pub fn infer_with_energy<F: Float>(
        &self,
        params: &Params<F>,
        energy: &EnergyFunction<'_, F>,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Inference<F>> {
        let init = InitParams::from_params(params);
        let trajectory = sampler::sample(
            energy,
            sampler,
            self.config.latent_dim,
            init.as_ref(),
            energy.batch(),
            seed,
        )?;
        let reconstruction = self.decode(params, &trajectory.final_state().latents)?;
        Ok(Inference {
            trajectory,
            reconstruction,
        })
    }

    pub fn infer<F: Float>(
        &self,
        params: &Params<F>,
        images: &Tensor<F>,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Inference<F>> {
        let energy = self.energy_for(params, images)?;
        self.infer_with_energy(params, &energy, sampler, seed)
    }

    /// Inference under a weighted sum of energies, one term per image batch.
    /// Weights `(1, 1)` combine two scenes; `(1, -1)` subtracts the second.
    pub fn infer_composed<F: Float>(
        &self,
        params: &Params<F>,
        terms: &[(&Tensor<F>, f64)],
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Inference<F>> {
        let features = terms
            .iter()
            .map(|(x, w)| Ok((self.features(params, x)?, *w)))
            .collect::<Result<Vec<_>>>()?;
        let energy = compose_energies(&self.energy, params, features)?;
        self.infer_with_energy(params, &energy, sampler, seed)
    }

    /// Decodes every recorded Langevin state, one reconstruction per step.
    pub fn decode_trajectory<F: Float>(
        &self,
        params: &Params<F>,
        trajectory: &Trajectory<F>,
    ) -> Result<Vec<SceneReconstruction<F>>> {
        trajectory
            .states
            .iter()
            .map(|z| self.decode(params, &z.latents))
            .collect()
    }

    /// Builds the differentiable loss: encode, run the Langevin chain from
    /// `noise`, decode the final state and take the reconstruction MSE.
    pub fn loss_graph<'g, F: Float>(
        &self,
        graph: &'g Graph<F>,
        params: &Bound<'g, F>,
        images: &Tensor<F>,
        noise: &ChainNoise<F>,
    ) -> Result<TrainGraph<'g, F>> {
        self.check_images(images)?;
        let x = graph.leaf(images.clone());
        let h = self.encoder.forward(params, x);
        let sampler = &self.config.sampler;
        let z0 = sampler::init_latents_graph(graph, sampler, params, &noise.init)?;
        let energy = |z: Var<'g, F>| self.energy.energy_graph(params, h, z);
        let chain = sampler::langevin_chain_graph(graph, &energy, z0, &noise.steps, sampler)?;
        let z_final = *chain.states.last().expect("chain holds its initial state");
        let decoded = self.decoder.forward(params, z_final);
        let loss = mse_graph(decoded.image, x);
        Ok(TrainGraph {
            loss,
            energies: chain.energies,
            decoded,
        })
    }
}

/// Mean of squared differences over all entries, as a rank-0 node.
pub fn mse_graph<'g, F: Float>(a: Var<'g, F>, b: Var<'g, F>) -> Var<'g, F> {
    let n = a.value().numel();
    a.sub(b).square().sum_all().scale(1.0 / n as f64)
}
