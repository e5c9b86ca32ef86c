//! Convolutional image encoder producing a position-aware feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Graph, Tensor, Var};

use crate::params::{self, Bound, Params};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Width `Dh` of every feature vector.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_layers: 4,
            channels: 64,
            kernel: 5,
            feature_dim: 64,
        }
    }
}

/// `Nh = grid.0 * grid.1` feature vectors of width `Dh` per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<F: Float> {
    /// `(batch, Nh, Dh)`.
    pub features: Tensor<F>,
    pub grid: (usize, usize),
}

impl<F: Float> FeatureMap<F> {
    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn num_locations(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Self {
        Encoder { config }
    }

    pub fn init_params<F: Float>(&self, p: &mut Params<F>, rng: &mut impl Rng) {
        let c = &self.config;
        let mut cin = 3;
        for l in 0..c.conv_layers {
            params::init_conv(p, &format!("encoder.conv{l}"), c.kernel, cin, c.channels, rng);
            cin = c.channels;
        }
        params::init_linear(p, "encoder.pos", 4, cin, rng);
        params::init_layer_norm(p, "encoder.ln", cin);
        params::init_mlp(p, "encoder.mlp", cin, c.feature_dim, c.feature_dim, rng);
    }

    /// `(batch, h, w, 3)` images to `(batch, h*w, Dh)` features.
    pub fn forward<'g, F: Float>(&self, p: &Bound<'g, F>, images: Var<'g, F>) -> Var<'g, F> {
        let s = images.shape();
        let (b, h, w) = (s[0], s[1], s[2]);
        let mut x = images;
        for l in 0..self.config.conv_layers {
            x = params::conv(p, &format!("encoder.conv{l}"), x).relu();
        }
        let grid = images.graph().leaf(params::positional_grid::<F>(h, w));
        let pos = params::linear(p, "encoder.pos", grid);
        let x = x.add_broadcast(pos);
        let c = x.shape()[3];
        let x = x.reshape(&[b, h * w, c]);
        let x = params::layer_norm(p, "encoder.ln", x);
        params::mlp(p, "encoder.mlp", x)
    }

    fn check_input<F: Float>(&self, images: &Tensor<F>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Shape(format!("expected (batch, h, w, 3) images, got {s:?}")));
        }
        if !images.all_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        Ok(())
    }

    /// Encodes a batch of images with fixed parameters.
    pub fn encode<F: Float>(&self, params: &Params<F>, images: &Tensor<F>) -> Result<FeatureMap<F>> {
        self.check_input(images)?;
        let graph = Graph::new();
        let bound = params.bind(&graph);
        let h = self.forward(&bound, graph.leaf(images.clone()));
        let s = images.shape();
        Ok(FeatureMap {
            features: h.tensor(),
            grid: (s[1], s[2]),
        })
    }
}
