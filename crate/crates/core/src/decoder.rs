//! Spatial broadcast decoder and softmax slot compositing.

use rand::Rng;
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Graph, Tensor, Var};

use crate::params::{self, Bound, Params};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub conv_layers: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            conv_layers: 4,
            channels: 32,
            kernel: 5,
        }
    }
}

/// Decoded scene for a batch: all tensors carry a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneReconstruction<F: Float> {
    /// `(batch, h, w, 3)`.
    pub image: Tensor<F>,
    /// `(batch, K, h, w, 3)`.
    pub slot_rgb: Tensor<F>,
    /// `(batch, K, h, w)`, summing to one over `K`.
    pub masks: Tensor<F>,
    /// `(batch, K, h, w)`.
    pub alpha_logits: Tensor<F>,
}

impl<F: Float> SceneReconstruction<F> {
    pub fn num_slots(&self) -> usize {
        self.masks.shape()[1]
    }
}

/// Graph nodes of a decoded batch.
pub struct DecodedGraph<'g, F: Float> {
    pub image: Var<'g, F>,
    pub slot_rgb: Var<'g, F>,
    pub masks: Var<'g, F>,
    pub alpha_logits: Var<'g, F>,
}

impl<F: Float> DecodedGraph<'_, F> {
    pub fn values(&self) -> SceneReconstruction<F> {
        SceneReconstruction {
            image: self.image.tensor(),
            slot_rgb: self.slot_rgb.tensor(),
            masks: self.masks.tensor(),
            alpha_logits: self.alpha_logits.tensor(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub latent_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl Decoder {
    pub fn new(config: DecoderConfig, latent_dim: usize, height: usize, width: usize) -> Self {
        Decoder {
            config,
            latent_dim,
            height,
            width,
        }
    }

    pub fn init_params<F: Float>(&self, p: &mut Params<F>, rng: &mut impl Rng) {
        let c = &self.config;
        params::init_linear(p, "decoder.pos", 4, self.latent_dim, rng);
        let mut cin = self.latent_dim;
        for l in 0..c.conv_layers {
            params::init_conv(p, &format!("decoder.conv{l}"), c.kernel, cin, c.channels, rng);
            cin = c.channels;
        }
        params::init_linear(p, "decoder.out", cin, 4, rng);
    }

    /// Per-slot RGB `(n, h, w, 3)` and alpha logits `(n, h, w)` for `n`
    /// latents of shape `(n, Dz)`.
    pub fn decode_slots_graph<'g, F: Float>(
        &self,
        p: &Bound<'g, F>,
        z: Var<'g, F>,
    ) -> (Var<'g, F>, Var<'g, F>) {
        let n = z.shape()[0];
        let (h, w) = (self.height, self.width);
        let grid = z.graph().leaf(params::positional_grid::<F>(h, w));
        let pos = params::linear(p, "decoder.pos", grid);
        let mut x = z.expand(1, w).expand(1, h).add_broadcast(pos);
        for l in 0..self.config.conv_layers {
            x = params::conv(p, &format!("decoder.conv{l}"), x).relu();
        }
        let out = params::linear(p, "decoder.out", x);
        let rgb = out.slice_last(0, 3);
        let alpha = out.slice_last(3, 1).reshape(&[n, h, w]);
        (rgb, alpha)
    }

    /// Decodes `(batch, K, Dz)` latents and composites the slots.
    pub fn forward<'g, F: Float>(&self, p: &Bound<'g, F>, z: Var<'g, F>) -> DecodedGraph<'g, F> {
        let s = z.shape();
        let (b, k) = (s[0], s[1]);
        let (h, w) = (self.height, self.width);
        let (rgb, alpha) = self.decode_slots_graph(p, z.reshape(&[b * k, s[2]]));
        combine_graph(rgb.reshape(&[b, k, h, w, 3]), alpha.reshape(&[b, k, h, w]))
    }

    fn check_latent<F: Float>(&self, z: &Tensor<F>) -> Result<()> {
        if z.shape().last() != Some(&self.latent_dim) {
            return Err(Error::Shape(format!(
                "latent of shape {:?} does not end in Dz = {}",
                z.shape(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Decodes one latent `(Dz,)` to RGB `(h, w, 3)` and alpha logits `(h, w)`.
    pub fn broadcast_decode_slot<F: Float>(
        &self,
        params: &Params<F>,
        z: &Tensor<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_latent(z)?;
        if z.shape().len() != 1 {
            return Err(Error::Shape("expected a single latent vector".into()));
        }
        let g = Graph::new();
        let b = params.bind(&g);
        let (rgb, alpha) = self.decode_slots_graph(&b, g.leaf(z.clone().reshape([1, self.latent_dim])));
        Ok((
            rgb.tensor().reshape([self.height, self.width, 3]),
            alpha.tensor().reshape([self.height, self.width]),
        ))
    }

    /// Decodes and composites a batch of latent sets `(batch, K, Dz)`.
    pub fn decode<F: Float>(&self, params: &Params<F>, z: &Tensor<F>) -> Result<SceneReconstruction<F>> {
        self.check_latent(z)?;
        if z.shape().len() != 3 || z.shape()[1] == 0 {
            return Err(Error::Shape(format!("latents must be (batch, K>0, Dz), got {:?}", z.shape())));
        }
        let g = Graph::new();
        let b = params.bind(&g);
        Ok(self.forward(&b, g.leaf(z.clone())).values())
    }
}

/// Softmax over the slot axis of `(batch, K, h, w)` logits and the
/// mask-weighted sum of `(batch, K, h, w, 3)` colors.
pub fn combine_graph<'g, F: Float>(rgb: Var<'g, F>, alpha: Var<'g, F>) -> DecodedGraph<'g, F> {
    let masks = alpha.softmax(1);
    let image = masks.expand(4, 3).mul(rgb).sum_axis(1);
    DecodedGraph {
        image,
        slot_rgb: rgb,
        masks,
        alpha_logits: alpha,
    }
}

/// Composites slot outputs: `rgb (batch, K, h, w, 3)`, `alpha (batch, K, h, w)`.
pub fn combine_slots<F: Float>(rgb: &Tensor<F>, alpha: &Tensor<F>) -> Result<SceneReconstruction<F>> {
    let (rs, a) = (rgb.shape(), alpha.shape());
    if a.len() != 4 || a[1] == 0 || rs.len() != 5 || rs[..4] != a[..] || rs[4] != 3 {
        return Err(Error::Shape(format!("cannot combine rgb {rs:?} with alpha {a:?}")));
    }
    let g = Graph::new();
    Ok(combine_graph(g.leaf(rgb.clone()), g.leaf(alpha.clone())).values())
}
