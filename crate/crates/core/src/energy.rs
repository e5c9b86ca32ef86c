//! Permutation-invariant energy functions over a set of slot latents.
//!
//! Two variants are provided:
//!
//! * `Attention`: features attend to the latent set through stacked
//!   pre-norm cross-attention blocks (queries from features, keys and
//!   values from latents), followed by mean pooling and an MLP head.
//! * `Sum`: one shared per-slot energy, each slot broadcast-concatenated
//!   onto the feature map and processed by self-attention blocks; the
//!   total is the sum over slots.

use rand::Rng;
use serde::{Deserialize, Serialize};
use slotenergy_autograd::{Float, Graph, Tensor, Var};

use crate::encoder::FeatureMap;
use crate::params::{self, Bound, Params};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyVariant {
    Attention,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConfig {
    pub variant: EnergyVariant,
    /// Cross-attention blocks of the attention variant.
    pub blocks: usize,
    /// Self-attention blocks of the sum variant.
    pub self_attention_blocks: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            variant: EnergyVariant::Attention,
            blocks: 2,
            self_attention_blocks: 2,
        }
    }
}

/// A batch of latent sets, `(batch, K, Dz)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet<F: Float> {
    pub latents: Tensor<F>,
}

impl<F: Float> LatentSet<F> {
    pub fn new(latents: Tensor<F>) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("latents must be (batch, K, Dz), got {s:?}")));
        }
        if s[1] == 0 {
            return Err(Error::Shape("latent set with K = 0".into()));
        }
        Ok(LatentSet { latents })
    }

    pub fn batch(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn num_slots(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.latents.shape()[2]
    }

    /// Reorders slots: output slot `i` is input slot `perm[i]`.
    pub fn permute_slots(&self, perm: &[usize]) -> Self {
        LatentSet {
            latents: permute_slots(&self.latents, perm),
        }
    }
}

/// Reorders axis 1 of a `(batch, K, ...)` tensor.
pub fn permute_slots<F: Float>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let s = t.shape();
    let (b, k) = (s[0], s[1]);
    assert_eq!(perm.len(), k, "permutation length mismatch");
    let inner: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(t.numel());
    for bi in 0..b {
        for &src in perm {
            let off = (bi * k + src) * inner;
            out.extend_from_slice(&t.data()[off..off + inner]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct EnergyModel {
    pub config: EnergyConfig,
    pub feature_dim: usize,
    pub latent_dim: usize,
}

impl EnergyModel {
    pub fn new(config: EnergyConfig, feature_dim: usize, latent_dim: usize) -> Self {
        EnergyModel {
            config,
            feature_dim,
            latent_dim,
        }
    }

    pub fn init_params<F: Float>(&self, p: &mut Params<F>, rng: &mut impl Rng) {
        let (dh, dz) = (self.feature_dim, self.latent_dim);
        match self.config.variant {
            EnergyVariant::Attention => {
                for l in 0..self.config.blocks {
                    let n = format!("energy.block{l}");
                    params::init_layer_norm(p, &format!("{n}.ln_h"), dh);
                    params::init_layer_norm(p, &format!("{n}.ln_z"), dz);
                    params::init_linear(p, &format!("{n}.q"), dh, dh, rng);
                    params::init_linear(p, &format!("{n}.k"), dz, dh, rng);
                    params::init_linear(p, &format!("{n}.v"), dz, dh, rng);
                    params::init_linear(p, &format!("{n}.o"), dh, dh, rng);
                    params::init_layer_norm(p, &format!("{n}.ln_mlp"), dh);
                    params::init_mlp(p, &format!("{n}.mlp"), dh, dh, dh, rng);
                }
                params::init_mlp(p, "energy.head", dh, dh, 1, rng);
            }
            EnergyVariant::Sum => {
                let dj = 2 * dh;
                params::init_mlp(p, "energy.latent_proj", dz, dh, dh, rng);
                for l in 0..self.config.self_attention_blocks {
                    let n = format!("energy.self{l}");
                    params::init_layer_norm(p, &format!("{n}.ln"), dj);
                    for proj in ["q", "k", "v", "o"] {
                        params::init_linear(p, &format!("{n}.{proj}"), dj, dj, rng);
                    }
                    params::init_layer_norm(p, &format!("{n}.ln_mlp"), dj);
                    params::init_mlp(p, &format!("{n}.mlp"), dj, dj, dj, rng);
                }
                params::init_mlp(p, "energy.head", dj, dh, 1, rng);
            }
        }
    }

    /// Attention sub-layer of block `name`, without the residual.
    pub(crate) fn cross_attention<'g, F: Float>(
        &self,
        p: &Bound<'g, F>,
        name: &str,
        h: Var<'g, F>,
        z: Var<'g, F>,
    ) -> Var<'g, F> {
        let hn = params::layer_norm(p, &format!("{name}.ln_h"), h);
        let zn = params::layer_norm(p, &format!("{name}.ln_z"), z);
        let q = params::linear(p, &format!("{name}.q"), hn);
        let k = params::linear(p, &format!("{name}.k"), zn);
        let v = params::linear(p, &format!("{name}.v"), zn);
        let scores = q.gemm(k, false, true).scale(1.0 / (self.feature_dim as f64).sqrt());
        let attn = scores.softmax(2);
        params::linear(p, &format!("{name}.o"), attn.matmul(v))
    }

    /// One pre-norm cross-attention block: `(batch, Nh, Dh)` features
    /// attending over `(batch, K, Dz)` latents.
    pub fn cross_attention_block_graph<'g, F: Float>(
        &self,
        p: &Bound<'g, F>,
        block: usize,
        h: Var<'g, F>,
        z: Var<'g, F>,
    ) -> Var<'g, F> {
        let name = format!("energy.block{block}");
        let h1 = self.cross_attention(p, &name, h, z).add(h);
        let hn = params::layer_norm(p, &format!("{name}.ln_mlp"), h1);
        params::mlp(p, &format!("{name}.mlp"), hn).add(h1)
    }

    fn self_attention_block<'g, F: Float>(
        &self,
        p: &Bound<'g, F>,
        name: &str,
        x: Var<'g, F>,
    ) -> Var<'g, F> {
        let d = *x.shape().last().unwrap();
        let xn = params::layer_norm(p, &format!("{name}.ln"), x);
        let q = params::linear(p, &format!("{name}.q"), xn);
        let k = params::linear(p, &format!("{name}.k"), xn);
        let v = params::linear(p, &format!("{name}.v"), xn);
        let attn = q.gemm(k, false, true).scale(1.0 / (d as f64).sqrt()).softmax(2);
        let x1 = params::linear(p, &format!("{name}.o"), attn.matmul(v)).add(x);
        let xn = params::layer_norm(p, &format!("{name}.ln_mlp"), x1);
        params::mlp(p, &format!("{name}.mlp"), xn).add(x1)
    }

    /// Per-slot energies of the sum variant, `(batch, K)`.
    pub fn slot_energies_graph<'g, F: Float>(
        &self,
        p: &Bound<'g, F>,
        h: Var<'g, F>,
        z: Var<'g, F>,
    ) -> Var<'g, F> {
        let hs = h.shape();
        let zs = z.shape();
        let (b, nh, dh) = (hs[0], hs[1], hs[2]);
        let k = zs[1];
        let zp = params::mlp(p, "energy.latent_proj", z);
        let hk = h.expand(1, k);
        let zk = zp.expand(2, nh);
        let mut x = hk.concat_last(zk).reshape(&[b * k, nh, 2 * dh]);
        for l in 0..self.config.self_attention_blocks {
            x = self.self_attention_block(p, &format!("energy.self{l}"), x);
        }
        let pooled = x.mean_axis(1);
        params::mlp(p, "energy.head", pooled).reshape(&[b, k])
    }

    /// Energy per batch item, `(batch,)`.
    pub fn energy_graph<'g, F: Float>(
        &self,
        p: &Bound<'g, F>,
        h: Var<'g, F>,
        z: Var<'g, F>,
    ) -> Var<'g, F> {
        match self.config.variant {
            EnergyVariant::Attention => {
                let mut x = h;
                for l in 0..self.config.blocks {
                    x = self.cross_attention_block_graph(p, l, x, z);
                }
                let b = x.shape()[0];
                params::mlp(p, "energy.head", x.mean_axis(1)).reshape(&[b])
            }
            EnergyVariant::Sum => self.slot_energies_graph(p, h, z).sum_axis(1),
        }
    }

    fn check_shapes<F: Float>(&self, h: &Tensor<F>, z: &Tensor<F>) -> Result<()> {
        let (hs, zs) = (h.shape(), z.shape());
        if hs.len() != 3 || hs[2] != self.feature_dim {
            return Err(Error::Shape(format!(
                "features must be (batch, Nh, {}), got {hs:?}",
                self.feature_dim
            )));
        }
        if zs.len() != 3 || zs[2] != self.latent_dim {
            return Err(Error::Shape(format!(
                "latents must be (batch, K, {}), got {zs:?}",
                self.latent_dim
            )));
        }
        if zs[1] == 0 {
            return Err(Error::Shape("latent set with K = 0".into()));
        }
        if hs[0] != zs[0] {
            return Err(Error::Shape(format!(
                "batch mismatch: {} feature maps, {} latent sets",
                hs[0], zs[0]
            )));
        }
        Ok(())
    }

    /// Output features of cross-attention block `block`.
    pub fn cross_attention_block<F: Float>(
        &self,
        params: &Params<F>,
        block: usize,
        h: &FeatureMap<F>,
        z: &LatentSet<F>,
    ) -> Result<FeatureMap<F>> {
        self.check_shapes(&h.features, &z.latents)?;
        if block >= self.config.blocks {
            return Err(Error::Shape(format!("no cross-attention block {block}")));
        }
        let g = Graph::new();
        let b = params.bind(&g);
        let out = self.cross_attention_block_graph(
            &b,
            block,
            g.leaf(h.features.clone()),
            g.leaf(z.latents.clone()),
        );
        Ok(FeatureMap {
            features: out.tensor(),
            grid: h.grid,
        })
    }

    /// Energy of the attention variant, one value per batch item.
    pub fn energy_attention<F: Float>(
        &self,
        params: &Params<F>,
        h: &FeatureMap<F>,
        z: &LatentSet<F>,
    ) -> Result<Tensor<F>> {
        if self.config.variant != EnergyVariant::Attention {
            return Err(Error::Precondition("model is not the attention variant".into()));
        }
        self.energy(params, h, z)
    }

    /// Energy of the sum variant, one value per batch item.
    pub fn energy_sum<F: Float>(
        &self,
        params: &Params<F>,
        h: &FeatureMap<F>,
        z: &LatentSet<F>,
    ) -> Result<Tensor<F>> {
        if self.config.variant != EnergyVariant::Sum {
            return Err(Error::Precondition("model is not the sum variant".into()));
        }
        self.energy(params, h, z)
    }

    pub fn energy<F: Float>(
        &self,
        params: &Params<F>,
        h: &FeatureMap<F>,
        z: &LatentSet<F>,
    ) -> Result<Tensor<F>> {
        self.check_shapes(&h.features, &z.latents)?;
        let g = Graph::new();
        let b = params.bind(&g);
        let e = self.energy_graph(&b, g.leaf(h.features.clone()), g.leaf(z.latents.clone()));
        Ok(e.tensor())
    }
}

/// Anything that maps a `(batch, K, Dz)` latent tensor to per-item energies.
pub trait LatentEnergy<F: Float> {
    /// Energies `(batch,)` as a differentiable node of `graph`.
    fn energy_var<'g>(&self, graph: &'g Graph<F>, z: Var<'g, F>) -> Var<'g, F>;

    /// Per-item energies and `∇_z` of their sum.
    fn value_and_grad(&self, z: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
        let g = Graph::new();
        let zv = g.leaf(z.clone());
        let e = self.energy_var(&g, zv);
        let grad = g.grad(e.sum_all(), &[zv])[0].tensor();
        (e.tensor(), grad)
    }
}

/// A weighted sum of energies over several conditioning feature maps,
/// sharing one set of parameters: `z ↦ Σ_i w_i E(h_i, z)`.
pub struct EnergyFunction<'a, F: Float> {
    model: &'a EnergyModel,
    params: &'a Params<F>,
    terms: Vec<(Tensor<F>, f64)>,
}

impl<'a, F: Float> EnergyFunction<'a, F> {
    pub fn model(&self) -> &EnergyModel {
        self.model
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn batch(&self) -> usize {
        self.terms[0].0.shape()[0]
    }
}

impl<F: Float> LatentEnergy<F> for EnergyFunction<'_, F> {
    fn energy_var<'g>(&self, graph: &'g Graph<F>, z: Var<'g, F>) -> Var<'g, F> {
        let bound = self.params.bind(graph);
        let terms: Vec<_> = self
            .terms
            .iter()
            .map(|(h, w)| (graph.leaf(h.clone()), *w))
            .collect();
        BoundEnergy {
            model: self.model,
            params: &bound,
            terms,
        }
        .eval(z)
    }
}

/// Energy whose parameters and features already live in a graph, so that
/// gradients reach them.
pub struct BoundEnergy<'a, 'g, F: Float> {
    pub model: &'a EnergyModel,
    pub params: &'a Bound<'g, F>,
    pub terms: Vec<(Var<'g, F>, f64)>,
}

impl<'g, F: Float> BoundEnergy<'_, 'g, F> {
    pub fn eval(&self, z: Var<'g, F>) -> Var<'g, F> {
        let mut total: Option<Var<'g, F>> = None;
        for &(h, w) in &self.terms {
            let e = self.model.energy_graph(self.params, h, z);
            let e = if w == 1.0 { e } else { e.scale(w) };
            total = Some(match total {
                None => e,
                Some(acc) => acc.add(e),
            });
        }
        total.expect("energy with no terms")
    }
}

/// Builds `z ↦ Σ_i w_i E(h_i, z)` from `(features, weight)` terms.
pub fn compose_energies<'a, F: Float>(
    model: &'a EnergyModel,
    params: &'a Params<F>,
    terms: Vec<(FeatureMap<F>, f64)>,
) -> Result<EnergyFunction<'a, F>> {
    if terms.is_empty() {
        return Err(Error::Precondition("energy composition needs at least one term".into()));
    }
    let shape = terms[0].0.features.shape().to_vec();
    for (h, w) in &terms {
        if h.features.shape() != shape.as_slice() {
            return Err(Error::Shape("composed feature maps differ in shape".into()));
        }
        if shape.len() != 3 || shape[2] != model.feature_dim {
            return Err(Error::Shape(format!("feature map shape {shape:?}")));
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("composition weight".into()));
        }
    }
    Ok(EnergyFunction {
        model,
        params,
        terms: terms.into_iter().map(|(h, w)| (h.features, w)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mlp_leaves_the_attention_residual() {
        let m = EnergyModel::new(EnergyConfig::default(), 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::<f64>::new();
        m.init_params(&mut p, &mut rng);
        for n in ["energy.block0.mlp.fc2.w", "energy.block0.mlp.fc2.b"] {
            p.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let h = params::normal_tensor::<f64>(&[2, 5, 6], 1.0, &mut rng);
        let z = params::normal_tensor::<f64>(&[2, 3, 4], 1.0, &mut rng);
        let g = Graph::new();
        let b = p.bind(&g);
        let (hv, zv) = (g.leaf(h), g.leaf(z));
        let block = m.cross_attention_block_graph(&b, 0, hv, zv).tensor();
        let residual = m.cross_attention(&b, "energy.block0", hv, zv).add(hv).tensor();
        assert_eq!(block, residual);
    }
}
