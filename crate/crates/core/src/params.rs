//! Named parameter storage and layer building blocks shared by the models.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use slotenergy_autograd::{Float, Graph, Tensor, Var};

use crate::{Error, Result};

/// Model parameters keyed by dotted names such as `encoder.conv0.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<F: Float> {
    map: BTreeMap<String, Rc<Tensor<F>>>,
}

impl<F: Float> Params<F> {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.map.insert(name.into(), Rc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.map.get_mut(name).map(Rc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), Rc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Same-shaped zero tensors for every parameter.
    pub fn zeros_like(&self) -> Self {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Rc::new(Tensor::zeros(v.shape()))))
                .collect(),
        }
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Rc::new(v.cast())))
                .collect(),
        }
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &Params<F>) -> Result<()> {
        for (name, t) in &reference.map {
            match self.map.get(name) {
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
                Some(v) if v.shape() != t.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.map.keys().find(|k| !reference.map.contains_key(*k)) {
            return Err(Error::Shape(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Adds every parameter to `graph` as a leaf.
    pub fn bind<'g>(&self, graph: &'g Graph<F>) -> Bound<'g, F> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf_rc(v.clone())))
                .collect(),
        }
    }
}

/// Parameters placed in a graph.
pub struct Bound<'g, F: Float> {
    vars: BTreeMap<String, Var<'g, F>>,
}

impl<'g, F: Float> Bound<'g, F> {
    pub fn var(&self, name: &str) -> Var<'g, F> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'g, F>> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var<'g, F>> {
        self.vars.values().copied().collect()
    }

    /// Gradients of `loss` with respect to every bound parameter.
    pub fn grad(&self, graph: &'g Graph<F>, loss: Var<'g, F>) -> Params<F> {
        let vars = self.vars();
        let grads = graph.grad(loss, &vars);
        let mut out = Params::new();
        for (name, g) in self.vars.keys().zip(grads) {
            out.map.insert(name.clone(), g.value());
        }
        out
    }
}

pub(crate) fn normal_tensor<F: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect(),
    )
}

/// Dense layer `(din, dout)` with LeCun-normal weights and zero bias.
pub(crate) fn init_linear<F: Float>(
    p: &mut Params<F>,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut impl Rng,
) {
    p.insert(
        format!("{name}.w"),
        normal_tensor(&[din, dout], (1.0 / din as f64).sqrt(), rng),
    );
    p.insert(format!("{name}.b"), Tensor::zeros([dout]));
}

pub(crate) fn init_conv<F: Float>(
    p: &mut Params<F>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) {
    let fan_in = (k * k * cin) as f64;
    p.insert(
        format!("{name}.w"),
        normal_tensor(&[k, k, cin, cout], (1.0 / fan_in).sqrt(), rng),
    );
    p.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

pub(crate) fn init_layer_norm<F: Float>(p: &mut Params<F>, name: &str, dim: usize) {
    p.insert(format!("{name}.scale"), Tensor::full([dim], F::one()));
    p.insert(format!("{name}.bias"), Tensor::zeros([dim]));
}

pub(crate) fn linear<'g, F: Float>(p: &Bound<'g, F>, name: &str, x: Var<'g, F>) -> Var<'g, F> {
    x.linear(p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))))
}

pub(crate) fn conv<'g, F: Float>(p: &Bound<'g, F>, name: &str, x: Var<'g, F>) -> Var<'g, F> {
    x.conv2d(p.var(&format!("{name}.w")))
        .add_broadcast(p.var(&format!("{name}.b")))
}

const LAYER_NORM_EPS: f64 = 1e-6;

/// Layer norm over the last axis with learned scale and offset.
pub(crate) fn layer_norm<'g, F: Float>(p: &Bound<'g, F>, name: &str, x: Var<'g, F>) -> Var<'g, F> {
    let shape = x.shape();
    let last = shape.len() - 1;
    let d = shape[last];

    let mean = x.mean_axis(last).expand(last, d);
    let centered = x.sub(mean);
    let var = centered.square().mean_axis(last);
    let inv = var.add_scalar(LAYER_NORM_EPS).powf(-0.5).expand(last, d);
    centered
        .mul(inv)
        .mul_broadcast(p.var(&format!("{name}.scale")))
        .add_broadcast(p.var(&format!("{name}.bias")))
}

/// `linear -> relu -> linear` with layers `{name}.fc1` and `{name}.fc2`.
pub(crate) fn mlp<'g, F: Float>(p: &Bound<'g, F>, name: &str, x: Var<'g, F>) -> Var<'g, F> {
    let h = linear(p, &format!("{name}.fc1"), x).relu();
    linear(p, &format!("{name}.fc2"), h)
}

pub(crate) fn init_mlp<F: Float>(
    p: &mut Params<F>,
    name: &str,
    din: usize,
    hidden: usize,
    dout: usize,
    rng: &mut impl Rng,
) {
    init_linear(p, &format!("{name}.fc1"), din, hidden, rng);
    init_linear(p, &format!("{name}.fc2"), hidden, dout, rng);
}

/// Four border-distance ramps `(left, right, top, bottom)` per cell, shape
/// `(h, w, 4)`. A ramp of length one is identically zero.
pub fn positional_grid<F: Float>(h: usize, w: usize) -> Tensor<F> {
    let ramp = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            data.push(F::from_f64(ramp(j, w)));
            data.push(F::from_f64(ramp(w - 1 - j, w)));
            data.push(F::from_f64(ramp(i, h)));
            data.push(F::from_f64(ramp(h - 1 - i, h)));
        }
    }
    Tensor::new(vec![h, w, 4], data)
}
