use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::kernels;
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    Exp(usize),
    Relu(usize),
    Reshape(usize),
    Expand { x: usize, axis: usize },
    SumAxis { x: usize, axis: usize, len: usize },
    Transpose(usize),
    Gemm { a: usize, b: usize, ta: bool, tb: bool },
    Softmax { x: usize, axis: usize },
    ConcatLast(usize, usize),
    SliceLast { x: usize, start: usize },
    PadLast { x: usize, start: usize },
    Conv2d { x: usize, w: usize },
    ConvWeightGrad { x: usize, g: usize },
    FlipTranspose(usize),
}

impl Op {
    fn parents(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            Neg(a) | Scale(a, _) | AddScalar(a) | Powf(a, _) | Exp(a) | Relu(a) | Reshape(a)
            | Transpose(a) | FlipTranspose(a) => ([a, 0], 1),
            Expand { x, .. }
            | SumAxis { x, .. }
            | Softmax { x, .. }
            | SliceLast { x, .. }
            | PadLast { x, .. } => ([x, 0], 1),
            Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatLast(a, b) => ([a, b], 2),
            Gemm { a, b, .. } => ([a, b], 2),
            Conv2d { x, w } => ([x, w], 2),
            ConvWeightGrad { x, g, .. } => ([x, g], 2),
        }
    }
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op,
}

/// Append-only computation graph.
///
/// Nodes are never removed; a graph is meant to live for one forward and
/// backward pass and then be dropped.
pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Float> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Float> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op) -> Var<'_, F> {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&self, value: Rc<Tensor<F>>, op: Op) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Adds an input node. Any leaf can be differentiated against.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf)
    }

    /// Adds an input node that shares storage with `value`.
    pub fn leaf_rc(&self, value: Rc<Tensor<F>>) -> Var<'_, F> {
        self.push_rc(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, F> {
        self.leaf(Tensor::scalar(F::from_f64(v)))
    }

    fn value(&self, id: usize) -> Rc<Tensor<F>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op
    }

    fn var(&self, id: usize) -> Var<'_, F> {
        Var { graph: self, id }
    }

    /// Gradient of the one-element output `y` with respect to each of `xs`.
    ///
    /// The returned gradients are graph nodes (differentiable again). An
    /// input that `y` does not depend on gets an explicit zero tensor.
    pub fn grad<'g>(&'g self, y: Var<'g, F>, xs: &[Var<'g, F>]) -> Vec<Var<'g, F>> {
        assert_eq!(
            y.value().numel(),
            1,
            "grad() needs a one-element output, got {:?}",
            y.shape()
        );
        let seed = self.leaf(Tensor::full(y.shape(), F::one()));
        self.vjp(y, seed, xs)
    }

    /// Vector-Jacobian product `seedᵀ ∂y/∂x` for each of `xs`.
    pub fn vjp<'g>(&'g self, y: Var<'g, F>, seed: Var<'g, F>, xs: &[Var<'g, F>]) -> Vec<Var<'g, F>> {
        assert_eq!(y.shape(), seed.shape(), "vjp seed must match output shape");
        let n = y.id + 1;
        let mut needs = vec![false; n];
        for x in xs {
            if x.id < n {
                needs[x.id] = true;
            }
        }
        for i in 0..n {
            if !needs[i] {
                let (ps, np) = self.op(i).parents();
                needs[i] = ps[..np].iter().any(|&p| needs[p]);
            }
        }
        let mut grads: Vec<Option<Var<'g, F>>> = vec![None; n];
        grads[y.id] = Some(seed);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.op(i);
            let (ps, np) = op.parents();
            if np == 0 {
                continue;
            }
            let contribs = self.backward(op, self.var(i), g, [needs[ps[0]], np > 1 && needs[ps[1]]]);
            for (slot, c) in contribs.into_iter().enumerate() {
                if let Some(c) = c {
                    let p = ps[slot];
                    grads[p] = Some(match grads[p] {
                        Some(acc) => acc.add(c),
                        None => c,
                    });
                }
            }
        }
        xs.iter()
            .map(|x| match grads.get(x.id).copied().flatten() {
                Some(g) => g,
                None => self.leaf(Tensor::zeros(x.shape())),
            })
            .collect()
    }

    /// Backward rule of `op` expressed in graph operations.
    fn backward<'g>(
        &'g self,
        op: Op,
        out: Var<'g, F>,
        g: Var<'g, F>,
        want: [bool; 2],
    ) -> [Option<Var<'g, F>>; 2] {
        let v = |id| self.var(id);
        let only = |x: Var<'g, F>| [Some(x), None];
        match op {
            Op::Leaf => [None, None],
            Op::Add(_, _) => [Some(g), Some(g)],
            Op::Sub(_, _) => [Some(g), want[1].then(|| g.neg())],
            Op::Mul(a, b) => [
                want[0].then(|| g.mul(v(b))),
                want[1].then(|| g.mul(v(a))),
            ],
            Op::Neg(_) => only(g.neg()),
            Op::Scale(_, c) => only(g.scale(c)),
            Op::AddScalar(_) => only(g),
            Op::Powf(a, p) => {
                if p == 1.0 {
                    only(g)
                } else {
                    only(g.mul(v(a).powf(p - 1.0)).scale(p))
                }
            }
            Op::Exp(_) => only(g.mul(out)),
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > F::zero() { F::one() } else { F::zero() });
                only(g.mul(self.leaf(mask)))
            }
            Op::Reshape(a) => only(g.reshape(self.value(a).shape())),
            Op::Expand { axis, .. } => only(g.sum_axis(axis)),
            Op::SumAxis { axis, len, .. } => only(g.expand(axis, len)),
            Op::Transpose(_) => only(g.transpose()),
            Op::Gemm { a, b, ta, tb } => {
                let (a, b) = (v(a), v(b));
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (g.gemm(b, false, true), a.gemm(g, true, false)),
                    (false, true) => (g.gemm(b, false, false), g.gemm(a, true, false)),
                    (true, false) => (b.gemm(g, false, true), a.gemm(g, false, false)),
                    (true, true) => (b.gemm(g, true, true), g.gemm(a, true, true)),
                };
                [want[0].then_some(ga), want[1].then_some(gb)]
            }
            Op::Softmax { axis, .. } => {
                let len = out.shape()[axis];
                let gy = g.mul(out);
                only(gy.sub(out.mul(gy.sum_axis(axis).expand(axis, len))))
            }
            Op::ConcatLast(a, b) => {
                let da = *self.value(a).shape().last().unwrap();
                let db = *self.value(b).shape().last().unwrap();
                [
                    want[0].then(|| g.slice_last(0, da)),
                    want[1].then(|| g.slice_last(da, db)),
                ]
            }
            Op::SliceLast { x, start } => {
                let total = *self.value(x).shape().last().unwrap();
                only(g.pad_last(start, total))
            }
            Op::PadLast { x, start } => {
                let len = *self.value(x).shape().last().unwrap();
                only(g.slice_last(start, len))
            }
            Op::Conv2d { x, w } => {
                let k = self.value(w).shape()[0];
                [
                    want[0].then(|| g.conv2d(v(w).flip_transpose())),
                    want[1].then(|| v(x).conv_weight_grad(g, k)),
                ]
            }
            Op::ConvWeightGrad { x, g: go } => [
                want[0].then(|| v(go).conv2d(g.flip_transpose())),
                want[1].then(|| v(x).conv2d(g)),
            ],
            Op::FlipTranspose(_) => only(g.flip_transpose()),
        }
    }
}

impl<'g, F: Float> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Cloned value of the node.
    pub fn tensor(&self) -> Tensor<F> {
        (*self.value()).clone()
    }

    pub fn item(&self) -> F {
        self.value().item()
    }

    fn same_graph(&self, other: &Var<'g, F>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn unary(&self, value: Tensor<F>, op: Op) -> Var<'g, F> {
        self.graph.push(value, op)
    }

    /// A leaf holding the same value: gradients do not flow through it.
    pub fn detach(&self) -> Var<'g, F> {
        self.graph.leaf_rc(self.value())
    }

    pub fn add(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.unary(v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.unary(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.unary(v, Op::Mul(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'g, F> {
        let v = self.value().map(|a| -a);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g, F> {
        let cf = F::from_f64(c);
        let v = self.value().map(|a| a * cf);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g, F> {
        let cf = F::from_f64(c);
        let v = self.value().map(|a| a + cf);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'g, F> {
        let pf = F::from_f64(p);
        let v = self.value().map(|a| a.powf(pf));
        self.unary(v, Op::Powf(self.id, p))
    }

    pub fn square(&self) -> Var<'g, F> {
        self.mul(*self)
    }

    pub fn exp(&self) -> Var<'g, F> {
        let v = self.value().map(|a| a.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn relu(&self) -> Var<'g, F> {
        let v = self.value().map(|a| a.max(F::zero()));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, F> {
        if self.shape() == shape {
            return *self;
        }
        let v = (*self.value()).clone().reshape(shape.to_vec());
        self.unary(v, Op::Reshape(self.id))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the input.
    pub fn expand(&self, axis: usize, n: usize) -> Var<'g, F> {
        let v = kernels::expand(&self.value(), axis, n);
        self.unary(v, Op::Expand { x: self.id, axis })
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var<'g, F> {
        let len = self.shape()[axis];
        let v = kernels::sum_axis(&self.value(), axis);
        self.unary(v, Op::SumAxis { x: self.id, axis, len })
    }

    pub fn mean_axis(&self, axis: usize) -> Var<'g, F> {
        let len = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / len as f64)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Var<'g, F> {
        let n = self.value().numel();
        self.reshape(&[n]).sum_axis(0)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Var<'g, F> {
        let v = kernels::transpose_last2(&self.value());
        self.unary(v, Op::Transpose(self.id))
    }

    /// `op(self) op(other)` for rank-2 operands or rank-3 with equal batch.
    pub fn gemm(&self, other: Var<'g, F>, ta: bool, tb: bool) -> Var<'g, F> {
        self.same_graph(&other);
        let v = kernels::gemm(&self.value(), &other.value(), ta, tb);
        self.unary(
            v,
            Op::Gemm {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    pub fn matmul(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.gemm(other, false, false)
    }

    /// Applies a `(in, out)` weight to the last axis of `self`.
    pub fn linear(&self, weight: Var<'g, F>, bias: Option<Var<'g, F>>) -> Var<'g, F> {
        let mut shape = self.shape();
        let din = *shape.last().expect("linear on rank-0 tensor");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let y = self.reshape(&[rows, din]).matmul(weight);
        let y = match bias {
            Some(b) => y.add(b.expand(0, rows)),
            None => y,
        };
        *shape.last_mut().unwrap() = weight.shape()[1];
        y.reshape(&shape)
    }

    /// Adds `other`, whose shape must be a suffix of `self`'s, broadcasting
    /// over the leading axes.
    pub fn add_broadcast(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.add(self.broadcast_like(other))
    }

    /// Multiplies by `other`, broadcasting it over leading axes as in
    /// [`Var::add_broadcast`].
    pub fn mul_broadcast(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.mul(self.broadcast_like(other))
    }

    fn broadcast_like(&self, other: Var<'g, F>) -> Var<'g, F> {
        let s = self.shape();
        let o = other.shape();
        assert!(
            o.len() <= s.len() && s[s.len() - o.len()..] == o[..],
            "cannot broadcast {o:?} onto {s:?}"
        );
        if o.len() == s.len() {
            return other;
        }
        let lead: usize = s[..s.len() - o.len()].iter().product();
        other.expand(0, lead).reshape(&s)
    }

    pub fn softmax(&self, axis: usize) -> Var<'g, F> {
        let v = kernels::softmax(&self.value(), axis);
        self.unary(v, Op::Softmax { x: self.id, axis })
    }

    pub fn concat_last(&self, other: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&other);
        let v = kernels::concat_last(&self.value(), &other.value());
        self.unary(v, Op::ConcatLast(self.id, other.id))
    }

    pub fn slice_last(&self, start: usize, len: usize) -> Var<'g, F> {
        let v = kernels::slice_last(&self.value(), start, len);
        self.unary(v, Op::SliceLast { x: self.id, start })
    }

    /// Zero-pads the last axis to `total`, placing the input at `start`.
    pub fn pad_last(&self, start: usize, total: usize) -> Var<'g, F> {
        let v = kernels::pad_last(&self.value(), start, total);
        self.unary(v, Op::PadLast { x: self.id, start })
    }

    /// Same-padded stride-1 convolution of an NHWC input with a
    /// `(k, k, cin, cout)` kernel.
    pub fn conv2d(&self, kernel: Var<'g, F>) -> Var<'g, F> {
        self.same_graph(&kernel);
        let v = kernels::conv2d(&self.value(), &kernel.value());
        self.unary(
            v,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
            },
        )
    }

    fn conv_weight_grad(&self, g: Var<'g, F>, k: usize) -> Var<'g, F> {
        let v = kernels::conv_weight_grad(&self.value(), &g.value(), k);
        self.unary(v, Op::ConvWeightGrad { x: self.id, g: g.id })
    }

    fn flip_transpose(&self) -> Var<'g, F> {
        let v = kernels::flip_transpose(&self.value());
        self.unary(v, Op::FlipTranspose(self.id))
    }
}
