//! Reverse-mode differentiation over a tape of tensor ops, plus an eager evaluator that
//! runs the same kernels without recording anything (inference frees intermediates as it goes).

use std::collections::HashMap;
use std::ops::Deref;
use std::rc::Rc;
use std::sync::Arc;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssim;
use crate::tensor::{Shape, Tensor};

/// Operations the network is written against, implemented by both [`Graph`] and [`Eager`].
pub trait Backend<T: Scalar> {
    type Value: Clone;

    fn input(&mut self, t: Tensor<T>) -> Self::Value;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        stride: usize,
        pad: usize,
    ) -> Self::Value;
    /// `a + b`, with `b` broadcast against `a`.
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    /// `a * b`, with `b` broadcast against `a`.
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn scale(&mut self, a: &Self::Value, s: T) -> Self::Value;
    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn leaky_relu(&mut self, a: &Self::Value, slope: T) -> Self::Value;
    fn global_avg_pool(&mut self, a: &Self::Value) -> Self::Value;
    fn resize(&mut self, a: &Self::Value, h: usize, w: usize) -> Self::Value;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;

    fn shape(&self, v: &Self::Value) -> Shape {
        self.value(v).shape()
    }
}

fn add_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x + y).unwrap();
    }
    let strides = kernels::broadcast_strides(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {} onto {}", b.shape(), a.shape()));
    let mut out = a.clone();
    let bd = b.data();
    let od = out.data_mut();
    kernels::for_each_broadcast(a.shape(), strides, |ia, ib| od[ia] += bd[ib]);
    out
}

fn leaky<T: Scalar>(a: &Tensor<T>, slope: T) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Stateless evaluator: values are reference counted and dropped once unused.
#[derive(Debug, Default)]
pub struct Eager;

impl<T: Scalar> Backend<T> for Eager {
    type Value = Rc<Tensor<T>>;

    fn input(&mut self, t: Tensor<T>) -> Self::Value {
        Rc::new(t)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Self::Value {
        Rc::new(store.get(id).as_ref().clone())
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        stride: usize,
        pad: usize,
    ) -> Self::Value {
        Rc::new(kernels::conv2d_forward(x, w, b.map(|b| b.as_ref()), stride, pad))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value {
        Rc::new(add_broadcast(a, b))
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value {
        Rc::new(kernels::mul_broadcast(a, b))
    }

    fn scale(&mut self, a: &Self::Value, s: T) -> Self::Value {
        Rc::new(a.map(|v| v * s))
    }

    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value {
        Rc::new(a.map(kernels::sigmoid))
    }

    fn tanh(&mut self, a: &Self::Value) -> Self::Value {
        Rc::new(a.map(|v| v.tanh()))
    }

    fn leaky_relu(&mut self, a: &Self::Value, slope: T) -> Self::Value {
        Rc::new(leaky(a, slope))
    }

    fn global_avg_pool(&mut self, a: &Self::Value) -> Self::Value {
        Rc::new(kernels::global_avg_pool(a))
    }

    fn resize(&mut self, a: &Self::Value, h: usize, w: usize) -> Self::Value {
        Rc::new(kernels::resize_bilinear(a, h, w))
    }

    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value {
        Rc::new(Tensor::cat_channels(a, b).expect("concat operands must agree"))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Stored<T> {
    Owned(Tensor<T>),
    Shared(Arc<Tensor<T>>),
}

impl<T> Deref for Stored<T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Stored::Owned(t) => t,
            Stored::Shared(t) => t,
        }
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    GlobalAvgPool(Var),
    Resize(Var),
    Concat(Var, Var),
    Charbonnier { pred: Var, target: Var, eps: T },
    L1 { pred: Var, target: Var },
    Mse { pred: Var, target: Var },
    TotalVariation(Var),
    SsimLoss { pred: Var, target: Var },
    SoftCrossEntropy { logits: Var, target: Var },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Stored<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape. Build a fresh graph per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Stored<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn t(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Differentiable input (gradient available after backward).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Stored::Owned(t), Op::Leaf, true)
    }

    /// Weight shared with a store but excluded from differentiation.
    pub fn frozen(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push(Stored::Shared(t), Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar value of a loss node.
    pub fn scalar(&self, v: Var) -> T {
        self.t(v).data()[0]
    }

    fn loss(&mut self, value: T, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Stored::Owned(Tensor::scalar(value)), op, rg)
    }

    /// Mean of `sqrt((pred - target)^2 + eps^2)`.
    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: T) -> Var {
        let (p, t) = (self.t(pred), self.t(target));
        p.expect_shape(t.shape()).expect("charbonnier operands");
        let e2 = eps * eps;
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt()).sum();
        let v = s / T::from_usize(p.len()).unwrap();
        self.loss(v, Op::Charbonnier { pred, target, eps }, &[pred, target])
    }

    pub fn l1(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.t(pred), self.t(target));
        p.expect_shape(t.shape()).expect("l1 operands");
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let v = s / T::from_usize(p.len()).unwrap();
        self.loss(v, Op::L1 { pred, target }, &[pred, target])
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.t(pred), self.t(target));
        p.expect_shape(t.shape()).expect("mse operands");
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = s / T::from_usize(p.len()).unwrap();
        self.loss(v, Op::Mse { pred, target }, &[pred, target])
    }

    /// Anisotropic total variation: sum of absolute forward differences over both axes,
    /// divided by the element count.
    pub fn total_variation(&mut self, x: Var) -> Var {
        let t = self.t(x);
        let [n, c, h, w] = t.shape().0;
        let mut s = T::zero();
        for i in 0..n {
            for ch in 0..c {
                let p = t.plane(i, ch);
                for y in 0..h {
                    for xx in 0..w {
                        let v = p[y * w + xx];
                        if xx + 1 < w {
                            s += (p[y * w + xx + 1] - v).abs();
                        }
                        if y + 1 < h {
                            s += (p[(y + 1) * w + xx] - v).abs();
                        }
                    }
                }
            }
        }
        let v = s / T::from_usize(t.len()).unwrap();
        self.loss(v, Op::TotalVariation(x), &[x])
    }

    /// `1 - SSIM(pred, target)`.
    pub fn ssim_loss(&mut self, pred: Var, target: Var) -> crate::Result<Var> {
        let v = T::one() - ssim::ssim(self.t(pred), self.t(target))?;
        Ok(self.loss(v, Op::SsimLoss { pred, target }, &[pred, target]))
    }

    /// Mean over pixels of `-sum_k target_k * log_softmax(logits)_k` along channels.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var) -> Var {
        let (z, q) = (self.t(logits), self.t(target));
        z.expect_shape(q.shape()).expect("cross-entropy operands");
        let [n, k, h, w] = z.shape().0;
        let plane = h * w;
        let mut total = T::zero();
        for i in 0..n {
            let zi = z.item(i);
            let qi = q.item(i);
            for p in 0..plane {
                let mut m = T::neg_infinity();
                for c in 0..k {
                    m = m.max(zi[c * plane + p]);
                }
                let mut se = T::zero();
                for c in 0..k {
                    se += (zi[c * plane + p] - m).exp();
                }
                let lse = m + se.ln();
                for c in 0..k {
                    let qv = qi[c * plane + p];
                    if qv != T::zero() {
                        total -= qv * (zi[c * plane + p] - lse);
                    }
                }
            }
        }
        let v = total / T::from_usize(n * plane).unwrap();
        self.loss(v, Op::SoftCrossEntropy { logits, target }, &[logits, target])
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Var {
        let v = terms.iter().map(|&(t, w)| self.scalar(t) * w).sum();
        let inputs: Vec<Var> = terms.iter().map(|&(t, _)| t).collect();
        self.loss(v, Op::WeightedSum(terms), &inputs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.t(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        let mut acc = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            // keep gradients of inputs the caller may ask for
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            let out = &*node.value;
            match &node.op {
                Op::Constant | Op::Leaf | Op::Param => unreachable!(),
                Op::Conv { x, w, b, stride, pad } => {
                    let cg = kernels::conv2d_backward(
                        self.t(*x),
                        self.t(*w),
                        &g,
                        *stride,
                        *pad,
                        self.rg(*x),
                        self.rg(*w),
                        b.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        acc(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, kernels::reduce_to(&g, self.t(*b).shape()));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, kernels::mul_broadcast(&g, self.t(*b)));
                    }
                    if self.rg(*b) {
                        let prod = g.zip_map(self.t(*a), |x, y| x * y).unwrap();
                        acc(&mut grads, *b, kernels::reduce_to(&prod, self.t(*b).shape()));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, g.zip_map(out, |gv, y| gv * y * (T::one() - y)).unwrap());
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, g.zip_map(out, |gv, y| gv * (T::one() - y * y)).unwrap());
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let d = g
                        .zip_map(self.t(*a), |gv, x| if x > T::zero() { gv } else { gv * slope })
                        .unwrap();
                    acc(&mut grads, *a, d);
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.t(*a).shape();
                    let denom = T::from_usize(s.plane()).unwrap();
                    let d = Tensor::from_fn(s, |[i, c, _, _]| g.at([i, c, 0, 0]) / denom);
                    acc(&mut grads, *a, d);
                }
                Op::Resize(a) => {
                    let s = self.t(*a).shape();
                    acc(&mut grads, *a, kernels::resize_bilinear_backward(&g, s.h(), s.w()));
                }
                Op::Concat(a, b) => {
                    let ca = self.t(*a).shape().c();
                    let cb = self.t(*b).shape().c();
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.narrow_channels(0, ca));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.narrow_channels(ca, cb));
                    }
                }
                Op::Charbonnier { pred, target, eps } => {
                    let up = g.data()[0] / T::from_usize(self.t(*pred).len()).unwrap();
                    let e2 = *eps * *eps;
                    let d = self
                        .t(*pred)
                        .zip_map(self.t(*target), |p, t| {
                            let diff = p - t;
                            up * diff / (diff * diff + e2).sqrt()
                        })
                        .unwrap();
                    self.push_pair(&mut grads, &mut acc, *pred, *target, d);
                }
                Op::L1 { pred, target } => {
                    let up = g.data()[0] / T::from_usize(self.t(*pred).len()).unwrap();
                    let d = self
                        .t(*pred)
                        .zip_map(self.t(*target), |p, t| {
                            let diff = p - t;
                            if diff > T::zero() {
                                up
                            } else if diff < T::zero() {
                                -up
                            } else {
                                T::zero()
                            }
                        })
                        .unwrap();
                    self.push_pair(&mut grads, &mut acc, *pred, *target, d);
                }
                Op::Mse { pred, target } => {
                    let up = g.data()[0] / T::from_usize(self.t(*pred).len()).unwrap();
                    let two = T::from_f64_lossy(2.0);
                    let d = self.t(*pred).zip_map(self.t(*target), |p, t| two * up * (p - t)).unwrap();
                    self.push_pair(&mut grads, &mut acc, *pred, *target, d);
                }
                Op::TotalVariation(x) => {
                    let t = self.t(*x);
                    let [n, c, h, w] = t.shape().0;
                    let up = g.data()[0] / T::from_usize(t.len()).unwrap();
                    let sign = |d: T| {
                        if d > T::zero() {
                            up
                        } else if d < T::zero() {
                            -up
                        } else {
                            T::zero()
                        }
                    };
                    let mut d = Tensor::zeros(t.shape());
                    for i in 0..n {
                        for ch in 0..c {
                            let p = t.plane(i, ch);
                            let dp = d.plane_mut(i, ch);
                            for y in 0..h {
                                for xx in 0..w {
                                    let o = y * w + xx;
                                    if xx + 1 < w {
                                        let s = sign(p[o + 1] - p[o]);
                                        dp[o + 1] += s;
                                        dp[o] -= s;
                                    }
                                    if y + 1 < h {
                                        let s = sign(p[o + w] - p[o]);
                                        dp[o + w] += s;
                                        dp[o] -= s;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SsimLoss { pred, target } => {
                    let up = -g.data()[0];
                    if self.rg(*pred) {
                        let d = ssim::ssim_grad_x(self.t(*pred), self.t(*target), up).expect("validated in forward");
                        acc(&mut grads, *pred, d);
                    }
                    if self.rg(*target) {
                        let d = ssim::ssim_grad_x(self.t(*target), self.t(*pred), up).expect("validated in forward");
                        acc(&mut grads, *target, d);
                    }
                }
                Op::SoftCrossEntropy { logits, target } => {
                    let (z, q) = (self.t(*logits), self.t(*target));
                    let [n, k, h, w] = z.shape().0;
                    let plane = h * w;
                    let up = g.data()[0] / T::from_usize(n * plane).unwrap();
                    let mut dz = Tensor::zeros(z.shape());
                    for i in 0..n {
                        let zi = z.item(i);
                        let qi = q.item(i);
                        let di = dz.item_mut(i);
                        for p in 0..plane {
                            let mut m = T::neg_infinity();
                            for c in 0..k {
                                m = m.max(zi[c * plane + p]);
                            }
                            let mut se = T::zero();
                            for c in 0..k {
                                se += (zi[c * plane + p] - m).exp();
                            }
                            let qsum: T = (0..k).map(|c| qi[c * plane + p]).sum();
                            for c in 0..k {
                                let sm = (zi[c * plane + p] - m).exp() / se;
                                di[c * plane + p] = up * (qsum * sm - qi[c * plane + p]);
                            }
                        }
                    }
                    if self.rg(*logits) {
                        acc(&mut grads, *logits, dz);
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = g.data()[0];
                    for &(t, w) in terms {
                        if self.rg(t) {
                            acc(&mut grads, t, Tensor::scalar(up * w));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    /// Distributes an elementwise loss gradient `d` (w.r.t. pred) to pred and, negated, to target.
    fn push_pair(
        &self,
        grads: &mut Vec<Option<Tensor<T>>>,
        acc: &mut impl FnMut(&mut Vec<Option<Tensor<T>>>, Var, Tensor<T>),
        pred: Var,
        target: Var,
        d: Tensor<T>,
    ) {
        if self.rg(target) {
            acc(grads, target, d.map(|v| -v));
        }
        if self.rg(pred) {
            acc(grads, pred, d);
        }
    }

    /// Gradients of every parameter bound on this graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, &var)| grads.get(var).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Backend<T> for Graph<T> {
    type Value = Var;

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Stored::Owned(t), Op::Constant, false)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Stored::Shared(store.get(id).clone()), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.t(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Var {
        let y = kernels::conv2d_forward(self.t(*x), self.t(*w), b.map(|b| self.t(*b)), stride, pad);
        let rg = self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(*b));
        self.push(Stored::Owned(y), Op::Conv { x: *x, w: *w, b: b.copied(), stride, pad }, rg)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = add_broadcast(self.t(*a), self.t(*b));
        let rg = self.rg(*a) || self.rg(*b);
        self.push(Stored::Owned(y), Op::Add(*a, *b), rg)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let y = kernels::mul_broadcast(self.t(*a), self.t(*b));
        let rg = self.rg(*a) || self.rg(*b);
        self.push(Stored::Owned(y), Op::Mul(*a, *b), rg)
    }

    fn scale(&mut self, a: &Var, s: T) -> Var {
        let y = self.t(*a).map(|v| v * s);
        let rg = self.rg(*a);
        self.push(Stored::Owned(y), Op::Scale(*a, s), rg)
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let y = self.t(*a).map(kernels::sigmoid);
        let rg = self.rg(*a);
        self.push(Stored::Owned(y), Op::Sigmoid(*a), rg)
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let y = self.t(*a).map(|v| v.tanh());
        let rg = self.rg(*a);
        self.push(Stored::Owned(y), Op::Tanh(*a), rg)
    }

    fn leaky_relu(&mut self, a: &Var, slope: T) -> Var {
        let y = leaky(self.t(*a), slope);
        let rg = self.rg(*a);
        self.push(Stored::Owned(y), Op::LeakyRelu(*a, slope), rg)
    }

    fn global_avg_pool(&mut self, a: &Var) -> Var {
        let y = kernels::global_avg_pool(self.t(*a));
        let rg = self.rg(*a);
        self.push(Stored::Owned(y), Op::GlobalAvgPool(*a), rg)
    }

    fn resize(&mut self, a: &Var, h: usize, w: usize) -> Var {
        let y = kernels::resize_bilinear(self.t(*a), h, w);
        let rg = self.rg(*a);
        self.push(Stored::Owned(y), Op::Resize(*a), rg)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Var {
        let y = Tensor::cat_channels(self.t(*a), self.t(*b)).expect("concat operands must agree");
        let rg = self.rg(*a) || self.rg(*b);
        self.push(Stored::Owned(y), Op::Concat(*a, *b), rg)
    }
}
