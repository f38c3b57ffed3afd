//! Reverse-mode differentiation over the tensor kernel set.
//!
//! A [`Tape`] records every op in execution order, so the node list is
//! already topologically sorted and [`Tape::backward`] walks it once in
//! reverse. Gradients are only propagated through nodes that depend on a
//! registered parameter.

mod gradcheck;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, Padding, Real, Shape, Tensor};

pub use gradcheck::{grad_check, grad_check_list, GradCheckOptions, GradCheckReport};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }
}

/// Gradient for every parameter registered on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T: Real = f32> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds zero gradients for parameters of `store` the tape never saw.
    pub fn fill_missing(&mut self, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(String),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Resize(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Abs(Var),
    ClampMin(Var, T),
    MinConst(Var, T),
    MuLaw { x: Var, mu: T, denom: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    PadReflect(Var, Padding),
    Sum(Var),
    Mean(Var),
    Opaque(String),
}

impl<T> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Resize(_) => "bilinear_resize",
            Op::Sigmoid(_) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::MinConst(..) => "min_const",
            Op::MuLaw { .. } => "mu_tonemap",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::PadReflect(..) => "pad_reflect",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Opaque(name) => name,
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), check_finite: false }
    }

    /// Makes every op fail with [`Error::NonFinite`] when it produces NaN/Inf.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant data with no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf. Repeated registration of one name returns
    /// the same handle, so reuse accumulates into a single gradient.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node { value: t.clone(), op: Op::Param(name.to_string()), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Looks `name` up in `store` and registers it.
    pub fn param_from(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        Ok(self.param(name, t))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = tensor::conv2d(self.value(x), spec, self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(y, Op::Conv2d { x, w, b, spec: *spec }, rg)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = tensor::conv_transpose2d(self.value(x), spec, self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(y, Op::ConvTranspose2d { x, w, b, spec: *spec }, rg)
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = tensor::bilinear_resize(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::Resize(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = tensor::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let y = tensor::leaky_relu(self.value(x), slope);
        let rg = self.rg(&[x]);
        self.push(y, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(y, Op::Tanh(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(y, Op::Abs(x), rg)
    }

    pub fn clamp_min(&mut self, x: Var, lo: T) -> Result<Var> {
        let y = self.value(x).map(|v| if v >= lo { v } else { lo });
        let rg = self.rg(&[x]);
        self.push(y, Op::ClampMin(x, lo), rg)
    }

    /// `min(x, hi)` elementwise; the saturation step of the sensor model.
    pub fn min_const(&mut self, x: Var, hi: T) -> Result<Var> {
        let y = self.value(x).map(|v| if v < hi { v } else { hi });
        let rg = self.rg(&[x]);
        self.push(y, Op::MinConst(x, hi), rg)
    }

    /// `ln(1 + mu*x) / denom`; `x` must be non-negative.
    pub fn mu_law(&mut self, x: Var, mu: T, denom: T) -> Result<Var> {
        let y = self.value(x).map(|v| (mu * v).ln_1p() / denom);
        let rg = self.rg(&[x]);
        self.push(y, Op::MuLaw { x, mu, denom }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let y = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, s), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = tensor::concat_channels(&vals)?;
        let rg = self.rg(parts);
        self.push(y, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = tensor::slice_channels(self.value(x), start, len)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::SliceChannels { x, start }, rg)
    }

    pub fn pad_reflect(&mut self, x: Var, pad: Padding) -> Result<Var> {
        let y = tensor::pad_reflect(self.value(x), pad)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::PadReflect(x, pad), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(y, Op::Mean(x), rg)
    }

    /// Records a value computed outside the tape. It has no backward rule:
    /// differentiating through it fails with [`Error::MissingBackward`].
    pub fn opaque(&mut self, name: &str, value: Tensor<T>, inputs: &[Var]) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(value, Op::Opaque(name.to_string()), rg)
    }

    /// Which side of its kink every element of every non-smooth op fell on.
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            let (x, at) = match node.op {
                Op::LeakyRelu(x, _) | Op::Abs(x) => (x, T::zero()),
                Op::ClampMin(x, lo) => (x, lo),
                Op::MinConst(x, hi) => (x, hi),
                _ => continue,
            };
            sig.extend(self.value(x).data().iter().map(|&v| v >= at));
        }
        sig
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape != Shape::scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        for (name, &v) in &self.params {
            out.entry(name.clone()).or_insert_with(|| Tensor::zeros(self.shape(v)));
        }
        Ok(GradMap { grads: out })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let one = T::one();

        match &node.op {
            Op::Input => {}
            Op::Param(name) => {
                out.insert(name.clone(), g);
            }
            Op::Conv2d { x, w, b, spec } => {
                if self.requires_grad(*x) {
                    acc(*x, tensor::conv2d_backward_input(&g, spec, val(*w), self.shape(*x)))?;
                }
                if self.requires_grad(*w) {
                    acc(*w, tensor::conv2d_weight_grad(val(*x), &g, spec))?;
                }
                if let Some(b) = b {
                    acc(*b, tensor::bias_grad(&g))?;
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                if self.requires_grad(*x) {
                    acc(*x, tensor::conv_transpose2d_backward_input(&g, spec, val(*w), self.shape(*x)))?;
                }
                if self.requires_grad(*w) {
                    acc(*w, tensor::conv_transpose2d_weight_grad(val(*x), &g, spec))?;
                }
                if let Some(b) = b {
                    acc(*b, tensor::bias_grad(&g))?;
                }
            }
            Op::Resize(x) => acc(*x, tensor::bilinear_resize_backward(&g, self.shape(*x))?)?,
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, g.zip_map(y, "sigmoid", |g, y| g * y * (one - y))?)?
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                acc(*x, g.zip_map(val(*x), "leaky_relu", |g, v| if v >= T::zero() { g } else { g * s })?)?
            }
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, "tanh", |g, y| g * (one - y * y))?)?,
            Op::Abs(x) => acc(*x, g.zip_map(val(*x), "abs", |g, v| if v >= T::zero() { g } else { -g })?)?,
            Op::ClampMin(x, lo) => {
                let lo = *lo;
                acc(*x, g.zip_map(val(*x), "clamp_min", |g, v| if v >= lo { g } else { T::zero() })?)?
            }
            Op::MinConst(x, hi) => {
                let hi = *hi;
                acc(*x, g.zip_map(val(*x), "min_const", |g, v| if v < hi { g } else { T::zero() })?)?
            }
            Op::MuLaw { x, mu, denom } => {
                let (mu, denom) = (*mu, *denom);
                acc(*x, g.zip_map(val(*x), "mu_tonemap", |g, v| g * mu / ((one + mu * v) * denom))?)?
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-one))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, tensor::mul(&g, val(*b))?)?;
                }
                if self.requires_grad(*b) {
                    acc(*b, tensor::mul(&g, val(*a))?)?;
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s))?,
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.requires_grad(p) {
                        acc(p, tensor::slice_channels(&g, start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let src = self.shape(*x);
                let len = g.shape().c;
                let mut full = Tensor::zeros(src);
                let plane = src.plane();
                for n in 0..src.n {
                    let dst = (n * src.c + start) * plane;
                    let from = n * len * plane;
                    full.data_mut()[dst..dst + len * plane].copy_from_slice(&g.data()[from..from + len * plane]);
                }
                acc(*x, full)?
            }
            Op::PadReflect(x, pad) => acc(*x, tensor::pad_reflect_backward(&g, *pad, self.shape(*x))?)?,
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.data()[0]))?,
            Op::Mean(x) => {
                let s = self.shape(*x);
                let n = T::from_usize(s.len().max(1)).unwrap();
                acc(*x, Tensor::full(s, g.data()[0] / n))?
            }
            Op::Opaque(name) => return Err(Error::MissingBackward(name.clone())),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c + y * x) as f64));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get("x").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(l).unwrap().get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn fan_out_doubles() {
        let t = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let single = {
            let mut tape = Tape::new();
            let x = tape.param("x", &t);
            let s = tape.sigmoid(x).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap()
        };
        let double = {
            let mut tape = Tape::new();
            let x = tape.param("x", &t);
            let s1 = tape.sigmoid(x).unwrap();
            let x_again = tape.param("x", &t);
            let s2 = tape.sigmoid(x_again).unwrap();
            let a = tape.add(s1, s2).unwrap();
            let l = tape.sum(a).unwrap();
            tape.backward(l).unwrap()
        };
        let (a, b) = (single.get("x").unwrap(), double.get("x").unwrap());
        for (s, d) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * s, *d);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", &Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn opaque_op_rejected_by_name() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", &Tensor::ones([1, 1, 2, 2]));
        let v = tape.value(x).map(|v| v.round());
        let r = tape.opaque("round", v, &[x]).unwrap();
        let l = tape.sum(r).unwrap();
        match tape.backward(l) {
            Err(Error::MissingBackward(name)) => assert_eq!(name, "round"),
            other => panic!("expected missing backward, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_params_have_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", &Tensor::ones([1, 1, 2, 2]));
        let _unused = tape.param("unused", &Tensor::ones([1, 3, 1, 1]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.get("unused").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kink_conventions_use_right_derivative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", &Tensor::zeros([1, 1, 1, 1]));
        let a = tape.abs(x).unwrap();
        let r = tape.leaky_relu(x, 0.1).unwrap();
        let c = tape.clamp_min(x, 0.0).unwrap();
        let s1 = tape.add(a, r).unwrap();
        let s2 = tape.add(s1, c).unwrap();
        let l = tape.sum(s2).unwrap();
        assert_eq!(tape.backward(l).unwrap().get("x").unwrap().data(), &[3.0]);
    }

    #[test]
    fn finite_check_names_op() {
        let mut tape = Tape::<f32>::new().with_finite_check(true);
        let x = tape.input(Tensor::full([1, 1, 1, 1], -2.0));
        let err = tape.mu_law(x, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("mu_tonemap"), "{err}");
    }
}
