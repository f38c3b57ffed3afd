use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Real, Shape};

/// How a layer's parameters start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Init {
    /// Weights uniform in +-sqrt(3 / fan_in), biases zero.
    FanIn,
    /// Weights and biases zero.
    Zero,
    /// Zero weights; bias is one on the first half of the output channels
    /// and zero on the second, so a (scale, bias) predictor starts at identity.
    AlignIdentity,
}

/// The operations a model is written against. One model description drives
/// both the differentiable executor and the cost tracer.
///
/// Parameters are named `{layer}.weight` and `{layer}.bias`. Calling a layer
/// name twice reuses its parameters.
pub trait Graph {
    type V: Copy;

    fn shape(&self, v: Self::V) -> Shape;
    fn conv(&mut self, name: &str, x: Self::V, spec: &ConvSpec, init: Init) -> Result<Self::V>;
    fn conv_transpose(&mut self, name: &str, x: Self::V, spec: &ConvSpec, init: Init) -> Result<Self::V>;
    fn resize(&mut self, x: Self::V, out_h: usize, out_w: usize) -> Result<Self::V>;
    fn leaky_relu(&mut self, x: Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: Self::V) -> Result<Self::V>;
    fn add(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_channels(&mut self, x: Self::V, start: usize, len: usize) -> Result<Self::V>;
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Runs a model on a [`Tape`] with parameters taken from a store.
pub struct Exec<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Real> Exec<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>) -> Self {
        Exec { tape, params }
    }

    fn layer_params(&mut self, name: &str, has_bias: bool) -> Result<(Var, Option<Var>)> {
        let w = self.tape.param_from(self.params, &weight_name(name))?;
        let b = if has_bias { Some(self.tape.param_from(self.params, &bias_name(name))?) } else { None };
        Ok((w, b))
    }
}

impl<T: Real> Graph for Exec<'_, T> {
    type V = Var;

    fn shape(&self, v: Var) -> Shape {
        self.tape.shape(v)
    }

    fn conv(&mut self, name: &str, x: Var, spec: &ConvSpec, _init: Init) -> Result<Var> {
        let (w, b) = self.layer_params(name, spec.has_bias).map_err(|e| e.in_layer(name))?;
        self.tape.conv2d(x, w, b, spec).map_err(|e| e.in_layer(name))
    }

    fn conv_transpose(&mut self, name: &str, x: Var, spec: &ConvSpec, _init: Init) -> Result<Var> {
        let (w, b) = self.layer_params(name, spec.has_bias).map_err(|e| e.in_layer(name))?;
        self.tape.conv_transpose2d(x, w, b, spec).map_err(|e| e.in_layer(name))
    }

    fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.tape.bilinear_resize(x, out_h, out_w)
    }

    fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.tape.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE))
    }

    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.tape.sigmoid(x)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.add(a, b)
    }

    fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.mul(a, b)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat(parts)
    }

    fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice_channels(x, start, len)
    }
}

/// A parameter declared by the model, with its starting rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    pub is_bias: bool,
    pub fan_in: usize,
}

pub(crate) fn declare(
    decls: &mut Vec<ParamDecl>,
    layer: &str,
    weight_shape: Shape,
    spec: &ConvSpec,
    init: Init,
    fan_in: usize,
) -> Result<bool> {
    let wname = weight_name(layer);
    if let Some(prev) = decls.iter().find(|d| d.name == wname) {
        if prev.shape != weight_shape {
            return Err(Error::spec("shared layer", format!("`{layer}` reused with weight {weight_shape}, first seen as {}", prev.shape)));
        }
        return Ok(false);
    }
    decls.push(ParamDecl { name: wname, shape: weight_shape, init, is_bias: false, fan_in });
    if spec.has_bias {
        decls.push(ParamDecl { name: bias_name(layer), shape: spec.bias_shape(), init, is_bias: true, fan_in });
    }
    Ok(true)
}
