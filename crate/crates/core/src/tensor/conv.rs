use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution. `groups == in == out` is a depthwise
/// convolution; `kernel_size == 1, groups == 1` is a pointwise one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
    /// Extra rows/columns appended to a transposed convolution's output.
    #[serde(default)]
    pub output_padding: usize,
}

impl ConvSpec {
    /// Stride-1, undilated, "same"-padded standard convolution with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            dilation: 1,
            padding: kernel_size / 2,
            groups: 1,
            has_bias: true,
            output_padding: 0,
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize) -> Self {
        ConvSpec { groups: channels, ..ConvSpec::new(channels, channels, kernel_size) }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 1)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    /// Sets the dilation and re-derives "same" padding for odd kernels.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel_size / 2);
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_size == 1 && self.groups == 1
    }

    /// Weight shape of a forward convolution: (out, in/groups, k, k).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels / self.groups, self.kernel_size, self.kernel_size)
    }

    /// Weight shape of a transposed convolution: (in, out/groups, k, k).
    pub fn transposed_weight_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.out_channels / self.groups, self.kernel_size, self.kernel_size)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().len() + if self.has_bias { self.out_channels } else { 0 }
    }

    fn validate_common(&self, op: &'static str) -> Result<()> {
        if self.groups == 0 || self.stride == 0 || self.dilation == 0 || self.kernel_size == 0 {
            return Err(Error::spec(op, format!("zero groups/stride/dilation/kernel in {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::spec(
                op,
                format!(
                    "channels {}->{} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common("conv2d")?;
        if self.kernel_size % 2 == 0 {
            return Err(Error::spec("conv2d", format!("kernel size {} is not odd", self.kernel_size)));
        }
        if self.output_padding != 0 {
            return Err(Error::spec("conv2d", "output padding only applies to transposed convolution"));
        }
        Ok(())
    }

    pub fn validate_transposed(&self) -> Result<()> {
        self.validate_common("conv_transpose2d")?;
        if self.output_padding >= self.stride.max(self.dilation) {
            return Err(Error::spec(
                "conv_transpose2d",
                format!("output padding {} must be below stride or dilation", self.output_padding),
            ));
        }
        Ok(())
    }

    /// Output extent of a forward convolution along one axis.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel_size - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transposed_output_len(&self, input: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        let full = (input - 1) * self.stride + self.dilation * (self.kernel_size - 1) + 1 + self.output_padding;
        full.checked_sub(2 * self.padding).filter(|&v| v >= 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input {input} has {} channels, spec expects {}", input.c, self.in_channels),
            ));
        }
        match (self.output_len(input.h), self.output_len(input.w)) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok(Shape::new(input.n, self.out_channels, h, w)),
            _ => Err(Error::shape(
                "conv2d",
                format!("input {input} too small for kernel {} dilation {}", self.kernel_size, self.dilation),
            )),
        }
    }

    pub fn transposed_output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate_transposed()?;
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {input} has {} channels, spec expects {}", input.c, self.in_channels),
            ));
        }
        match (self.transposed_output_len(input.h), self.transposed_output_len(input.w)) {
            (Some(h), Some(w)) => Ok(Shape::new(input.n, self.out_channels, h, w)),
            _ => Err(Error::shape("conv_transpose2d", format!("input {input} yields an empty output"))),
        }
    }
}

#[derive(Clone, Copy)]
struct Window {
    groups: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
}

impl From<&ConvSpec> for Window {
    fn from(s: &ConvSpec) -> Self {
        Window { groups: s.groups, k: s.kernel_size, stride: s.stride, dilation: s.dilation, padding: s.padding }
    }
}

/// Indices `i` in `[0, count)` with `0 <= i*stride + offset < limit`.
#[inline]
fn valid_range(count: usize, limit: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (limit as isize) <= offset { 0 } else { ((limit as isize - offset) + s - 1) / s };
    let lo = (lo as usize).min(count);
    let hi = (hi as usize).min(count);
    (lo, hi.max(lo))
}

// Below this many multiply-accumulates a kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn for_each_plane<T: Real>(
    out: &mut [T],
    plane: usize,
    work: usize,
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if plane == 0 {
        return;
    }
    if work < PAR_THRESHOLD {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

fn bias_value<T: Real>(bias: Option<&Tensor<T>>, c: usize) -> T {
    bias.map_or(T::zero(), |b| b.data()[c])
}

/// Direct correlation: weight is (out.c, x.c/groups, k, k).
fn correlate<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, out_shape: Shape, win: Window) -> Tensor<T> {
    let xs = x.shape();
    let cin_g = xs.c / win.groups;
    let cout_g = out_shape.c / win.groups;
    let (oh_len, ow_len) = (out_shape.h, out_shape.w);
    let oplane = oh_len * ow_len;
    let iplane = xs.plane();
    let mut out = Tensor::zeros(out_shape);
    let work = out_shape.len() * cin_g * win.k * win.k;
    let xd = x.data();
    let wd = weight.data();
    for_each_plane(out.data_mut(), oplane, work, |idx, o| {
        let (n, oc) = (idx / out_shape.c, idx % out_shape.c);
        o.fill(bias_value(bias, oc));
        let g = oc / cout_g;
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let inp = &xd[(n * xs.c + ic) * iplane..(n * xs.c + ic + 1) * iplane];
            for kh in 0..win.k {
                let off_h = (kh * win.dilation) as isize - win.padding as isize;
                let (oh0, oh1) = valid_range(oh_len, xs.h, win.stride, off_h);
                for kw in 0..win.k {
                    let wv = wd[((oc * cin_g + icg) * win.k + kh) * win.k + kw];
                    let off_w = (kw * win.dilation) as isize - win.padding as isize;
                    let (ow0, ow1) = valid_range(ow_len, xs.w, win.stride, off_w);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for oh in oh0..oh1 {
                        let ih = (oh as isize * win.stride as isize + off_h) as usize;
                        let iw0 = (ow0 as isize * win.stride as isize + off_w) as usize;
                        let orow = &mut o[oh * ow_len + ow0..oh * ow_len + ow1];
                        let irow = &inp[ih * xs.w..(ih + 1) * xs.w];
                        if win.stride == 1 {
                            for (ov, &iv) in orow.iter_mut().zip(&irow[iw0..]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for (ov, &iv) in orow.iter_mut().zip(irow[iw0..].iter().step_by(win.stride)) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Scatter (transposed correlation): weight is (x.c, out.c/groups, k, k).
fn scatter<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, out_shape: Shape, win: Window) -> Tensor<T> {
    let xs = x.shape();
    let cin_g = xs.c / win.groups;
    let cout_g = out_shape.c / win.groups;
    let (oh_len, ow_len) = (out_shape.h, out_shape.w);
    let oplane = oh_len * ow_len;
    let iplane = xs.plane();
    let mut out = Tensor::zeros(out_shape);
    let work = xs.len() * cout_g * win.k * win.k;
    let xd = x.data();
    let wd = weight.data();
    for_each_plane(out.data_mut(), oplane, work, |idx, o| {
        let (n, oc) = (idx / out_shape.c, idx % out_shape.c);
        o.fill(bias_value(bias, oc));
        let g = oc / cout_g;
        let ocg = oc % cout_g;
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let inp = &xd[(n * xs.c + ic) * iplane..(n * xs.c + ic + 1) * iplane];
            for kh in 0..win.k {
                let off_h = (kh * win.dilation) as isize - win.padding as isize;
                let (ih0, ih1) = valid_range(xs.h, oh_len, win.stride, off_h);
                for kw in 0..win.k {
                    let wv = wd[((ic * cout_g + ocg) * win.k + kh) * win.k + kw];
                    let off_w = (kw * win.dilation) as isize - win.padding as isize;
                    let (iw0, iw1) = valid_range(xs.w, ow_len, win.stride, off_w);
                    if iw0 >= iw1 {
                        continue;
                    }
                    for ih in ih0..ih1 {
                        let oh = (ih as isize * win.stride as isize + off_h) as usize;
                        let ow0 = (iw0 as isize * win.stride as isize + off_w) as usize;
                        let irow = &inp[ih * xs.w + iw0..ih * xs.w + iw1];
                        let orow = &mut o[oh * ow_len..(oh + 1) * ow_len];
                        if win.stride == 1 {
                            for (ov, &iv) in orow[ow0..].iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        } else {
                            for (ov, &iv) in orow[ow0..].iter_mut().step_by(win.stride).zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of a correlation's weight: `src` is the correlation input,
/// `gout` the gradient of its output. Result is (gout.c, src.c/groups, k, k).
fn weight_grad<T: Real>(src: &Tensor<T>, gout: &Tensor<T>, win: Window) -> Tensor<T> {
    let ss = src.shape();
    let gs = gout.shape();
    let cin_g = ss.c / win.groups;
    let cout_g = gs.c / win.groups;
    let kk = win.k * win.k;
    let mut out = Tensor::zeros(Shape::new(gs.c, cin_g, win.k, win.k));
    let work = gs.len() * cin_g * kk;
    let sd = src.data();
    let gd = gout.data();
    let (splane, gplane) = (ss.plane(), gs.plane());
    for_each_plane(out.data_mut(), cin_g * kk, work, |oc, dw| {
        let g = oc / cout_g;
        for n in 0..gs.n {
            let go = &gd[(n * gs.c + oc) * gplane..(n * gs.c + oc + 1) * gplane];
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let inp = &sd[(n * ss.c + ic) * splane..(n * ss.c + ic + 1) * splane];
                for kh in 0..win.k {
                    let off_h = (kh * win.dilation) as isize - win.padding as isize;
                    let (oh0, oh1) = valid_range(gs.h, ss.h, win.stride, off_h);
                    for kw in 0..win.k {
                        let off_w = (kw * win.dilation) as isize - win.padding as isize;
                        let (ow0, ow1) = valid_range(gs.w, ss.w, win.stride, off_w);
                        if ow0 >= ow1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh0..oh1 {
                            let ih = (oh as isize * win.stride as isize + off_h) as usize;
                            let iw0 = (ow0 as isize * win.stride as isize + off_w) as usize;
                            let grow = &go[oh * gs.w + ow0..oh * gs.w + ow1];
                            let irow = &inp[ih * ss.w..(ih + 1) * ss.w];
                            if win.stride == 1 {
                                for (&gv, &iv) in grow.iter().zip(&irow[iw0..]) {
                                    acc += gv * iv;
                                }
                            } else {
                                for (&gv, &iv) in grow.iter().zip(irow[iw0..].iter().step_by(win.stride)) {
                                    acc += gv * iv;
                                }
                            }
                        }
                        dw[icg * kk + kh * win.k + kw] += acc;
                    }
                }
            }
        }
    });
    out
}

fn check_weight<T: Real>(op: &'static str, weight: &Tensor<T>, expect: Shape) -> Result<()> {
    if weight.shape() != expect {
        return Err(Error::shape(op, format!("weight {} but spec requires {}", weight.shape(), expect)));
    }
    Ok(())
}

fn check_bias<T: Real>(op: &'static str, spec: &ConvSpec, bias: Option<&Tensor<T>>) -> Result<()> {
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.shape() == spec.bias_shape() => Ok(()),
        (true, Some(b)) => Err(Error::shape(op, format!("bias {} but spec requires {}", b.shape(), spec.bias_shape()))),
        (true, None) => Err(Error::shape(op, "spec has a bias but none was supplied")),
        (false, Some(_)) => Err(Error::shape(op, "bias supplied for a bias-free spec")),
        (false, None) => Ok(()),
    }
}

pub fn conv2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    check_weight("conv2d", weight, spec.weight_shape())?;
    check_bias("conv2d", spec, bias)?;
    Ok(correlate(input, weight, bias, out_shape, spec.into()))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Real>(grad_out: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let win: Window = spec.into();
    scatter(grad_out, weight, None, input_shape, win)
}

pub fn conv2d_weight_grad<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    weight_grad(input, grad_out, spec.into())
}

pub fn conv_transpose2d<T: Real>(input: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let out_shape = spec.transposed_output_shape(input.shape())?;
    check_weight("conv_transpose2d", weight, spec.transposed_weight_shape())?;
    check_bias("conv_transpose2d", spec, bias)?;
    Ok(scatter(input, weight, bias, out_shape, spec.into()))
}

/// Gradient of [`conv_transpose2d`] with respect to its input.
pub fn conv_transpose2d_backward_input<T: Real>(grad_out: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    correlate(grad_out, weight, None, input_shape, spec.into())
}

pub fn conv_transpose2d_weight_grad<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    // the transposed conv is the adjoint of a correlation from grad_out's
    // channel space to input's, so its weight gradient swaps the roles
    weight_grad(grad_out, input, spec.into())
}

/// Per-channel sum of an output gradient, shaped like a bias.
pub fn bias_grad<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for (i, plane) in grad_out.planes().enumerate().take(s.n * s.c) {
        let c = i % s.c;
        out.data_mut()[c] += plane.iter().fold(T::zero(), |a, &v| a + v);
    }
    out
}
