//! Dense NCHW tensors and the kernel set used by the network.
//!
//! Every kernel is a pure function of its inputs. Kernels that split work
//! across threads do so over whole output planes, so the accumulation order
//! inside one output element never depends on the thread count.

mod conv;
mod io;
mod resize;

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{
    bias_grad, conv2d, conv2d_backward_input, conv2d_weight_grad, conv_transpose2d,
    conv_transpose2d_backward_input, conv_transpose2d_weight_grad, ConvSpec,
};
pub use io::{read_tensor, write_tensor, TensorHeader};
pub use resize::{bilinear_resize, bilinear_resize_backward};

/// Element type of a tensor. Implemented for `f32` (default) and `f64`
/// (gradient-check mode).
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Extents in batch, channel, height, width order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(s: [usize; 4]) -> Self {
        Shape::new(s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a 1x1x1x1 tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape != Shape::scalar() {
            return Err(Error::shape("item", format!("expected scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// One batch item as a 1xCxHxW tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if n >= self.shape.n {
            return Err(Error::shape("batch_item", format!("index {n} out of {}", self.shape.n)));
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
        })
    }

    /// Stack tensors along the batch axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("stack", "no operands"))?;
        let inner = Shape { n: 1, ..first.shape };
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if (Shape { n: 1, ..t.shape }) != inner {
                return Err(Error::shape("stack", format!("{} vs {}", first.shape, t.shape)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape { n, ..inner }, data })
    }

    /// Rectangular spatial window `[y0, y0+h) x [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(Error::shape(
                "crop",
                format!("window {h}x{w} at ({y0},{x0}) exceeds {}x{}", s.h, s.w),
            ));
        }
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for plane in self.data.chunks_exact(s.plane().max(1)).take(s.n * s.c) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * s.w + x0..y * s.w + x0 + w]);
            }
        }
        Ok(Tensor { shape: s.with_spatial(h, w), data })
    }

    pub(crate) fn planes(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.shape.plane().max(1))
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "mul", |x, y| x * y)
}

/// Concatenate along the channel axis, preserving operand order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
    let s0 = first.shape;
    let mut c = 0;
    for p in parts {
        let s = p.shape;
        if s.n != s0.n || s.h != s0.h || s.w != s0.w {
            return Err(Error::shape("concat", format!("{s0} vs {s}")));
        }
        c += s.c;
    }
    let out_shape = s0.with_channels(c);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..s0.n {
        for p in parts {
            let per = p.shape.c * p.shape.plane();
            data.extend_from_slice(&p.data[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Channels `[start, start+len)` of `x`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape;
    if start + len > s.c {
        return Err(Error::shape("slice_channels", format!("[{start}, {}) of {s}", start + len)));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for n in 0..s.n {
        let base = (n * s.c + start) * plane;
        data.extend_from_slice(&x.data[base..base + len * plane]);
    }
    Ok(Tensor { shape: s.with_channels(len), data })
}

/// Amounts of padding on each side of the spatial plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[inline]
fn reflect_index(i: isize, len: usize) -> usize {
    // reflection without repeating the edge sample: -1 -> 1, len -> len-2
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * (len - 1) - i;
    }
    i as usize
}

pub fn pad_reflect<T: Real>(x: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let s = x.shape;
    if pad.top >= s.h.max(1) || pad.bottom >= s.h.max(1) || pad.left >= s.w.max(1) || pad.right >= s.w.max(1) {
        return Err(Error::shape(
            "pad_reflect",
            format!("padding {pad:?} must be smaller than the {}x{} extent", s.h, s.w),
        ));
    }
    let oh = s.h + pad.top + pad.bottom;
    let ow = s.w + pad.left + pad.right;
    let cols: Vec<usize> =
        (0..ow).map(|x| reflect_index(x as isize - pad.left as isize, s.w)).collect();
    let mut data = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.planes().take(s.n * s.c) {
        for y in 0..oh {
            let sy = reflect_index(y as isize - pad.top as isize, s.h);
            let row = &plane[sy * s.w..(sy + 1) * s.w];
            data.extend(cols.iter().map(|&sx| row[sx]));
        }
    }
    Ok(Tensor { shape: s.with_spatial(oh, ow), data })
}

/// Adjoint of [`pad_reflect`]: folds the gradient of the padded tensor back
/// onto the source positions it was copied from.
pub fn pad_reflect_backward<T: Real>(grad: &Tensor<T>, pad: Padding, src: Shape) -> Result<Tensor<T>> {
    let oh = src.h + pad.top + pad.bottom;
    let ow = src.w + pad.left + pad.right;
    if grad.shape != src.with_spatial(oh, ow) {
        return Err(Error::shape("pad_reflect_backward", format!("{} vs {}", grad.shape, src)));
    }
    let mut out = Tensor::zeros(src);
    let plane = src.plane();
    for (p, gplane) in grad.planes().enumerate().take(src.n * src.c) {
        let dst = &mut out.data[p * plane..(p + 1) * plane];
        for y in 0..oh {
            let sy = reflect_index(y as isize - pad.top as isize, src.h);
            for x in 0..ow {
                let sx = reflect_index(x as isize - pad.left as isize, src.w);
                dst[sy * src.w + sx] += gplane[y * ow + x];
            }
        }
    }
    Ok(out)
}

/// Maximum absolute difference divided by the largest reference magnitude.
pub fn max_rel_diff<T: Real>(a: &Tensor<T>, reference: &Tensor<T>) -> f64 {
    assert_eq!(a.shape, reference.shape, "max_rel_diff operands differ in shape");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&x, &r) in a.data.iter().zip(&reference.data) {
        let (x, r) = (x.to_f64().unwrap(), r.to_f64().unwrap());
        diff = diff.max((x - r).abs());
        scale = scale.max(r.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
