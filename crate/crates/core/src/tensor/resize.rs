use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Per-destination sample: (low index, high index, fraction toward high).
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

// half-pixel centers: src = (dst + 0.5) * in/out - 0.5, clamped to [0, in-1]
fn taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: T::from_f64_lossy(src - lo as f64) }
        })
        .collect()
}

fn check(input: Shape, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", format!("target extent {out_h}x{out_w} is empty")));
    }
    if input.h == 0 || input.w == 0 {
        return Err(Error::shape("bilinear_resize", format!("input {input} is empty")));
    }
    Ok(())
}

pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    check(s, out_h, out_w)?;
    if (out_h, out_w) == (s.h, s.w) {
        return Ok(input.clone());
    }
    let ty = taps::<T>(s.h, out_h);
    let tx = taps::<T>(s.w, out_w);
    let mut data = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for plane in input.planes().take(s.n * s.c) {
        for y in &ty {
            let r0 = &plane[y.lo * s.w..(y.lo + 1) * s.w];
            let r1 = &plane[y.hi * s.w..(y.hi + 1) * s.w];
            data.extend(tx.iter().map(|x| {
                let top = r0[x.lo] + x.frac * (r0[x.hi] - r0[x.lo]);
                let bot = r1[x.lo] + x.frac * (r1[x.hi] - r1[x.lo]);
                top + y.frac * (bot - top)
            }));
        }
    }
    Tensor::from_vec(s.with_spatial(out_h, out_w), data)
}

/// Adjoint of [`bilinear_resize`] for an input of shape `input`.
pub fn bilinear_resize_backward<T: Real>(grad: &Tensor<T>, input: Shape) -> Result<Tensor<T>> {
    let gs = grad.shape();
    check(input, gs.h, gs.w)?;
    if gs != input.with_spatial(gs.h, gs.w) {
        return Err(Error::shape("bilinear_resize_backward", format!("{gs} vs {input}")));
    }
    if (gs.h, gs.w) == (input.h, input.w) {
        return Ok(grad.clone());
    }
    let ty = taps::<T>(input.h, gs.h);
    let tx = taps::<T>(input.w, gs.w);
    let mut out = Tensor::zeros(input);
    let plane = input.plane();
    let one = T::one();
    for (p, gplane) in grad.planes().enumerate().take(input.n * input.c) {
        let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, x) in tx.iter().enumerate() {
                let g = gplane[yi * gs.w + xi];
                let gt = g * (one - y.frac);
                let gb = g * y.frac;
                dst[y.lo * input.w + x.lo] += gt * (one - x.frac);
                dst[y.lo * input.w + x.hi] += gt * x.frac;
                dst[y.hi * input.w + x.lo] += gb * (one - x.frac);
                dst[y.hi * input.w + x.hi] += gb * x.frac;
            }
        }
    }
    Ok(out)
}
