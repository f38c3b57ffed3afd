//! Direct-summation oracles and small helpers shared by the integration tests.
#![allow(dead_code)]

use eapnet::tensor::Real;
use eapnet::{ConvSpec, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Real>(r: &mut ChaCha8Rng, shape: impl Into<Shape>) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(r.random_range(-1.0..1.0)))
}

/// Cross-correlation with zero padding, summed in f64.
pub fn naive_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, s: &ConvSpec) -> Tensor<T> {
    let xs = x.shape();
    let (oh, ow) = (s.output_len(xs.h).unwrap(), s.output_len(xs.w).unwrap());
    let (cin_g, cout_g) = (s.in_channels / s.groups, s.out_channels / s.groups);
    Tensor::from_fn([xs.n, s.out_channels, oh, ow], |[n, co, oy, ox]| {
        let g = co / cout_g;
        let mut acc = b.map_or(0.0, |b| b.at(0, co, 0, 0).to_f64().unwrap());
        for ci in 0..cin_g {
            for ky in 0..s.kernel_size {
                for kx in 0..s.kernel_size {
                    let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                    let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        continue;
                    }
                    let xv = x.at(n, g * cin_g + ci, iy as usize, ix as usize).to_f64().unwrap();
                    acc += xv * w.at(co, ci, ky, kx).to_f64().unwrap();
                }
            }
        }
        T::from_f64_lossy(acc)
    })
}

/// Transposed convolution by scattering every input pixel.
pub fn naive_conv_transpose<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, s: &ConvSpec) -> Tensor<T> {
    let xs = x.shape();
    let (oh, ow) = (s.transposed_output_len(xs.h).unwrap(), s.transposed_output_len(xs.w).unwrap());
    let (cin_g, cout_g) = (s.in_channels / s.groups, s.out_channels / s.groups);
    let mut acc = vec![0f64; xs.n * s.out_channels * oh * ow];
    for n in 0..xs.n {
        for ci in 0..s.in_channels {
            let g = ci / cin_g;
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let xv = x.at(n, ci, iy, ix).to_f64().unwrap();
                    for j in 0..cout_g {
                        let co = g * cout_g + j;
                        for ky in 0..s.kernel_size {
                            for kx in 0..s.kernel_size {
                                let oy = (iy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                                let ox = (ix * s.stride + kx * s.dilation) as isize - s.padding as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                acc[((n * s.out_channels + co) * oh + oy as usize) * ow + ox as usize] +=
                                    xv * w.at(ci, j, ky, kx).to_f64().unwrap();
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_fn([xs.n, s.out_channels, oh, ow], |[n, c, y, xx]| {
        let bias = b.map_or(0.0, |b| b.at(0, c, 0, 0).to_f64().unwrap());
        T::from_f64_lossy(acc[((n * s.out_channels + c) * oh + y) * ow + xx] + bias)
    })
}

/// Half-pixel bilinear interpolation, one output pixel at a time.
pub fn naive_resize<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let src = |d: usize, inp: usize, out: usize| ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
    Tensor::from_fn([s.n, s.c, oh, ow], |[n, c, y, xx]| {
        let (sy, sx) = (src(y, s.h, oh), src(xx, s.w, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = |yy, xx2| x.at(n, c, yy, xx2).to_f64().unwrap();
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        T::from_f64_lossy(top * (1.0 - fy) + bot * fy)
    })
}

/// A random valid convolution geometry no larger than 2x8x9x9 at the input.
pub fn random_conv_case(r: &mut ChaCha8Rng) -> (Shape, ConvSpec) {
    loop {
        let groups = [1, 1, 2, 4][r.random_range(0..4)];
        let cin = groups * r.random_range(1..=8 / groups);
        let cout = groups * r.random_range(1..=8 / groups);
        let depthwise = r.random_bool(0.2);
        let (cin, cout, groups) = if depthwise { (cin, cin, cin) } else { (cin, cout, groups) };
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel_size: [1, 3, 5][r.random_range(0..3)],
            stride: r.random_range(1..=2),
            dilation: r.random_range(1..=2),
            padding: r.random_range(0..=2),
            groups,
            has_bias: r.random_bool(0.5),
            output_padding: 0,
        };
        let shape = Shape::new(r.random_range(1..=2), cin, r.random_range(1..=9), r.random_range(1..=9));
        if spec.output_shape(shape).is_ok() {
            return (shape, spec);
        }
    }
}

/// A random transposed geometry, kernels of any size.
pub fn random_transposed_case(r: &mut ChaCha8Rng) -> (Shape, ConvSpec) {
    loop {
        let groups = [1, 1, 2][r.random_range(0..3)];
        let cin = groups * r.random_range(1..=8 / groups);
        let cout = groups * r.random_range(1..=8 / groups);
        let stride = r.random_range(1..=3);
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel_size: r.random_range(1..=4),
            stride,
            dilation: r.random_range(1..=2),
            padding: r.random_range(0..=1),
            groups,
            has_bias: r.random_bool(0.5),
            output_padding: r.random_range(0..stride),
        };
        let shape = Shape::new(r.random_range(1..=2), cin, r.random_range(1..=9), r.random_range(1..=9));
        if spec.transposed_output_shape(shape).is_ok() {
            return (shape, spec);
        }
    }
}
