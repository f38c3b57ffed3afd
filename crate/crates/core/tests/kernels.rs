mod common;

use common::*;
use eapnet::tensor::{
    add, bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward_input, conv2d_weight_grad,
    conv_transpose2d, conv_transpose2d_backward_input, conv_transpose2d_weight_grad, max_rel_diff, pad_reflect,
    pad_reflect_backward, Padding,
};
use eapnet::{ConvSpec, Tensor};
use rand::Rng;

#[test]
fn conv2d_matches_direct_sum() {
    let mut r = rng(11);
    for _ in 0..120 {
        let (shape, spec) = random_conv_case(&mut r);
        let x = random_tensor::<f32>(&mut r, shape);
        let w = random_tensor::<f32>(&mut r, spec.weight_shape());
        let b = spec.has_bias.then(|| random_tensor::<f32>(&mut r, spec.bias_shape()));
        let got = conv2d(&x, &spec, &w, b.as_ref()).unwrap();
        let want = naive_conv(&x, &w, b.as_ref(), &spec);
        assert!(max_rel_diff(&got, &want) <= 1e-6, "{spec:?} on {shape}");
    }
}

#[test]
fn conv_transpose2d_matches_scatter() {
    let mut r = rng(12);
    for _ in 0..120 {
        let (shape, spec) = random_transposed_case(&mut r);
        let x = random_tensor::<f32>(&mut r, shape);
        let w = random_tensor::<f32>(&mut r, spec.transposed_weight_shape());
        let b = spec.has_bias.then(|| random_tensor::<f32>(&mut r, spec.bias_shape()));
        let got = conv_transpose2d(&x, &spec, &w, b.as_ref()).unwrap();
        let want = naive_conv_transpose(&x, &w, b.as_ref(), &spec);
        assert!(max_rel_diff(&got, &want) <= 1e-6, "{spec:?} on {shape}");
    }
}

#[test]
fn resize_matches_pointwise_formula() {
    let mut r = rng(13);
    for _ in 0..120 {
        let shape = [r.random_range(1..=2), r.random_range(1..=8), r.random_range(1..=9), r.random_range(1..=9)];
        let (oh, ow) = (r.random_range(1..=18), r.random_range(1..=18));
        let x = random_tensor::<f32>(&mut r, shape);
        let got = bilinear_resize(&x, oh, ow).unwrap();
        assert!(max_rel_diff(&got, &naive_resize(&x, oh, ow)) <= 1e-6);
    }
}

#[test]
fn resize_identity_and_constants() {
    let mut r = rng(14);
    let x = random_tensor::<f32>(&mut r, [1, 2, 5, 7]);
    assert_eq!(bilinear_resize(&x, 5, 7).unwrap(), x);
    let c = Tensor::<f32>::full([1, 1, 3, 5], 0.625);
    assert!(bilinear_resize(&c, 11, 4).unwrap().data().iter().all(|&v| v == 0.625));
    assert!(bilinear_resize(&c, 0, 4).is_err());
}

// <A x, y> == <x, A^T y> for every linear kernel and its backward.
#[test]
fn backward_kernels_are_adjoint() {
    let mut r = rng(15);
    for _ in 0..40 {
        let (shape, spec) = random_conv_case(&mut r);
        let spec = spec.bias(false);
        let x = random_tensor::<f64>(&mut r, shape);
        let w = random_tensor::<f64>(&mut r, spec.weight_shape());
        let y = conv2d(&x, &spec, &w, None).unwrap();
        let g = random_tensor::<f64>(&mut r, y.shape());
        let lhs = y.dot(&g).unwrap();
        let gx = conv2d_backward_input(&g, &spec, &w, shape);
        assert!((lhs - x.dot(&gx).unwrap()).abs() <= 1e-10 * (1.0 + lhs.abs()));
        let gw = conv2d_weight_grad(&x, &g, &spec);
        assert!((lhs - w.dot(&gw).unwrap()).abs() <= 1e-10 * (1.0 + lhs.abs()));

        let (shape, spec) = random_transposed_case(&mut r);
        let spec = spec.bias(false);
        let x = random_tensor::<f64>(&mut r, shape);
        let w = random_tensor::<f64>(&mut r, spec.transposed_weight_shape());
        let y = conv_transpose2d(&x, &spec, &w, None).unwrap();
        let g = random_tensor::<f64>(&mut r, y.shape());
        let lhs = y.dot(&g).unwrap();
        let gx = conv_transpose2d_backward_input(&g, &spec, &w, shape);
        assert!((lhs - x.dot(&gx).unwrap()).abs() <= 1e-10 * (1.0 + lhs.abs()));
        let gw = conv_transpose2d_weight_grad(&x, &g, &spec);
        assert!((lhs - w.dot(&gw).unwrap()).abs() <= 1e-10 * (1.0 + lhs.abs()));

        let shape = [1, 2, r.random_range(2..=9), r.random_range(2..=9)];
        let x = random_tensor::<f64>(&mut r, shape);
        let (oh, ow) = (r.random_range(1..=18), r.random_range(1..=18));
        let y = bilinear_resize(&x, oh, ow).unwrap();
        let g = random_tensor::<f64>(&mut r, y.shape());
        let gx = bilinear_resize_backward(&g, x.shape()).unwrap();
        assert!((y.dot(&g).unwrap() - x.dot(&gx).unwrap()).abs() <= 1e-10);

        let s = x.shape();
        let pad = Padding {
            top: r.random_range(0..s.h),
            bottom: r.random_range(0..s.h),
            left: r.random_range(0..s.w),
            right: r.random_range(0..s.w),
        };
        let y = pad_reflect(&x, pad).unwrap();
        let g = random_tensor::<f64>(&mut r, y.shape());
        let gx = pad_reflect_backward(&g, pad, s).unwrap();
        assert!((y.dot(&g).unwrap() - x.dot(&gx).unwrap()).abs() <= 1e-10);
    }
}

#[test]
fn conv_is_linear_in_input() {
    let mut r = rng(16);
    let spec = ConvSpec::new(3, 4, 3).bias(false).dilation(2);
    let w = random_tensor::<f64>(&mut r, spec.weight_shape());
    let a = random_tensor::<f64>(&mut r, [2, 3, 7, 6]);
    let b = random_tensor::<f64>(&mut r, [2, 3, 7, 6]);
    let lhs = conv2d(&add(&a.scale(2.0), &b.scale(-3.0)).unwrap(), &spec, &w, None).unwrap();
    let rhs = add(&conv2d(&a, &spec, &w, None).unwrap().scale(2.0), &conv2d(&b, &spec, &w, None).unwrap().scale(-3.0)).unwrap();
    assert!(max_rel_diff(&lhs, &rhs) <= 1e-12);
}

#[test]
fn kernels_are_deterministic() {
    let mut r = rng(17);
    let spec = ConvSpec::new(8, 8, 3).stride(2);
    let x = random_tensor::<f32>(&mut r, [2, 8, 9, 9]);
    let w = random_tensor::<f32>(&mut r, spec.weight_shape());
    let b = random_tensor::<f32>(&mut r, spec.bias_shape());
    let first = conv2d(&x, &spec, &w, Some(&b)).unwrap();
    for _ in 0..3 {
        assert_eq!(conv2d(&x, &spec, &w, Some(&b)).unwrap().data(), first.data());
    }
}

#[test]
fn invalid_geometry_is_rejected() {
    let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
    let spec = ConvSpec::new(3, 4, 3);
    assert!(conv2d(&x, &spec, &Tensor::zeros([4, 2, 3, 3]), None).is_err());
    assert!(conv2d(&Tensor::<f32>::zeros([1, 2, 4, 4]), &spec, &Tensor::zeros(spec.weight_shape()), None).is_err());
    let even = ConvSpec::new(3, 4, 2);
    assert!(conv2d(&x, &even, &Tensor::zeros(even.weight_shape()), None).is_err());
    let grouped = ConvSpec { groups: 2, ..ConvSpec::new(3, 4, 3) };
    assert!(grouped.validate().is_err());
}
