use crate::error::{Error, Result};
use crate::tensor::{pad_reflect, Padding, Real, Tensor};

/// Start offsets of `size`-long windows at stride `size - overlap`, plus a
/// final window flush with the far edge when the regular grid stops short.
pub fn patch_positions(extent: usize, size: usize, overlap: usize) -> Result<Vec<usize>> {
    if size == 0 || overlap >= size {
        return Err(Error::spec("crop_patches", format!("size {size} with overlap {overlap} has no stride")));
    }
    if extent < size {
        return Err(Error::shape("crop_patches", format!("extent {extent} is smaller than patch {size}")));
    }
    let stride = size - overlap;
    let mut pos: Vec<usize> = (0..).map(|i| i * stride).take_while(|p| p + size <= extent).collect();
    if pos.last().map_or(true, |&p| p + size < extent) {
        pos.push(extent - size);
    }
    Ok(pos)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T: Real> {
    pub y: usize,
    pub x: usize,
    pub data: Tensor<T>,
}

/// Every window of the row/column position grids, row-major.
pub fn crop_patches<T: Real>(image: &Tensor<T>, size: usize, overlap: usize) -> Result<Vec<Patch<T>>> {
    let s = image.shape();
    let ys = patch_positions(s.h, size, overlap)?;
    let xs = patch_positions(s.w, size, overlap)?;
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            out.push(Patch { y, x, data: image.crop(y, x, size, size)? });
        }
    }
    Ok(out)
}

/// Split of the extra rows/columns, the smaller half on top/left.
pub fn centered_padding(h: usize, w: usize, target_h: usize, target_w: usize) -> Result<Padding> {
    if target_h < h || target_w < w {
        return Err(Error::shape("pad_to", format!("target {target_w}x{target_h} is smaller than {w}x{h}")));
    }
    let (dh, dw) = (target_h - h, target_w - w);
    Ok(Padding { top: dh / 2, bottom: dh - dh / 2, left: dw / 2, right: dw - dw / 2 })
}

/// Reflect-pads to the target extents; returns the padding for [`unpad`].
pub fn pad_to<T: Real>(image: &Tensor<T>, target_h: usize, target_w: usize) -> Result<(Tensor<T>, Padding)> {
    let s = image.shape();
    let pad = centered_padding(s.h, s.w, target_h, target_w)?;
    Ok((pad_reflect(image, pad)?, pad))
}

/// Pads up to the next multiple of `m` in each extent.
pub fn pad_to_multiple<T: Real>(image: &Tensor<T>, m: usize) -> Result<(Tensor<T>, Padding)> {
    let s = image.shape();
    pad_to(image, s.h.div_ceil(m) * m, s.w.div_ceil(m) * m)
}

/// Inverse of [`pad_to`].
pub fn unpad<T: Real>(image: &Tensor<T>, pad: Padding) -> Result<Tensor<T>> {
    let s = image.shape();
    let (h, w) = (s.h.checked_sub(pad.top + pad.bottom), s.w.checked_sub(pad.left + pad.right));
    match (h, w) {
        (Some(h), Some(w)) if h > 0 && w > 0 => image.crop(pad.top, pad.left, h, w),
        _ => Err(Error::shape("unpad", format!("padding {pad:?} exceeds {s}"))),
    }
}
