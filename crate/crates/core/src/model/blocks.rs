use super::config::{Resolution, Upsample};
use super::graph::{Graph, Init};
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Depthwise 3x3 followed by a pointwise projection to `out` channels.
pub fn sep_conv<G: Graph>(
    g: &mut G,
    name: &str,
    x: G::V,
    out: usize,
    stride: usize,
    dilation: usize,
    init: Init,
) -> Result<G::V> {
    sep_conv_with_bias(g, name, x, out, stride, dilation, init, true)
}

#[allow(clippy::too_many_arguments)]
pub fn sep_conv_with_bias<G: Graph>(
    g: &mut G,
    name: &str,
    x: G::V,
    out: usize,
    stride: usize,
    dilation: usize,
    init: Init,
    pw_bias: bool,
) -> Result<G::V> {
    let c = g.shape(x).c;
    let dw = ConvSpec::depthwise(c, 3).stride(stride).dilation(dilation);
    let y = g.conv(&format!("{name}.dw"), x, &dw, Init::FanIn)?;
    g.conv(&format!("{name}.pw"), y, &ConvSpec::pointwise(c, out).bias(pw_bias), init)
}

/// [`sep_conv`] followed by leaky rectification.
pub fn sep_conv_act<G: Graph>(
    g: &mut G,
    name: &str,
    x: G::V,
    out: usize,
    stride: usize,
    dilation: usize,
) -> Result<G::V> {
    let y = sep_conv(g, name, x, out, stride, dilation, Init::FanIn)?;
    g.leaky_relu(y)
}

fn same_shape<G: Graph>(g: &G, op: &'static str, a: G::V, b: G::V) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::shape(op, format!("{sa} vs {sb}")));
    }
    Ok(())
}

fn maybe_half<G: Graph>(g: &mut G, op: &'static str, x: G::V, res: Resolution) -> Result<G::V> {
    let s = g.shape(x);
    match res {
        Resolution::Full => Ok(x),
        Resolution::Half => {
            if s.h % 2 != 0 || s.w % 2 != 0 {
                return Err(Error::shape(op, format!("half resolution needs even extents, got {s}")));
            }
            g.resize(x, s.h / 2, s.w / 2)
        }
    }
}

/// `sigmoid(sep_conv(concat(f_i, f_ref))) * f_i`.
pub fn attention_forward<G: Graph>(
    g: &mut G,
    name: &str,
    f_i: G::V,
    f_ref: G::V,
    res: Resolution,
) -> Result<G::V> {
    same_shape(g, "attention", f_i, f_ref)?;
    let s = g.shape(f_i);
    let pair = g.concat(&[f_i, f_ref])?;
    let pair = maybe_half(g, "attention", pair, res)?;
    let logits = sep_conv(g, name, pair, s.c, 1, 1, Init::FanIn)?;
    let mut a = g.sigmoid(logits)?;
    if res == Resolution::Half {
        a = g.resize(a, s.h, s.w)?;
    }
    g.mul(a, f_i)
}

/// Predicts per-pixel (scale, bias) from the pair and applies
/// `scale * f_i + bias`.
pub fn align_forward<G: Graph>(
    g: &mut G,
    name: &str,
    f_i: G::V,
    f_ref: G::V,
    hidden: usize,
    res: Resolution,
) -> Result<G::V> {
    same_shape(g, "align", f_i, f_ref)?;
    let s = g.shape(f_i);
    let pair = g.concat(&[f_i, f_ref])?;
    let pair = maybe_half(g, "align", pair, res)?;
    let h = sep_conv_act(g, &format!("{name}.0"), pair, hidden, 1, 1)?;
    let h = sep_conv_act(g, &format!("{name}.1"), h, hidden, 1, 1)?;
    let mut sb = sep_conv(g, &format!("{name}.2"), h, 2 * s.c, 1, 1, Init::AlignIdentity)?;
    if res == Resolution::Half {
        sb = g.resize(sb, s.h, s.w)?;
    }
    let scale = g.slice_channels(sb, 0, s.c)?;
    let bias = g.slice_channels(sb, s.c, s.c)?;
    let scaled = g.mul(scale, f_i)?;
    g.add(scaled, bias)
}

/// Doubles spatial extents, either bilinearly or with a learned depthwise
/// 2x2 transposed convolution.
pub fn upsample2<G: Graph>(g: &mut G, name: &str, x: G::V, kind: Upsample) -> Result<G::V> {
    let s = g.shape(x);
    match kind {
        Upsample::Bilinear => g.resize(x, 2 * s.h, 2 * s.w),
        Upsample::Transposed => {
            let spec = ConvSpec::depthwise(s.c, 2).stride(2).padding(0);
            g.conv_transpose(name, x, &spec, Init::FanIn)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PdubShape {
    pub widths: [usize; 2],
    pub dilations: [usize; 3],
    pub upsample: Upsample,
}

/// Three-level dilated U-shape block with concat skips and a zero-started
/// residual projection.
pub fn pdub_forward<G: Graph>(g: &mut G, name: &str, x: G::V, p: &PdubShape) -> Result<G::V> {
    let s = g.shape(x);
    if s.h % 4 != 0 || s.w % 4 != 0 {
        return Err(Error::shape("pdub", format!("extents must be multiples of 4, got {s}")));
    }
    let (c, [w2, w3], [d1, d2, d3]) = (s.c, p.widths, p.dilations);
    let n = |part: &str| format!("{name}.{part}");

    let e1 = sep_conv_act(g, &n("enc1"), x, c, 1, d1)?;
    let down = sep_conv_act(g, &n("down1"), e1, w2, 2, 1)?;
    let e2 = sep_conv_act(g, &n("enc2"), down, w2, 1, d2)?;
    let down = sep_conv_act(g, &n("down2"), e2, w3, 2, 1)?;
    let e3 = sep_conv_act(g, &n("enc3"), down, w3, 1, d3)?;

    let up = upsample2(g, &n("up2"), e3, p.upsample)?;
    let cat = g.concat(&[up, e2])?;
    let f = g.conv(&n("fuse2"), cat, &ConvSpec::pointwise(w3 + w2, w2), Init::FanIn)?;
    let f = g.leaky_relu(f)?;
    let dec2 = sep_conv_act(g, &n("dec2"), f, w2, 1, d2)?;

    let up = upsample2(g, &n("up1"), dec2, p.upsample)?;
    let cat = g.concat(&[up, e1])?;
    let f = g.conv(&n("fuse1"), cat, &ConvSpec::pointwise(w2 + c, c), Init::FanIn)?;
    let f = g.leaky_relu(f)?;
    let dec1 = sep_conv_act(g, &n("dec1"), f, c, 1, d1)?;

    let proj = g.conv(&n("proj"), dec1, &ConvSpec::pointwise(c, c), Init::Zero)?;
    g.add(x, proj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseConv {
    /// Depthwise-separable dense layers.
    Separable,
    /// Full 3x3 dense layers.
    Standard,
}

#[derive(Debug, Clone, Copy)]
pub struct DrdbShape {
    pub growth: usize,
    pub layers: usize,
    pub conv: DenseConv,
    pub fuse_init: Init,
}

/// Dilated residual dense block: every layer sees all earlier outputs.
pub fn drdb_forward<G: Graph>(g: &mut G, name: &str, x: G::V, p: &DrdbShape) -> Result<G::V> {
    let c = g.shape(x).c;
    let mut feats = vec![x];
    for i in 0..p.layers {
        let input = if feats.len() == 1 { x } else { g.concat(&feats)? };
        let layer = format!("{name}.dense{i}");
        let y = match p.conv {
            DenseConv::Separable => sep_conv(g, &layer, input, p.growth, 1, 2, Init::FanIn)?,
            DenseConv::Standard => {
                let cin = g.shape(input).c;
                g.conv(&layer, input, &ConvSpec::new(cin, p.growth, 3).dilation(2), Init::FanIn)?
            }
        };
        feats.push(g.leaky_relu(y)?);
    }
    let cat = g.concat(&feats)?;
    let width = c + p.layers * p.growth;
    let fused = g.conv(&format!("{name}.fuse"), cat, &ConvSpec::pointwise(width, c), p.fuse_init)?;
    g.add(x, fused)
}
