use super::blocks::{
    align_forward, attention_forward, drdb_forward, pdub_forward, sep_conv_act, sep_conv_with_bias, DenseConv,
    DrdbShape, PdubShape,
};
use super::config::{Architecture, BlockKind, ModelConfig, Upsample};
use super::graph::{Graph, Init};
use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Channels of each network input: the LDR frame and its exposure-aligned copy.
pub const INPUT_CHANNELS: usize = 6;
pub const REFERENCE: usize = 1;

#[derive(Debug, Clone, Copy)]
pub struct FrameFeatures<V> {
    pub high: V,
    pub low: V,
}

fn frame_tag(cfg: &ModelConfig, frame: usize) -> String {
    if cfg.weight_sharing {
        String::new()
    } else {
        format!("{}", frame + 1)
    }
}

fn side_tag(cfg: &ModelConfig, frame: usize) -> String {
    if cfg.weight_sharing {
        "side".into()
    } else {
        format!("f{}", frame + 1)
    }
}

fn check_inputs<G: Graph>(g: &G, cfg: &ModelConfig, frames: &[G::V; 3]) -> Result<()> {
    let s0 = g.shape(frames[0]);
    let m = cfg.spatial_multiple();
    for &f in frames {
        let s = g.shape(f);
        if s != s0 {
            return Err(Error::shape("model_forward", format!("frames differ: {s} vs {s0}")));
        }
    }
    if s0.c != INPUT_CHANNELS {
        return Err(Error::shape("model_forward", format!("frames need {INPUT_CHANNELS} channels, got {s0}")));
    }
    if s0.h % m != 0 || s0.w % m != 0 || s0.h == 0 || s0.w == 0 {
        return Err(Error::shape(
            "model_forward",
            format!("input {s0} must be padded to multiples of {m}"),
        ));
    }
    Ok(())
}

/// Full-resolution and half-resolution features of every frame.
pub fn msenc_forward<G: Graph>(g: &mut G, cfg: &ModelConfig, frames: &[G::V; 3]) -> Result<[FrameFeatures<G::V>; 3]> {
    let e = cfg.encoder_channels;
    let mut out = Vec::with_capacity(3);
    for (i, &x) in frames.iter().enumerate() {
        let s = g.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape("msenc", format!("odd spatial extents in {s}")));
        }
        let tag = format!("enc{}", frame_tag(cfg, i));
        let stem = g.conv(&format!("{tag}.stem"), x, &ConvSpec::new(s.c, e, 3), Init::FanIn)?;
        let stem = g.leaky_relu(stem)?;
        let high = sep_conv_act(g, &format!("{tag}.high"), stem, e, 1, 1)?;
        let low = sep_conv_act(g, &format!("{tag}.low"), high, e, 2, 1)?;
        out.push(FrameFeatures { high, low });
    }
    Ok([out[0], out[1], out[2]])
}

fn trunk<G: Graph>(g: &mut G, cfg: &ModelConfig, x: G::V) -> Result<Vec<G::V>> {
    let pdub = PdubShape { widths: cfg.pdub_widths, dilations: cfg.pdub_dilations, upsample: cfg.upsample };
    let drdb = DrdbShape {
        growth: cfg.drdb_growth,
        layers: cfg.drdb_layers,
        conv: DenseConv::Separable,
        fuse_init: Init::Zero,
    };
    let mut outs = Vec::with_capacity(cfg.block_count);
    let mut cur = x;
    for b in 0..cfg.block_count {
        let name = format!("block{b}");
        cur = match cfg.block_kind {
            BlockKind::Pdub => pdub_forward(g, &name, cur, &pdub)?,
            BlockKind::Drdb => drdb_forward(g, &name, cur, &drdb)?,
        };
        outs.push(cur);
    }
    Ok(outs)
}

/// Three 6-channel frames (short, medium, long) to a 3-channel linear HDR
/// estimate at the input resolution.
pub fn model_forward<G: Graph>(g: &mut G, cfg: &ModelConfig, frames: &[G::V; 3]) -> Result<G::V> {
    cfg.validate()?;
    check_inputs(g, cfg, frames)?;
    match cfg.architecture {
        Architecture::Eapnet => eapnet_forward(g, cfg, frames),
        Architecture::AhdrReference => ahdr_forward(g, cfg, frames),
    }
}

fn eapnet_forward<G: Graph>(g: &mut G, cfg: &ModelConfig, frames: &[G::V; 3]) -> Result<G::V> {
    let (e, c) = (cfg.encoder_channels, cfg.trunk_channels);
    let full = g.shape(frames[0]);
    let feats = msenc_forward(g, cfg, frames)?;
    let r = feats[REFERENCE];

    let mut branches = [None; 3];
    for (i, f) in feats.iter().enumerate() {
        let (high, low) = if i == REFERENCE {
            (f.high, f.low)
        } else {
            let side = side_tag(cfg, i);
            let mut pair = Vec::with_capacity(2);
            for (scale, fi, fr) in [("high", f.high, r.high), ("low", f.low, r.low)] {
                let m = attention_forward(g, &format!("att.{side}.{scale}"), fi, fr, cfg.align_resolution)?;
                let a = align_forward(g, &format!("align.{side}.{scale}"), m, fr, cfg.align_hidden, cfg.align_resolution)?;
                pair.push(a);
            }
            (pair[0], pair[1])
        };
        let reduced = sep_conv_act(g, &format!("reduce{}", frame_tag(cfg, i)), high, e, 2, 1)?;
        let gi = g.concat(&[reduced, low])?;
        let fuse = if i == REFERENCE { "fuse.ref".to_string() } else { format!("fuse.{}", side_tag(cfg, i)) };
        branches[i] = Some(sep_conv_with_bias(g, &fuse, gi, c, 1, 1, Init::FanIn, i == REFERENCE)?);
    }
    let [b0, b1, b2] = branches.map(|b| b.expect("all frames visited"));
    let sides = g.add(b0, b2)?;
    let fused = g.add(sides, b1)?;
    let x = g.leaky_relu(fused)?;

    let outs = trunk(g, cfg, x)?;
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
    let width = outs.len() * c;
    let up = match cfg.upsample {
        Upsample::Bilinear => {
            let y = g.conv("trunk.fuse", cat, &ConvSpec::pointwise(width, e), Init::Zero)?;
            g.resize(y, full.h, full.w)?
        }
        Upsample::Transposed => {
            let spec = ConvSpec::new(width, e, 4).stride(2).padding(1);
            g.conv_transpose("trunk.up", cat, &spec, Init::Zero)?
        }
    };
    let y = g.add(up, r.high)?;
    head(g, cfg, y)
}

fn head<G: Graph>(g: &mut G, cfg: &ModelConfig, y: G::V) -> Result<G::V> {
    let cin = g.shape(y).c;
    let h = g.conv("head.0", y, &ConvSpec::new(cin, cfg.head_channels, 3), Init::FanIn)?;
    let h = g.leaky_relu(h)?;
    g.conv("head.1", h, &ConvSpec::new(cfg.head_channels, 3, 3), Init::FanIn)
}

fn ahdr_forward<G: Graph>(g: &mut G, cfg: &ModelConfig, frames: &[G::V; 3]) -> Result<G::V> {
    let c = cfg.encoder_channels;
    let mut enc = Vec::with_capacity(3);
    for (i, &x) in frames.iter().enumerate() {
        let name = format!("enc{}.stem", frame_tag(cfg, i));
        let f = g.conv(&name, x, &ConvSpec::new(INPUT_CHANNELS, c, 3), Init::FanIn)?;
        enc.push(g.leaky_relu(f)?);
    }
    let r = enc[REFERENCE];
    let mut merged = Vec::with_capacity(3);
    for (i, &f) in enc.iter().enumerate() {
        if i == REFERENCE {
            merged.push(f);
            continue;
        }
        let side = side_tag(cfg, i);
        let pair = g.concat(&[f, r])?;
        let a = g.conv(&format!("att.{side}.0"), pair, &ConvSpec::new(2 * c, 2 * c, 3), Init::FanIn)?;
        let a = g.leaky_relu(a)?;
        let a = g.conv(&format!("att.{side}.1"), a, &ConvSpec::new(2 * c, c, 3), Init::FanIn)?;
        let a = g.sigmoid(a)?;
        merged.push(g.mul(a, f)?);
    }
    let cat = g.concat(&merged)?;
    let mut x = g.conv("merge", cat, &ConvSpec::new(3 * c, c, 3), Init::FanIn)?;

    let drdb = DrdbShape {
        growth: cfg.drdb_growth,
        layers: cfg.drdb_layers,
        conv: DenseConv::Standard,
        fuse_init: Init::FanIn,
    };
    let mut outs = Vec::with_capacity(cfg.block_count);
    for b in 0..cfg.block_count {
        x = drdb_forward(g, &format!("block{b}"), x, &drdb)?;
        outs.push(x);
    }
    let cat = g.concat(&outs)?;
    let y = g.conv("gff.0", cat, &ConvSpec::pointwise(outs.len() * c, c), Init::FanIn)?;
    let y = g.conv("gff.1", y, &ConvSpec::new(c, c, 3), Init::FanIn)?;
    let y = g.add(y, r)?;
    let y = g.conv("up", y, &ConvSpec::new(c, c, 3), Init::FanIn)?;
    let y = g.leaky_relu(y)?;
    g.conv("out", y, &ConvSpec::new(c, 3, 3), Init::FanIn)
}
