//! Synthetic bracketed-exposure data.
//!
//! Scenes are linear radiance. Each frame goes through the sensor model
//! `min(phi * t / g + I0 + n, Imax)`, clipped at zero, and is stored
//! gamma-encoded so that [`ev_align`] maps it back to linear radiance at the
//! reference exposure.

pub mod geometry;
pub mod pfm;

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use geometry::{centered_padding, crop_patches, pad_to, pad_to_multiple, patch_positions, unpad, Patch};
pub use pfm::{read_pfm, write_pfm};

use crate::error::{Error, Result};
use crate::loss::percentile;
use crate::tensor::{concat_channels, Shape, Tensor};

pub const GAMMA: f64 = 2.24;
pub const REFERENCE_FRAME: usize = 1;
pub const FRAME_NAMES: [&str; 3] = ["short", "medium", "long"];

/// Linear-radiance image with its 99th-percentile normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    pub radiance: Tensor<f32>,
    pub norm: f32,
}

impl HdrImage {
    pub fn new(radiance: Tensor<f32>) -> Result<Self> {
        if radiance.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::spec("hdr_image", "radiance must be finite and non-negative"));
        }
        let norm = percentile(radiance.data(), 99.0)?;
        if !(norm > 0.0) {
            return Err(Error::spec("hdr_image", "99th percentile is zero"));
        }
        Ok(HdrImage { radiance, norm })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Short, medium and long exposure times.
    pub exposures: [f64; 3],
    pub gain: f64,
    pub offset: f64,
    pub sigma: f64,
    pub i_max: f64,
    pub seed: u64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        DegradationParams { exposures: [0.25, 1.0, 4.0], gain: 1.0, offset: 0.0, sigma: 0.01, i_max: 1.0, seed: 0 }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.exposures;
        if !(a > 0.0 && a < b && b < c) {
            return Err(Error::Config(format!("exposures must be positive and increasing, got {:?}", self.exposures)));
        }
        if !(self.gain > 0.0 && self.offset >= 0.0 && self.sigma >= 0.0 && self.i_max > 0.0) {
            return Err(Error::Config("need gain > 0, offset >= 0, sigma >= 0, i_max > 0".into()));
        }
        Ok(())
    }

    /// `log2(t_frame / t_reference)`.
    pub fn ev(&self, frame: usize) -> f64 {
        (self.exposures[frame] / self.exposures[REFERENCE_FRAME]).log2()
    }

    pub fn evs(&self) -> [f64; 3] {
        [self.ev(0), self.ev(1), self.ev(2)]
    }
}

/// Sensor reading of `scene` for one frame, in linear units.
pub fn degrade(scene: &Tensor<f32>, params: &DegradationParams, frame: usize) -> Result<Tensor<f32>> {
    params.validate()?;
    let t = params.exposures[frame];
    let (g, i0, imax) = (params.gain, params.offset, params.i_max);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(frame as u64 + 1);
    let noise = Normal::new(0.0, params.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = scene.clone();
    for v in out.data_mut() {
        let n = if params.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (*v as f64 * t / g + i0 + n).min(imax).max(0.0) as f32;
    }
    Ok(out)
}

/// Gamma-encodes a linear reading for storage.
pub fn encode_ldr(linear: &Tensor<f32>, i_max: f64) -> Tensor<f32> {
    linear.map(|v| ((v as f64 / i_max).clamp(0.0, 1.0).powf(1.0 / GAMMA) * i_max) as f32)
}

/// `clamp(I, 0, 1)^gamma / 2^ev`.
pub fn ev_align(ldr: &Tensor<f32>, ev: f64) -> Tensor<f32> {
    ev_align_with(ldr, ev, GAMMA)
}

pub fn ev_align_with(ldr: &Tensor<f32>, ev: f64, gamma: f64) -> Tensor<f32> {
    let div = 2f64.powf(ev);
    ldr.map(|v| ((v as f64).clamp(0.0, 1.0).powf(gamma) / div) as f32)
}

/// The 6-channel network input `[I, f(I)]` for an LDR already divided by
/// its saturation point.
pub fn model_input(ldr: &Tensor<f32>, ev: f64) -> Result<Tensor<f32>> {
    concat_channels(&[ldr, &ev_align(ldr, ev)])
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    rot: f64,
    level: [f64; 3],
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64, lo: f64, hi: f64) -> Self {
        let m = h.min(w);
        let log_level = rng.random_range(lo..hi);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        Ellipse {
            cy: rng.random_range(0.0..h),
            cx: rng.random_range(0.0..w),
            ay: rng.random_range(0.08..0.3) * m,
            ax: rng.random_range(0.08..0.3) * m,
            rot: rng.random_range(0.0..PI),
            level: tint.map(|t| t * 2f64.powf(log_level)),
        }
    }

    /// Coverage in [0, 1] with a soft edge about 1.5 px wide.
    fn mask(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.rot.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = ((u / self.ax).powi(2) + (v / self.ay).powi(2)).sqrt();
        let edge = 1.5 / self.ax.min(self.ay);
        1.0 - smoothstep(1.0 - edge, 1.0 + edge, r)
    }
}

struct Source {
    cy: f64,
    cx: f64,
    sigma: f64,
    peak: f64,
}

impl Source {
    fn radius(&self) -> f64 {
        4.0 * self.sigma
    }

    fn value(&self, y: f64, x: f64) -> f64 {
        let d2 = (y - self.cy).powi(2) + (x - self.cx).powi(2);
        if d2 > self.radius().powi(2) {
            0.0
        } else {
            self.peak * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
        }
    }
}

/// Deterministic scene of smooth gradients, soft ellipses, a deep shadow and
/// bright point sources; spans well over 2^12 in dynamic range.
pub fn synth_scene(seed: u64, height: usize, width: usize) -> Result<HdrImage> {
    if height < 32 || width < 32 {
        return Err(Error::shape("synth_scene", format!("scene {width}x{height} is below 32x32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);

    let theta = rng.random_range(0.0..2.0 * PI);
    let (ds, dc) = theta.sin_cos();
    let corners = [(0.0, 0.0), (0.0, w - 1.0), (h - 1.0, 0.0), (h - 1.0, w - 1.0)];
    let proj: Vec<f64> = corners.iter().map(|&(y, x)| dc * x + ds * y).collect();
    let (pmin, pmax) = proj.iter().fold((f64::MAX, f64::MIN), |(a, b), &p| (a.min(p), b.max(p)));
    let (fy, fx, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..2.0 * PI));
    let bg_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));

    let mut ellipses: Vec<Ellipse> = (0..rng.random_range(5..10)).map(|_| Ellipse::random(&mut rng, h, w, -5.0, 2.0)).collect();
    let mut shadow = Ellipse::random(&mut rng, h, w, -8.0, -7.9);
    shadow.ay = 0.1 * h.min(w);
    shadow.ax = 0.1 * h.min(w);
    shadow.cy = rng.random_range(shadow.ay..h - shadow.ay);
    shadow.cx = rng.random_range(shadow.ax..w - shadow.ax);
    let shadow_reach = shadow.ax.max(shadow.ay) + 2.0;
    ellipses.push(shadow);
    let shadow = ellipses.last().expect("pushed");

    let n_sources = rng.random_range(2..5);
    let mut sources = Vec::with_capacity(n_sources);
    for i in 0..n_sources {
        let sigma = rng.random_range(1.0..2.5);
        let peak = if i == 0 { 128.0 } else { 2f64.powf(rng.random_range(5.0..7.0)) };
        let clear = |cy: f64, cx: f64| ((cy - shadow.cy).powi(2) + (cx - shadow.cx).powi(2)).sqrt() > shadow_reach + 4.0 * sigma;
        let mut placed = None;
        for _ in 0..64 {
            let cy = rng.random_range(4..height - 4) as f64;
            let cx = rng.random_range(4..width - 4) as f64;
            if clear(cy, cx) {
                placed = Some((cy, cx));
                break;
            }
        }
        if placed.is_none() && i == 0 {
            let inner = [(4.0, 4.0), (4.0, w - 5.0), (h - 5.0, 4.0), (h - 5.0, w - 5.0)];
            placed = inner.into_iter().max_by(|a, b| {
                let d = |p: &(f64, f64)| (p.0 - shadow.cy).powi(2) + (p.1 - shadow.cx).powi(2);
                d(a).total_cmp(&d(b))
            });
        }
        if let Some((cy, cx)) = placed {
            sources.push(Source { cy, cx, sigma, peak });
        }
    }

    let mut data = vec![0f32; 3 * height * width];
    let plane = height * width;
    for yi in 0..height {
        for xi in 0..width {
            let (y, x) = (yi as f64, xi as f64);
            let t = (dc * x + ds * y - pmin) / (pmax - pmin).max(1e-12);
            let wave = 0.5 * (2.0 * PI * (fx * x / w + fy * y / h) + phase).sin();
            let bg = 2f64.powf(-7.0 + 6.0 * t + wave);
            let mut px: [f64; 3] = bg_tint.map(|c| c * bg);
            for e in &ellipses {
                let m = e.mask(y, x);
                if m > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - m) + e.level[c] * m;
                    }
                }
            }
            let glow: f64 = sources.iter().map(|s| s.value(y, x)).sum();
            for c in 0..3 {
                data[c * plane + yi * width + xi] = (px[c] + glow) as f32;
            }
        }
    }
    HdrImage::new(Tensor::from_vec(Shape::new(1, 3, height, width), data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub exposures: [f64; 3],
    pub gain: f64,
    pub offset: f64,
    pub sigma: f64,
    pub i_max: f64,
    pub gamma: f64,
    pub seed: u64,
    pub evs: [f64; 3],
    /// Per-frame (dy, dx) translation relative to the ground truth.
    pub shifts: [[i32; 2]; 3],
}

/// Three gamma-encoded exposures and the linear ground truth at the
/// reference exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrTriplet {
    pub frames: [Tensor<f32>; 3],
    pub gt: Tensor<f32>,
    pub meta: TripletMeta,
}

impl LdrTriplet {
    /// The three 6-channel network inputs.
    pub fn model_inputs(&self) -> Result<[Tensor<f32>; 3]> {
        let inv = (1.0 / self.meta.i_max) as f32;
        let f = |i: usize| model_input(&self.frames[i].scale(inv), self.meta.evs[i]);
        Ok([f(0)?, f(1)?, f(2)?])
    }

    /// The exposure-aligned reference frame, the no-fusion baseline.
    pub fn aligned_reference(&self) -> Tensor<f32> {
        let inv = (1.0 / self.meta.i_max) as f32;
        ev_align(&self.frames[REFERENCE_FRAME].scale(inv), self.meta.evs[REFERENCE_FRAME])
    }

    pub fn shape(&self) -> Shape {
        self.gt.shape()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, frame) in FRAME_NAMES.iter().zip(&self.frames) {
            write_pfm(BufWriter::new(fs::File::create(dir.join(format!("{name}.pfm")))?), frame)?;
        }
        write_pfm(BufWriter::new(fs::File::create(dir.join("gt.pfm"))?), &self.gt)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<Tensor<f32>> {
            let path = dir.join(format!("{name}.pfm"));
            let f = fs::File::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            read_pfm(BufReader::new(f))
        };
        let frames = [read("short")?, read("medium")?, read("long")?];
        let gt = read("gt")?;
        let meta: TripletMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if frames.iter().any(|f| f.shape() != gt.shape()) {
            return Err(Error::Format(format!("{}: frame and ground-truth shapes differ", dir.display())));
        }
        Ok(LdrTriplet { frames, gt, meta })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Frames 1 and 3 are translated by up to this many pixels per axis.
    pub max_shift: i32,
    pub degradation: DegradationParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { height: 128, width: 128, max_shift: 2, degradation: DegradationParams::default() }
    }
}

/// Renders one triplet. Frame shifts are drawn from `seed`; pass explicit
/// shifts to [`synth_triplet_with_shifts`] instead.
pub fn synth_triplet(seed: u64, cfg: &SynthConfig) -> Result<LdrTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let s = cfg.max_shift.max(0);
    let mut draw = || [rng.random_range(-s..=s), rng.random_range(-s..=s)];
    let shifts = [draw(), [0, 0], draw()];
    synth_triplet_with_shifts(seed, cfg, shifts)
}

pub fn synth_triplet_with_shifts(seed: u64, cfg: &SynthConfig, shifts: [[i32; 2]; 3]) -> Result<LdrTriplet> {
    let d = DegradationParams { seed, ..cfg.degradation.clone() };
    d.validate()?;
    let margin = shifts.iter().flatten().map(|v| v.unsigned_abs() as usize).max().unwrap_or(0);
    let canvas = synth_scene(seed, cfg.height + 2 * margin, cfg.width + 2 * margin)?.radiance;
    let view = |sh: [i32; 2]| {
        let y = (margin as i32 + sh[0]) as usize;
        let x = (margin as i32 + sh[1]) as usize;
        canvas.crop(y, x, cfg.height, cfg.width)
    };
    let mut frames = Vec::with_capacity(3);
    for (f, &sh) in shifts.iter().enumerate() {
        let linear = degrade(&view(sh)?, &d, f)?;
        frames.push(encode_ldr(&linear, d.i_max));
    }
    let gt_scale = (d.exposures[REFERENCE_FRAME] / d.gain) as f32;
    let gt = view([0, 0])?.scale(gt_scale);
    let meta = TripletMeta {
        exposures: d.exposures,
        gain: d.gain,
        offset: d.offset,
        sigma: d.sigma,
        i_max: d.i_max,
        gamma: GAMMA,
        seed,
        evs: d.evs(),
        shifts,
    };
    let [a, b, c]: [Tensor<f32>; 3] = frames.try_into().expect("three frames");
    Ok(LdrTriplet { frames: [a, b, c], gt, meta })
}

/// Seed of scene `index` within a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1000);
    rng.random()
}

/// Writes `count` triplets to `dir/scene_XXXX`.
pub fn synth_dataset(dir: &Path, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("scene_{i:04}"));
        synth_triplet(scene_seed(seed, i), cfg)?.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads every triplet directory under `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<LdrTriplet>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("no triplets under {}", dir.display())));
    }
    dirs.iter().map(|d| LdrTriplet::load(d)).collect()
}
