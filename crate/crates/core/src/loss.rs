//! Tonemapped reconstruction losses and PSNR metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mu: f64,
    /// Weight of the tonemapped L1 term.
    pub alpha: f64,
    /// Weight of the tanh L1 term.
    pub beta: f64,
    /// Percentile of the ground truth that maps to 1 before tonemapping.
    pub percentile: f64,
    pub peak: f64,
    /// PSNR reported when the error is exactly zero.
    pub psnr_cap: f64,
    /// Divide by `1 + mu` instead of `ln(1 + mu)` in the tonemap.
    pub linear_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu: 5000.0,
            alpha: 0.5,
            beta: 0.5,
            percentile: 99.0,
            peak: 1.0,
            psnr_cap: 100.0,
            linear_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::Config(format!("percentile must be in (0, 100], got {}", self.percentile)));
        }
        Ok(())
    }

    pub fn denominator(&self) -> f64 {
        if self.linear_denominator {
            1.0 + self.mu
        } else {
            self.mu.ln_1p()
        }
    }
}

/// Value at sorted index `ceil(p/100 * n) - 1`, found by selection.
pub fn percentile<T: Real>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::spec("percentile", "no values"));
    }
    let n = values.len();
    let k = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(*kth)
}

/// The normalizer of a ground-truth image; rejects non-positive values.
pub fn gt_normalizer<T: Real>(gt: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    let p = percentile(gt.data(), cfg.percentile)?;
    if !(p > T::zero()) {
        return Err(Error::spec("mu_law_l1", format!("ground-truth percentile {p} is not positive")));
    }
    Ok(p)
}

/// `ln(1 + mu * max(x, 0)) / ln(1 + mu)`.
pub fn mu_tonemap<T: Real>(x: &Tensor<T>, cfg: &LossConfig) -> Tensor<T> {
    let mu = T::from_f64_lossy(cfg.mu);
    let d = T::from_f64_lossy(cfg.denominator());
    x.map(|v| (mu * v.max(T::zero())).ln_1p() / d)
}

fn tonemap_var<T: Real>(tape: &mut Tape<T>, x: Var, inv_norm: T, cfg: &LossConfig) -> Result<Var> {
    let x = tape.scale(x, inv_norm)?;
    let x = tape.clamp_min(x, T::zero())?;
    tape.mu_law(x, T::from_f64_lossy(cfg.mu), T::from_f64_lossy(cfg.denominator()))
}

/// Tonemapped L1 with an explicit normalizer applied to both operands.
pub fn mu_law_l1_with_norm<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var, norm: T, cfg: &LossConfig) -> Result<Var> {
    let inv = T::one() / norm;
    let tp = tonemap_var(tape, pred, inv, cfg)?;
    let tg = tonemap_var(tape, gt, inv, cfg)?;
    let d = tape.sub(tp, tg)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Tonemapped L1 after normalizing both operands by the ground-truth
/// percentile.
pub fn mu_law_l1<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let norm = gt_normalizer(tape.value(gt), cfg)?;
    mu_law_l1_with_norm(tape, pred, gt, norm, cfg)
}

/// `mean |tanh(gt) - tanh(pred)|`.
pub fn tanh_l1<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let tp = tape.tanh(pred)?;
    let tg = tape.tanh(gt)?;
    let d = tape.sub(tg, tp)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// `alpha * mu_law_l1 + beta * tanh_l1`.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let l = mu_law_l1(tape, pred, gt, cfg)?;
    let g = tanh_l1(tape, pred, gt)?;
    let l = tape.scale(l, T::from_f64_lossy(cfg.alpha))?;
    let g = tape.scale(g, T::from_f64_lossy(cfg.beta))?;
    tape.add(l, g)
}

fn on_tape<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<T> {
    pred.expect_same_shape(gt, "loss")?;
    let mut tape = Tape::new();
    let (p, g) = (tape.input(pred.clone()), tape.input(gt.clone()));
    let out = f(&mut tape, p, g)?;
    tape.value(out).item()
}

pub fn mu_law_l1_value<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    on_tape(pred, gt, |t, p, g| mu_law_l1(t, p, g, cfg))
}

pub fn tanh_l1_value<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    on_tape(pred, gt, tanh_l1)
}

pub fn combined_loss_value<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    on_tape(pred, gt, |t, p, g| combined_loss(t, p, g, cfg))
}

/// `20 log10(peak / rmse)`, or `cap` when the two are identical.
pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, peak: f64, cap: f64) -> Result<f64> {
    pred.expect_same_shape(gt, "psnr")?;
    let n = pred.len().max(1) as f64;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a.to_f64().unwrap() - b.to_f64().unwrap();
            d * d
        })
        .sum();
    let mse = sse / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// PSNR between tonemapped images, both normalized by the ground-truth
/// percentile.
pub fn psnr_mu<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    pred.expect_same_shape(gt, "psnr_mu")?;
    let inv = T::one() / gt_normalizer(gt, cfg)?;
    let tp = mu_tonemap(&pred.scale(inv), cfg);
    let tg = mu_tonemap(&gt.scale(inv), cfg);
    psnr(&tp, &tg, 1.0, cfg.psnr_cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_index_rule() {
        let v: Vec<f64> = (1..=200).rev().map(f64::from).collect();
        // ceil(0.99 * 200) - 1 = 197, the 198th smallest value
        assert_eq!(percentile(&v, 99.0).unwrap(), 198.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 200.0);
        assert_eq!(percentile(&[5.0f32], 99.0).unwrap(), 5.0);
    }

    #[test]
    fn tonemap_endpoints() {
        let cfg = LossConfig::default();
        let t = mu_tonemap(&Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 0.5]).unwrap(), &cfg);
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 1.0).abs() < 1e-15);
        assert!((t.data()[2] - 2501f64.ln() / 5001f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn linear_denominator_breaks_unit_endpoint() {
        let cfg = LossConfig { linear_denominator: true, ..Default::default() };
        let t = mu_tonemap(&Tensor::<f64>::ones([1, 1, 1, 1]), &cfg);
        assert!((t.data()[0] - 5001f64.ln() / 5001.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_gt_rejected() {
        let z = Tensor::<f32>::zeros([1, 3, 4, 4]);
        assert!(mu_law_l1_value(&z, &z, &LossConfig::default()).is_err());
    }

    #[test]
    fn tanh_l1_scalar() {
        let p = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let g = Tensor::<f64>::ones([1, 1, 1, 1]);
        assert!((tanh_l1_value(&p, &g).unwrap() - 1f64.tanh()).abs() < 1e-15);
        assert!((tanh_l1_value(&p, &g).unwrap() - 0.76159).abs() < 1e-5);
        assert_eq!(tanh_l1_value(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn psnr_closed_forms() {
        let g = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let p = Tensor::<f64>::full([1, 3, 4, 4], 0.1);
        assert!((psnr(&p, &g, 1.0, 100.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&g, &g, 1.0, 100.0).unwrap(), 100.0);
        let gt = Tensor::<f64>::full([1, 3, 4, 4], 0.3);
        assert_eq!(psnr_mu(&gt, &gt, &LossConfig::default()).unwrap(), 100.0);
    }
}
