//! Adam with warmup and step decay, parameter EMA, and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore, Tape};
use crate::data::{patch_positions, LdrTriplet};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, gt_normalizer, psnr, psnr_mu, LossConfig};
use crate::model::{init_params, model_forward, predict, Checkpoint, Exec, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    pub decay_every: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { base_lr: 8e-4, warmup_steps: 1000, decay: 0.75, decay_every: 100_000 }
    }
}

impl Schedule {
    /// Linear warmup to `base_lr`, then `decay` every `decay_every` steps.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::Config("learning-rate steps start at 1".into()));
        }
        if step <= self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        Ok(self.base_lr * self.decay.powi((step / self.decay_every) as i32))
    }
}

/// [`Schedule::lr_at`] with the default schedule.
pub fn lr_at(step: u64) -> Result<f64> {
    Schedule::default().lr_at(step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One bias-corrected update. Nothing changes when any gradient is
    /// non-finite or misshapen.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &GradMap<f32>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| Error::Config(format!("no gradient for `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("`{name}`: gradient {} vs parameter {}", g.shape(), p.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked").data();
            let m = self.m.get_mut(name).expect("same names").data_mut();
            let v = self.v.get_mut(name).expect("same names").data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamStore<f32>, params: &ParamStore<f32>, decay: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let s = shadow.get(name).ok_or_else(|| Error::Config(format!("EMA shadow lacks `{name}`")))?;
        if s.shape() != p.shape() {
            return Err(Error::shape("ema_update", format!("`{name}`: {} vs {}", s.shape(), p.shape())));
        }
    }
    let (d, e) = (decay as f32, (1.0 - decay) as f32);
    for (name, p) in params.iter() {
        let s = shadow.get_mut(name).expect("checked");
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + e * pv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patch_overlap: usize,
    /// Trailing triplets of the dataset held out for evaluation.
    pub holdout: usize,
    pub eval_every: u64,
    pub ema_interval: u64,
    pub ema_decay: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub schedule: Schedule,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            patch_size: 64,
            patch_overlap: 32,
            holdout: 4,
            eval_every: 500,
            ema_interval: 100,
            ema_decay: 0.5,
            checkpoint_every: 500,
            seed: 0,
            schedule: Schedule::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a TOML table; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub psnr_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_raw: Option<EvalMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub checkpoint_dir: PathBuf,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Mean of `window` values ending at index `end` (exclusive).
pub fn moving_average(values: &[f64], end: usize, window: usize) -> Option<f64> {
    if window == 0 || end < window || end > values.len() {
        return None;
    }
    Some(values[end - window..end].iter().sum::<f64>() / window as f64)
}

/// Linear-domain PSNR after dividing both images by the ground-truth
/// percentile.
pub fn normalized_psnr(pred: &Tensor<f32>, gt: &Tensor<f32>, loss: &LossConfig) -> Result<f64> {
    let inv = 1.0 / gt_normalizer(gt, loss)?;
    psnr(&pred.scale(inv), &gt.scale(inv), loss.peak, loss.psnr_cap)
}

/// Mean PSNR and PSNR-mu of `params` over `triplets`, predictions clamped at 0.
pub fn evaluate(cfg: &ModelConfig, params: &ParamStore<f32>, triplets: &[LdrTriplet], loss: &LossConfig) -> Result<EvalMetrics> {
    if triplets.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let (mut p, mut pm) = (0.0, 0.0);
    for t in triplets {
        let [a, b, c] = t.model_inputs()?;
        let pred = predict(cfg, params, [&a, &b, &c])?.map(|v| v.max(0.0));
        p += normalized_psnr(&pred, &t.gt, loss)?;
        pm += psnr_mu(&pred, &t.gt, loss)?;
    }
    let n = triplets.len() as f64;
    Ok(EvalMetrics { psnr: p / n, psnr_mu: pm / n })
}

/// Mean metrics of the exposure-aligned reference frame against the ground truth.
pub fn reference_baseline(triplets: &[LdrTriplet], loss: &LossConfig) -> Result<EvalMetrics> {
    let (mut p, mut pm) = (0.0, 0.0);
    for t in triplets {
        let r = t.aligned_reference();
        p += normalized_psnr(&r, &t.gt, loss)?;
        pm += psnr_mu(&r, &t.gt, loss)?;
    }
    let n = triplets.len().max(1) as f64;
    Ok(EvalMetrics { psnr: p / n, psnr_mu: pm / n })
}

struct Sampler {
    inputs: Vec<[Tensor<f32>; 3]>,
    gts: Vec<Tensor<f32>>,
    windows: Vec<(usize, usize, usize)>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(train: &[LdrTriplet], size: usize, overlap: usize, seed: u64) -> Result<Self> {
        let mut inputs = Vec::with_capacity(train.len());
        let mut windows = Vec::new();
        for (i, t) in train.iter().enumerate() {
            let s = t.shape();
            for y in patch_positions(s.h, size, overlap)? {
                for x in patch_positions(s.w, size, overlap)? {
                    windows.push((i, y, x));
                }
            }
            inputs.push(t.model_inputs()?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        Ok(Sampler {
            inputs,
            gts: train.iter().map(|t| t.gt.clone()).collect(),
            order: Vec::new(),
            windows,
            cursor: 0,
            rng,
        })
    }

    /// Next window of a seeded epoch-wise shuffle.
    fn next(&mut self) -> (usize, usize, usize) {
        if self.cursor == self.order.len() {
            self.order = (0..self.windows.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.windows[self.order[self.cursor - 1]]
    }
}

fn save_atomic(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    ckpt.save(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Trains from seeded initialization, writing `metrics.jsonl` and
/// `checkpoint/` under `out`. A non-finite loss aborts the run and leaves the
/// last periodic checkpoint in place.
pub fn train_loop(model: &ModelConfig, cfg: &TrainConfig, data: &[LdrTriplet], out: &Path) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.loss.validate()?;
    if data.len() <= cfg.holdout {
        return Err(Error::Config(format!("dataset of {} triplets leaves nothing after holding out {}", data.len(), cfg.holdout)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let m = model.spatial_multiple();
    if cfg.patch_size % m != 0 {
        return Err(Error::Config(format!("patch_size {} must be a multiple of {m}", cfg.patch_size)));
    }
    let (train, held) = data.split_at(data.len() - cfg.holdout);
    fs::create_dir_all(out)?;
    let ckpt_dir = out.join("checkpoint");
    let mut log_file = fs::File::create(out.join("metrics.jsonl"))?;

    let mut params = init_params::<f32>(model)?;
    let mut ema = params.clone();
    let mut adam = Adam::new(&params);
    let mut sampler = Sampler::new(train, cfg.patch_size, cfg.patch_overlap, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let p = cfg.patch_size;

    if cfg.steps == 0 {
        let ckpt = Checkpoint::new(model, 0, params.clone(), Some(ema));
        save_atomic(&ckpt, &ckpt_dir)?;
        return Ok(TrainOutcome { checkpoint: ckpt, log, checkpoint_dir: ckpt_dir });
    }

    for step in 1..=cfg.steps {
        let lr = cfg.schedule.lr_at(step)?;
        let mut tape = Tape::<f32>::new();
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let (i, y, x) = sampler.next();
            let mut vars = Vec::with_capacity(3);
            for f in &sampler.inputs[i] {
                vars.push(tape.input(f.crop(y, x, p, p)?));
            }
            let vars = [vars[0], vars[1], vars[2]];
            let gt = sampler.gts[i].crop(y, x, p, p)?;
            let pred = model_forward(&mut Exec::new(&mut tape, &params), model, &vars)?;
            let g = tape.input(gt);
            let l = combined_loss(&mut tape, pred, g, &cfg.loss)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss_var = tape.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f32)?;
        let loss = tape.value(loss_var).item()? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let mut grads = tape.backward(loss_var)?;
        grads.fill_missing(&params);
        drop(tape);
        adam.step(&mut params, &grads, lr)?;
        if step % cfg.ema_interval.max(1) == 0 {
            ema_update(&mut ema, &params, cfg.ema_decay)?;
        }

        let mut row = LogRow { step, lr, loss, eval: None, eval_raw: None };
        if !held.is_empty() && (step % cfg.eval_every.max(1) == 0 || step == cfg.steps) {
            row.eval = Some(evaluate(model, &ema, held, &cfg.loss)?);
            row.eval_raw = Some(evaluate(model, &params, held, &cfg.loss)?);
        }
        writeln!(log_file, "{}", serde_json::to_string(&row)?)?;
        log.push(row);

        if step % cfg.checkpoint_every.max(1) == 0 || step == cfg.steps {
            save_atomic(&Checkpoint::new(model, step, params.clone(), Some(ema.clone())), &ckpt_dir)?;
        }
    }
    let checkpoint = Checkpoint::new(model, cfg.steps, params, Some(ema));
    Ok(TrainOutcome { checkpoint, log, checkpoint_dir: ckpt_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(500).unwrap(), 4e-4);
        assert_eq!(lr_at(1000).unwrap(), 8e-4);
        assert!((lr_at(250_000).unwrap() - 4.5e-4).abs() < 1e-18);
        assert!(lr_at(0).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full([1, 1, 1, 2], 2.0f32));
        let mut shadow = store.zeros_like();
        ema_update(&mut shadow, &store, 0.5).unwrap();
        assert_eq!(shadow.get("w").unwrap().data(), &[1.0, 1.0]);
        ema_update(&mut shadow, &store, 0.0).unwrap();
        assert_eq!(shadow, store);
    }

    #[test]
    fn partial_toml() {
        let cfg = TrainConfig::from_toml("steps = 10\n[loss]\nalpha = 1.0\n").unwrap();
        assert_eq!((cfg.steps, cfg.batch_size, cfg.loss.alpha, cfg.loss.mu), (10, 4, 1.0, 5000.0));
        assert!(TrainConfig::from_toml("stepz = 10").is_err());
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn moving_average_window() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&v, 2, 2), Some(1.5));
        assert_eq!(moving_average(&v, 4, 2), Some(3.5));
        assert_eq!(moving_average(&v, 1, 2), None);
    }
}
