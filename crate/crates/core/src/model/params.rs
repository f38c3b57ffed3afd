use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{InitMode, ModelConfig};
use super::graph::{Init, ParamDecl};
use crate::autodiff::ParamStore;
use crate::cost::{trace_model, CountOptions};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Real, Shape, Tensor};

/// Every parameter the model declares, in first-use order.
pub fn param_decls(cfg: &ModelConfig) -> Result<Vec<ParamDecl>> {
    let m = cfg.spatial_multiple().max(8);
    let (tracer, _, _) = trace_model(cfg, 2 * m, 2 * m, CountOptions::default())?;
    Ok(tracer.params)
}

/// Seeded parameters for `cfg`.
pub fn init_params<T: Real>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for d in param_decls(cfg)? {
        let bound = (3.0 / d.fan_in.max(1) as f64).sqrt();
        let mut uniform = || Tensor::from_fn(d.shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)));
        let init = if cfg.init == InitMode::Random { Init::FanIn } else { d.init };
        let t = match (init, d.is_bias) {
            (Init::FanIn, false) => uniform(),
            (Init::FanIn, true) if cfg.init == InitMode::Random => uniform(),
            (Init::FanIn, true) | (Init::Zero, _) | (Init::AlignIdentity, false) => Tensor::zeros(d.shape),
            (Init::AlignIdentity, true) => {
                let half = d.shape.c / 2;
                Tensor::from_fn(d.shape, |[_, c, _, _]| if c < half { T::one() } else { T::zero() })
            }
        };
        store.insert(d.name, t);
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    pub params: BTreeMap<String, [usize; 4]>,
    pub has_ema: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub raw: ParamStore<f32>,
    pub ema: Option<ParamStore<f32>>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, step: u64, raw: ParamStore<f32>, ema: Option<ParamStore<f32>>) -> Self {
        let params = raw.iter().map(|(k, v)| (k.clone(), v.shape().to_array())).collect();
        let manifest = CheckpointManifest {
            config: config.clone(),
            config_hash: config.hash(),
            step,
            params,
            has_ema: ema.is_some(),
        };
        Checkpoint { manifest, raw, ema }
    }

    /// The weights used for prediction: EMA when present.
    pub fn inference_params(&self) -> &ParamStore<f32> {
        self.ema.as_ref().unwrap_or(&self.raw)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_store(&dir.join("raw"), &self.raw)?;
        if let Some(ema) = &self.ema {
            write_store(&dir.join("ema"), ema)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Loads and cross-checks the manifest against the model's declared
    /// parameters; any disagreement is reported as a diff.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::Format(format!(
                "config hash mismatch: manifest says {}, config hashes to {}",
                manifest.config_hash,
                manifest.config.hash()
            )));
        }
        let expected: BTreeMap<String, [usize; 4]> =
            param_decls(&manifest.config)?.into_iter().map(|d| (d.name, d.shape.to_array())).collect();
        let diff = manifest_diff(&expected, &manifest.params);
        if !diff.is_empty() {
            return Err(Error::Format(format!("checkpoint does not match its config:\n{}", diff.join("\n"))));
        }
        let raw = read_store(&dir.join("raw"), &manifest.params)?;
        let ema = if manifest.has_ema { Some(read_store(&dir.join("ema"), &manifest.params)?) } else { None };
        Ok(Checkpoint { manifest, raw, ema })
    }
}

/// Lines describing how `found` differs from `expected`.
pub fn manifest_diff(expected: &BTreeMap<String, [usize; 4]>, found: &BTreeMap<String, [usize; 4]>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, shape) in expected {
        match found.get(name) {
            None => out.push(format!("- {name} {}", Shape::from(*shape))),
            Some(s) if s != shape => out.push(format!("~ {name} {} -> {}", Shape::from(*shape), Shape::from(*s))),
            _ => {}
        }
    }
    for (name, shape) in found {
        if !expected.contains_key(name) {
            out.push(format!("+ {name} {}", Shape::from(*shape)));
        }
    }
    out
}

fn write_store(dir: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in store.iter() {
        let f = fs::File::create(dir.join(format!("{name}.tensor")))?;
        write_tensor(BufWriter::new(f), t)?;
    }
    Ok(())
}

fn read_store(dir: &Path, shapes: &BTreeMap<String, [usize; 4]>) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, &shape) in shapes {
        let f = fs::File::open(dir.join(format!("{name}.tensor")))?;
        let t: Tensor<f32> = read_tensor(BufReader::new(f))?;
        if t.shape().to_array() != shape {
            return Err(Error::Format(format!("{name}: file holds {}, manifest says {}", t.shape(), Shape::from(shape))));
        }
        store.insert(name.clone(), t);
    }
    Ok(store)
}
