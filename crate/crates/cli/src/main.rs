use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use eapnet::autodiff::{grad_check, GradCheckOptions, Tape};
use eapnet::cost::{count_model_with, CountOptions};
use eapnet::data::{load_dataset, pad_to_multiple, read_pfm, synth_dataset, unpad, write_pfm, LdrTriplet, SynthConfig};
use eapnet::loss::psnr_mu;
use eapnet::model::{init_params, model_forward, predict, Checkpoint, Exec, InitMode, ModelConfig};
use eapnet::tensor::Real;
use eapnet::train::{normalized_psnr, train_loop, TrainConfig};
use eapnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "eapnet", version, about = "Multi-exposure HDR restoration toolkit")]
struct Cli {
    /// Seed for data synthesis, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Arithmetic used for inference and evaluation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of exposure triplets.
    Synth {
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 0.01)]
        sigma: f64,
        #[arg(long, default_value_t = 2)]
        max_shift: i32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preset name (standard, lightweight, tiny, ahdr) or TOML file.
        #[arg(long, default_value = "tiny")]
        model: String,
        /// TOML file of training settings.
        #[arg(long, visible_alias = "config")]
        train_config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Predict an HDR image for one triplet directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the raw weights even when the checkpoint has an EMA copy.
        #[arg(long)]
        raw: bool,
    },
    /// Compare a prediction with a ground-truth PFM.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Exit nonzero when PSNR-mu falls below this value.
        #[arg(long)]
        min_psnr_mu: Option<f64>,
    },
    /// Count multiply-accumulates and parameters.
    Cost {
        #[arg(long, default_value = "lightweight")]
        model: String,
        #[arg(long, default_value_t = 1060)]
        height: usize,
        #[arg(long, default_value_t = 1900)]
        width: usize,
        /// Count one MAcc per output element for each bias.
        #[arg(long)]
        bias_maccs: bool,
        /// Print every layer in text mode.
        #[arg(long)]
        layers: bool,
    },
    /// Finite-difference check of every model parameter in f64.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        model: String,
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Check at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: Option<String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timestamp: u64,
    version: &'static str,
}

impl RunManifest {
    fn new(command: &str, config_hash: Option<String>, seed: Option<u64>, inputs: &[&Path], outputs: &[&Path]) -> Self {
        RunManifest {
            command: command.into(),
            config_hash,
            seed,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn model_config(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(ModelConfig::from_toml(&text)?);
    }
    ModelConfig::preset(spec).with_context(|| format!("`{spec}` is neither a preset nor a config file"))
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_pfm(BufReader::new(f))?)
}

fn emit(format: Format, value: &Value) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value).expect("json")),
        Format::Text => {
            let Value::Object(map) = value else {
                println!("{value}");
                return;
            };
            let width = map.keys().map(|k| k.len()).max().unwrap_or(0);
            for (k, v) in map {
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                println!("{k:<width$}  {v}");
            }
        }
    }
}

fn infer_with<T: Real>(cfg: &ModelConfig, params: &eapnet::autodiff::ParamStore<f32>, t: &LdrTriplet) -> Result<Tensor<f32>> {
    let params = params.cast::<T>();
    let m = cfg.spatial_multiple();
    let mut padded = Vec::with_capacity(3);
    let mut pad = None;
    for x in t.model_inputs()? {
        let (p, pd) = pad_to_multiple(&x.cast::<T>(), m)?;
        pad = Some(pd);
        padded.push(p);
    }
    let y = predict(cfg, &params, [&padded[0], &padded[1], &padded[2]])?;
    let y = unpad(&y, pad.expect("three frames"))?;
    Ok(y.cast::<f32>().map(|v| v.max(0.0)))
}

fn run(cli: Cli) -> Result<bool> {
    let format = cli.format;
    match cli.command {
        Command::Synth { count, height, width, sigma, max_shift, out } => {
            let seed = cli.seed.unwrap_or(0);
            let mut cfg = SynthConfig { height, width, max_shift, ..Default::default() };
            cfg.degradation.sigma = sigma;
            let dirs = synth_dataset(&out, count, seed, &cfg)?;
            RunManifest::new("synth", None, Some(seed), &[], &[&out]).write(&out)?;
            emit(format, &json!({ "out": out, "triplets": dirs.len(), "height": height, "width": width, "seed": seed }));
            Ok(true)
        }
        Command::Train { data, out, model, train_config, steps, batch_size, patch_size } => {
            let mut mcfg = model_config(&model)?;
            let mut tcfg = match &train_config {
                Some(p) => TrainConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = cli.seed {
                mcfg.seed = seed;
                tcfg.seed = seed;
            }
            tcfg.steps = steps.unwrap_or(tcfg.steps);
            tcfg.batch_size = batch_size.unwrap_or(tcfg.batch_size);
            tcfg.patch_size = patch_size.unwrap_or(tcfg.patch_size);
            let triplets = load_dataset(&data)?;
            let outcome = train_loop(&mcfg, &tcfg, &triplets, &out)?;
            fs::write(out.join("train_config.toml"), tcfg.to_toml())?;
            RunManifest::new("train", Some(mcfg.hash()), Some(tcfg.seed), &[&data], &[&outcome.checkpoint_dir]).write(&out)?;
            let last = outcome.log.last();
            let eval = outcome.log.iter().rev().find_map(|r| r.eval.clone());
            emit(
                format,
                &json!({
                    "checkpoint": outcome.checkpoint_dir,
                    "steps": tcfg.steps,
                    "final_loss": last.map(|r| r.loss),
                    "psnr": eval.as_ref().map(|e| e.psnr),
                    "psnr_mu": eval.as_ref().map(|e| e.psnr_mu),
                }),
            );
            Ok(true)
        }
        Command::Infer { checkpoint, input, out, raw } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.manifest.config;
            let params = if raw { &ck.raw } else { ck.inference_params() };
            let t = LdrTriplet::load(&input)?;
            let y = match cli.precision {
                Precision::F32 => infer_with::<f32>(cfg, params, &t)?,
                Precision::F64 => infer_with::<f64>(cfg, params, &t)?,
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_pfm(BufWriter::new(fs::File::create(&out)?), &y)?;
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            RunManifest::new("infer", Some(cfg.hash()), None, &[&checkpoint, &input], &[&out]).write(dir)?;
            let s = y.shape();
            emit(format, &json!({ "out": out, "height": s.h, "width": s.w, "weights": if raw || ck.ema.is_none() { "raw" } else { "ema" } }));
            Ok(true)
        }
        Command::Eval { pred, gt, min_psnr_mu } => {
            let (p, g) = (read_image(&pred)?, read_image(&gt)?);
            let loss = TrainConfig::default().loss;
            let (psnr, pm) = match cli.precision {
                Precision::F32 => (normalized_psnr(&p, &g, &loss)?, psnr_mu(&p, &g, &loss)?),
                Precision::F64 => {
                    let (p, g) = (p.cast::<f64>(), g.cast::<f64>());
                    let inv = 1.0 / eapnet::loss::gt_normalizer(&g, &loss)?;
                    (eapnet::loss::psnr(&p.scale(inv), &g.scale(inv), loss.peak, loss.psnr_cap)?, psnr_mu(&p, &g, &loss)?)
                }
            };
            let pass = min_psnr_mu.is_none_or(|m| pm >= m);
            emit(format, &json!({ "psnr": psnr, "psnr_mu": pm, "pass": pass }));
            Ok(pass)
        }
        Command::Cost { model, height, width, bias_maccs, layers } => {
            let cfg = model_config(&model)?;
            let rep = count_model_with(&cfg, height, width, CountOptions { bias_maccs })?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&rep)?),
                Format::Text if layers => print!("{}", rep.to_table()),
                Format::Text => emit(
                    format,
                    &json!({
                        "model": model,
                        "resolution": format!("{}x{}", rep.resolution[1], rep.resolution[0]),
                        "evaluated": format!("{}x{}", rep.evaluated_resolution[1], rep.evaluated_resolution[0]),
                        "maccs_g": rep.maccs_g,
                        "params_k": rep.params_k,
                    }),
                ),
            }
            Ok(true)
        }
        Command::Gradcheck { model, size, max_coords, tol } => {
            let mut cfg = ModelConfig { init: InitMode::Random, ..model_config(&model)? };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let m = cfg.spatial_multiple();
            if size % m != 0 {
                bail!("size {size} must be a multiple of {m}");
            }
            let params = init_params::<f64>(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37);
            let mut rand = |c: usize| Tensor::<f64>::from_fn([1, c, size, size], |_| rng.random_range(0.0..1.0));
            let frames = [rand(6), rand(6), rand(6)];
            let weights = rand(3).map(|v| 2.0 * v - 1.0);
            let opts = GradCheckOptions { max_coords_per_tensor: max_coords, ..Default::default() };
            let rep = grad_check(
                |t: &mut Tape<f64>, s| {
                    let v = [t.input(frames[0].clone()), t.input(frames[1].clone()), t.input(frames[2].clone())];
                    let y = model_forward(&mut Exec::new(t, s), &cfg, &v)?;
                    let w = t.input(weights.clone());
                    let p = t.mul(y, w)?;
                    t.sum(p)
                },
                &params,
                &opts,
            )?;
            let pass = rep.max_rel_err <= tol;
            emit(
                format,
                &json!({
                    "model": model,
                    "max_rel_err": rep.max_rel_err,
                    "checked": rep.checked,
                    "rejected": rep.rejected,
                    "worst": rep.worst.map(|(n, i)| format!("{n}[{i}]")),
                    "tol": tol,
                    "pass": pass,
                }),
            );
            Ok(pass)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
