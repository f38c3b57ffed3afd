//! Exit-gate checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use eapnet::autodiff::{grad_check, grad_check_list, GradCheckOptions, Tape, Var};
use eapnet::cost::{count_layer, count_model, LayerSpec};
use eapnet::data::{crop_patches, pad_to, scene_seed, synth_triplet, unpad, SynthConfig};
use eapnet::loss::{combined_loss, combined_loss_value, mu_law_l1_value, mu_tonemap, psnr, LossConfig};
use eapnet::model::{init_params, model_forward, Exec, InitMode, ModelConfig};
use eapnet::tensor::{bilinear_resize, conv2d, conv_transpose2d, max_rel_diff, Padding};
use eapnet::train::{ema_update, evaluate, lr_at, moving_average, reference_baseline, train_loop, Adam, TrainConfig};
use eapnet::{ConvSpec, Result, Shape, Tensor};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value / target - 1.0).abs() <= rel
}

// 1. kernels against direct sums, f32
const KERNEL_TOL: f64 = 1e-6;
const KERNEL_CASES: usize = 120;

fn kernels() -> Result<Outcome> {
    let mut r = rng(1001);
    let mut worst = [0f64; 3];
    for _ in 0..KERNEL_CASES {
        let (shape, spec) = random_conv_case(&mut r);
        let x = random_tensor::<f32>(&mut r, shape);
        let w = random_tensor::<f32>(&mut r, spec.weight_shape());
        let b = spec.has_bias.then(|| random_tensor::<f32>(&mut r, spec.bias_shape()));
        worst[0] = worst[0].max(max_rel_diff(&conv2d(&x, &spec, &w, b.as_ref())?, &naive_conv(&x, &w, b.as_ref(), &spec)));

        let (shape, spec) = random_transposed_case(&mut r);
        let x = random_tensor::<f32>(&mut r, shape);
        let w = random_tensor::<f32>(&mut r, spec.transposed_weight_shape());
        let b = spec.has_bias.then(|| random_tensor::<f32>(&mut r, spec.bias_shape()));
        let got = conv_transpose2d(&x, &spec, &w, b.as_ref())?;
        worst[1] = worst[1].max(max_rel_diff(&got, &naive_conv_transpose(&x, &w, b.as_ref(), &spec)));

        let shape = [r.random_range(1..=2), r.random_range(1..=8), r.random_range(1..=9), r.random_range(1..=9)];
        let x = random_tensor::<f32>(&mut r, shape);
        let (oh, ow) = (r.random_range(1..=18), r.random_range(1..=18));
        worst[2] = worst[2].max(max_rel_diff(&bilinear_resize(&x, oh, ow)?, &naive_resize(&x, oh, ow)));
    }
    let pass = worst.iter().all(|&e| e <= KERNEL_TOL);
    Ok(outcome(
        pass,
        format!(
            "{KERNEL_CASES} shapes each; max rel err conv {:.1e}, transposed {:.1e}, resize {:.1e} (tol {KERNEL_TOL:.0e})",
            worst[0], worst[1], worst[2]
        ),
    ))
}

// 2. finite-difference gradients, f64
const GRAD_TOL: f64 = 1e-4;

fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = t.input(random_tensor::<f64>(&mut rng(seed), t.shape(y)));
    let p = t.mul(y, w)?;
    t.sum(p)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut r = rng(1002);
    let mut t = |s: [usize; 4]| random_tensor::<f64>(&mut r, s);
    let conv = ConvSpec::new(3, 4, 3).stride(2).dilation(2);
    let dw = ConvSpec::depthwise(3, 3);
    let up = ConvSpec::new(3, 2, 4).stride(2).padding(1);
    let (a, b) = (t([2, 3, 6, 5]), t([2, 3, 6, 5]));
    let pad = Padding { top: 2, bottom: 1, left: 0, right: 3 };
    let gt = b.map(|x| 0.6 - 0.3 * x);
    vec![
        ("conv2d", vec![a.clone(), t(conv.weight_shape().to_array()), t([1, 4, 1, 1])], Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), &conv))),
        ("depthwise", vec![a.clone(), t(dw.weight_shape().to_array()), t([1, 3, 1, 1])], Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), &dw))),
        ("conv_transpose2d", vec![a.clone(), t(up.transposed_weight_shape().to_array()), t([1, 2, 1, 1])], Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), &up))),
        ("bilinear_resize", vec![a.clone()], Box::new(|g, v| g.bilinear_resize(v[0], 11, 3))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("leaky_relu", vec![a.clone()], Box::new(|g, v| g.leaky_relu(v[0], 0.1))),
        ("tanh", vec![a.clone()], Box::new(|g, v| g.tanh(v[0]))),
        ("abs", vec![a.clone()], Box::new(|g, v| g.abs(v[0]))),
        ("clamp_min", vec![a.clone()], Box::new(|g, v| g.clamp_min(v[0], 0.0))),
        ("min_const", vec![a.clone()], Box::new(|g, v| g.min_const(v[0], 0.3))),
        ("mu_law", vec![a.map(f64::abs)], Box::new(|g, v| g.mu_law(v[0], 5000.0, 5001f64.ln()))),
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], 1.7))),
        ("concat", vec![a.clone(), b.clone()], Box::new(|g, v| g.concat(&[v[1], v[0]]))),
        ("slice_channels", vec![a.clone()], Box::new(|g, v| g.slice_channels(v[0], 1, 2))),
        ("pad_reflect", vec![a.clone()], Box::new(move |g, v| g.pad_reflect(v[0], pad))),
        ("mean", vec![a.clone()], Box::new(|g, v| g.mean(v[0]))),
        ("sum", vec![a], Box::new(|g, v| g.sum(v[0]))),
        (
            // the ground truth (and so its percentile normalizer) stays fixed
            "combined_loss",
            vec![b.map(|x| 0.5 + 0.4 * x)],
            Box::new(move |g, v| {
                let gt = g.input(gt.clone());
                combined_loss(g, v[0], gt, &LossConfig::default())
            }),
        ),
    ]
}

fn gradients() -> Result<Outcome> {
    let mut worst_op = (0f64, "");
    for (name, params, f) in op_cases() {
        let rep = grad_check_list(|t, v| f(t, v).and_then(|y| project(t, y, 7)), &params, 1e-5)?;
        if rep.max_rel_err >= worst_op.0 {
            worst_op = (rep.max_rel_err, name);
        }
    }
    let cfg = ModelConfig { init: InitMode::Random, ..ModelConfig::tiny() };
    let params = init_params::<f64>(&cfg)?;
    let mut r = rng(1003);
    let input: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor::<f64>(&mut r, [1, 6, 16, 16]).map(f64::abs)).collect();
    let rep = grad_check(
        |t, s| {
            let v = [t.input(input[0].clone()), t.input(input[1].clone()), t.input(input[2].clone())];
            let y = model_forward(&mut Exec::new(t, s), &cfg, &v)?;
            project(t, y, 8)
        },
        &params,
        &GradCheckOptions::default(),
    )?;
    let pass = worst_op.0 <= GRAD_TOL && rep.max_rel_err <= GRAD_TOL && rep.checked + rep.rejected == params.numel();
    Ok(outcome(
        pass,
        format!(
            "ops max rel err {:.1e} ({}); tiny model {:.1e} over {} of {} params, {} kink-rejected (tol {GRAD_TOL:.0e})",
            worst_op.0,
            worst_op.1,
            rep.max_rel_err,
            rep.checked,
            params.numel(),
            rep.rejected
        ),
    ))
}

// 3. cost counter anchored on the AHDR baseline
const AHDR_MACCS_G: f64 = 2916.92;
const AHDR_PARAMS_K: f64 = 1141.28;
const AHDR_TOL: f64 = 0.10;

fn cost_anchor() -> Result<Outcome> {
    let rep = count_model(&ModelConfig::ahdr(), 1060, 1900)?;
    let input = Shape::new(1, 64, 100, 100);
    let std = count_layer(&LayerSpec::Conv { spec: ConvSpec::new(64, 64, 3) }, input)?;
    let dw = count_layer(&LayerSpec::Conv { spec: ConvSpec::depthwise(64, 3) }, input)?;
    let pw = count_layer(&LayerSpec::Conv { spec: ConvSpec::pointwise(64, 64) }, input)?;
    let ratio = (dw.maccs + pw.maccs) as f64 / std.maccs as f64;
    let ratio_err = (ratio - (1.0 / 64.0 + 1.0 / 9.0)).abs();
    let pass = within(rep.maccs_g, AHDR_MACCS_G, AHDR_TOL) && within(rep.params_k, AHDR_PARAMS_K, AHDR_TOL) && ratio_err <= 1e-12;
    Ok(outcome(
        pass,
        format!(
            "AHDR {:.2} G MAccs (target {AHDR_MACCS_G}), {:.2} k params (target {AHDR_PARAMS_K}), tol ±{:.0}%; separable ratio error {ratio_err:.1e}",
            rep.maccs_g,
            rep.params_k,
            AHDR_TOL * 100.0
        ),
    ))
}

// 4. budgets of the two presets
const LIGHT: (f64, f64) = (146.28, 393.73);
const STANDARD: (f64, f64) = (198.38, 576.23);
const BUDGET_TOL: f64 = 0.15;
const RATIO_BAND: (f64, f64) = (1.15, 1.55);

fn budgets() -> Result<Outcome> {
    let l = count_model(&ModelConfig::lightweight(), 1060, 1900)?;
    let s = count_model(&ModelConfig::standard(), 1060, 1900)?;
    let ratio = s.total_maccs as f64 / l.total_maccs as f64;
    let pass = within(l.maccs_g, LIGHT.0, BUDGET_TOL)
        && within(l.params_k, LIGHT.1, BUDGET_TOL)
        && within(s.maccs_g, STANDARD.0, BUDGET_TOL)
        && within(s.params_k, STANDARD.1, BUDGET_TOL)
        && (RATIO_BAND.0..=RATIO_BAND.1).contains(&ratio);
    Ok(outcome(
        pass,
        format!(
            "lightweight {:.2} G / {:.2} k (target {} / {}), standard {:.2} G / {:.2} k (target {} / {}), tol ±{:.0}%; ratio {ratio:.3} in [{}, {}]",
            l.maccs_g, l.params_k, LIGHT.0, LIGHT.1, s.maccs_g, s.params_k, STANDARD.0, STANDARD.1, BUDGET_TOL * 100.0, RATIO_BAND.0, RATIO_BAND.1
        ),
    ))
}

// 5. desk-scale training run
const SCENES: usize = 32;
const HELD_OUT: usize = 4;
const MIN_GAIN_DB: f64 = 1.0;
const MA_WINDOW: usize = 200;

fn desk_training() -> Result<Outcome> {
    let sc = SynthConfig::default();
    let data: Vec<_> = (0..SCENES).map(|i| synth_triplet(scene_seed(7, i), &sc)).collect::<Result<_>>()?;
    let tc = TrainConfig { holdout: HELD_OUT, ..Default::default() };
    let dir = tempfile::tempdir()?;
    let cfg = ModelConfig::tiny();
    let run = train_loop(&cfg, &tc, &data, dir.path())?;
    let held = &data[SCENES - HELD_OUT..];
    let base = reference_baseline(held, &tc.loss)?;
    let got = evaluate(&cfg, run.checkpoint.inference_params(), held, &tc.loss)?;
    let losses = run.losses();
    let early = moving_average(&losses, MA_WINDOW, MA_WINDOW).unwrap_or(f64::NAN);
    let late = moving_average(&losses, losses.len(), MA_WINDOW).unwrap_or(f64::NAN);
    let gain = got.psnr_mu - base.psnr_mu;
    Ok(outcome(
        gain >= MIN_GAIN_DB && late < early,
        format!(
            "{} steps, batch {}: held-out PSNR-mu {:.2} dB vs baseline {:.2} dB (gain {gain:.2}, need {MIN_GAIN_DB}); MA{MA_WINDOW} loss {early:.4} at step {MA_WINDOW} -> {late:.4} at end",
            tc.steps, tc.batch_size, got.psnr_mu, base.psnr_mu
        ),
    ))
}

// 6. loss and metric identities
const SCALE_TOL: f64 = 1e-6;

fn identities() -> Result<Outcome> {
    let cfg = LossConfig::default();
    let mut r = rng(1006);
    let x = random_tensor::<f64>(&mut r, [1, 3, 16, 16]).map(|v| v.abs() * 3.0);
    let y = random_tensor::<f64>(&mut r, [1, 3, 16, 16]).map(|v| v.abs() * 3.0);
    let gamma_zero = combined_loss_value(&x, &x, &cfg)? == 0.0;
    let grid = Tensor::<f64>::from_fn([1, 1, 1, 10_000], |[_, _, _, i]| i as f64 / 9_999.0);
    let t = mu_tonemap(&grid, &cfg);
    let ends = t.data()[0] == 0.0 && (t.data()[9_999] - 1.0).abs() < 1e-15;
    let monotone = t.data().windows(2).all(|w| w[0] < w[1]);
    let z = Tensor::<f64>::zeros([1, 3, 8, 8]);
    let p20 = psnr(&z.map(|v| v + 0.1), &z, 1.0, cfg.psnr_cap)?;
    let psnr_ok = (p20 - 20.0).abs() <= 1e-12;
    let base = mu_law_l1_value(&x, &y, &cfg)?;
    let mut scale_err = 0f64;
    for s in [1e-3, 0.37, 2.0, 1e3] {
        scale_err = scale_err.max((mu_law_l1_value(&x.scale(s), &y.scale(s), &cfg)? - base).abs());
    }
    Ok(outcome(
        gamma_zero && ends && monotone && psnr_ok && scale_err <= SCALE_TOL,
        format!(
            "loss(x,x)=0 {gamma_zero}; T(0)=0,T(1)=1 {ends}; monotone on 1e4 grid {monotone}; psnr {p20:.15} dB; scaling drift {scale_err:.1e} (tol {SCALE_TOL:.0e})"
        ),
    ))
}

// 7. schedule, optimizer, EMA and determinism
fn optimizer() -> Result<Outcome> {
    let lr500 = lr_at(500)?;
    let lr250k = lr_at(250_000)?;
    let lr_ok = (lr500 - 4e-4).abs() <= 1e-15 && (lr250k - 4.5e-4).abs() <= 1e-15;

    let cfg = ModelConfig::tiny();
    let mut params = init_params::<f32>(&cfg)?;
    let before = params.clone();
    let mut tape = Tape::<f32>::new();
    let w = tape.param_from(&params, "head.1.weight")?;
    let zero = tape.scale(w, 0.0)?;
    let l = tape.sum(zero)?;
    let mut grads = tape.backward(l)?;
    grads.fill_missing(&params);
    let mut adam = Adam::new(&params);
    for _ in 0..3 {
        adam.step(&mut params, &grads, 1e-3)?;
    }
    let fixed = params == before;

    let target = init_params::<f32>(&ModelConfig { seed: 99, ..cfg.clone() })?;
    let mut shadow = before.clone();
    ema_update(&mut shadow, &target, 0.5)?;
    let mut convex = true;
    for (name, s) in shadow.iter() {
        let (a, b) = (before.require(name)?, target.require(name)?);
        for ((&e, &x), &y) in s.data().iter().zip(a.data()).zip(b.data()) {
            convex &= e >= x.min(y) && e <= x.max(y);
        }
    }

    let sc = SynthConfig { height: 48, width: 48, ..Default::default() };
    let data: Vec<_> = (0..4).map(|i| synth_triplet(scene_seed(3, i), &sc)).collect::<Result<_>>()?;
    let tc = TrainConfig { steps: 100, batch_size: 2, patch_size: 32, patch_overlap: 16, holdout: 1, eval_every: 50, checkpoint_every: 50, ..Default::default() };
    let (da, db) = (tempfile::tempdir()?, tempfile::tempdir()?);
    train_loop(&cfg, &tc, &data, da.path())?;
    train_loop(&cfg, &tc, &data, db.path())?;
    let mut identical = true;
    for sub in ["raw", "ema"] {
        for e in std::fs::read_dir(da.path().join("checkpoint").join(sub))? {
            let name = e?.file_name();
            let a = std::fs::read(da.path().join("checkpoint").join(sub).join(&name))?;
            let b = std::fs::read(db.path().join("checkpoint").join(sub).join(&name))?;
            identical &= a == b;
        }
    }
    identical &= std::fs::read(da.path().join("metrics.jsonl"))? == std::fs::read(db.path().join("metrics.jsonl"))?;
    Ok(outcome(
        lr_ok && fixed && convex && identical,
        format!("lr_at(500)={lr500:e}, lr_at(250000)={lr250k:e}; zero-grad fixed point {fixed}; EMA convex {convex}; 100-step reruns bit-identical {identical}"),
    ))
}

// 8. patch coverage and pad round trip
fn geometry() -> Result<Outcome> {
    let (w, h) = (500, 300);
    let img = Tensor::<f32>::from_fn([1, 1, h, w], |[_, _, y, x]| (y * w + x) as f32);
    let mut hits = vec![0u32; w * h];
    for p in crop_patches(&img, 256, 128)? {
        for y in p.y..p.y + 256 {
            for x in p.x..p.x + 256 {
                hits[y * w + x] += 1;
            }
        }
    }
    let covered = hits.iter().all(|&c| c > 0);
    let mut r = rng(1008);
    let big = random_tensor::<f32>(&mut r, [1, 3, 1060, 1900]);
    let (padded, pad) = pad_to(&big, 1080, 1920)?;
    let round_trip = padded.shape() == Shape::new(1, 3, 1080, 1920) && unpad(&padded, pad)? == big;
    Ok(outcome(
        covered && round_trip,
        format!("500x300 covered by 256/128 patches {covered}; 1900x1060 -> 1920x1080 -> crop bit-exact {round_trip}"),
    ))
}

fn main() {
    type Criterion = (&'static str, Duration, fn() -> Result<Outcome>);
    let criteria: [Criterion; 8] = [
        ("kernel oracle equivalence", Duration::from_secs(60), kernels),
        ("gradient suite", Duration::from_secs(300), gradients),
        ("cost-counter anchor", Duration::from_secs(1), cost_anchor),
        ("budget conformance", Duration::from_secs(1), budgets),
        ("desk-scale training", Duration::from_secs(1800), desk_training),
        ("loss/metric identities", Duration::from_secs(10), identities),
        ("schedule/optimizer arithmetic", Duration::from_secs(120), optimizer),
        ("geometry", Duration::from_secs(5), geometry),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let res = run();
        let took = start.elapsed();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && took <= *budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {}: {name}: {detail}; {:.2}s (budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
