//! Headline acceptance criteria. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use qtlab::analysis::{decompose, spearman};
use qtlab::calibration::{calibrate, calibrated_range, omse_grid, ActivationStats, CalibrationMethod, SweepPoint};
use qtlab::data::one_hot;
use qtlab::model::{ToyTransformer, ToyTransformerConfig};
use qtlab::outlier::{classification_loss, outlier_loss, site_metric, total_loss};
use qtlab::pipeline::{
    parse_experiment_config, prepare, run_arms, run_experiment, run_range_analysis, run_sweep, write_bundle,
    ArmOutcome, ExperimentConfig, Prepared, ARM_PLAIN, ARM_REGULARIZED,
};
use qtlab::quant::{fake_quant, QuantSpec};
use qtlab::tape::{outlier_term_value, Tape};
use qtlab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, StudentT};

const SEEDS: u64 = 5;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------- quantizer

fn quantizer_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = Vec::new();
    let mut worst_identity = 0.0f64;
    for i in 0..1000 {
        let bits = [6u8, 7, 8][i % 3];
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let spec = QuantSpec::new(bits, scale).unwrap();
        let spread = spec.clip_bound() * rng.random_range(0.3..3.0);
        let n = rng.random_range(16..256);
        let mut data: Vec<f64> = (0..n).map(|_| rng.random_range(-spread..spread)).collect();
        // exact half-step ties exercise the rounding rule
        data.push(2.5 * scale);
        data.push(-0.5 * scale);
        let x = Tensor::vector(data).unwrap();
        let q = fake_quant(&x, &spec);
        let qq = fake_quant(&q, &spec);
        if q.data() != qq.data() {
            failures.push(format!("#{i} idempotence"));
        }
        for (&v, &fv) in x.data().iter().zip(q.data()) {
            if spec.fake_quant_value(-v) != -fv {
                failures.push(format!("#{i} symmetry at {v}"));
                break;
            }
        }
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| spec.fake_quant_value(w[0]) > spec.fake_quant_value(w[1])) {
            failures.push(format!("#{i} monotonicity"));
        }
        let clip = spec.clip_bound();
        for (&v, &fv) in x.data().iter().zip(q.data()) {
            if v.abs() <= clip && (v - fv).abs() > scale / 2.0 * (1.0 + 1e-12) {
                failures.push(format!("#{i} error bound at {v}"));
                break;
            }
        }
        let d = decompose("t", &x, &spec);
        let direct: f64 = x.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rel = (d.saturation_error + d.precision_error - direct).abs() / direct.max(f64::MIN_POSITIVE);
        let ident = (d.total_error - (d.saturation_error + d.precision_error)).abs() / direct.max(f64::MIN_POSITIVE);
        worst_identity = worst_identity.max(rel).max(ident);
        if rel > 1e-9 || ident > 1e-9 {
            failures.push(format!("#{i} decomposition rel {rel:e}"));
        }
    }
    (
        failures.is_empty(),
        format!(
            "1000 tensors, b in {{6,7,8}}; worst decomposition rel-err {worst_identity:.1e}; {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;

fn fd_rel_err(x: &[f64], analytic: &[f64], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut numeric = vec![0.0; x.len()];
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let up = f(&p);
        p[i] = orig - FD_STEP;
        let down = f(&p);
        p[i] = orig;
        numeric[i] = (up - down) / (2.0 * FD_STEP);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(f64::MIN_POSITIVE)
}

/// The order statistics that define max and median of `|x|` sit at least
/// `gap` away from their neighbours and from zero, so a finite-difference
/// step cannot swap them.
fn tie_free(block: &[f64], gap: f64) -> bool {
    let mut a: Vec<f64> = block.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    let (lo, hi) = ((n - 1) / 2, n / 2);
    let apart = |i: usize, j: usize| a[j] - a[i] > gap;
    apart(n - 2, n - 1) && a[lo] > gap && (lo == 0 || apart(lo - 1, lo)) && (hi + 1 == n || apart(hi, hi + 1))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Tensor {
    let y: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    one_hot(&y, k)
}

/// Activations for two sites with `samples` tie-free per-sample blocks.
fn tie_free_acts(rng: &mut ChaCha8Rng, samples: usize) -> Vec<Tensor> {
    (0..2)
        .map(|_| loop {
            let t = random_tensor(rng, &[samples * 2, 5], 1.5);
            if t.data().chunks(10).all(|b| tie_free(b, 1e-3)) {
                break t;
            }
        })
        .collect()
}

fn cls_value_grad(logits: &Tensor, labels: &Tensor) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let z = tape.param(logits.clone());
    let l = classification_loss(&mut tape, z, labels).unwrap();
    tape.backward(l).unwrap();
    (tape.value(l).item(), tape.grad(z).unwrap().into_data())
}

fn out_value_grad(acts: &[Tensor], samples: usize) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = acts.iter().map(|a| tape.param(a.clone())).collect();
    let named: Vec<(&str, _)> = vars.iter().map(|&v| ("s", v)).collect();
    let l = outlier_loss(&mut tape, &named, samples).unwrap();
    tape.backward(l).unwrap();
    let g = vars.iter().flat_map(|&v| tape.grad(v).unwrap().into_data()).collect();
    (tape.value(l).item(), g)
}

fn blended_value_grad(logits: &Tensor, labels: &Tensor, acts: &[Tensor], samples: usize, alpha: f64) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let z = tape.param(logits.clone());
    let vars: Vec<_> = acts.iter().map(|a| tape.param(a.clone())).collect();
    let named: Vec<(&str, _)> = vars.iter().map(|&v| ("s", v)).collect();
    let cls = classification_loss(&mut tape, z, labels).unwrap();
    let out = outlier_loss(&mut tape, &named, samples).unwrap();
    let l = total_loss(&mut tape, cls, out, alpha).unwrap();
    tape.backward(l).unwrap();
    let mut g = tape.grad(z).unwrap().into_data();
    for &v in &vars {
        g.extend(tape.grad(v).unwrap().into_data());
    }
    (tape.value(l).item(), g)
}

fn split_acts(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut off = 0;
    for t in like {
        out.push(Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec()).unwrap());
        off += t.len();
    }
    out
}

fn tiny_config(seed: u64) -> ToyTransformerConfig {
    ToyTransformerConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        seq_len: 3,
        input_dim: 4,
        num_classes: 3,
        seed,
    }
}

fn model_loss(model: &ToyTransformer, x: &Tensor, labels: &Tensor, alpha: f64, grad: bool) -> (f64, Vec<f64>) {
    let m = x.shape()[0];
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, x, grad, None).unwrap();
    let cls = classification_loss(&mut tape, fwd.logits, labels).unwrap();
    let ids = model.config().site_ids();
    let named: Vec<(&str, _)> = ids.iter().map(String::as_str).zip(fwd.sites.iter().copied()).collect();
    let out = outlier_loss(&mut tape, &named, m).unwrap();
    let l = total_loss(&mut tape, cls, out, alpha).unwrap();
    if !grad {
        return (tape.value(l).item(), Vec::new());
    }
    tape.backward(l).unwrap();
    let g = fwd.params.values().flat_map(|&v| tape.grad(v).unwrap().into_data()).collect();
    (tape.value(l).item(), g)
}

fn model_from_flat(cfg: &ToyTransformerConfig, like: &ToyTransformer, flat: &[f64]) -> ToyTransformer {
    let mut w = BTreeMap::new();
    let mut off = 0;
    for (name, t) in like.weights() {
        w.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec()).unwrap());
        off += t.len();
    }
    ToyTransformer::from_weights(cfg.clone(), w).unwrap()
}

fn gradient_oracle() -> (bool, String) {
    const POINTS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = [0.0f64; 4];

    for _ in 0..POINTS {
        let logits = random_tensor(&mut rng, &[4, 5], 2.0);
        let labels = random_labels(&mut rng, 4, 5);
        let (_, g) = cls_value_grad(&logits, &labels);
        let f = |p: &[f64]| cls_value_grad(&Tensor::new(vec![4, 5], p.to_vec()).unwrap(), &labels).0;
        worst[0] = worst[0].max(fd_rel_err(logits.data(), &g, &f));
    }

    for _ in 0..POINTS {
        let acts = tie_free_acts(&mut rng, 3);
        let (_, g) = out_value_grad(&acts, 3);
        let flat: Vec<f64> = acts.iter().flat_map(|t| t.data().to_vec()).collect();
        let f = |p: &[f64]| out_value_grad(&split_acts(p, &acts), 3).0;
        worst[1] = worst[1].max(fd_rel_err(&flat, &g, &f));
    }

    for _ in 0..POINTS {
        let logits = random_tensor(&mut rng, &[3, 4], 2.0);
        let labels = random_labels(&mut rng, 3, 4);
        let acts = tie_free_acts(&mut rng, 3);
        let alpha = rng.random_range(0.05..0.95);
        let (_, g) = blended_value_grad(&logits, &labels, &acts, 3, alpha);
        let mut flat = logits.data().to_vec();
        flat.extend(acts.iter().flat_map(|t| t.data().to_vec()));
        let f = |p: &[f64]| {
            let z = Tensor::new(vec![3, 4], p[..12].to_vec()).unwrap();
            blended_value_grad(&z, &labels, &split_acts(&p[12..], &acts), 3, alpha).0
        };
        worst[2] = worst[2].max(fd_rel_err(&flat, &g, &f));
    }

    let mut found = 0;
    let mut seed = 0;
    let mut skipped = 0;
    while found < POINTS {
        seed += 1;
        let cfg = tiny_config(seed);
        let base = ToyTransformer::new(cfg.clone()).unwrap();
        let noise = Normal::new(0.0, 0.4).unwrap();
        let flat: Vec<f64> = base.weights().values().flat_map(|t| t.data().to_vec()).map(|v| v + rng.sample(noise)).collect();
        let model = model_from_flat(&cfg, &base, &flat);
        let x = random_tensor(&mut rng, &[4, cfg.seq_len, cfg.input_dim], 1.0);
        let labels = random_labels(&mut rng, 4, cfg.num_classes);
        let (_, sites) = model.capture(&x, None).unwrap();
        let clean = sites.iter().all(|s| s.data().chunks(s.len() / 4).all(|b| tie_free(b, 1e-4)));
        if !clean {
            skipped += 1;
            continue;
        }
        found += 1;
        let (_, g) = model_loss(&model, &x, &labels, 0.5, true);
        let f = |p: &[f64]| model_loss(&model_from_flat(&cfg, &base, p), &x, &labels, 0.5, false).0;
        worst[3] = worst[3].max(fd_rel_err(&flat, &g, &f));
    }

    (
        worst.iter().all(|&w| w < 1e-4),
        format!(
            "worst rel-err: cross-entropy {:.1e}, outlier loss {:.1e}, blended {:.1e}, full model {:.1e} ({POINTS} points each, {skipped} tied model points redrawn)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- outlier term

fn outlier_term_semantics() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..64);
        let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let Some(base) = outlier_term_value(&a) else { continue };
        for c in [1e-3, 0.37, 2.0, 1e3, -5.0] {
            let scaled: Vec<f64> = a.iter().map(|v| c * v).collect();
            let t = outlier_term_value(&scaled).unwrap();
            worst = worst.max((t - base).abs() / base.abs().max(1.0));
        }
    }
    let hand = outlier_term_value(&[-3.0, -1.0, -1.0, -1.0, 0.0, 0.0]).unwrap();
    let two_point = site_metric(&[-2.5, 2.5, 4.0, -4.0], 2).unwrap();
    (
        worst <= 1e-12 && hand == 2.0 && two_point == 0.0,
        format!("scale invariance worst {worst:.1e}; max=3/median=1/sigma=1 gives {hand}; symmetric two-point gives {two_point}"),
    )
}

// ---------------------------------------------------------------- calibration

fn stats_from(values: &[f64], batches: usize) -> ActivationStats {
    let mut s = ActivationStats::new("site");
    for chunk in values.chunks(values.len().div_ceil(batches)) {
        s.observe_values(chunk).unwrap();
    }
    s
}

fn calibration_correctness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    let mut pct_ok = true;
    for i in 0..50 {
        let v: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal) * (1 + i) as f64).collect();
        let s = stats_from(&v, 10);
        for bits in [6, 7, 8] {
            let a = calibrate(&s, &CalibrationMethod::Percentile { p: 1.0 }, bits).unwrap();
            let b = calibrate(&s, &CalibrationMethod::MinMax, bits).unwrap();
            pct_ok &= a == b;
        }
    }

    let grid_points = 128;
    let mut worst_cells = 0usize;
    let t = StudentT::new(2.0).unwrap();
    for i in 0..50 {
        let bits = [6u8, 7, 8][i % 3];
        let v: Vec<f64> = (0..4000).map(|_| rng.sample(t)).collect();
        let s = stats_from(&v, 10);
        let chosen = calibrated_range(&s, &CalibrationMethod::Omse { grid_points }, bits).unwrap();
        let grid = omse_grid(s.median_abs(), s.max_abs(), grid_points);
        let raw_mse = |r: f64| {
            let spec = qtlab::quant::scale_from_range(r, bits).unwrap();
            v.iter().map(|&x| (x - spec.fake_quant_value(x)).powi(2)).sum::<f64>()
        };
        let exhaustive = (0..grid.len())
            .min_by(|&a, &b| raw_mse(grid[a]).total_cmp(&raw_mse(grid[b])))
            .unwrap();
        let at = grid.iter().position(|&r| r == chosen).expect("OMSE range lies on its grid");
        worst_cells = worst_cells.max(at.abs_diff(exhaustive));
    }

    let mut worst_ema = 0.0f64;
    for _ in 0..50 {
        let decay: f64 = rng.random_range(0.05..0.95);
        let batches = rng.random_range(1..20);
        let v: Vec<f64> = (0..batches * 50).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let s = stats_from(&v, batches);
        let m = s.batch_max();
        let t = m.len();
        let closed = (1.0 - decay).powi(t as i32 - 1) * m[0]
            + (1..t).map(|k| decay * (1.0 - decay).powi((t - 1 - k) as i32) * m[k]).sum::<f64>();
        let got = calibrated_range(&s, &CalibrationMethod::Ema { decay }, 8).unwrap();
        worst_ema = worst_ema.max((got - closed).abs() / closed);
    }

    (
        pct_ok && worst_cells <= 1 && worst_ema <= 1e-12,
        format!(
            "percentile(1.0) == minmax: {pct_ok}; OMSE worst distance to exhaustive optimum {worst_cells} cell(s) over 50 heavy-tailed tensors; EMA worst rel-err {worst_ema:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- experiments

struct SeedRun {
    prepare: Duration,
    sweep: Vec<SweepPoint>,
    sweep_time: Duration,
    arms: Vec<ArmOutcome>,
    arms_time: Duration,
    prepared: Prepared,
}

fn run_seed(seed: u64) -> SeedRun {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let prepared = prepare(&cfg).unwrap();
    let prepare_time = t.elapsed();
    let t = Instant::now();
    let sweep = run_sweep(&prepared).unwrap();
    let sweep_time = t.elapsed();
    let t = Instant::now();
    let arms = run_arms(&prepared).unwrap();
    let arms_time = t.elapsed();
    SeedRun {
        prepare: prepare_time,
        sweep,
        sweep_time,
        arms,
        arms_time,
        prepared,
    }
}

fn sweep_mechanism(runs: &[SeedRun]) -> (bool, String, Duration) {
    let elapsed: Duration = runs.iter().map(|r| r.prepare + r.sweep_time).sum();
    let mut gains = Vec::new();
    let mut shares = Vec::new();
    let mut thresholds = Vec::new();
    for r in runs {
        let best = qtlab::calibration::best_point(&r.sweep).unwrap();
        let minmax = r.sweep.iter().find(|p| p.threshold == 1.0).unwrap();
        gains.push(best.accuracy - minmax.accuracy);
        shares.push(best.precision_share);
        thresholds.push(best.threshold);
    }
    let (g, s) = (median(gains.clone()), median(shares.clone()));
    let pass = g > 0.0 && s > 0.5 && elapsed < Duration::from_secs(300);
    (
        pass,
        format!(
            "b=7, {} seeds: median accuracy gain over min-max {g:.4} (per seed {}); best thresholds [{}]; median precision share at optimum {s:.3} (per seed {}); pretraining {:.0}s + sweeps {:.0}s",
            runs.len(),
            fmt_list(&gains),
            thresholds.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
            fmt_list(&shares),
            runs.iter().map(|r| r.prepare.as_secs_f64()).sum::<f64>(),
            runs.iter().map(|r| r.sweep_time.as_secs_f64()).sum::<f64>()
        ),
        elapsed,
    )
}

fn range_mechanism(runs: &[SeedRun]) -> (bool, String) {
    let mut rhos = Vec::new();
    let mut site_failures = Vec::new();
    let mut sites = 0;
    for (seed, r) in runs.iter().enumerate() {
        let (report, cmp) = run_range_analysis(&r.prepared).unwrap();
        let depth: Vec<f64> = report.iter().map(|b| b.block as f64).collect();
        let range: Vec<f64> = report.iter().map(|b| b.range_before).collect();
        rhos.push(spearman(&depth, &range).unwrap_or(0.0));
        for c in &cmp {
            sites += 1;
            if !(c.precision_saturated < c.precision_full) {
                site_failures.push(format!("seed {seed} {}", c.site_id));
            }
        }
    }
    let rho = median(rhos.clone());
    (
        rho > 0.0 && site_failures.is_empty(),
        format!(
            "median Spearman rho of range over depth {rho:.3} (per seed {}); saturated-range precision error below full-range at {}/{sites} sites{}",
            fmt_list(&rhos),
            sites - site_failures.len(),
            site_failures.first().map(|f| format!(" (first miss: {f})")).unwrap_or_default()
        ),
    )
}

fn arm<'a>(r: &'a SeedRun, name: &str) -> &'a ArmOutcome {
    r.arms.iter().find(|a| a.name == name).unwrap()
}

fn regularized_end_to_end(runs: &[SeedRun]) -> (bool, String, Duration) {
    let elapsed: Duration = runs.iter().map(|r| r.prepare + r.arms_time).sum();
    let drop = |a: &ArmOutcome, bits| a.run("minmax", bits).unwrap().row.accuracy_drop;
    let (mut mp, mut mq) = (Vec::new(), Vec::new());
    let (mut d7p, mut d7q, mut d8p, mut d8q, mut fp_gap) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in runs {
        let (p, q) = (arm(r, ARM_PLAIN), arm(r, ARM_REGULARIZED));
        mp.push(p.profile.mean_metric());
        mq.push(q.profile.mean_metric());
        d7p.push(drop(p, 7));
        d7q.push(drop(q, 7));
        d8p.push(drop(p, 8));
        d8q.push(drop(q, 8));
        fp_gap.push(q.fp_accuracy - p.fp_accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let reduction = 1.0 - mean(&mq) / mean(&mp);
    let (m7p, m7q, m8p, m8q) = (median(d7p.clone()), median(d7q.clone()), median(d8p.clone()), median(d8q.clone()));
    let fp_gap_mean = mean(&fp_gap);
    let fp_ok = fp_gap_mean.abs() <= 0.02;
    let a = reduction >= 0.30;
    let b = m7q < m7p && m8q <= m8p;
    let pass = a && b && fp_ok && elapsed < Duration::from_secs(900);
    (
        pass,
        format!(
            "(a) site metric {:.3} -> {:.3}, {:.0}% lower [{}]; (b) median min-max drop b=7 {m7p:.4} -> {m7q:.4}, b=8 {m8p:.4} -> {m8q:.4} [{}]; (c) mean paired FP gap {fp_gap_mean:+.4} (per seed {}) [{}]",
            mean(&mp),
            mean(&mq),
            100.0 * reduction,
            if a { "ok" } else { "miss" },
            if b { "ok" } else { "miss" },
            fmt_list(&fp_gap),
            if fp_ok { "ok" } else { "miss" }
        ),
        elapsed,
    )
}

// ---------------------------------------------------------------- determinism

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> (bool, String) {
    let base = serde_json::to_vec(&ExperimentConfig::default()).unwrap();
    let small: Vec<String> = [
        "seed=4",
        "model.depth=2",
        "model.dim=16",
        "model.heads=2",
        "model.mlp_ratio=2",
        "model.num_classes=5",
        "task.num_samples=1600",
        "pretrain.steps=60",
        "finetune.steps=20",
        "finetune.outlier.total_steps=20",
        "analysis_samples=64",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = parse_experiment_config(&base, &small).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut trees = Vec::new();
    for d in &dirs {
        let o = run_experiment(&cfg).unwrap();
        write_bundle(&o, d.path()).unwrap();
        trees.push(read_tree(d.path()));
    }
    let differing: Vec<&String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_names = trees[0].keys().eq(trees[1].keys());
    (
        same_names && differing.is_empty(),
        format!(
            "two runs, {} report and log files, {} differ{}",
            trees[0].len(),
            differing.len(),
            differing.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (pass, detail) = f();
    Check {
        name,
        pass,
        detail,
        elapsed: t.elapsed(),
    }
}

fn print(c: &Check, budget: Option<u64>) {
    let budget = budget.map(|b| format!(" / budget {b}s")).unwrap_or_default();
    println!(
        "{} {:<28} {:>7.1}s{budget}  {}",
        if c.pass { "PASS" } else { "FAIL" },
        c.name,
        c.elapsed.as_secs_f64(),
        c.detail
    );
}

fn main() -> ExitCode {
    let mut checks = Vec::new();

    let mut c = timed("quantizer exactness", quantizer_exactness);
    c.pass &= c.elapsed < Duration::from_secs(10);
    print(&c, Some(10));
    checks.push(c);

    let mut c = timed("gradient oracle", gradient_oracle);
    c.pass &= c.elapsed < Duration::from_secs(30);
    print(&c, Some(30));
    checks.push(c);

    let c = timed("outlier term semantics", outlier_term_semantics);
    print(&c, None);
    checks.push(c);

    let c = timed("calibration correctness", calibration_correctness);
    print(&c, None);
    checks.push(c);

    let runs: Vec<SeedRun> = (0..SEEDS).map(run_seed).collect();

    let (pass, detail, elapsed) = sweep_mechanism(&runs);
    let c = Check {
        name: "saturation sweep",
        pass,
        detail,
        elapsed,
    };
    print(&c, Some(300));
    checks.push(c);

    let c = timed("range growth with depth", || range_mechanism(&runs));
    print(&c, None);
    checks.push(c);

    let (pass, detail, elapsed) = regularized_end_to_end(&runs);
    let c = Check {
        name: "outlier-regularized tuning",
        pass,
        detail,
        elapsed,
    };
    print(&c, Some(900));
    checks.push(c);

    let c = timed("determinism", determinism);
    print(&c, None);
    checks.push(c);

    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
