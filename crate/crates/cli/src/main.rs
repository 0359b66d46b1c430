use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use qtlab::analysis::{block_ranges_csv, decompositions_csv, dynamic_range_report, totals};
use qtlab::calibration::{
    best_point, collect_activation_stats, saturation_sweep, sweep_csv, CalibrationMethod, CalibrationProtocol,
    SiteStats,
};
use qtlab::checkpoint::ModelCheckpoint;
use qtlab::data::Dataset;
use qtlab::model::{QuantPlan, ToyTransformer};
use qtlab::outlier::{AlphaSchedule, OutlierLossConfig};
use qtlab::pipeline::{parse_experiment_config, run_experiment, summary_json, write_bundle, ExperimentConfig};
use qtlab::train::{evaluate, finetune, profile_activations};

const DEMO_CONFIG: &str = include_str!("../configs/demo.json");

#[derive(Parser, Debug)]
#[command(name = "qtlab", version, about = "Quantization laboratory: calibrate, analyze and outlier-regularize a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Defaults to the bundled demo config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides as dotted `key=value` pairs, e.g. `finetune.steps=50`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct Calib {
    /// Calibration batches.
    #[arg(long, default_value_t = 10)]
    batches: usize,
    /// Samples per calibration batch.
    #[arg(long = "batch-size", default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct MethodArgs {
    /// Range-selection method.
    #[arg(long, value_enum, default_value_t = Method::Minmax)]
    method: Method,
    /// Percentile for `--method percentile` (up to 6 decimals, e.g. 0.99999).
    #[arg(long, default_value_t = 0.99999)]
    p: f64,
    /// Decay for `--method ema`.
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    /// Candidate ranges for `--method omse`.
    #[arg(long, default_value_t = 100)]
    grid: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Method {
    Minmax,
    Ema,
    Percentile,
    Omse,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Schedule {
    Constant,
    Linear,
    Cosine,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model from scratch on the synthetic task.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training steps (overrides `pretrain.steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune a checkpoint with the outlier-driven loss.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Outlier-loss weight at step 0.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = Schedule::Linear)]
        schedule: Schedule,
        /// Fine-tuning steps (overrides `finetune.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Inject outlier channels of this magnitude before fine-tuning.
        #[arg(long)]
        inject: Option<f64>,
    },
    /// Collect activation statistics and write per-site ranges and scales.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to calibrate; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        calib: Calib,
    },
    /// Sweep saturation thresholds and report accuracy and error split.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        bits: u8,
        #[command(flatten)]
        calib: Calib,
    },
    /// Per-site error decomposition and per-block dynamic ranges.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        bits: u8,
        #[command(flatten)]
        method: MethodArgs,
        /// Saturation threshold for the dynamic-range report.
        #[arg(long = "range-p", default_value_t = 0.99)]
        range_p: f64,
        #[command(flatten)]
        calib: Calib,
    },
    /// Quantize a checkpoint and measure accuracy against full precision.
    QuantizeEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        bits: u8,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        calib: Calib,
    },
    /// Full experiment: pretrain, inject, fine-tune both arms, calibrate,
    /// sweep and evaluate; writes the report bundle.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Fine-tuning steps for both arms (0 gives a calibration-only report).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_enum)]
        schedule: Option<Schedule>,
        #[command(flatten)]
        calib: Calib,
    },
}

impl MethodArgs {
    fn resolve(&self) -> qtlab::Result<CalibrationMethod> {
        let m = match self.method {
            Method::Minmax => CalibrationMethod::MinMax,
            Method::Ema => CalibrationMethod::Ema { decay: self.decay },
            Method::Percentile => CalibrationMethod::Percentile { p: self.p },
            Method::Omse => CalibrationMethod::Omse { grid_points: self.grid },
        };
        m.validate()?;
        Ok(m)
    }
}

impl Calib {
    fn protocol(&self, cfg: &ExperimentConfig) -> CalibrationProtocol {
        CalibrationProtocol {
            batches: self.batches,
            batch_size: self.batch_size,
            seed: cfg.calibration.seed,
        }
    }
}

fn schedule(s: Schedule, steps: usize) -> AlphaSchedule {
    match s {
        Schedule::Constant => AlphaSchedule::Constant,
        Schedule::Linear => AlphaSchedule::LinearDecay { total_steps: steps },
        Schedule::Cosine => AlphaSchedule::CosineDecay { total_steps: steps },
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let bytes = match &common.config {
        Some(p) => fs::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None => DEMO_CONFIG.as_bytes().to_vec(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(parse_experiment_config(&bytes, &overrides)?.resolved())
}

fn datasets(cfg: &ExperimentConfig) -> qtlab::Result<(Dataset, Dataset)> {
    Dataset::synthetic(&cfg.task, &cfg.model)?.split(cfg.eval_fraction, cfg.split_seed())
}

fn load_model(checkpoint: Option<&Path>, cfg: &ExperimentConfig) -> anyhow::Result<ModelCheckpoint> {
    match checkpoint {
        Some(dir) => Ok(ModelCheckpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?),
        None => Ok(ModelCheckpoint::new(ToyTransformer::new(cfg.model.clone())?)),
    }
}

/// Writes output files and, at the end, `manifest.json` listing them.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn text(&mut self, rel: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json(&mut self, rel: &str, v: &impl serde::Serialize) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.text(rel, &s)
    }

    fn checkpoint(&mut self, rel: &str, ck: &ModelCheckpoint) -> anyhow::Result<()> {
        ck.save(&self.dir.join(rel))?;
        self.files.push(format!("{rel}/"));
        Ok(())
    }

    fn finish(mut self, command: &str) -> anyhow::Result<()> {
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let files = std::mem::take(&mut self.files);
        self.json(
            "manifest.json",
            &json!({
                "tool": "qtlab",
                "version": env!("CARGO_PKG_VERSION"),
                "command": command,
                "argv": std::env::args().skip(1).collect::<Vec<_>>(),
                "created_unix": created,
                "files": files,
            }),
        )
    }
}

fn calibrated_plan(
    model: &ToyTransformer,
    stats: &SiteStats,
    method: &CalibrationMethod,
    bits: u8,
) -> qtlab::Result<QuantPlan> {
    Ok(QuantPlan {
        weights: model.minmax_weight_specs(bits)?,
        activations: stats.specs(method, bits)?,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            let (train, eval) = datasets(&cfg)?;
            let init = ToyTransformer::new(cfg.model.clone())?;
            let out = finetune(&init, &train, Some(&eval), &cfg.pretrain).map_err(|e| e.in_stage("train"))?;
            let acc = evaluate(&out.checkpoint.model, &eval, None)?.accuracy;
            let mut o = Output::new(&common.out)?;
            o.json("config.json", &cfg)?;
            o.checkpoint("checkpoint", &out.checkpoint)?;
            o.text("logs/train.ndjson", &out.log.to_ndjson())?;
            o.json("train.json", &json!({ "steps": cfg.pretrain.steps, "eval_accuracy": acc }))?;
            o.finish("train")?;
            println!("trained {} steps; eval accuracy {acc:.4}", cfg.pretrain.steps);
        }
        Command::Finetune {
            common,
            checkpoint,
            alpha,
            schedule: sched,
            steps,
            inject,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            cfg.finetune.outlier = OutlierLossConfig {
                alpha,
                schedule: schedule(sched, cfg.finetune.steps.max(1)),
                sites: cfg.finetune.outlier.sites.clone(),
            };
            cfg.finetune.validate()?;
            let start = load_model(Some(&checkpoint), &cfg)?.model;
            let (train, eval) = datasets(&cfg)?;
            let mut o = Output::new(&common.out)?;
            let start = match inject {
                Some(m) => {
                    let (model, injection) = start
                        .inject_outliers(m, cfg.injection.fraction, cfg.injection_seed())
                        .map_err(|e| e.in_stage("inject"))?;
                    o.json("injection.json", &injection)?;
                    model
                }
                None => start,
            };
            let out = finetune(&start, &train, Some(&eval), &cfg.finetune).map_err(|e| e.in_stage("finetune"))?;
            let model = &out.checkpoint.model;
            let acc = evaluate(model, &eval, None)?.accuracy;
            let profile = profile_activations(model, &eval, cfg.analysis_samples)?;
            o.json("config.json", &cfg)?;
            o.checkpoint("checkpoint", &out.checkpoint)?;
            o.text("logs/finetune.ndjson", &out.log.to_ndjson())?;
            o.json(
                "finetune.json",
                &json!({
                    "steps": cfg.finetune.steps,
                    "alpha": alpha,
                    "eval_accuracy": acc,
                    "mean_site_metric": profile.mean_metric(),
                    "mean_max_abs": profile.mean_max_abs(),
                    "profile": profile,
                }),
            )?;
            o.finish("finetune")?;
            println!("fine-tuned {} steps; eval accuracy {acc:.4}", cfg.finetune.steps);
        }
        Command::Calibrate {
            common,
            checkpoint,
            bits,
            method,
            calib,
        } => {
            let cfg = load_config(&common)?;
            let method = method.resolve()?;
            let mut ck = load_model(checkpoint.as_deref(), &cfg)?;
            let (train, _) = datasets(&cfg)?;
            let stats = collect_activation_stats(&ck.model, &train, &calib.protocol(&cfg))
                .map_err(|e| e.in_stage("calibrate"))?;
            let records = stats.records(&method, bits)?;
            let plan = calibrated_plan(&ck.model, &stats, &method, bits)?;
            ck.quant_specs = plan.weights.into_iter().chain(plan.activations).collect();
            let mut o = Output::new(&common.out)?;
            o.json("calibration.json", &records)?;
            o.checkpoint("checkpoint", &ck)?;
            o.finish("calibrate")?;
            println!("calibrated {} sites with {method} at {bits} bits", records.len());
        }
        Command::Sweep {
            common,
            checkpoint,
            bits,
            calib,
        } => {
            let cfg = load_config(&common)?;
            let ck = load_model(checkpoint.as_deref(), &cfg)?;
            let (train, eval) = datasets(&cfg)?;
            let stats = collect_activation_stats(&ck.model, &train, &calib.protocol(&cfg))
                .map_err(|e| e.in_stage("calibrate"))?;
            let points = saturation_sweep(&ck.model, &eval, &stats, &cfg.sweep_thresholds, bits)
                .map_err(|e| e.in_stage("sweep"))?;
            let best = best_point(&points).context("sweep produced no points")?;
            let mut o = Output::new(&common.out)?;
            o.text("sweep.csv", &sweep_csv(&points))?;
            o.json(
                "sweep.json",
                &json!({ "bits": bits, "best_threshold": best.threshold, "best_accuracy": best.accuracy }),
            )?;
            for p in &points {
                let t = format!("{}", p.threshold).replace('.', "_");
                o.text(&format!("sites/t{t}.csv"), &decompositions_csv(&p.sites))?;
            }
            o.finish("sweep")?;
            println!("best threshold {} (accuracy {:.4})", best.threshold, best.accuracy);
        }
        Command::Analyze {
            common,
            checkpoint,
            bits,
            method,
            range_p,
            calib,
        } => {
            let cfg = load_config(&common)?;
            let method = method.resolve()?;
            let ck = load_model(checkpoint.as_deref(), &cfg)?;
            let (train, eval) = datasets(&cfg)?;
            let stats = collect_activation_stats(&ck.model, &train, &calib.protocol(&cfg))
                .map_err(|e| e.in_stage("calibrate"))?;
            let plan = calibrated_plan(&ck.model, &stats, &method, bits)?;
            let ev = evaluate(&ck.model, &eval, Some(&plan)).map_err(|e| e.in_stage("analyze"))?;
            let (x, _) = eval.range(0, cfg.analysis_samples.min(eval.len()))?;
            let (_, sites) = ck.model.capture(&x, None)?;
            let ranges = dynamic_range_report(&ck.model, &stats, &sites, range_p, bits).map_err(|e| e.in_stage("analyze"))?;
            let profile = profile_activations(&ck.model, &eval, cfg.analysis_samples)?;
            let mut o = Output::new(&common.out)?;
            o.text("decomposition.csv", &decompositions_csv(&ev.decompositions))?;
            o.text("dynamic_range.csv", &block_ranges_csv(&ranges))?;
            o.json(
                "analysis.json",
                &json!({
                    "method": method.to_string(),
                    "bits": bits,
                    "totals": totals(&ev.decompositions),
                    "mean_site_metric": profile.mean_metric(),
                    "mean_max_abs": profile.mean_max_abs(),
                    "profile": profile,
                }),
            )?;
            o.finish("analyze")?;
            println!("precision share {:.4}", totals(&ev.decompositions).precision_share);
        }
        Command::QuantizeEval {
            common,
            checkpoint,
            bits,
            method,
            calib,
        } => {
            let cfg = load_config(&common)?;
            let method = method.resolve()?;
            let ck = load_model(checkpoint.as_deref(), &cfg)?;
            let (train, eval) = datasets(&cfg)?;
            let stats = collect_activation_stats(&ck.model, &train, &calib.protocol(&cfg))
                .map_err(|e| e.in_stage("calibrate"))?;
            let plan = calibrated_plan(&ck.model, &stats, &method, bits)?;
            let fp = evaluate(&ck.model, &eval, None)?.accuracy;
            let q = evaluate(&ck.model, &eval, Some(&plan)).map_err(|e| e.in_stage("quantize-eval"))?;
            let mut o = Output::new(&common.out)?;
            o.json(
                "eval.json",
                &json!({
                    "method": method.to_string(),
                    "bits": bits,
                    "fp_accuracy": fp,
                    "quant_accuracy": q.accuracy,
                    "accuracy_drop": fp - q.accuracy,
                    "totals": totals(&q.decompositions),
                }),
            )?;
            o.text("sites.csv", &decompositions_csv(&q.decompositions))?;
            o.finish("quantize-eval")?;
            println!("W{bits}A{bits} accuracy {:.4} (full precision {fp:.4})", q.accuracy);
        }
        Command::Pipeline {
            common,
            steps,
            alpha,
            schedule: sched,
            calib,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.finetune.steps = s;
                if let AlphaSchedule::LinearDecay { total_steps } | AlphaSchedule::CosineDecay { total_steps } =
                    &mut cfg.finetune.outlier.schedule
                {
                    *total_steps = s.max(1);
                }
            }
            if let Some(a) = alpha {
                cfg.finetune.outlier.alpha = a;
            }
            if let Some(s) = sched {
                cfg.finetune.outlier.schedule = schedule(s, cfg.finetune.steps.max(1));
            }
            cfg.calibration.batches = calib.batches;
            cfg.calibration.batch_size = calib.batch_size;
            cfg.validate()?;
            let outcome = run_experiment(&cfg)?;
            let written = write_bundle(&outcome, &common.out)?;
            let mut o = Output::new(&common.out)?;
            o.files = written;
            for arm in &outcome.arms {
                o.checkpoint(&format!("checkpoints/{}", arm.name), &arm.checkpoint)?;
            }
            o.checkpoint("checkpoints/pretrained", &outcome.baseline)?;
            o.finish("pipeline")?;
            let s = summary_json(&outcome);
            println!(
                "pipeline done; best sweep threshold {}; report in {}",
                s["sweep"]["best_threshold"],
                common.out.display()
            );
        }
    }
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("QTLAB_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("QTLAB_THREADS=`{v}` is not a number"))?;
        if n == 0 {
            bail!("QTLAB_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
