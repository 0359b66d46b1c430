//! End-to-end experiment: pretrain → inject outliers → fine-tune two arms
//! (plain and outlier-regularized) → calibrate → saturation sweep →
//! quantized evaluation, plus the report bundle written to disk.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    block_ranges_csv, decompose, decompositions_csv, dynamic_range_report, totals, BlockRange, ErrorDecomposition,
};
use crate::calibration::{
    best_point, collect_activation_stats, saturation_sweep, sweep_csv, CalibrationMethod, CalibrationProtocol,
    CalibrationRecord, SiteStats, SweepPoint, DEFAULT_SWEEP_THRESHOLDS,
};
use crate::checkpoint::ModelCheckpoint;
use crate::data::{Dataset, TaskConfig};
use crate::error::{QtError, Result};
use crate::model::{Injection, QuantPlan, ToyTransformer, ToyTransformerConfig};
use crate::outlier::{AlphaSchedule, OutlierLossConfig};
use crate::quant::scale_from_range;
use crate::train::{evaluate, finetune, profile_activations, ActivationProfile, TrainConfig, TrainLog};

pub const ARM_PLAIN: &str = "alpha0";
pub const ARM_REGULARIZED: &str = "regularized";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub magnitude: f64,
    pub fraction: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            magnitude: 30.0,
            fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; model, data, training and calibration seeds derive from it.
    pub seed: u64,
    pub model: ToyTransformerConfig,
    pub task: TaskConfig,
    pub eval_fraction: f64,
    pub pretrain: TrainConfig,
    pub injection: InjectionConfig,
    /// Fine-tuning for both arms; its `outlier` block configures the
    /// regularized arm (the plain arm runs with alpha 0).
    pub finetune: TrainConfig,
    pub calibration: CalibrationProtocol,
    pub methods: Vec<CalibrationMethod>,
    pub bits: Vec<u8>,
    pub sweep_bits: u8,
    pub sweep_thresholds: Vec<f64>,
    /// Saturation threshold used for the dynamic-range report.
    pub range_threshold: f64,
    /// Samples used for activation profiles and the dynamic-range report.
    pub analysis_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ToyTransformerConfig {
            depth: 3,
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            seq_len: 8,
            input_dim: 8,
            num_classes: 10,
            seed: 0,
        };
        ExperimentConfig {
            seed: 0,
            model,
            task: TaskConfig {
                num_samples: 4000,
                noise: 0.6,
                seed: 0,
            },
            eval_fraction: 0.2,
            pretrain: TrainConfig {
                steps: 1000,
                batch_size: 32,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            injection: InjectionConfig::default(),
            finetune: TrainConfig {
                steps: 300,
                batch_size: 32,
                learning_rate: 1e-2,
                outlier: OutlierLossConfig::linear(0.5, 300),
                ..TrainConfig::default()
            },
            calibration: CalibrationProtocol::default(),
            methods: CalibrationMethod::baselines().to_vec(),
            bits: vec![8, 7, 6],
            sweep_bits: 7,
            sweep_thresholds: DEFAULT_SWEEP_THRESHOLDS.to_vec(),
            range_threshold: 0.99,
            analysis_samples: 256,
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt
}

impl ExperimentConfig {
    /// Copy with every derived seed filled in from `seed`.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        let s = self.seed;
        c.model.seed = mix(s, 1);
        c.task.seed = mix(s, 2);
        c.pretrain.seed = mix(s, 3);
        c.finetune.seed = mix(s, 4);
        c.calibration.seed = mix(s, 5);
        c
    }

    pub fn injection_seed(&self) -> u64 {
        mix(self.seed, 6)
    }

    pub fn split_seed(&self) -> u64 {
        mix(self.seed, 7)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.methods.is_empty() {
            return Err(QtError::config("at least one calibration method is required"));
        }
        for m in &self.methods {
            m.validate()?;
        }
        if self.bits.is_empty() {
            return Err(QtError::config("at least one bit width is required"));
        }
        for &b in self.bits.iter().chain([&self.sweep_bits]) {
            crate::quant::QuantSpec::new(b, 1.0)?;
        }
        if !(self.range_threshold > 0.9 && self.range_threshold <= 1.0) {
            return Err(QtError::config(format!("range threshold {} outside (0.9, 1]", self.range_threshold)));
        }
        if self.analysis_samples == 0 {
            return Err(QtError::config("analysis_samples must be positive"));
        }
        Ok(())
    }
}

/// Parse an experiment config and apply `key=value` overrides (dotted paths,
/// values parsed as JSON with a bare-string fallback).
pub fn parse_experiment_config(bytes: &[u8], overrides: &[String]) -> Result<ExperimentConfig> {
    let mut v: Value = serde_json::from_slice(bytes)?;
    if !v.is_object() {
        return Err(QtError::config("experiment config must be a JSON object"));
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let c: ExperimentConfig = serde_json::from_value(v)?;
    c.validate()?;
    Ok(c)
}

/// Set a dotted path inside a JSON object, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| QtError::config(format!("override `{assignment}` is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(QtError::config(format!("bad override path `{path}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| QtError::config(format!("override `{path}` descends into a non-object")))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| json!({}));
    }
    unreachable!("path has at least one key")
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arm: String,
    pub method: String,
    pub param: Option<f64>,
    pub bits: u8,
    pub fp_accuracy: f64,
    pub quant_accuracy: f64,
    /// `fp_accuracy - quant_accuracy`.
    pub accuracy_drop: f64,
    pub saturation_error: f64,
    pub precision_error: f64,
    pub precision_share: f64,
    pub kl: f64,
}

pub const RESULTS_CSV_HEADER: &str =
    "arm,method,param,bits,fp_accuracy,quant_accuracy,accuracy_drop,saturation_error,precision_error,precision_share,kl";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.arm,
            r.method,
            r.param.map(|p| p.to_string()).unwrap_or_default(),
            r.bits,
            r.fp_accuracy,
            r.quant_accuracy,
            r.accuracy_drop,
            r.saturation_error,
            r.precision_error,
            r.precision_share,
            r.kl
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct QuantRun {
    pub row: ResultRow,
    pub sites: Vec<ErrorDecomposition>,
    pub calibration: Vec<CalibrationRecord>,
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub name: String,
    pub checkpoint: ModelCheckpoint,
    pub log: TrainLog,
    pub fp_accuracy: f64,
    pub profile: ActivationProfile,
    pub runs: Vec<QuantRun>,
}

impl ArmOutcome {
    pub fn run(&self, method: &str, bits: u8) -> Option<&QuantRun> {
        self.runs.iter().find(|r| r.row.method == method && r.row.bits == bits)
    }
}

/// Per-site precision error with the full range vs the saturated range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeComparison {
    pub site_id: String,
    pub full_range: f64,
    pub saturated_range: f64,
    pub precision_full: f64,
    pub precision_saturated: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub baseline: ModelCheckpoint,
    pub baseline_log: TrainLog,
    pub baseline_accuracy: f64,
    pub injection: Injection,
    pub injected_accuracy: f64,
    pub arms: Vec<ArmOutcome>,
    pub sweep: Vec<SweepPoint>,
    pub dynamic_range: Vec<BlockRange>,
    pub range_comparison: Vec<RangeComparison>,
}

impl ExperimentOutcome {
    pub fn arm(&self, name: &str) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        self.arms.iter().flat_map(|a| a.runs.iter().map(|r| r.row.clone())).collect()
    }

    pub fn best_sweep_point(&self) -> Option<&SweepPoint> {
        best_point(&self.sweep)
    }
}

fn quant_runs(
    arm: &str,
    model: &ToyTransformer,
    eval: &Dataset,
    stats: &SiteStats,
    fp_accuracy: f64,
    config: &ExperimentConfig,
) -> Result<Vec<QuantRun>> {
    let mut runs = Vec::new();
    for method in &config.methods {
        for &bits in &config.bits {
            let plan = QuantPlan {
                weights: model.minmax_weight_specs(bits)?,
                activations: stats.specs(method, bits)?,
            };
            let ev = evaluate(model, eval, Some(&plan))?;
            let t = totals(&ev.decompositions);
            runs.push(QuantRun {
                row: ResultRow {
                    arm: arm.to_string(),
                    method: method.name().to_string(),
                    param: method.param(),
                    bits,
                    fp_accuracy,
                    quant_accuracy: ev.accuracy,
                    accuracy_drop: fp_accuracy - ev.accuracy,
                    saturation_error: t.saturation_error,
                    precision_error: t.precision_error,
                    precision_share: t.precision_share,
                    kl: t.kl_divergence,
                },
                sites: ev.decompositions,
                calibration: stats.records(method, bits)?,
            });
        }
    }
    Ok(runs)
}

fn range_comparison(
    model: &ToyTransformer,
    stats: &SiteStats,
    sites: &[crate::tensor::Tensor],
    threshold: f64,
    bits: u8,
) -> Result<Vec<RangeComparison>> {
    let mut out = Vec::new();
    for (id, x) in model.config().site_ids().iter().zip(sites) {
        let st = stats
            .get(id)
            .ok_or_else(|| QtError::State(format!("no calibration stats for site `{id}`")))?;
        let (full, sat) = (st.max_abs(), st.percentile(threshold)?);
        let pf = decompose(id, x, &scale_from_range(full, bits)?).precision_error;
        let ps = decompose(id, x, &scale_from_range(sat, bits)?).precision_error;
        out.push(RangeComparison {
            site_id: id.clone(),
            full_range: full,
            saturated_range: sat,
            precision_full: pf,
            precision_saturated: ps,
        });
    }
    Ok(out)
}

/// Shared front half of an experiment: data, pretrained baseline and its
/// outlier-injected copy.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub eval: Dataset,
    pub baseline: ModelCheckpoint,
    pub baseline_log: TrainLog,
    pub baseline_accuracy: f64,
    pub injected: ToyTransformer,
    pub injection: Injection,
    pub injected_accuracy: f64,
}

/// Validate, build data, pretrain and inject outliers.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let cfg = config.resolved();
    let data = Dataset::synthetic(&cfg.task, &cfg.model).map_err(|e| e.in_stage("data"))?;
    let (train, eval) = data
        .split(cfg.eval_fraction, cfg.split_seed())
        .map_err(|e| e.in_stage("data"))?;

    let init = ToyTransformer::new(cfg.model.clone()).map_err(|e| e.in_stage("pretrain"))?;
    let pre = finetune(&init, &train, None, &cfg.pretrain).map_err(|e| e.in_stage("pretrain"))?;
    let baseline_accuracy = evaluate(&pre.checkpoint.model, &eval, None)
        .map_err(|e| e.in_stage("pretrain"))?
        .accuracy;

    let (injected, injection) = pre
        .checkpoint
        .model
        .inject_outliers(cfg.injection.magnitude, cfg.injection.fraction, cfg.injection_seed())
        .map_err(|e| e.in_stage("inject"))?;
    let injected_accuracy = evaluate(&injected, &eval, None).map_err(|e| e.in_stage("inject"))?.accuracy;
    Ok(Prepared {
        config: cfg,
        train,
        eval,
        baseline: pre.checkpoint,
        baseline_log: pre.log,
        baseline_accuracy,
        injected,
        injection,
        injected_accuracy,
    })
}

/// Fine-tune the plain and regularized arms, then calibrate and evaluate each.
pub fn run_arms(p: &Prepared) -> Result<Vec<ArmOutcome>> {
    let cfg = &p.config;
    let mut plain = cfg.finetune.clone();
    plain.outlier = OutlierLossConfig {
        alpha: 0.0,
        schedule: AlphaSchedule::Constant,
        sites: cfg.finetune.outlier.sites.clone(),
    };
    let arms_cfg = [(ARM_PLAIN, plain), (ARM_REGULARIZED, cfg.finetune.clone())];
    let mut arms = Vec::new();
    for (name, tc) in arms_cfg {
        let ft = finetune(&p.injected, &p.train, None, &tc).map_err(|e| e.in_stage("finetune"))?;
        let model = &ft.checkpoint.model;
        let fp = evaluate(model, &p.eval, None).map_err(|e| e.in_stage("evaluate"))?.accuracy;
        let profile =
            profile_activations(model, &p.eval, cfg.analysis_samples).map_err(|e| e.in_stage("analyze"))?;
        let stats =
            collect_activation_stats(model, &p.train, &cfg.calibration).map_err(|e| e.in_stage("calibrate"))?;
        let runs = quant_runs(name, model, &p.eval, &stats, fp, cfg).map_err(|e| e.in_stage("quantize-eval"))?;
        arms.push(ArmOutcome {
            name: name.to_string(),
            checkpoint: ft.checkpoint,
            log: ft.log,
            fp_accuracy: fp,
            profile,
            runs,
        });
    }
    Ok(arms)
}

/// Saturation sweep on the injected model at the sweep bit-width.
pub fn run_sweep(p: &Prepared) -> Result<Vec<SweepPoint>> {
    let cfg = &p.config;
    let stats = collect_activation_stats(&p.injected, &p.train, &cfg.calibration).map_err(|e| e.in_stage("sweep"))?;
    saturation_sweep(&p.injected, &p.eval, &stats, &cfg.sweep_thresholds, cfg.sweep_bits).map_err(|e| e.in_stage("sweep"))
}

/// Per-block range report and the full vs saturated range comparison on the
/// pretrained baseline.
pub fn run_range_analysis(p: &Prepared) -> Result<(Vec<BlockRange>, Vec<RangeComparison>)> {
    let cfg = &p.config;
    let analyze = |e: QtError| e.in_stage("analyze");
    let baseline = &p.baseline.model;
    let stats = collect_activation_stats(baseline, &p.train, &cfg.calibration).map_err(analyze)?;
    let (x, _) = p.eval.range(0, cfg.analysis_samples).map_err(analyze)?;
    let (_, sites) = baseline.capture(&x, None).map_err(analyze)?;
    let report = dynamic_range_report(baseline, &stats, &sites, cfg.range_threshold, cfg.sweep_bits).map_err(analyze)?;
    let cmp = range_comparison(baseline, &stats, &sites, cfg.range_threshold, cfg.sweep_bits).map_err(analyze)?;
    Ok((report, cmp))
}

/// Run every stage in memory. Errors carry the failing stage's name.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let p = prepare(config)?;
    let arms = run_arms(&p)?;
    let sweep = run_sweep(&p)?;
    let (dynamic_range, range_comparison) = run_range_analysis(&p)?;
    Ok(ExperimentOutcome {
        config: p.config,
        baseline: p.baseline,
        baseline_log: p.baseline_log,
        baseline_accuracy: p.baseline_accuracy,
        injection: p.injection,
        injected_accuracy: p.injected_accuracy,
        arms,
        sweep,
        dynamic_range,
        range_comparison,
    })
}

fn arm_summary(a: &ArmOutcome) -> Value {
    json!({
        "name": a.name,
        "fp_accuracy": a.fp_accuracy,
        "mean_site_metric": a.profile.mean_metric(),
        "mean_max_abs": a.profile.mean_max_abs(),
        "final_alpha": a.checkpoint.metadata.final_alpha,
        "steps": a.checkpoint.metadata.steps,
    })
}

/// The `summary.json` document.
pub fn summary_json(o: &ExperimentOutcome) -> Value {
    let best = o.best_sweep_point();
    json!({
        "seed": o.config.seed,
        "baseline_accuracy": o.baseline_accuracy,
        "injected_accuracy": o.injected_accuracy,
        "injection": o.injection,
        "arms": o.arms.iter().map(arm_summary).collect::<Vec<_>>(),
        "results": o.rows(),
        "sweep": {
            "bits": o.config.sweep_bits,
            "points": o.sweep.iter().map(|p| json!({
                "threshold": p.threshold,
                "accuracy": p.accuracy,
                "saturation_error": p.saturation_error,
                "precision_error": p.precision_error,
                "precision_share": p.precision_share,
                "kl": p.kl,
            })).collect::<Vec<_>>(),
            "best_threshold": best.map(|p| p.threshold),
            "best_accuracy": best.map(|p| p.accuracy),
        },
        "dynamic_range": o.dynamic_range,
    })
}

/// JSON Schema (draft 2020-12) for `summary.json`.
pub const SUMMARY_SCHEMA: &str = include_str!("summary.schema.json");

fn write(dir: &Path, rel: &str, contents: &str) -> Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents)?;
    Ok(rel.to_string())
}

fn pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Write the report bundle under `dir`; returns the relative paths written.
/// Contents depend only on the outcome, so equal outcomes give equal bytes.
pub fn write_bundle(o: &ExperimentOutcome, dir: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    files.push(write(dir, "config.json", &pretty(&o.config)?)?);
    files.push(write(dir, "results.csv", &results_csv(&o.rows()))?);
    files.push(write(dir, "summary.json", &pretty(&summary_json(o))?)?);
    files.push(write(dir, "summary.schema.json", SUMMARY_SCHEMA)?);
    files.push(write(dir, "sweep.csv", &sweep_csv(&o.sweep))?);
    files.push(write(dir, "dynamic_range.csv", &block_ranges_csv(&o.dynamic_range))?);
    files.push(write(dir, "logs/pretrain.ndjson", &o.baseline_log.to_ndjson())?);
    for a in &o.arms {
        files.push(write(dir, &format!("logs/{}.ndjson", a.name), &a.log.to_ndjson())?);
        for r in &a.runs {
            let stem = format!("{}_{}_b{}", a.name, r.row.method, r.row.bits);
            files.push(write(dir, &format!("sites/{stem}.csv"), &decompositions_csv(&r.sites))?);
            files.push(write(dir, &format!("calibration/{stem}.json"), &pretty(&r.calibration)?)?);
        }
    }
    for p in &o.sweep {
        let t = format!("{}", p.threshold).replace('.', "_");
        files.push(write(dir, &format!("sites/sweep_t{t}.csv"), &decompositions_csv(&p.sites))?);
    }
    Ok(files)
}
