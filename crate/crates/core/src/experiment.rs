//! Seeded experiment pipeline: train a baseline, prune, fine-tune under the
//! mask, evaluate, and assemble a JSON report. Also the multi-strategy
//! comparison sweep and the host latency timer.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{calibration_batch, estimate_curvature, significance, PowerIterationConfig, ProbeDump, SignificanceMap};
use crate::data::{epoch_batches, load_dataset, DatasetSpec, DatasetSplit};
use crate::error::{Error, Result};
use crate::flops::{ledger, FlopsLedger};
use crate::layer::LayerSpec;
use crate::network::{Batch, Network};
use crate::probe::{evaluate, Accuracy, ProbeStats};
use crate::prune::{magnitude_significance, prune_with_significance, PruneOutcome, PruneReport, Strategy};
use crate::scalar::Scalar;
use crate::seeding::{self, Stream};
use crate::tensor::Tensor;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    Tinyconv,
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}

impl ModelSpec {
    pub fn build<T: Scalar>(&self, input_shape: &[usize], classes: usize, seed: u64) -> Result<Network<T>> {
        let mut rng = seeding::rng(seed, Stream::Init);
        match self {
            ModelSpec::Mlp { hidden } => Network::mlp(input_shape.to_vec(), hidden, classes, &mut rng),
            ModelSpec::Tinyconv => Network::tiny_conv(input_shape.to_vec(), classes, &mut rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.001, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSpec {
    pub strategy: Strategy,
    /// Per-layer percentile in `[0, 100]`.
    pub p: f64,
    pub power_iteration: PowerIterationConfig,
    /// Effective-FLOPs budget as a fraction of the dense total.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops_budget: Option<f64>,
}

impl Default for PruneSpec {
    fn default() -> Self {
        Self { strategy: Strategy::CampHive, p: 50.0, power_iteration: PowerIterationConfig::default(), flops_budget: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSpec {
    pub epochs: usize,
    pub lr: f64,
    /// Defaults to the training batch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.001, batch_size: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// Size of the fixed probe subset of the test split.
    pub samples: usize,
    pub latency_repeats: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { samples: 256, latency_repeats: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Required; every random draw derives from it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub precision: Precision,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub prune: PruneSpec,
    #[serde(default)]
    pub finetune: FinetuneSpec,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("config has no seed; set \"seed\" or pass --seed".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {x}")))
            }
        };
        positive(self.train.lr, "train.lr")?;
        positive(self.finetune.lr, "finetune.lr")?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be at least 1".into()));
        }
        if self.finetune.batch_size == Some(0) {
            return Err(Error::Config("finetune.batch_size must be at least 1".into()));
        }
        if !(0.0..=100.0).contains(&self.prune.p) {
            return Err(Error::Config(format!("prune.p must lie in [0, 100], got {}", self.prune.p)));
        }
        if let Some(b) = self.prune.flops_budget {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::Config(format!("prune.flops_budget must lie in (0, 1], got {b}")));
            }
        }
        self.prune.power_iteration.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.probe.samples == 0 {
            return Err(Error::Config("probe.samples must be at least 1".into()));
        }
        if self.probe.latency_repeats < 3 {
            return Err(Error::Config("probe.latency_repeats must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Data,
    Train,
    Evaluate,
    Prune,
    Finetune,
    Analysis,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

/// A failed pipeline run: the stage, the cause and whatever was finished.
#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
    pub partial: Box<ExperimentReport>,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub baseline: LatencyStats,
    pub pruned: LatencyStats,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub budget_flops: f64,
    pub effective_flops: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: usize,
    pub weights: usize,
}

impl ModelSummary {
    fn of<T: Scalar>(net: &Network<T>) -> Self {
        Self {
            input_shape: net.input_shape().to_vec(),
            layers: net.specs(),
            params: net.param_count(),
            weights: net.weight_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub tool: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSummary>,
    #[serde(default)]
    pub train_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Accuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_before_finetune: Option<Accuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_after_finetune: Option<Accuracy>,
    /// Fine-tuned minus baseline top-1, percentage points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_acc_before_finetune: Option<f64>,
    #[serde(default)]
    pub finetune_loss: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<FlopsLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_budget: Option<BudgetCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeStats>,
    /// Wall-clock fields; the only part of a report that varies between identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

impl ExperimentReport {
    fn started(config: &ExperimentConfig) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: concat!("camp-core ", env!("CARGO_PKG_VERSION")).to_string(),
            complete: false,
            failed_stage: None,
            error: None,
            config: config.clone(),
            model: None,
            train_loss: Vec::new(),
            baseline: None,
            pruned_before_finetune: None,
            pruned_after_finetune: None,
            delta_acc: None,
            delta_acc_before_finetune: None,
            finetune_loss: Vec::new(),
            prune: None,
            flops: None,
            flops_budget: None,
            probe: None,
            timing: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// JSON with the wall-clock section removed.
    pub fn to_json_without_timing(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing = None;
        copy.to_json()
    }
}

/// Mean loss per epoch of masked mini-batch SGD.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<T: Scalar>(
    net: &mut Network<T>,
    data: &Batch<T>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    mask: Option<&[bool]>,
    seed: u64,
    stream: Stream,
) -> Result<Vec<f64>> {
    let mut rng = seeding::rng(seed, stream);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for idx in epoch_batches(data.len(), batch_size, &mut rng) {
            let batch = data.select(&idx)?;
            let (loss, grad) = net.loss_and_gradient(&batch)?;
            net.sgd_step(&grad, lr, mask)?;
            total += loss * idx.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Wall-clock forward-pass latency over `repeats` timed runs after one warm-up.
pub fn time_inference<T: Scalar>(net: &Network<T>, probe: &Tensor<T>, repeats: usize) -> Result<LatencyStats> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!("latency timing needs at least 3 repeats, got {repeats}")));
    }
    net.logits(probe)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = net.logits(probe)?;
        std::hint::black_box(out);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (mean_ms, std_ms) = mean_std(&times);
    Ok(LatencyStats { mean_ms, std_ms, repeats })
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A trained baseline and the data it was trained on.
#[derive(Debug, Clone)]
pub struct Baseline<T> {
    pub seed: u64,
    pub data: DatasetSplit<T>,
    pub network: Network<T>,
    pub accuracy: Accuracy,
    pub train_loss: Vec<f64>,
    pub calibration: Batch<T>,
}

fn staged<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, (Stage, Error)> {
    r.map_err(|e| (stage, e))
}

/// Stage-tagged failure without the partial report.
pub type StageResult<T> = std::result::Result<T, (Stage, Error)>;

pub fn load_data<T: Scalar>(config: &ExperimentConfig) -> Result<DatasetSplit<T>> {
    load_dataset(&config.dataset, config.seed()?)
}

pub fn build_model<T: Scalar>(config: &ExperimentConfig, data: &DatasetSplit<T>) -> Result<Network<T>> {
    let classes = data.train.num_classes().max(data.test.num_classes());
    config.model.build(data.train.sample_shape(), classes, config.seed()?)
}

fn train_baseline<T: Scalar>(config: &ExperimentConfig, report: &mut ExperimentReport) -> StageResult<Baseline<T>> {
    staged(Stage::Config, config.validate())?;
    let seed = config.seed().expect("validated");
    let data = staged(Stage::Data, load_data::<T>(config))?;
    let mut network = staged(Stage::Config, build_model(config, &data))?;
    report.model = Some(ModelSummary::of(&network));
    let t = &config.train;
    info!("training baseline: {} epochs, lr {}, batch {}", t.epochs, t.lr, t.batch_size);
    let train_loss = staged(
        Stage::Train,
        train_epochs(&mut network, &data.train, t.epochs, t.lr, t.batch_size, None, seed, Stream::Shuffle),
    )?;
    report.train_loss = train_loss.clone();
    let accuracy = staged(Stage::Evaluate, evaluate(&network, &data.test))?;
    report.baseline = Some(accuracy);
    let calibration = staged(
        Stage::Prune,
        calibration_batch(&data.train, config.prune.power_iteration.calibration_size, seed),
    )?;
    Ok(Baseline { seed, data, network, accuracy, train_loss, calibration })
}

/// Trains the baseline described by `config`.
pub fn prepare_baseline<T: Scalar>(config: &ExperimentConfig) -> std::result::Result<Baseline<T>, PipelineError> {
    let mut report = ExperimentReport::started(config);
    train_baseline(config, &mut report).map_err(|(stage, source)| fail(report, stage, source))
}

fn fail(mut report: ExperimentReport, stage: Stage, source: Error) -> PipelineError {
    report.complete = false;
    report.failed_stage = Some(stage);
    report.error = Some(source.to_string());
    PipelineError { stage, source, partial: Box::new(report) }
}

/// Curvature significance for `baseline`, computed once and reusable across strategies and percentiles.
pub fn curvature_significance<T: Scalar>(
    baseline: &Baseline<T>,
    config: &PowerIterationConfig,
) -> Result<(SignificanceMap, ProbeDump)> {
    let probe = estimate_curvature(&baseline.network, &baseline.calibration, config, baseline.seed)?;
    let sig = significance(&probe, &baseline.network)?;
    let dump = ProbeDump::new(&probe, &sig);
    Ok((sig, dump))
}

/// Result of pruning and fine-tuning one baseline.
#[derive(Debug, Clone)]
pub struct PrunedRun<T> {
    pub outcome: PruneOutcome<T>,
    pub before_finetune: Accuracy,
    pub finetuned: Network<T>,
    pub after_finetune: Accuracy,
    pub finetune_loss: Vec<f64>,
}

/// Prunes `baseline` with `strategy` at `p`, then fine-tunes under the mask.
/// `curvature` supplies precomputed curvature significance for the
/// Hessian-based strategies.
pub fn prune_and_finetune<T: Scalar>(
    baseline: &Baseline<T>,
    config: &ExperimentConfig,
    strategy: Strategy,
    p: f64,
    curvature: Option<&(SignificanceMap, ProbeDump)>,
) -> StageResult<PrunedRun<T>> {
    let seed = baseline.seed;
    let net = &baseline.network;
    let mut outcome = if strategy.uses_curvature() {
        let computed;
        let (sig, dump) = match curvature {
            Some(c) => c,
            None => {
                computed = staged(Stage::Prune, curvature_significance(baseline, &config.prune.power_iteration))?;
                &computed
            }
        };
        let mut out = staged(Stage::Prune, prune_with_significance(net, strategy, p, sig, seed))?;
        out.report.curvature = Some(dump.clone());
        out
    } else {
        staged(Stage::Prune, prune_with_significance(net, strategy, p, &magnitude_significance(net), seed))?
    };
    outcome.report.p = p;
    let before_finetune = staged(Stage::Evaluate, evaluate(&outcome.network, &baseline.data.test))?;

    let mut finetuned = outcome.network.clone();
    let mask = staged(Stage::Finetune, finetuned.param_mask_from_weight_mask(&outcome.mask.keep))?;
    let ft = &config.finetune;
    let batch_size = ft.batch_size.unwrap_or(config.train.batch_size);
    let finetune_loss = staged(
        Stage::Finetune,
        train_epochs(&mut finetuned, &baseline.data.train, ft.epochs, ft.lr, batch_size, Some(&mask), seed, Stream::FineTune),
    )?;
    let after_finetune = staged(Stage::Evaluate, evaluate(&finetuned, &baseline.data.test))?;
    Ok(PrunedRun { outcome, before_finetune, finetuned, after_finetune, finetune_loss })
}

/// Fixed seeded subset of the test split used for activation probes and timing.
pub fn probe_inputs<T: Scalar>(test: &Batch<T>, size: usize, seed: u64) -> Result<Tensor<T>> {
    let n = size.min(test.len());
    let mut rng = seeding::rng(seed, Stream::Probe);
    let mut idx = sample(&mut rng, test.len(), n).into_vec();
    idx.sort_unstable();
    Ok(test.select(&idx)?.inputs().clone())
}

/// Full pipeline for one config in storage type `T`.
pub fn run_pipeline_typed<T: Scalar>(config: &ExperimentConfig) -> std::result::Result<ExperimentReport, PipelineError> {
    let mut report = ExperimentReport::started(config);
    match run_stages::<T>(config, &mut report) {
        Ok(()) => {
            report.complete = true;
            Ok(report)
        }
        Err((stage, source)) => Err(fail(report, stage, source)),
    }
}

fn run_stages<T: Scalar>(config: &ExperimentConfig, report: &mut ExperimentReport) -> StageResult<()> {
    let baseline = train_baseline::<T>(config, report)?;
    let strategy = config.prune.strategy;
    let p = config.prune.p;
    info!("pruning with {strategy} at p = {p}");
    let run = prune_and_finetune(&baseline, config, strategy, p, None)?;
    let base_top1 = baseline.accuracy.top1;
    report.pruned_before_finetune = Some(run.before_finetune);
    report.pruned_after_finetune = Some(run.after_finetune);
    report.delta_acc_before_finetune = Some(run.before_finetune.top1 - base_top1);
    report.delta_acc = Some(run.after_finetune.top1 - base_top1);
    report.finetune_loss = run.finetune_loss.clone();
    report.prune = Some(run.outcome.report.clone());

    let flops = staged(Stage::Analysis, ledger(&run.finetuned, Some(&run.outcome.mask)))?;
    if let Some(fraction) = config.prune.flops_budget {
        let budget = fraction * flops.total_dense as f64;
        let passed = flops.within_budget(budget);
        if !passed {
            warn!("effective FLOPs {} exceed budget {budget}", flops.total_effective);
        }
        report.flops_budget = Some(BudgetCheck { budget_flops: budget, effective_flops: flops.total_effective, passed });
    }
    report.flops = Some(flops);

    let probe = staged(Stage::Analysis, probe_inputs(&baseline.data.test, config.probe.samples, baseline.seed))?;
    report.probe = Some(staged(
        Stage::Analysis,
        ProbeStats::collect(&baseline.network, &run.outcome.network, Some(&run.finetuned), &probe),
    )?);
    let repeats = config.probe.latency_repeats;
    let base_t = staged(Stage::Analysis, time_inference(&baseline.network, &probe, repeats))?;
    let pruned_t = staged(Stage::Analysis, time_inference(&run.finetuned, &probe, repeats))?;
    report.timing = Some(TimingReport {
        baseline: base_t,
        pruned: pruned_t,
        note: "host wall-clock latency of one probe-set forward pass; dense kernels, so unstructured sparsity is not expected to speed it up; no power measurement".into(),
    });
    Ok(())
}

/// Runs the pipeline in the precision named by the config.
pub fn run_pipeline(config: &ExperimentConfig) -> std::result::Result<ExperimentReport, PipelineError> {
    match config.precision {
        Precision::F32 => run_pipeline_typed::<f32>(config),
        Precision::F64 => run_pipeline_typed::<f64>(config),
    }
}

/// One `(strategy, p, seed)` cell of a comparison sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSample {
    pub strategy: Strategy,
    pub p: f64,
    pub seed: u64,
    pub baseline_acc: f64,
    pub acc_before_finetune: f64,
    pub acc: f64,
    pub delta_acc: f64,
    pub reduction_pct: f64,
    pub mean_mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub p: f64,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_acc_before_finetune: f64,
    pub mean_delta_acc: f64,
    pub std_delta_acc: f64,
    pub mean_reduction_pct: f64,
    pub mean_mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub samples: Vec<ComparisonSample>,
}

impl ComparisonTable {
    pub fn row(&self, strategy: Strategy, p: f64) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.p == p)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "strategy",
            "p",
            "seeds",
            "mean_acc",
            "std_acc",
            "mean_acc_before_finetune",
            "mean_delta_acc",
            "std_delta_acc",
            "mean_reduction_pct",
            "mean_mad",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.to_string(),
                r.p.to_string(),
                r.seeds.to_string(),
                r.mean_acc.to_string(),
                r.std_acc.to_string(),
                r.mean_acc_before_finetune.to_string(),
                r.mean_delta_acc.to_string(),
                r.std_delta_acc.to_string(),
                r.mean_reduction_pct.to_string(),
                r.mean_mad.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sweep_seed<T: Scalar>(
    config: &ExperimentConfig,
    strategies: &[Strategy],
    p_grid: &[f64],
    seed: u64,
) -> std::result::Result<Vec<ComparisonSample>, PipelineError> {
    let mut config = config.clone();
    config.seed = Some(seed);
    let mut report = ExperimentReport::started(&config);
    let result = (|| -> StageResult<Vec<ComparisonSample>> {
        let baseline = train_baseline::<T>(&config, &mut report)?;
        let curvature = if strategies.iter().any(Strategy::uses_curvature) {
            Some(staged(Stage::Prune, curvature_significance(&baseline, &config.prune.power_iteration))?)
        } else {
            None
        };
        let probe = staged(Stage::Analysis, probe_inputs(&baseline.data.test, config.probe.samples, seed))?;
        let mut out = Vec::new();
        for &strategy in strategies {
            for &p in p_grid {
                let run = prune_and_finetune(&baseline, &config, strategy, p, curvature.as_ref())?;
                let flops = staged(Stage::Analysis, ledger(&run.finetuned, Some(&run.outcome.mask)))?;
                let mads = staged(Stage::Analysis, crate::probe::mad(&baseline.network, &run.outcome.network, &probe))?;
                let mean_mad = mads.iter().map(|m| m.1).sum::<f64>() / mads.len().max(1) as f64;
                out.push(ComparisonSample {
                    strategy,
                    p,
                    seed,
                    baseline_acc: baseline.accuracy.top1,
                    acc_before_finetune: run.before_finetune.top1,
                    acc: run.after_finetune.top1,
                    delta_acc: run.after_finetune.top1 - baseline.accuracy.top1,
                    reduction_pct: flops.reduction_pct,
                    mean_mad,
                });
            }
        }
        Ok(out)
    })();
    result.map_err(|(stage, source)| fail(report, stage, source))
}

/// Accuracy-vs-percentile table over strategies and seeds. Seeds run in
/// parallel; each trains its own baseline, shared by every strategy and
/// percentile. Results are ordered by `(strategy, p)` then seed. A single
/// strategy is accepted with a warning.
pub fn compare_strategies(
    config: &ExperimentConfig,
    strategies: &[Strategy],
    p_grid: &[f64],
    seeds: &[u64],
) -> std::result::Result<ComparisonTable, PipelineError> {
    let fail_config = |msg: String| {
        let report = ExperimentReport::started(config);
        fail(report, Stage::Config, Error::Config(msg))
    };
    if strategies.is_empty() || p_grid.is_empty() || seeds.is_empty() {
        return Err(fail_config("comparison needs at least one strategy, percentile and seed".into()));
    }
    if strategies.len() < 2 {
        warn!("comparing a single strategy; the table has nothing to rank");
    }
    let mut unique = strategies.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != strategies.len() {
        return Err(fail_config("duplicate strategy in comparison".into()));
    }
    if let Some(p) = p_grid.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(fail_config(format!("percentile {p} outside [0, 100]")));
    }
    let per_seed: Vec<Vec<ComparisonSample>> = seeds
        .par_iter()
        .map(|&seed| match config.precision {
            Precision::F32 => sweep_seed::<f32>(config, strategies, p_grid, seed),
            Precision::F64 => sweep_seed::<f64>(config, strategies, p_grid, seed),
        })
        .collect::<std::result::Result<_, _>>()?;

    let mut samples: Vec<ComparisonSample> = per_seed.into_iter().flatten().collect();
    samples.sort_by(|a, b| {
        (a.strategy, a.p.total_cmp(&b.p), a.seed).cmp(&(b.strategy, std::cmp::Ordering::Equal, b.seed))
    });
    let mut groups: BTreeMap<(Strategy, u64), Vec<&ComparisonSample>> = BTreeMap::new();
    for s in &samples {
        groups.entry((s.strategy, s.p.to_bits())).or_default().push(s);
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&ComparisonSample) -> f64| g.iter().map(|s| f(s)).collect::<Vec<_>>();
            let (mean_acc, std_acc) = mean_std(&pick(|s| s.acc));
            let (mean_delta_acc, std_delta_acc) = mean_std(&pick(|s| s.delta_acc));
            ComparisonRow {
                strategy: g[0].strategy,
                p: g[0].p,
                seeds: g.len(),
                mean_acc,
                std_acc,
                mean_acc_before_finetune: mean_std(&pick(|s| s.acc_before_finetune)).0,
                mean_delta_acc,
                std_delta_acc,
                mean_reduction_pct: mean_std(&pick(|s| s.reduction_pct)).0,
                mean_mad: mean_std(&pick(|s| s.mean_mad)).0,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.strategy.cmp(&b.strategy).then(a.p.total_cmp(&b.p)));
    Ok(ComparisonTable { rows, samples })
}
