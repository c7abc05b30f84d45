//! Experiment driver: configuration, the online evaluation loop, metrics and
//! CSV reports.
//!
//! Three files are written per run, all comma separated with a header row,
//! `'\n'` line endings and floats printed with 6 significant digits:
//!
//! * `batches.csv`: `batch_index,domain_id,n_samples,n_correct,l_da,l_em,l_final,n_confident,shift_detected`
//! * `domains.csv`: `domain_id,corruption,severity,n_samples,n_correct,error_pct`
//! * `summary.csv`: `method,stream_hash,n_batches,n_samples,n_correct,error_pct,n_resets`
//!
//! `error_pct` is `100 * (1 - sum(n_correct) / sum(n_samples))` over the rows
//! the line aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corrupt::{CorruptionKind, CorruptionSpec};
use crate::data::{DataError, Dataset, SynthConfig};
use crate::detector::{on_shift, Decision, DetectorConfig, DetectorError, ShiftDetector};
use crate::engine::{AdaptationState, EngineError, MethodConfig, Variant};
use crate::model::{ArchSpec, ModelError, ModelGraph};
use crate::source::{compute_source_stats, train_source, SourceError, SourceStats, TrainConfig};
use crate::stream::{make_stream, mix_seed, Batch, DomainSpec, StreamError, StreamOrdering, StreamSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: u64, detail: String },
    #[error("traces were recorded on different streams: {first} vs {second}")]
    StreamMismatch { first: String, second: String },
    #[error("numeric abort at batch {batch}: {source}")]
    NumericAbort {
        batch: usize,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

impl ExperimentError {
    /// Process exit status: 2 for configuration problems, 3 for a numeric
    /// abort, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            ExperimentError::NumericAbort { .. } => 3,
            _ => 1,
        }
    }

    fn config(path: impl Into<String>, detail: impl ToString) -> Self {
        ExperimentError::Config {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}

impl From<EngineError> for ExperimentError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(detail) => {
                let field = detail.split_whitespace().next().unwrap_or_default();
                ExperimentError::config(format!("method.{field}"), detail)
            }
            other => ExperimentError::Engine(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub weights: PathBuf,
    pub stats: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train_dir: "data/train".into(),
            test_dir: "data/test".into(),
            weights: "artifacts/weights.datt".into(),
            stats: "artifacts/stats.datt".into(),
        }
    }
}

/// Optional stages run by `run-tta` before adaptation. Products are written
/// to `data.weights` and `data.stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train_source: bool,
    pub extract_stats: bool,
    pub stats_batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_source: false,
            extract_stats: false,
            stats_batch_size: 256,
        }
    }
}

/// Synthetic dataset generation for `gen-dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            n_train: 4000,
            n_test: 4000,
        }
    }
}

fn default_stream() -> StreamSpec {
    StreamSpec {
        ordering: StreamOrdering::Dirichlet { delta: 0.1 },
        batch_size: 64,
        domains: vec![DomainSpec {
            corruption: CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 0),
            budget: 2000,
        }],
        seed: 0,
    }
}

/// One experiment. Every section is optional in the TOML file.
///
/// `seed` is the run seed: it is mixed into the stream seed and every
/// domain's corruption seed, so changing it redraws the stream and the noise
/// while the source model stays fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arch: ArchSpec,
    pub data: DataPaths,
    pub dataset: DatasetConfig,
    pub source: TrainConfig,
    pub pipeline: PipelineConfig,
    pub method: MethodConfig,
    pub stream: StreamSpec,
    /// Presence enables shift detection with resets (continual mode).
    pub detector: Option<DetectorConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            arch: ArchSpec::default(),
            data: DataPaths::default(),
            dataset: DatasetConfig::default(),
            source: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            method: MethodConfig::default(),
            stream: default_stream(),
            detector: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| {
            let path = e.span().map_or_else(String::new, |span| key_path_at(text, span.start));
            ExperimentError::config(path, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::config(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    /// Checks that do not need the datasets.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.arch.validate().map_err(|e| ExperimentError::config("arch", e))?;
        self.method.validate()?;
        let s = &self.stream;
        if s.batch_size == 0 {
            return Err(ExperimentError::config("stream.batch_size", "must be at least 1"));
        }
        if s.domains.is_empty() {
            return Err(ExperimentError::config("stream.domains", "at least one domain is required"));
        }
        if let StreamOrdering::Dirichlet { delta } = s.ordering {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(ExperimentError::config("stream.ordering.delta", "must be positive and finite"));
            }
        }
        for (i, d) in s.domains.iter().enumerate() {
            if let Err(e) = d.corruption.validate() {
                return Err(ExperimentError::config(format!("stream.domains[{i}].corruption.severity"), e));
            }
            if d.budget < s.batch_size {
                return Err(ExperimentError::config(
                    format!("stream.domains[{i}].budget"),
                    format!("budget {} is smaller than the batch size {}", d.budget, s.batch_size),
                ));
            }
        }
        if let Some(det) = &self.detector {
            det.validate().map_err(|e| ExperimentError::config("detector", e))?;
            if s.domains.len() < 2 {
                return Err(ExperimentError::config(
                    "detector",
                    "shift detection needs a continual stream with at least two domains",
                ));
            }
            if !self.method.variant.uses_da() {
                return Err(ExperimentError::config(
                    "detector",
                    format!("variant {} has no DA loss to monitor", self.method.variant.name()),
                ));
            }
        }
        if self.source.batch_size == 0 {
            return Err(ExperimentError::config("source.batch_size", "must be at least 1"));
        }
        if self.pipeline.stats_batch_size == 0 {
            return Err(ExperimentError::config("pipeline.stats_batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// The stream actually played: the run seed mixed into the stream and
    /// corruption seeds.
    pub fn effective_stream(&self) -> StreamSpec {
        let mut s = self.stream.clone();
        s.seed = mix_seed(self.seed, s.seed);
        for d in &mut s.domains {
            d.corruption.seed = mix_seed(self.seed ^ 0x5EED, d.corruption.seed);
        }
        s
    }
}

/// Dotted key for the line containing byte `offset`: the enclosing table
/// header plus the key assigned on that line, if any.
fn key_path_at(text: &str, offset: usize) -> String {
    let offset = offset.min(text.len());
    let line_start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    let line = text[line_start..line_end].trim();
    let table = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let key = if line.starts_with('[') {
        None
    } else {
        line.split_once('=').map(|(k, _)| k.trim().to_string())
    };
    match (table, key) {
        (Some(t), Some(k)) => format!("{t}.{k}"),
        (Some(t), None) => t,
        (None, Some(k)) => k,
        (None, None) => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub domain_id: usize,
    pub n_samples: usize,
    pub n_correct: usize,
    pub l_da: f32,
    pub l_em: f32,
    pub l_final: f32,
    pub n_confident: usize,
    pub shift_detected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainRecord {
    pub domain_id: usize,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub n_samples: usize,
    pub n_correct: usize,
}

impl DomainRecord {
    pub fn error_pct(&self) -> f64 {
        error_pct(self.n_correct, self.n_samples)
    }
}

pub fn error_pct(n_correct: usize, n_samples: usize) -> f64 {
    if n_samples == 0 {
        return 0.0;
    }
    100.0 * (1.0 - n_correct as f64 / n_samples as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTrace {
    pub method: String,
    pub stream_hash: u64,
    pub batches: Vec<BatchRecord>,
    pub domains: Vec<DomainRecord>,
}

impl MetricsTrace {
    pub fn n_samples(&self) -> usize {
        self.batches.iter().map(|b| b.n_samples).sum()
    }

    pub fn n_correct(&self) -> usize {
        self.batches.iter().map(|b| b.n_correct).sum()
    }

    pub fn error_pct(&self) -> f64 {
        error_pct(self.n_correct(), self.n_samples())
    }

    pub fn n_resets(&self) -> usize {
        self.batches.iter().filter(|b| b.shift_detected).count()
    }

    /// Batch indices at which a shift was detected.
    pub fn detections(&self) -> Vec<usize> {
        self.batches.iter().filter(|b| b.shift_detected).map(|b| b.batch_index).collect()
    }

    pub fn mean_l_da(&self, range: std::ops::Range<usize>) -> f64 {
        let b = &self.batches[range];
        b.iter().map(|r| r.l_da as f64).sum::<f64>() / b.len().max(1) as f64
    }
}

/// Stable FNV-1a digest of the stream layout: domains, corruption specs and
/// sample order.
pub fn stream_hash(spec: &StreamSpec, batches: &[Batch]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for d in &spec.domains {
        eat(d.corruption.kind as u64);
        eat(d.corruption.severity as u64);
        eat(d.corruption.seed);
    }
    for b in batches {
        eat(b.domain_id as u64);
        eat(b.sample_ids.len() as u64);
        for &i in &b.sample_ids {
            eat(i as u64);
        }
    }
    h
}

/// A run stopped by a non-finite loss, with the trace up to the failing batch.
#[derive(Debug)]
pub struct Aborted {
    pub partial: MetricsTrace,
    pub batch: usize,
    pub error: EngineError,
}

/// Play `batches` through `state` once, online. Labels are read only to score
/// predictions after each step.
pub fn run_stream(
    state: &mut AdaptationState,
    mut detector: Option<&mut ShiftDetector>,
    spec: &StreamSpec,
    batches: &[Batch],
) -> Result<MetricsTrace, Box<Aborted>> {
    let mut trace = MetricsTrace {
        method: state.method().variant.name().to_string(),
        stream_hash: stream_hash(spec, batches),
        batches: Vec::with_capacity(batches.len()),
        domains: spec
            .domains
            .iter()
            .enumerate()
            .map(|(domain_id, d)| DomainRecord {
                domain_id,
                corruption: d.corruption.kind,
                severity: d.corruption.severity,
                n_samples: 0,
                n_correct: 0,
            })
            .collect(),
    };
    for batch in batches {
        let step = (|| -> Result<_, EngineError> {
            if state.method().variant != Variant::Source && !state.is_initialized() {
                state.init_adaptation(&batch.images)?;
            }
            let out = state.adapt_step(&batch.images)?;
            let mut shift = false;
            if let Some(det) = detector.as_deref_mut() {
                let decision = det
                    .observe(out.report.l_da as f64)
                    .map_err(|e| EngineError::NonFinite { detail: e.to_string() })?;
                if decision == Decision::ShiftDetected {
                    on_shift(state, det, &batch.images)?;
                    shift = true;
                }
            }
            Ok((out, shift))
        })();
        let (out, shift) = match step {
            Ok(v) => v,
            Err(error) => {
                return Err(Box::new(Aborted {
                    partial: trace,
                    batch: batch.batch_index,
                    error,
                }))
            }
        };
        let n_correct = out
            .predictions
            .iter()
            .zip(batch.labels.as_slice())
            .filter(|(p, y)| p == y)
            .count();
        let dom = &mut trace.domains[batch.domain_id];
        dom.n_samples += batch.len();
        dom.n_correct += n_correct;
        trace.batches.push(BatchRecord {
            batch_index: batch.batch_index,
            domain_id: batch.domain_id,
            n_samples: batch.len(),
            n_correct,
            l_da: out.report.l_da,
            l_em: out.report.l_em,
            l_final: out.report.l_final,
            n_confident: out.report.n_confident,
            shift_detected: shift,
        });
    }
    Ok(trace)
}

/// Run an experiment on an already loaded model, statistics and test set.
/// The model is consumed as the starting point of adaptation.
pub fn run_in_memory(
    cfg: &ExperimentConfig,
    model: ModelGraph,
    stats: &SourceStats,
    test: &Dataset,
) -> Result<MetricsTrace, ExperimentError> {
    run_in_memory_partial(cfg, model, stats, test).map_err(|(_, e)| e)
}

type PartialResult = Result<MetricsTrace, (Option<MetricsTrace>, ExperimentError)>;

fn run_in_memory_partial(cfg: &ExperimentConfig, model: ModelGraph, stats: &SourceStats, test: &Dataset) -> PartialResult {
    let fail = |e: ExperimentError| (None, e);
    cfg.validate().map_err(fail)?;
    for (i, d) in cfg.stream.domains.iter().enumerate() {
        if d.budget > test.len() {
            return Err(fail(ExperimentError::config(
                format!("stream.domains[{i}].budget"),
                format!("budget {} exceeds the {} test samples", d.budget, test.len()),
            )));
        }
    }
    let spec = cfg.effective_stream();
    let batches = make_stream(test, &spec).map_err(|e| fail(e.into()))?;
    let mut detector = match &cfg.detector {
        Some(d) => Some(ShiftDetector::new(d.clone()).map_err(|e| fail(e.into()))?),
        None => None,
    };
    let mut state = AdaptationState::new(model, cfg.method.clone(), stats).map_err(|e| fail(e.into()))?;
    run_stream(&mut state, detector.as_mut(), &spec, &batches).map_err(|a| {
        (
            Some(a.partial),
            ExperimentError::NumericAbort {
                batch: a.batch,
                source: a.error,
            },
        )
    })
}

fn load_or_train_model(cfg: &ExperimentConfig) -> Result<ModelGraph, ExperimentError> {
    if cfg.pipeline.train_source {
        let train = Dataset::load_dir(&cfg.data.train_dir)?;
        let model = train_source(&train, &cfg.arch, &cfg.source)?;
        ensure_parent(&cfg.data.weights)?;
        model.save_weights(&cfg.data.weights)?;
        Ok(model)
    } else {
        Ok(ModelGraph::load_weights(&cfg.data.weights, &cfg.arch)?)
    }
}

fn load_or_extract_stats(cfg: &ExperimentConfig, model: &ModelGraph) -> Result<SourceStats, ExperimentError> {
    if cfg.pipeline.extract_stats {
        let train = Dataset::load_dir(&cfg.data.train_dir)?;
        let stats = compute_source_stats(model, &train, cfg.pipeline.stats_batch_size)?;
        ensure_parent(&cfg.data.stats)?;
        stats.save(&cfg.data.stats)?;
        Ok(stats)
    } else {
        Ok(SourceStats::load_for(&cfg.data.stats, model)?)
    }
}

fn ensure_parent(path: &Path) -> Result<(), ExperimentError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

/// Train the source model from `data.train_dir` and write it to `out`.
pub fn train_source_stage(cfg: &ExperimentConfig, out: &Path) -> Result<ModelGraph, ExperimentError> {
    cfg.arch.validate().map_err(|e| ExperimentError::config("arch", e))?;
    let train = Dataset::load_dir(&cfg.data.train_dir)?;
    let model = train_source(&train, &cfg.arch, &cfg.source)?;
    ensure_parent(out)?;
    model.save_weights(out)?;
    Ok(model)
}

/// Extract source statistics for every BN layer of `data.weights` over
/// `data.train_dir` and write them to `out`.
pub fn extract_stats_stage(cfg: &ExperimentConfig, out: &Path) -> Result<SourceStats, ExperimentError> {
    let model = ModelGraph::load_weights(&cfg.data.weights, &cfg.arch)?;
    let train = Dataset::load_dir(&cfg.data.train_dir)?;
    let stats = compute_source_stats(&model, &train, cfg.pipeline.stats_batch_size)?;
    ensure_parent(out)?;
    stats.save(out)?;
    Ok(stats)
}

/// Generate the synthetic train and test sets under `out/train` and `out/test`.
pub fn gen_dataset_stage(cfg: &ExperimentConfig, out: &Path) -> Result<(), ExperimentError> {
    let d = &cfg.dataset;
    if d.n_train == 0 || d.n_test == 0 {
        return Err(ExperimentError::config("dataset", "n_train and n_test must be positive"));
    }
    let train = crate::data::generate(&d.synth, d.n_train, mix_seed(cfg.seed, 1));
    let test = crate::data::generate(&d.synth, d.n_test, mix_seed(cfg.seed, 2));
    train.save_dir(&out.join("train"))?;
    test.save_dir(&out.join("test"))?;
    Ok(())
}

/// Everything a desk-scale run needs, built in memory from a config:
/// generated train/test sets, a trained source model and its statistics.
#[derive(Debug, Clone)]
pub struct DeskSetup {
    pub train: Dataset,
    pub test: Dataset,
    pub model: ModelGraph,
    pub stats: SourceStats,
}

impl DeskSetup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let d = &cfg.dataset;
        let train = crate::data::generate(&d.synth, d.n_train, mix_seed(cfg.seed, 1));
        let test = crate::data::generate(&d.synth, d.n_test, mix_seed(cfg.seed, 2));
        let model = train_source(&train, &cfg.arch, &cfg.source)?;
        let stats = compute_source_stats(&model, &train, cfg.pipeline.stats_batch_size)?;
        Ok(Self {
            train,
            test,
            model,
            stats,
        })
    }

    /// Run `cfg` against this setup; the stored model is left untouched.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<MetricsTrace, ExperimentError> {
        run_in_memory(cfg, self.model.clone(), &self.stats, &self.test)
    }
}

/// Full pipeline: model and statistics (loaded or produced), stream, online
/// adaptation, CSV reports in `out`. On a numeric abort the partial trace is
/// still written.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsTrace, ExperimentError> {
    cfg.validate()?;
    let model = load_or_train_model(cfg)?;
    let stats = load_or_extract_stats(cfg, &model)?;
    let test = Dataset::load_dir(&cfg.data.test_dir)?;
    match run_in_memory_partial(cfg, model, &stats, &test) {
        Ok(trace) => {
            write_trace(&trace, out)?;
            Ok(trace)
        }
        Err((partial, e)) => {
            if let Some(p) = partial {
                write_trace(&p, out)?;
            }
            Err(e)
        }
    }
}

/// `%g`-style rendering with 6 significant digits.
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn batches_csv(trace: &MetricsTrace) -> String {
    let mut s = String::from("batch_index,domain_id,n_samples,n_correct,l_da,l_em,l_final,n_confident,shift_detected\n");
    for b in &trace.batches {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            b.batch_index,
            b.domain_id,
            b.n_samples,
            b.n_correct,
            fmt_g(b.l_da as f64),
            fmt_g(b.l_em as f64),
            fmt_g(b.l_final as f64),
            b.n_confident,
            b.shift_detected as u8
        );
    }
    s
}

pub fn domains_csv(trace: &MetricsTrace) -> String {
    let mut s = String::from("domain_id,corruption,severity,n_samples,n_correct,error_pct\n");
    for d in &trace.domains {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            d.domain_id,
            d.corruption,
            d.severity,
            d.n_samples,
            d.n_correct,
            fmt_g(d.error_pct())
        );
    }
    s
}

pub fn summary_csv(trace: &MetricsTrace) -> String {
    format!(
        "method,stream_hash,n_batches,n_samples,n_correct,error_pct,n_resets\n{},{:016x},{},{},{},{},{}\n",
        trace.method,
        trace.stream_hash,
        trace.batches.len(),
        trace.n_samples(),
        trace.n_correct(),
        fmt_g(trace.error_pct()),
        trace.n_resets()
    )
}

pub fn write_trace(trace: &MetricsTrace, out: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, body) in [
        ("batches.csv", batches_csv(trace)),
        ("domains.csv", domains_csv(trace)),
        ("summary.csv", summary_csv(trace)),
    ] {
        let p = out.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(())
}

/// One row of a comparison: a finished run read back from its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub dir: PathBuf,
    pub method: String,
    pub stream_hash: String,
    /// `(corruption, error_pct)` per domain, in domain order.
    pub domains: Vec<(String, f64)>,
}

impl TraceSummary {
    /// Unweighted mean of the per-domain errors.
    pub fn mean_error(&self) -> f64 {
        self.domains.iter().map(|d| d.1).sum::<f64>() / self.domains.len().max(1) as f64
    }
}

#[derive(Debug, Deserialize)]
struct SummaryRow {
    method: String,
    stream_hash: String,
    #[allow(dead_code)]
    n_batches: usize,
    #[allow(dead_code)]
    n_samples: usize,
    #[allow(dead_code)]
    n_correct: usize,
    #[allow(dead_code)]
    error_pct: f64,
    #[allow(dead_code)]
    n_resets: usize,
}

#[derive(Debug, Deserialize)]
struct DomainRow {
    #[allow(dead_code)]
    domain_id: usize,
    corruption: String,
    #[allow(dead_code)]
    severity: u8,
    #[allow(dead_code)]
    n_samples: usize,
    #[allow(dead_code)]
    n_correct: usize,
    error_pct: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    let text = fs::read(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e: csv::Error| ExperimentError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            detail: match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            },
        })?);
    }
    Ok(out)
}

pub fn read_trace_summary(dir: &Path) -> Result<TraceSummary, ExperimentError> {
    let summary_path = dir.join("summary.csv");
    let rows: Vec<SummaryRow> = read_rows(&summary_path)?;
    let [row] = &rows[..] else {
        return Err(ExperimentError::Parse {
            path: summary_path,
            line: 2,
            detail: format!("expected exactly one data row, found {}", rows.len()),
        });
    };
    let domains: Vec<DomainRow> = read_rows(&dir.join("domains.csv"))?;
    Ok(TraceSummary {
        dir: dir.to_path_buf(),
        method: row.method.clone(),
        stream_hash: row.stream_hash.clone(),
        domains: domains.into_iter().map(|d| (d.corruption, d.error_pct)).collect(),
    })
}

/// Method x domain error table. All traces must come from the same stream.
pub fn compare(dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    if dirs.len() < 2 {
        return Err(ExperimentError::config("compare", "at least two trace directories are required"));
    }
    let traces = dirs.iter().map(|d| read_trace_summary(d)).collect::<Result<Vec<_>, _>>()?;
    let first = &traces[0];
    for t in &traces[1..] {
        if t.stream_hash != first.stream_hash || t.domains.len() != first.domains.len() {
            return Err(ExperimentError::StreamMismatch {
                first: format!("{} ({})", first.dir.display(), first.stream_hash),
                second: format!("{} ({})", t.dir.display(), t.stream_hash),
            });
        }
    }
    let mut s = String::from("method");
    for (name, _) in &first.domains {
        s.push(',');
        s.push_str(name);
    }
    s.push_str(",mean\n");
    for t in &traces {
        s.push_str(&t.method);
        for (_, e) in &t.domains {
            s.push(',');
            s.push_str(&fmt_g(*e));
        }
        let _ = writeln!(s, ",{}", fmt_g(t.mean_error()));
    }
    Ok(s)
}
