//! Run configuration, workloads, and the `run` / `sweep` commands behind the binary.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, GuidedDrafts, LatencyModel, ModelBackend, SimClock, SyntheticConfig, SyntheticOracle, TinyConfig,
    TinyTransformer,
};
use crate::engine::{ClockSource, Engine, EngineConfig, EngineError, Mode, PlanEvent, RunOutput, RunSummary};
use crate::token_tree::TokenId;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}:{line}: {message}")]
    Prompt { path: PathBuf, line: usize, message: String },
    #[error("sweep axis `{0}` has no values in the [sweep] section")]
    EmptyAxis(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Tiny,
    Synthetic,
    /// A tiny transformer whose draft heads contain its own greedy tokens at rates `q`.
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Seeds the model, the draft placement, and the simulated clock. Seeds inside the
    /// `tiny` and `synthetic` tables are ignored.
    pub seed: u64,
    pub precision: Precision,
    pub tiny: TinyConfig,
    pub synthetic: SyntheticConfig,
    /// Head hit rates for the `guided` backend.
    pub guided_q: Vec<Vec<f64>>,
    pub clock: ClockKind,
    pub latency: LatencyModel,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            seed: 0,
            precision: Precision::F64,
            tiny: TinyConfig::default(),
            synthetic: SyntheticConfig::default(),
            guided_q: SyntheticConfig::default().q,
            clock: ClockKind::Simulated,
            latency: LatencyModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    /// One prompt per line as whitespace-separated token ids; replaces the synthetic trace.
    pub prompt_file: Option<PathBuf>,
    pub num_prompts: usize,
    pub prompt_len: usize,
    pub max_tokens: usize,
    pub batch_size: usize,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        Self {
            prompt_file: None,
            num_prompts: 32,
            prompt_len: 32,
            max_tokens: 128,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub transcripts: bool,
    pub metrics: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("propd-out"),
            transcripts: true,
            metrics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub batch: Vec<usize>,
    pub prune_layer: Vec<usize>,
    pub prune_topk: Vec<usize>,
    pub mode: Vec<Mode>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            batch: vec![1, 2, 4, 8, 16],
            prune_layer: vec![1, 2, 3, 4],
            prune_topk: vec![50, 100, 150, 200],
            mode: vec![Mode::StaticTree, Mode::PruneOnly, Mode::DynamicOnly, Mode::PropdFull],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub engine: EngineConfig,
    pub workload: WorkloadSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Parses and validates a TOML document; `origin` names it in error messages.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |section: &str, msg: String| CliError::Invalid(format!("[{section}] {msg}"));
        let b = &self.backend;
        match b.kind {
            BackendKind::Synthetic => b.synthetic.validate().map_err(|m| invalid("backend.synthetic", m))?,
            BackendKind::Tiny | BackendKind::Guided => {
                if b.kind == BackendKind::Guided && b.guided_q.len() != b.tiny.draft_heads {
                    return Err(invalid(
                        "backend",
                        format!("guided_q needs {} rows, one per draft head", b.tiny.draft_heads),
                    ));
                }
            }
        }
        b.latency.validate().map_err(|m| invalid("backend.latency", m))?;
        let w = &self.workload;
        if w.batch_size == 0 {
            return Err(invalid("workload", "batch_size must be positive".into()));
        }
        if w.prompt_file.is_none() && (w.num_prompts == 0 || w.prompt_len == 0) {
            return Err(invalid("workload", "num_prompts and prompt_len must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backend.seed = seed;
        self
    }

    fn clock(&self) -> ClockSource {
        match self.backend.clock {
            ClockKind::Simulated => ClockSource::Simulated(SimClock::new(self.backend.latency.clone(), self.backend.seed)),
            ClockKind::Wall => ClockSource::Wall,
        }
    }
}

/// Reads prompts, one per line; blank lines and lines starting with `#` are skipped.
pub fn parse_prompts(text: &str, vocab: usize, origin: &Path) -> Result<Vec<Vec<TokenId>>, CliError> {
    let mut prompts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| CliError::Prompt {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        let prompt = line
            .split_whitespace()
            .map(|w| {
                let t: u32 = w.parse().map_err(|_| err(format!("`{w}` is not a token id")))?;
                if t as usize >= vocab {
                    return Err(err(format!("token {t} outside vocabulary of {vocab}")));
                }
                Ok(TokenId(t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        prompts.push(prompt);
    }
    if prompts.is_empty() {
        return Err(CliError::Prompt {
            path: origin.to_path_buf(),
            line: 0,
            message: "no prompts".into(),
        });
    }
    Ok(prompts)
}

/// Seeded uniform-random prompts.
pub fn synthetic_prompts(num: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6d_7074);
    (0..num)
        .map(|_| (0..len).map(|_| TokenId(rng.gen_range(0..vocab as u32))).collect())
        .collect()
}

fn vocab_of(cfg: &RunConfig) -> usize {
    match cfg.backend.kind {
        BackendKind::Synthetic => cfg.backend.synthetic.vocab,
        BackendKind::Tiny | BackendKind::Guided => cfg.backend.tiny.vocab,
    }
}

fn load_prompts(cfg: &RunConfig) -> Result<Vec<Vec<TokenId>>, CliError> {
    let vocab = vocab_of(cfg);
    match &cfg.workload.prompt_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Read {
                path: path.clone(),
                source,
            })?;
            parse_prompts(&text, vocab, path)
        }
        None => Ok(synthetic_prompts(
            cfg.workload.num_prompts,
            cfg.workload.prompt_len,
            vocab,
            cfg.backend.seed,
        )),
    }
}

/// Everything one engine run produces, plus diagnostics for `--verbose`.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output: RunOutput,
    pub plan_events: Vec<PlanEvent>,
    pub stats_csv: String,
    pub cost_csv: String,
}

/// Calls `f` with the backend the config describes.
pub trait BackendVisitor {
    type Out;
    fn visit<B: ModelBackend>(self, backend: &B) -> Self::Out;
}

pub fn with_backend<V: BackendVisitor>(cfg: &RunConfig, v: V) -> Result<V::Out, CliError> {
    let b = &cfg.backend;
    let seed = b.seed;
    match (b.kind, b.precision) {
        (BackendKind::Synthetic, _) => {
            let backend = SyntheticOracle::new(SyntheticConfig {
                seed,
                ..b.synthetic.clone()
            })?;
            Ok(v.visit(&backend))
        }
        (BackendKind::Tiny, Precision::F64) => Ok(v.visit(&TinyTransformer::<f64>::new(tiny_cfg(b))?)),
        (BackendKind::Tiny, Precision::F32) => Ok(v.visit(&TinyTransformer::<f32>::new(tiny_cfg(b))?)),
        (BackendKind::Guided, Precision::F64) => {
            let inner = TinyTransformer::<f64>::new(tiny_cfg(b))?;
            Ok(v.visit(&GuidedDrafts::new(inner, b.guided_q.clone(), seed)?))
        }
        (BackendKind::Guided, Precision::F32) => {
            let inner = TinyTransformer::<f32>::new(tiny_cfg(b))?;
            Ok(v.visit(&GuidedDrafts::new(inner, b.guided_q.clone(), seed)?))
        }
    }
}

fn tiny_cfg(b: &BackendSection) -> TinyConfig {
    TinyConfig {
        seed: b.seed,
        ..b.tiny.clone()
    }
}

struct RunVisitor<'a> {
    cfg: &'a RunConfig,
    prompts: &'a [Vec<TokenId>],
}

impl BackendVisitor for RunVisitor<'_> {
    type Out = Result<RunReport, CliError>;

    fn visit<B: ModelBackend>(self, backend: &B) -> Self::Out {
        let mut engine = Engine::new(backend, self.cfg.engine.clone(), self.cfg.clock())?;
        let w = &self.cfg.workload;
        let output = engine.run(self.prompts, w.max_tokens, w.batch_size)?;
        let mut stats = Vec::new();
        engine.stats().write_csv(&mut stats)?;
        let mut cost = Vec::new();
        engine.cost().write_csv(engine.iteration(), &mut cost)?;
        Ok(RunReport {
            output,
            plan_events: engine.plan_events().to_vec(),
            stats_csv: String::from_utf8(stats).expect("csv is utf-8"),
            cost_csv: String::from_utf8(cost).expect("csv is utf-8"),
        })
    }
}

/// Runs the configured engine once over the configured workload.
pub fn execute(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let prompts = load_prompts(cfg)?;
    with_backend(
        cfg,
        RunVisitor {
            cfg,
            prompts: &prompts,
        },
    )?
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn transcript_text(tokens: &[TokenId]) -> String {
    let mut s = tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

const SUMMARY_HEADER: [&str; 9] = [
    "mode",
    "sequences",
    "tokens",
    "iterations",
    "total_time_ms",
    "tokens_per_sec",
    "mean_acceptance_length",
    "mean_prune_rate",
    "mean_tree_size",
];

fn summary_fields(s: &RunSummary) -> Vec<String> {
    vec![
        s.mode.to_string(),
        s.sequences.to_string(),
        s.tokens.to_string(),
        s.iterations.to_string(),
        format!("{:.6}", s.total_time),
        format!("{:.6}", s.tokens_per_sec),
        format!("{:.6}", s.mean_acceptance_length),
        format!("{:.6}", s.mean_prune_rate),
        format!("{:.6}", s.mean_tree_size),
    ]
}

/// Writes transcripts, `metrics.jsonl`, `summary.csv` and, with `verbose`, the estimator
/// diagnostics into `dir`.
pub fn write_run(report: &RunReport, output: &OutputSection, dir: &Path, verbose: bool) -> Result<(), CliError> {
    create_dir(dir)?;
    let out = &report.output;
    if output.transcripts {
        let tdir = dir.join("transcripts");
        create_dir(&tdir)?;
        for (i, t) in out.transcripts.iter().enumerate() {
            write_file(&tdir.join(format!("seq_{i:05}.txt")), transcript_text(t))?;
        }
    }
    if output.metrics {
        let mut jsonl = String::new();
        for m in &out.metrics {
            jsonl.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            jsonl.push('\n');
        }
        write_file(&dir.join("metrics.jsonl"), jsonl)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_HEADER)?;
    w.write_record(summary_fields(&out.summary))?;
    write_file(&dir.join("summary.csv"), w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)?;
    if verbose {
        write_file(&dir.join("acceptance_stats.csv"), &report.stats_csv)?;
        write_file(&dir.join("cost_model.csv"), &report.cost_csv)?;
        let mut events = String::new();
        for e in &report.plan_events {
            events.push_str(&serde_json::to_string(e).expect("plan events serialize"));
            events.push('\n');
        }
        write_file(&dir.join("plan_events.jsonl"), events)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    PruneLayer,
    PruneTopk,
    Mode,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Batch => "batch",
            Axis::PruneLayer => "prune_layer",
            Axis::PruneTopk => "prune_topk",
            Axis::Mode => "mode",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "batch" => Ok(Axis::Batch),
            "prune_layer" => Ok(Axis::PruneLayer),
            "prune_topk" => Ok(Axis::PruneTopk),
            "mode" => Ok(Axis::Mode),
            other => Err(format!("unknown axis `{other}` (batch, prune_layer, prune_topk, mode)")),
        }
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub batch: usize,
    pub prune_layer: usize,
    pub prune_topk: usize,
    pub early_pruning: bool,
    pub dynamic_generation: bool,
    pub tokens_per_sec: f64,
    pub baseline_tokens_per_sec: f64,
    pub speedup: f64,
    pub mean_acceptance_length: f64,
    pub mean_prune_rate: f64,
    pub mean_tree_size: f64,
}

/// The scenario configs for each row of a sweep along `axis`.
///
/// The two pruning axes cover the layer x Top-K grid, with the named axis outermost,
/// whenever the other list is non-empty.
pub fn sweep_configs(base: &RunConfig, axis: Axis) -> Result<Vec<RunConfig>, CliError> {
    let s = &base.sweep;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let configs: Vec<RunConfig> = match axis {
        Axis::Batch => s
            .batch
            .iter()
            .map(|&b| with(&|c| c.workload.batch_size = b))
            .collect(),
        Axis::Mode => s.mode.iter().map(|&m| with(&|c| c.engine.mode = m)).collect(),
        Axis::PruneLayer | Axis::PruneTopk => {
            let layers = if s.prune_layer.is_empty() {
                vec![base.engine.prune.prune_layer]
            } else {
                s.prune_layer.clone()
            };
            let topks = if s.prune_topk.is_empty() {
                vec![base.engine.prune.prune_topk]
            } else {
                s.prune_topk.clone()
            };
            let mut out = Vec::new();
            if axis == Axis::PruneLayer {
                for &l in &layers {
                    for &k in &topks {
                        out.push(with(&|c| {
                            c.engine.prune.prune_layer = l;
                            c.engine.prune.prune_topk = k;
                        }));
                    }
                }
            } else {
                for &k in &topks {
                    for &l in &layers {
                        out.push(with(&|c| {
                            c.engine.prune.prune_layer = l;
                            c.engine.prune.prune_topk = k;
                        }));
                    }
                }
            }
            out
        }
    };
    let empty = match axis {
        Axis::Batch => s.batch.is_empty(),
        Axis::Mode => s.mode.is_empty(),
        Axis::PruneLayer => s.prune_layer.is_empty(),
        Axis::PruneTopk => s.prune_topk.is_empty(),
    };
    if empty {
        return Err(CliError::EmptyAxis(axis.name()));
    }
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

struct SweepVisitor<'a> {
    configs: &'a [RunConfig],
    prompts: &'a [Vec<TokenId>],
}

impl BackendVisitor for SweepVisitor<'_> {
    type Out = Result<Vec<SweepRow>, CliError>;

    fn visit<B: ModelBackend>(self, backend: &B) -> Self::Out {
        let mut rows = Vec::with_capacity(self.configs.len());
        let mut baselines: Vec<(usize, f64)> = Vec::new();
        for cfg in self.configs {
            let w = &cfg.workload;
            let baseline = match baselines.iter().find(|(b, _)| *b == w.batch_size) {
                Some(&(_, tps)) => tps,
                None => {
                    let ar = cfg.engine.clone().with_mode(Mode::Autoregressive);
                    let out = Engine::new(backend, ar, cfg.clock())?.run(self.prompts, w.max_tokens, w.batch_size)?;
                    baselines.push((w.batch_size, out.summary.tokens_per_sec));
                    out.summary.tokens_per_sec
                }
            };
            let s = Engine::new(backend, cfg.engine.clone(), cfg.clock())?
                .run(self.prompts, w.max_tokens, w.batch_size)?
                .summary;
            let mode = cfg.engine.mode;
            rows.push(SweepRow {
                mode,
                batch: w.batch_size,
                prune_layer: cfg.engine.prune.prune_layer,
                prune_topk: cfg.engine.prune.prune_topk,
                early_pruning: mode.prunes(),
                dynamic_generation: mode.dynamic(),
                tokens_per_sec: s.tokens_per_sec,
                baseline_tokens_per_sec: baseline,
                speedup: if baseline > 0.0 { s.tokens_per_sec / baseline } else { 0.0 },
                mean_acceptance_length: s.mean_acceptance_length,
                mean_prune_rate: s.mean_prune_rate,
                mean_tree_size: s.mean_tree_size,
            });
        }
        Ok(rows)
    }
}

/// One row per axis value, each against an autoregressive run on the same backend, clock
/// and prompts.
pub fn sweep(base: &RunConfig, axis: Axis) -> Result<Vec<SweepRow>, CliError> {
    let configs = sweep_configs(base, axis)?;
    let prompts = load_prompts(base)?;
    with_backend(
        base,
        SweepVisitor {
            configs: &configs,
            prompts: &prompts,
        },
    )?
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Fixed-width table for the terminal.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<15} {:>5} {:>5} {:>5} {:>6} {:>7} {:>10} {:>8} {:>7} {:>7} {:>6}",
        "mode", "batch", "layer", "topk", "prune", "dynamic", "tok/s", "speedup", "acc_len", "prune%", "size"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<15} {:>5} {:>5} {:>5} {:>6} {:>7} {:>10.1} {:>7.2}x {:>7.3} {:>6.1}% {:>6.1}",
            r.mode.name(),
            r.batch,
            r.prune_layer,
            r.prune_topk,
            if r.early_pruning { "yes" } else { "no" },
            if r.dynamic_generation { "yes" } else { "no" },
            r.tokens_per_sec,
            r.speedup,
            r.mean_acceptance_length,
            100.0 * r.mean_prune_rate,
            r.mean_tree_size
        );
    }
    s
}
