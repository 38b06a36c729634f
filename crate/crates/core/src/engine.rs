//! The decode loop: draft, plan, build, forward with pruning, verify, commit, learn.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acceptance_model::{grid_capacity, AcceptanceStats, HeadPredictions, StatsError};
use crate::backends::{BackendError, ModelBackend, PruneHook, SimClock};
use crate::cost_model::{CostError, CostModel};
use crate::pruning::{prune, PruneConfig, PruneError};
use crate::scheduler::{choose_size_detailed, should_replan, PlanPoint, ReplanTrigger, SchedulerConfig};
use crate::token_tree::{build_tree, MaskCache, RankPath, SelectedNode, TokenId, TokenTree, TreeError};
use crate::verification::verify;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("no prompts to decode")]
    NoPrompts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Autoregressive,
    StaticTree,
    PruneOnly,
    DynamicOnly,
    PropdFull,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Autoregressive,
        Mode::StaticTree,
        Mode::PruneOnly,
        Mode::DynamicOnly,
        Mode::PropdFull,
    ];

    pub fn prunes(self) -> bool {
        matches!(self, Mode::PruneOnly | Mode::PropdFull)
    }

    pub fn dynamic(self) -> bool {
        matches!(self, Mode::DynamicOnly | Mode::PropdFull)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Autoregressive => "autoregressive",
            Mode::StaticTree => "static_tree",
            Mode::PruneOnly => "prune_only",
            Mode::DynamicOnly => "dynamic_only",
            Mode::PropdFull => "propd_full",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub mode: Mode,
    /// Candidates drafted per head.
    pub k_max: usize,
    pub prune: PruneConfig,
    pub scheduler: SchedulerConfig,
    pub acceptance_alpha: f64,
    /// Average with rate `max(alpha, 1/n)` until `n` exceeds `1/alpha`.
    pub mean_warmup: bool,
    pub cost_alpha: f64,
    pub cost_lambda: f64,
    /// Tree size in the static modes, capped at the grid capacity.
    pub static_size: usize,
    /// Explicit rank paths for the static modes, e.g. `[[1], [1, 1], [2]]`; overrides
    /// `static_size`.
    pub static_paths: Option<Vec<Vec<usize>>>,
    pub eos: Option<u32>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PropdFull,
            k_max: 4,
            prune: PruneConfig::default(),
            scheduler: SchedulerConfig::default(),
            acceptance_alpha: 0.05,
            mean_warmup: false,
            cost_alpha: 0.2,
            cost_lambda: 0.01,
            static_size: 64,
            static_paths: None,
            eos: None,
        }
    }
}

impl EngineConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, num_layers: usize, vocab: usize) -> Result<(), String> {
        if self.k_max == 0 {
            return Err("k_max must be positive".into());
        }
        if !(self.acceptance_alpha > 0.0 && self.acceptance_alpha < 1.0) {
            return Err("acceptance_alpha must lie in (0, 1)".into());
        }
        if !(self.cost_alpha > 0.0 && self.cost_alpha <= 1.0) {
            return Err("cost_alpha must lie in (0, 1]".into());
        }
        if !(self.cost_lambda >= 0.0 && self.cost_lambda.is_finite()) {
            return Err("cost_lambda must be finite and non-negative".into());
        }
        if self.mode.dynamic() {
            self.scheduler.validate()?;
        }
        if self.mode.prunes() {
            self.prune.validate(num_layers, vocab)?;
        }
        if let Some(paths) = &self.static_paths {
            if paths.iter().any(|p| p.is_empty() || p.contains(&0)) {
                return Err("static_paths entries must be non-empty lists of 1-based ranks".into());
            }
        }
        if let Some(eos) = self.eos {
            if eos as usize >= vocab {
                return Err(format!("eos token {eos} outside vocabulary of {vocab}"));
            }
        }
        Ok(())
    }
}

/// Where iteration times come from.
#[derive(Debug, Clone)]
pub enum ClockSource {
    Simulated(SimClock),
    /// Elapsed wall time of each step, in milliseconds.
    Wall,
}

/// One record per iteration of the decode loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    /// Active sequences.
    pub batch: usize,
    pub seqlen_mean: f64,
    pub seqlen_max: usize,
    /// Planned tree size, shared by the whole batch.
    pub tree_size: usize,
    /// Nodes drafted across the batch.
    pub drafted: usize,
    pub survived: usize,
    pub prune_rate: f64,
    /// Mean accepted drafted tokens per active sequence.
    pub accepted_length: f64,
    /// Tokens appended to transcripts this iteration.
    pub committed: usize,
    pub iteration_time: f64,
    pub replan: bool,
    pub trigger: Option<ReplanTrigger>,
}

/// A scheduling decision, logged for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEvent {
    pub iteration: u64,
    pub trigger: ReplanTrigger,
    pub size: usize,
    pub speeds: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub sequences: usize,
    pub tokens: usize,
    pub iterations: usize,
    /// Total iteration time in milliseconds.
    pub total_time: f64,
    pub tokens_per_sec: f64,
    pub mean_acceptance_length: f64,
    pub mean_prune_rate: f64,
    pub mean_tree_size: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Generated tokens per prompt, in prompt order.
    pub transcripts: Vec<Vec<TokenId>>,
    pub metrics: Vec<IterationMetrics>,
    pub summary: RunSummary,
}

struct Sequence<S> {
    prompt_index: usize,
    state: S,
    generated: Vec<TokenId>,
    finished: bool,
}

/// Current tree plan: the size and the rank paths every sequence instantiates.
#[derive(Debug, Clone, Default)]
struct Plan {
    size: usize,
    nodes: Vec<SelectedNode>,
}

pub struct Engine<'b, B: ModelBackend> {
    backend: &'b B,
    config: EngineConfig,
    clock: ClockSource,
    stats: AcceptanceStats<f64>,
    cost: CostModel<f64>,
    masks: MaskCache,
    candidates: Vec<usize>,
    plan: Plan,
    last_plan: Option<PlanPoint>,
    warming: bool,
    iteration: u64,
    events: Vec<PlanEvent>,
}

impl<'b, B: ModelBackend> Engine<'b, B> {
    pub fn new(backend: &'b B, config: EngineConfig, clock: ClockSource) -> Result<Self, EngineError> {
        config
            .validate(backend.num_layers(), backend.vocab_size())
            .map_err(EngineError::Config)?;
        let depth = backend.num_draft_heads();
        let capacity = grid_capacity(depth, config.k_max);
        let mut candidates: Vec<usize> = config
            .scheduler
            .size_candidates
            .iter()
            .copied()
            .filter(|&s| s <= capacity)
            .collect();
        if candidates.is_empty() {
            candidates.push(capacity.min(1));
        }
        let stats = AcceptanceStats::new(depth, config.k_max, config.acceptance_alpha)
            .with_mean_warmup(config.mean_warmup);
        let cost = CostModel::new(candidates.clone(), config.cost_alpha, config.cost_lambda, (1.0, 0.0));
        let candidates = cost.sizes().to_vec();
        Ok(Self {
            backend,
            config,
            clock,
            stats,
            cost,
            masks: MaskCache::new(),
            candidates,
            plan: Plan::default(),
            last_plan: None,
            warming: false,
            iteration: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn stats(&self) -> &AcceptanceStats<f64> {
        &self.stats
    }

    pub fn cost(&self) -> &CostModel<f64> {
        &self.cost
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn plan_events(&self) -> &[PlanEvent] {
        &self.events
    }

    pub fn mask_builds(&self) -> usize {
        self.masks.builds()
    }

    /// Decodes every prompt to `max_tokens` new tokens (or end-of-sequence), `batch_size`
    /// prompts at a time.
    pub fn run(
        &mut self,
        prompts: &[Vec<TokenId>],
        max_tokens: usize,
        batch_size: usize,
    ) -> Result<RunOutput, EngineError> {
        if prompts.is_empty() {
            return Err(EngineError::NoPrompts);
        }
        if batch_size == 0 {
            return Err(EngineError::Config("batch_size must be positive".into()));
        }
        let mut transcripts = vec![Vec::new(); prompts.len()];
        let mut metrics = Vec::new();
        for (chunk_index, chunk) in prompts.chunks(batch_size).enumerate() {
            let mut seqs = chunk
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Ok(Sequence {
                        prompt_index: chunk_index * batch_size + i,
                        state: self.backend.prefill(p)?,
                        generated: Vec::new(),
                        finished: max_tokens == 0,
                    })
                })
                .collect::<Result<Vec<_>, BackendError>>()?;
            while seqs.iter().any(|s| !s.finished) {
                metrics.push(self.step(&mut seqs, max_tokens)?);
            }
            for s in seqs {
                transcripts[s.prompt_index] = s.generated;
            }
        }
        let summary = summarize(self.config.mode, &transcripts, &metrics);
        Ok(RunOutput {
            transcripts,
            metrics,
            summary,
        })
    }

    fn step(&mut self, seqs: &mut [Sequence<B::State>], max_tokens: usize) -> Result<IterationMetrics, EngineError> {
        let started = Instant::now();
        let slots = seqs.len();
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].finished).collect();
        let lens: Vec<usize> = active
            .iter()
            .map(|&i| self.backend.context(&seqs[i].state).len())
            .collect();
        let seqlen_mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        let seqlen_max = lens.iter().copied().max().unwrap_or(0);
        let mode = self.config.mode;
        let tree_mode = mode != Mode::Autoregressive;

        // (1) draft
        let drafts: Vec<Option<HeadPredictions>> = active
            .iter()
            .map(|&i| tree_mode.then(|| self.backend.draft(&seqs[i].state, self.config.k_max)))
            .collect();

        // (2) plan
        let point = PlanPoint {
            iteration: self.iteration,
            batch: slots,
            mean_seqlen: seqlen_mean,
        };
        let trigger = if !tree_mode {
            None
        } else if self.warming {
            Some(ReplanTrigger::Warmup)
        } else {
            should_replan(&point, self.last_plan.as_ref(), &self.config.scheduler)
        };
        if let Some(trigger) = trigger {
            self.replan(trigger, &point)?;
        }

        let fraction = if mode.prunes() {
            self.config.prune.prune_layer as f64 / self.backend.num_layers() as f64
        } else {
            1.0
        };
        let mut drafted = 0;
        let mut survived = 0;
        let mut effective = 0.0;
        let mut accepted_total = 0;
        let mut committed = 0;
        for (slot, &i) in active.iter().enumerate() {
            let seq = &mut seqs[i];
            let root = *self.backend.context(&seq.state).last().expect("non-empty context");

            // (3) tree and cached mask
            let tree = match &drafts[slot] {
                Some(pred) if !self.plan.nodes.is_empty() => build_tree(root, pred, &self.plan.nodes)?,
                _ => TokenTree::empty(root),
            };
            let mask = self.masks.get(&tree).clone();

            // (4) forward, pruning mid-way
            let mut prune_err = None;
            let prune_cfg = self.config.prune.clone();
            let mut decide = |lists: &[Vec<TokenId>]| match prune(&tree, lists, &prune_cfg) {
                Ok(d) => d.survivors,
                Err(e) => {
                    prune_err = Some(e);
                    (0..tree.len()).collect()
                }
            };
            let hook = (mode.prunes() && !tree.is_empty()).then(|| PruneHook {
                layer: prune_cfg.prune_layer,
                topk: prune_cfg.prune_topk,
                decide: &mut decide,
            });
            let out = self.backend.forward_tree(&seq.state, &tree, &mask, hook)?;
            if let Some(e) = prune_err {
                return Err(e.into());
            }
            drafted += tree.len();
            survived += out.survivors.len();
            effective += fraction * tree.len() as f64 + (1.0 - fraction) * out.survivors.len() as f64;

            // (5) verify
            let pruned = tree.retain(&out.survivors)?;
            let result = verify(&pruned, &out.argmax, out.root_argmax);
            let tokens = result.committed_tokens(&pruned);
            accepted_total += result.accepted_length();

            // (8, per sequence) the drafted offsets now resolved
            if let Some(pred) = &drafts[slot] {
                let realized: Vec<(usize, TokenId)> =
                    tokens.iter().enumerate().map(|(d, &t)| (d + 1, t)).collect();
                self.stats.update(&realized, pred);
            }

            // (6) commit
            self.backend.commit(&mut seq.state, out, &result.accepted, result.bonus)?;
            for t in tokens {
                if seq.generated.len() >= max_tokens {
                    break;
                }
                seq.generated.push(t);
                committed += 1;
                if self.config.eos == Some(t.0) {
                    seq.finished = true;
                    break;
                }
            }
            if seq.generated.len() >= max_tokens {
                seq.finished = true;
            }
        }

        // (7) time the iteration and feed the cost model
        let n = active.len() as f64;
        let iteration_time = match &mut self.clock {
            ClockSource::Simulated(clock) => clock.sample(effective / n, slots, seqlen_mean),
            ClockSource::Wall => started.elapsed().as_secs_f64() * 1e3,
        };
        if mode.dynamic() && self.plan.size > 0 && iteration_time > 0.0 {
            self.cost.observe(self.plan.size, iteration_time, self.iteration)?;
        }

        let metrics = IterationMetrics {
            iteration: self.iteration,
            batch: active.len(),
            seqlen_mean,
            seqlen_max,
            tree_size: self.plan.size,
            drafted,
            survived,
            prune_rate: if drafted == 0 {
                0.0
            } else {
                1.0 - survived as f64 / drafted as f64
            },
            accepted_length: accepted_total as f64 / n,
            committed,
            iteration_time,
            replan: trigger.is_some(),
            trigger,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    fn replan(&mut self, trigger: ReplanTrigger, point: &PlanPoint) -> Result<(), EngineError> {
        let mode = self.config.mode;
        let batch_changed = self.last_plan.is_some_and(|p| p.batch != point.batch);
        self.last_plan = Some(*point);
        let (size, speeds) = if mode.dynamic() {
            if batch_changed {
                self.cost.reset((1.0, 0.0));
            }
            match self.cost.fit(self.iteration) {
                Ok(_) => {
                    self.warming = false;
                    let curve = self
                        .stats
                        .select_best_nodes(&self.candidates)?
                        .into_iter()
                        .map(|(s, sel)| (s, sel.expected_length))
                        .collect();
                    let choice = choose_size_detailed(&curve, &self.cost, self.config.scheduler.count_bonus_token);
                    (choice.size, choice.speeds)
                }
                Err(CostError::InsufficientData) => {
                    self.warming = true;
                    (self.probe_size(), Vec::new())
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            (self.static_size(), Vec::new())
        };
        self.plan = match (&self.config.static_paths, mode.dynamic()) {
            (Some(paths), false) => Plan {
                size: paths.len(),
                nodes: paths
                    .iter()
                    .map(|p| {
                        let path = RankPath::new(p.clone());
                        let w = self.stats.path_contribution(&path.steps().collect::<Vec<_>>())?;
                        Ok(SelectedNode::new(path, w))
                    })
                    .collect::<Result<_, StatsError>>()?,
            },
            _ => Plan {
                size,
                nodes: self.stats.select_best(size)?.to_selected(),
            },
        };
        self.events.push(PlanEvent {
            iteration: self.iteration,
            trigger,
            size: self.plan.size,
            speeds,
        });
        Ok(())
    }

    /// Extreme candidate sizes first, so two observations already span the whole range.
    fn probe_size(&self) -> usize {
        let lo = self.candidates[0];
        let hi = *self.candidates.last().expect("non-empty candidates");
        [lo, hi]
            .into_iter()
            .chain(self.candidates.iter().copied())
            .find(|&s| self.cost.t_perf(s).is_none())
            .unwrap_or(lo)
    }

    fn static_size(&self) -> usize {
        self.config.static_size.min(self.stats.grid_capacity())
    }
}

fn summarize(mode: Mode, transcripts: &[Vec<TokenId>], metrics: &[IterationMetrics]) -> RunSummary {
    let tokens: usize = transcripts.iter().map(Vec::len).sum();
    let total_time: f64 = metrics.iter().map(|m| m.iteration_time).sum();
    let seq_iters: usize = metrics.iter().map(|m| m.batch).sum();
    let accepted: f64 = metrics.iter().map(|m| m.accepted_length * m.batch as f64).sum();
    let drafted: usize = metrics.iter().map(|m| m.drafted).sum();
    let survived: usize = metrics.iter().map(|m| m.survived).sum();
    let iterations = metrics.len();
    RunSummary {
        mode,
        sequences: transcripts.len(),
        tokens,
        iterations,
        total_time,
        tokens_per_sec: if total_time > 0.0 {
            tokens as f64 / total_time * 1e3
        } else {
            0.0
        },
        mean_acceptance_length: if seq_iters == 0 { 0.0 } else { accepted / seq_iters as f64 },
        mean_prune_rate: if drafted == 0 {
            0.0
        } else {
            1.0 - survived as f64 / drafted as f64
        },
        mean_tree_size: if iterations == 0 {
            0.0
        } else {
            metrics.iter().map(|m| m.tree_size as f64).sum::<f64>() / iterations as f64
        },
    }
}
