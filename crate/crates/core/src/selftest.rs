//! Reduced-scale oracle suites behind the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acceptance_model::{AcceptanceStats, HeadPredictions};
use crate::backends::{
    GuidedDrafts, LatencyModel, ModelBackend, SimClock, SyntheticConfig, SyntheticOracle, TinyConfig,
    TinyTransformer,
};
use crate::cost_model::CostModel;
use crate::engine::{ClockSource, Engine, EngineConfig, Mode};
use crate::pruning::PruneConfig;
use crate::token_tree::{build_tree, make_mask, RankPath, SelectedNode, TokenId, TokenTree, TreeMask};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, result: Result<String, String>) -> Self {
        match result {
            Ok(detail) => Self {
                name,
                passed: true,
                detail,
            },
            Err(detail) => Self {
                name,
                passed: false,
                detail,
            },
        }
    }
}

pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        SuiteReport::new("losslessness", losslessness(seed)),
        SuiteReport::new("mask_subsample_oracle", mask_oracle(&make_mask, 5)),
        SuiteReport::new("regression_recovery", regression_recovery(seed)),
        SuiteReport::new("estimator_convergence", estimator_convergence(seed)),
    ]
}

fn prompts(n: usize, len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<TokenId>> {
    (0..n)
        .map(|_| (0..len).map(|_| TokenId(rng.gen_range(0..vocab as u32))).collect())
        .collect()
}

fn lossless_on<B: ModelBackend>(
    name: &str,
    backend: &B,
    engine: &EngineConfig,
    prompts: &[Vec<TokenId>],
    max_tokens: usize,
) -> Result<(), String> {
    let clock = || ClockSource::Simulated(SimClock::new(LatencyModel::default(), 0));
    let run = |mode| {
        Engine::new(backend, engine.clone().with_mode(mode), clock())
            .and_then(|mut e| e.run(prompts, max_tokens, 3))
            .map_err(|e| format!("{name} {mode}: {e}"))
    };
    let reference = run(Mode::Autoregressive)?.transcripts;
    for mode in Mode::ALL {
        if run(mode)?.transcripts != reference {
            return Err(format!("{name}: {mode} transcript differs from autoregressive"));
        }
    }
    Ok(())
}

/// Every mode reproduces the autoregressive transcript.
pub fn losslessness(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tiny = TinyTransformer::<f64>::new(TinyConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        vocab: 64,
        mlp_width: 32,
        max_positions: 64,
        draft_heads: 3,
        seed,
    })
    .map_err(|e| e.to_string())?;
    let guided = GuidedDrafts::new(tiny, vec![vec![0.7, 0.1], vec![0.5, 0.1], vec![0.4, 0.1]], seed)
        .map_err(|e| e.to_string())?;
    let engine = EngineConfig {
        k_max: 2,
        prune: PruneConfig {
            prune_layer: 1,
            prune_topk: 4,
        },
        static_size: 6,
        ..EngineConfig::default()
    };
    lossless_on("guided", &guided, &engine, &prompts(6, 6, 64, &mut rng), 20)?;
    let synthetic = SyntheticOracle::new(SyntheticConfig {
        vocab: 128,
        layers: 8,
        seed,
        early_quality: vec![0.8],
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let engine = EngineConfig {
        k_max: 3,
        prune: PruneConfig {
            prune_layer: 2,
            prune_topk: 8,
        },
        ..EngineConfig::default()
    };
    lossless_on("synthetic", &synthetic, &engine, &prompts(9, 8, 128, &mut rng), 40)?;
    Ok("5 modes x 2 backends identical to autoregressive".into())
}

/// All ancestor-closed subsets of the `depth`-level, `k`-ary rank grid with at most
/// `max_nodes` nodes.
pub fn enumerate_trees(depth: usize, k: usize, max_nodes: usize) -> Vec<Vec<RankPath>> {
    let mut grid = Vec::new();
    let mut level = vec![RankPath::root()];
    for _ in 0..depth {
        level = level
            .iter()
            .flat_map(|p| (1..=k).map(move |r| p.child(r)))
            .collect();
        grid.extend(level.iter().cloned());
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    extend_closed(&grid, 0, max_nodes, &mut current, &mut out);
    out
}

fn extend_closed(
    grid: &[RankPath],
    from: usize,
    max_nodes: usize,
    current: &mut Vec<RankPath>,
    out: &mut Vec<Vec<RankPath>>,
) {
    out.push(current.clone());
    if current.len() == max_nodes {
        return;
    }
    for i in from..grid.len() {
        let p = &grid[i];
        let closed = p.parent().is_some_and(|q| q.depth() == 0 || current.contains(&q));
        if closed {
            current.push(p.clone());
            extend_closed(grid, i + 1, max_nodes, current, out);
            current.pop();
        }
    }
}

/// Head lists where the token at `(depth, rank)` is `10 * depth + rank`.
pub fn grid_predictions(depth: usize, k: usize) -> HeadPredictions {
    HeadPredictions::new(
        (1..=depth)
            .map(|d| {
                (1..=k)
                    .map(|r| (TokenId((10 * d + r) as u32), 1.0 / r as f64))
                    .collect()
            })
            .collect(),
    )
    .expect("valid grid predictions")
}

/// Ancestor visibility straight from the parent pointers.
fn reference_rows(tree: &TokenTree) -> Vec<Vec<bool>> {
    (0..tree.len())
        .map(|i| {
            let mut row = vec![false; tree.len()];
            let mut cur = Some(i);
            while let Some(j) = cur {
                row[j] = true;
                cur = tree.node(j).parent;
            }
            row
        })
        .collect()
}

fn closed_subsets(tree: &TokenTree) -> Vec<Vec<usize>> {
    let n = tree.len();
    (0u32..1 << n)
        .map(|bits| (0..n).filter(|&i| bits >> i & 1 == 1).collect::<Vec<_>>())
        .filter(|s| {
            s.iter()
                .all(|&i| tree.node(i).parent.is_none_or(|p| s.contains(&p)))
        })
        .collect()
}

/// Checks `builder` against parent-pointer ancestry and checks that subsampling its mask
/// equals rebuilding on the pruned tree, for every tree of up to `max_nodes` nodes over a
/// depth-3 binary grid and every ancestor-closed survivor set.
pub fn mask_oracle(builder: &dyn Fn(&TokenTree) -> TreeMask, max_nodes: usize) -> Result<String, String> {
    let pred = grid_predictions(3, 2);
    let trees = enumerate_trees(3, 2, max_nodes);
    let mut checks = 0usize;
    for paths in &trees {
        let selected: Vec<SelectedNode> = paths.iter().map(|p| SelectedNode::new(p.clone(), 0.0)).collect();
        let tree = build_tree(TokenId(0), &pred, &selected).map_err(|e| e.to_string())?;
        let mask = builder(&tree);
        if mask != TreeMask::from_rows(&reference_rows(&tree)) {
            return Err(format!("mask of tree {paths:?} disagrees with its ancestry"));
        }
        for s in closed_subsets(&tree) {
            let sub = mask.subsample(&s).map_err(|e| e.to_string())?;
            let pruned = tree.retain(&s).map_err(|e| e.to_string())?;
            if sub != builder(&pruned) {
                return Err(format!("subsample {s:?} of tree {paths:?} differs from rebuilt mask"));
            }
            checks += 1;
        }
    }
    Ok(format!("{} trees, {checks} survivor sets", trees.len()))
}

/// Recovers `t = 3 + 0.2 * size` from 100 noisy observations.
pub fn regression_recovery(seed: u64) -> Result<String, String> {
    let model = LatencyModel {
        overhead: 3.0,
        per_context_token: 0.0,
        per_node: 0.2,
        noise: 0.05,
    };
    let mut clock = SimClock::new(model, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut cost = CostModel::<f64>::new((1..=64).collect(), 0.2, 0.01, (1.0, 0.0));
    for now in 0..100 {
        let size = rng.gen_range(1..=64usize);
        let t = clock.sample(size as f64, 1, 0.0);
        cost.observe(size, t, now).map_err(|e| e.to_string())?;
    }
    let (b0, b1) = cost.fit(100).map_err(|e| e.to_string())?;
    let (e0, e1) = ((b0 - 3.0).abs() / 3.0, (b1 - 0.2).abs() / 0.2);
    if e0 < 0.02 && e1 < 0.02 {
        Ok(format!("beta0 {b0:.4}, beta1 {b1:.4}"))
    } else {
        Err(format!("beta0 {b0:.4} (rel {e0:.3}), beta1 {b1:.4} (rel {e1:.3})"))
    }
}

/// Hit-rate estimates approach the oracle's configured curves.
pub fn estimator_convergence(seed: u64) -> Result<String, String> {
    let oracle = SyntheticOracle::new(SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let k = 3;
    let depth = oracle.num_draft_heads();
    let mut stats = AcceptanceStats::<f64>::new(depth, k, 0.0005).with_mean_warmup(true);
    let mut state = oracle.prefill(&[TokenId((seed % 1024) as u32)]).map_err(|e| e.to_string())?;
    for _ in 0..2000 {
        let pred = oracle.draft(&state, k);
        let truth = oracle.continuation(&state, depth);
        let realized: Vec<(usize, TokenId)> = truth.into_iter().enumerate().map(|(d, t)| (d + 1, t)).collect();
        stats.update(&realized, &pred);
        oracle.greedy_step(&mut state).map_err(|e| e.to_string())?;
    }
    let truth = oracle.true_cumulative(k);
    let mut worst: f64 = 0.0;
    for (d, row) in truth.iter().enumerate() {
        for (r, &p) in row.iter().enumerate() {
            worst = worst.max((stats.cumulative(d + 1, r + 1) - p).abs());
        }
    }
    if worst < 0.05 {
        Ok(format!("max |P - P*| = {worst:.4}"))
    } else {
        Err(format!("max |P - P*| = {worst:.4} exceeds 0.05"))
    }
}
