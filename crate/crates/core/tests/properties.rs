use std::collections::BTreeMap;

use proptest::prelude::*;

use propd::acceptance_model::{AcceptanceStats, HeadPredictions};
use propd::backends::{LatencyModel, ModelBackend, SimClock, SyntheticConfig, SyntheticOracle, TinyConfig, TinyTransformer};
use propd::cost_model::CostModel;
use propd::engine::{ClockSource, Engine, EngineConfig, Mode};
use propd::pruning::{prune, PruneConfig};
use propd::scheduler::choose_size;
use propd::token_tree::{build_tree, make_mask, RankPath, SelectedNode, TokenId, TokenTree};
use propd::verification::verify;

const DEPTH: usize = 4;
const K: usize = 3;

fn grid_predictions() -> HeadPredictions {
    HeadPredictions::new(
        (1..=DEPTH)
            .map(|d| (1..=K).map(|r| (TokenId((10 * d + r) as u32), 1.0 / r as f64)).collect())
            .collect(),
    )
    .unwrap()
}

/// An ancestor-closed rank-path set grown by repeatedly picking a frontier node.
fn tree_strategy(max_nodes: usize) -> impl Strategy<Value = TokenTree> {
    prop::collection::vec(any::<u32>(), 0..max_nodes).prop_map(|picks| {
        let mut chosen = Vec::new();
        let mut frontier: Vec<RankPath> = (1..=K).map(|r| RankPath::new(vec![r])).collect();
        for pick in picks {
            if frontier.is_empty() {
                break;
            }
            let p = frontier.swap_remove(pick as usize % frontier.len());
            if p.depth() < DEPTH {
                frontier.extend((1..=K).map(|r| p.child(r)));
            }
            chosen.push(SelectedNode::new(p, 0.0));
        }
        build_tree(TokenId(0), &grid_predictions(), &chosen).unwrap()
    })
}

fn closed_subset(tree: &TokenTree, bits: &[bool]) -> Vec<usize> {
    let mut alive = vec![false; tree.len()];
    for (i, n) in tree.nodes().iter().enumerate() {
        alive[i] = bits[i % bits.len()] && n.parent.is_none_or(|p| alive[p]);
    }
    (0..tree.len()).filter(|&i| alive[i]).collect()
}

fn is_closed(tree: &TokenTree, s: &[usize]) -> bool {
    s.iter().all(|&i| tree.node(i).parent.is_none_or(|p| s.contains(&p)))
}

fn stats_strategy() -> impl Strategy<Value = AcceptanceStats<f64>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, K + 1), DEPTH).prop_map(|rows| {
        let marginals: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let total: f64 = r.iter().sum::<f64>().max(1e-9);
                r[..K].iter().map(|p| p / total).collect()
            })
            .collect();
        AcceptanceStats::from_marginals(&marginals, 0.1).unwrap()
    })
}

proptest! {
    #[test]
    fn mask_is_lower_triangular_with_true_diagonal(tree in tree_strategy(40)) {
        let m = make_mask(&tree);
        for i in 0..tree.len() {
            prop_assert!(m.get(i, i));
            for j in i + 1..tree.len() {
                prop_assert!(!m.get(i, j));
            }
        }
    }

    #[test]
    fn subsample_equals_rebuild(tree in tree_strategy(30), bits in prop::collection::vec(any::<bool>(), 1..8)) {
        let s = closed_subset(&tree, &bits);
        let sub = make_mask(&tree).subsample(&s).unwrap();
        prop_assert_eq!(sub, make_mask(&tree.retain(&s).unwrap()));
    }

    #[test]
    fn tree_text_round_trips(tree in tree_strategy(30)) {
        prop_assert_eq!(TokenTree::from_text(&tree.to_text()).unwrap(), tree);
    }

    #[test]
    fn node_weights_never_exceed_parent(stats in stats_strategy(), size in 1usize..60) {
        let sel = stats.select_best(size).unwrap();
        let tree = build_tree(TokenId(0), &grid_predictions(), &sel.to_selected()).unwrap();
        for n in tree.nodes() {
            if let Some(p) = n.parent {
                prop_assert!(n.weight <= tree.node(p).weight);
            }
        }
        prop_assert!((stats.expected_tree_length(&tree).unwrap() - sel.expected_length).abs() < 1e-12);
    }

    #[test]
    fn selections_are_closed_and_grow(stats in stats_strategy()) {
        let sizes: Vec<usize> = (1..=stats.grid_capacity()).collect();
        let all = stats.select_best_nodes(&sizes).unwrap();
        let mut prev = 0.0;
        for (_, sel) in all {
            prop_assert!(sel.nodes.iter().all(|(p, _)| p.depth() == 1 || sel.nodes.iter().any(|(q, _)| Some(q) == p.parent().as_ref())));
            prop_assert!(sel.expected_length >= prev);
            prev = sel.expected_length;
        }
    }

    #[test]
    fn cumulative_rates_stay_monotone(
        updates in prop::collection::vec((1usize..=DEPTH, 0u32..50), 1..200),
        alpha in 0.01f64..0.9,
    ) {
        let pred = grid_predictions();
        let mut stats = AcceptanceStats::<f64>::new(DEPTH, K, alpha);
        for (d, t) in updates {
            stats.update(&[(d, TokenId(t))], &pred);
            for depth in 1..=DEPTH {
                for rank in 1..=K {
                    prop_assert!(stats.marginal(depth, rank).unwrap() >= 0.0);
                    prop_assert!(stats.cumulative(depth, rank) >= stats.cumulative(depth, rank - 1));
                    prop_assert!(stats.cumulative(depth, rank) <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn choose_size_is_scale_invariant(
        ls in prop::collection::vec(0.0f64..3.0, 1..8),
        b0 in 0.1f64..20.0,
        b1 in 0.0f64..2.0,
        c in 0.01f64..100.0,
    ) {
        let sizes: Vec<usize> = (0..ls.len()).map(|i| 1 << i).collect();
        let curve: BTreeMap<usize, f64> = sizes.iter().copied().zip(ls.iter().copied()).collect();
        let base = CostModel::<f64>::new(sizes.clone(), 0.5, 0.0, (b0, b1));
        let scaled = CostModel::<f64>::new(sizes, 0.5, 0.0, (b0 * c, b1 * c));
        let chosen = choose_size(&curve, &base);
        prop_assert!(curve.contains_key(&chosen));
        prop_assert_eq!(chosen, choose_size(&curve, &scaled));
    }

    #[test]
    fn exact_lines_are_recovered(
        b0 in 0.5f64..20.0,
        b1 in 0.0f64..2.0,
        stamps in prop::collection::vec(0u64..500, 2..7),
        lambda in 0.0f64..0.1,
    ) {
        let sizes: Vec<usize> = (0..stamps.len()).map(|i| 1 << i).collect();
        let mut cost = CostModel::<f64>::new(sizes.clone(), 0.3, lambda, (0.0, 0.0));
        for (&s, &t) in sizes.iter().zip(&stamps) {
            cost.observe(s, b0 + b1 * s as f64, t).unwrap();
        }
        let (f0, f1) = cost.fit(500).unwrap();
        prop_assert!((f0 - b0).abs() < 1e-7 * b0.max(1.0));
        prop_assert!((f1 - b1).abs() < 1e-7);
    }

    #[test]
    fn pruning_is_monotone_in_topk(
        tree in tree_strategy(40),
        seed in any::<u64>(),
        k_small in 1usize..6,
        extra in 0usize..6,
    ) {
        let oracle = SyntheticOracle::new(SyntheticConfig { vocab: 16, seed, ..SyntheticConfig::default() }).unwrap();
        // early lists of the largest K; smaller K use their prefixes
        let lists: Vec<Vec<TokenId>> = (0..tree.len()).map(|i| oracle.early_topk(seed ^ i as u64, 3, 16)).collect();
        let tokens_tree = remap_tokens(&tree, 16);
        let small = prune(&tokens_tree, &lists, &PruneConfig { prune_layer: 3, prune_topk: k_small }).unwrap();
        let large = prune(&tokens_tree, &lists, &PruneConfig { prune_layer: 3, prune_topk: k_small + extra }).unwrap();
        prop_assert!(small.survivors.iter().all(|i| large.survivors.contains(i)));
        prop_assert!(is_closed(&tokens_tree, &small.survivors));
        prop_assert!(tokens_tree.nodes().iter().enumerate().filter(|(_, n)| n.depth == 1).all(|(i, _)| small.survivors.contains(&i)));
        let everything = prune(&tokens_tree, &lists, &PruneConfig { prune_layer: 3, prune_topk: 16 }).unwrap();
        prop_assert_eq!(everything.survivors.len(), tokens_tree.len());
        prop_assert_eq!(everything.prune_rate, 0.0);
    }

    #[test]
    fn verification_walks_a_connected_path(
        tree in tree_strategy(40),
        argmax in prop::collection::vec(0u32..50, 41),
        root in 0u32..50,
    ) {
        let am: Vec<TokenId> = argmax[..tree.len()].iter().map(|&t| TokenId(t)).collect();
        let r = verify(&tree, &am, TokenId(root));
        prop_assert!(r.accepted_length() <= DEPTH);
        let mut parent = None;
        let mut expect = TokenId(root);
        for &i in &r.accepted {
            prop_assert_eq!(tree.node(i).parent, parent);
            prop_assert_eq!(tree.node(i).token, expect);
            expect = am[i];
            parent = Some(i);
        }
        prop_assert_eq!(r.bonus, expect);
        prop_assert!(tree.children(parent).all(|c| tree.node(c).token != expect));
        prop_assert_eq!(verify(&tree, &am, TokenId(root)), r);
    }
}

/// Same shape with tokens drawn from a small vocabulary.
fn remap_tokens(tree: &TokenTree, vocab: u32) -> TokenTree {
    let pred = HeadPredictions::new(
        (1..=DEPTH)
            .map(|d| (1..=K).map(|r| (TokenId(((d * 3 + r) as u32) % vocab), 1.0 / r as f64)).collect())
            .collect(),
    )
    .unwrap();
    let selected: Vec<SelectedNode> = (0..tree.len())
        .map(|i| {
            let steps = tree.path_steps(i);
            SelectedNode::new(RankPath::new(steps.iter().map(|s| s.1).collect()), 0.0)
        })
        .collect();
    build_tree(TokenId(0), &pred, &selected).unwrap()
}

fn oracle(seed: u64) -> SyntheticOracle {
    SyntheticOracle::new(SyntheticConfig {
        vocab: 300,
        layers: 8,
        q: vec![vec![0.7, 0.1], vec![0.5, 0.2], vec![0.4, 0.2]],
        early_quality: vec![0.8],
        seed,
    })
    .unwrap()
}

fn sim() -> ClockSource {
    ClockSource::Simulated(SimClock::new(LatencyModel::default(), 3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ragged_batches_keep_sequences_independent(seed in any::<u64>(), mode_ix in 1usize..5) {
        let b = oracle(seed);
        let prompts: Vec<Vec<TokenId>> = (0..3u32).map(|i| vec![TokenId(i * 7 + 1), TokenId((seed % 300) as u32)]).collect();
        let cfg = EngineConfig {
            k_max: 2,
            prune: PruneConfig { prune_layer: 2, prune_topk: 20 },
            ..EngineConfig::default()
        }
        .with_mode(Mode::ALL[mode_ix]);
        let batched = Engine::new(&b, cfg.clone(), sim()).unwrap().run(&prompts, 25, 3).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let mut state = b.prefill(p).unwrap();
            let alone: Vec<TokenId> = (0..25).map(|_| b.greedy_step(&mut state).unwrap()).collect();
            prop_assert_eq!(&batched.transcripts[i], &alone);
        }
        for m in &batched.metrics {
            prop_assert!(m.committed >= 1 && m.committed <= m.batch * (b.num_draft_heads() + 1));
            prop_assert!(m.accepted_length <= b.num_draft_heads() as f64);
        }
    }

    #[test]
    fn identical_config_gives_identical_metrics(seed in any::<u64>()) {
        let b = oracle(seed);
        let prompts = vec![vec![TokenId(1), TokenId(2)], vec![TokenId(3)]];
        let run = || Engine::new(&b, EngineConfig { k_max: 2, prune: PruneConfig { prune_layer: 2, prune_topk: 20 }, ..EngineConfig::default() }, sim())
            .unwrap()
            .run(&prompts, 30, 2)
            .unwrap();
        let (a, c) = (run(), run());
        prop_assert_eq!(a.transcripts, c.transcripts);
        prop_assert_eq!(a.metrics, c.metrics);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn commit_matches_fresh_prefill(seed in 0u64..1000, steps in 1usize..6) {
        let model = TinyTransformer::<f64>::new(TinyConfig { layers: 2, hidden: 16, heads: 2, vocab: 64, mlp_width: 32, max_positions: 64, draft_heads: 3, seed }).unwrap();
        let prompt = vec![TokenId((seed % 64) as u32), TokenId(7)];
        let mut state = model.prefill(&prompt).unwrap();
        let mut rng = seed;
        for _ in 0..steps {
            let pred = model.draft(&state, 2);
            let chain: Vec<SelectedNode> = (1..=3).map(|d| SelectedNode::new(RankPath::new(vec![1; d]), 0.0)).collect();
            let root = *model.context(&state).last().unwrap();
            let tree = build_tree(root, &pred, &chain).unwrap();
            let out = model.forward_tree(&state, &tree, &make_mask(&tree), None).unwrap();
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let take = (rng >> 33) as usize % 4;
            let accepted: Vec<usize> = (0..take).collect();
            model.commit(&mut state, out, &accepted, TokenId((rng >> 40) as u32 % 64)).unwrap();
        }
        let fresh = model.prefill(model.context(&state)).unwrap();
        prop_assert_eq!(model.draft(&state, 4), model.draft(&fresh, 4));
        prop_assert_eq!(model.next_logits(&state).unwrap(), model.next_logits(&fresh).unwrap());
    }
}
