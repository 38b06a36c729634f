//! Online estimate of how often each draft head's Top-k list contains the token the full
//! model eventually emits, and the tree selection built on top of it.
//!
//! `P[d][k]` is the cumulative hit rate of head `d` within its first `k` candidates. The
//! marginal `p[d][k] = P[d][k] - P[d][k-1]` is the probability that exactly the rank-`k`
//! candidate is right, and a node's expected contribution to the acceptance length is the
//! product of marginals along its path.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io;

use thiserror::Error;

use crate::scalar::Real;
use crate::token_tree::{RankPath, SelectedNode, TokenId, TokenTree};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("depth {depth} outside 1..={max}")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("tree size {size} exceeds the draft grid capacity {capacity}")]
    SizeExceedsGrid { size: usize, capacity: usize },
    #[error("invalid head predictions: {0}")]
    BadPredictions(String),
    #[error("invalid acceptance prior: {0}")]
    BadPrior(String),
}

/// Per-head ranked candidate lists, depth 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPredictions {
    heads: Vec<Vec<(TokenId, f64)>>,
}

impl HeadPredictions {
    /// Checks that scores are non-increasing and tokens distinct within each head.
    pub fn new(heads: Vec<Vec<(TokenId, f64)>>) -> Result<Self, StatsError> {
        for (d, head) in heads.iter().enumerate() {
            if head.windows(2).any(|w| w[1].1 > w[0].1) {
                return Err(StatsError::BadPredictions(format!(
                    "head {} scores are not sorted",
                    d + 1
                )));
            }
            for (i, (t, _)) in head.iter().enumerate() {
                if head[..i].iter().any(|(u, _)| u == t) {
                    return Err(StatsError::BadPredictions(format!(
                        "head {} lists token {t} twice",
                        d + 1
                    )));
                }
            }
        }
        Ok(Self { heads })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Candidates of head `depth` (1-based).
    pub fn head(&self, depth: usize) -> &[(TokenId, f64)] {
        &self.heads[depth - 1]
    }

    /// 1-based rank of `token` in head `depth`, if listed.
    pub fn rank_of(&self, depth: usize, token: TokenId) -> Option<usize> {
        self.heads
            .get(depth.wrapping_sub(1))?
            .iter()
            .position(|(t, _)| *t == token)
            .map(|i| i + 1)
    }
}

/// Cumulative Top-k hit rates per head, updated by an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceStats<T: Real> {
    cumulative: Vec<Vec<T>>,
    alpha: T,
    samples: Vec<u64>,
    mean_warmup: bool,
}

/// Node chosen by [`AcceptanceStats::select_best_nodes`] together with its expected length.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T: Real> {
    pub nodes: Vec<(RankPath, T)>,
    pub expected_length: T,
}

impl<T: Real> Selection<T> {
    pub fn to_selected(&self) -> Vec<SelectedNode> {
        self.nodes
            .iter()
            .map(|(p, w)| SelectedNode::new(p.clone(), w.as_f64()))
            .collect()
    }
}

impl<T: Real> AcceptanceStats<T> {
    /// Starts from the prior `P[d][k] = min(0.9, 0.5^d) * k / k_max`.
    pub fn new(num_heads: usize, k_max: usize, alpha: T) -> Self {
        let cumulative = (1..=num_heads)
            .map(|d| {
                let top = T::lit(0.5f64.powi(d as i32).min(0.9));
                (1..=k_max)
                    .map(|k| top * T::from_usize_lossy(k) / T::from_usize_lossy(k_max))
                    .collect()
            })
            .collect();
        Self {
            cumulative,
            alpha,
            samples: vec![0; num_heads],
            mean_warmup: false,
        }
    }

    /// Starts from explicit cumulative curves (one row per head).
    pub fn from_cumulative(cumulative: Vec<Vec<T>>, alpha: T) -> Result<Self, StatsError> {
        let k_max = cumulative.first().map_or(0, Vec::len);
        for (d, row) in cumulative.iter().enumerate() {
            if row.len() != k_max {
                return Err(StatsError::BadPrior(format!("head {} has {} ranks", d + 1, row.len())));
            }
            let mut prev = T::zero();
            for &v in row {
                if v < prev || v > T::one() {
                    return Err(StatsError::BadPrior(format!(
                        "head {} is not a non-decreasing curve in [0,1]",
                        d + 1
                    )));
                }
                prev = v;
            }
        }
        let heads = cumulative.len();
        Ok(Self {
            cumulative,
            alpha,
            samples: vec![0; heads],
            mean_warmup: false,
        })
    }

    /// Starts from per-rank marginals; each row is accumulated into a cumulative curve.
    pub fn from_marginals(marginals: &[Vec<T>], alpha: T) -> Result<Self, StatsError> {
        let cumulative = marginals
            .iter()
            .map(|row| {
                row.iter()
                    .scan(T::zero(), |acc, &p| {
                        *acc = *acc + p;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        Self::from_cumulative(cumulative, alpha)
    }

    /// While a head has seen fewer than `1/alpha` samples, use the running mean rate `1/n`
    /// instead of `alpha` so the prior washes out after the first observation.
    pub fn with_mean_warmup(mut self, enabled: bool) -> Self {
        self.mean_warmup = enabled;
        self
    }

    pub fn num_heads(&self) -> usize {
        self.cumulative.len()
    }

    pub fn k_max(&self) -> usize {
        self.cumulative.first().map_or(0, Vec::len)
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn sample_count(&self, depth: usize) -> u64 {
        self.samples[depth - 1]
    }

    /// `P[depth][rank]`, with `P[d][0] = 0`.
    pub fn cumulative(&self, depth: usize, rank: usize) -> T {
        if rank == 0 {
            T::zero()
        } else {
            self.cumulative[depth - 1][rank - 1]
        }
    }

    pub fn cumulative_rows(&self) -> &[Vec<T>] {
        &self.cumulative
    }

    /// Folds in the realized tokens for the depths whose ground truth is now known.
    pub fn update(&mut self, realized: &[(usize, TokenId)], predictions: &HeadPredictions) {
        for &(depth, token) in realized {
            if depth == 0 || depth > self.num_heads() {
                continue;
            }
            let hit_rank = predictions.rank_of(depth, token).unwrap_or(usize::MAX);
            let n = &mut self.samples[depth - 1];
            *n += 1;
            let rate = if self.mean_warmup {
                self.alpha.max(T::one() / T::from_u64(*n).expect("count"))
            } else {
                self.alpha
            };
            let keep = T::one() - rate;
            for (k, p) in self.cumulative[depth - 1].iter_mut().enumerate() {
                let hit = if hit_rank <= k + 1 { T::one() } else { T::zero() };
                *p = keep * *p + rate * hit;
            }
        }
    }

    pub fn marginal(&self, depth: usize, rank: usize) -> Result<T, StatsError> {
        if depth == 0 || depth > self.num_heads() {
            return Err(StatsError::DepthOutOfRange {
                depth,
                max: self.num_heads(),
            });
        }
        if rank == 0 || rank > self.k_max() {
            return Err(StatsError::RankOutOfRange {
                rank,
                max: self.k_max(),
            });
        }
        Ok(self.marginal_unchecked(depth, rank))
    }

    fn marginal_unchecked(&self, depth: usize, rank: usize) -> T {
        let v = self.cumulative(depth, rank) - self.cumulative(depth, rank - 1);
        v.max(T::zero())
    }

    /// Product of marginals along `(depth, rank)` steps; the empty path contributes 1.
    pub fn path_contribution(&self, path: &[(usize, usize)]) -> Result<T, StatsError> {
        path.iter()
            .try_fold(T::one(), |acc, &(d, k)| Ok(acc * self.marginal(d, k)?))
    }

    /// Sum of every node's path contribution.
    pub fn expected_tree_length(&self, tree: &TokenTree) -> Result<T, StatsError> {
        let mut contrib: Vec<T> = Vec::with_capacity(tree.len());
        for n in tree.nodes() {
            let parent = n.parent.map_or(T::one(), |p| contrib[p]);
            contrib.push(parent * self.marginal(n.depth, n.rank)?);
        }
        Ok(contrib.into_iter().sum())
    }

    /// Number of nodes in the full `k_max`-ary grid of depth `num_heads`.
    pub fn grid_capacity(&self) -> usize {
        grid_capacity(self.num_heads(), self.k_max())
    }

    /// For each requested size `i`, the `i` grid nodes with the largest path contributions
    /// and the sum of those contributions.
    ///
    /// Ties go to the shallower node, then to the lexicographically smaller rank path. A
    /// child never outranks its parent under that order, so every prefix of the ranking is
    /// ancestor-closed and a best-first walk from the root enumerates it.
    pub fn select_best_nodes(
        &self,
        sizes: &[usize],
    ) -> Result<BTreeMap<usize, Selection<T>>, StatsError> {
        let capacity = self.grid_capacity();
        let largest = sizes.iter().copied().max().unwrap_or(0);
        if largest > capacity {
            return Err(StatsError::SizeExceedsGrid {
                size: largest,
                capacity,
            });
        }
        let ranked = self.ranked_nodes(largest);
        let mut prefix = Vec::with_capacity(ranked.len() + 1);
        prefix.push(T::zero());
        for (_, w) in &ranked {
            let last = *prefix.last().expect("non-empty");
            prefix.push(last + *w);
        }
        Ok(sizes
            .iter()
            .map(|&s| {
                (
                    s,
                    Selection {
                        nodes: ranked[..s].to_vec(),
                        expected_length: prefix[s],
                    },
                )
            })
            .collect())
    }

    /// The best `size` nodes as tree-building input.
    pub fn select_best(&self, size: usize) -> Result<Selection<T>, StatsError> {
        Ok(self
            .select_best_nodes(&[size])?
            .remove(&size)
            .expect("requested size present"))
    }

    fn ranked_nodes(&self, count: usize) -> Vec<(RankPath, T)> {
        let mut heap = BinaryHeap::new();
        let k_max = self.k_max();
        let push_children = |heap: &mut BinaryHeap<Candidate<T>>, parent: &RankPath, weight: T| {
            let depth = parent.depth() + 1;
            if depth > self.num_heads() {
                return;
            }
            for rank in 1..=k_max {
                heap.push(Candidate {
                    weight: weight * self.marginal_unchecked(depth, rank),
                    path: parent.child(rank),
                });
            }
        };
        push_children(&mut heap, &RankPath::root(), T::one());
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let Some(best) = heap.pop() else { break };
            push_children(&mut heap, &best.path, best.weight);
            out.push((best.path, best.weight));
        }
        out
    }

    /// CSV rows `depth,rank,P,p`.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["depth", "rank", "P", "p"])?;
        for d in 1..=self.num_heads() {
            for k in 1..=self.k_max() {
                w.write_record([
                    d.to_string(),
                    k.to_string(),
                    self.cumulative(d, k).to_string(),
                    self.marginal_unchecked(d, k).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn grid_capacity(num_heads: usize, k_max: usize) -> usize {
    let mut total = 0usize;
    let mut level = 1usize;
    for _ in 0..num_heads {
        level = level.saturating_mul(k_max);
        total = total.saturating_add(level);
    }
    total
}

struct Candidate<T> {
    weight: T,
    path: RankPath,
}

impl<T: Real> Ord for Candidate<T> {
    // max-heap: larger weight first, then shallower, then smaller rank path
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight
            .partial_cmp(&other.weight)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.path.depth().cmp(&self.path.depth()))
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Real> Eq for Candidate<T> {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_tree::build_tree;

    fn preds(heads: &[&[u32]]) -> HeadPredictions {
        HeadPredictions::new(
            heads
                .iter()
                .map(|h| h.iter().enumerate().map(|(i, &t)| (TokenId(t), -(i as f64))).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn prior_is_cumulative() {
        let s = AcceptanceStats::<f64>::new(3, 4, 0.05);
        assert!((s.cumulative(1, 4) - 0.5).abs() < 1e-12);
        assert!((s.cumulative(2, 2) - 0.125).abs() < 1e-12);
        for d in 1..=3 {
            for k in 1..=4 {
                assert!(s.marginal(d, k).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn ema_hit_and_miss() {
        let mut s = AcceptanceStats::<f64>::from_cumulative(vec![vec![0.5, 0.6]], 0.1).unwrap();
        let p = preds(&[&[7, 8]]);
        s.update(&[(1, TokenId(7))], &p);
        assert!((s.cumulative(1, 1) - 0.55).abs() < 1e-12);
        assert!((s.cumulative(1, 2) - 0.64).abs() < 1e-12);
        s.update(&[(1, TokenId(99))], &p);
        assert!((s.cumulative(1, 1) - 0.495).abs() < 1e-12);
        assert!((s.cumulative(1, 2) - 0.576).abs() < 1e-12);
        assert_eq!(s.sample_count(1), 2);
    }

    #[test]
    fn unknown_depths_skipped() {
        let mut s = AcceptanceStats::<f64>::from_cumulative(vec![vec![0.5]], 0.1).unwrap();
        let before = s.clone();
        s.update(&[(2, TokenId(1)), (0, TokenId(1))], &preds(&[&[1]]));
        assert_eq!(s, before);
    }

    #[test]
    fn mean_warmup_replaces_prior() {
        let mut s = AcceptanceStats::<f64>::new(1, 2, 0.01).with_mean_warmup(true);
        let p = preds(&[&[1, 2]]);
        s.update(&[(1, TokenId(2))], &p);
        assert_eq!(s.cumulative(1, 1), 0.0);
        assert_eq!(s.cumulative(1, 2), 1.0);
        s.update(&[(1, TokenId(1))], &p);
        assert!((s.cumulative(1, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn marginals() {
        let s = AcceptanceStats::<f64>::from_cumulative(vec![vec![0.4, 0.55, 0.6]], 0.05).unwrap();
        let p: Vec<f64> = (1..=3).map(|k| s.marginal(1, k).unwrap()).collect();
        for (a, b) in p.iter().zip([0.4, 0.15, 0.05]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.marginal(1, 0).is_err());
        assert!(s.marginal(1, 4).is_err());
        assert!(s.marginal(2, 1).is_err());
        let z = AcceptanceStats::<f64>::from_cumulative(vec![vec![0.0, 0.0]], 0.05).unwrap();
        assert_eq!(z.marginal(1, 2).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_cumulative_prior() {
        assert!(AcceptanceStats::<f64>::from_cumulative(vec![vec![0.5, 0.4]], 0.1).is_err());
        assert!(AcceptanceStats::<f64>::from_cumulative(vec![vec![0.5, 1.4]], 0.1).is_err());
    }

    #[test]
    fn empty_path_contributes_one() {
        let s = AcceptanceStats::<f64>::new(2, 2, 0.05);
        assert_eq!(s.path_contribution(&[]).unwrap(), 1.0);
    }

    #[test]
    fn single_node_length() {
        let s = AcceptanceStats::<f64>::from_cumulative(vec![vec![0.7]], 0.05).unwrap();
        let t = build_tree(
            TokenId(0),
            &preds(&[&[3]]),
            &[SelectedNode::new(RankPath::new(vec![1]), 0.7)],
        )
        .unwrap();
        assert!((s.expected_tree_length(&t).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn best_nodes_small_grid() {
        // enumerated by hand: 0.8, 0.56, 0.16, 0.1, 0.07, 0.02
        let s = AcceptanceStats::<f64>::from_marginals(&[vec![0.8, 0.1], vec![0.7, 0.2]], 0.05).unwrap();
        let sel = s.select_best_nodes(&[1, 3, 6]).unwrap();
        assert_eq!(sel[&1].nodes[0].0, RankPath::new(vec![1]));
        let three: Vec<RankPath> = sel[&3].nodes.iter().map(|(p, _)| p.clone()).collect();
        assert_eq!(
            three,
            vec![RankPath::new(vec![1]), RankPath::new(vec![1, 1]), RankPath::new(vec![1, 2])]
        );
        assert!((sel[&3].expected_length - 1.52).abs() < 1e-12);
        assert!((sel[&6].expected_length - 1.71).abs() < 1e-12);
        assert!(matches!(
            s.select_best_nodes(&[7]),
            Err(StatsError::SizeExceedsGrid { size: 7, capacity: 6 })
        ));
    }

    #[test]
    fn ties_prefer_shallow_then_low_rank() {
        let s = AcceptanceStats::<f64>::from_marginals(&[vec![0.5, 0.5], vec![1.0, 0.0]], 0.05).unwrap();
        let sel = s.select_best(4).unwrap();
        let paths: Vec<String> = sel.nodes.iter().map(|(p, _)| p.to_string()).collect();
        assert_eq!(paths, vec!["[1]", "[2]", "[1,1]", "[2,1]"]);
    }

    #[test]
    fn csv_export() {
        let s = AcceptanceStats::<f64>::from_cumulative(vec![vec![0.5, 0.75]], 0.05).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "depth,rank,P,p\n1,1,0.5,0.5\n1,2,0.75,0.25\n");
    }

    #[test]
    fn capacity() {
        assert_eq!(grid_capacity(2, 2), 6);
        assert_eq!(grid_capacity(4, 3), 120);
        assert_eq!(grid_capacity(0, 5), 0);
    }

    #[test]
    fn rejects_unsorted_predictions() {
        let bad = HeadPredictions::new(vec![vec![(TokenId(1), 0.1), (TokenId(2), 0.5)]]);
        assert!(bad.is_err());
        let dup = HeadPredictions::new(vec![vec![(TokenId(1), 0.5), (TokenId(1), 0.1)]]);
        assert!(dup.is_err());
    }
}
