//! A stochastic stand-in model with known head accuracies.
//!
//! The "true" greedy successor of any context is a seeded hash of that context. Draft head
//! `d` puts the true token at offset `d` at rank `r` with probability `q[d][r]` and leaves
//! it out otherwise; the early head lists the true successor first with probability
//! `early_quality`. Every random draw is keyed by a context hash, so runs are reproducible
//! and independent of iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_root, hash_tokens, mix64, pruned_shape, run_hook, BackendError, ModelBackend, PruneHook, TreeOutput};
use crate::acceptance_model::HeadPredictions;
use crate::token_tree::{TokenId, TokenTree, TreeMask};

const SALT_NEXT: u64 = 0x6e65_7874;
const SALT_DRAFT: u64 = 0x6472_6166_7400;
const SALT_EARLY: u64 = 0x6561_726c_7900;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub vocab: usize,
    pub layers: usize,
    /// Per draft head, the probability that the true token sits at rank `1, 2, ...`.
    pub q: Vec<Vec<f64>>,
    /// Probability that the early head lists the true successor; one value for every
    /// layer, or one value per layer starting at layer 1.
    pub early_quality: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab: 1024,
            layers: 32,
            q: vec![
                vec![0.60, 0.12, 0.06],
                vec![0.40, 0.10, 0.05],
                vec![0.30, 0.08, 0.04],
                vec![0.20, 0.06, 0.03],
            ],
            early_quality: vec![0.95],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab < 2 || self.vocab > u32::MAX as usize {
            return Err("vocab must be at least 2".into());
        }
        if self.layers < 2 {
            return Err("layers must be at least 2".into());
        }
        if self.q.is_empty() {
            return Err("q needs at least one draft head".into());
        }
        for (d, row) in self.q.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || total > 1.0 + 1e-9 {
                return Err(format!("q[{d}] must be probabilities summing to at most 1"));
            }
            if row.len() > self.vocab {
                return Err(format!("q[{d}] lists more ranks than the vocabulary"));
            }
        }
        if self.early_quality.is_empty()
            || self.early_quality.iter().any(|&p| !(0.0..=1.0).contains(&p))
        {
            return Err("early_quality must hold probabilities".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticState {
    tokens: Vec<TokenId>,
    hash: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    cfg: SyntheticConfig,
}

fn extend(hash: u64, t: TokenId) -> u64 {
    mix64(hash ^ (u64::from(t.0) + 1))
}

impl SyntheticOracle {
    pub fn new(cfg: SyntheticConfig) -> Result<Self, BackendError> {
        cfg.validate().map_err(BackendError::Config)?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    fn next_of(&self, hash: u64) -> TokenId {
        TokenId((mix64(hash ^ SALT_NEXT) % self.cfg.vocab as u64) as u32)
    }

    /// The true greedy successor of `context`.
    pub fn true_next(&self, context: &[TokenId]) -> TokenId {
        self.next_of(hash_tokens(self.cfg.seed, context))
    }

    /// The next `n` greedy tokens after the committed context.
    pub fn continuation(&self, state: &SyntheticState, n: usize) -> Vec<TokenId> {
        let mut h = state.hash;
        (0..n)
            .map(|_| {
                let t = self.next_of(h);
                h = extend(h, t);
                t
            })
            .collect()
    }

    /// Ground-truth cumulative curves `P*[d][k] = sum_{r <= k} q[d][r]`.
    pub fn true_cumulative(&self, k_max: usize) -> Vec<Vec<f64>> {
        self.cfg
            .q
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                (0..k_max)
                    .map(|r| {
                        acc += row.get(r).copied().unwrap_or(0.0);
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    pub fn early_quality(&self, layer: usize) -> f64 {
        let q = &self.cfg.early_quality;
        if q.len() == 1 {
            q[0]
        } else {
            q[layer.clamp(1, q.len()) - 1]
        }
    }

    /// Fills `out` up to `len` with distinct random tokens, never using `skip`.
    fn fill_random(&self, rng: &mut ChaCha8Rng, out: &mut Vec<TokenId>, len: usize, skip: TokenId) {
        let v = self.cfg.vocab;
        let mut used = vec![false; v];
        used[skip.index()] = true;
        for t in out.iter() {
            used[t.index()] = true;
        }
        let free = used.iter().filter(|u| !**u).count();
        let len = len.min(out.len() + free);
        while out.len() < len {
            let t = rng.gen_range(0..v);
            if !used[t] {
                used[t] = true;
                out.push(TokenId(t as u32));
            }
        }
    }

    /// Early head Top-`k` successors for the context with hash `hash`. Lists for a
    /// smaller `k` are prefixes of lists for a larger one.
    pub fn early_topk(&self, hash: u64, layer: usize, k: usize) -> Vec<TokenId> {
        let v = self.cfg.vocab;
        if k >= v {
            return (0..v as u32).map(TokenId).collect();
        }
        let truth = self.next_of(hash);
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(hash ^ SALT_EARLY));
        let mut out = Vec::with_capacity(k);
        if rng.gen::<f64>() < self.early_quality(layer) {
            out.push(truth);
        }
        self.fill_random(&mut rng, &mut out, k, truth);
        out
    }
}

impl ModelBackend for SyntheticOracle {
    type State = SyntheticState;
    type Pending = ();

    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    fn num_draft_heads(&self) -> usize {
        self.cfg.q.len()
    }

    fn prefill(&self, prompt: &[TokenId]) -> Result<SyntheticState, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if let Some(&t) = prompt.iter().find(|t| t.index() >= self.cfg.vocab) {
            return Err(BackendError::TokenOutOfRange {
                token: t,
                vocab: self.cfg.vocab,
            });
        }
        Ok(SyntheticState {
            tokens: prompt.to_vec(),
            hash: hash_tokens(self.cfg.seed, prompt),
        })
    }

    fn context<'s>(&self, state: &'s SyntheticState) -> &'s [TokenId] {
        &state.tokens
    }

    fn draft(&self, state: &SyntheticState, k: usize) -> HeadPredictions {
        let k = k.min(self.cfg.vocab);
        let truth = self.continuation(state, self.cfg.q.len());
        let heads = self
            .cfg
            .q
            .iter()
            .enumerate()
            .map(|(d, q)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix64(state.hash ^ SALT_DRAFT ^ ((d as u64 + 1) << 40)));
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let rank = q.iter().position(|&p| {
                    acc += p;
                    u < acc
                });
                let mut list = Vec::with_capacity(k);
                self.fill_random(&mut rng, &mut list, k.saturating_sub(1), truth[d]);
                match rank {
                    Some(r) if r < k => list.insert(r, truth[d]),
                    _ => self.fill_random(&mut rng, &mut list, k, truth[d]),
                }
                list.into_iter()
                    .enumerate()
                    .map(|(i, t)| (t, 1.0 / (i + 1) as f64))
                    .collect()
            })
            .collect();
        HeadPredictions::new(heads).expect("distinct ranked lists")
    }

    fn forward_tree(
        &self,
        state: &SyntheticState,
        tree: &TokenTree,
        mask: &TreeMask,
        hook: Option<PruneHook<'_>>,
    ) -> Result<TreeOutput<()>, BackendError> {
        if mask.size() != tree.len() {
            return Err(BackendError::MaskMismatch {
                mask: mask.size(),
                tree: tree.len(),
            });
        }
        check_root(tree, &state.tokens)?;
        let mut hashes = Vec::with_capacity(tree.len());
        for node in tree.nodes() {
            if node.token.index() >= self.cfg.vocab {
                return Err(BackendError::TokenOutOfRange {
                    token: node.token,
                    vocab: self.cfg.vocab,
                });
            }
            let parent = node.parent.map_or(state.hash, |p| hashes[p]);
            hashes.push(extend(parent, node.token));
        }
        let survivors = match hook {
            None => (0..tree.len()).collect(),
            Some(mut hook) => {
                let lists: Vec<Vec<TokenId>> = hashes
                    .iter()
                    .map(|&h| self.early_topk(h, hook.layer, hook.topk))
                    .collect();
                run_hook(&mut hook, &lists, mask)?.0
            }
        };
        Ok(TreeOutput {
            root_argmax: self.next_of(state.hash),
            argmax: survivors.iter().map(|&i| self.next_of(hashes[i])).collect(),
            shape: pruned_shape(tree, &survivors),
            tokens: survivors.iter().map(|&i| tree.node(i).token).collect(),
            survivors,
            pending: (),
        })
    }

    fn commit(
        &self,
        state: &mut SyntheticState,
        output: TreeOutput<()>,
        accepted: &[usize],
        bonus: TokenId,
    ) -> Result<(), BackendError> {
        output.check_path(accepted)?;
        for t in accepted.iter().map(|&i| output.tokens[i]).chain([bonus]) {
            state.tokens.push(t);
            state.hash = extend(state.hash, t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_tree::{build_tree, make_mask, RankPath, SelectedNode};

    fn oracle(q: Vec<Vec<f64>>, early: f64) -> SyntheticOracle {
        SyntheticOracle::new(SyntheticConfig {
            vocab: 64,
            layers: 8,
            q,
            early_quality: vec![early],
            seed: 3,
        })
        .unwrap()
    }

    fn chain(depth: usize) -> Vec<SelectedNode> {
        (1..=depth)
            .map(|d| SelectedNode::new(RankPath::new(vec![1; d]), 1.0))
            .collect()
    }

    #[test]
    fn perfect_heads_draft_the_continuation() {
        let o = oracle(vec![vec![1.0]; 3], 1.0);
        let s = o.prefill(&[TokenId(1), TokenId(2)]).unwrap();
        let p = o.draft(&s, 2);
        let truth = o.continuation(&s, 3);
        for d in 1..=3 {
            assert_eq!(p.head(d)[0].0, truth[d - 1]);
            assert_eq!(p.head(d).len(), 2);
        }
        let tree = build_tree(TokenId(2), &p, &chain(3)).unwrap();
        let out = o.forward_tree(&s, &tree, &make_mask(&tree), None).unwrap();
        assert_eq!(out.root_argmax, truth[0]);
        assert_eq!(out.argmax[..2], truth[1..]);
    }

    #[test]
    fn zero_heads_never_list_the_truth() {
        let o = oracle(vec![vec![0.0, 0.0]; 2], 1.0);
        let s = o.prefill(&[TokenId(5)]).unwrap();
        for _ in 0..20 {
            let p = o.draft(&s, 4);
            let truth = o.continuation(&s, 2);
            assert_eq!(p.rank_of(1, truth[0]), None);
            assert_eq!(p.rank_of(2, truth[1]), None);
        }
    }

    #[test]
    fn early_lists_nest_in_k() {
        let o = oracle(vec![vec![0.5]], 0.5);
        for h in 0..50u64 {
            let small = o.early_topk(h, 2, 5);
            let big = o.early_topk(h, 2, 20);
            assert_eq!(small.len(), 5);
            assert_eq!(&big[..5], &small[..]);
        }
        assert_eq!(o.early_topk(9, 2, 64).len(), 64);
    }

    #[test]
    fn commit_advances_truth() {
        let o = oracle(vec![vec![1.0]; 2], 1.0);
        let mut s = o.prefill(&[TokenId(1)]).unwrap();
        let truth = o.continuation(&s, 3);
        let p = o.draft(&s, 1);
        let tree = build_tree(TokenId(1), &p, &chain(2)).unwrap();
        let out = o.forward_tree(&s, &tree, &make_mask(&tree), None).unwrap();
        let bonus = out.argmax[1];
        o.commit(&mut s, out, &[0, 1], bonus).unwrap();
        assert_eq!(&o.context(&s)[1..], &truth[..]);
        assert_eq!(o.prefill(o.context(&s)).unwrap(), s);
    }

    #[test]
    fn config_checks() {
        let mut c = SyntheticConfig::default();
        assert!(c.validate().is_ok());
        c.q[0] = vec![0.9, 0.2];
        assert!(c.validate().is_err());
        let c = SyntheticConfig { early_quality: vec![], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn per_layer_quality() {
        let o = SyntheticOracle::new(SyntheticConfig {
            early_quality: vec![0.1, 0.2, 0.3],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(o.early_quality(2), 0.2);
        assert_eq!(o.early_quality(10), 0.3);
    }
}
