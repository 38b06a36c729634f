//! Draft heads with a controlled hit rate on top of any backend.
//!
//! Seeded-random heads almost never guess right, so multi-token acceptance would go
//! untested on a real network. This wrapper computes the backend's own greedy
//! continuation and plants it into each head's list at rank `r` with probability
//! `q[d][r]`; everything else is delegated unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{hash_tokens, BackendError, ModelBackend, PruneHook, TreeOutput};
use crate::acceptance_model::HeadPredictions;
use crate::token_tree::{TokenId, TokenTree, TreeMask};

pub struct GuidedDrafts<B> {
    inner: B,
    q: Vec<Vec<f64>>,
    seed: u64,
}

impl<B: ModelBackend> GuidedDrafts<B> {
    pub fn new(inner: B, q: Vec<Vec<f64>>, seed: u64) -> Result<Self, BackendError> {
        if q.len() != inner.num_draft_heads() {
            return Err(BackendError::Config(format!(
                "expected {} q rows, got {}",
                inner.num_draft_heads(),
                q.len()
            )));
        }
        if q.iter().any(|row| row.iter().any(|p| !(0.0..=1.0).contains(p)) || row.iter().sum::<f64>() > 1.0 + 1e-9) {
            return Err(BackendError::Config("q rows must be probabilities summing to at most 1".into()));
        }
        Ok(Self { inner, q, seed })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ModelBackend> ModelBackend for GuidedDrafts<B> {
    type State = B::State;
    type Pending = B::Pending;

    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    fn num_draft_heads(&self) -> usize {
        self.inner.num_draft_heads()
    }

    fn prefill(&self, prompt: &[TokenId]) -> Result<B::State, BackendError> {
        self.inner.prefill(prompt)
    }

    fn context<'s>(&self, state: &'s B::State) -> &'s [TokenId] {
        self.inner.context(state)
    }

    fn draft(&self, state: &B::State, k: usize) -> HeadPredictions {
        let len = k.min(self.inner.vocab_size());
        // one spare candidate replaces the true token when a head leaves it out
        let base = self.inner.draft(state, len + 1);
        let mut scratch = state.clone();
        let truth: Vec<TokenId> = (0..self.q.len())
            .map(|_| self.inner.greedy_step(&mut scratch))
            .collect::<Result<_, _>>()
            .expect("greedy continuation within model limits");
        let mut rng = ChaCha8Rng::seed_from_u64(hash_tokens(self.seed, self.inner.context(state)));
        let heads = (1..=self.q.len())
            .map(|d| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let rank = self.q[d - 1].iter().position(|&p| {
                    acc += p;
                    u < acc
                });
                let t = truth[d - 1];
                let mut list: Vec<TokenId> = base.head(d).iter().map(|(x, _)| *x).filter(|x| *x != t).collect();
                match rank {
                    Some(r) if r < len => {
                        list.truncate(len - 1);
                        list.insert(r.min(list.len()), t);
                    }
                    _ => {
                        list.truncate(len);
                        if list.len() < len {
                            list.push(t);
                        }
                    }
                }
                list.into_iter()
                    .enumerate()
                    .map(|(i, x)| (x, 1.0 / (i + 1) as f64))
                    .collect()
            })
            .collect();
        HeadPredictions::new(heads).expect("distinct ranked lists")
    }

    fn forward_tree(
        &self,
        state: &B::State,
        tree: &TokenTree,
        mask: &TreeMask,
        hook: Option<PruneHook<'_>>,
    ) -> Result<TreeOutput<B::Pending>, BackendError> {
        self.inner.forward_tree(state, tree, mask, hook)
    }

    fn commit(
        &self,
        state: &mut B::State,
        output: TreeOutput<B::Pending>,
        accepted: &[usize],
        bonus: TokenId,
    ) -> Result<(), BackendError> {
        self.inner.commit(state, output, accepted, bonus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{TinyConfig, TinyTransformer};

    #[test]
    fn certain_heads_carry_the_continuation() {
        let tiny = TinyTransformer::<f64>::new(TinyConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab: 16,
            mlp_width: 8,
            max_positions: 32,
            draft_heads: 2,
            seed: 1,
        })
        .unwrap();
        let g = GuidedDrafts::new(tiny, vec![vec![0.0, 1.0], vec![1.0]], 5).unwrap();
        let s = g.prefill(&[TokenId(1), TokenId(2)]).unwrap();
        let mut probe = s.clone();
        let t1 = g.greedy_step(&mut probe).unwrap();
        let t2 = g.greedy_step(&mut probe).unwrap();
        let p = g.draft(&s, 3);
        assert_eq!(p.rank_of(1, t1), Some(2));
        assert_eq!(p.rank_of(2, t2), Some(1));
        assert_eq!(p.head(1).len(), 3);
    }

    #[test]
    fn rejects_wrong_head_count() {
        let tiny = TinyTransformer::<f64>::new(TinyConfig { draft_heads: 2, ..Default::default() }).unwrap();
        assert!(GuidedDrafts::new(tiny, vec![vec![1.0]], 0).is_err());
    }
}
