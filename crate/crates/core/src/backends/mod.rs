//! Model backends: drafting, a split tree forward with a pruning hook, and cache commit.

mod guided;
mod latency;
mod synthetic;
mod tiny;

pub use guided::GuidedDrafts;
pub use latency::{LatencyModel, SimClock};
pub use synthetic::{SyntheticConfig, SyntheticOracle, SyntheticState};
pub use tiny::{TinyConfig, TinyState, TinyTransformer};

use thiserror::Error;

use crate::acceptance_model::HeadPredictions;
use crate::token_tree::{TokenId, TokenTree, TreeError, TreeMask};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("context of {needed} positions exceeds the model limit {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("pruning hook returned an invalid survivor set: {0}")]
    BadSurvivors(#[source] TreeError),
    #[error("committed path is not a connected root-to-node chain")]
    BadPath,
    #[error("mask size {mask} does not match tree size {tree}")]
    MaskMismatch { mask: usize, tree: usize },
    #[error("tree root {tree} is not the last committed token {context}")]
    RootMismatch { tree: TokenId, context: TokenId },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

/// Receives the early head's Top-K successor lists (one per tree node) after
/// `layer` backbone layers and returns the ordered survivor indices.
pub struct PruneHook<'a> {
    pub layer: usize,
    pub topk: usize,
    pub decide: &'a mut dyn FnMut(&[Vec<TokenId>]) -> Vec<usize>,
}

/// Result of a tree forward. Nothing in the backend state changes until
/// [`ModelBackend::commit`] consumes it.
#[derive(Debug, Clone)]
pub struct TreeOutput<P> {
    /// Greedy successor of the committed context.
    pub root_argmax: TokenId,
    /// Surviving node indices of the input tree, ascending.
    pub survivors: Vec<usize>,
    /// Greedy successor of each survivor, aligned with `survivors`.
    pub argmax: Vec<TokenId>,
    /// Parent pointers of the pruned tree (indices into `survivors`).
    pub shape: Vec<Option<usize>>,
    pub tokens: Vec<TokenId>,
    pub pending: P,
}

impl<P> TreeOutput<P> {
    /// Accepted node indices (into the pruned tree) as a connected chain from depth 1.
    pub fn check_path(&self, accepted: &[usize]) -> Result<(), BackendError> {
        let mut parent = None;
        for &i in accepted {
            if i >= self.shape.len() || self.shape[i] != parent {
                return Err(BackendError::BadPath);
            }
            parent = Some(i);
        }
        Ok(())
    }
}

pub trait ModelBackend {
    type State: Clone;
    type Pending;

    fn vocab_size(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn num_draft_heads(&self) -> usize;

    /// Builds the state for `prompt`; its last token becomes the root of the first tree.
    fn prefill(&self, prompt: &[TokenId]) -> Result<Self::State, BackendError>;

    /// Every committed token, prompt included.
    fn context<'s>(&self, state: &'s Self::State) -> &'s [TokenId];

    /// Top-`k` candidates of each draft head for the positions after the root.
    fn draft(&self, state: &Self::State, k: usize) -> HeadPredictions;

    /// Runs the root plus the tree. With a hook, the layers after `hook.layer` run on the
    /// survivors only.
    fn forward_tree(
        &self,
        state: &Self::State,
        tree: &TokenTree,
        mask: &TreeMask,
        hook: Option<PruneHook<'_>>,
    ) -> Result<TreeOutput<Self::Pending>, BackendError>;

    /// Commits the accepted chain (indices into the pruned tree) followed by `bonus`.
    fn commit(
        &self,
        state: &mut Self::State,
        output: TreeOutput<Self::Pending>,
        accepted: &[usize],
        bonus: TokenId,
    ) -> Result<(), BackendError>;

    /// One plain greedy step; returns the committed token.
    fn greedy_step(&self, state: &mut Self::State) -> Result<TokenId, BackendError> {
        let root = *self.context(state).last().expect("non-empty context");
        let tree = TokenTree::empty(root);
        let mask = crate::token_tree::make_mask(&tree);
        let out = self.forward_tree(state, &tree, &mask, None)?;
        let next = out.root_argmax;
        self.commit(state, out, &[], next)?;
        Ok(next)
    }
}

pub(crate) fn check_root(tree: &TokenTree, context: &[TokenId]) -> Result<(), BackendError> {
    let last = *context.last().expect("non-empty context");
    if tree.root_token() != last {
        return Err(BackendError::RootMismatch {
            tree: tree.root_token(),
            context: last,
        });
    }
    Ok(())
}

/// Applies a hook's survivor list to `mask`, rejecting anything not ancestor-closed.
pub(crate) fn run_hook(
    hook: &mut PruneHook<'_>,
    lists: &[Vec<TokenId>],
    mask: &TreeMask,
) -> Result<(Vec<usize>, TreeMask), BackendError> {
    let survivors = (hook.decide)(lists);
    let sub = mask.subsample(&survivors).map_err(BackendError::BadSurvivors)?;
    Ok((survivors, sub))
}

/// Pruned-tree parents for `survivors`, assuming they are ancestor-closed.
pub(crate) fn pruned_shape(tree: &TokenTree, survivors: &[usize]) -> Vec<Option<usize>> {
    let mut remap = vec![usize::MAX; tree.len()];
    survivors
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            remap[old] = new;
            tree.node(old).parent.map(|p| remap[p])
        })
        .collect()
}

/// SplitMix64 finalizer; the synthetic models derive all their randomness from it.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn hash_tokens(seed: u64, tokens: &[TokenId]) -> u64 {
    tokens
        .iter()
        .fold(mix64(seed), |h, t| mix64(h ^ (u64::from(t.0) + 1)))
}
