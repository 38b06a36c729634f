//! Mid-forward Top-K pruning.
//!
//! After the first `prune_layer` backbone layers an early head predicts, for every tree
//! node, its Top-K successors. A child whose token is not among its parent's early Top-K is
//! dropped together with its whole subtree before the remaining layers run. Depth-1 nodes
//! hang off the committed token, which has no early prediction in the tree, and always stay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token_tree::{TokenId, TokenTree, TreeError, TreeMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Backbone layers run on the full tree before pruning.
    pub prune_layer: usize,
    pub prune_topk: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            prune_layer: 4,
            prune_topk: 50,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, num_layers: usize, vocab: usize) -> Result<(), String> {
        if self.prune_layer == 0 || self.prune_layer >= num_layers {
            return Err(format!(
                "prune_layer {} must lie in 1..{num_layers}",
                self.prune_layer
            ));
        }
        if self.prune_topk == 0 || self.prune_topk > vocab {
            return Err(format!("prune_topk {} must lie in 1..={vocab}", self.prune_topk));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruneError {
    #[error("probability-threshold pruning is not supported; use Top-K")]
    Unsupported,
    #[error("expected {expected} early prediction lists, got {got}")]
    ListCount { expected: usize, got: usize },
}

/// Which test decides that a branch is implausible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneCriterion {
    TopK,
    /// Cumulative path probability below a threshold. Kept as an interface only; the
    /// probability transfer it needs costs more than the pruning saves.
    ProbabilityThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneDecision {
    pub survivors: Vec<usize>,
    pub prune_rate: f64,
}

impl PruneDecision {
    pub fn keep_all(n: usize) -> Self {
        Self {
            survivors: (0..n).collect(),
            prune_rate: 0.0,
        }
    }
}

/// Top-K pruning. `early_topk[i]` lists the early head's ranked successors for node `i`;
/// only the first `prune_topk` entries count.
pub fn prune(
    tree: &TokenTree,
    early_topk: &[Vec<TokenId>],
    config: &PruneConfig,
) -> Result<PruneDecision, PruneError> {
    prune_with(tree, early_topk, config, PruneCriterion::TopK)
}

pub fn prune_with(
    tree: &TokenTree,
    early_topk: &[Vec<TokenId>],
    config: &PruneConfig,
    criterion: PruneCriterion,
) -> Result<PruneDecision, PruneError> {
    if let PruneCriterion::ProbabilityThreshold(_) = criterion {
        return Err(PruneError::Unsupported);
    }
    if early_topk.len() != tree.len() {
        return Err(PruneError::ListCount {
            expected: tree.len(),
            got: early_topk.len(),
        });
    }
    let mut alive = vec![false; tree.len()];
    for (j, node) in tree.nodes().iter().enumerate() {
        alive[j] = match node.parent {
            None => true,
            Some(i) => {
                let k = config.prune_topk.min(early_topk[i].len());
                alive[i] && early_topk[i][..k].contains(&node.token)
            }
        };
    }
    let survivors: Vec<usize> = (0..tree.len()).filter(|&i| alive[i]).collect();
    let prune_rate = if tree.is_empty() {
        0.0
    } else {
        1.0 - survivors.len() as f64 / tree.len() as f64
    };
    Ok(PruneDecision {
        survivors,
        prune_rate,
    })
}

/// Pruned tree plus the cached mask gathered down to the survivors.
pub fn apply_decision(
    tree: &TokenTree,
    mask: &TreeMask,
    decision: &PruneDecision,
) -> Result<(TokenTree, TreeMask), TreeError> {
    let sub = mask.subsample(&decision.survivors)?;
    let pruned = tree.retain(&decision.survivors)?;
    Ok((pruned, sub))
}
