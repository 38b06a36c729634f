//! Greedy tree verification.

use serde::Serialize;

use crate::token_tree::{TokenId, TokenTree};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyResult {
    /// Node indices of the accepted path, depth 1 first.
    pub accepted: Vec<usize>,
    /// The model's argmax after the last accepted node (or after the root).
    pub bonus: TokenId,
}

impl VerifyResult {
    pub fn accepted_length(&self) -> usize {
        self.accepted.len()
    }

    /// Accepted tokens followed by the bonus token.
    pub fn committed_tokens(&self, tree: &TokenTree) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = self.accepted.iter().map(|&i| tree.node(i).token).collect();
        out.push(self.bonus);
        out
    }
}

/// Walks down from the root, each step taking the child whose token equals the model's
/// argmax at the current position. `argmax[i]` is the model's greedy successor of node `i`.
pub fn verify(tree: &TokenTree, argmax: &[TokenId], root_argmax: TokenId) -> VerifyResult {
    debug_assert_eq!(argmax.len(), tree.len());
    let mut accepted = Vec::new();
    let mut at = None;
    let mut want = root_argmax;
    // sibling tokens are distinct, so at most one child can match
    while let Some(next) = tree.children(at).find(|&c| tree.node(c).token == want) {
        accepted.push(next);
        at = Some(next);
        want = argmax[next];
    }
    VerifyResult { accepted, bonus: want }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acceptance_model::HeadPredictions;
    use crate::token_tree::{build_tree, RankPath, SelectedNode};

    fn tree(heads: &[&[u32]], paths: &[&[usize]]) -> TokenTree {
        let p = HeadPredictions::new(
            heads
                .iter()
                .map(|h| h.iter().map(|&t| (TokenId(t), 0.0)).collect())
                .collect(),
        )
        .unwrap();
        let sel: Vec<SelectedNode> = paths
            .iter()
            .map(|r| SelectedNode::new(RankPath::new(r.to_vec()), 1.0))
            .collect();
        build_tree(TokenId(100), &p, &sel).unwrap()
    }

    #[test]
    fn no_match_is_one_autoregressive_step() {
        let t = tree(&[&[1, 2]], &[&[1], &[2]]);
        let r = verify(&t, &[TokenId(0), TokenId(0)], TokenId(7));
        assert_eq!(r.accepted_length(), 0);
        assert_eq!(r.bonus, TokenId(7));
        assert_eq!(r.committed_tokens(&t), vec![TokenId(7)]);
    }

    #[test]
    fn chain_accepts_two_then_bonus() {
        // a=1, b=2; argmax(a)=b, argmax(b)=z=26
        let t = tree(&[&[1], &[2]], &[&[1], &[1, 1]]);
        let r = verify(&t, &[TokenId(2), TokenId(26)], TokenId(1));
        assert_eq!(r.accepted, vec![0, 1]);
        assert_eq!(r.bonus, TokenId(26));
        assert_eq!(r.committed_tokens(&t).len(), 3);
    }

    #[test]
    fn follows_the_matching_branch() {
        // head1 [1, 2], head2 [3, 4]; full grid
        let t = tree(&[&[1, 2], &[3, 4]], &[&[1], &[2], &[1, 1], &[1, 2], &[2, 1], &[2, 2]]);
        // root argmax 2 -> node 1; argmax(node 1) = 4 -> node 5 (path [2,2]); then 9
        let mut argmax = vec![TokenId(0); 6];
        argmax[1] = TokenId(4);
        argmax[5] = TokenId(9);
        let r = verify(&t, &argmax, TokenId(2));
        assert_eq!(r.accepted, vec![1, 5]);
        assert_eq!(r.bonus, TokenId(9));
    }

    #[test]
    fn empty_tree() {
        let t = TokenTree::empty(TokenId(3));
        let r = verify(&t, &[], TokenId(5));
        assert_eq!(r, VerifyResult { accepted: vec![], bonus: TokenId(5) });
    }
}
