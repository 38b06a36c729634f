//! Candidate token trees and their tree-attention masks.
//!
//! A tree is a prefix-shared encoding of a set of drafted continuations. Every node is
//! addressed by its [`RankPath`]: the Top-k rank chosen at each draft head from depth 1
//! down to the node. Nodes are stored flattened in depth-major order (parent before child,
//! siblings by ascending rank), which makes the ancestor mask lower-triangular and turns
//! pruning into a pure row/column gather over that mask.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::acceptance_model::HeadPredictions;

/// A vocabulary entry. The vocabulary bound is owned by whichever backend produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("node {0} has no parent in the selection (selection is not ancestor-closed)")]
    NotAncestorClosed(String),
    #[error("depth {depth} exceeds the number of draft heads {max}")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("rank {rank} at depth {depth} exceeds the head's Top-{max} list")]
    RankOutOfRange { depth: usize, rank: usize, max: usize },
    #[error("duplicate node {0}")]
    Duplicate(String),
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("survivor list is not a strictly increasing index list within 0..{0}")]
    BadSurvivors(usize),
    #[error("survivor {0} is kept while one of its ancestors is dropped")]
    SurvivorsNotClosed(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Ranks (1-based) picked at heads `1..=depth` to reach a node of the draft grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RankPath(Vec<usize>);

impl RankPath {
    pub fn new(ranks: Vec<usize>) -> Self {
        Self(ranks)
    }

    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn last_rank(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn parent(&self) -> Option<RankPath> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn child(&self, rank: usize) -> RankPath {
        let mut v = self.0.clone();
        v.push(rank);
        Self(v)
    }

    /// `(depth, rank)` pairs along the path, depth starting at 1.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().enumerate().map(|(i, &r)| (i + 1, r))
    }
}

impl fmt::Display for RankPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_char('[')?;
        for (i, r) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_char(',')?;
            }
            write!(f, "{r}")?;
        }
        f.write_char(']')
    }
}

/// One grid node chosen for the tree, with its expected-acceptance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedNode {
    pub path: RankPath,
    pub weight: f64,
}

impl SelectedNode {
    pub fn new(path: RankPath, weight: f64) -> Self {
        Self { path, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    /// `None` means the committed root token.
    pub parent: Option<usize>,
    pub depth: usize,
    pub rank: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTree {
    nodes: Vec<TreeNode>,
    root_token: TokenId,
}

const WEIGHT_SLACK: f64 = 1e-12;

impl TokenTree {
    /// Builds a tree from raw nodes, checking every structural invariant.
    pub fn from_nodes(root_token: TokenId, nodes: Vec<TreeNode>) -> Result<Self, TreeError> {
        let tree = Self { nodes, root_token };
        tree.validate()?;
        Ok(tree)
    }

    pub fn empty(root_token: TokenId) -> Self {
        Self {
            nodes: Vec::new(),
            root_token,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_token(&self) -> TokenId {
        self.root_token
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Parent pointers only; two trees with the same shape share a mask.
    pub fn shape(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.parent).collect()
    }

    pub fn children(&self, parent: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == parent)
            .map(|(i, _)| i)
    }

    /// Node indices from depth 1 down to `i`, inclusive.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    pub fn path_tokens(&self, i: usize) -> Vec<TokenId> {
        self.path_to(i).into_iter().map(|j| self.nodes[j].token).collect()
    }

    /// `(depth, rank)` steps of the path ending at `i`.
    pub fn path_steps(&self, i: usize) -> Vec<(usize, usize)> {
        self.path_to(i)
            .into_iter()
            .map(|j| (self.nodes[j].depth, self.nodes[j].rank))
            .collect()
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let mut seen: HashMap<(Option<usize>, TokenId), usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent_depth = match n.parent {
                None => 0,
                Some(p) if p < i => {
                    let parent = &self.nodes[p];
                    if n.weight > parent.weight + WEIGHT_SLACK {
                        return Err(TreeError::Invalid(format!(
                            "node {i} weight {} exceeds parent weight {}",
                            n.weight, parent.weight
                        )));
                    }
                    parent.depth
                }
                Some(p) => {
                    return Err(TreeError::Invalid(format!(
                        "node {i} has parent {p} that is not earlier in the order"
                    )))
                }
            };
            if n.depth != parent_depth + 1 {
                return Err(TreeError::Invalid(format!(
                    "node {i} depth {} but parent depth {parent_depth}",
                    n.depth
                )));
            }
            if n.rank == 0 {
                return Err(TreeError::Invalid(format!("node {i} has rank 0")));
            }
            if !(0.0..=1.0 + WEIGHT_SLACK).contains(&n.weight) {
                return Err(TreeError::Invalid(format!("node {i} weight {} outside [0,1]", n.weight)));
            }
            if let Some(j) = seen.insert((n.parent, n.token), i) {
                return Err(TreeError::Duplicate(format!(
                    "nodes {j} and {i} share parent and token {}",
                    n.token
                )));
            }
        }
        Ok(())
    }

    /// Keeps only `survivors`, remapping parent pointers. The list must be strictly
    /// increasing and ancestor-closed.
    pub fn retain(&self, survivors: &[usize]) -> Result<TokenTree, TreeError> {
        check_survivor_order(survivors, self.len())?;
        let mut remap = vec![None; self.len()];
        let mut nodes = Vec::with_capacity(survivors.len());
        for (new, &old) in survivors.iter().enumerate() {
            let n = &self.nodes[old];
            let parent = match n.parent {
                None => None,
                Some(p) => Some(remap[p].ok_or(TreeError::SurvivorsNotClosed(old))?),
            };
            remap[old] = Some(new);
            nodes.push(TreeNode { parent, ..n.clone() });
        }
        Ok(TokenTree {
            nodes,
            root_token: self.root_token,
        })
    }

    /// Root-to-leaf token sequences, one per leaf, in depth-first order.
    pub fn flatten_paths(&self) -> Vec<Vec<TokenId>> {
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); self.len() + 1];
        for (i, n) in self.nodes.iter().enumerate() {
            kids[n.parent.map_or(0, |p| p + 1)].push(i);
        }
        let mut out = Vec::new();
        let mut stack: Vec<usize> = kids[0].iter().rev().copied().collect();
        while let Some(i) = stack.pop() {
            if kids[i + 1].is_empty() {
                out.push(self.path_tokens(i));
            } else {
                stack.extend(kids[i + 1].iter().rev());
            }
        }
        out
    }

    /// Line format: `root <token>` header, then `index token parent depth rank weight`
    /// per node with `-` for a root parent.
    pub fn to_text(&self) -> String {
        let mut out = format!("root {}\n", self.root_token);
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(out, "{i} {} {parent} {} {} {}", n.token, n.depth, n.rank, n.weight);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TokenTree, TreeError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let parse_err = |line: usize, msg: &str| TreeError::Parse {
            line,
            msg: msg.to_string(),
        };
        let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing root header"))?;
        let root_token = header
            .strip_prefix("root ")
            .and_then(|t| t.trim().parse::<u32>().ok())
            .map(TokenId)
            .ok_or_else(|| parse_err(hline, "expected `root <token>`"))?;
        let mut nodes = Vec::new();
        for (line, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 6 {
                return Err(parse_err(line, "expected 6 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(line, "bad integer"));
            if num(f[0])? != nodes.len() {
                return Err(parse_err(line, "node indices must be consecutive from 0"));
            }
            let parent = if f[2] == "-" { None } else { Some(num(f[2])?) };
            let token = f[1].parse::<u32>().map_err(|_| parse_err(line, "bad token"))?;
            let weight = f[5].parse::<f64>().map_err(|_| parse_err(line, "bad weight"))?;
            nodes.push(TreeNode {
                token: TokenId(token),
                parent,
                depth: num(f[3])?,
                rank: num(f[4])?,
                weight,
            });
        }
        TokenTree::from_nodes(root_token, nodes)
    }
}

fn check_survivor_order(survivors: &[usize], n: usize) -> Result<(), TreeError> {
    let increasing = survivors.windows(2).all(|w| w[0] < w[1]);
    if !increasing || survivors.last().is_some_and(|&l| l >= n) {
        return Err(TreeError::BadSurvivors(n));
    }
    Ok(())
}

/// Builds the tree for `selection` using the tokens in `predictions`.
///
/// Nodes are emitted depth-major with siblings by ascending rank, which is the
/// lexicographic order of their rank paths within each depth.
pub fn build_tree(
    root_token: TokenId,
    predictions: &HeadPredictions,
    selection: &[SelectedNode],
) -> Result<TokenTree, TreeError> {
    let mut order: Vec<&SelectedNode> = selection.iter().collect();
    order.sort_by(|a, b| {
        a.path
            .depth()
            .cmp(&b.path.depth())
            .then_with(|| a.path.cmp(&b.path))
    });

    let mut index: HashMap<&RankPath, usize> = HashMap::with_capacity(order.len());
    let mut nodes = Vec::with_capacity(order.len());
    for sel in order {
        let depth = sel.path.depth();
        if depth == 0 {
            return Err(TreeError::Invalid("empty rank path".into()));
        }
        if depth > predictions.num_heads() {
            return Err(TreeError::DepthOutOfRange {
                depth,
                max: predictions.num_heads(),
            });
        }
        let rank = sel.path.last_rank().expect("non-empty path");
        let head = predictions.head(depth);
        if rank == 0 || rank > head.len() {
            return Err(TreeError::RankOutOfRange {
                depth,
                rank,
                max: head.len(),
            });
        }
        let parent = match sel.path.parent() {
            Some(pp) if pp.depth() > 0 => Some(
                *index
                    .get(&pp)
                    .ok_or_else(|| TreeError::NotAncestorClosed(sel.path.to_string()))?,
            ),
            _ => None,
        };
        if index.insert(&sel.path, nodes.len()).is_some() {
            return Err(TreeError::Duplicate(sel.path.to_string()));
        }
        nodes.push(TreeNode {
            token: head[rank - 1].0,
            parent,
            depth,
            rank,
            weight: sel.weight,
        });
    }
    TokenTree::from_nodes(root_token, nodes)
}

/// Ancestor-visibility matrix over the flattened tree, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMask {
    n: usize,
    bits: Vec<bool>,
}

impl TreeMask {
    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "mask must be square");
        Self {
            n,
            bits: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    /// Visible columns of row `i` in ascending order.
    pub fn visible(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    /// Gathers `survivors` rows and columns. Fails unless the survivor list is strictly
    /// increasing and closed under the ancestor relation encoded by the mask.
    pub fn subsample(&self, survivors: &[usize]) -> Result<TreeMask, TreeError> {
        check_survivor_order(survivors, self.n)?;
        let mut keep = vec![false; self.n];
        for &s in survivors {
            keep[s] = true;
        }
        for &s in survivors {
            if self.visible(s).any(|j| !keep[j]) {
                return Err(TreeError::SurvivorsNotClosed(s));
            }
        }
        let m = survivors.len();
        let mut bits = Vec::with_capacity(m * m);
        for &r in survivors {
            let row = self.row(r);
            bits.extend(survivors.iter().map(|&c| row[c]));
        }
        Ok(TreeMask { n: m, bits })
    }

    /// One line per row of `0`/`1` characters.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            out.extend(self.row(i).iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

/// Row `i` is true exactly at `i` and at every ancestor of `i`.
pub fn make_mask(tree: &TokenTree) -> TreeMask {
    let n = tree.len();
    let mut bits = vec![false; n * n];
    for i in 0..n {
        // parents precede children, so the parent's row is already complete
        if let Some(p) = tree.node(i).parent {
            let (done, rest) = bits.split_at_mut(i * n);
            rest[..n].copy_from_slice(&done[p * n..(p + 1) * n]);
        }
        bits[i * n + i] = true;
    }
    TreeMask { n, bits }
}

pub fn subsample_mask(mask: &TreeMask, survivors: &[usize]) -> Result<TreeMask, TreeError> {
    mask.subsample(survivors)
}

/// Masks keyed by tree shape; pruned masks are gathered from the cached full mask.
#[derive(Debug, Default)]
pub struct MaskCache {
    masks: HashMap<Vec<Option<usize>>, TreeMask>,
    builds: usize,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, tree: &TokenTree) -> &TreeMask {
        let builds = &mut self.builds;
        self.masks.entry(tree.shape()).or_insert_with(|| {
            *builds += 1;
            make_mask(tree)
        })
    }

    /// Number of masks built from scratch so far.
    pub fn builds(&self) -> usize {
        self.builds
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(heads: &[&[u32]]) -> HeadPredictions {
        HeadPredictions::new(
            heads
                .iter()
                .map(|h| {
                    h.iter()
                        .enumerate()
                        .map(|(i, &t)| (TokenId(t), 1.0 / (i + 1) as f64))
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    fn sel(paths: &[&[usize]]) -> Vec<SelectedNode> {
        paths
            .iter()
            .map(|p| SelectedNode::new(RankPath::new(p.to_vec()), 1.0))
            .collect()
    }

    // tokens: a=0 b=1 c=2 d=3 e=4 f=5; head1 [a, f], head2 [b, c], head3 [d, e]
    fn fig5_tree() -> TokenTree {
        let p = preds(&[&[0, 5], &[1, 2], &[3, 4]]);
        build_tree(TokenId(9), &p, &sel(&[&[1], &[1, 1], &[1, 1, 1], &[1, 2]])).unwrap()
    }

    fn letters(paths: Vec<Vec<TokenId>>) -> Vec<String> {
        paths
            .into_iter()
            .map(|p| p.into_iter().map(|t| (b'a' + t.0 as u8) as char).collect())
            .collect()
    }

    #[test]
    fn chain_is_a_path() {
        let p = preds(&[&[0, 1], &[2, 3], &[4, 5]]);
        let t = build_tree(TokenId(7), &p, &sel(&[&[1], &[1, 1], &[1, 1, 1]])).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.shape(), vec![None, Some(0), Some(1)]);
        let m = make_mask(&t);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn full_grid_two_by_two() {
        let p = preds(&[&[0, 1], &[2, 3]]);
        let t = build_tree(TokenId(7), &p, &sel(&[&[1], &[2], &[1, 1], &[1, 2], &[2, 1], &[2, 2]])).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.shape(), vec![None, None, Some(0), Some(0), Some(1), Some(1)]);
        assert_eq!(t.flatten_paths().len(), 4);
    }

    #[test]
    fn fig5_tree_layout() {
        let t = fig5_tree();
        let toks: Vec<u32> = t.nodes().iter().map(|n| n.token.0).collect();
        assert_eq!(toks, vec![0, 1, 2, 3]); // a b c d
        assert_eq!(letters(t.flatten_paths()), vec!["abd", "ac"]);
        let m = make_mask(&t);
        let rows: Vec<Vec<usize>> = (0..4).map(|i| m.visible(i).collect()).collect();
        assert_eq!(rows, vec![vec![0], vec![0, 1], vec![0, 2], vec![0, 1, 3]]);
    }

    #[test]
    fn input_order_does_not_matter() {
        let p = preds(&[&[0, 5], &[1, 2], &[3, 4]]);
        let t = build_tree(TokenId(9), &p, &sel(&[&[1, 2], &[1, 1, 1], &[1], &[1, 1]])).unwrap();
        assert_eq!(t, fig5_tree());
    }

    #[test]
    fn rejects_bad_selections() {
        let p = preds(&[&[0, 1], &[2, 3]]);
        assert!(matches!(
            build_tree(TokenId(7), &p, &sel(&[&[1, 1]])),
            Err(TreeError::NotAncestorClosed(_))
        ));
        assert!(matches!(
            build_tree(TokenId(7), &p, &sel(&[&[1], &[1, 1], &[1, 1, 1]])),
            Err(TreeError::DepthOutOfRange { depth: 3, max: 2 })
        ));
        assert!(matches!(
            build_tree(TokenId(7), &p, &sel(&[&[3]])),
            Err(TreeError::RankOutOfRange { rank: 3, .. })
        ));
        assert!(matches!(
            build_tree(TokenId(7), &p, &sel(&[&[1], &[1]])),
            Err(TreeError::Duplicate(_))
        ));
    }

    #[test]
    fn empty_tree() {
        let t = TokenTree::empty(TokenId(1));
        assert_eq!(make_mask(&t).size(), 0);
        assert!(t.flatten_paths().is_empty());
    }

    #[test]
    fn subsample_identity_and_empty() {
        let t = fig5_tree();
        let m = make_mask(&t);
        assert_eq!(m.subsample(&[0, 1, 2, 3]).unwrap(), m);
        assert_eq!(m.subsample(&[]).unwrap().size(), 0);
    }

    #[test]
    fn subsample_drop_leaf_matches_rebuild() {
        let t = fig5_tree();
        let m = make_mask(&t);
        let sub = m.subsample(&[0, 1, 2]).unwrap();
        assert_eq!(sub, make_mask(&t.retain(&[0, 1, 2]).unwrap()));
        assert_eq!(sub.size(), 3);
    }

    #[test]
    fn subsample_rejects_orphans() {
        let m = make_mask(&fig5_tree());
        assert_eq!(m.subsample(&[0, 3]), Err(TreeError::SurvivorsNotClosed(3)));
        assert_eq!(m.subsample(&[1, 0]), Err(TreeError::BadSurvivors(4)));
        assert!(fig5_tree().retain(&[2, 3]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = fig5_tree();
        let text = t.to_text();
        assert!(text.starts_with("root 9\n0 0 - 1 1 1\n"));
        assert_eq!(TokenTree::from_text(&text).unwrap(), t);
        assert_eq!(make_mask(&t).to_text(), "1000\n1100\n1010\n1101\n");
        let err = TokenTree::from_text("root 1\n0 2 - 1\n").unwrap_err();
        assert_eq!(err, TreeError::Parse { line: 2, msg: "expected 6 fields".into() });
    }

    #[test]
    fn mask_cache_reuses_shapes() {
        let mut cache = MaskCache::new();
        let t = fig5_tree();
        let a = cache.get(&t).clone();
        let p = preds(&[&[7, 8], &[9, 10], &[11, 12]]);
        let t2 = build_tree(TokenId(0), &p, &sel(&[&[1], &[1, 1], &[1, 1, 1], &[1, 2]])).unwrap();
        assert_eq!(cache.get(&t2), &a);
        assert_eq!(cache.builds(), 1);
    }

    #[test]
    fn validate_catches_weight_growth() {
        let nodes = vec![
            TreeNode { token: TokenId(1), parent: None, depth: 1, rank: 1, weight: 0.5 },
            TreeNode { token: TokenId(2), parent: Some(0), depth: 2, rank: 1, weight: 0.6 },
        ];
        assert!(TokenTree::from_nodes(TokenId(0), nodes).is_err());
    }
}
