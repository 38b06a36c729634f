//! A small pre-norm decoder-only transformer with seeded random weights.
//!
//! It exists for exactness tests: every row of a tree forward attends to the committed
//! cache plus its visible tree rows, in position order, with the same arithmetic a plain
//! sequential decode performs. Tree logits therefore match per-path sequential logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_root, pruned_shape, run_hook, BackendError, ModelBackend, PruneHook, TreeOutput};
use crate::acceptance_model::HeadPredictions;
use crate::scalar::Real;
use crate::token_tree::{TokenId, TokenTree, TreeMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub mlp_width: usize,
    pub max_positions: usize,
    pub draft_heads: usize,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            heads: 4,
            vocab: 256,
            mlp_width: 128,
            max_positions: 512,
            draft_heads: 4,
            seed: 0,
        }
    }
}

struct Layer<T> {
    norm_attn: Vec<T>,
    wq: Vec<T>,
    wk: Vec<T>,
    wv: Vec<T>,
    wo: Vec<T>,
    norm_mlp: Vec<T>,
    w_up: Vec<T>,
    w_down: Vec<T>,
}

pub struct TinyTransformer<T: Real> {
    cfg: TinyConfig,
    embed: Vec<T>,
    pos: Vec<T>,
    layers: Vec<Layer<T>>,
    norm_final: Vec<T>,
    lm_head: Vec<T>,
    early_head: Vec<T>,
    early_bias: Vec<T>,
    draft_w: Vec<Vec<T>>,
    draft_b: Vec<Vec<T>>,
}

#[derive(Clone)]
pub struct TinyState<T: Real> {
    tokens: Vec<TokenId>,
    /// Per layer, `hidden` values per cached position. Covers every token but the last.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    /// Final-layer hidden state of the token before the root; input of the draft heads.
    draft_hidden: Vec<T>,
}

impl<T: Real> TinyState<T> {
    pub fn cached_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Per-row cache material of the root and the survivors, in that order.
pub struct TinyPending<T> {
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    hidden: Vec<Vec<T>>,
}

struct RowsOut<T> {
    active: Vec<usize>,
    survivors: Vec<usize>,
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    hidden: Vec<Vec<T>>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.gen_range(-scale..scale))).collect()
}

/// `x (1×rows) · w (rows×cols)`, accumulating over `rows` in ascending order.
fn matvec<T: Real>(x: &[T], w: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o = *o + xi * wij;
        }
    }
    out
}

fn rms_norm<T: Real>(x: &[T], gain: &[T]) -> Vec<T> {
    let ms = x.iter().map(|&v| v * v).sum::<T>() / T::from_usize_lossy(x.len());
    let inv = T::one() / (ms + T::lit(1e-6)).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn silu<T: Real>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

/// Indices of the `k` largest scores; ties go to the lower index.
fn top_k<T: Real>(scores: &[T], k: usize) -> Vec<(usize, T)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

fn argmax<T: Real>(scores: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

impl<T: Real> TinyTransformer<T> {
    pub fn new(cfg: TinyConfig) -> Result<Self, BackendError> {
        if cfg.layers < 2 || cfg.hidden == 0 || cfg.heads == 0 || cfg.hidden % cfg.heads != 0 {
            return Err(BackendError::Config(
                "need layers >= 2 and hidden divisible by heads".into(),
            ));
        }
        if cfg.vocab < 2 || cfg.vocab > u32::MAX as usize || cfg.max_positions < 2 {
            return Err(BackendError::Config("vocab and max_positions must be >= 2".into()));
        }
        let (h, v, f) = (cfg.hidden, cfg.vocab, cfg.mlp_width);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lin = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let embed = uniform(&mut rng, v * h, 1.0);
        let pos = uniform(&mut rng, cfg.max_positions * h, 0.5);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                norm_attn: vec![T::one(); h],
                wq: uniform(&mut rng, h * h, lin(h)),
                wk: uniform(&mut rng, h * h, lin(h)),
                wv: uniform(&mut rng, h * h, lin(h)),
                wo: uniform(&mut rng, h * h, lin(h)),
                norm_mlp: vec![T::one(); h],
                w_up: uniform(&mut rng, h * f, lin(h)),
                w_down: uniform(&mut rng, f * h, lin(f)),
            })
            .collect();
        let lm_head = uniform(&mut rng, h * v, lin(h));
        let early_head = uniform(&mut rng, h * v, lin(h));
        let early_bias = uniform(&mut rng, v, 0.1);
        let draft_w = (0..cfg.draft_heads)
            .map(|_| uniform(&mut rng, h * v, lin(h)))
            .collect();
        let draft_b = (0..cfg.draft_heads).map(|_| uniform(&mut rng, v, 0.1)).collect();
        Ok(Self {
            norm_final: vec![T::one(); h],
            cfg,
            embed,
            pos,
            layers,
            lm_head,
            early_head,
            early_bias,
            draft_w,
            draft_b,
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    fn input_row(&self, token: TokenId, position: usize) -> Vec<T> {
        let h = self.cfg.hidden;
        let e = &self.embed[token.index() * h..(token.index() + 1) * h];
        let p = &self.pos[position * h..(position + 1) * h];
        e.iter().zip(p).map(|(&a, &b)| a + b).collect()
    }

    fn logits(&self, hidden: &[T]) -> Vec<T> {
        matvec(&rms_norm(hidden, &self.norm_final), &self.lm_head, self.cfg.vocab)
    }

    fn check_token(&self, t: TokenId) -> Result<(), BackendError> {
        if t.index() >= self.cfg.vocab {
            Err(BackendError::TokenOutOfRange {
                token: t,
                vocab: self.cfg.vocab,
            })
        } else {
            Ok(())
        }
    }

    /// Runs `tokens` at `positions` on top of `cache`. `visible[r]` lists the rows that
    /// row `r` attends to (ascending, including `r`). With a hook, rows `1..` are tree
    /// nodes and row 0 the root; after `hook.layer` layers only the root and the
    /// surviving nodes continue.
    fn run_rows(
        &self,
        cache: Option<&TinyState<T>>,
        tokens: &[TokenId],
        positions: &[usize],
        visible: &[Vec<usize>],
        mut hook: Option<(PruneHook<'_>, &TreeMask)>,
    ) -> Result<RowsOut<T>, BackendError> {
        let (h, nh) = (self.cfg.hidden, self.cfg.heads);
        let dh = h / nh;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let rows = tokens.len();
        let cached = cache.map_or(0, TinyState::cached_len);

        let mut x: Vec<Vec<T>> = tokens
            .iter()
            .zip(positions)
            .map(|(&t, &p)| self.input_row(t, p))
            .collect();
        let mut keys = vec![vec![Vec::new(); rows]; self.cfg.layers];
        let mut values = vec![vec![Vec::new(); rows]; self.cfg.layers];
        let mut active: Vec<usize> = (0..rows).collect();
        let mut survivors: Vec<usize> = (0..rows.saturating_sub(1)).collect();

        for (li, layer) in self.layers.iter().enumerate() {
            if let Some((hook, mask)) = hook.as_mut().filter(|(hk, _)| hk.layer == li) {
                let k = hook.topk.min(self.cfg.vocab);
                let lists: Vec<Vec<TokenId>> = x[1..]
                    .iter()
                    .map(|row| {
                        let mut s = matvec(&rms_norm(row, &self.norm_final), &self.early_head, self.cfg.vocab);
                        for (v, b) in s.iter_mut().zip(&self.early_bias) {
                            *v = *v + *b;
                        }
                        top_k(&s, k).into_iter().map(|(i, _)| TokenId(i as u32)).collect()
                    })
                    .collect();
                let (kept, _) = run_hook(hook, &lists, mask)?;
                active = std::iter::once(0).chain(kept.iter().map(|&i| i + 1)).collect();
                survivors = kept;
            }

            let mut queries = vec![Vec::new(); rows];
            for &r in &active {
                let n = rms_norm(&x[r], &layer.norm_attn);
                queries[r] = matvec(&n, &layer.wq, h);
                keys[li][r] = matvec(&n, &layer.wk, h);
                values[li][r] = matvec(&n, &layer.wv, h);
            }
            let (ck, cv) = match cache {
                Some(c) => (&c.keys[li][..], &c.values[li][..]),
                None => (&[][..], &[][..]),
            };
            for &r in &active {
                let mut attn = vec![T::zero(); h];
                for head in 0..nh {
                    let span = head * dh..(head + 1) * dh;
                    let q = &queries[r][span.clone()];
                    let dot = |k: &[T]| q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    // cached positions first, then visible tree rows, both in position order
                    let mut scores = Vec::with_capacity(cached + visible[r].len());
                    for p in 0..cached {
                        scores.push(dot(&ck[p * h + span.start..p * h + span.end]));
                    }
                    for &j in &visible[r] {
                        scores.push(dot(&keys[li][j][span.clone()]));
                    }
                    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let weights: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
                    let total: T = weights.iter().copied().sum();
                    let out = &mut attn[span.clone()];
                    let mut wi = weights.iter();
                    for p in 0..cached {
                        let w = *wi.next().expect("weight") / total;
                        for (o, &v) in out.iter_mut().zip(&cv[p * h + span.start..p * h + span.end]) {
                            *o = *o + w * v;
                        }
                    }
                    for &j in &visible[r] {
                        let w = *wi.next().expect("weight") / total;
                        for (o, &v) in out.iter_mut().zip(&values[li][j][span.clone()]) {
                            *o = *o + w * v;
                        }
                    }
                }
                let proj = matvec(&attn, &layer.wo, h);
                let mut y: Vec<T> = x[r].iter().zip(&proj).map(|(&a, &b)| a + b).collect();
                let n = rms_norm(&y, &layer.norm_mlp);
                let up: Vec<T> = matvec(&n, &layer.w_up, self.cfg.mlp_width)
                    .into_iter()
                    .map(silu)
                    .collect();
                let down = matvec(&up, &layer.w_down, h);
                for (a, b) in y.iter_mut().zip(&down) {
                    *a = *a + *b;
                }
                x[r] = y;
            }
        }
        Ok(RowsOut {
            keys: keys
                .into_iter()
                .map(|l| active.iter().map(|&r| l[r].clone()).collect())
                .collect(),
            values: values
                .into_iter()
                .map(|l| active.iter().map(|&r| l[r].clone()).collect())
                .collect(),
            hidden: active.iter().map(|&r| x[r].clone()).collect(),
            active,
            survivors,
        })
    }

    /// Tree forward that also returns the full logits of the root and of every survivor.
    pub fn forward_tree_logits(
        &self,
        state: &TinyState<T>,
        tree: &TokenTree,
        mask: &TreeMask,
        hook: Option<PruneHook<'_>>,
    ) -> Result<(TreeOutput<TinyPending<T>>, Vec<Vec<T>>), BackendError> {
        if mask.size() != tree.len() {
            return Err(BackendError::MaskMismatch {
                mask: mask.size(),
                tree: tree.len(),
            });
        }
        check_root(tree, &state.tokens)?;
        let base = state.tokens.len() - 1;
        let needed = base + tree.max_depth() + 1;
        if needed > self.cfg.max_positions {
            return Err(BackendError::ContextOverflow {
                needed,
                limit: self.cfg.max_positions,
            });
        }
        let mut tokens = vec![tree.root_token()];
        let mut positions = vec![base];
        let mut visible = vec![vec![0]];
        for (i, node) in tree.nodes().iter().enumerate() {
            self.check_token(node.token)?;
            tokens.push(node.token);
            positions.push(base + node.depth);
            visible.push(std::iter::once(0).chain(mask.visible(i).map(|j| j + 1)).collect());
        }
        let out = self.run_rows(Some(state), &tokens, &positions, &visible, hook.map(|h| (h, mask)))?;
        let logits: Vec<Vec<T>> = out.hidden.iter().map(|x| self.logits(x)).collect();
        let argmaxes: Vec<TokenId> = logits.iter().map(|l| argmax(l)).collect();
        let output = TreeOutput {
            root_argmax: argmaxes[0],
            argmax: argmaxes[1..].to_vec(),
            shape: pruned_shape(tree, &out.survivors),
            tokens: out.survivors.iter().map(|&i| tree.node(i).token).collect(),
            survivors: out.survivors,
            pending: TinyPending {
                keys: out.keys,
                values: out.values,
                hidden: out.hidden,
            },
        };
        debug_assert_eq!(out.active.len(), output.survivors.len() + 1);
        Ok((output, logits))
    }

    /// Logits for the token after the committed context.
    pub fn next_logits(&self, state: &TinyState<T>) -> Result<Vec<T>, BackendError> {
        let tree = TokenTree::empty(*state.tokens.last().expect("non-empty"));
        let mask = crate::token_tree::make_mask(&tree);
        let (_, mut logits) = self.forward_tree_logits(state, &tree, &mask, None)?;
        Ok(logits.swap_remove(0))
    }
}

impl<T: Real> ModelBackend for TinyTransformer<T> {
    type State = TinyState<T>;
    type Pending = TinyPending<T>;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    fn num_draft_heads(&self) -> usize {
        self.cfg.draft_heads
    }

    fn prefill(&self, prompt: &[TokenId]) -> Result<TinyState<T>, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if prompt.len() > self.cfg.max_positions {
            return Err(BackendError::ContextOverflow {
                needed: prompt.len(),
                limit: self.cfg.max_positions,
            });
        }
        for &t in prompt {
            self.check_token(t)?;
        }
        let body = &prompt[..prompt.len() - 1];
        let positions: Vec<usize> = (0..body.len()).collect();
        let visible: Vec<Vec<usize>> = (0..body.len()).map(|r| (0..=r).collect()).collect();
        let out = self.run_rows(None, body, &positions, &visible, None)?;
        let h = self.cfg.hidden;
        let flat = |rows: Vec<Vec<Vec<T>>>| -> Vec<Vec<T>> {
            rows.into_iter().map(|l| l.into_iter().flatten().collect()).collect()
        };
        Ok(TinyState {
            tokens: prompt.to_vec(),
            keys: flat(out.keys),
            values: flat(out.values),
            draft_hidden: out.hidden.last().cloned().unwrap_or_else(|| vec![T::zero(); h]),
        })
    }

    fn context<'s>(&self, state: &'s TinyState<T>) -> &'s [TokenId] {
        &state.tokens
    }

    fn draft(&self, state: &TinyState<T>, k: usize) -> HeadPredictions {
        let n = rms_norm(&state.draft_hidden, &self.norm_final);
        let heads = self
            .draft_w
            .iter()
            .zip(&self.draft_b)
            .map(|(w, b)| {
                let mut s = matvec(&n, w, self.cfg.vocab);
                for (v, bi) in s.iter_mut().zip(b) {
                    *v = *v + *bi;
                }
                top_k(&s, k.min(self.cfg.vocab))
                    .into_iter()
                    .map(|(i, v)| (TokenId(i as u32), v.as_f64()))
                    .collect()
            })
            .collect();
        HeadPredictions::new(heads).expect("top-k lists are sorted and distinct")
    }

    fn forward_tree(
        &self,
        state: &TinyState<T>,
        tree: &TokenTree,
        mask: &TreeMask,
        hook: Option<PruneHook<'_>>,
    ) -> Result<TreeOutput<TinyPending<T>>, BackendError> {
        self.forward_tree_logits(state, tree, mask, hook).map(|(o, _)| o)
    }

    fn commit(
        &self,
        state: &mut TinyState<T>,
        output: TreeOutput<TinyPending<T>>,
        accepted: &[usize],
        bonus: TokenId,
    ) -> Result<(), BackendError> {
        output.check_path(accepted)?;
        self.check_token(bonus)?;
        let needed = state.tokens.len() + accepted.len() + 1;
        if needed > self.cfg.max_positions {
            return Err(BackendError::ContextOverflow {
                needed,
                limit: self.cfg.max_positions,
            });
        }
        let rows: Vec<usize> = std::iter::once(0).chain(accepted.iter().map(|&i| i + 1)).collect();
        let TinyPending { keys, values, hidden } = output.pending;
        for (li, (lk, lv)) in keys.iter().zip(&values).enumerate() {
            for &r in &rows {
                state.keys[li].extend_from_slice(&lk[r]);
                state.values[li].extend_from_slice(&lv[r]);
            }
        }
        state.tokens.extend(accepted.iter().map(|&i| output.tokens[i]));
        state.tokens.push(bonus);
        state.draft_hidden = hidden[*rows.last().expect("root row")].clone();
        Ok(())
    }
}
