//! Multi-head self-attention in three forms and the pre-norm transformer
//! block that hosts them.
//!
//! * vanilla: `softmax(QKᵀ/√d_k)V`
//! * graph-guided: the padded transferability graph scales the logits
//!   *before* the softmax, `softmax((QKᵀ ⊙ M)/√d_k)V`
//! * transferability-aware: the class-token row's attention weights are
//!   scaled by `[1; c]` *after* the softmax; patch rows stay vanilla
//!
//! Graphs and scores enter the tape as constants, so no gradient reaches
//! whatever produced them.

use rand::Rng;

use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, LayerNorm, Linear, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<()> {
        check_heads(dim, heads)?;
        for part in ["query", "key", "value", "out"] {
            Linear::init(store, &format!("{name}.{part}"), dim, dim, rng);
        }
        Ok(())
    }

    pub fn bind(bound: &Bound, name: &str, heads: usize) -> Result<Self> {
        Ok(AttentionParams {
            query: Linear::bind(bound, &format!("{name}.query"))?,
            key: Linear::bind(bound, &format!("{name}.key"))?,
            value: Linear::bind(bound, &format!("{name}.value"))?,
            out: Linear::bind(bound, &format!("{name}.out"))?,
            heads,
        })
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Which attention variant a layer runs.
#[derive(Clone, Copy, Debug)]
pub enum AttentionKind<'a, T> {
    Vanilla,
    /// Padded `(1+P)×(1+P)` graph, applied to pre-softmax logits.
    Graph(&'a Tensor<T>),
    /// `[n, P]` scores, applied to the class row's post-softmax weights.
    Transferability(&'a Tensor<T>),
}

/// `[n, T, d] → [n·H, T, d_k]`
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[n, t, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n * heads, t, d / heads])
}

/// `[n·H, T, d_k] → [n, T, d]`
fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dk) = (s[1], s[2]);
    let x = tape.reshape(x, &[n, heads, t, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n, t, heads * dk])
}

/// Post-softmax multiplier for the transferability-aware layer: ones
/// everywhere except the class row, which becomes `[1; c_i]`.
fn class_row_mask<T: Scalar>(scores: &Tensor<T>, n: usize, heads: usize, tokens: usize) -> Result<Tensor<T>> {
    if scores.shape() != [n, tokens - 1] {
        return Err(Error::invalid(
            "tsa",
            format!(
                "scores shape {:?} does not match {n} sequences of {} patches",
                scores.shape(),
                tokens - 1
            ),
        ));
    }
    let mut mask = Tensor::ones([n * heads, tokens, tokens]);
    let data = mask.data_mut();
    for i in 0..n {
        let row = &scores.data()[i * (tokens - 1)..(i + 1) * (tokens - 1)];
        for h in 0..heads {
            let base = (i * heads + h) * tokens * tokens;
            data[base + 1..base + tokens].copy_from_slice(row);
        }
    }
    Ok(mask)
}

/// Multi-head attention over `[n, T, d]` tokens (or a single `[T, d]`
/// sequence), returning the same shape.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &AttentionParams,
    kind: AttentionKind<'_, T>,
) -> Result<Var> {
    let in_shape = tape.shape(tokens).to_vec();
    let x = match in_shape.len() {
        2 => tape.reshape(tokens, &[1, in_shape[0], in_shape[1]])?,
        3 => tokens,
        _ => {
            return Err(Error::invalid(
                "attention",
                format!("tokens must be [T, d] or [n, T, d], got {in_shape:?}"),
            ))
        }
    };
    let s = tape.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let heads = params.heads;
    check_heads(d, heads)?;
    let inv_sqrt = T::one() / T::from_usize(d / heads).unwrap().sqrt();

    let q = params.query.forward(tape, x)?;
    let k = params.key.forward(tape, x)?;
    let v = params.value.forward(tape, x)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;

    let logits = tape.bmm(q, k, true)?;
    let weights = match kind {
        AttentionKind::Vanilla => {
            let scaled = tape.scale(logits, inv_sqrt);
            tape.softmax(scaled)
        }
        AttentionKind::Graph(graph) => {
            if graph.shape() != [t, t] {
                return Err(Error::invalid(
                    "tg_sa",
                    format!("graph shape {:?}, expected [{t}, {t}]", graph.shape()),
                ));
            }
            let m = tape.constant(graph.clone());
            let masked = tape.mul_broadcast(logits, m)?;
            let scaled = tape.scale(masked, inv_sqrt);
            tape.softmax(scaled)
        }
        AttentionKind::Transferability(scores) => {
            let mask = class_row_mask(scores, n, heads, t)?;
            let scaled = tape.scale(logits, inv_sqrt);
            let w = tape.softmax(scaled);
            let m = tape.constant(mask);
            tape.mul(w, m)?
        }
    };
    let ctx = tape.bmm(weights, v, false)?;
    let ctx = merge_heads(tape, ctx, n, heads)?;
    let out = params.out.forward(tape, ctx)?;
    if in_shape.len() == 2 {
        tape.reshape(out, &in_shape)
    } else {
        Ok(out)
    }
}

pub fn vanilla_mhsa<T: Scalar>(tape: &mut Tape<T>, tokens: Var, params: &AttentionParams) -> Result<Var> {
    multi_head_attention(tape, tokens, params, AttentionKind::Vanilla)
}

/// Graph-guided attention; `graph` is the padded `(1+P)×(1+P)` matrix.
pub fn tg_sa<T: Scalar>(tape: &mut Tape<T>, tokens: Var, params: &AttentionParams, graph: &Tensor<T>) -> Result<Var> {
    multi_head_attention(tape, tokens, params, AttentionKind::Graph(graph))
}

/// Transferability-aware attention for a single `(1+P)×d` sequence; returns
/// the class-token row (`d` values).
pub fn tsa<T: Scalar>(tape: &mut Tape<T>, tokens: Var, params: &AttentionParams, scores: &[T]) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 2 {
        return Err(Error::invalid("tsa", format!("expected [1+P, d] tokens, got {s:?}")));
    }
    if scores.len() + 1 != s[0] {
        return Err(Error::invalid(
            "tsa",
            format!("{} scores for {} patches", scores.len(), s[0] - 1),
        ));
    }
    let scores = Tensor::new([1, scores.len()], scores.to_vec())?;
    let out = multi_head_attention(tape, tokens, params, AttentionKind::Transferability(&scores))?;
    let row = tape.slice(out, 0, 0, 1)?;
    tape.reshape(row, &[s[1]])
}

/// Pre-norm transformer block parameters (MLP hidden width `4d`).
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl BlockParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<()> {
        LayerNorm::init(store, &format!("{name}.norm1"), dim);
        AttentionParams::init(store, &format!("{name}.attn"), dim, heads, rng)?;
        LayerNorm::init(store, &format!("{name}.norm2"), dim);
        Linear::init(store, &format!("{name}.fc1"), dim, MLP_RATIO * dim, rng);
        Linear::init(store, &format!("{name}.fc2"), MLP_RATIO * dim, dim, rng);
        Ok(())
    }

    pub fn bind(bound: &Bound, name: &str, heads: usize) -> Result<Self> {
        Ok(BlockParams {
            norm1: LayerNorm::bind(bound, &format!("{name}.norm1"))?,
            attn: AttentionParams::bind(bound, &format!("{name}.attn"), heads)?,
            norm2: LayerNorm::bind(bound, &format!("{name}.norm2"))?,
            fc1: Linear::bind(bound, &format!("{name}.fc1"))?,
            fc2: Linear::bind(bound, &format!("{name}.fc2"))?,
        })
    }
}

/// `ẑ = Attn(LN(z)) + z;  z' = MLP(LN(ẑ)) + ẑ`
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    params: &BlockParams,
    kind: AttentionKind<'_, T>,
) -> Result<Var> {
    let h = params.norm1.forward(tape, tokens)?;
    let h = multi_head_attention(tape, h, &params.attn, kind)?;
    let z = tape.add(h, tokens)?;
    let h = params.norm2.forward(tape, z)?;
    let h = params.fc1.forward(tape, h)?;
    let h = tape.gelu(h);
    let h = params.fc2.forward(tape, h)?;
    tape.add(h, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn_store(dim: usize, heads: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::init(&mut store, "a", dim, heads, &mut rng).unwrap();
        // larger weights than the 0.02 default so the softmax is far from uniform
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v *= 25.0;
            }
        }
        store
    }

    fn random_tokens(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn run(store: &ParamStore<f64>, heads: usize, x: &Tensor<f64>, kind: AttentionKind<'_, f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let p = AttentionParams::bind(&bound, "a", heads).unwrap();
        let xv = tape.constant(x.clone());
        let y = multi_head_attention(&mut tape, xv, &p, kind).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let store = attn_store(4, 2, 1);
        let x = random_tokens(&[1, 4], 2);
        let y = run(&store, 2, &x, AttentionKind::Vanilla);
        let lin = |w: &str, b: &str, v: &[f64]| -> Vec<f64> {
            let w = store.get(w).unwrap();
            let b = store.get(b).unwrap();
            (0..4)
                .map(|j| b.data()[j] + (0..4).map(|i| v[i] * w.at(&[i, j])).sum::<f64>())
                .collect()
        };
        let v = lin("a.value.weight", "a.value.bias", x.data());
        let want = lin("a.out.weight", "a.out.bias", &v);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let store = attn_store(8, 2, 3);
        let row = random_tokens(&[8], 4);
        let x = Tensor::from_fn([5, 8], |i| row.data()[i % 8]);
        let y = run(&store, 2, &x, AttentionKind::Vanilla);
        let first = y.rows().next().unwrap().to_vec();
        for r in y.rows() {
            assert_eq!(r, &first[..]);
        }
    }

    #[test]
    fn all_ones_graph_matches_vanilla_bitwise() {
        let store = attn_store(8, 2, 5);
        let x = random_tokens(&[2, 5, 8], 6);
        let ones = Tensor::ones([5, 5]);
        assert_eq!(
            run(&store, 2, &x, AttentionKind::Vanilla),
            run(&store, 2, &x, AttentionKind::Graph(&ones))
        );
    }

    #[test]
    fn unit_scores_match_vanilla_bitwise() {
        let store = attn_store(8, 2, 7);
        let x = random_tokens(&[2, 5, 8], 8);
        let ones = Tensor::ones([2, 4]);
        assert_eq!(
            run(&store, 2, &x, AttentionKind::Vanilla),
            run(&store, 2, &x, AttentionKind::Transferability(&ones))
        );
    }

    #[test]
    fn bad_graph_and_score_shapes_fail() {
        let store = attn_store(4, 2, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let p = AttentionParams::bind(&bound, "a", 2).unwrap();
        let x = tape.constant(random_tokens(&[3, 4], 1));
        let g = Tensor::ones([4, 4]);
        assert!(tg_sa(&mut tape, x, &p, &g).is_err());
        assert!(tsa(&mut tape, x, &p, &[1.0]).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionParams::init(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    fn block_store(dim: usize, heads: usize, blocks: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in 0..blocks {
            BlockParams::init(&mut store, &format!("b{b}"), dim, heads, &mut rng).unwrap();
        }
        store
    }

    #[test]
    fn zero_weights_block_is_identity() {
        let mut store = block_store(8, 2, 1, 0);
        let names: Vec<String> = store.names().to_vec();
        for n in names {
            if !n.ends_with(".scale") {
                let shape = store.get(&n).unwrap().shape().to_vec();
                store.insert(n, Tensor::zeros(shape));
            }
        }
        let x = random_tokens(&[2, 5, 8], 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let p = BlockParams::bind(&bound, "b0", 2).unwrap();
        let xv = tape.constant(x.clone());
        let y = transformer_block(&mut tape, xv, &p, AttentionKind::Vanilla).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn graph_block_with_ones_matches_vanilla_block_bitwise() {
        let store = block_store(8, 2, 1, 9);
        let x = random_tokens(&[3, 5, 8], 10);
        let ones = Tensor::ones([5, 5]);
        let mut out = Vec::new();
        for kind in [AttentionKind::Vanilla, AttentionKind::Graph(&ones)] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let p = BlockParams::bind(&bound, "b0", 2).unwrap();
            let xv = tape.constant(x.clone());
            let y = transformer_block(&mut tape, xv, &p, kind).unwrap();
            out.push(tape.value(y).clone());
        }
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn two_block_stack_passes_grad_check() {
        let store = block_store(4, 2, 2, 11);
        let x = random_tokens(&[2, 3, 4], 12);
        let graph = Tensor::from_f64([3, 3], &[1.0, 1.0, 1.0, 1.0, 0.6, 0.3, 1.0, 0.3, 0.9]).unwrap();
        let scores = Tensor::from_f64([2, 2], &[0.9, 0.4, 0.2, 0.7]).unwrap();
        let w = random_tokens(&[2, 3, 4], 13);
        let mut params = store.tensors().to_vec();
        params.push(x);
        let n = store.len();
        let report = grad_check(
            |tape, vars| {
                let bound = Bound::from_vars(&store, &vars[..n])?;
                let b0 = BlockParams::bind(&bound, "b0", 2)?;
                let b1 = BlockParams::bind(&bound, "b1", 2)?;
                let x = vars[vars.len() - 1];
                let h = transformer_block(tape, x, &b0, AttentionKind::Graph(&graph))?;
                let h = transformer_block(tape, h, &b1, AttentionKind::Transferability(&scores))?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(h, wv)?;
                Ok(tape.sum(p))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{}", report.max_rel_err);
    }
}
