//! Attention strategies over per-head projections.
//!
//! Four strategies are provided: full causal attention, windowed local
//! attention (with two window semantics), local attention augmented with
//! summarized non-local chunks, and a layerwise schedule that places one
//! global layer at the start of each group of `L` layers.
//!
//! The windowed strategy has a naive reference path (masked full attention)
//! and a blockwise kernel that pads the sequence to a multiple of the
//! window, pairs each block with its predecessor, and runs batched
//! contractions; the two agree exactly under the block-banded semantics.
//!
//! All entry points count the multiply-accumulates of the score and context
//! contractions over admissible (unmasked) pairs into [`Graph::attn_macs`]:
//! two fused multiply-adds of `head_dim` width per admissible pair per head.

use crate::graph::{Graph, NodeId};
use crate::posenc::{alibi_bias, AlibiParams};
use crate::tensor::{DType, Tensor};

/// Which keys a windowed query may see.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LocalSemantics {
    /// Query `i` sees keys `max(0, i-w+1) ..= i`: exactly `w` keys
    /// including itself once the ramp-up ends.
    SlidingWindow,
    /// Query `i` in block `b = i / w` sees blocks `b-1` and `b` up to `i`;
    /// between `w+1` and `2w` keys. This is what the blockwise kernel
    /// computes and the training default.
    BlockBanded,
}

/// Model-level attention strategy.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum AttnKind {
    Global,
    Local { window: usize },
    GlobalApprox { window: usize, chunk: usize },
    Group { group_size: usize, window: usize },
}

/// Attention actually run by a single layer after the schedule is applied.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum LayerAttn {
    Global,
    Local {
        window: usize,
        semantics: LocalSemantics,
    },
    GlobalApprox {
        window: usize,
        chunk: usize,
        logit_compensation: bool,
    },
}

/// Layer role within a grouped schedule.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LayerKind {
    GlobalLayer,
    LocalLayer,
}

/// Global at the first layer of each group of `group_size`, local elsewhere.
pub fn layer_kind(layer: usize, group_size: usize) -> LayerKind {
    assert!(group_size >= 1, "group size must be >= 1");
    if layer.is_multiple_of(group_size) {
        LayerKind::GlobalLayer
    } else {
        LayerKind::LocalLayer
    }
}

/// Per-layer global/local assignment for a grouped stack.
#[derive(Clone, Debug)]
pub struct GroupSchedule {
    pub group_size: usize,
    pub kinds: Vec<LayerKind>,
}

impl GroupSchedule {
    pub fn new(n_layers: usize, group_size: usize) -> GroupSchedule {
        let kinds = (0..n_layers).map(|l| layer_kind(l, group_size)).collect();
        GroupSchedule { group_size, kinds }
    }

    pub fn n_global(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| **k == LayerKind::GlobalLayer)
            .count()
    }
}

/// Per-position validity flags (padding mask).
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub valid: Vec<bool>,
}

impl AttnMask {
    pub fn all_valid(n: usize) -> AttnMask {
        AttnMask {
            valid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Similarity of a query/key pair: `exp(q . k / sqrt(d_norm))`.
///
/// Implementations keep logits and exponentiate inside the softmax; the
/// contract is on the resulting probabilities.
pub fn sim(q: &[f64], k: &[f64], d_norm: f64) -> f64 {
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    (dot / d_norm.sqrt()).exp()
}

/// Project hidden states `[n, d]` into per-head queries, keys, and values
/// `[n, heads, head_dim]` with `q_i = Wq^T h_i` and likewise for k, v.
pub fn qkv_project(
    g: &mut Graph,
    h: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    n_heads: usize,
) -> (NodeId, NodeId, NodeId) {
    let n = g.value(h).shape()[0];
    let mut project = |w: NodeId| {
        let d_attn = g.value(w).shape()[1];
        assert_eq!(
            d_attn % n_heads,
            0,
            "projection width {} not divisible by {} heads",
            d_attn,
            n_heads
        );
        let flat = g.matmul(h, w);
        g.reshape(flat, vec![n, n_heads, d_attn / n_heads])
    };
    (project(wq), project(wk), project(wv))
}

// ── admissibility masks ─────────────────────────────────────────────────

fn base_mask(n: usize, valid: &AttnMask, admit: impl Fn(usize, usize) -> bool) -> Tensor {
    assert_eq!(valid.len(), n, "validity mask length vs sequence length");
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        if !valid.valid[i] {
            continue; // invalid queries attend nothing; their output is discarded
        }
        for j in 0..=i {
            if valid.valid[j] && admit(i, j) {
                data[i * n + j] = 1.0;
            }
        }
    }
    Tensor::from_vec(vec![n, n], data, DType::F64)
}

/// Causal mask: query `i` admits keys `0..=i`.
pub fn causal_mask(n: usize, valid: &AttnMask) -> Tensor {
    base_mask(n, valid, |_, _| true)
}

/// Sliding-window mask: query `i` admits keys `max(0, i-w+1)..=i`.
pub fn sliding_window_mask(n: usize, w: usize, valid: &AttnMask) -> Tensor {
    assert!(w >= 1, "window must be >= 1");
    base_mask(n, valid, |i, j| j + w > i)
}

/// Block-banded mask: query `i` in block `b = i/w` admits keys from block
/// `b-1` onward, up to `i`.
pub fn block_banded_mask(n: usize, w: usize, valid: &AttnMask) -> Tensor {
    assert!(w >= 1, "window must be >= 1");
    base_mask(n, valid, |i, j| j / w + 1 >= i / w)
}

fn mask_popcount(mask: &Tensor) -> u128 {
    mask.data().iter().filter(|&&m| m != 0.0).count() as u128
}

// ── shared core ─────────────────────────────────────────────────────────

/// Scaled dot-product attention of `q: [n, H, hd]` over `k, v: [m, H, hd]`
/// under an `[n, m]` admissibility mask, with an optional additive logit
/// bias `[H, n, m]`. Softmax normalizes over admissible keys only; rows
/// with no admissible key (invalid queries) come out zero.
fn attention_over(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    admissible: &Tensor,
    bias: Option<&Tensor>,
) -> NodeId {
    let (n, heads, hd) = {
        let s = g.value(q).shape();
        (s[0], s[1], s[2])
    };
    let m = g.value(k).shape()[0];
    assert_eq!(admissible.shape(), &[n, m], "admissibility mask shape");

    let qh = g.permute(q, &[1, 0, 2]); // [H, n, hd]
    let kh = g.permute(k, &[1, 2, 0]); // [H, hd, m]
    let s = g.matmul(qh, kh); // [H, n, m]
    let s = g.scale(s, 1.0 / (hd as f64).sqrt());
    let s = match bias {
        Some(b) => g.add_const(s, b),
        None => s,
    };
    let p = g.softmax_masked_allow_empty(s, admissible);
    let vh = g.permute(v, &[1, 0, 2]); // [H, m, hd]
    let ctx = g.matmul(p, vh); // [H, n, hd]
    g.attn_macs += 2 * (hd as u128) * (heads as u128) * mask_popcount(admissible);
    g.permute(ctx, &[1, 0, 2]) // [n, H, hd]
}

fn token_alibi(alibi: Option<&AlibiParams>, n: usize) -> Option<Tensor> {
    alibi.map(|p| {
        let pos: Vec<usize> = (0..n).collect();
        alibi_bias(p, &pos, &pos)
    })
}

// ── strategies ──────────────────────────────────────────────────────────

/// Full causal attention: context of query `i` is the softmax-weighted sum
/// of values at positions `0..=i`.
pub fn global_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    valid: &AttnMask,
    alibi: Option<&AlibiParams>,
) -> NodeId {
    let n = g.value(q).shape()[0];
    let mask = causal_mask(n, valid);
    let bias = token_alibi(alibi, n);
    attention_over(g, q, k, v, &mask, bias.as_ref())
}

/// Windowed attention as masked full attention; the reference for the
/// blockwise kernel and for inference-cache semantics.
#[allow(clippy::too_many_arguments)]
pub fn local_attention_naive(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    window: usize,
    valid: &AttnMask,
    semantics: LocalSemantics,
    alibi: Option<&AlibiParams>,
) -> NodeId {
    let n = g.value(q).shape()[0];
    let mask = match semantics {
        LocalSemantics::SlidingWindow => sliding_window_mask(n, window, valid),
        LocalSemantics::BlockBanded => block_banded_mask(n, window, valid),
    };
    let bias = token_alibi(alibi, n);
    attention_over(g, q, k, v, &mask, bias.as_ref())
}

/// Blockwise windowed attention: pad to a multiple of `w`, split queries
/// into `w`-blocks, concatenate each key/value block with its predecessor
/// (the first block pairs with an all-invalid zero block), apply the
/// combined causal-band/validity mask, and contract batched over blocks.
/// Equals [`local_attention_naive`] under block-banded semantics.
pub fn local_attention_blockwise(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    window: usize,
    valid: &AttnMask,
    alibi: Option<&AlibiParams>,
) -> NodeId {
    assert!(window >= 1, "window must be >= 1");
    let (n, heads, hd) = {
        let s = g.value(q).shape();
        (s[0], s[1], s[2])
    };
    assert_eq!(valid.len(), n, "validity mask length vs sequence length");
    let w = window;
    let n_blocks = n.div_ceil(w);
    let padded = n_blocks * w;
    let tail = padded - n;

    let pad_seq = |g: &mut Graph, x: NodeId| -> NodeId {
        if tail == 0 {
            x
        } else {
            g.pad(x, &[0, 0, 0], &[tail, 0, 0])
        }
    };
    let q = pad_seq(g, q);
    let k = pad_seq(g, k);
    let v = pad_seq(g, v);

    // [padded, H, hd] -> [nb, H, w, hd]
    let to_blocks = |g: &mut Graph, x: NodeId| -> NodeId {
        let b = g.reshape(x, vec![n_blocks, w, heads, hd]);
        g.permute(b, &[0, 2, 1, 3])
    };
    let qb = to_blocks(g, q);
    let kb = to_blocks(g, k);
    let vb = to_blocks(g, v);

    // pair each block with its predecessor along the key axis
    let with_prev = |g: &mut Graph, x: NodeId| -> NodeId {
        let shifted = g.pad(x, &[1, 0, 0, 0], &[0, 0, 0, 0]); // [nb+1, H, w, hd]
        let prev = g.slice(shifted, &[0, 0, 0, 0], &[n_blocks, heads, w, hd]);
        g.concat(&[prev, x], 2) // [nb, H, 2w, hd]
    };
    let k2 = with_prev(g, kb);
    let v2 = with_prev(g, vb);

    let kt = g.permute(k2, &[0, 1, 3, 2]); // [nb, H, hd, 2w]
    let scores = g.matmul(qb, kt); // [nb, H, w, 2w]
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());

    // admissibility per (block, row, column): key j = (b-1)*w + c must
    // exist, be causal, be real (not padding), and both ends valid
    let mut mask = vec![0.0; n_blocks * w * (2 * w)];
    let mut admissible_pairs: u128 = 0;
    for b in 0..n_blocks {
        for r in 0..w {
            let i = b * w + r;
            if i >= n || !valid.valid[i] {
                continue;
            }
            for c in 0..2 * w {
                let j = (b * w + c).checked_sub(w);
                if let Some(j) = j.filter(|&j| j <= i && j < n && valid.valid[j]) {
                    let _ = j;
                    mask[(b * w + r) * 2 * w + c] = 1.0;
                    admissible_pairs += 1;
                }
            }
        }
    }
    let mask = Tensor::from_vec(vec![n_blocks, 1, w, 2 * w], mask, DType::F64);

    let scores = match alibi {
        Some(p) => {
            let mut bias = vec![0.0; n_blocks * heads * w * 2 * w];
            for (h, &m) in p.slopes.iter().enumerate() {
                for b in 0..n_blocks {
                    for r in 0..w {
                        let i = b * w + r;
                        for c in 0..2 * w {
                            if let Some(j) = (b * w + c).checked_sub(w) {
                                if j <= i {
                                    bias[((b * heads + h) * w + r) * 2 * w + c] =
                                        -((i - j) as f64) * m;
                                }
                            }
                        }
                    }
                }
            }
            let bias = Tensor::from_vec(vec![n_blocks, heads, w, 2 * w], bias, DType::F64);
            g.add_const(scores, &bias)
        }
        None => scores,
    };

    let probs = g.softmax_masked_allow_empty(scores, &mask);
    let ctx = g.matmul(probs, v2); // [nb, H, w, hd]
    g.attn_macs += 2 * (hd as u128) * (heads as u128) * admissible_pairs;
    let ctx = g.permute(ctx, &[0, 2, 1, 3]); // [nb, w, H, hd]
    let ctx = g.reshape(ctx, vec![padded, heads, hd]);
    if tail == 0 {
        ctx
    } else {
        g.slice(ctx, &[0, 0, 0], &[n, heads, hd])
    }
}

/// Per-chunk key or value summaries: the sum of the chunk's vectors with
/// `ln(c)` added to every component. Only full chunks produce summaries;
/// returns `None` when fewer than `c` positions exist.
pub fn chunk_summaries(g: &mut Graph, x: NodeId, chunk: usize, compensate: bool) -> Option<NodeId> {
    assert!(chunk >= 1, "chunk size must be >= 1");
    let (n, heads, hd) = {
        let s = g.value(x).shape();
        (s[0], s[1], s[2])
    };
    let m = n / chunk;
    if m == 0 {
        return None;
    }
    let covered = if m * chunk == n {
        x
    } else {
        g.slice(x, &[0, 0, 0], &[m * chunk, heads, hd])
    };
    let grouped = g.reshape(covered, vec![m, chunk, heads, hd]);
    let sums = g.sum_axis(grouped, 1); // [m, H, hd]
    if compensate && chunk > 1 {
        Some(g.add_scalar(sums, (chunk as f64).ln()))
    } else {
        Some(sums)
    }
}

/// Windowed attention extended with summarized non-local chunks in one
/// joint softmax.
///
/// Query `i` admits: its sliding window `max(0, i-w+1)..=i`; every full
/// chunk wholly contained in `0..=i-w`; and the leftover non-local tokens
/// between the last such chunk and the window start, individually. Keys
/// must be position-encoded (e.g. rotated) *before* the call: summaries
/// are sums of the already-encoded keys and carry no further rotation.
///
/// With `logit_compensation` the `ln(c)` term moves from the summary
/// vectors to the chunk logits. Under a distance bias, a chunk takes its
/// last member's position as representative.
#[allow(clippy::too_many_arguments)]
pub fn global_approx_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    window: usize,
    chunk: usize,
    valid: &AttnMask,
    alibi: Option<&AlibiParams>,
    logit_compensation: bool,
) -> NodeId {
    assert!(window >= 1, "window must be >= 1");
    assert!(chunk >= 1, "chunk size must be >= 1");
    let n = g.value(q).shape()[0];
    assert_eq!(valid.len(), n, "validity mask length vs sequence length");
    let c = chunk;
    let w = window;

    let ks = chunk_summaries(g, k, c, !logit_compensation);
    let m = n / c;
    let (k_ext, v_ext) = match ks {
        Some(ks) => {
            let vs = chunk_summaries(g, v, c, !logit_compensation).unwrap();
            (g.concat(&[k, ks], 0), g.concat(&[v, vs], 0))
        }
        None => (k, v),
    };

    // a chunk is attendable only when every member is valid
    let chunk_valid: Vec<bool> = (0..m)
        .map(|j| valid.valid[j * c..(j + 1) * c].iter().all(|&v| v))
        .collect();

    let mut mask = vec![0.0; n * (n + m)];
    for i in 0..n {
        if !valid.valid[i] {
            continue;
        }
        // tokens strictly before the window: 0..=i-w  (i-w+1 of them)
        let non_local = (i + 1).saturating_sub(w);
        let full = non_local / c; // chunks wholly inside the non-local span
        for j in full * c..=i {
            if valid.valid[j] {
                mask[i * (n + m) + j] = 1.0;
            }
        }
        for jc in 0..full.min(m) {
            if chunk_valid[jc] {
                mask[i * (n + m) + n + jc] = 1.0;
            }
        }
    }
    let mask = Tensor::from_vec(vec![n, n + m], mask, DType::F64);

    // additive logit pieces: distance bias and/or logit-side compensation
    let bias = {
        let alibi_part = alibi.map(|p| {
            let q_pos: Vec<usize> = (0..n).collect();
            let mut k_pos = q_pos.clone();
            k_pos.extend((0..m).map(|j| j * c + c - 1)); // representative: last member
            alibi_bias(p, &q_pos, &k_pos)
        });
        let comp_part = if logit_compensation && c > 1 && m > 0 {
            let mut b = vec![0.0; n + m];
            for jc in 0..m {
                b[n + jc] = (c as f64).ln();
            }
            Some(Tensor::from_vec(vec![n + m], b, DType::F64))
        } else {
            None
        };
        match (alibi_part, comp_part) {
            (Some(a), Some(cp)) => {
                let mut data = a.data().to_vec();
                let heads = a.shape()[0];
                for h in 0..heads {
                    for i in 0..n {
                        for j in 0..n + m {
                            data[(h * n + i) * (n + m) + j] += cp.data()[j];
                        }
                    }
                }
                Some(Tensor::from_vec(a.shape().to_vec(), data, DType::F64))
            }
            (Some(a), None) => Some(a),
            (None, Some(cp)) => Some(cp),
            (None, None) => None,
        }
    };

    attention_over(g, q, k_ext, v_ext, &mask, bias.as_ref())
}

/// Dispatch a single layer's attention.
pub fn layer_attention(
    g: &mut Graph,
    kind: LayerAttn,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    valid: &AttnMask,
    alibi: Option<&AlibiParams>,
) -> NodeId {
    match kind {
        LayerAttn::Global => global_attention(g, q, k, v, valid, alibi),
        LayerAttn::Local {
            window,
            semantics: LocalSemantics::BlockBanded,
        } => local_attention_blockwise(g, q, k, v, window, valid, alibi),
        LayerAttn::Local {
            window,
            semantics: LocalSemantics::SlidingWindow,
        } => local_attention_naive(
            g,
            q,
            k,
            v,
            window,
            valid,
            LocalSemantics::SlidingWindow,
            alibi,
        ),
        LayerAttn::GlobalApprox {
            window,
            chunk,
            logit_compensation,
        } => global_approx_attention(g, q, k, v, window, chunk, valid, alibi, logit_compensation),
    }
}
