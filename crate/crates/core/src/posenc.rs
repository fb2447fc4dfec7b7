//! Positional embeddings: sinusoidal/trainable absolute tables, linear
//! attention bias with per-head slopes, and rotary embedding with a
//! configurable base and interpolation scale.

use crate::error::Error;
use crate::graph::{Graph, NodeId};
use crate::tensor::{DType, Tensor};
use crate::Result;

/// Default rotary base; large bases slow the frequency schedule down for
/// better behavior on long sequences.
pub const DEFAULT_ROPE_THETA: f64 = 131_072.0;

// ── absolute ────────────────────────────────────────────────────────────

/// Sinusoidal embedding of one position: component `2i` is
/// `sin(pos / 10000^(2i/d))` and component `2i+1` the matching cosine.
pub fn sinusoidal_pe(pos: usize, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sinusoidal embedding needs an even dimension, got {d}"
        )));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = 10_000f64.powf(-(2.0 * i as f64) / d as f64);
        let angle = pos as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Table of sinusoidal embeddings for positions `0..n`, shape `[n, d]`.
pub fn sinusoidal_table(n: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        data.extend(sinusoidal_pe(pos, d)?);
    }
    Ok(Tensor::from_vec(vec![n, d], data, dtype))
}

/// Add rows `0..n` of a positional table to word embeddings `[n, d]`.
///
/// Absolute embeddings do not extrapolate: positions beyond the table are
/// an error.
pub fn add_absolute(g: &mut Graph, word_emb: NodeId, pe_table: NodeId) -> Result<NodeId> {
    let n = g.value(word_emb).shape()[0];
    let d = g.value(word_emb).shape()[1];
    let rows = g.value(pe_table).shape()[0];
    assert_eq!(
        g.value(pe_table).shape()[1],
        d,
        "positional table {:?} vs embeddings {:?}",
        g.value(pe_table).shape(),
        g.value(word_emb).shape()
    );
    if n > rows {
        return Err(Error::Extrapolation {
            position: n - 1,
            table_len: rows,
        });
    }
    let pe = g.slice(pe_table, &[0, 0], &[n, d]);
    Ok(g.add(word_emb, pe))
}

// ── alibi ───────────────────────────────────────────────────────────────

/// Per-head slopes for the linear distance bias.
#[derive(Clone, Debug)]
pub struct AlibiParams {
    pub slopes: Vec<f64>,
}

impl AlibiParams {
    /// Geometric slope schedule `m_h = 2^(-8h / n_heads)` for `h = 1..=n_heads`;
    /// strictly decreasing.
    pub fn new(n_heads: usize) -> AlibiParams {
        let slopes = (1..=n_heads)
            .map(|h| 2f64.powf(-8.0 * h as f64 / n_heads as f64))
            .collect();
        AlibiParams { slopes }
    }

    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }
}

/// Bias tensor `[n_heads, qlen, klen]` with `bias[h, i, j] = -(qi - kj) * m_h`
/// for `kj <= qi`. Entries with `kj > qi` are never consumed (the causal
/// mask removes them downstream) and are left at zero.
pub fn alibi_bias(params: &AlibiParams, q_positions: &[usize], k_positions: &[usize]) -> Tensor {
    let heads = params.n_heads();
    let (qlen, klen) = (q_positions.len(), k_positions.len());
    let mut data = vec![0.0; heads * qlen * klen];
    for (h, &m) in params.slopes.iter().enumerate() {
        for (i, &qi) in q_positions.iter().enumerate() {
            for (j, &kj) in k_positions.iter().enumerate() {
                if kj <= qi {
                    data[(h * qlen + i) * klen + j] = -((qi - kj) as f64) * m;
                }
            }
        }
    }
    Tensor::from_vec(vec![heads, qlen, klen], data, DType::F64)
}

// ── rotary ──────────────────────────────────────────────────────────────

/// Rotary embedding parameters: frequency base, interpolation divisor, and
/// the even per-head width whose halves pair into conjugates.
#[derive(Clone, Copy, Debug)]
pub struct RopeParams {
    pub theta: f64,
    pub scale: f64,
    pub head_dim: usize,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta: f64, scale: f64) -> Result<RopeParams> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "rotary embedding needs an even head_dim, got {head_dim}"
            )));
        }
        if theta <= 0.0 {
            return Err(Error::config(format!(
                "rope theta must be positive, got {theta}"
            )));
        }
        if scale < 1.0 {
            return Err(Error::config(format!(
                "rope scale must be >= 1, got {scale}"
            )));
        }
        Ok(RopeParams {
            theta,
            scale,
            head_dim,
        })
    }

    pub fn with_defaults(head_dim: usize) -> Result<RopeParams> {
        RopeParams::new(head_dim, DEFAULT_ROPE_THETA, 1.0)
    }

    /// Rotation angle of conjugate pair `pair` at `pos`:
    /// `(pos / scale) * theta^(-2 * pair / head_dim)`.
    pub fn angle(&self, pos: usize, pair: usize) -> f64 {
        (pos as f64 / self.scale) * self.theta.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    /// Cos/sin tables for a position list, each `[positions.len(), head_dim/2]`
    /// row-major, as consumed by [`Graph::rope`].
    pub fn tables(&self, positions: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let a = self.angle(p, i);
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        (cos, sin)
    }
}

/// Rotate `[n, heads, head_dim]` queries or keys at the given absolute
/// positions. Pair `i` couples dimensions `i` and `i + head_dim/2`.
pub fn rope_rotate(g: &mut Graph, x: NodeId, positions: &[usize], params: &RopeParams) -> NodeId {
    let shape = g.value(x).shape();
    assert_eq!(
        shape.len(),
        3,
        "rope_rotate expects [n, heads, head_dim], got {shape:?}"
    );
    assert_eq!(
        shape[0],
        positions.len(),
        "rope_rotate positions vs rows {shape:?}"
    );
    assert_eq!(
        shape[2], params.head_dim,
        "rope_rotate head_dim {} vs tensor {:?}",
        params.head_dim, shape
    );
    let (cos, sin) = params.tables(positions);
    g.rope(x, &cos, &sin)
}

/// In-place rotation of one `[heads * head_dim]` row; used by the
/// incremental decoder, which works outside the graph.
pub fn rope_rotate_row(x: &mut [f64], heads: usize, pos: usize, params: &RopeParams) {
    let hd = params.head_dim;
    assert_eq!(x.len(), heads * hd, "rope_rotate_row length");
    let half = hd / 2;
    for h in 0..heads {
        let base = h * hd;
        for i in 0..half {
            let a = params.angle(pos, i);
            let (c, s) = (a.cos(), a.sin());
            let (xa, xb) = (x[base + i], x[base + half + i]);
            x[base + i] = xa * c - xb * s;
            x[base + half + i] = xa * s + xb * c;
        }
    }
}
