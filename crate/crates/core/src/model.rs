//! Decoder-only transformer assembled from the attention strategies and
//! positional embeddings: token embedding, pre-norm residual blocks with
//! GELU feed-forward, and a language-model head tied to the embedding.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::{
    layer_attention, qkv_project, AttnKind, AttnMask, LayerAttn, LayerKind, LocalSemantics,
};
use crate::blobio;
use crate::error::Error;
use crate::graph::{Graph, NodeId};
use crate::posenc::{add_absolute, rope_rotate, sinusoidal_table, AlibiParams, RopeParams};
use crate::rng;
use crate::tensor::{DType, Tensor};
use crate::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PosEmb {
    /// Trainable absolute table initialized from the sinusoidal values.
    Absolute,
    Alibi,
    Rope,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ff_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attn: AttnKind,
    pub local_semantics: LocalSemantics,
    pub logit_compensation: bool,
    pub pos_emb: PosEmb,
    pub rope_theta: f64,
    pub rope_scale: f64,
    pub seed: u64,
    pub dtype: DType,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size != self.n_heads * self.head_dim {
            return Err(Error::config(format!(
                "hidden_size {} != n_heads {} * head_dim {}",
                self.hidden_size, self.n_heads, self.head_dim
            )));
        }
        if self.ff_hidden <= self.hidden_size {
            return Err(Error::config(format!(
                "ff_hidden {} must exceed hidden_size {}",
                self.ff_hidden, self.hidden_size
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config(
                "n_layers, vocab_size, max_seq_len must be >= 1",
            ));
        }
        match self.attn {
            AttnKind::Global => {}
            AttnKind::Local { window } => {
                if window == 0 {
                    return Err(Error::config("window must be >= 1"));
                }
            }
            AttnKind::GlobalApprox { window, chunk } => {
                if window == 0 || chunk == 0 {
                    return Err(Error::config("window and chunk must be >= 1"));
                }
            }
            AttnKind::Group { group_size, window } => {
                if group_size == 0 {
                    return Err(Error::config("group_size must be >= 1"));
                }
                if window == 0 {
                    return Err(Error::config("window must be >= 1"));
                }
            }
        }
        if self.pos_emb == PosEmb::Rope {
            RopeParams::new(self.head_dim, self.rope_theta, self.rope_scale)?;
        }
        Ok(())
    }

    /// Attention run by layer `layer` once the schedule is applied.
    pub fn layer_attn(&self, layer: usize) -> LayerAttn {
        match self.attn {
            AttnKind::Global => LayerAttn::Global,
            AttnKind::Local { window } => LayerAttn::Local {
                window,
                semantics: self.local_semantics,
            },
            AttnKind::GlobalApprox { window, chunk } => LayerAttn::GlobalApprox {
                window,
                chunk,
                logit_compensation: self.logit_compensation,
            },
            AttnKind::Group { group_size, window } => {
                match crate::attention::layer_kind(layer, group_size) {
                    LayerKind::GlobalLayer => LayerAttn::Global,
                    LayerKind::LocalLayer => LayerAttn::Local {
                        window,
                        semantics: self.local_semantics,
                    },
                }
            }
        }
    }

    pub fn rope_params(&self) -> Result<RopeParams> {
        RopeParams::new(self.head_dim, self.rope_theta, self.rope_scale)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("n_layers", self.n_layers.to_string());
        put("hidden_size", self.hidden_size.to_string());
        put("n_heads", self.n_heads.to_string());
        put("head_dim", self.head_dim.to_string());
        put("ff_hidden", self.ff_hidden.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_seq_len", self.max_seq_len.to_string());
        match self.attn {
            AttnKind::Global => put("attn", "global".into()),
            AttnKind::Local { window } => {
                put("attn", "local".into());
                put("window", window.to_string());
            }
            AttnKind::GlobalApprox { window, chunk } => {
                put("attn", "global_approx".into());
                put("window", window.to_string());
                put("chunk", chunk.to_string());
            }
            AttnKind::Group { group_size, window } => {
                put("attn", "group".into());
                put("group_size", group_size.to_string());
                put("window", window.to_string());
            }
        }
        put(
            "local_semantics",
            match self.local_semantics {
                LocalSemantics::BlockBanded => "block_banded".into(),
                LocalSemantics::SlidingWindow => "sliding_window".into(),
            },
        );
        put(
            "logit_side_compensation",
            self.logit_compensation.to_string(),
        );
        put(
            "pos_emb",
            match self.pos_emb {
                PosEmb::Absolute => "absolute".into(),
                PosEmb::Alibi => "alibi".into(),
                PosEmb::Rope => "rope".into(),
            },
        );
        put("rope_theta", format!("{}", self.rope_theta));
        put("rope_scale", format!("{}", self.rope_scale));
        put("seed", self.seed.to_string());
        put(
            "dtype",
            if self.dtype == DType::F32 {
                "f32".into()
            } else {
                "f64".into()
            },
        );
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::config(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("{k}: not an integer")))
        };
        let flt = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("{k}: not a number")))
        };
        let attn = match get("attn")?.as_str() {
            "global" => AttnKind::Global,
            "local" => AttnKind::Local {
                window: num("window")?,
            },
            "global_approx" => AttnKind::GlobalApprox {
                window: num("window")?,
                chunk: num("chunk")?,
            },
            "group" => AttnKind::Group {
                group_size: num("group_size")?,
                window: num("window")?,
            },
            other => return Err(Error::config(format!("attn: unknown strategy {other:?}"))),
        };
        let cfg = ModelConfig {
            n_layers: num("n_layers")?,
            hidden_size: num("hidden_size")?,
            n_heads: num("n_heads")?,
            head_dim: num("head_dim")?,
            ff_hidden: num("ff_hidden")?,
            vocab_size: num("vocab_size")?,
            max_seq_len: num("max_seq_len")?,
            attn,
            local_semantics: match get("local_semantics")?.as_str() {
                "block_banded" => LocalSemantics::BlockBanded,
                "sliding_window" => LocalSemantics::SlidingWindow,
                other => return Err(Error::config(format!("local_semantics: unknown {other:?}"))),
            },
            logit_compensation: get("logit_side_compensation")?
                .parse()
                .map_err(|_| Error::config("logit_side_compensation: not a bool"))?,
            pos_emb: match get("pos_emb")?.as_str() {
                "absolute" => PosEmb::Absolute,
                "alibi" => PosEmb::Alibi,
                "rope" => PosEmb::Rope,
                other => return Err(Error::config(format!("pos_emb: unknown {other:?}"))),
            },
            rope_theta: flt("rope_theta")?,
            rope_scale: flt("rope_scale")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::config("seed: not an integer"))?,
            dtype: match get("dtype")?.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                other => return Err(Error::config(format!("dtype: unknown {other:?}"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_out: Tensor,
}

/// All trainable state. The output head is tied to the token embedding.
#[derive(Clone, Debug)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    /// Present only for absolute positional embedding; trainable,
    /// initialized from the sinusoidal table.
    pub pos_table: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl TransformerWeights {
    /// Parameters in canonical order; checkpoints, the optimizer, and the
    /// graph binding all follow this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            vec![("token_embedding".to_string(), &self.token_embedding)];
        if let Some(p) = &self.pos_table {
            out.push(("pos_table".to_string(), p));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), &lw.wq));
            out.push((format!("layer{l}.wk"), &lw.wk));
            out.push((format!("layer{l}.wv"), &lw.wv));
            out.push((format!("layer{l}.wo"), &lw.wo));
            out.push((format!("layer{l}.ln1_gain"), &lw.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &lw.ln1_bias));
            out.push((format!("layer{l}.ln2_gain"), &lw.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &lw.ln2_bias));
            out.push((format!("layer{l}.ff_in"), &lw.ff_in));
            out.push((format!("layer{l}.ff_out"), &lw.ff_out));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("token_embedding".to_string(), &mut self.token_embedding)];
        if let Some(p) = &mut self.pos_table {
            out.push(("pos_table".to_string(), p));
        }
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.wq"), &mut lw.wq));
            out.push((format!("layer{l}.wk"), &mut lw.wk));
            out.push((format!("layer{l}.wv"), &mut lw.wv));
            out.push((format!("layer{l}.wo"), &mut lw.wo));
            out.push((format!("layer{l}.ln1_gain"), &mut lw.ln1_gain));
            out.push((format!("layer{l}.ln1_bias"), &mut lw.ln1_bias));
            out.push((format!("layer{l}.ln2_gain"), &mut lw.ln2_gain));
            out.push((format!("layer{l}.ln2_bias"), &mut lw.ln2_bias));
            out.push((format!("layer{l}.ff_in"), &mut lw.ff_in));
            out.push((format!("layer{l}.ff_out"), &mut lw.ff_out));
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}

/// Deterministic initialization: normal(0, 0.02) matrices, zero biases,
/// unit norm gains; the absolute positional table starts sinusoidal.
pub fn init_weights(config: &ModelConfig) -> Result<TransformerWeights> {
    config.validate()?;
    let mut r = rng::stream(config.seed, "weights");
    let d = config.hidden_size;
    let dt = config.dtype;
    let mut mat = |rows: usize, cols: usize| -> Tensor {
        Tensor::from_vec(
            vec![rows, cols],
            rng::normal_vec(&mut r, rows * cols, 0.02),
            dt,
        )
    };
    let token_embedding = mat(config.vocab_size, d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: mat(d, d),
            wk: mat(d, d),
            wv: mat(d, d),
            wo: mat(d, d),
            ln1_gain: Tensor::full(vec![d], 1.0, dt),
            ln1_bias: Tensor::zeros(vec![d], dt),
            ln2_gain: Tensor::full(vec![d], 1.0, dt),
            ln2_bias: Tensor::zeros(vec![d], dt),
            ff_in: mat(d, config.ff_hidden),
            ff_out: mat(config.ff_hidden, d),
        });
    }
    let pos_table = if config.pos_emb == PosEmb::Absolute {
        Some(sinusoidal_table(config.max_seq_len, d, dt)?)
    } else {
        None
    };
    Ok(TransformerWeights {
        config: config.clone(),
        token_embedding,
        pos_table,
        layers,
        final_gain: Tensor::full(vec![d], 1.0, dt),
        final_bias: Tensor::zeros(vec![d], dt),
    })
}

/// Exact parameter counts from the configured shapes.
pub struct ParamCount {
    pub total: usize,
    /// Token embedding plus positional table.
    pub embedding: usize,
}

impl ParamCount {
    pub fn non_embedding(&self) -> usize {
        self.total - self.embedding
    }
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let d = config.hidden_size;
    let mut embedding = config.vocab_size * d;
    if config.pos_emb == PosEmb::Absolute {
        embedding += config.max_seq_len * d;
    }
    let per_layer = 4 * d * d + 4 * d + 2 * d * config.ff_hidden;
    let total = embedding + config.n_layers * per_layer + 2 * d;
    ParamCount { total, embedding }
}

// ── graph binding and forward ───────────────────────────────────────────

pub struct BoundLayer {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ff_in: NodeId,
    pub ff_out: NodeId,
}

/// Weight tensors registered as leaves of one graph.
pub struct BoundModel {
    pub emb: NodeId,
    pub pos: Option<NodeId>,
    pub layers: Vec<BoundLayer>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
}

pub fn bind_weights(g: &mut Graph, w: &TransformerWeights) -> BoundModel {
    BoundModel {
        emb: g.leaf(&w.token_embedding),
        pos: w.pos_table.as_ref().map(|p| g.leaf(p)),
        layers: w
            .layers
            .iter()
            .map(|lw| BoundLayer {
                wq: g.leaf(&lw.wq),
                wk: g.leaf(&lw.wk),
                wv: g.leaf(&lw.wv),
                wo: g.leaf(&lw.wo),
                ln1_gain: g.leaf(&lw.ln1_gain),
                ln1_bias: g.leaf(&lw.ln1_bias),
                ln2_gain: g.leaf(&lw.ln2_gain),
                ln2_bias: g.leaf(&lw.ln2_bias),
                ff_in: g.leaf(&lw.ff_in),
                ff_out: g.leaf(&lw.ff_out),
            })
            .collect(),
        final_gain: g.leaf(&w.final_gain),
        final_bias: g.leaf(&w.final_bias),
    }
}

impl BoundModel {
    /// Leaf node ids in the same order as
    /// [`TransformerWeights::named_params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = vec![self.emb];
        if let Some(p) = self.pos {
            out.push(p);
        }
        for l in &self.layers {
            out.extend([
                l.wq, l.wk, l.wv, l.wo, l.ln1_gain, l.ln1_bias, l.ln2_gain, l.ln2_bias, l.ff_in,
                l.ff_out,
            ]);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }
}

/// Build the logits `[n, vocab]` of one token row inside `g`.
///
/// Pre-norm residual blocks `x + Attn(Norm(x))` then `x + FF(Norm(x))`;
/// the head shares the embedding matrix.
pub fn build_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    bound: &BoundModel,
    tokens: &[usize],
    valid: &AttnMask,
) -> Result<NodeId> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::contract("empty token row"));
    }
    assert_eq!(valid.len(), n, "validity mask length vs tokens");
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                value: t,
                limit: cfg.vocab_size,
            });
        }
    }
    let positions: Vec<usize> = (0..n).collect();
    let rope = if cfg.pos_emb == PosEmb::Rope {
        Some(cfg.rope_params()?)
    } else {
        None
    };
    let alibi = if cfg.pos_emb == PosEmb::Alibi {
        Some(AlibiParams::new(cfg.n_heads))
    } else {
        None
    };

    let mut x = g.embedding(bound.emb, tokens);
    if let Some(pos) = bound.pos {
        x = add_absolute(g, x, pos)?;
    }
    for (l, lw) in bound.layers.iter().enumerate() {
        let kind = cfg.layer_attn(l);
        let a = g.layer_norm(x, lw.ln1_gain, lw.ln1_bias, LN_EPS);
        let (mut q, mut k, v) = qkv_project(g, a, lw.wq, lw.wk, lw.wv, cfg.n_heads);
        if let Some(rp) = &rope {
            q = rope_rotate(g, q, &positions, rp);
            k = rope_rotate(g, k, &positions, rp);
        }
        let ctx = layer_attention(g, kind, q, k, v, valid, alibi.as_ref());
        let ctx = g.reshape(ctx, vec![n, cfg.hidden_size]);
        let attn_out = g.matmul(ctx, lw.wo);
        x = g.add(x, attn_out);

        let f = g.layer_norm(x, lw.ln2_gain, lw.ln2_bias, LN_EPS);
        let h1 = g.matmul(f, lw.ff_in);
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, lw.ff_out);
        x = g.add(x, h2);
    }
    let x = g.layer_norm(x, bound.final_gain, bound.final_bias, LN_EPS);
    let head = g.permute(bound.emb, &[1, 0]); // [d, V]
    Ok(g.matmul(x, head))
}

pub struct ForwardOut {
    /// Logits `[batch, n, vocab]`.
    pub logits: Tensor,
    /// Attention multiply-accumulates summed over rows and layers.
    pub attn_macs: u128,
}

/// Batched forward; rows are independent and evaluated in parallel.
pub fn forward(
    w: &TransformerWeights,
    rows: &[Vec<usize>],
    valid: Option<&[Vec<bool>]>,
) -> Result<ForwardOut> {
    if rows.is_empty() {
        return Err(Error::contract("forward on an empty batch"));
    }
    let n = rows[0].len();
    for row in rows {
        assert_eq!(row.len(), n, "all rows in a batch must share one length");
    }
    if let Some(v) = valid {
        assert_eq!(v.len(), rows.len(), "validity rows vs token rows");
    }
    let results: Vec<Result<(Vec<f64>, u128)>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mask = match valid {
                Some(v) => AttnMask {
                    valid: v[i].clone(),
                },
                None => AttnMask::all_valid(n),
            };
            let mut g = Graph::new();
            let bound = bind_weights(&mut g, w);
            let logits = build_logits(&mut g, &w.config, &bound, row, &mask)?;
            Ok((g.value(logits).data().to_vec(), g.attn_macs))
        })
        .collect();
    let mut data = Vec::with_capacity(rows.len() * n * w.config.vocab_size);
    let mut macs = 0u128;
    for r in results {
        let (row_logits, row_macs) = r?;
        data.extend(row_logits);
        macs += row_macs;
    }
    Ok(ForwardOut {
        logits: Tensor::from_vec(
            vec![rows.len(), n, w.config.vocab_size],
            data,
            w.config.dtype,
        ),
        attn_macs: macs,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────────

pub fn save_checkpoint(path: &Path, w: &TransformerWeights) -> Result<()> {
    let text = blobio::kv_to_text(&w.config.to_kv());
    let blobs: Vec<(String, &Tensor)> = w.named_params();
    blobio::write_blobs(path, &text, &blobs)
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerWeights> {
    let (text, blobs) = blobio::read_blobs(path)?;
    let config = ModelConfig::from_kv(&blobio::kv_from_text(&text)?)?;
    let mut by_name: BTreeMap<String, Tensor> = blobs.into_iter().collect();
    let mut w = init_weights(&config)?;
    for (name, t) in w.named_params_mut() {
        let loaded = by_name
            .remove(&name)
            .ok_or_else(|| Error::data(format!("checkpoint missing parameter {name:?}")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::data(format!(
                "checkpoint parameter {name:?} has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = Tensor::from_vec(
            loaded.shape().to_vec(),
            loaded.data().to_vec(),
            config.dtype,
        );
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::data(format!(
            "checkpoint has unknown parameter {name:?}"
        )));
    }
    Ok(w)
}
