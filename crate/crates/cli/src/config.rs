//! Flat key=value run configuration.
//!
//! Precedence: command-line overrides beat file values beat defaults.
//! Unknown keys are rejected, and the effective configuration is echoed
//! (sorted) at startup so every run records exactly what it used.

use std::collections::BTreeMap;
use std::path::Path;

use zebra_core::attention::{AttnKind, LocalSemantics};
use zebra_core::blobio::kv_from_text;
use zebra_core::error::Error;
use zebra_core::model::{ModelConfig, PosEmb};
use zebra_core::tensor::DType;
use zebra_core::trainer::{Schedule, TrainConfig};
use zebra_core::Result;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ff_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seq_len: usize,
    pub batch_rows: usize,
    pub seed: u64,
    pub dtype: DType,

    pub attn: String,
    pub window: usize,
    pub chunk: usize,
    pub group_size: Option<usize>,
    pub local_semantics: LocalSemantics,
    pub logit_side_compensation: bool,

    pub pos_emb: PosEmb,
    pub rope_theta: f64,
    pub rope_scale: f64,

    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip: f64,

    pub mask_cross_doc: bool,
    pub eval_window: usize,
    pub max_bucket_exponent: u32,
    pub data_path: Option<String>,
    pub checkpoint_path: String,
    pub metrics_path: String,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            n_layers: 4,
            hidden_size: 128,
            n_heads: 4,
            head_dim: 32,
            ff_hidden: 512,
            vocab_size: zebra_core::data::VOCAB_SIZE,
            max_seq_len: 256,
            seq_len: 256,
            batch_rows: 8,
            seed: 42,
            dtype: DType::F32,
            attn: "global".into(),
            window: 1024,
            chunk: 16,
            group_size: None,
            local_semantics: LocalSemantics::BlockBanded,
            logit_side_compensation: false,
            pos_emb: PosEmb::Rope,
            rope_theta: 131072.0,
            rope_scale: 1.0,
            max_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 200,
            total_steps: 2000,
            log_every: 50,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip: 1.0,
            mask_cross_doc: false,
            eval_window: 256,
            max_bucket_exponent: 17,
            data_path: None,
            checkpoint_path: "model.zbra".into(),
            metrics_path: "metrics.csv".into(),
        }
    }
}

pub const KNOWN_KEYS: [&str; 35] = [
    "adam_eps",
    "attn",
    "batch_rows",
    "beta1",
    "beta2",
    "checkpoint_path",
    "chunk",
    "clip",
    "data_path",
    "dtype",
    "eval_window",
    "ff_hidden",
    "group_size",
    "head_dim",
    "hidden_size",
    "local_semantics",
    "log_every",
    "logit_side_compensation",
    "mask_cross_doc",
    "max_bucket_exponent",
    "max_lr",
    "max_seq_len",
    "metrics_path",
    "min_lr",
    "n_heads",
    "n_layers",
    "pos_emb",
    "rope_scale",
    "rope_theta",
    "seed",
    "seq_len",
    "total_steps",
    "vocab_size",
    "warmup_steps",
    "window",
];

impl RunConfig {
    /// Load from an optional file and apply `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut kv = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {p:?}: {e}")))?;
            kv = kv_from_text(&text)?;
        }
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                Error::config(format!("override {ov:?} is not of the form key=value"))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        RunConfig::from_kv(&kv)
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<RunConfig> {
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::config(format!("unknown config key {key:?}")));
            }
        }
        let mut cfg = RunConfig::default();
        let parse_num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("{k}: expected an integer, got {v:?}")))
        };
        let parse_f = |k: &str, v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::config(format!("{k}: expected a number, got {v:?}")))
        };
        let parse_b = |k: &str, v: &str| -> Result<bool> {
            v.parse()
                .map_err(|_| Error::config(format!("{k}: expected true/false, got {v:?}")))
        };
        let mut seq_len_set = false;
        let mut max_seq_set = false;
        let mut eval_window_set = false;
        for (k, v) in kv {
            match k.as_str() {
                "n_layers" => cfg.n_layers = parse_num(k, v)?,
                "hidden_size" => cfg.hidden_size = parse_num(k, v)?,
                "n_heads" => cfg.n_heads = parse_num(k, v)?,
                "head_dim" => cfg.head_dim = parse_num(k, v)?,
                "ff_hidden" => cfg.ff_hidden = parse_num(k, v)?,
                "vocab_size" => cfg.vocab_size = parse_num(k, v)?,
                "max_seq_len" => {
                    cfg.max_seq_len = parse_num(k, v)?;
                    max_seq_set = true;
                }
                "seq_len" => {
                    cfg.seq_len = parse_num(k, v)?;
                    seq_len_set = true;
                }
                "batch_rows" => cfg.batch_rows = parse_num(k, v)?,
                "seed" => {
                    cfg.seed = v.parse().map_err(|_| {
                        Error::config(format!("seed: expected an integer, got {v:?}"))
                    })?
                }
                "dtype" => {
                    cfg.dtype = match v.as_str() {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        other => {
                            return Err(Error::config(format!("dtype: unknown value {other:?}")))
                        }
                    }
                }
                "attn" => {
                    if !["global", "local", "global_approx", "group"].contains(&v.as_str()) {
                        return Err(Error::config(format!("attn: unknown strategy {v:?}")));
                    }
                    cfg.attn = v.clone();
                }
                "window" => cfg.window = parse_num(k, v)?,
                "chunk" => cfg.chunk = parse_num(k, v)?,
                "group_size" => cfg.group_size = Some(parse_num(k, v)?),
                "local_semantics" => {
                    cfg.local_semantics = match v.as_str() {
                        "block_banded" => LocalSemantics::BlockBanded,
                        "sliding_window" => LocalSemantics::SlidingWindow,
                        other => {
                            return Err(Error::config(format!(
                                "local_semantics: unknown value {other:?}"
                            )))
                        }
                    }
                }
                "logit_side_compensation" => cfg.logit_side_compensation = parse_b(k, v)?,
                "pos_emb" => {
                    cfg.pos_emb = match v.as_str() {
                        "absolute" => PosEmb::Absolute,
                        "alibi" => PosEmb::Alibi,
                        "rope" => PosEmb::Rope,
                        other => {
                            return Err(Error::config(format!("pos_emb: unknown value {other:?}")))
                        }
                    }
                }
                "rope_theta" => cfg.rope_theta = parse_f(k, v)?,
                "rope_scale" => cfg.rope_scale = parse_f(k, v)?,
                "max_lr" => cfg.max_lr = parse_f(k, v)?,
                "min_lr" => cfg.min_lr = parse_f(k, v)?,
                "warmup_steps" => cfg.warmup_steps = parse_num(k, v)?,
                "total_steps" => cfg.total_steps = parse_num(k, v)?,
                "log_every" => cfg.log_every = parse_num(k, v)?,
                "beta1" => cfg.beta1 = parse_f(k, v)?,
                "beta2" => cfg.beta2 = parse_f(k, v)?,
                "adam_eps" => cfg.adam_eps = parse_f(k, v)?,
                "weight_decay" => cfg.weight_decay = parse_f(k, v)?,
                "clip" => cfg.clip = parse_f(k, v)?,
                "mask_cross_doc" => cfg.mask_cross_doc = parse_b(k, v)?,
                "eval_window" => {
                    cfg.eval_window = parse_num(k, v)?;
                    eval_window_set = true;
                }
                "max_bucket_exponent" => {
                    cfg.max_bucket_exponent = parse_num(k, v)? as u32;
                }
                "data_path" => cfg.data_path = Some(v.clone()),
                "checkpoint_path" => cfg.checkpoint_path = v.clone(),
                "metrics_path" => cfg.metrics_path = v.clone(),
                _ => unreachable!("validated against KNOWN_KEYS"),
            }
        }
        // unset companions follow seq_len
        if seq_len_set && !max_seq_set {
            cfg.max_seq_len = cfg.seq_len;
        }
        if seq_len_set && !eval_window_set {
            cfg.eval_window = cfg.seq_len;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attn == "group" && self.group_size.is_none() {
            return Err(Error::config("attn=group requires group_size"));
        }
        self.model()?.validate()
    }

    pub fn attn_kind(&self) -> Result<AttnKind> {
        Ok(match self.attn.as_str() {
            "global" => AttnKind::Global,
            "local" => AttnKind::Local {
                window: self.window,
            },
            "global_approx" => AttnKind::GlobalApprox {
                window: self.window,
                chunk: self.chunk,
            },
            "group" => AttnKind::Group {
                group_size: self
                    .group_size
                    .ok_or_else(|| Error::config("attn=group requires group_size"))?,
                window: self.window,
            },
            other => return Err(Error::config(format!("attn: unknown strategy {other:?}"))),
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            n_layers: self.n_layers,
            hidden_size: self.hidden_size,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            ff_hidden: self.ff_hidden,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            attn: self.attn_kind()?,
            local_semantics: self.local_semantics,
            logit_compensation: self.logit_side_compensation,
            pos_emb: self.pos_emb,
            rope_theta: self.rope_theta,
            rope_scale: self.rope_scale,
            seed: self.seed,
            dtype: self.dtype,
        })
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            max_lr: self.max_lr,
            min_lr: self.min_lr,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model()?,
            schedule: self.schedule(),
            batch_rows: self.batch_rows,
            steps: self.total_steps,
            log_every: self.log_every,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            clip: self.clip,
        })
    }

    /// Every effective key, sorted, for the startup echo.
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
        put("seq_len", self.seq_len.to_string());
        put("batch_rows", self.batch_rows.to_string());
        put("seed", self.seed.to_string());
        put(
            "dtype",
            if self.dtype == DType::F32 {
                "f32".into()
            } else {
                "f64".into()
            },
        );
        put("attn", self.attn.clone());
        put("window", self.window.to_string());
        put("chunk", self.chunk.to_string());
        if let Some(g) = self.group_size {
            put("group_size", g.to_string());
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
            self.logit_side_compensation.to_string(),
        );
        put(
            "pos_emb",
            match self.pos_emb {
                PosEmb::Absolute => "absolute".into(),
                PosEmb::Alibi => "alibi".into(),
                PosEmb::Rope => "rope".into(),
            },
        );
        put("rope_theta", self.rope_theta.to_string());
        put("rope_scale", self.rope_scale.to_string());
        put("max_lr", self.max_lr.to_string());
        put("min_lr", self.min_lr.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("total_steps", self.total_steps.to_string());
        put("log_every", self.log_every.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("clip", self.clip.to_string());
        put("mask_cross_doc", self.mask_cross_doc.to_string());
        put("eval_window", self.eval_window.to_string());
        put("max_bucket_exponent", self.max_bucket_exponent.to_string());
        if let Some(d) = &self.data_path {
            put("data_path", d.clone());
        }
        put("checkpoint_path", self.checkpoint_path.clone());
        put("metrics_path", self.metrics_path.clone());
        kv
    }

    pub fn echo(&self) -> String {
        let mut out = String::from("# effective config\n");
        for (k, v) in self.to_kv() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}
