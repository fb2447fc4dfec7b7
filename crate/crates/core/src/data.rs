//! Corpus ingestion, byte-level tokenization, document packing, and
//! length-bucketed evaluation splits.
//!
//! The tokenizer maps byte `b` to id `b` with two specials (`BOS`, `EOS`),
//! so any text round-trips exactly and no external assets are needed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Error;
use crate::rng;
use crate::Result;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize).collect()
}

/// Inverse of [`tokenize`]; `BOS`/`EOS` markers are skipped.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id == BOS || id == EOS {
            continue;
        }
        if id >= 256 {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                value: id,
                limit: VOCAB_SIZE,
            });
        }
        bytes.push(id as u8);
    }
    String::from_utf8(bytes).map_err(|e| Error::data(format!("detokenize: invalid UTF-8: {e}")))
}

#[derive(Clone, Debug)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Document> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::data("document text must be nonempty"));
        }
        Ok(Document {
            id: id.into(),
            text,
        })
    }

    pub fn token_len(&self) -> usize {
        self.text.len() // byte-level ids, one per byte
    }
}

/// Load documents from a text file (one document per line) or from a
/// directory of `.txt` files (one document per file, sorted by name).
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        files.sort();
        for f in files {
            let text = std::fs::read_to_string(&f)?;
            let text = text.trim_end_matches('\n');
            if !text.is_empty() {
                docs.push(Document::new(f.display().to_string(), text)?);
            }
        }
    } else {
        let content = std::fs::read_to_string(path)?;
        for (i, line) in content.lines().enumerate() {
            if !line.is_empty() {
                docs.push(Document::new(
                    format!("{}:{}", path.display(), i + 1),
                    line,
                )?);
            }
        }
    }
    if docs.is_empty() {
        return Err(Error::data(format!("{path:?}: no documents found")));
    }
    Ok(docs)
}

/// One packed sequence. `real[t]` marks non-padding positions;
/// `loss_mask[t]` marks positions that may be scored as prediction
/// targets (real tokens, minus document-opening tokens when
/// cross-document masking is on).
#[derive(Clone, Debug)]
pub struct PackedRow {
    pub tokens: Vec<usize>,
    pub real: Vec<bool>,
    pub loss_mask: Vec<bool>,
}

/// Token matrix produced by [`pack_documents`].
#[derive(Clone, Debug)]
pub struct PackedData {
    pub seq_len: usize,
    pub rows: Vec<PackedRow>,
}

impl PackedData {
    /// Real (non-padding) token count across all rows.
    pub fn token_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.real.iter().filter(|&&x| x).count())
            .sum()
    }

    pub fn padding_count(&self) -> usize {
        self.rows.len() * self.seq_len - self.token_count()
    }
}

/// Greedy packing: every document becomes `BOS tokens EOS`, the streams
/// are concatenated in order and cut into `seq_len` rows; the final
/// partial row is right-padded with masked-out zeros.
pub fn pack_documents(
    docs: &[Document],
    seq_len: usize,
    mask_cross_doc: bool,
) -> Result<PackedData> {
    if seq_len < 3 {
        return Err(Error::contract(
            "seq_len must be >= 3 to fit BOS, a token, and EOS",
        ));
    }
    let mut stream = Vec::new();
    for d in docs {
        stream.push(BOS);
        stream.extend(tokenize(&d.text));
        stream.push(EOS);
    }
    let mut rows = Vec::with_capacity(stream.len().div_ceil(seq_len));
    for chunk in stream.chunks(seq_len) {
        let mut tokens = chunk.to_vec();
        let real = tokens.len();
        tokens.resize(seq_len, 0);
        let mut loss_mask = vec![false; seq_len];
        let mut real_mask = vec![false; seq_len];
        for t in 0..real {
            real_mask[t] = true;
            loss_mask[t] = !(mask_cross_doc && tokens[t] == BOS);
        }
        rows.push(PackedRow {
            tokens,
            loss_mask,
            real: real_mask,
        });
    }
    Ok(PackedData { seq_len, rows })
}

/// Store packed rows in the blob container: `tokens`, `mask` (loss
/// mask), and `real` (non-padding flags) as `[rows, seq_len]` tensors.
pub fn save_packed(path: &Path, packed: &PackedData) -> Result<()> {
    use crate::tensor::{DType, Tensor};
    let rows = packed.rows.len();
    let n = packed.seq_len;
    let mut tokens = Vec::with_capacity(rows * n);
    let mut mask = Vec::with_capacity(rows * n);
    let mut real = Vec::with_capacity(rows * n);
    for r in &packed.rows {
        tokens.extend(r.tokens.iter().map(|&t| t as f64));
        mask.extend(r.loss_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        real.extend(r.real.iter().map(|&m| if m { 1.0 } else { 0.0 }));
    }
    let shape = vec![rows, n];
    let tokens = Tensor::from_vec(shape.clone(), tokens, DType::F32);
    let mask = Tensor::from_vec(shape.clone(), mask, DType::F32);
    let real = Tensor::from_vec(shape, real, DType::F32);
    let cfg = format!("rows={rows}\nseq_len={n}\n");
    crate::blobio::write_blobs(
        path,
        &cfg,
        &[
            ("tokens".to_string(), &tokens),
            ("mask".to_string(), &mask),
            ("real".to_string(), &real),
        ],
    )
}

pub fn load_packed(path: &Path) -> Result<PackedData> {
    let (_, blobs) = crate::blobio::read_blobs(path)?;
    let find = |name: &str| -> Result<&crate::tensor::Tensor> {
        blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::data(format!("{path:?}: missing tensor {name:?}")))
    };
    let tokens = find("tokens")?;
    let mask = find("mask")?;
    let real = find("real")?;
    if tokens.rank() != 2 || tokens.shape() != mask.shape() || tokens.shape() != real.shape() {
        return Err(Error::data(format!(
            "{path:?}: inconsistent packed tensor shapes"
        )));
    }
    let (rows, n) = (tokens.shape()[0], tokens.shape()[1]);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let tok: Vec<usize> = tokens.data()[r * n..(r + 1) * n]
            .iter()
            .map(|&x| x as usize)
            .collect();
        if tok.iter().any(|&t| t >= VOCAB_SIZE) {
            return Err(Error::data(format!(
                "{path:?}: token id out of range in row {r}"
            )));
        }
        out.push(PackedRow {
            tokens: tok,
            loss_mask: mask.data()[r * n..(r + 1) * n]
                .iter()
                .map(|&x| x != 0.0)
                .collect(),
            real: real.data()[r * n..(r + 1) * n]
                .iter()
                .map(|&x| x != 0.0)
                .collect(),
        });
    }
    Ok(PackedData {
        seq_len: n,
        rows: out,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LengthBucket {
    pub min_len: usize,
    pub max_len: usize,
    pub doc_ids: Vec<String>,
}

/// Doubling length buckets `[1, 128], [129, 256], ..., (x/2, x]` up to
/// `2^max_exponent` tokens; every document lands in exactly one bucket.
pub fn bucket_by_length(docs: &[Document], max_exponent: u32) -> Result<Vec<LengthBucket>> {
    if max_exponent < 7 {
        return Err(Error::config(
            "max_exponent must be at least 7 (first bucket is 1..=128)",
        ));
    }
    let mut bounds = vec![(1usize, 128usize)];
    let mut hi = 128usize;
    while hi < (1usize << max_exponent) {
        bounds.push((hi + 1, hi * 2));
        hi *= 2;
    }
    let mut buckets: Vec<LengthBucket> = bounds
        .iter()
        .map(|&(min_len, max_len)| LengthBucket {
            min_len,
            max_len,
            doc_ids: Vec::new(),
        })
        .collect();
    for d in docs {
        let len = d.token_len();
        let idx = buckets
            .iter()
            .position(|b| len >= b.min_len && len <= b.max_len)
            .ok_or_else(|| {
                Error::data(format!(
                    "document {:?} has {} tokens, beyond the top bucket of {}",
                    d.id,
                    len,
                    1usize << max_exponent
                ))
            })?;
        buckets[idx].doc_ids.push(d.id.clone());
    }
    Ok(buckets)
}

/// Synthetic corpus of repeated patterns: each document is one pattern of
/// `pattern_len` distinct printable bytes repeated `repeats` times.
/// Trivially learnable from short context, which makes it a clean probe
/// for architecture-parity checks.
pub fn synthetic_pattern_corpus(
    n_docs: usize,
    pattern_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Document>> {
    let printable: Vec<u8> = (33u8..127).collect();
    if pattern_len > printable.len() {
        return Err(Error::contract(format!(
            "pattern_len {} exceeds the {} distinct printable bytes",
            pattern_len,
            printable.len()
        )));
    }
    let mut r = rng::stream(seed, "synthetic-patterns");
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let mut alphabet = printable.clone();
        alphabet.shuffle(&mut r);
        let pattern: Vec<u8> = alphabet[..pattern_len].to_vec();
        let mut bytes = Vec::with_capacity(pattern_len * repeats);
        for _ in 0..repeats {
            bytes.extend(&pattern);
        }
        docs.push(Document::new(
            format!("pattern-{i:03}"),
            String::from_utf8(bytes).expect("printable ASCII"),
        )?);
    }
    Ok(docs)
}

/// Deterministic row order for an epoch.
pub fn shuffled_row_order(n_rows: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut r = rng::stream(seed, &format!("data-order-{epoch}"));
    order.shuffle(&mut r);
    order
}

/// Random valid UTF-8 string for round-trip tests.
pub fn random_text(r: &mut rand_chacha::ChaCha8Rng, max_chars: usize) -> String {
    let n = r.gen_range(0..=max_chars);
    (0..n)
        .map(|_| {
            // mix ASCII with multi-byte code points
            match r.gen_range(0..4) {
                0 => char::from(r.gen_range(b' '..b'~')),
                1 => char::from_u32(r.gen_range(0xA0..0x2FF)).unwrap_or('x'),
                2 => char::from_u32(r.gen_range(0x3040..0x30FF)).unwrap_or('y'),
                _ => char::from_u32(r.gen_range(0x1F300..0x1F64F)).unwrap_or('z'),
            }
        })
        .collect()
}
