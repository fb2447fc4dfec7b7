//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes; inputs always have smaller
//! ids than the nodes consuming them, so the tape is acyclic by construction
//! and a single reverse sweep implements the chain rule. Graphs are rebuilt
//! per forward pass.
//!
//! Shape mismatches panic with messages naming both shapes; conditions that
//! depend on runtime data (degenerate softmax rows, bad targets) return
//! [`Error`].

use rayon::prelude::*;

use crate::error::Error;
use crate::tensor::{broadcast_shapes, strides_of, BroadcastMap, DType, Tensor};
use crate::Result;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Adds a constant (non-differentiable) tensor, broadcast to `a`.
    AddConst {
        a: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    AddScalar {
        a: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Permute {
        a: NodeId,
        axes: Vec<usize>,
    },
    Reshape {
        a: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        a: NodeId,
        starts: Vec<usize>,
    },
    Pad {
        a: NodeId,
        lo: Vec<usize>,
    },
    SumAxis {
        a: NodeId,
        axis: usize,
    },
    SumAll {
        a: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu {
        a: NodeId,
    },
    SoftmaxMasked {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        ignored: Vec<bool>,
        count: usize,
    },
    /// Rotation of conjugate pairs; `cos`/`sin` are per (row, pair) tables.
    Rope {
        a: NodeId,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
}

struct Node {
    op: Op,
    out: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// Multiply-accumulate count for attention score/context contractions,
    /// maintained by the attention module (admissible pairs only).
    pub attn_macs: u128,
}

/// Work size below which a matmul stays single-threaded.
const PAR_MACS: usize = 1 << 15;

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].out
    }

    /// Gradient buffer of a node; only valid after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> &[f64] {
        self.grads[id.0]
            .as_deref()
            .expect("gradient requested before backward()")
    }

    fn push(&mut self, op: Op, out: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, out });
        id
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.broadcast_binary(a, b, |x, y| x + y, "add");
        self.push(Op::Add { a, b }, out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.broadcast_binary(a, b, |x, y| x * y, "mul");
        self.push(Op::Mul { a, b }, out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data, ta.dtype());
        self.push(Op::Scale { a, c }, out)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|x| x + c).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data, ta.dtype());
        self.push(Op::AddScalar { a }, out)
    }

    /// Add a constant tensor (no gradient flows into it), broadcast to `a`.
    pub fn add_const(&mut self, a: NodeId, t: &Tensor) -> NodeId {
        let ta = self.value(a);
        assert!(
            t.rank() <= ta.rank(),
            "add_const {:?} does not broadcast onto {:?}",
            t.shape(),
            ta.shape()
        );
        let map = BroadcastMap::new(ta.shape(), t.shape());
        let td = t.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + td[map.map(i)])
            .collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data, ta.dtype());
        self.push(Op::AddConst { a }, out)
    }

    fn broadcast_binary(
        &self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        name: &str,
    ) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let dtype = ta.dtype().combine(tb.dtype());
        if ta.shape() == tb.shape() {
            let data: Vec<f64> = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            return Tensor::from_vec(ta.shape().to_vec(), data, dtype);
        }
        let out_shape = broadcast_shapes(ta.shape(), tb.shape()).unwrap_or_else(|| {
            panic!(
                "{name}: shapes {:?} and {:?} do not broadcast",
                ta.shape(),
                tb.shape()
            )
        });
        let ma = BroadcastMap::new(&out_shape, ta.shape());
        let mb = BroadcastMap::new(&out_shape, tb.shape());
        let numel: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = (0..numel)
            .map(|i| f(da[ma.map(i)], db[mb.map(i)]))
            .collect();
        Tensor::from_vec(out_shape, data, dtype)
    }

    // ── contraction ─────────────────────────────────────────────────────

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`;
    /// leading dimensions broadcast.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = matmul_forward(ta, tb);
        self.push(Op::MatMul { a, b }, out)
    }

    // ── shape ───────────────────────────────────────────────────────────

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let ta = self.value(a);
        let out = permute_tensor(ta, axes);
        self.push(
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            out,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let out = self.value(a).reshaped(shape);
        self.push(Op::Reshape { a }, out)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let first = self.value(inputs[0]).shape().to_vec();
        let mut axis_total = 0;
        let mut dtype = DType::F32;
        for &id in inputs {
            let t = self.value(id);
            assert_eq!(t.rank(), first.len(), "concat rank mismatch");
            for (d, (&sd, &fd)) in t.shape().iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(
                        sd,
                        fd,
                        "concat: shapes {:?} vs {:?} differ off axis {}",
                        t.shape(),
                        first,
                        axis
                    );
                }
            }
            axis_total += t.shape()[axis];
            dtype = dtype.combine(t.dtype());
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let row = axis_total * inner;
        let mut offset = 0;
        for &id in inputs {
            let t = self.value(id);
            let ad = t.shape()[axis];
            let td = t.data();
            for o in 0..outer {
                let src = &td[o * ad * inner..(o + 1) * ad * inner];
                let dst_at = o * row + offset * inner;
                data[dst_at..dst_at + ad * inner].copy_from_slice(src);
            }
            offset += ad;
        }
        let out = Tensor::from_vec(out_shape, data, dtype);
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
        )
    }

    /// Sub-block starting at `starts` with extent `lens` per axis.
    pub fn slice(&mut self, a: NodeId, starts: &[usize], lens: &[usize]) -> NodeId {
        let ta = self.value(a);
        assert_eq!(starts.len(), ta.rank(), "slice rank mismatch");
        assert_eq!(lens.len(), ta.rank(), "slice rank mismatch");
        for d in 0..ta.rank() {
            assert!(
                starts[d] + lens[d] <= ta.shape()[d],
                "slice [{}, {}) exceeds dim {} of {:?}",
                starts[d],
                starts[d] + lens[d],
                d,
                ta.shape()
            );
        }
        let out = copy_region(ta.data(), ta.shape(), starts, lens);
        let out = Tensor::from_vec(lens.to_vec(), out, ta.dtype());
        self.push(
            Op::Slice {
                a,
                starts: starts.to_vec(),
            },
            out,
        )
    }

    /// Zero padding; `lo[d]` leading and `hi[d]` trailing zeros per axis.
    pub fn pad(&mut self, a: NodeId, lo: &[usize], hi: &[usize]) -> NodeId {
        let ta = self.value(a);
        assert_eq!(lo.len(), ta.rank(), "pad rank mismatch");
        assert_eq!(hi.len(), ta.rank(), "pad rank mismatch");
        let out_shape: Vec<usize> = ta
            .shape()
            .iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(&d, (&l, &h))| d + l + h)
            .collect();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        paste_region(&mut data, &out_shape, lo, ta.data(), ta.shape());
        let out = Tensor::from_vec(out_shape, data, ta.dtype());
        self.push(Op::Pad { a, lo: lo.to_vec() }, out)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let ta = self.value(a);
        assert!(axis < ta.rank(), "sum_axis {} of rank {}", axis, ta.rank());
        let shape = ta.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        let td = ta.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &td[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out = Tensor::from_vec(out_shape, data, ta.dtype());
        self.push(Op::SumAxis { a, axis }, out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum();
        let out = Tensor::scalar(s, ta.dtype());
        self.push(Op::SumAll { a }, out)
    }

    // ── neural-net ops ──────────────────────────────────────────────────

    /// Row gather: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    /// Ids must be validated by the caller.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tt = self.value(table);
        assert_eq!(tt.rank(), 2, "embedding table must be [vocab, dim]");
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let td = tt.data();
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "token id {id} out of vocab {v}");
            data[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data, tt.dtype());
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    /// Normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().expect("layer_norm on empty shape");
        assert_eq!(
            tg.shape(),
            &[d],
            "layer_norm gain {:?} vs feature dim {}",
            tg.shape(),
            d
        );
        assert_eq!(
            tb.shape(),
            &[d],
            "layer_norm bias {:?} vs feature dim {}",
            tb.shape(),
            d
        );
        let rows = tx.numel() / d;
        let (xd, gd, bd) = (tx.data(), tg.data(), tb.data());
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let xrow = &xd[r * d..(r + 1) * d];
            let mean = xrow.iter().sum::<f64>() / d as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (xrow[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let dtype = tx.dtype().combine(tg.dtype()).combine(tb.dtype());
        let out = Tensor::from_vec(tx.shape().to_vec(), data, dtype);
        self.push(Op::LayerNorm { x, gain, bias, eps }, out)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data, ta.dtype());
        self.push(Op::Gelu { a }, out)
    }

    /// Masked softmax over the last axis. Mask entries are visible when
    /// nonzero; masked entries come out exactly zero and unmasked entries
    /// of each row sum to one. A row with no visible entry is an error.
    pub fn softmax_masked(&mut self, a: NodeId, mask: &Tensor) -> Result<NodeId> {
        self.softmax_masked_impl(a, mask, false)
    }

    /// Like [`Graph::softmax_masked`] but fully masked rows yield all-zero
    /// output rows instead of an error. Attention kernels use this for
    /// padding and invalid-query rows, whose outputs are discarded.
    pub fn softmax_masked_allow_empty(&mut self, a: NodeId, mask: &Tensor) -> NodeId {
        self.softmax_masked_impl(a, mask, true)
            .expect("allow_empty softmax cannot fail")
    }

    fn softmax_masked_impl(
        &mut self,
        a: NodeId,
        mask: &Tensor,
        allow_empty: bool,
    ) -> Result<NodeId> {
        let ta = self.value(a);
        let n = *ta.shape().last().expect("softmax on empty shape");
        let map = BroadcastMap::new(ta.shape(), mask.shape());
        assert_eq!(
            *mask.shape().last().unwrap(),
            n,
            "softmax mask {:?} vs logits {:?}",
            mask.shape(),
            ta.shape()
        );
        let rows = ta.numel() / n;
        let (ld, md) = (ta.data(), mask.data());
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            let base = r * n;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if md[map.map(base + j)] != 0.0 {
                    mx = mx.max(ld[base + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                if allow_empty {
                    continue; // row stays zero
                }
                return Err(Error::DegenerateRow { row: r });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if md[map.map(base + j)] != 0.0 {
                    let e = (ld[base + j] - mx).exp();
                    data[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[base + j] /= sum;
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data, ta.dtype());
        Ok(self.push(Op::SoftmaxMasked { a }, out))
    }

    /// Mean negative log-likelihood over non-ignored rows of
    /// `[..., vocab]` logits. `exp` of the result is perplexity.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignored: &[bool],
    ) -> Result<NodeId> {
        let tl = self.value(logits);
        let v = *tl.shape().last().expect("cross_entropy on empty shape");
        let rows = tl.numel() / v;
        assert_eq!(
            targets.len(),
            rows,
            "cross_entropy targets vs {} rows",
            rows
        );
        assert_eq!(
            ignored.len(),
            rows,
            "cross_entropy ignore mask vs {} rows",
            rows
        );
        let count = ignored.iter().filter(|&&ig| !ig).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy: all positions ignored"));
        }
        let ld = tl.data();
        let mut total = 0.0;
        for r in 0..rows {
            if ignored[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "target id",
                    value: t,
                    limit: v,
                });
            }
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            total -= row[t] - lse;
        }
        let out = Tensor::scalar(total / count as f64, tl.dtype());
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignored: ignored.to_vec(),
                count,
            },
            out,
        ))
    }

    /// Rotate conjugate pairs of `[rows, heads, head_dim]` by per-row angle
    /// tables (`cos`/`sin` are `[rows, head_dim/2]`, row-major). Pair `i`
    /// couples dimensions `i` and `i + head_dim/2`.
    pub fn rope(&mut self, a: NodeId, cos: &[f64], sin: &[f64]) -> NodeId {
        let ta = self.value(a);
        assert_eq!(
            ta.rank(),
            3,
            "rope expects [rows, heads, head_dim], got {:?}",
            ta.shape()
        );
        let (rows, heads, hd) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert_eq!(hd % 2, 0, "rope head_dim {hd} must be even");
        let half = hd / 2;
        assert_eq!(cos.len(), rows * half, "rope cos table length");
        assert_eq!(sin.len(), rows * half, "rope sin table length");
        let xd = ta.data();
        let mut data = vec![0.0; ta.numel()];
        for r in 0..rows {
            for h in 0..heads {
                let base = (r * heads + h) * hd;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (xa, xb) = (xd[base + i], xd[base + half + i]);
                    data[base + i] = xa * c - xb * s;
                    data[base + half + i] = xa * s + xb * c;
                }
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data, ta.dtype());
        self.push(
            Op::Rope {
                a,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
            out,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node; gradients of every node
    /// reachable from the loss are accumulated and readable via
    /// [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| Some(vec![0.0; n.out.numel()]))
            .collect();
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = self.grads[i].take().unwrap();
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, contrib: &[f64]) {
        let buf = self.grads[id.0].as_mut().expect("grad buffer missing");
        debug_assert_eq!(buf.len(), contrib.len());
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[i].out.shape().to_vec();
                let da = reduce_to_shape(g, &out_shape, self.value(a).shape());
                let db = reduce_to_shape(g, &out_shape, self.value(b).shape());
                self.accum(a, &da);
                self.accum(b, &db);
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[i].out.shape().to_vec();
                let (ta, tb) = (self.value(a), self.value(b));
                let ma = BroadcastMap::new(&out_shape, ta.shape());
                let mb = BroadcastMap::new(&out_shape, tb.shape());
                let (da_full, db_full): (Vec<f64>, Vec<f64>) = {
                    let (ad, bd) = (ta.data(), tb.data());
                    (
                        g.iter()
                            .enumerate()
                            .map(|(j, gv)| gv * bd[mb.map(j)])
                            .collect(),
                        g.iter()
                            .enumerate()
                            .map(|(j, gv)| gv * ad[ma.map(j)])
                            .collect(),
                    )
                };
                let da = reduce_to_shape(&da_full, &out_shape, self.value(a).shape());
                let db = reduce_to_shape(&db_full, &out_shape, self.value(b).shape());
                self.accum(a, &da);
                self.accum(b, &db);
            }

            Op::AddConst { a } | Op::AddScalar { a } => {
                let a = *a;
                self.accum(a, g);
            }

            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.accum(a, &da);
            }

            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (da, db) = matmul_backward(self.value(a), self.value(b), g);
                self.accum(a, &da);
                self.accum(b, &db);
            }

            Op::Permute { a, axes } => {
                let a = *a;
                let axes = axes.clone();
                let mut inv = vec![0; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inv[ax] = d;
                }
                let out_shape = self.nodes[i].out.shape().to_vec();
                let da = permute_raw(g, &out_shape, &inv);
                self.accum(a, &da);
            }

            Op::Reshape { a } => {
                let a = *a;
                self.accum(a, g);
            }

            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].out.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut offset = 0;
                for id in inputs {
                    let ad = self.value(id).shape()[axis];
                    let mut da = vec![0.0; self.value(id).numel()];
                    for o in 0..outer {
                        let src_at = o * row + offset * inner;
                        da[o * ad * inner..(o + 1) * ad * inner]
                            .copy_from_slice(&g[src_at..src_at + ad * inner]);
                    }
                    self.accum(id, &da);
                    offset += ad;
                }
            }

            Op::Slice { a, starts } => {
                let a = *a;
                let starts = starts.clone();
                let out_shape = self.nodes[i].out.shape().to_vec();
                let in_shape = self.value(a).shape().to_vec();
                let mut da = vec![0.0; self.value(a).numel()];
                paste_region(&mut da, &in_shape, &starts, g, &out_shape);
                self.accum(a, &da);
            }

            Op::Pad { a, lo } => {
                let a = *a;
                let lo = lo.clone();
                let out_shape = self.nodes[i].out.shape().to_vec();
                let in_shape = self.value(a).shape().to_vec();
                let da = copy_region(g, &out_shape, &lo, &in_shape);
                self.accum(a, &da);
            }

            Op::SumAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let in_shape = self.value(a).shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let len = in_shape[axis];
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut da = vec![0.0; self.value(a).numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accum(a, &da);
            }

            Op::SumAll { a } => {
                let a = *a;
                let da = vec![g[0]; self.value(a).numel()];
                self.accum(a, &da);
            }

            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.value(table).shape()[1];
                let mut da = vec![0.0; self.value(table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut da[id * d..(id + 1) * d];
                    let src = &g[r * d..(r + 1) * d];
                    for (x, y) in dst.iter_mut().zip(src) {
                        *x += y;
                    }
                }
                self.accum(table, &da);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let tx = self.value(x);
                let d = *tx.shape().last().unwrap();
                let rows = tx.numel() / d;
                let xd = tx.data().to_vec();
                let gd = self.value(gain).data().to_vec();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gd[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }

            Op::Gelu { a } => {
                let a = *a;
                let xd = self.value(a).data().to_vec();
                let da: Vec<f64> = g.iter().zip(&xd).map(|(gv, &x)| gv * gelu_bwd(x)).collect();
                self.accum(a, &da);
            }

            Op::SoftmaxMasked { a } => {
                let a = *a;
                let out = self.nodes[i].out.data().to_vec();
                let n = *self.nodes[i].out.shape().last().unwrap();
                let rows = out.len() / n;
                let mut da = vec![0.0; out.len()];
                for r in 0..rows {
                    let base = r * n;
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[base + j] * out[base + j];
                    }
                    for j in 0..n {
                        da[base + j] = out[base + j] * (g[base + j] - dot);
                    }
                }
                self.accum(a, &da);
            }

            Op::CrossEntropy {
                logits,
                targets,
                ignored,
                count,
            } => {
                let logits = *logits;
                let (targets, ignored, count) = (targets.clone(), ignored.clone(), *count);
                let tl = self.value(logits);
                let v = *tl.shape().last().unwrap();
                let rows = tl.numel() / v;
                let ld = tl.data().to_vec();
                let mut da = vec![0.0; ld.len()];
                let scale = g[0] / count as f64;
                for r in 0..rows {
                    if ignored[r] {
                        continue;
                    }
                    let row = &ld[r * v..(r + 1) * v];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..v {
                        let p = exps[c] / sum;
                        let ind = if c == targets[r] { 1.0 } else { 0.0 };
                        da[r * v + c] = scale * (p - ind);
                    }
                }
                self.accum(logits, &da);
            }

            Op::Rope { a, cos, sin } => {
                let a = *a;
                let (cos, sin) = (cos.clone(), sin.clone());
                let shape = self.value(a).shape().to_vec();
                let (rows, heads, hd) = (shape[0], shape[1], shape[2]);
                let half = hd / 2;
                let mut da = vec![0.0; rows * heads * hd];
                for r in 0..rows {
                    for h in 0..heads {
                        let base = (r * heads + h) * hd;
                        for p in 0..half {
                            let (c, s) = (cos[r * half + p], sin[r * half + p]);
                            let (ga, gb) = (g[base + p], g[base + half + p]);
                            // transpose of the rotation
                            da[base + p] = ga * c + gb * s;
                            da[base + half + p] = -ga * s + gb * c;
                        }
                    }
                }
                self.accum(a, &da);
            }
        }
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

pub(crate) fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

/// `out[i, :] += a[i, p] * b[p, :]` over a 2-D tile.
fn matmul_tile(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn matmul_dims(
    ta: &Tensor,
    tb: &Tensor,
) -> (Vec<usize>, usize, usize, usize, Vec<usize>, Vec<usize>) {
    assert!(
        ta.rank() >= 2 && tb.rank() >= 2,
        "matmul requires rank >= 2, got {:?} x {:?}",
        ta.shape(),
        tb.shape()
    );
    let (ra, rb) = (ta.rank(), tb.rank());
    let (m, ka) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
    let (kb, n) = (tb.shape()[rb - 2], tb.shape()[rb - 1]);
    assert_eq!(
        ka,
        kb,
        "matmul inner dimensions differ: {:?} x {:?}",
        ta.shape(),
        tb.shape()
    );
    let batch_a = ta.shape()[..ra - 2].to_vec();
    let batch_b = tb.shape()[..rb - 2].to_vec();
    let batch = broadcast_shapes(&batch_a, &batch_b).unwrap_or_else(|| {
        panic!(
            "matmul batch dimensions do not broadcast: {:?} x {:?}",
            ta.shape(),
            tb.shape()
        )
    });
    (batch, m, ka, n, batch_a, batch_b)
}

fn matmul_forward(ta: &Tensor, tb: &Tensor) -> Tensor {
    let (batch, m, k, n, batch_a, batch_b) = matmul_dims(ta, tb);
    let nbatch: usize = batch.iter().product();
    let map_a = BroadcastMap::new(&batch, &batch_a);
    let map_b = BroadcastMap::new(&batch, &batch_b);
    let (ad, bd) = (ta.data(), tb.data());
    let mut out = vec![0.0; nbatch * m * n];
    let work = nbatch * m * k * n;
    let run = |(bo, chunk): (usize, &mut [f64])| {
        let a = &ad[map_a.map(bo) * m * k..map_a.map(bo) * m * k + m * k];
        let b = &bd[map_b.map(bo) * k * n..map_b.map(bo) * k * n + k * n];
        matmul_tile(chunk, a, b, m, k, n);
    };
    if work >= PAR_MACS && nbatch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(run);
    } else if work >= PAR_MACS && m > 1 {
        // single batch: split rows
        let a = &ad[..m * k];
        let b = &bd[..k * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| {
            matmul_tile(orow, &a[i * k..(i + 1) * k], b, 1, k, n);
        });
    } else {
        for pair in out.chunks_mut(m * n).enumerate() {
            run(pair);
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Tensor::from_vec(out_shape, out, ta.dtype().combine(tb.dtype()))
}

fn matmul_backward(ta: &Tensor, tb: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (batch, m, k, n, batch_a, batch_b) = matmul_dims(ta, tb);
    let nbatch: usize = batch.iter().product();
    let map_a = BroadcastMap::new(&batch, &batch_a);
    let map_b = BroadcastMap::new(&batch, &batch_b);
    let (ad, bd) = (ta.data(), tb.data());
    let mut da = vec![0.0; ta.numel()];
    let mut db = vec![0.0; tb.numel()];
    let work = nbatch * m * k * n;

    // dA[i, p] += sum_j g[i, j] * B[p, j]
    let da_tile = |da_s: &mut [f64], g_s: &[f64], b_s: &[f64]| {
        for i in 0..m {
            let grow = &g_s[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b_s[p * n..(p + 1) * n];
                let mut s = 0.0;
                for (gv, bv) in grow.iter().zip(brow) {
                    s += gv * bv;
                }
                da_s[i * k + p] += s;
            }
        }
    };
    // dB[p, j] += sum_i A[i, p] * g[i, j]
    let db_tile = |db_s: &mut [f64], g_s: &[f64], a_s: &[f64]| {
        for i in 0..m {
            let grow = &g_s[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a_s[i * k + p];
                let drow = &mut db_s[p * n..(p + 1) * n];
                for (dv, gv) in drow.iter_mut().zip(grow) {
                    *dv += aip * gv;
                }
            }
        }
    };

    if work >= PAR_MACS && nbatch > 1 && map_a.is_identity() {
        da.par_chunks_mut(m * k)
            .enumerate()
            .for_each(|(bo, chunk)| {
                let b = &bd[map_b.map(bo) * k * n..map_b.map(bo) * k * n + k * n];
                da_tile(chunk, &g[bo * m * n..(bo + 1) * m * n], b);
            });
    } else {
        for bo in 0..nbatch {
            let off = map_a.map(bo) * m * k;
            let b = &bd[map_b.map(bo) * k * n..map_b.map(bo) * k * n + k * n];
            // accumulate into a temp slice view
            let (head, tail) = da.split_at_mut(off);
            let _ = head;
            da_tile(&mut tail[..m * k], &g[bo * m * n..(bo + 1) * m * n], b);
        }
    }

    if work >= PAR_MACS && nbatch > 1 && map_b.is_identity() {
        db.par_chunks_mut(k * n)
            .enumerate()
            .for_each(|(bo, chunk)| {
                let a = &ad[map_a.map(bo) * m * k..map_a.map(bo) * m * k + m * k];
                db_tile(chunk, &g[bo * m * n..(bo + 1) * m * n], a);
            });
    } else {
        for bo in 0..nbatch {
            let off = map_b.map(bo) * k * n;
            let a = &ad[map_a.map(bo) * m * k..map_a.map(bo) * m * k + m * k];
            let (head, tail) = db.split_at_mut(off);
            let _ = head;
            db_tile(&mut tail[..k * n], &g[bo * m * n..(bo + 1) * m * n], a);
        }
    }
    (da, db)
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    assert_eq!(
        axes.len(),
        t.rank(),
        "permute axes {:?} vs rank {}",
        axes,
        t.rank()
    );
    let mut seen = vec![false; axes.len()];
    for &a in axes {
        assert!(
            a < axes.len() && !seen[a],
            "permute axes {axes:?} not a permutation"
        );
        seen[a] = true;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let data = permute_raw(t.data(), t.shape(), axes);
    Tensor::from_vec(out_shape, data, t.dtype())
}

/// Rearrange `data` (shape `in_shape`) so axis `axes[d]` becomes axis `d`.
fn permute_raw(data: &[f64], in_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = vec![0.0; numel];
    let rank = out_shape.len();
    for (of, o) in out.iter_mut().enumerate() {
        let mut rem = of;
        let mut inf = 0;
        for d in (0..rank).rev() {
            let c = rem % out_shape[d];
            rem /= out_shape[d];
            inf += c * perm_strides[d];
        }
        *o = data[inf];
    }
    out
}

/// Copy the region of `src` at `starts` with extent `lens` into a new buffer.
fn copy_region(src: &[f64], src_shape: &[usize], starts: &[usize], lens: &[usize]) -> Vec<f64> {
    let src_strides = strides_of(src_shape);
    let numel: usize = lens.iter().product();
    let rank = lens.len();
    let mut out = vec![0.0; numel];
    for (of, o) in out.iter_mut().enumerate() {
        let mut rem = of;
        let mut sf = 0;
        for d in (0..rank).rev() {
            let c = rem % lens[d];
            rem /= lens[d];
            sf += (starts[d] + c) * src_strides[d];
        }
        *o = src[sf];
    }
    out
}

/// Add `src` (shape `src_shape`) into `dst` (shape `dst_shape`) at `offsets`.
fn paste_region(
    dst: &mut [f64],
    dst_shape: &[usize],
    offsets: &[usize],
    src: &[f64],
    src_shape: &[usize],
) {
    let dst_strides = strides_of(dst_shape);
    let rank = src_shape.len();
    for (sf, s) in src.iter().enumerate() {
        let mut rem = sf;
        let mut df = 0;
        for d in (0..rank).rev() {
            let c = rem % src_shape[d];
            rem /= src_shape[d];
            df += (offsets[d] + c) * dst_strides[d];
        }
        dst[df] += s;
    }
}

/// Sum `grad` (shape `grad_shape`) down to `target_shape`, undoing broadcast.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let map = BroadcastMap::new(grad_shape, target_shape);
    let numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; numel];
    for (i, gv) in grad.iter().enumerate() {
        out[map.map(i)] += gv;
    }
    out
}

// ── gradient checking ───────────────────────────────────────────────────

pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Analytic-vs-numeric gradient comparison for one scalar function.
pub struct GradReport {
    pub per_param: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Compare the tape gradient of `f` against central differences
/// `(f(p+h) - f(p-h)) / 2h` for every element of every parameter.
///
/// `f` must deterministically build a scalar loss from the given leaves.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = f(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::contract("grad_check: loss is not scalar"));
        }
        Ok(g.value(loss).data()[0])
    };

    // analytic gradients
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &ids)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::contract("grad_check: loss is not scalar"));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for e in 0..tensors[p].numel() {
            let mut plus = tensors.clone();
            {
                let t = &mut plus[p];
                t.data_mut()[e] += step;
            }
            let mut minus = tensors.clone();
            {
                let t = &mut minus[p];
                t.data_mut()[e] -= step;
            }
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[p][e];
            // denominator floor keeps finite-difference cancellation noise
            // (~1e-10 for O(1) losses at step 1e-5) from dominating
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_rel,
        });
    }
    Ok(GradReport {
        per_param,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "graph-test");
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), rng::uniform_vec(&mut r, n), DType::F64)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], DType::F64);
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], DType::F64);
        let (ni, na) = (g.leaf(&i2), g.leaf(&a));
        let c = g.matmul(ni, na);
        assert_eq!(g.value(c).data(), a.data());
    }

    #[test]
    fn matmul_dot() {
        let mut g = Graph::new();
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0], DType::F64);
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0], DType::F64);
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(na, nb);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    // triple-loop oracle, independent of the tiled kernel
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[4, 5], 2);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(na, nb);
        let want = matmul_oracle(a.data(), b.data(), 3, 4, 5);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_batched_broadcast() {
        // [2, 3, 4] x [4, 5] broadcasts the rhs over the batch
        let a = rand_tensor(&[2, 3, 4], 3);
        let b = rand_tensor(&[4, 5], 4);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(na, nb);
        assert_eq!(g.value(c).shape(), &[2, 3, 5]);
        for batch in 0..2 {
            let want = matmul_oracle(&a.data()[batch * 12..(batch + 1) * 12], b.data(), 3, 4, 5);
            let got = &g.value(c).data()[batch * 15..(batch + 1) * 15];
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_associativity() {
        let a = rand_tensor(&[4, 6], 10);
        let b = rand_tensor(&[6, 3], 11);
        let c = rand_tensor(&[3, 5], 12);
        let mut g = Graph::new();
        let (na, nb, nc) = (g.leaf(&a), g.leaf(&b), g.leaf(&c));
        let ab_c = {
            let ab = g.matmul(na, nb);
            g.matmul(ab, nc)
        };
        let a_bc = {
            let bc = g.matmul(nb, nc);
            g.matmul(na, bc)
        };
        let max: f64 = g
            .value(ab_c)
            .data()
            .iter()
            .zip(g.value(a_bc).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-8, "associativity deviation {max}");
    }

    #[test]
    #[should_panic(expected = "inner dimensions differ")]
    fn matmul_shape_mismatch_names_shapes() {
        let a = rand_tensor(&[2, 3], 5);
        let b = rand_tensor(&[4, 2], 6);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let _ = g.matmul(na, nb);
    }

    #[test]
    fn softmax_masked_basics() {
        let mut g = Graph::new();
        let logits = Tensor::from_vec(vec![2], vec![0.0, 0.0], DType::F64);
        let mask = Tensor::from_vec(vec![2], vec![1.0, 1.0], DType::F64);
        let nl = g.leaf(&logits);
        let s = g.softmax_masked(nl, &mask).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let logits = Tensor::from_vec(vec![2], vec![5.0, 1234.0], DType::F64);
        let mask = Tensor::from_vec(vec![2], vec![1.0, 0.0], DType::F64);
        let nl = g.leaf(&logits);
        let s = g.softmax_masked(nl, &mask).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let mut g = Graph::new();
        let logits = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0], DType::F64);
        let mask = Tensor::from_vec(vec![3], vec![1.0; 3], DType::F64);
        let nl = g.leaf(&logits);
        let s = g.softmax_masked(nl, &mask).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (j, x) in g.value(s).data().iter().enumerate() {
            let want = ((j + 1) as f64).exp() / z;
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut g = Graph::new();
        let logits = Tensor::from_vec(vec![2, 2], vec![1.0; 4], DType::F64);
        let mask = Tensor::from_vec(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0], DType::F64);
        let nl = g.leaf(&logits);
        match g.softmax_masked(nl, &mask) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row error, got {other:?}"),
        }
        // and the permissive entry point zeroes the row instead
        let s = g.softmax_masked_allow_empty(nl, &mask);
        assert_eq!(&g.value(s).data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_random_masks() {
        let mut r = rng::stream(9, "softmax-prop");
        for trial in 0..50 {
            let n = 2 + (trial % 7);
            let logits = Tensor::from_vec(vec![4, n], rng::uniform_vec(&mut r, 4 * n), DType::F64);
            let mut mask = vec![0.0; 4 * n];
            for row in 0..4 {
                for j in 0..n {
                    mask[row * n + j] = if rand::Rng::gen_bool(&mut r, 0.6) {
                        1.0
                    } else {
                        0.0
                    };
                }
                let lucky = rand::Rng::gen_range(&mut r, 0..n);
                mask[row * n + lucky] = 1.0; // at least one visible entry
            }
            let mask = Tensor::from_vec(vec![4, n], mask, DType::F64);
            let mut g = Graph::new();
            let nl = g.leaf(&logits);
            let s = g.softmax_masked(nl, &mask).unwrap();
            for row in 0..4 {
                let sum: f64 = g.value(s).data()[row * n..(row + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                for j in 0..n {
                    if mask.data()[row * n + j] == 0.0 {
                        assert_eq!(g.value(s).data()[row * n + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let v = 7;
        let logits = Tensor::zeros(vec![2, 3, v], DType::F64);
        let mut g = Graph::new();
        let nl = g.leaf(&logits);
        let loss = g
            .cross_entropy(nl, &[0, 1, 2, 3, 4, 5], &[false; 6])
            .unwrap();
        let got = g.value(loss).data()[0];
        assert!((got - (v as f64).ln()).abs() < 1e-12, "{got}");
    }

    #[test]
    fn cross_entropy_margin_monotone() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 2.0, 4.0, 8.0] {
            let logits = Tensor::from_vec(vec![1, 3], vec![margin, 0.0, 0.0], DType::F64);
            let mut g = Graph::new();
            let nl = g.leaf(&logits);
            let loss = g.cross_entropy(nl, &[0], &[false]).unwrap();
            let l = g.value(loss).data()[0];
            assert!(l > 0.0 && l < prev, "loss {l} should decrease from {prev}");
            prev = l;
        }
    }

    #[test]
    fn cross_entropy_matches_scalar_loop_oracle() {
        let logits = rand_tensor(&[2, 3, 5], 21);
        let targets = [1usize, 4, 0, 2, 3, 1];
        let ignored = [false, false, true, false, false, false];
        let mut g = Graph::new();
        let nl = g.leaf(&logits);
        let loss = g.cross_entropy(nl, &targets, &ignored).unwrap();

        let ld = logits.data();
        let mut total = 0.0;
        let mut cnt = 0;
        for r in 0..6 {
            if ignored[r] {
                continue;
            }
            let row = &ld[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[targets[r]].exp() / z).ln();
            cnt += 1;
        }
        let want = total / cnt as f64;
        assert!((g.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Tensor::zeros(vec![2, 3], DType::F64);
        let mut g = Graph::new();
        let nl = g.leaf(&logits);
        assert!(matches!(
            g.cross_entropy(nl, &[0, 3], &[false, false]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            g.cross_entropy(nl, &[0, 1], &[true, true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = rand_tensor(&[3, 4], 31);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let loss = g.sum_all(nx);
        g.backward(loss).unwrap();
        assert!(g.grad(nx).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_square_sum() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0], DType::F64);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let sq = g.mul(nx, nx);
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(nx), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = rand_tensor(&[3], 32);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let y = g.scale(nx, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn reshape_permute_roundtrip_bit_exact() {
        let x = rand_tensor(&[3, 4, 5], 33);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let p = g.permute(nx, &[2, 0, 1]);
        let back = g.permute(p, &[1, 2, 0]);
        assert_eq!(g.value(back).data(), x.data());
        let r = g.reshape(nx, vec![5, 12]);
        let back = g.reshape(r, vec![3, 4, 5]);
        assert_eq!(g.value(back).data(), x.data());
    }

    #[test]
    fn pad_slice_roundtrip() {
        let x = rand_tensor(&[2, 3], 34);
        let mut g = Graph::new();
        let nx = g.leaf(&x);
        let p = g.pad(nx, &[1, 0], &[0, 2]);
        assert_eq!(g.value(p).shape(), &[3, 5]);
        assert_eq!(g.value(p).data()[0..5], [0.0; 5]);
        let s = g.slice(p, &[1, 0], &[2, 3]);
        assert_eq!(g.value(s).data(), x.data());
    }

    #[test]
    fn concat_and_embedding_values() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0], DType::F64);
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0], DType::F64);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.concat(&[na, nb], 0);
        assert_eq!(g.value(c).shape(), &[3, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let table = Tensor::from_vec(
            vec![3, 2],
            vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0],
            DType::F64,
        );
        let nt = g.leaf(&table);
        let e = g.embedding(nt, &[2, 0, 2]);
        assert_eq!(g.value(e).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    }

    /// Composite graphs hit every op; gradients must match central
    /// differences.
    #[test]
    fn grad_check_covers_all_ops() {
        let shapes: [&[usize]; 3] = [&[2, 3], &[3, 3], &[4, 3]];
        for (si, shape) in shapes.iter().enumerate() {
            let x = rand_tensor(shape, 40 + si as u64);
            let w = rand_tensor(&[3, 4], 50 + si as u64);
            let gains = Tensor::full(vec![4], 1.1, DType::F64);
            let bias = Tensor::full(vec![4], 0.1, DType::F64);
            let params = vec![
                ("x".to_string(), x),
                ("w".to_string(), w),
                ("gain".to_string(), gains),
                ("bias".to_string(), bias),
            ];
            let rows = shape[0];
            let report = grad_check(
                &params,
                |g, ids| {
                    let (x, w, gain, bias) = (ids[0], ids[1], ids[2], ids[3]);
                    let h = g.matmul(x, w); // [rows, 4]
                    let h = g.layer_norm(h, gain, bias, 1e-5);
                    let h = g.gelu(h);
                    let h2 = g.scale(h, 0.7);
                    let h = g.add(h, h2);
                    let mask = Tensor::from_vec(vec![4], vec![1.0, 1.0, 0.0, 1.0], DType::F64);
                    let s = g.softmax_masked(h, &mask)?;
                    let p = g.permute(s, &[1, 0]);
                    let p = g.pad(p, &[0, 1], &[1, 0]);
                    let p = g.slice(p, &[0, 0], &[4, rows]);
                    let c = g.concat(&[p, p], 1);
                    let r = g.reshape(c, vec![4 * 2 * rows]);
                    let r = g.add_scalar(r, 0.25);
                    let sq = g.mul(r, r);
                    Ok(g.sum_all(sq))
                },
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(
                report.passed(),
                "shape {shape:?}: max rel err {}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn grad_check_matmul_and_ce() {
        for (si, rows) in [2usize, 3, 5].into_iter().enumerate() {
            let x = rand_tensor(&[rows, 4], 60 + si as u64);
            let w = rand_tensor(&[4, 6], 70 + si as u64);
            let params = vec![("x".to_string(), x), ("w".to_string(), w)];
            let targets: Vec<usize> = (0..rows).map(|r| r % 6).collect();
            let ignored = vec![false; rows];
            let report = grad_check(
                &params,
                |g, ids| {
                    let logits = g.matmul(ids[0], ids[1]);
                    g.cross_entropy(logits, &targets, &ignored)
                },
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.passed(), "rows {rows}: {}", report.max_rel_err());
        }
    }

    #[test]
    fn grad_check_embedding_sum_axis_rope() {
        for (si, (vocab, rows)) in [(5usize, 3usize), (7, 4), (9, 6)].into_iter().enumerate() {
            let table = rand_tensor(&[vocab, 6], 80 + si as u64);
            let params = vec![("table".to_string(), table)];
            let ids: Vec<usize> = (0..rows).map(|r| (r * 3 + 1) % vocab).collect();
            let cos: Vec<f64> = (0..rows * 3).map(|i| (0.1 * i as f64).cos()).collect();
            let sin: Vec<f64> = (0..rows * 3).map(|i| (0.1 * i as f64).sin()).collect();
            let report = grad_check(
                &params,
                |g, leaf| {
                    let e = g.embedding(leaf[0], &ids); // [rows, 6]
                    let r = g.reshape(e, vec![rows, 1, 6]);
                    let r = g.rope(r, &cos, &sin);
                    let r = g.reshape(r, vec![rows, 6]);
                    let s = g.sum_axis(r, 1); // [rows]
                    let sq = g.mul(s, s);
                    Ok(g.sum_all(sq))
                },
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.passed(), "vocab {vocab}: {}", report.max_rel_err());
        }
    }

    #[test]
    fn grad_check_softmax_then_pick() {
        let logits = rand_tensor(&[6], 90);
        let report = grad_check(
            &[("logits".to_string(), logits)],
            |g, ids| {
                let mask = Tensor::full(vec![6], 1.0, DType::F64);
                let s = g.softmax_masked(ids[0], &mask)?;
                let pick =
                    Tensor::from_vec(vec![6], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0], DType::F64);
                let np = g.leaf(&pick);
                let picked = g.mul(s, np);
                Ok(g.sum_all(picked))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_err());
    }

    /// Forward values of the remaining primitives against inline scalar
    /// loops (matmul, softmax, and cross-entropy have their own oracle
    /// tests above).
    #[test]
    fn values_match_scalar_loop_oracles() {
        let x = rand_tensor(&[3, 4], 91);
        let y = rand_tensor(&[3, 4], 92);
        let mut g = Graph::new();
        let (nx, ny) = (g.leaf(&x), g.leaf(&y));

        let sum = g.add(nx, ny);
        let prod = g.mul(nx, ny);
        let scaled = g.scale(nx, -2.5);
        for i in 0..12 {
            assert_eq!(g.value(sum).data()[i], x.data()[i] + y.data()[i]);
            assert_eq!(g.value(prod).data()[i], x.data()[i] * y.data()[i]);
            assert_eq!(g.value(scaled).data()[i], x.data()[i] * -2.5);
        }

        let gl = g.gelu(nx);
        for i in 0..12 {
            let v = x.data()[i];
            let want = 0.5
                * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
            assert!((g.value(gl).data()[i] - want).abs() < 1e-15);
        }

        let gain = rand_tensor(&[4], 93);
        let bias = rand_tensor(&[4], 94);
        let (ngain, nbias) = (g.leaf(&gain), g.leaf(&bias));
        let ln = g.layer_norm(nx, ngain, nbias, 1e-5);
        for r in 0..3 {
            let row = &x.data()[r * 4..(r + 1) * 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j];
                assert!((g.value(ln).data()[r * 4 + j] - want).abs() < 1e-14);
            }
        }

        let sa = g.sum_axis(nx, 0);
        for j in 0..4 {
            let want: f64 = (0..3).map(|r| x.data()[r * 4 + j]).sum();
            assert!((g.value(sa).data()[j] - want).abs() < 1e-15);
        }

        let padded = g.pad(nx, &[1, 0], &[0, 2]);
        let sliced = g.slice(padded, &[1, 0], &[3, 4]);
        assert_eq!(g.value(sliced).data(), x.data());
        // first padded row and the trailing columns are zero
        for j in 0..6 {
            assert_eq!(g.value(padded).data()[j], 0.0);
        }
        for r in 0..3 {
            assert_eq!(g.value(padded).data()[(r + 1) * 6 + 4], 0.0);
            assert_eq!(g.value(padded).data()[(r + 1) * 6 + 5], 0.0);
        }

        let table = rand_tensor(&[5, 2], 95);
        let nt = g.leaf(&table);
        let emb = g.embedding(nt, &[3, 3, 1]);
        for (r, &id) in [3usize, 3, 1].iter().enumerate() {
            for c in 0..2 {
                assert_eq!(g.value(emb).data()[r * 2 + c], table.data()[id * 2 + c]);
            }
        }
    }

    #[test]
    fn grad_check_polynomial() {
        // f = p^2 at p = 3: analytic 6
        let p = Tensor::scalar(3.0, DType::F64);
        let report = grad_check(
            &[("p".to_string(), p)],
            |g, ids| {
                let sq = g.mul(ids[0], ids[0]);
                Ok(g.sum_all(sq))
            },
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_err());
    }

    #[test]
    fn f32_graph_quantizes_outputs() {
        let a = Tensor::from_vec(vec![2], vec![0.1, 0.2], DType::F32);
        let b = Tensor::from_vec(vec![2], vec![0.3, 0.4], DType::F32);
        let mut g = Graph::new();
        let (na, nb) = (g.leaf(&a), g.leaf(&b));
        let c = g.add(na, nb);
        assert_eq!(g.value(c).dtype(), DType::F32);
        for x in g.value(c).data() {
            assert_eq!(*x, *x as f32 as f64);
        }
    }
}
