//! Dense row-major tensors.
//!
//! Values are stored as `f64` buffers behind an [`Arc`] so clones are cheap.
//! A tensor tagged [`DType::F32`] rounds every element to 32-bit precision on
//! construction, which models single-precision arithmetic while keeping a
//! single code path; correctness tests run at [`DType::F64`].

use std::sync::Arc;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Result type of an operation combining the two operand types.
    pub fn combine(self, other: DType) -> DType {
        if self == DType::F32 && other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    dtype: DType,
}

impl Tensor {
    /// Build a tensor, quantizing the buffer when `dtype` is `F32`.
    ///
    /// Panics if the buffer length does not match the shape or any
    /// dimension is zero; rank-0 scalars are represented as shape `[1]`.
    pub fn from_vec(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Tensor {
        let shape = if shape.is_empty() { vec![1] } else { shape };
        assert!(
            shape.iter().all(|&d| d >= 1),
            "tensor shape {shape:?} has a zero dimension"
        );
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        if dtype == DType::F32 {
            quantize_f32(&mut data);
        }
        Tensor {
            shape,
            data: Arc::new(data),
            dtype,
        }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel], dtype)
    }

    pub fn full(shape: Vec<usize>, value: f64, dtype: DType) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel], dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::from_vec(vec![1], vec![value], dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the buffer if shared. The caller is
    /// responsible for re-quantizing F32 tensors after bulk edits.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// Round the buffer to 32-bit precision if this is an F32 tensor.
    pub fn requantize(&mut self) {
        if self.dtype == DType::F32 {
            let buf: &mut Vec<f64> = Arc::make_mut(&mut self.data);
            quantize_f32(buf);
        }
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor {
            shape,
            data: Arc::clone(&self.data),
            dtype: self.dtype,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.rank());
        self.data[ravel(idx, &self.shape)]
    }
}

pub fn quantize_f32(data: &mut [f64]) {
    for x in data.iter_mut() {
        *x = *x as f32 as f64;
    }
}

/// Row-major strides.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    let mut flat = 0;
    for (i, (&c, &d)) in idx.iter().zip(shape.iter()).enumerate() {
        debug_assert!(c < d, "index {c} out of bounds for dim {i} of {shape:?}");
        flat = flat * d + c;
    }
    flat
}

pub fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

/// Broadcast result shape under the leading-ones rule, or `None` when the
/// shapes are incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], pos_from_right: usize) -> usize {
    if pos_from_right < shape.len() {
        shape[shape.len() - 1 - pos_from_right]
    } else {
        1
    }
}

/// Precomputed flat-index mapping from an output shape onto a (possibly
/// broadcast) input shape: broadcast dimensions get stride zero.
pub struct BroadcastMap {
    out_shape: Vec<usize>,
    in_strides: Vec<usize>,
}

impl BroadcastMap {
    pub fn new(out_shape: &[usize], in_shape: &[usize]) -> BroadcastMap {
        assert!(in_shape.len() <= out_shape.len());
        let in_strides_nat = strides_of(in_shape);
        let offset = out_shape.len() - in_shape.len();
        let mut in_strides = vec![0; out_shape.len()];
        for i in 0..in_shape.len() {
            let od = out_shape[offset + i];
            if in_shape[i] == od {
                in_strides[offset + i] = in_strides_nat[i];
            } else {
                assert_eq!(
                    in_shape[i], 1,
                    "cannot broadcast {in_shape:?} to {out_shape:?}"
                );
            }
        }
        BroadcastMap {
            out_shape: out_shape.to_vec(),
            in_strides,
        }
    }

    /// Flat input index for a flat output index.
    pub fn map(&self, mut out_flat: usize) -> usize {
        let mut in_flat = 0;
        for d in (0..self.out_shape.len()).rev() {
            let c = out_flat % self.out_shape[d];
            out_flat /= self.out_shape[d];
            in_flat += c * self.in_strides[d];
        }
        in_flat
    }

    /// Whether the mapping is the identity (no broadcasting, same shape).
    pub fn is_identity(&self) -> bool {
        self.in_strides == strides_of(&self.out_shape)
    }
}
