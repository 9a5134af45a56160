//! Geometry, dense tensors, inputs, memory state, precision and the seeded
//! normal generator shared by every formulation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input-gate flavour of the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Exponential input gate with max state and normalizer.
    Exp,
    /// Sigmoid input gate, no normalizer.
    Sig,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Exp => "exp",
            Variant::Sig => "sig",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(Variant::Exp),
            "sig" => Ok(Variant::Sig),
            _ => Err(Error::Parameter(format!("unknown variant '{s}'"))),
        }
    }
}

/// Sequence, chunk and head geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub seq_len: usize,
    pub chunk_size: usize,
    pub d_qk: usize,
    pub d_hv: usize,
    pub n_head: usize,
    pub n_batch: usize,
}

impl Dims {
    /// Single head, single batch entry.
    pub fn new(seq_len: usize, chunk_size: usize, d_qk: usize, d_hv: usize) -> Self {
        Dims { seq_len, chunk_size, d_qk, d_hv, n_head: 1, n_batch: 1 }
    }

    pub fn with_heads(mut self, n_head: usize, n_batch: usize) -> Self {
        self.n_head = n_head;
        self.n_batch = n_batch;
        self
    }

    pub fn with_chunk(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Geometry("T must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Geometry("L must be at least 1".into()));
        }
        if self.d_qk == 0 || self.d_hv == 0 {
            return Err(Error::Geometry("head dimensions must be at least 1".into()));
        }
        if self.n_head == 0 || self.n_batch == 0 {
            return Err(Error::Geometry("head and batch counts must be at least 1".into()));
        }
        Ok(())
    }

    /// Validation for anything that splits the sequence into chunks.
    pub fn validate_chunked(&self) -> Result<()> {
        self.validate()?;
        if !self.seq_len.is_multiple_of(self.chunk_size) {
            return Err(Error::Geometry(format!(
                "T not divisible by L (T={}, L={})",
                self.seq_len, self.chunk_size
            )));
        }
        Ok(())
    }

    pub fn n_chunk(&self) -> usize {
        self.seq_len / self.chunk_size
    }

    /// Number of independent (batch, head) sequences.
    pub fn n_seq(&self) -> usize {
        self.n_batch * self.n_head
    }
}

/// Dense row-major tensor of `f64` with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { left: shape.to_vec(), right: vec![data.len()] });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing block addressed by the two leading indices.
    fn block_len(&self) -> usize {
        self.shape[2..].iter().product()
    }

    /// Contiguous sub-block `[b, h, ..]` of a tensor shaped `[B, H, ..]`.
    pub fn block(&self, b: usize, h: usize) -> &[f64] {
        let n = self.block_len();
        let off = (b * self.shape[1] + h) * n;
        &self.data[off..off + n]
    }

    pub fn block_mut(&mut self, b: usize, h: usize) -> &mut [f64] {
        let n = self.block_len();
        let off = (b * self.shape[1] + h) * n;
        &mut self.data[off..off + n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Largest entrywise absolute difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { left: a.shape.clone(), right: b.shape.clone() });
    }
    Ok(a.data.iter().zip(&b.data).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// How gate pre-activations are filled by [`make_inputs_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateInit {
    Zeros,
    Constant { i_pre: f64, f_pre: f64 },
    Normal { i_mean: f64, i_std: f64, f_mean: f64, f_std: f64 },
}

/// Queries, keys, values and gate pre-activations for all sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInputs {
    pub dims: Dims,
    /// `[B, H, T, d_qk]`
    pub q: Tensor,
    /// `[B, H, T, d_qk]`
    pub k: Tensor,
    /// `[B, H, T, d_hv]`
    pub v: Tensor,
    /// `[B, H, T]`
    pub i_pre: Tensor,
    /// `[B, H, T]`
    pub f_pre: Tensor,
}

/// Borrowed view of one (batch, head) sequence.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a> {
    pub t: usize,
    pub d_qk: usize,
    pub d_hv: usize,
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub i_pre: &'a [f64],
    pub f_pre: &'a [f64],
}

impl SequenceInputs {
    pub fn new(dims: Dims, q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor) -> Result<Self> {
        dims.validate()?;
        let (b, h, t) = (dims.n_batch, dims.n_head, dims.seq_len);
        let want = [
            (&q, vec![b, h, t, dims.d_qk]),
            (&k, vec![b, h, t, dims.d_qk]),
            (&v, vec![b, h, t, dims.d_hv]),
            (&i_pre, vec![b, h, t]),
            (&f_pre, vec![b, h, t]),
        ];
        for (x, shape) in want {
            if x.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { left: x.shape().to_vec(), right: shape });
            }
            if !x.all_finite() {
                return Err(Error::Numeric("non-finite input entry".into()));
            }
        }
        Ok(SequenceInputs { dims, q, k, v, i_pre, f_pre })
    }

    pub fn head(&self, b: usize, h: usize) -> HeadView<'_> {
        HeadView {
            t: self.dims.seq_len,
            d_qk: self.dims.d_qk,
            d_hv: self.dims.d_hv,
            q: self.q.block(b, h),
            k: self.k.block(b, h),
            v: self.v.block(b, h),
            i_pre: self.i_pre.block(b, h),
            f_pre: self.f_pre.block(b, h),
        }
    }

    /// Same tensors with a different chunk size attached.
    pub fn with_chunk(&self, chunk_size: usize) -> Self {
        let mut out = self.clone();
        out.dims.chunk_size = chunk_size;
        out
    }

    /// Overwrite both gate pre-activations with constants.
    pub fn with_constant_gates(mut self, i_pre: f64, f_pre: f64) -> Self {
        self.i_pre.data_mut().fill(i_pre);
        self.f_pre.data_mut().fill(f_pre);
        self
    }

    /// Apply `softcap(., c)` to both gate pre-activations.
    pub fn softcapped(&self, c: f64) -> Result<Self> {
        let mut out = self.clone();
        for x in out.i_pre.data_mut().iter_mut().chain(out.f_pre.data_mut().iter_mut()) {
            *x = crate::gates::softcap(*x, c)?;
        }
        Ok(out)
    }

    /// Round every entry through `f32` when the precision mode asks for it.
    pub fn quantized(&self, precision: Precision) -> Self {
        let mut out = self.clone();
        for t in [&mut out.q, &mut out.k, &mut out.v, &mut out.i_pre, &mut out.f_pre] {
            for x in t.data_mut() {
                *x = precision.activation(*x);
            }
        }
        out
    }

    /// Output tensor shaped `[B, H, T, d_hv]`.
    pub fn zeros_like_h(&self) -> Tensor {
        let d = self.dims;
        Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len, d.d_hv])
    }
}

/// Matrix memory, normalizer and max state of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub d_qk: usize,
    pub d_hv: usize,
    /// `[d_qk, d_hv]` row-major
    pub c: Vec<f64>,
    /// `[d_qk]`
    pub n: Vec<f64>,
    pub m: f64,
}

impl MemoryState {
    pub fn zeros(d_qk: usize, d_hv: usize) -> Self {
        MemoryState { d_qk, d_hv, c: vec![0.0; d_qk * d_hv], n: vec![0.0; d_qk], m: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.m.is_finite() && self.c.iter().chain(&self.n).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatMode {
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateMode {
    /// States share the activation precision.
    Same,
    /// States stay in `f64` even when activations are rounded to `f32`.
    Wider,
}

/// Storage precision. Arithmetic always runs in `f64`; `F32` mode rounds
/// stored activations (and states unless `Wider`) through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub mode: FloatMode,
    pub state_mode: StateMode,
}

impl Default for Precision {
    fn default() -> Self {
        Precision { mode: FloatMode::F64, state_mode: StateMode::Same }
    }
}

impl Precision {
    pub fn f32_states_wider() -> Self {
        Precision { mode: FloatMode::F32, state_mode: StateMode::Wider }
    }

    #[inline]
    pub fn activation(&self, x: f64) -> f64 {
        match self.mode {
            FloatMode::F64 => x,
            FloatMode::F32 => x as f32 as f64,
        }
    }

    #[inline]
    pub fn state(&self, x: f64) -> f64 {
        match (self.mode, self.state_mode) {
            (FloatMode::F32, StateMode::Same) => x as f32 as f64,
            _ => x,
        }
    }

    pub fn is_reference(&self) -> bool {
        self.mode == FloatMode::F64
    }
}

/// Seeded standard-normal source (ChaCha8 stream, `StandardNormal` sampling).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize, mean: f64, std: f64) -> Vec<f64> {
        (0..n).map(|_| mean + std * self.normal()).collect()
    }
}

/// q, k, v drawn as `scale * N(0, 1)`; gate pre-activations zero.
pub fn make_inputs(dims: Dims, rng: &mut Rng, scale: f64) -> Result<SequenceInputs> {
    make_inputs_with(dims, rng, scale, GateInit::Zeros)
}

pub fn make_inputs_with(dims: Dims, rng: &mut Rng, scale: f64, gates: GateInit) -> Result<SequenceInputs> {
    dims.validate()?;
    if !scale.is_finite() {
        return Err(Error::Parameter("scale must be finite".into()));
    }
    let (b, h, t) = (dims.n_batch, dims.n_head, dims.seq_len);
    let mut tensor = |shape: &[usize], mean: f64, std: f64| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, rng.normal_vec(n, mean, std))
    };
    let q = tensor(&[b, h, t, dims.d_qk], 0.0, scale)?;
    let k = tensor(&[b, h, t, dims.d_qk], 0.0, scale)?;
    let v = tensor(&[b, h, t, dims.d_hv], 0.0, scale)?;
    let (i_pre, f_pre) = match gates {
        GateInit::Zeros => (Tensor::zeros(&[b, h, t]), Tensor::zeros(&[b, h, t])),
        GateInit::Constant { i_pre, f_pre } => (
            Tensor::from_vec(&[b, h, t], vec![i_pre; b * h * t])?,
            Tensor::from_vec(&[b, h, t], vec![f_pre; b * h * t])?,
        ),
        GateInit::Normal { i_mean, i_std, f_mean, f_std } => {
            (tensor(&[b, h, t], i_mean, i_std)?, tensor(&[b, h, t], f_mean, f_std)?)
        }
    };
    SequenceInputs::new(dims, q, k, v, i_pre, f_pre)
}
