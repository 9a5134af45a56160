//! Chunkwise-parallel forward and the reference backward pass.
//!
//! The forward runs in two phases, as on an accelerator: a sequential pass
//! over chunks materializes the inter-chunk states, then every chunk computes
//! its outputs from its own inputs and the state entering it.
//!
//! The exp backward treats the output denominator as a constant, so it is the
//! exact gradient of `num(x) / den(x0)` in the unstabilized scale. The sig
//! backward is exact.

use crate::error::{Error, Result};
use crate::gates::{chunkwise_gates, sigmoid, ChunkwiseGates};
use crate::stability::exp_le0;
use crate::tensor::{Dims, HeadView, Precision, SequenceInputs, Tensor, Variant};

/// Materialized states at every chunk boundary of one sequence. Index 0 is
/// the zero initial state; index `k + 1` is the state after chunk `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStates {
    pub n_chunk: usize,
    pub d_qk: usize,
    pub d_hv: usize,
    /// `[n_chunk + 1, d_qk, d_hv]`
    pub c: Vec<f64>,
    /// `[n_chunk + 1, d_qk]`, zero for sig.
    pub n: Vec<f64>,
    /// `[n_chunk + 1]`, zero for sig.
    pub m: Vec<f64>,
}

impl ChunkStates {
    pub fn c_at(&self, k: usize) -> &[f64] {
        let s = self.d_qk * self.d_hv;
        &self.c[k * s..(k + 1) * s]
    }

    pub fn n_at(&self, k: usize) -> &[f64] {
        &self.n[k * self.d_qk..(k + 1) * self.d_qk]
    }

    /// Bytes held by the materialized boundary states (initial state excluded).
    pub fn materialized_len(&self, variant: Variant) -> usize {
        let per = match variant {
            Variant::Exp => self.d_qk * self.d_hv + self.d_qk + 1,
            Variant::Sig => self.d_qk * self.d_hv,
        };
        self.n_chunk * per
    }
}

/// Per-position statistics kept from the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedStats {
    /// `[T]` combined max state (zero for sig).
    pub m_combine: Vec<f64>,
    /// `[T]` output denominator (one for sig).
    pub h_denom: Vec<f64>,
}

/// Forward outputs plus what the backward pass needs, one entry per sequence
/// in `b * n_head + h` order.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub h_tilde: Tensor,
    pub states: Vec<ChunkStates>,
    pub saved: Vec<SavedStats>,
}

/// Gradients with respect to every input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub d_fpre: Tensor,
    pub d_ipre: Tensor,
}

impl Gradients {
    pub fn zeros(d: Dims) -> Self {
        let (b, h, t) = (d.n_batch, d.n_head, d.seq_len);
        Gradients {
            dq: Tensor::zeros(&[b, h, t, d.d_qk]),
            dk: Tensor::zeros(&[b, h, t, d.d_qk]),
            dv: Tensor::zeros(&[b, h, t, d.d_hv]),
            d_fpre: Tensor::zeros(&[b, h, t]),
            d_ipre: Tensor::zeros(&[b, h, t]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [("dq", &self.dq), ("dk", &self.dk), ("dv", &self.dv), ("d_fpre", &self.d_fpre), ("d_ipre", &self.d_ipre)]
    }

    /// Largest entrywise difference over all five tensors.
    pub fn max_abs_diff(&self, other: &Gradients) -> Result<f64> {
        let mut worst = 0.0f64;
        for ((_, a), (_, b)) in self.tensors().iter().zip(other.tensors().iter()) {
            worst = worst.max(crate::tensor::max_abs_diff(a, b)?);
        }
        Ok(worst)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Inter-chunk recurrence: materialize `C_k`, `n_k`, `m_k` for every chunk
/// boundary of one sequence.
pub fn chunk_states(x: &HeadView<'_>, gates: &ChunkwiseGates, variant: Variant, precision: Precision) -> ChunkStates {
    let (dk, dv, l, nc) = (x.d_qk, x.d_hv, gates.chunk_size, gates.n_chunk);
    let mut c = vec![0.0; (nc + 1) * dk * dv];
    let mut n = vec![0.0; (nc + 1) * dk];
    let mut m = vec![0.0; nc + 1];
    let mut a_bar = vec![0.0; l];
    for k in 0..nc {
        let a = gates.a_chunk(k);
        let m_next = match variant {
            Variant::Exp => a.iter().fold(gates.g[k] + m[k], |acc, &v| acc.max(v)),
            Variant::Sig => 0.0,
        };
        let g_bar = exp_le0(gates.g[k] + m[k] - m_next);
        for (ab, &aj) in a_bar.iter_mut().zip(a) {
            *ab = exp_le0(aj - m_next);
        }
        let (prev, next) = c.split_at_mut((k + 1) * dk * dv);
        let prev = &prev[k * dk * dv..];
        let next = &mut next[..dk * dv];
        for (o, &p) in next.iter_mut().zip(prev) {
            *o = g_bar * p;
        }
        for j in 0..l {
            let t = k * l + j;
            let kj = &x.k[t * dk..(t + 1) * dk];
            let vj = &x.v[t * dv..(t + 1) * dv];
            for r in 0..dk {
                let w = a_bar[j] * kj[r];
                for (o, &vb) in next[r * dv..(r + 1) * dv].iter_mut().zip(vj) {
                    *o += w * vb;
                }
            }
        }
        if variant == Variant::Exp {
            for r in 0..dk {
                let mut acc = g_bar * n[k * dk + r];
                for j in 0..l {
                    acc += a_bar[j] * x.k[(k * l + j) * dk + r];
                }
                n[(k + 1) * dk + r] = acc;
            }
        }
        m[k + 1] = m_next;
        for o in next.iter_mut() {
            *o = precision.state(*o);
        }
        for o in n[(k + 1) * dk..(k + 2) * dk].iter_mut() {
            *o = precision.state(*o);
        }
    }
    ChunkStates { n_chunk: nc, d_qk: dk, d_hv: dv, c, n, m }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Intra-chunk outputs combined with the inter-chunk contribution.
fn chunk_outputs(
    x: &HeadView<'_>,
    gates: &ChunkwiseGates,
    variant: Variant,
    states: &ChunkStates,
    out: &mut [f64],
    saved: &mut SavedStats,
) {
    let (dk, dv, l) = (x.d_qk, x.d_hv, gates.chunk_size);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut d_row = vec![0.0; l];
    let mut qs = vec![0.0; dk];
    for k in 0..gates.n_chunk {
        let b = gates.b_chunk(k);
        let ib = gates.i_chunk(k);
        let m_inter = states.m[k];
        let c_prev = states.c_at(k);
        let n_prev = states.n_at(k);
        for i in 0..l {
            let t = k * l + i;
            for j in 0..=i {
                d_row[j] = b[i] - b[j] + ib[j];
            }
            let (m_intra, m_comb) = match variant {
                Variant::Exp => {
                    let mi = d_row[..=i].iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    (mi, (b[i] + m_inter).max(mi))
                }
                Variant::Sig => (0.0, 0.0),
            };
            let b_bar = exp_le0(b[i] + m_inter - m_comb);
            let intra_scale = exp_le0(m_intra - m_comb);
            for (o, &qv) in qs.iter_mut().zip(&x.q[t * dk..(t + 1) * dk]) {
                *o = qv * scale;
            }
            let h = &mut out[t * dv..(t + 1) * dv];
            h.fill(0.0);
            // intra part
            let mut n_intra = 0.0;
            for j in 0..=i {
                let tj = k * l + j;
                let s = dot(&qs, &x.k[tj * dk..(tj + 1) * dk]);
                let w = s * exp_le0(d_row[j] - m_intra);
                n_intra += w;
                for (hb, &vb) in h.iter_mut().zip(&x.v[tj * dv..(tj + 1) * dv]) {
                    *hb += w * vb;
                }
            }
            // inter part
            let mut n_inter = 0.0;
            let mut h_inter = vec![0.0; dv];
            for r in 0..dk {
                let w = qs[r] * b_bar;
                n_inter += w * n_prev[r];
                for (hb, &cb) in h_inter.iter_mut().zip(&c_prev[r * dv..(r + 1) * dv]) {
                    *hb += w * cb;
                }
            }
            let den = match variant {
                Variant::Exp => (n_inter + intra_scale * n_intra).abs().max((-m_comb).exp()),
                Variant::Sig => 1.0,
            };
            for (hb, &hi) in h.iter_mut().zip(&h_inter) {
                *hb = (hi + intra_scale * *hb) / den;
            }
            saved.m_combine[t] = m_comb;
            saved.h_denom[t] = den;
        }
    }
}

/// Forward pass for one sequence.
pub fn head_forward(x: &HeadView<'_>, l: usize, variant: Variant, precision: Precision) -> Result<(Vec<f64>, ChunkStates, SavedStats)> {
    let gates = chunkwise_gates(x.f_pre, x.i_pre, l, variant)?;
    let states = chunk_states(x, &gates, variant, precision);
    let mut out = vec![0.0; x.t * x.d_hv];
    let mut saved = SavedStats { m_combine: vec![0.0; x.t], h_denom: vec![1.0; x.t] };
    chunk_outputs(x, &gates, variant, &states, &mut out, &mut saved);
    for o in out.iter_mut() {
        *o = precision.activation(*o);
    }
    Ok((out, states, saved))
}

pub fn chunkwise_forward(inputs: &SequenceInputs, variant: Variant) -> Result<ForwardOutput> {
    chunkwise_forward_with(inputs, variant, Precision::default())
}

/// Forward pass with a storage precision. Non-reference precision rounds the
/// inputs on entry.
pub fn chunkwise_forward_with(inputs: &SequenceInputs, variant: Variant, precision: Precision) -> Result<ForwardOutput> {
    let d = inputs.dims;
    d.validate_chunked()?;
    let quantized;
    let inputs = if precision.is_reference() {
        inputs
    } else {
        quantized = inputs.quantized(precision);
        &quantized
    };
    let mut h_tilde = inputs.zeros_like_h();
    let mut states = Vec::with_capacity(d.n_seq());
    let mut saved = Vec::with_capacity(d.n_seq());
    for b in 0..d.n_batch {
        for h in 0..d.n_head {
            let (out, st, sv) = head_forward(&inputs.head(b, h), d.chunk_size, variant, precision)?;
            h_tilde.block_mut(b, h).copy_from_slice(&out);
            states.push(st);
            saved.push(sv);
        }
    }
    if !h_tilde.all_finite() {
        return Err(Error::Numeric("non-finite chunkwise output".into()));
    }
    Ok(ForwardOutput { h_tilde, states, saved })
}

/// Gradients of the gate sums of one sequence, before assembly.
#[derive(Debug, Clone)]
pub struct GateGrads {
    /// `[n_chunk]`
    pub dg: Vec<f64>,
    /// `[T]`
    pub db: Vec<f64>,
    /// `[T]`
    pub da: Vec<f64>,
    /// `[T]` direct log-input-gate gradient from the intra-chunk gate matrix.
    pub di: Vec<f64>,
}

/// Map gate-sum gradients to pre-activation gradients:
/// `df̄_i = dg_k + sum_{u >= i} db_u + sum_{u < i} da_u` within each chunk,
/// `dī = da + di`, then the chain rule through the log-sigmoid.
pub fn assemble_gate_grads(
    x: &HeadView<'_>,
    variant: Variant,
    l: usize,
    gg: &GateGrads,
    d_fpre: &mut [f64],
    d_ipre: &mut [f64],
) {
    let nc = x.t / l;
    for k in 0..nc {
        let off = k * l;
        let mut rev = vec![0.0; l];
        let mut acc = 0.0;
        for i in (0..l).rev() {
            acc += gg.db[off + i];
            rev[i] = acc;
        }
        let mut excl = 0.0;
        for i in 0..l {
            let t = off + i;
            let df_bar = gg.dg[k] + rev[i] + excl;
            excl += gg.da[t];
            d_fpre[t] = df_bar * sigmoid(-x.f_pre[t]);
            let di_bar = gg.da[t] + gg.di[t];
            d_ipre[t] = match variant {
                Variant::Exp => di_bar,
                Variant::Sig => di_bar * sigmoid(-x.i_pre[t]),
            };
        }
    }
}

/// Buffers for one sequence's input gradients.
pub(crate) struct HeadGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub d_fpre: Vec<f64>,
    pub d_ipre: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros(x: &HeadView<'_>) -> Self {
        HeadGrads {
            dq: vec![0.0; x.t * x.d_qk],
            dk: vec![0.0; x.t * x.d_qk],
            dv: vec![0.0; x.t * x.d_hv],
            d_fpre: vec![0.0; x.t],
            d_ipre: vec![0.0; x.t],
        }
    }

    pub fn write(&self, g: &mut Gradients, b: usize, h: usize) {
        g.dq.block_mut(b, h).copy_from_slice(&self.dq);
        g.dk.block_mut(b, h).copy_from_slice(&self.dk);
        g.dv.block_mut(b, h).copy_from_slice(&self.dv);
        g.d_fpre.block_mut(b, h).copy_from_slice(&self.d_fpre);
        g.d_ipre.block_mut(b, h).copy_from_slice(&self.d_ipre);
    }
}

pub(crate) fn check_saved(inputs: &SequenceInputs, dh: &Tensor, states: &[ChunkStates], saved: &[SavedStats]) -> Result<()> {
    let d = inputs.dims;
    d.validate_chunked()?;
    let want = [d.n_batch, d.n_head, d.seq_len, d.d_hv];
    if dh.shape() != want {
        return Err(Error::ShapeMismatch { left: dh.shape().to_vec(), right: want.to_vec() });
    }
    if states.len() != d.n_seq() || saved.len() != d.n_seq() {
        return Err(Error::MissingSaved(format!(
            "expected {} sequences, got {} states and {} stats",
            d.n_seq(),
            states.len(),
            saved.len()
        )));
    }
    for (st, sv) in states.iter().zip(saved) {
        if st.n_chunk != d.n_chunk() || st.d_qk != d.d_qk || st.d_hv != d.d_hv {
            return Err(Error::MissingSaved("chunk states do not match the geometry".into()));
        }
        if sv.m_combine.len() != d.seq_len || sv.h_denom.len() != d.seq_len {
            return Err(Error::MissingSaved("saved statistics do not match the geometry".into()));
        }
    }
    Ok(())
}

fn head_backward(
    x: &HeadView<'_>,
    l: usize,
    variant: Variant,
    dh: &[f64],
    states: &ChunkStates,
    saved: &SavedStats,
) -> Result<HeadGrads> {
    let (dk, dv, t) = (x.d_qk, x.d_hv, x.t);
    let gates = chunkwise_gates(x.f_pre, x.i_pre, l, variant)?;
    let nc = gates.n_chunk;
    let scale = 1.0 / (dk as f64).sqrt();
    let dht: Vec<f64> = (0..t * dv).map(|e| dh[e] / saved.h_denom[e / dv]).collect();
    let qs: Vec<f64> = x.q.iter().map(|&q| q * scale).collect();

    let mut g = HeadGrads::zeros(x);
    let mut gg = GateGrads { dg: vec![0.0; nc], db: vec![0.0; t], da: vec![0.0; t], di: vec![0.0; t] };
    let mut dqs = vec![0.0; t * dk];
    let mut dc_next = vec![0.0; dk * dv];
    let mut dc_prev = vec![0.0; dk * dv];
    let mut s = vec![0.0; l * l];
    let mut dmat = vec![0.0; l * l];
    let mut tmp = vec![0.0; dk];

    for k in (0..nc).rev() {
        let (m_k, m_k1) = (states.m[k], states.m[k + 1]);
        let c_k = states.c_at(k);
        let b = gates.b_chunk(k);
        let a = gates.a_chunk(k);
        let ib = gates.i_chunk(k);
        let g_bar = exp_le0(gates.g[k] + m_k - m_k1);

        // chunk k -> state k+1
        gg.dg[k] = g_bar * dot(c_k, &dc_next);
        for j in 0..l {
            let tj = k * l + j;
            let a_bar = exp_le0(a[j] - m_k1);
            let kj = &x.k[tj * dk..(tj + 1) * dk];
            let vj = &x.v[tj * dv..(tj + 1) * dv];
            for r in 0..dk {
                tmp[r] = dot(&dc_next[r * dv..(r + 1) * dv], vj);
            }
            gg.da[tj] = a_bar * dot(kj, &tmp);
            for r in 0..dk {
                g.dk[tj * dk + r] += a_bar * tmp[r];
            }
            for r in 0..dk {
                let w = a_bar * kj[r];
                for (o, &d) in g.dv[tj * dv..(tj + 1) * dv].iter_mut().zip(&dc_next[r * dv..(r + 1) * dv]) {
                    *o += w * d;
                }
            }
        }

        // inter-chunk output contribution
        for (o, &d) in dc_prev.iter_mut().zip(&dc_next) {
            *o = g_bar * d;
        }
        for i in 0..l {
            let ti = k * l + i;
            let mc = saved.m_combine[ti];
            let b_bar = exp_le0(b[i] + m_k - mc);
            let d_i = &dht[ti * dv..(ti + 1) * dv];
            for r in 0..dk {
                tmp[r] = dot(&c_k[r * dv..(r + 1) * dv], d_i);
            }
            gg.db[ti] += b_bar * dot(&qs[ti * dk..(ti + 1) * dk], &tmp);
            for r in 0..dk {
                dqs[ti * dk + r] += b_bar * tmp[r];
                let w = b_bar * qs[ti * dk + r];
                for (o, &d) in dc_prev[r * dv..(r + 1) * dv].iter_mut().zip(d_i) {
                    *o += w * d;
                }
            }
            for j in 0..=i {
                let tj = k * l + j;
                s[i * l + j] = dot(&qs[ti * dk..(ti + 1) * dk], &x.k[tj * dk..(tj + 1) * dk]);
                dmat[i * l + j] = exp_le0(b[i] - b[j] + ib[j] - mc);
            }
        }

        // intra-chunk contribution
        for i in 0..l {
            let ti = k * l + i;
            let d_i = &dht[ti * dv..(ti + 1) * dv];
            for j in 0..=i {
                let tj = k * l + j;
                let dd = dmat[i * l + j];
                let sb = s[i * l + j] * dd;
                for (o, &d) in g.dv[tj * dv..(tj + 1) * dv].iter_mut().zip(d_i) {
                    *o += sb * d;
                }
                let ds = dot(d_i, &x.v[tj * dv..(tj + 1) * dv]) * dd;
                for r in 0..dk {
                    dqs[ti * dk + r] += ds * x.k[tj * dk + r];
                    g.dk[tj * dk + r] += ds * qs[ti * dk + r];
                }
                let dlog = ds * s[i * l + j];
                gg.db[ti] += dlog;
                gg.db[tj] -= dlog;
                gg.di[tj] += dlog;
            }
        }
        std::mem::swap(&mut dc_next, &mut dc_prev);
    }
    for (o, &d) in g.dq.iter_mut().zip(&dqs) {
        *o = d * scale;
    }
    assemble_gate_grads(x, variant, l, &gg, &mut g.d_fpre, &mut g.d_ipre);
    Ok(g)
}

/// Reference backward pass. `states` and `saved` come from the forward pass
/// on the same inputs.
pub fn chunkwise_backward(
    inputs: &SequenceInputs,
    variant: Variant,
    dh: &Tensor,
    states: &[ChunkStates],
    saved: &[SavedStats],
) -> Result<Gradients> {
    check_saved(inputs, dh, states, saved)?;
    let d = inputs.dims;
    let mut grads = Gradients::zeros(d);
    for b in 0..d.n_batch {
        for h in 0..d.n_head {
            let s = b * d.n_head + h;
            let hg = head_backward(&inputs.head(b, h), d.chunk_size, variant, dh.block(b, h), &states[s], &saved[s])?;
            hg.write(&mut grads, b, h);
        }
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}
