//! Tiled rendering of the chunkwise kernels.
//!
//! The intra-chunk attention matrix of every chunk is cut into
//! `B_Lhq x B_Lkv` tiles and the head dimensions into `B_dqk` / `B_dhv`
//! slabs. Each kernel is a list of independent tasks (one per parallel-axis
//! tile) that write disjoint output regions; loop axes run in ascending block
//! order inside a task, so results do not depend on the task schedule.
//!
//! | kernel   | parallel axes            | loop axes        |
//! |----------|--------------------------|------------------|
//! | states   | d_qk, d_hv               | chunks           |
//! | forward  | chunk, L_hq, d_hv        | L_kv, d_qk       |
//! | dC       | d_qk, d_hv               | chunks (reverse) |
//! | dQ       | chunk, L_hq, d_qk        | L_kv, d_hv       |
//! | dK       | chunk, L_kv, d_qk        | L_hq, d_hv       |
//! | dV       | chunk, L_kv, d_hv        | L_hq, d_qk       |
//!
//! Batch and head are parallel axes of every kernel.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunkwise::{assemble_gate_grads, check_saved, ChunkStates, ForwardOutput, GateGrads, Gradients, SavedStats};
use crate::error::{Error, Result};
use crate::gates::{chunkwise_gates, ChunkwiseGates};
use crate::parallel::NEG_SENTINEL;
use crate::stability::exp_le0;
use crate::tensor::{Dims, HeadView, Precision, SequenceInputs, Tensor, Variant};

/// Tile sizes along the query-sequence, key-sequence, key-dim and value-dim axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub b_lhq: usize,
    pub b_lkv: usize,
    pub b_dqk: usize,
    pub b_dhv: usize,
}

impl BlockConfig {
    pub fn new(b_lhq: usize, b_lkv: usize, b_dqk: usize, b_dhv: usize) -> Self {
        BlockConfig { b_lhq, b_lkv, b_dqk, b_dhv }
    }

    /// One tile per axis; degenerates to the untiled chunkwise kernels.
    pub fn single(d: Dims) -> Self {
        BlockConfig::new(d.chunk_size, d.chunk_size, d.d_qk, d.d_hv)
    }

    /// `B_Lkv` must also divide `B_Lhq`: the kv-loop bound counts whole
    /// `B_Lkv` blocks up to the end of the query block.
    pub fn validate(&self, d: &Dims) -> Result<()> {
        d.validate_chunked()?;
        let axes = [
            ("B_Lhq", self.b_lhq, "L", d.chunk_size),
            ("B_Lkv", self.b_lkv, "L", d.chunk_size),
            ("B_dqk", self.b_dqk, "d_qk", d.d_qk),
            ("B_dhv", self.b_dhv, "d_hv", d.d_hv),
        ];
        for (name, b, dim_name, dim) in axes {
            if b == 0 || dim % b != 0 {
                return Err(Error::Geometry(format!("{name}={b} does not divide {dim_name}={dim}")));
            }
        }
        if self.b_lhq < self.b_lkv {
            return Err(Error::Geometry(format!("B_Lhq={} must be >= B_Lkv={}", self.b_lhq, self.b_lkv)));
        }
        if !self.b_lhq.is_multiple_of(self.b_lkv) {
            return Err(Error::Geometry(format!("B_Lkv={} does not divide B_Lhq={}", self.b_lkv, self.b_lhq)));
        }
        Ok(())
    }

    /// Number of kv blocks visited by query block `iq`.
    pub fn kv_blocks(&self, iq: usize) -> usize {
        (iq + 1) * self.b_lhq / self.b_lkv
    }

    /// True iff tile `(iq, ikv)` holds at least one entry above the diagonal.
    pub fn kv_block_needs_mask(&self, iq: usize, ikv: usize) -> bool {
        (ikv + 1) * self.b_lkv > iq * self.b_lhq + 1
    }
}

/// Order in which independent tasks are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Sequential,
    Reversed,
    Shuffled(u64),
}

impl Schedule {
    fn order<T>(&self, tasks: &mut [T]) {
        match *self {
            Schedule::Sequential => {}
            Schedule::Reversed => tasks.reverse(),
            Schedule::Shuffled(seed) => tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

struct Ctx<'a> {
    d: Dims,
    blk: BlockConfig,
    variant: Variant,
    heads: Vec<HeadView<'a>>,
    gates: Vec<ChunkwiseGates>,
    scale: f64,
}

impl<'a> Ctx<'a> {
    fn new(inputs: &'a SequenceInputs, blk: BlockConfig, variant: Variant) -> Result<Self> {
        let d = inputs.dims;
        blk.validate(&d)?;
        let mut heads = Vec::with_capacity(d.n_seq());
        let mut gates = Vec::with_capacity(d.n_seq());
        for b in 0..d.n_batch {
            for h in 0..d.n_head {
                let x = inputs.head(b, h);
                gates.push(chunkwise_gates(x.f_pre, x.i_pre, d.chunk_size, variant)?);
                heads.push(x);
            }
        }
        Ok(Ctx { d, blk, variant, heads, gates, scale: 1.0 / (d.d_qk as f64).sqrt() })
    }

    fn n_q(&self) -> usize {
        self.d.chunk_size / self.blk.b_lhq
    }
    fn n_kv(&self) -> usize {
        self.d.chunk_size / self.blk.b_lkv
    }
    fn n_dk(&self) -> usize {
        self.d.d_qk / self.blk.b_dqk
    }
    fn n_dv(&self) -> usize {
        self.d.d_hv / self.blk.b_dhv
    }

    fn bh(&self, s: usize) -> (usize, usize) {
        (s / self.d.n_head, s % self.d.n_head)
    }

    /// Log gate entry of chunk `k`, local row `li`, local column `lj <= li`.
    fn log_gate(&self, s: usize, k: usize, li: usize, lj: usize) -> f64 {
        let g = &self.gates[s];
        g.b_chunk(k)[li] - g.b_chunk(k)[lj] + g.i_chunk(k)[lj]
    }

    /// Tasks over (sequence, chunk, a, b) in canonical order.
    fn chunk_tasks(&self, na: usize, nb: usize, schedule: Schedule) -> Vec<(usize, usize, usize, usize)> {
        let mut tasks = Vec::with_capacity(self.d.n_seq() * self.d.n_chunk() * na * nb);
        for s in 0..self.d.n_seq() {
            for k in 0..self.d.n_chunk() {
                for a in 0..na {
                    for b in 0..nb {
                        tasks.push((s, k, a, b));
                    }
                }
            }
        }
        schedule.order(&mut tasks);
        tasks
    }

    fn slab_tasks(&self, schedule: Schedule) -> Vec<(usize, usize, usize)> {
        let mut tasks = Vec::with_capacity(self.d.n_seq() * self.n_dk() * self.n_dv());
        for s in 0..self.d.n_seq() {
            for p in 0..self.n_dk() {
                for q in 0..self.n_dv() {
                    tasks.push((s, p, q));
                }
            }
        }
        schedule.order(&mut tasks);
        tasks
    }
}

/// Max state at every chunk boundary; depends on the gates only.
fn max_states(g: &ChunkwiseGates, variant: Variant) -> Vec<f64> {
    let mut m = vec![0.0; g.n_chunk + 1];
    if variant == Variant::Exp {
        for k in 0..g.n_chunk {
            m[k + 1] = g.a_chunk(k).iter().fold(g.g[k] + m[k], |acc, &v| acc.max(v));
        }
    }
    m
}

/// States kernel: one task per `(B_dqk, B_dhv)` slab, sequential over chunks.
fn states_kernel(cx: &Ctx<'_>, precision: Precision, schedule: Schedule) -> Vec<ChunkStates> {
    let (dk, dv, l, nc) = (cx.d.d_qk, cx.d.d_hv, cx.d.chunk_size, cx.d.n_chunk());
    let (bdk, bdv) = (cx.blk.b_dqk, cx.blk.b_dhv);
    let mut out: Vec<ChunkStates> = cx
        .gates
        .iter()
        .map(|g| ChunkStates {
            n_chunk: nc,
            d_qk: dk,
            d_hv: dv,
            c: vec![0.0; (nc + 1) * dk * dv],
            n: vec![0.0; (nc + 1) * dk],
            m: max_states(g, cx.variant),
        })
        .collect();
    let mut a_bar = vec![0.0; l];
    for (s, p, q) in cx.slab_tasks(schedule) {
        let x = &cx.heads[s];
        let g = &cx.gates[s];
        let st = &mut out[s];
        for k in 0..nc {
            let (m_k, m_k1) = (st.m[k], st.m[k + 1]);
            let g_bar = exp_le0(g.g[k] + m_k - m_k1);
            for (ab, &aj) in a_bar.iter_mut().zip(g.a_chunk(k)) {
                *ab = exp_le0(aj - m_k1);
            }
            for r in p * bdk..(p + 1) * bdk {
                for c in q * bdv..(q + 1) * bdv {
                    let mut acc = g_bar * st.c[(k * dk + r) * dv + c];
                    for j in 0..l {
                        let t = k * l + j;
                        acc += a_bar[j] * x.k[t * dk + r] * x.v[t * dv + c];
                    }
                    st.c[((k + 1) * dk + r) * dv + c] = precision.state(acc);
                }
                if q == 0 && cx.variant == Variant::Exp {
                    let mut acc = g_bar * st.n[k * dk + r];
                    for j in 0..l {
                        acc += a_bar[j] * x.k[(k * l + j) * dk + r];
                    }
                    st.n[(k + 1) * dk + r] = precision.state(acc);
                }
            }
        }
    }
    out
}

/// Accumulate one `B_Lhq x B_Lkv` score tile over one `B_dqk` slab.
#[allow(clippy::too_many_arguments)]
fn score_tile(
    lhs: &[f64],
    rhs: &[f64],
    d: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    slab: std::ops::Range<usize>,
    lhs_scale: f64,
    tile: &mut [f64],
) {
    let nc = cols.len();
    for (ii, i) in rows.enumerate() {
        for (jj, j) in cols.clone().enumerate() {
            let mut acc = 0.0;
            for r in slab.clone() {
                acc += lhs[i * d + r] * lhs_scale * rhs[j * d + r];
            }
            tile[ii * nc + jj] += acc;
        }
    }
}

/// Forward output task for tile `(chunk k, query block iq, value slab jv)`.
#[allow(clippy::too_many_arguments)]
fn forward_task(
    cx: &Ctx<'_>,
    s: usize,
    k: usize,
    iq: usize,
    jv: usize,
    st: &ChunkStates,
    out: &mut [f64],
    saved: &mut SavedStats,
) {
    let (dk, dv, l) = (cx.d.d_qk, cx.d.d_hv, cx.d.chunk_size);
    let BlockConfig { b_lhq: bhq, b_lkv: bkv, b_dqk: bdk, b_dhv: bdv } = cx.blk;
    let x = &cx.heads[s];
    let g = &cx.gates[s];
    let b = g.b_chunk(k);
    let m_k = st.m[k];
    let c_k = st.c_at(k);
    let n_k = st.n_at(k);
    let row0 = k * l + iq * bhq;
    let cols = jv * bdv..(jv + 1) * bdv;
    let exp = cx.variant == Variant::Exp;

    let mut acc = vec![0.0; bhq * bdv];
    let mut n_acc = vec![0.0; bhq];
    let mut m_run = vec![NEG_SENTINEL; bhq];
    let mut h_in = vec![0.0; bhq * bdv];
    let mut n_in = vec![0.0; bhq];
    let mut tile = vec![0.0; bhq * bkv];
    let mut row = vec![0.0; bkv];

    let inter_slab = |p: usize, h_in: &mut [f64], n_in: &mut [f64]| {
        for i in 0..bhq {
            let t = row0 + i;
            for r in p * bdk..(p + 1) * bdk {
                let w = x.q[t * dk + r] * cx.scale;
                n_in[i] += w * n_k[r];
                for (o, c) in h_in[i * bdv..(i + 1) * bdv].iter_mut().zip(cols.clone()) {
                    *o += w * c_k[r * dv + c];
                }
            }
        }
    };

    for ikv in 0..cx.blk.kv_blocks(iq) {
        let col0 = k * l + ikv * bkv;
        let mask = cx.blk.kv_block_needs_mask(iq, ikv);
        tile.fill(0.0);
        for p in 0..cx.n_dk() {
            score_tile(x.q, x.k, dk, row0..row0 + bhq, col0..col0 + bkv, p * bdk..(p + 1) * bdk, cx.scale, &mut tile);
            // fused inter pass for sig
            if !exp && ikv == 0 {
                inter_slab(p, &mut h_in, &mut n_in);
            }
        }
        for i in 0..bhq {
            let li = iq * bhq + i;
            let valid = if mask { (li + 1).saturating_sub(ikv * bkv).min(bkv) } else { bkv };
            if valid == 0 {
                continue;
            }
            for (jj, r) in row[..valid].iter_mut().enumerate() {
                *r = cx.log_gate(s, k, li, ikv * bkv + jj);
            }
            let m_new = if exp { row[..valid].iter().fold(m_run[i], |a, &v| a.max(v)) } else { 0.0 };
            if exp {
                let rescale = exp_le0(m_run[i] - m_new);
                n_acc[i] *= rescale;
                for o in acc[i * bdv..(i + 1) * bdv].iter_mut() {
                    *o *= rescale;
                }
                m_run[i] = m_new;
            }
            for jj in 0..valid {
                let w = tile[i * bkv + jj] * exp_le0(row[jj] - m_new);
                n_acc[i] += w;
                let tj = col0 + jj;
                for (o, c) in acc[i * bdv..(i + 1) * bdv].iter_mut().zip(cols.clone()) {
                    *o += w * x.v[tj * dv + c];
                }
            }
        }
    }
    if exp {
        for p in 0..cx.n_dk() {
            inter_slab(p, &mut h_in, &mut n_in);
        }
    }
    for i in 0..bhq {
        let t = row0 + i;
        let (m_intra, m_comb) = if exp { (m_run[i], (b[iq * bhq + i] + m_k).max(m_run[i])) } else { (0.0, 0.0) };
        let b_bar = exp_le0(b[iq * bhq + i] + m_k - m_comb);
        let intra_scale = exp_le0(m_intra - m_comb);
        let den = if exp { (b_bar * n_in[i] + intra_scale * n_acc[i]).abs().max((-m_comb).exp()) } else { 1.0 };
        for (ii, c) in cols.clone().enumerate() {
            out[t * dv + c] = (b_bar * h_in[i * bdv + ii] + intra_scale * acc[i * bdv + ii]) / den;
        }
        if jv == 0 {
            saved.m_combine[t] = m_comb;
            saved.h_denom[t] = den;
        }
    }
}

pub fn tfla_forward(inputs: &SequenceInputs, blocks: BlockConfig, variant: Variant) -> Result<ForwardOutput> {
    tfla_forward_with(inputs, blocks, variant, Schedule::Sequential, Precision::default())
}

/// Forward pass: states kernel, then one task per output tile.
pub fn tfla_forward_with(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    schedule: Schedule,
    precision: Precision,
) -> Result<ForwardOutput> {
    let quantized;
    let inputs = if precision.is_reference() {
        inputs
    } else {
        quantized = inputs.quantized(precision);
        &quantized
    };
    let cx = Ctx::new(inputs, blocks, variant)?;
    let states = states_kernel(&cx, precision, schedule);
    let t = cx.d.seq_len;
    let mut saved: Vec<SavedStats> =
        (0..cx.d.n_seq()).map(|_| SavedStats { m_combine: vec![0.0; t], h_denom: vec![1.0; t] }).collect();
    let mut h_tilde = inputs.zeros_like_h();
    for (s, k, iq, jv) in cx.chunk_tasks(cx.n_q(), cx.n_dv(), schedule) {
        let (b, h) = cx.bh(s);
        forward_task(&cx, s, k, iq, jv, &states[s], h_tilde.block_mut(b, h), &mut saved[s]);
    }
    for o in h_tilde.data_mut() {
        *o = precision.activation(*o);
    }
    if !h_tilde.all_finite() {
        return Err(Error::Numeric("non-finite tiled output".into()));
    }
    Ok(ForwardOutput { h_tilde, states, saved })
}

/// Shared inputs of the three gradient kernels: the normalized upstream
/// gradient and the state gradients `dC_k` at every chunk boundary.
#[derive(Debug, Clone)]
pub struct BackwardPrep {
    /// Per sequence, `[T, d_hv]`, upstream gradient divided by the saved denominator.
    pub dh_tilde: Vec<Vec<f64>>,
    /// Per sequence, `[n_chunk + 1, d_qk, d_hv]`; the last entry is zero.
    pub dc: Vec<Vec<f64>>,
}

/// Reverse state-gradient kernel: one task per `(B_dqk, B_dhv)` slab.
pub fn tfla_backward_states(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    dh: &Tensor,
    fwd: &ForwardOutput,
    schedule: Schedule,
) -> Result<BackwardPrep> {
    check_saved(inputs, dh, &fwd.states, &fwd.saved)?;
    let cx = Ctx::new(inputs, blocks, variant)?;
    let (dk, dv, l, nc, t) = (cx.d.d_qk, cx.d.d_hv, cx.d.chunk_size, cx.d.n_chunk(), cx.d.seq_len);
    let (bdk, bdv) = (cx.blk.b_dqk, cx.blk.b_dhv);
    let dh_tilde: Vec<Vec<f64>> = (0..cx.d.n_seq())
        .map(|s| {
            let (b, h) = cx.bh(s);
            let den = &fwd.saved[s].h_denom;
            dh.block(b, h).iter().enumerate().map(|(e, &g)| g / den[e / dv]).collect()
        })
        .collect();
    let mut dc: Vec<Vec<f64>> = (0..cx.d.n_seq()).map(|_| vec![0.0; (nc + 1) * dk * dv]).collect();
    let mut b_bar = vec![0.0; l];
    for (s, p, q) in cx.slab_tasks(schedule) {
        let x = &cx.heads[s];
        let g = &cx.gates[s];
        let st = &fwd.states[s];
        let mc = &fwd.saved[s].m_combine;
        let dht = &dh_tilde[s];
        let dcs = &mut dc[s];
        for k in (0..nc).rev() {
            let g_bar = exp_le0(g.g[k] + st.m[k] - st.m[k + 1]);
            for (i, bb) in b_bar.iter_mut().enumerate() {
                *bb = exp_le0(g.b_chunk(k)[i] + st.m[k] - mc[k * l + i]);
            }
            for r in p * bdk..(p + 1) * bdk {
                for c in q * bdv..(q + 1) * bdv {
                    let mut acc = g_bar * dcs[((k + 1) * dk + r) * dv + c];
                    for (i, &bb) in b_bar.iter().enumerate() {
                        let ti = k * l + i;
                        acc += bb * (x.q[ti * dk + r] * cx.scale) * dht[ti * dv + c];
                    }
                    dcs[(k * dk + r) * dv + c] = acc;
                }
            }
        }
    }
    debug_assert!(dh_tilde.iter().all(|v| v.len() == t * dv));
    Ok(BackwardPrep { dh_tilde, dc })
}

/// Query gradient plus its gate partial `q_t . dq_t`.
#[derive(Debug, Clone)]
pub struct DqOutput {
    pub dq: Tensor,
    /// `[B, H, T]`
    pub q_dot: Tensor,
}

/// Key gradient plus the gate partials `k_t . dk_t` of its intra-chunk and
/// inter-chunk parts.
#[derive(Debug, Clone)]
pub struct DkOutput {
    pub dk: Tensor,
    /// `[B, H, T]`
    pub k_dot_intra: Tensor,
    /// `[B, H, T]`
    pub k_dot_inter: Tensor,
}

fn check_prep(cx: &Ctx<'_>, prep: &BackwardPrep) -> Result<()> {
    if prep.dh_tilde.len() != cx.d.n_seq() || prep.dc.len() != cx.d.n_seq() {
        return Err(Error::MissingSaved("backward preparation does not match the geometry".into()));
    }
    Ok(())
}

/// Sum of `dH̃_i . v_j` over all value slabs for one tile.
fn dsbar_tile(dht: &[f64], v: &[f64], dv: usize, bdv: usize, n_dv: usize, rows: (usize, usize), cols: (usize, usize), tile: &mut [f64]) {
    tile.fill(0.0);
    for q in 0..n_dv {
        score_tile(dht, v, dv, rows.0..rows.0 + rows.1, cols.0..cols.0 + cols.1, q * bdv..(q + 1) * bdv, 1.0, tile);
    }
}

/// dQ kernel: tasks over (chunk, query block, key slab), loops over kv blocks
/// and value slabs.
pub fn tfla_backward_dq(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    fwd: &ForwardOutput,
    prep: &BackwardPrep,
    schedule: Schedule,
) -> Result<DqOutput> {
    let cx = Ctx::new(inputs, blocks, variant)?;
    check_prep(&cx, prep)?;
    let (dk, dv, l) = (cx.d.d_qk, cx.d.d_hv, cx.d.chunk_size);
    let BlockConfig { b_lhq: bhq, b_lkv: bkv, b_dqk: bdk, b_dhv: bdv } = cx.blk;
    let d = cx.d;
    let mut dq = Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len, dk]);
    // per key slab partial dot products, reduced in slab order afterwards
    let mut partial = vec![vec![0.0; d.seq_len * cx.n_dk()]; d.n_seq()];
    let mut tile = vec![0.0; bhq * bkv];
    let mut dqs = vec![0.0; bhq * bdk];
    for (s, k, iq, p) in cx.chunk_tasks(cx.n_q(), cx.n_dk(), schedule) {
        let x = &cx.heads[s];
        let st = &fwd.states[s];
        let mc = &fwd.saved[s].m_combine;
        let dht = &prep.dh_tilde[s];
        let row0 = k * l + iq * bhq;
        let slab = p * bdk..(p + 1) * bdk;
        dqs.fill(0.0);
        for ikv in 0..cx.blk.kv_blocks(iq) {
            let col0 = k * l + ikv * bkv;
            let mask = cx.blk.kv_block_needs_mask(iq, ikv);
            dsbar_tile(dht, x.v, dv, bdv, cx.n_dv(), (row0, bhq), (col0, bkv), &mut tile);
            for i in 0..bhq {
                let li = iq * bhq + i;
                for jj in 0..bkv {
                    let lj = ikv * bkv + jj;
                    if mask && lj > li {
                        continue;
                    }
                    let ds = tile[i * bkv + jj] * exp_le0(cx.log_gate(s, k, li, lj) - mc[row0 + i]);
                    let tj = col0 + jj;
                    for (o, r) in dqs[i * bdk..(i + 1) * bdk].iter_mut().zip(slab.clone()) {
                        *o += ds * x.k[tj * dk + r];
                    }
                }
            }
        }
        let c_k = st.c_at(k);
        let b = cx.gates[s].b_chunk(k);
        for i in 0..bhq {
            let t = row0 + i;
            let b_bar = exp_le0(b[iq * bhq + i] + st.m[k] - mc[t]);
            for q in 0..cx.n_dv() {
                for (o, r) in dqs[i * bdk..(i + 1) * bdk].iter_mut().zip(slab.clone()) {
                    let mut acc = 0.0;
                    for c in q * bdv..(q + 1) * bdv {
                        acc += c_k[r * dv + c] * dht[t * dv + c];
                    }
                    *o += b_bar * acc;
                }
            }
        }
        let (bi, hi) = cx.bh(s);
        let out = dq.block_mut(bi, hi);
        for i in 0..bhq {
            let t = row0 + i;
            let mut dot = 0.0;
            for (ii, r) in slab.clone().enumerate() {
                let g = dqs[i * bdk + ii];
                out[t * dk + r] = g * cx.scale;
                dot += x.q[t * dk + r] * cx.scale * g;
            }
            partial[s][t * cx.n_dk() + p] = dot;
        }
    }
    let q_dot = reduce_partials(&cx, &partial);
    Ok(DqOutput { dq, q_dot })
}

fn reduce_partials(cx: &Ctx<'_>, partial: &[Vec<f64>]) -> Tensor {
    let d = cx.d;
    let n = partial[0].len() / d.seq_len;
    let mut out = Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len]);
    for (s, part) in partial.iter().enumerate() {
        let (b, h) = cx.bh(s);
        for (o, chunk) in out.block_mut(b, h).iter_mut().zip(part.chunks(n)) {
            *o = chunk.iter().sum();
        }
    }
    out
}

/// Query blocks whose kv loop reaches kv block `ikv`.
fn q_blocks_reaching(cx: &Ctx<'_>, ikv: usize) -> std::ops::Range<usize> {
    let first = (0..cx.n_q()).find(|&iq| ikv < cx.blk.kv_blocks(iq)).unwrap_or(cx.n_q());
    first..cx.n_q()
}

/// dK kernel: tasks over (chunk, kv block, key slab), loops over query
/// blocks and value slabs.
pub fn tfla_backward_dk(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    fwd: &ForwardOutput,
    prep: &BackwardPrep,
    schedule: Schedule,
) -> Result<DkOutput> {
    let cx = Ctx::new(inputs, blocks, variant)?;
    check_prep(&cx, prep)?;
    let (dk, dv, l) = (cx.d.d_qk, cx.d.d_hv, cx.d.chunk_size);
    let BlockConfig { b_lhq: bhq, b_lkv: bkv, b_dqk: bdk, b_dhv: bdv } = cx.blk;
    let d = cx.d;
    let mut dk_t = Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len, dk]);
    let mut p_intra = vec![vec![0.0; d.seq_len * cx.n_dk()]; d.n_seq()];
    let mut p_inter = vec![vec![0.0; d.seq_len * cx.n_dk()]; d.n_seq()];
    let mut tile = vec![0.0; bhq * bkv];
    let mut intra = vec![0.0; bkv * bdk];
    let mut inter = vec![0.0; bkv * bdk];
    for (s, k, ikv, p) in cx.chunk_tasks(cx.n_kv(), cx.n_dk(), schedule) {
        let x = &cx.heads[s];
        let st = &fwd.states[s];
        let mc = &fwd.saved[s].m_combine;
        let dht = &prep.dh_tilde[s];
        let col0 = k * l + ikv * bkv;
        let slab = p * bdk..(p + 1) * bdk;
        intra.fill(0.0);
        inter.fill(0.0);
        for iq in q_blocks_reaching(&cx, ikv) {
            let row0 = k * l + iq * bhq;
            let mask = cx.blk.kv_block_needs_mask(iq, ikv);
            dsbar_tile(dht, x.v, dv, bdv, cx.n_dv(), (row0, bhq), (col0, bkv), &mut tile);
            for i in 0..bhq {
                let li = iq * bhq + i;
                for jj in 0..bkv {
                    let lj = ikv * bkv + jj;
                    if mask && lj > li {
                        continue;
                    }
                    let ds = tile[i * bkv + jj] * exp_le0(cx.log_gate(s, k, li, lj) - mc[row0 + i]);
                    for (o, r) in intra[jj * bdk..(jj + 1) * bdk].iter_mut().zip(slab.clone()) {
                        *o += ds * x.q[(row0 + i) * dk + r] * cx.scale;
                    }
                }
            }
        }
        let dc_next = &prep.dc[s][(k + 1) * dk * dv..(k + 2) * dk * dv];
        let a = cx.gates[s].a_chunk(k);
        for jj in 0..bkv {
            let tj = col0 + jj;
            let a_bar = exp_le0(a[ikv * bkv + jj] - st.m[k + 1]);
            for q in 0..cx.n_dv() {
                for (o, r) in inter[jj * bdk..(jj + 1) * bdk].iter_mut().zip(slab.clone()) {
                    let mut acc = 0.0;
                    for c in q * bdv..(q + 1) * bdv {
                        acc += dc_next[r * dv + c] * x.v[tj * dv + c];
                    }
                    *o += a_bar * acc;
                }
            }
        }
        let (bi, hi) = cx.bh(s);
        let out = dk_t.block_mut(bi, hi);
        for jj in 0..bkv {
            let tj = col0 + jj;
            let (mut d_in, mut d_out) = (0.0, 0.0);
            for (ii, r) in slab.clone().enumerate() {
                let (gi, ge) = (intra[jj * bdk + ii], inter[jj * bdk + ii]);
                out[tj * dk + r] = ge + gi;
                d_in += x.k[tj * dk + r] * gi;
                d_out += x.k[tj * dk + r] * ge;
            }
            p_intra[s][tj * cx.n_dk() + p] = d_in;
            p_inter[s][tj * cx.n_dk() + p] = d_out;
        }
    }
    Ok(DkOutput { dk: dk_t, k_dot_intra: reduce_partials(&cx, &p_intra), k_dot_inter: reduce_partials(&cx, &p_inter) })
}

/// dV kernel: tasks over (chunk, kv block, value slab), loops over query
/// blocks and key slabs.
pub fn tfla_backward_dv(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    fwd: &ForwardOutput,
    prep: &BackwardPrep,
    schedule: Schedule,
) -> Result<Tensor> {
    let cx = Ctx::new(inputs, blocks, variant)?;
    check_prep(&cx, prep)?;
    let (dk, dv, l) = (cx.d.d_qk, cx.d.d_hv, cx.d.chunk_size);
    let BlockConfig { b_lhq: bhq, b_lkv: bkv, b_dqk: bdk, b_dhv: bdv } = cx.blk;
    let d = cx.d;
    let mut dv_t = Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len, dv]);
    let mut tile = vec![0.0; bhq * bkv];
    let mut acc_v = vec![0.0; bkv * bdv];
    for (s, k, ikv, q) in cx.chunk_tasks(cx.n_kv(), cx.n_dv(), schedule) {
        let x = &cx.heads[s];
        let st = &fwd.states[s];
        let mc = &fwd.saved[s].m_combine;
        let dht = &prep.dh_tilde[s];
        let col0 = k * l + ikv * bkv;
        let cols = q * bdv..(q + 1) * bdv;
        acc_v.fill(0.0);
        for iq in q_blocks_reaching(&cx, ikv) {
            let row0 = k * l + iq * bhq;
            let mask = cx.blk.kv_block_needs_mask(iq, ikv);
            tile.fill(0.0);
            for p in 0..cx.n_dk() {
                score_tile(x.q, x.k, dk, row0..row0 + bhq, col0..col0 + bkv, p * bdk..(p + 1) * bdk, cx.scale, &mut tile);
            }
            for i in 0..bhq {
                let li = iq * bhq + i;
                for jj in 0..bkv {
                    let lj = ikv * bkv + jj;
                    if mask && lj > li {
                        continue;
                    }
                    let w = tile[i * bkv + jj] * exp_le0(cx.log_gate(s, k, li, lj) - mc[row0 + i]);
                    for (o, c) in acc_v[jj * bdv..(jj + 1) * bdv].iter_mut().zip(cols.clone()) {
                        *o += w * dht[(row0 + i) * dv + c];
                    }
                }
            }
        }
        let dc_next = &prep.dc[s][(k + 1) * dk * dv..(k + 2) * dk * dv];
        let a = cx.gates[s].a_chunk(k);
        let (bi, hi) = cx.bh(s);
        let out = dv_t.block_mut(bi, hi);
        for jj in 0..bkv {
            let tj = col0 + jj;
            let a_bar = exp_le0(a[ikv * bkv + jj] - st.m[k + 1]);
            for (ii, c) in cols.clone().enumerate() {
                let mut acc = 0.0;
                for p in 0..cx.n_dk() {
                    let mut part = 0.0;
                    for r in p * bdk..(p + 1) * bdk {
                        part += x.k[tj * dk + r] * dc_next[r * dv + c];
                    }
                    acc += part;
                }
                out[tj * dv + c] = acc_v[jj * bdv + ii] + a_bar * acc;
            }
        }
    }
    Ok(dv_t)
}

pub fn tfla_backward(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    dh: &Tensor,
    fwd: &ForwardOutput,
) -> Result<Gradients> {
    tfla_backward_with(inputs, blocks, variant, dh, fwd, Schedule::Sequential)
}

/// All input gradients: dC kernel, the three gradient kernels, then the gate
/// gradients from the dot-product partials.
pub fn tfla_backward_with(
    inputs: &SequenceInputs,
    blocks: BlockConfig,
    variant: Variant,
    dh: &Tensor,
    fwd: &ForwardOutput,
    schedule: Schedule,
) -> Result<Gradients> {
    let prep = tfla_backward_states(inputs, blocks, variant, dh, fwd, schedule)?;
    let q = tfla_backward_dq(inputs, blocks, variant, fwd, &prep, schedule)?;
    let k = tfla_backward_dk(inputs, blocks, variant, fwd, &prep, schedule)?;
    let v = tfla_backward_dv(inputs, blocks, variant, fwd, &prep, schedule)?;
    let d = inputs.dims;
    let (dk, dv, l, nc) = (d.d_qk, d.d_hv, d.chunk_size, d.n_chunk());
    let mut grads = Gradients { dq: q.dq, dk: k.dk, dv: v, d_fpre: Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len]), d_ipre: Tensor::zeros(&[d.n_batch, d.n_head, d.seq_len]) };
    for b in 0..d.n_batch {
        for h in 0..d.n_head {
            let s = b * d.n_head + h;
            let x = inputs.head(b, h);
            let g = chunkwise_gates(x.f_pre, x.i_pre, l, variant)?;
            let st = &fwd.states[s];
            let dg = (0..nc)
                .map(|kk| {
                    let g_bar = exp_le0(g.g[kk] + st.m[kk] - st.m[kk + 1]);
                    let dcn = &prep.dc[s][(kk + 1) * dk * dv..(kk + 2) * dk * dv];
                    g_bar * st.c_at(kk).iter().zip(dcn).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            let (qd, ki, ke) = (q.q_dot.block(b, h), k.k_dot_intra.block(b, h), k.k_dot_inter.block(b, h));
            let gg = GateGrads {
                dg,
                db: qd.iter().zip(ki).map(|(a, b)| a - b).collect(),
                da: ke.to_vec(),
                di: ki.to_vec(),
            };
            let (mut df, mut di) = (vec![0.0; d.seq_len], vec![0.0; d.seq_len]);
            assemble_gate_grads(&x, variant, l, &gg, &mut df, &mut di);
            grads.d_fpre.block_mut(b, h).copy_from_slice(&df);
            grads.d_ipre.block_mut(b, h).copy_from_slice(&di);
        }
    }
    if !grads.all_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunkwise::{chunkwise_backward, chunkwise_forward};
    use crate::stability::probe;
    use crate::tensor::{make_inputs_with, max_abs_diff, GateInit, Rng};

    fn random(d: Dims, seed: u64) -> SequenceInputs {
        let gates = GateInit::Normal { i_mean: 0.0, i_std: 2.0, f_mean: 1.0, f_std: 1.5 };
        make_inputs_with(d, &mut Rng::new(seed), 1.0, gates).unwrap()
    }

    fn upstream(x: &SequenceInputs, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let shape = x.zeros_like_h().shape().to_vec();
        Tensor::from_vec(&shape, rng.normal_vec(shape.iter().product(), 0.0, 1.0)).unwrap()
    }

    #[test]
    fn block_validation() {
        let d = Dims::new(64, 16, 16, 32);
        assert!(BlockConfig::new(8, 4, 8, 16).validate(&d).is_ok());
        assert!(BlockConfig::new(4, 8, 8, 16).validate(&d).is_err());
        assert!(BlockConfig::new(8, 3, 8, 16).validate(&d).is_err());
        assert!(BlockConfig::new(8, 4, 5, 16).validate(&d).is_err());
        assert!(BlockConfig::new(8, 4, 8, 0).validate(&d).is_err());
        // B_Lkv must divide B_Lhq
        let d = Dims::new(24, 24, 4, 4);
        assert!(BlockConfig::new(12, 8, 4, 4).validate(&d).is_err());
    }

    #[test]
    fn mask_condition_matches_entrywise_check() {
        for (bhq, bkv) in [(8, 4), (4, 4), (8, 1), (16, 2), (4, 1)] {
            let blk = BlockConfig::new(bhq, bkv, 1, 1);
            let l = 16;
            for iq in 0..l / bhq {
                for ikv in 0..l / bkv {
                    let above = (iq * bhq..(iq + 1) * bhq)
                        .any(|i| (ikv * bkv..(ikv + 1) * bkv).any(|j| j > i));
                    let fully_above = (iq * bhq..(iq + 1) * bhq)
                        .all(|i| (ikv * bkv..(ikv + 1) * bkv).all(|j| j > i));
                    if ikv < blk.kv_blocks(iq) {
                        assert_eq!(blk.kv_block_needs_mask(iq, ikv), above);
                        assert!(!fully_above);
                    } else {
                        assert!(fully_above);
                    }
                }
            }
        }
    }

    #[test]
    fn single_block_equals_chunkwise() {
        let x = random(Dims::new(32, 8, 4, 6).with_heads(2, 1), 1);
        for variant in [Variant::Exp, Variant::Sig] {
            let c = chunkwise_forward(&x, variant).unwrap();
            let t = tfla_forward(&x, BlockConfig::single(x.dims), variant).unwrap();
            assert!(max_abs_diff(&c.h_tilde, &t.h_tilde).unwrap() < 1e-13);
            assert_eq!(c.states, t.states);
            let dh = upstream(&x, 2);
            let gc = chunkwise_backward(&x, variant, &dh, &c.states, &c.saved).unwrap();
            let gt = tfla_backward(&x, BlockConfig::single(x.dims), variant, &dh, &t).unwrap();
            assert!(gc.max_abs_diff(&gt).unwrap() < 1e-12);
        }
    }

    #[test]
    fn multi_block_equals_chunkwise() {
        let x = random(Dims::new(64, 16, 16, 32), 3);
        let blk = BlockConfig::new(8, 4, 8, 16);
        for variant in [Variant::Exp, Variant::Sig] {
            let (t, rep) = probe(|| tfla_forward(&x, blk, variant).unwrap());
            assert_eq!(rep.violations, 0);
            let c = chunkwise_forward(&x, variant).unwrap();
            assert!(max_abs_diff(&c.h_tilde, &t.h_tilde).unwrap() < 1e-10);
            let dh = upstream(&x, 4);
            let gc = chunkwise_backward(&x, variant, &dh, &c.states, &c.saved).unwrap();
            let (gt, rep) = probe(|| tfla_backward(&x, blk, variant, &dh, &t).unwrap());
            assert_eq!(rep.violations, 0);
            assert!(gc.max_abs_diff(&gt).unwrap() < 1e-10);
        }
    }

    #[test]
    fn ascending_input_gates_exercise_rescaling() {
        let mut x = random(Dims::new(32, 32, 4, 4), 5);
        for (t, v) in x.i_pre.data_mut().iter_mut().enumerate() {
            *v = 0.5 * t as f64;
        }
        let c = chunkwise_forward(&x, Variant::Exp).unwrap();
        let t = tfla_forward(&x, BlockConfig::new(8, 2, 2, 2), Variant::Exp).unwrap();
        assert!(max_abs_diff(&c.h_tilde, &t.h_tilde).unwrap() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = random(Dims::new(16, 8, 4, 4), 6);
        let blk = BlockConfig::new(4, 2, 2, 2);
        for variant in [Variant::Exp, Variant::Sig] {
            let f = tfla_forward(&x, blk, variant).unwrap();
            let dh = x.zeros_like_h();
            let prep = tfla_backward_states(&x, blk, variant, &dh, &f, Schedule::Sequential).unwrap();
            let q = tfla_backward_dq(&x, blk, variant, &f, &prep, Schedule::Sequential).unwrap();
            let k = tfla_backward_dk(&x, blk, variant, &f, &prep, Schedule::Sequential).unwrap();
            let v = tfla_backward_dv(&x, blk, variant, &f, &prep, Schedule::Sequential).unwrap();
            assert_eq!(q.dq.max_abs(), 0.0);
            assert_eq!(k.dk.max_abs(), 0.0);
            assert_eq!(v.max_abs(), 0.0);
        }
    }

    #[test]
    fn schedule_does_not_change_results() {
        let x = random(Dims::new(32, 8, 4, 4).with_heads(2, 2), 7);
        let blk = BlockConfig::new(4, 2, 2, 2);
        let dh = upstream(&x, 8);
        for variant in [Variant::Exp, Variant::Sig] {
            let run = |s: Schedule| {
                let f = tfla_forward_with(&x, blk, variant, s, Precision::default()).unwrap();
                let g = tfla_backward_with(&x, blk, variant, &dh, &f, s).unwrap();
                (f.h_tilde, g)
            };
            let (h0, g0) = run(Schedule::Sequential);
            for s in [Schedule::Reversed, Schedule::Shuffled(1), Schedule::Shuffled(99)] {
                let (h, g) = run(s);
                assert_eq!(h0, h);
                assert_eq!(g0, g);
            }
        }
    }

    #[test]
    fn invalid_blocks_are_geometry_errors() {
        let x = random(Dims::new(16, 8, 4, 4), 9);
        let r = tfla_forward(&x, BlockConfig::new(4, 8, 4, 4), Variant::Exp);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }
}
