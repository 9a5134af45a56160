//! Step-by-step recurrence. This is the O(T) ground truth every other
//! formulation is compared against.

use crate::error::{Error, Result};
use crate::gates::{logsigmoid, sigmoid};
use crate::stability::exp_le0;
use crate::tensor::{HeadView, MemoryState, SequenceInputs, Tensor, Variant};

/// Hidden outputs before norm and output gate, plus optional state snapshots.
#[derive(Debug, Clone)]
pub struct RecurrentTrace {
    /// `[B, H, T, d_hv]`
    pub h_tilde: Tensor,
    /// Per sequence (`b * n_head + h`), the state after each step.
    pub states: Option<Vec<Vec<MemoryState>>>,
}

fn check_step(state: &MemoryState, q: &[f64], k: &[f64], v: &[f64], i_pre: f64, f_pre: f64) -> Result<()> {
    if q.len() != state.d_qk || k.len() != state.d_qk || v.len() != state.d_hv {
        return Err(Error::ShapeMismatch {
            left: vec![state.d_qk, state.d_hv],
            right: vec![q.len(), k.len(), v.len()],
        });
    }
    let finite = i_pre.is_finite()
        && f_pre.is_finite()
        && q.iter().chain(k).chain(v).all(|x| x.is_finite())
        && state.is_finite();
    if !finite {
        return Err(Error::Numeric("non-finite input to recurrent step".into()));
    }
    Ok(())
}

/// One exp-gate step, updating `state` in place and writing `h`.
pub fn step_exp_into(
    state: &mut MemoryState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    i_pre: f64,
    f_pre: f64,
    h: &mut [f64],
) -> Result<()> {
    check_step(state, q, k, v, i_pre, f_pre)?;
    let (dk, dv) = (state.d_qk, state.d_hv);
    let lf = logsigmoid(f_pre) + state.m;
    let m_new = lf.max(i_pre);
    let fg = exp_le0(lf - m_new);
    let ig = exp_le0(i_pre - m_new);
    for a in 0..dk {
        let row = &mut state.c[a * dv..(a + 1) * dv];
        let ik = ig * k[a];
        for (c, &vb) in row.iter_mut().zip(v) {
            *c = fg * *c + ik * vb;
        }
        state.n[a] = fg * state.n[a] + ig * k[a];
    }
    state.m = m_new;

    let scale = 1.0 / (dk as f64).sqrt();
    let mut nq = 0.0;
    h.fill(0.0);
    for a in 0..dk {
        let qa = q[a] * scale;
        nq += state.n[a] * qa;
        for (hb, &c) in h.iter_mut().zip(&state.c[a * dv..(a + 1) * dv]) {
            *hb += c * qa;
        }
    }
    // lower bound of the denominator, not a gate exponential
    let den = nq.abs().max((-m_new).exp());
    for hb in h.iter_mut() {
        *hb /= den;
    }
    Ok(())
}

/// One sigmoid-gate step, updating `state.c` in place and writing `h`.
pub fn step_sig_into(
    state: &mut MemoryState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    i_pre: f64,
    f_pre: f64,
    h: &mut [f64],
) -> Result<()> {
    check_step(state, q, k, v, i_pre, f_pre)?;
    let (dk, dv) = (state.d_qk, state.d_hv);
    let fg = sigmoid(f_pre);
    let ig = sigmoid(i_pre);
    for a in 0..dk {
        let ik = ig * k[a];
        for (c, &vb) in state.c[a * dv..(a + 1) * dv].iter_mut().zip(v) {
            *c = fg * *c + ik * vb;
        }
    }
    let scale = 1.0 / (dk as f64).sqrt();
    h.fill(0.0);
    for a in 0..dk {
        let qa = q[a] * scale;
        for (hb, &c) in h.iter_mut().zip(&state.c[a * dv..(a + 1) * dv]) {
            *hb += c * qa;
        }
    }
    Ok(())
}

/// Value-returning form of [`step_exp_into`].
pub fn step_exp(state: &MemoryState, q: &[f64], k: &[f64], v: &[f64], i_pre: f64, f_pre: f64) -> Result<(MemoryState, Vec<f64>)> {
    let mut next = state.clone();
    let mut h = vec![0.0; state.d_hv];
    step_exp_into(&mut next, q, k, v, i_pre, f_pre, &mut h)?;
    Ok((next, h))
}

/// Value-returning form of [`step_sig_into`].
pub fn step_sig(state: &MemoryState, q: &[f64], k: &[f64], v: &[f64], i_pre: f64, f_pre: f64) -> Result<(MemoryState, Vec<f64>)> {
    let mut next = state.clone();
    let mut h = vec![0.0; state.d_hv];
    step_sig_into(&mut next, q, k, v, i_pre, f_pre, &mut h)?;
    Ok((next, h))
}

/// Fold the recurrence over one head from `init`. Returns `[T, d_hv]` outputs,
/// the final state and, if requested, every intermediate state.
pub fn run_head(
    x: &HeadView<'_>,
    variant: Variant,
    init: MemoryState,
    record: bool,
) -> Result<(Vec<f64>, MemoryState, Vec<MemoryState>)> {
    let (dk, dv) = (x.d_qk, x.d_hv);
    let mut state = init;
    let mut out = vec![0.0; x.t * dv];
    let mut trace = Vec::new();
    for t in 0..x.t {
        let q = &x.q[t * dk..(t + 1) * dk];
        let k = &x.k[t * dk..(t + 1) * dk];
        let v = &x.v[t * dv..(t + 1) * dv];
        let h = &mut out[t * dv..(t + 1) * dv];
        match variant {
            Variant::Exp => step_exp_into(&mut state, q, k, v, x.i_pre[t], x.f_pre[t], h)?,
            Variant::Sig => step_sig_into(&mut state, q, k, v, x.i_pre[t], x.f_pre[t], h)?,
        }
        if record {
            trace.push(state.clone());
        }
    }
    Ok((out, state, trace))
}

pub fn run_recurrent(inputs: &SequenceInputs, variant: Variant) -> Result<RecurrentTrace> {
    run_recurrent_with(inputs, variant, false)
}

pub fn run_recurrent_with(inputs: &SequenceInputs, variant: Variant, record_states: bool) -> Result<RecurrentTrace> {
    let d = inputs.dims;
    d.validate()?;
    let mut h_tilde = inputs.zeros_like_h();
    let mut states = record_states.then(Vec::new);
    for b in 0..d.n_batch {
        for h in 0..d.n_head {
            let view = inputs.head(b, h);
            let (out, _, trace) = run_head(&view, variant, MemoryState::zeros(d.d_qk, d.d_hv), record_states)?;
            h_tilde.block_mut(b, h).copy_from_slice(&out);
            if let Some(s) = states.as_mut() {
                s.push(trace);
            }
        }
    }
    Ok(RecurrentTrace { h_tilde, states })
}
