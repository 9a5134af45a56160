//! Fully parallel O(T^2) formulation. Materializes the whole gate matrix and
//! exists to be obviously correct.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{log_input_gate, logsigmoid};
use crate::stability::exp_le0;
use crate::tensor::{HeadView, SequenceInputs, Tensor, Variant};

/// Stand-in for minus infinity in materialized log-gate matrices.
pub const NEG_SENTINEL: f64 = -1e30;

/// Denominator used in place of the default parallel normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// The variant's own normalizer: `max(|S̄1|, exp(-m))` for exp, `1` for sig.
    Default,
    /// `max(|S̄1|, 1)`
    MaxAbsOne,
    /// `|S̄1|`
    AbsSum,
    /// `S̄1`
    RawSum,
    /// `1`
    Ones,
}

impl Normalizer {
    pub const ALL: [Normalizer; 5] =
        [Normalizer::Default, Normalizer::MaxAbsOne, Normalizer::AbsSum, Normalizer::RawSum, Normalizer::Ones];

    pub fn as_str(&self) -> &'static str {
        match self {
            Normalizer::Default => "default",
            Normalizer::MaxAbsOne => "max_abs_one",
            Normalizer::AbsSum => "abs_sum",
            Normalizer::RawSum => "raw_sum",
            Normalizer::Ones => "ones",
        }
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Normalizer::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown normalizer '{s}'")))
    }
}

/// Only the combinations studied in the transfer experiments are accepted.
pub fn check_normalizer(variant: Variant, normalizer: Normalizer) -> Result<()> {
    use Normalizer::*;
    let ok = match variant {
        Variant::Exp => matches!(normalizer, Default | MaxAbsOne | Ones),
        Variant::Sig => matches!(normalizer, Default | Ones | MaxAbsOne | AbsSum | RawSum),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Combination(format!("normalizer {normalizer} is not defined for the {variant} variant")))
    }
}

/// Materialized quantities of one head.
#[derive(Debug, Clone)]
pub struct ParallelIntermediates {
    pub t: usize,
    /// `[T, T]` log gate matrix, sentinel above the diagonal.
    pub d_tilde: Vec<f64>,
    /// `[T]` row maxima (zero for sig).
    pub m: Vec<f64>,
    /// `[T, T]` scaled scores `q_i . k_j / sqrt(d_qk)`, full matrix.
    pub s: Vec<f64>,
    /// `[T]` default normalizer.
    pub n_denom: Vec<f64>,
}

fn forget_prefix(f_pre: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    f_pre
        .iter()
        .map(|&f| {
            acc += logsigmoid(f);
            acc
        })
        .collect()
}

/// Lower triangle (diagonal included) of the scaled score matrix, `[T, T]`.
pub fn causal_scores(x: &HeadView<'_>) -> Vec<f64> {
    let (t, dk) = (x.t, x.d_qk);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        let qi = &x.q[i * dk..(i + 1) * dk];
        for j in 0..=i {
            let kj = &x.k[j * dk..(j + 1) * dk];
            s[i * t + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
    }
    s
}

pub fn parallel_intermediates(x: &HeadView<'_>, variant: Variant) -> ParallelIntermediates {
    let t = x.t;
    let dk = x.d_qk;
    let scale = 1.0 / (dk as f64).sqrt();
    let fc = forget_prefix(x.f_pre);
    let mut d_tilde = vec![NEG_SENTINEL; t * t];
    let mut s = vec![0.0; t * t];
    let mut m = vec![0.0; t];
    let mut n_denom = vec![1.0; t];
    for i in 0..t {
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..=i {
            let v = fc[i] - fc[j] + log_input_gate(x.i_pre[j], variant);
            d_tilde[i * t + j] = v;
            row_max = row_max.max(v);
        }
        for j in 0..t {
            s[i * t + j] =
                x.q[i * dk..(i + 1) * dk].iter().zip(&x.k[j * dk..(j + 1) * dk]).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        if variant == Variant::Exp {
            m[i] = row_max;
            let r: f64 = (0..=i).map(|j| s[i * t + j] * exp_le0(d_tilde[i * t + j] - row_max)).sum();
            n_denom[i] = r.abs().max((-row_max).exp());
        }
    }
    ParallelIntermediates { t, d_tilde, m, s, n_denom }
}

/// One head with a chosen normalizer. `scores` may supply a precomputed
/// [`causal_scores`] matrix; it only depends on q and k.
pub fn head_forward(
    x: &HeadView<'_>,
    variant: Variant,
    normalizer: Normalizer,
    scores: Option<&[f64]>,
    out: &mut [f64],
) -> Result<()> {
    check_normalizer(variant, normalizer)?;
    let (t, dv) = (x.t, x.d_hv);
    let owned;
    let s = match scores {
        Some(s) => s,
        None => {
            owned = causal_scores(x);
            &owned
        }
    };
    let fc = forget_prefix(x.f_pre);
    let i_bar: Vec<f64> = x.i_pre.iter().map(|&i| log_input_gate(i, variant)).collect();
    let mut row = vec![0.0; t];
    out.fill(0.0);
    for i in 0..t {
        let d_row = &mut row[..=i];
        for (j, d) in d_row.iter_mut().enumerate() {
            *d = fc[i] - fc[j] + i_bar[j];
        }
        let m = match variant {
            Variant::Exp => d_row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
            Variant::Sig => 0.0,
        };
        let mut r = 0.0;
        for (j, d) in d_row.iter_mut().enumerate() {
            *d = s[i * t + j] * exp_le0(*d - m);
            r += *d;
        }
        let n = match (variant, normalizer) {
            (Variant::Exp, Normalizer::Default) => r.abs().max((-m).exp()),
            (_, Normalizer::MaxAbsOne) => r.abs().max(1.0),
            (_, Normalizer::AbsSum) => r.abs(),
            (_, Normalizer::RawSum) => r,
            _ => 1.0,
        };
        let h = &mut out[i * dv..(i + 1) * dv];
        for (j, &sb) in d_row.iter().enumerate() {
            let w = sb / n;
            for (hb, &vb) in h.iter_mut().zip(&x.v[j * dv..(j + 1) * dv]) {
                *hb += w * vb;
            }
        }
    }
    if out.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite output with normalizer {normalizer}")))
    }
}

pub fn normalizer_variant_forward(inputs: &SequenceInputs, variant: Variant, normalizer: Normalizer) -> Result<Tensor> {
    check_normalizer(variant, normalizer)?;
    let d = inputs.dims;
    d.validate()?;
    let mut h = inputs.zeros_like_h();
    for b in 0..d.n_batch {
        for hd in 0..d.n_head {
            head_forward(&inputs.head(b, hd), variant, normalizer, None, h.block_mut(b, hd))?;
        }
    }
    Ok(h)
}

pub fn parallel_forward_exp(inputs: &SequenceInputs) -> Result<Tensor> {
    normalizer_variant_forward(inputs, Variant::Exp, Normalizer::Default)
}

pub fn parallel_forward_sig(inputs: &SequenceInputs) -> Result<Tensor> {
    normalizer_variant_forward(inputs, Variant::Sig, Normalizer::Ones)
}

pub fn parallel_forward(inputs: &SequenceInputs, variant: Variant) -> Result<Tensor> {
    match variant {
        Variant::Exp => parallel_forward_exp(inputs),
        Variant::Sig => parallel_forward_sig(inputs),
    }
}
