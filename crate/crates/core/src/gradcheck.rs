//! Central finite-difference oracle for the backward passes.
//!
//! The objective is evaluated with the fully parallel formulation, so it
//! shares no code path with the chunked kernels. For exp the output
//! denominator is frozen at its value for the unperturbed inputs, in the
//! unstabilized scale; the analytic backward differentiates that same
//! function.

use serde::{Deserialize, Serialize};

use crate::chunkwise::{chunkwise_backward, chunkwise_forward, Gradients};
use crate::error::Result;
use crate::parallel::{parallel_forward_sig, parallel_intermediates};
use crate::tensor::{HeadView, SequenceInputs, Tensor, Variant};
use crate::tiled::{tfla_backward, tfla_forward, BlockConfig};

/// Step and denominator floor of the relative error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub step: f64,
    /// Relative errors divide by `max(|analytic|, |numeric|, floor)`, so
    /// entries whose true gradient is zero are judged in absolute terms.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-6, floor: 1e-3 }
    }
}

/// `max(|m|, exp(-m_row))` scale pieces of the frozen exp denominator.
struct Frozen {
    m: Vec<f64>,
    den: Vec<f64>,
}

fn frozen(x: &HeadView<'_>) -> Frozen {
    let it = parallel_intermediates(x, Variant::Exp);
    Frozen { m: it.m, den: it.n_denom }
}

/// `sum_i dH_i . num_i(x) / den_i(x0)` for one head, via the parallel form.
fn exp_objective_head(x: &HeadView<'_>, dh: &[f64], fz: &Frozen) -> f64 {
    let it = parallel_intermediates(x, Variant::Exp);
    let (t, dv) = (x.t, x.d_hv);
    let mut total = 0.0;
    for i in 0..t {
        let mut num = vec![0.0; dv];
        for j in 0..=i {
            // the rescale to the frozen row max may exceed one, so plain exp
            let w = it.s[i * t + j] * (it.d_tilde[i * t + j] - fz.m[i]).exp();
            for (o, &vb) in num.iter_mut().zip(&x.v[j * dv..(j + 1) * dv]) {
                *o += w * vb;
            }
        }
        total += num.iter().zip(&dh[i * dv..(i + 1) * dv]).map(|(a, b)| a * b).sum::<f64>() / fz.den[i];
    }
    total
}

/// Scalar objective whose gradient the backward passes compute for upstream `dh`.
pub struct Objective<'a> {
    variant: Variant,
    dh: &'a Tensor,
    frozen: Vec<Frozen>,
}

impl<'a> Objective<'a> {
    pub fn new(x0: &SequenceInputs, variant: Variant, dh: &'a Tensor) -> Self {
        let d = x0.dims;
        let frozen = match variant {
            Variant::Exp => {
                (0..d.n_batch).flat_map(|b| (0..d.n_head).map(move |h| (b, h))).map(|(b, h)| frozen(&x0.head(b, h))).collect()
            }
            Variant::Sig => Vec::new(),
        };
        Objective { variant, dh, frozen }
    }

    pub fn eval(&self, x: &SequenceInputs) -> Result<f64> {
        let d = x.dims;
        match self.variant {
            Variant::Sig => {
                let h = parallel_forward_sig(x)?;
                Ok(h.data().iter().zip(self.dh.data()).map(|(a, b)| a * b).sum())
            }
            Variant::Exp => {
                let mut total = 0.0;
                for b in 0..d.n_batch {
                    for h in 0..d.n_head {
                        let fz = &self.frozen[b * d.n_head + h];
                        total += exp_objective_head(&x.head(b, h), self.dh.block(b, h), fz);
                    }
                }
                Ok(total)
            }
        }
    }
}

type Field<T> = fn(&mut T) -> &mut Tensor;

/// Central differences of `f` with respect to every input entry.
pub fn numerical_gradients(
    x0: &SequenceInputs,
    step: f64,
    mut f: impl FnMut(&SequenceInputs) -> Result<f64>,
) -> Result<Gradients> {
    let mut out = Gradients::zeros(x0.dims);
    let mut x = x0.clone();
    let targets: [(Field<SequenceInputs>, Field<Gradients>); 5] = [
        (|x| &mut x.q, |g| &mut g.dq),
        (|x| &mut x.k, |g| &mut g.dk),
        (|x| &mut x.v, |g| &mut g.dv),
        (|x| &mut x.f_pre, |g| &mut g.d_fpre),
        (|x| &mut x.i_pre, |g| &mut g.d_ipre),
    ];
    for (input, grad) in targets {
        let n = input(&mut x).len();
        for e in 0..n {
            let orig = input(&mut x).data()[e];
            input(&mut x).data_mut()[e] = orig + step;
            let plus = f(&x)?;
            input(&mut x).data_mut()[e] = orig - step;
            let minus = f(&x)?;
            input(&mut x).data_mut()[e] = orig;
            grad(&mut out).data_mut()[e] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Largest relative and absolute error of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

pub fn compare(analytic: &Tensor, numeric: &Tensor, floor: f64) -> TensorError {
    let mut e = TensorError { max_rel_err: 0.0, max_abs_err: 0.0 };
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        e.max_abs_err = e.max_abs_err.max(abs);
        e.max_rel_err = e.max_rel_err.max(abs / a.abs().max(n.abs()).max(floor));
    }
    e
}

/// Per-tensor errors of one backward implementation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradErrors {
    pub dq: TensorError,
    pub dk: TensorError,
    pub dv: TensorError,
    pub d_fpre: TensorError,
    pub d_ipre: TensorError,
}

impl GradErrors {
    pub fn of(analytic: &Gradients, numeric: &Gradients, floor: f64) -> Self {
        GradErrors {
            dq: compare(&analytic.dq, &numeric.dq, floor),
            dk: compare(&analytic.dk, &numeric.dk, floor),
            dv: compare(&analytic.dv, &numeric.dv, floor),
            d_fpre: compare(&analytic.d_fpre, &numeric.d_fpre, floor),
            d_ipre: compare(&analytic.d_ipre, &numeric.d_ipre, floor),
        }
    }

    pub fn entries(&self) -> [(&'static str, TensorError); 5] {
        [("dq", self.dq), ("dk", self.dk), ("dv", self.dv), ("d_fpre", self.d_fpre), ("d_ipre", self.d_ipre)]
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries().iter().fold(0.0, |m, (_, e)| m.max(e.max_rel_err))
    }
}

/// Chunkwise and tiled backward passes against the same numerical gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub chunkwise: GradErrors,
    pub tiled: GradErrors,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.chunkwise.max_rel_err().max(self.tiled.max_rel_err())
    }
}

pub fn gradcheck(
    inputs: &SequenceInputs,
    variant: Variant,
    dh: &Tensor,
    blocks: BlockConfig,
    cfg: FdConfig,
) -> Result<GradCheckReport> {
    let obj = Objective::new(inputs, variant, dh);
    let numeric = numerical_gradients(inputs, cfg.step, |x| obj.eval(x))?;
    let cf = chunkwise_forward(inputs, variant)?;
    let cg = chunkwise_backward(inputs, variant, dh, &cf.states, &cf.saved)?;
    let tf = tfla_forward(inputs, blocks, variant)?;
    let tg = tfla_backward(inputs, blocks, variant, dh, &tf)?;
    Ok(GradCheckReport {
        chunkwise: GradErrors::of(&cg, &numeric, cfg.floor),
        tiled: GradErrors::of(&tg, &numeric, cfg.floor),
    })
}
