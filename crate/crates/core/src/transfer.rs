//! Gain of the cell from random value inputs to hidden states, before and
//! after an RMS norm, over a grid of constant gate pre-activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{causal_scores, check_normalizer, head_forward, Normalizer};
use crate::tensor::{make_inputs, Dims, HeadView, Rng, SequenceInputs, Variant};

/// `x / sqrt(mean(x^2) + eps) * gamma`. With `eps = 0` a zero vector maps to
/// zero instead of NaN.
pub fn rms_norm(x: &[f64], gamma: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(Error::Parameter(format!("eps must be >= 0, got {eps}")));
    }
    if x.len() != gamma.len() {
        return Err(Error::ShapeMismatch { left: vec![x.len()], right: vec![gamma.len()] });
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = (ms + eps).sqrt();
    if rms == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter().zip(gamma).map(|(v, g)| v / rms * g).collect())
}

fn max_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Time-averaged ratio of max-norms, both sequences shaped `[T, d]`.
pub fn gain(h_seq: &[f64], v_seq: &[f64], d: usize) -> Result<f64> {
    if h_seq.len() != v_seq.len() || d == 0 || !h_seq.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch { left: vec![h_seq.len()], right: vec![v_seq.len()] });
    }
    let t = h_seq.len() / d;
    let mut total = 0.0;
    for (s, (h, v)) in h_seq.chunks(d).zip(v_seq.chunks(d)).enumerate() {
        let den = max_norm(v);
        if den == 0.0 {
            return Err(Error::UndefinedRatio(s));
        }
        total += max_norm(h) / den;
    }
    Ok(total / t as f64)
}

/// Scan settings. Defaults: one sequence of length 512, `d_qk = d_hv = 128`,
/// a 50 x 50 grid over `[-12, 8] x [-5, 12]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub variant: Variant,
    pub normalizer: Normalizer,
    pub eps: f64,
    pub i_range: (f64, f64),
    pub f_range: (f64, f64),
    pub steps: usize,
    pub seq_len: usize,
    pub d_qk: usize,
    pub d_hv: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            variant: Variant::Exp,
            normalizer: Normalizer::Default,
            eps: 1e-6,
            i_range: (-12.0, 8.0),
            f_range: (-5.0, 12.0),
            steps: 50,
            seq_len: 512,
            d_qk: 128,
            d_hv: 128,
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        check_normalizer(self.variant, self.normalizer)?;
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be at least 1".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Parameter(format!("eps must be >= 0, got {}", self.eps)));
        }
        Dims::new(self.seq_len, self.seq_len, self.d_qk, self.d_hv).validate()
    }
}

/// `n` evenly spaced points including both ends; a single point sits at `lo`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Gains over the `i x f` grid, row-major with `i` outer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainGrid {
    pub i_values: Vec<f64>,
    pub f_values: Vec<f64>,
    pub g_before: Vec<f64>,
    pub g_after: Vec<f64>,
}

impl GainGrid {
    pub fn after(&self, ii: usize, fi: usize) -> f64 {
        self.g_after[ii * self.f_values.len() + fi]
    }

    pub fn before(&self, ii: usize, fi: usize) -> f64 {
        self.g_before[ii * self.f_values.len() + fi]
    }
}

/// Random input sequence plus its causal scores, which do not depend on the
/// gates and are computed once per scan.
pub struct Probe {
    cfg: TransferConfig,
    inputs: SequenceInputs,
    scores: Vec<f64>,
}

impl Probe {
    pub fn new(cfg: TransferConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = Dims::new(cfg.seq_len, cfg.seq_len, cfg.d_qk, cfg.d_hv);
        let inputs = make_inputs(dims, &mut Rng::new(cfg.seed), 1.0)?;
        let scores = causal_scores(&inputs.head(0, 0));
        Ok(Probe { cfg, inputs, scores })
    }

    /// `(G_before, G_after)` at constant pre-activations `(i_pre, f_pre)`.
    pub fn point(&self, i_pre: f64, f_pre: f64) -> Result<(f64, f64)> {
        let t = self.cfg.seq_len;
        let dv = self.cfg.d_hv;
        let i_vec = vec![i_pre; t];
        let f_vec = vec![f_pre; t];
        let base = self.inputs.head(0, 0);
        let x = HeadView { i_pre: &i_vec, f_pre: &f_vec, ..base };
        let mut h = vec![0.0; t * dv];
        head_forward(&x, self.cfg.variant, self.cfg.normalizer, Some(&self.scores), &mut h)?;
        let gamma = vec![1.0; dv];
        let mut normed = Vec::with_capacity(t * dv);
        for row in h.chunks(dv) {
            normed.extend(rms_norm(row, &gamma, self.cfg.eps)?);
        }
        Ok((gain(&h, x.v, dv)?, gain(&normed, x.v, dv)?))
    }
}

pub fn transfer_scan(cfg: TransferConfig) -> Result<GainGrid> {
    let probe = Probe::new(cfg)?;
    let i_values = linspace(cfg.i_range.0, cfg.i_range.1, cfg.steps);
    let f_values = linspace(cfg.f_range.0, cfg.f_range.1, cfg.steps);
    let mut g_before = Vec::with_capacity(i_values.len() * f_values.len());
    let mut g_after = Vec::with_capacity(i_values.len() * f_values.len());
    for &i in &i_values {
        for &f in &f_values {
            let (b, a) = probe.point(i, f)?;
            g_before.push(b);
            g_after.push(a);
        }
    }
    Ok(GainGrid { i_values, f_values, g_before, g_after })
}

/// First upward crossing of `level`, linearly interpolated between samples.
pub fn crossing(xs: &[f64], ys: &[f64], level: f64) -> Option<f64> {
    xs.windows(2).zip(ys.windows(2)).find_map(|(x, y)| {
        if y[0] < level && y[1] >= level {
            Some(x[0] + (level - y[0]) * (x[1] - x[0]) / (y[1] - y[0]))
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_norm_examples() {
        assert_eq!(rms_norm(&[1.0; 4], &[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 0.0).unwrap(), vec![0.0; 4]);
        let y = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.848_528_137_4).abs() < 1e-9);
        assert!((y[1] - 1.131_370_849_9).abs() < 1e-9);
        assert!(rms_norm(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn gain_examples() {
        let v = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(gain(&v, &v, 2).unwrap(), 1.0);
        assert_eq!(gain(&[0.0; 4], &v, 2).unwrap(), 0.0);
        let h: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert_eq!(gain(&h, &v, 2).unwrap(), 2.0);
        assert!(matches!(gain(&v, &[1.0, 1.0, 0.0, 0.0], 2), Err(Error::UndefinedRatio(1))));
    }

    #[test]
    fn linspace_and_crossing() {
        assert_eq!(linspace(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(linspace(2.0, 5.0, 1), vec![2.0]);
        let xs = [0.0, 1.0, 2.0];
        assert_eq!(crossing(&xs, &[0.0, 0.2, 1.0], 0.6), Some(1.5));
        assert_eq!(crossing(&xs, &[0.0, 0.1, 0.2], 0.6), None);
    }

    #[test]
    fn invalid_combination_is_rejected() {
        let cfg = TransferConfig { normalizer: Normalizer::RawSum, ..TransferConfig::default() };
        assert!(matches!(transfer_scan(cfg), Err(Error::Combination(_))));
    }

    #[test]
    fn small_scan_is_deterministic_and_nonnegative() {
        let cfg = TransferConfig { steps: 3, seq_len: 32, d_qk: 8, d_hv: 8, ..TransferConfig::default() };
        let a = transfer_scan(cfg).unwrap();
        let b = transfer_scan(cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.g_before.iter().chain(&a.g_after).all(|g| g.is_finite() && *g >= 0.0));
        assert_eq!(a.g_after.len(), 9);
    }
}
