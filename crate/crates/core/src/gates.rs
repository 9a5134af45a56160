//! Log-domain gate primitives and the per-chunk gate decomposition.

use crate::error::{Error, Result};
use crate::tensor::Variant;

/// `log(sigmoid(x))` in the branch-free stable form.
#[inline]
pub fn logsigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c * tanh(x / c)`.
pub fn softcap(x: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Parameter(format!("softcap requires c > 0, got {c}")));
    }
    Ok(c * (x / c).tanh())
}

/// Log input gate: the raw pre-activation for exp, its log-sigmoid for sig.
#[inline]
pub fn log_input_gate(i_pre: f64, variant: Variant) -> f64 {
    match variant {
        Variant::Exp => i_pre,
        Variant::Sig => logsigmoid(i_pre),
    }
}

/// Chunk-level gate sums for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkwiseGates {
    pub n_chunk: usize,
    pub chunk_size: usize,
    /// `[n_chunk]` total log forget per chunk.
    pub g: Vec<f64>,
    /// `[n_chunk, L]` inclusive cumulative log forget.
    pub b: Vec<f64>,
    /// `[n_chunk, L]` log input gate plus the forget tail after each position.
    pub a: Vec<f64>,
    /// `[T]` log forget gates.
    pub f_bar: Vec<f64>,
    /// `[T]` log input gates.
    pub i_bar: Vec<f64>,
}

impl ChunkwiseGates {
    pub fn b_chunk(&self, k: usize) -> &[f64] {
        &self.b[k * self.chunk_size..(k + 1) * self.chunk_size]
    }

    pub fn a_chunk(&self, k: usize) -> &[f64] {
        &self.a[k * self.chunk_size..(k + 1) * self.chunk_size]
    }

    pub fn i_chunk(&self, k: usize) -> &[f64] {
        &self.i_bar[k * self.chunk_size..(k + 1) * self.chunk_size]
    }
}

pub fn chunkwise_gates(f_pre: &[f64], i_pre: &[f64], chunk_size: usize, variant: Variant) -> Result<ChunkwiseGates> {
    let t = f_pre.len();
    if i_pre.len() != t {
        return Err(Error::ShapeMismatch { left: vec![t], right: vec![i_pre.len()] });
    }
    if chunk_size == 0 || !t.is_multiple_of(chunk_size) {
        return Err(Error::Geometry(format!("T not divisible by L (T={t}, L={chunk_size})")));
    }
    let l = chunk_size;
    let n_chunk = t / l;
    let f_bar: Vec<f64> = f_pre.iter().map(|&x| logsigmoid(x)).collect();
    let i_bar: Vec<f64> = i_pre.iter().map(|&x| log_input_gate(x, variant)).collect();
    let mut g = vec![0.0; n_chunk];
    let mut b = vec![0.0; t];
    let mut a = vec![0.0; t];
    for k in 0..n_chunk {
        let off = k * l;
        let mut acc = 0.0;
        for j in 0..l {
            acc += f_bar[off + j];
            b[off + j] = acc;
        }
        g[k] = acc;
        // reversed cumsum of the chunk tail f_bar[1..], with a trailing zero
        let mut tail = 0.0;
        for j in (0..l).rev() {
            a[off + j] = tail + i_bar[off + j];
            tail += f_bar[off + j];
        }
    }
    Ok(ChunkwiseGates { n_chunk, chunk_size: l, g, b, a, f_bar, i_bar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn logsigmoid_values() {
        assert_eq!(logsigmoid(0.0), -std::f64::consts::LN_2);
        assert!((logsigmoid(-100.0) + 100.0).abs() < 1e-12);
        let hi = logsigmoid(100.0);
        assert!(hi <= 0.0 && hi.abs() < 1e-40);
        assert!(logsigmoid(1e4).is_finite() && logsigmoid(-1e4).is_finite());
        assert!((logsigmoid(-1e4) + 1e4).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_matches_logsigmoid() {
        for &x in &[-30.0, -2.0, 0.0, 0.5, 7.0, 40.0] {
            assert!((sigmoid(x).ln() - logsigmoid(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn softcap_values() {
        assert_eq!(softcap(0.0, 30.0).unwrap(), 0.0);
        assert!((softcap(15.0, 30.0).unwrap() - 13.863_514_717_8).abs() < 1e-9);
        assert!((softcap(1e6, 15.0).unwrap() - 15.0).abs() < 1e-12);
        assert!(softcap(1.0, 0.0).is_err());
        assert!(softcap(1.0, -1.0).is_err());
    }

    #[test]
    fn saturated_forget_gives_zero_sums() {
        let gt = chunkwise_gates(&[1e3; 4], &[0.0; 4], 4, Variant::Exp).unwrap();
        assert_eq!(gt.g, vec![0.0]);
        assert!(gt.b.iter().chain(&gt.a).all(|&x| x == 0.0));
    }

    #[test]
    fn neutral_gates_are_multiples_of_ln2() {
        let gt = chunkwise_gates(&[0.0; 4], &[0.0; 4], 4, Variant::Exp).unwrap();
        let l2 = std::f64::consts::LN_2;
        assert!((gt.g[0] + 4.0 * l2).abs() < 1e-12);
        for j in 0..4 {
            assert!((gt.b[j] + (j as f64 + 1.0) * l2).abs() < 1e-12);
            assert!((gt.a[j] + (3.0 - j as f64) * l2).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_length_is_rejected() {
        assert!(matches!(chunkwise_gates(&[0.0; 6], &[0.0; 6], 4, Variant::Sig), Err(Error::Geometry(_))));
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = Rng::new(21);
        let t = 32;
        let l = 8;
        let f = rng.normal_vec(t, 2.0, 2.0);
        let i = rng.normal_vec(t, 0.0, 2.0);
        for variant in [Variant::Exp, Variant::Sig] {
            let gt = chunkwise_gates(&f, &i, l, variant).unwrap();
            for k in 0..t / l {
                let fb: Vec<f64> = (0..l).map(|j| (1.0 / (1.0 + (-f[k * l + j]).exp())).ln()).collect();
                let ib: Vec<f64> = (0..l)
                    .map(|j| match variant {
                        Variant::Exp => i[k * l + j],
                        Variant::Sig => (1.0 / (1.0 + (-i[k * l + j]).exp())).ln(),
                    })
                    .collect();
                let g: f64 = fb.iter().sum();
                assert!((gt.g[k] - g).abs() < 1e-13);
                for j in 0..l {
                    let b: f64 = (0..=j).map(|u| fb[u]).sum();
                    let a: f64 = (j + 1..l).map(|u| fb[u]).sum::<f64>() + ib[j];
                    assert!((gt.b[k * l + j] - b).abs() < 1e-13);
                    assert!((gt.a[k * l + j] - a).abs() < 1e-13);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn chunk_invariants(
            f in proptest::collection::vec(-20.0f64..20.0, 24),
            i in proptest::collection::vec(-20.0f64..20.0, 24),
            l in prop::sample::select(vec![1usize, 2, 3, 4, 6, 8, 12, 24]),
            sig in any::<bool>(),
        ) {
            let variant = if sig { Variant::Sig } else { Variant::Exp };
            let gt = chunkwise_gates(&f, &i, l, variant).unwrap();
            for k in 0..gt.n_chunk {
                let b = gt.b_chunk(k);
                let a = gt.a_chunk(k);
                prop_assert!((b[l - 1] - gt.g[k]).abs() < 1e-12);
                prop_assert_eq!(a[l - 1], gt.i_bar[k * l + l - 1]);
                for j in 0..l {
                    prop_assert!(b[j] <= 0.0);
                    if j > 0 {
                        prop_assert!(b[j] <= b[j - 1]);
                    }
                    let unstable = gt.g[k] - b[j] + gt.i_bar[k * l + j];
                    prop_assert!((a[j] - unstable).abs() < 1e-10);
                    if sig {
                        prop_assert!(a[j] <= 0.0);
                    }
                }
            }
        }
    }
}
