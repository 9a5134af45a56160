//! Backward passes against central finite differences of an independent
//! parallel-form objective.

use tfla_core::chunkwise::{chunkwise_backward, chunkwise_forward};
use tfla_core::gradcheck::{gradcheck, numerical_gradients, FdConfig, GradErrors};
use tfla_core::parallel::parallel_forward_sig;
use tfla_core::stability::probe;
use tfla_core::tiled::BlockConfig;
use tfla_core::{make_inputs_with, Dims, GateInit, Rng, SequenceInputs, Tensor, Variant};

fn problem(seed: u64) -> (SequenceInputs, Tensor) {
    let d = Dims::new(16, 4, 4, 4);
    let gates = GateInit::Normal { i_mean: 0.0, i_std: 1.5, f_mean: 1.0, f_std: 1.5 };
    let mut rng = Rng::new(seed);
    let x = make_inputs_with(d, &mut rng, 1.0, gates).unwrap();
    let dh = Tensor::from_vec(&[1, 1, 16, 4], rng.normal_vec(64, 0.0, 1.0)).unwrap();
    (x, dh)
}

#[test]
fn backward_matches_finite_differences() {
    for variant in [Variant::Sig, Variant::Exp] {
        for seed in [1, 2] {
            let (x, dh) = problem(seed);
            let (rep, stab) = probe(|| gradcheck(&x, variant, &dh, BlockConfig::new(2, 1, 2, 2), FdConfig::default()).unwrap());
            assert_eq!(stab.violations, 0);
            for (name, e) in rep.chunkwise.entries().iter().chain(rep.tiled.entries().iter()) {
                assert!(e.max_rel_err < 1e-5, "{variant} seed {seed} {name}: {e:?}");
            }
        }
    }
}

#[test]
fn sig_backward_matches_sum_of_squares_loss() {
    let (x, _) = problem(3);
    let f = chunkwise_forward(&x, Variant::Sig).unwrap();
    let dh = f.h_tilde.map(|h| 2.0 * h);
    let g = chunkwise_backward(&x, Variant::Sig, &dh, &f.states, &f.saved).unwrap();
    let numeric = numerical_gradients(&x, 1e-6, |y| Ok(parallel_forward_sig(y)?.data().iter().map(|h| h * h).sum())).unwrap();
    let e = GradErrors::of(&g, &numeric, 1e-3);
    assert!(e.max_rel_err() < 1e-5, "{e:?}");
}

#[test]
fn forget_gate_gradient_matches_at_longer_chunks() {
    let (x, dh) = problem(4);
    for l in [1, 2, 8, 16] {
        let y = x.with_chunk(l);
        let blocks = BlockConfig::single(y.dims);
        let rep = gradcheck(&y, Variant::Exp, &dh, blocks, FdConfig::default()).unwrap();
        assert!(rep.chunkwise.d_fpre.max_rel_err < 1e-5, "L={l}: {:?}", rep.chunkwise.d_fpre);
        assert!(rep.tiled.d_fpre.max_rel_err < 1e-5, "L={l}: {:?}", rep.tiled.d_fpre);
    }
}
