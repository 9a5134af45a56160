//! Transfer behavior at the default probe geometry.

use tfla_core::parallel::Normalizer;
use tfla_core::transfer::{crossing, linspace, Probe, TransferConfig};
use tfla_core::Variant;

fn probe(variant: Variant, normalizer: Normalizer, eps: f64) -> Probe {
    Probe::new(TransferConfig { variant, normalizer, eps, ..TransferConfig::default() }).unwrap()
}

#[test]
fn suppressing_and_passing_regions() {
    for (variant, normalizer) in [(Variant::Exp, Normalizer::Default), (Variant::Sig, Normalizer::Ones)] {
        let p = probe(variant, normalizer, 1e-6);
        let (_, low) = p.point(-12.0, 0.0).unwrap();
        let (_, high) = p.point(4.0, 8.0).unwrap();
        assert!(low < 0.1, "{variant}: {low}");
        assert!((0.5..=1.5).contains(&high), "{variant}: {high}");
    }
}

#[test]
fn gain_rises_with_input_gate() {
    let p = probe(Variant::Exp, Normalizer::Default, 1e-6);
    let gains: Vec<f64> = linspace(-12.0, 8.0, 21).iter().map(|&i| p.point(i, 4.0).unwrap().1).collect();
    for w in gains.windows(2) {
        assert!(w[1] >= w[0] - 0.05, "{gains:?}");
    }
}

#[test]
fn larger_eps_shifts_crossing_up() {
    let is = linspace(-12.0, 8.0, 81);
    for (variant, normalizer) in [(Variant::Exp, Normalizer::Default), (Variant::Sig, Normalizer::Ones)] {
        let cross = |eps: f64| {
            let p = probe(variant, normalizer, eps);
            let g: Vec<f64> = is.iter().map(|&i| p.point(i, 4.0).unwrap().1).collect();
            crossing(&is, &g, 0.5).unwrap()
        };
        let (wide, narrow) = (cross(1e-2), cross(1e-8));
        assert!(wide > narrow, "{variant}: eps=1e-2 crosses at {wide}, eps=1e-8 at {narrow}");
    }
}
