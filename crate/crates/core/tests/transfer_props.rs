mod common;

use besov_transfer::besov::{random_rep, AtomicRep, BesovParams};
use besov_transfer::transfer::{apply_numeric, apply_transfer, essential_split, Mode};
use common::*;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reps(arity: u32, level: u32, count: usize, nonnegative: bool, seed: u64) -> Vec<AtomicRep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_rep(BesovParams::default(), arity, level, 5, nonnegative, &mut rng)).collect()
}

#[test]
fn analytic_transfer_is_linear() {
    let (a, b) = (Complex64::new(0.7, -0.2), Complex64::new(-1.3, 0.0));
    for (name, spec, arity) in builtin_maps() {
        let k = level_for(arity);
        let t = transfer(&spec, arity, k);
        let rs = reps(arity, k, 10, false, 3);
        for pair in rs.chunks(2) {
            let combo = pair[0].scale(a).add(&pair[1].scale(b));
            let lhs = apply_transfer(&t, &combo, Mode::Analytic).unwrap().rep.evaluate(k);
            let f = apply_transfer(&t, &pair[0], Mode::Analytic).unwrap().rep.evaluate(k);
            let g = apply_transfer(&t, &pair[1], Mode::Analytic).unwrap().rep.evaluate(k);
            let rhs = f.zip_with(&g, |x, y| a * x + b * y);
            let gap = lhs.l1_distance(&rhs);
            assert!(gap < 1e-12, "{name}: {gap:e}");
        }
    }
}

#[test]
fn mass_is_conserved_up_to_truncation() {
    for (name, spec, arity) in builtin_maps() {
        let k = level_for(arity);
        let t = transfer(&spec, arity, k);
        let lost = t.system().tail_mass();
        for rep in reps(arity, k, 10, true, 5) {
            let before = rep.evaluate(k).integral().re;
            let out = apply_transfer(&t, &rep, Mode::Analytic).unwrap();
            let after = out.rep.evaluate(k).integral().re;
            let sup = rep.evaluate(k).values().iter().fold(0.0f64, |m, v| m.max(v.norm()));
            let allowance = 1e-12 + out.certificate.truncation_defect + lost * sup;
            assert!((after - before).abs() <= allowance, "{name}: {before} -> {after}");
            if lost == 0.0 {
                assert!((after - before).abs() < 1e-12 + out.certificate.truncation_defect, "{name}");
            }
        }
    }
}

#[test]
fn matrix_agrees_with_numeric_mode() {
    for (name, spec, arity) in builtin_maps() {
        let k = level_for(arity);
        let t = transfer(&spec, arity, k);
        let m = matrix(&spec, arity, k);
        for rep in reps(arity, k, 5, false, 9) {
            let via_matrix = m.apply_rep(&rep).evaluate(k);
            let numeric = apply_numeric(&t, &rep).unwrap().evaluate(k);
            let gap = via_matrix.l1_distance(&numeric);
            assert!(gap < 1e-12, "{name}: {gap:e}");
        }
    }
}

#[test]
fn jacobian_transfer_preserves_positivity() {
    for (name, spec, arity) in builtin_maps() {
        let k = level_for(arity);
        let t = transfer(&spec, arity, k);
        for rep in reps(arity, k, 10, true, 13) {
            let out = apply_transfer(&t, &rep, Mode::Analytic).unwrap();
            assert!(out.certificate.positive_output, "{name}");
            let low = out.rep.evaluate(k).values().iter().fold(f64::INFINITY, |m, v| m.min(v.re));
            assert!(low >= -1e-14, "{name}: {low}");
        }
    }
}

#[test]
fn essential_split_recombines() {
    for rep in reps(2, 10, 10, false, 17) {
        let (head, tail) = essential_split(&rep, 4);
        assert!(head.coeffs().keys().all(|c| c.level < 4));
        assert!(tail.coeffs().keys().all(|c| c.level >= 4));
        assert!(head.add(&tail).evaluate(10).l1_distance(&rep.evaluate(10)) < 1e-15);
    }
}

#[test]
fn doubling_contracts_every_atom_by_the_same_factor() {
    let t = transfer(&besov_transfer::dynamics::MapSpec::doubling(), 2, 8);
    let target = 2f64.powf(-0.9);
    for level in 1..=8 {
        for index in [0, (1u64 << level) - 1] {
            let cell = besov_transfer::grid::CellId::new(level, index);
            let atom = AtomicRep::atom(BesovParams::default(), 2, cell, Complex64::new(1.0, 0.0));
            let out = apply_transfer(&t, &atom, Mode::Analytic).unwrap();
            let ratio = out.certificate.output_norm / out.certificate.input_norm;
            assert!((ratio - target).abs() < 1e-12, "{cell}: {ratio}");
        }
    }
}
