mod common;

use besov_transfer::besov::PiecewiseFn;
use besov_transfer::config::Observable;
use besov_transfer::dynamics::MapSpec;
use besov_transfer::spectral::{
    clt_variance, green_kubo, invariant_density, lasota_yorke_verify, ly_ensemble, ly_violations, peripheral_spectrum,
    support_structure, transitivity_check, DensityMethod, PERIPHERAL_TOL,
};
use common::*;
use num_complex::Complex64;

#[test]
fn doubling_spectrum_is_one_and_nilpotent() {
    let m = matrix(&MapSpec::doubling(), 2, 8);
    let s = peripheral_spectrum(&m, PERIPHERAL_TOL).unwrap();
    assert!(s.contains_one());
    assert_eq!(s.eigenspace_dim_at_1, 1);
    assert!(s.lambda2 <= 1e-10);
    assert!(transitivity_check(&m, 8));
}

#[test]
fn decoupled_halves_have_two_invariant_densities() {
    let m = matrix(&decoupled(), 2, 8);
    let s = peripheral_spectrum(&m, PERIPHERAL_TOL).unwrap();
    assert_eq!(s.eigenspace_dim_at_1, 2);
    assert!(!transitivity_check(&m, 3));
}

#[test]
fn swapped_halves_have_period_two() {
    let m = matrix(&swap(), 2, 8);
    let s = peripheral_spectrum(&m, PERIPHERAL_TOL).unwrap();
    assert!(s.contains_one());
    assert!(s.contains(Complex64::new(-1.0, 0.0), 1e-9));
    assert_eq!(s.peripheral.len(), 2);
}

#[test]
fn density_restricted_to_a_half_has_that_half_as_support() {
    let m = matrix(&decoupled(), 2, 8);
    let start = PiecewiseFn::from_averages(2, 8, |x| if x < 0.5 { 2.0 } else { 0.0 });
    let mut rho = start.into_values();
    for _ in 0..20 {
        rho = m.ulam().apply(&rho);
    }
    let support = support_structure(&PiecewiseFn::new(2, 8, rho), 1e-12);
    assert_eq!(support.cells, vec![besov_transfer::grid::CellId::new(1, 0)]);
    assert!(support.defect_mass <= 1e-6);
}

#[test]
fn golden_density_support_is_everything() {
    let m = matrix(&MapSpec::golden(), 2, 10);
    let d = invariant_density(&m, DensityMethod::Power, 1e-13, 10_000).unwrap();
    let support = support_structure(&d.density, 1e-12);
    assert_eq!(support.cells, vec![besov_transfer::grid::CellId::ROOT]);
}

#[test]
fn indicator_variance_under_doubling() {
    let m = matrix(&MapSpec::doubling(), 2, 10);
    let d = invariant_density(&m, DensityMethod::Power, 1e-14, 100).unwrap();
    let v = Observable::Indicator { lo: 0.0, hi: 0.5 }.averages(2, 10).map(|x| x - 0.5);
    let r = clt_variance(&m, &d.density, &v, &[0.05, 0.1, 0.2]).unwrap();
    // Binary digits are independent: only the lag-zero term survives.
    assert!((r.sigma2 - 0.25).abs() < 1e-3, "{}", r.sigma2);
    assert!((r.sigma2 - r.green_kubo).abs() < 1e-4);
    let (gk, _) = green_kubo(m.ulam(), &d.density, v.values());
    assert!((gk - 0.25).abs() < 1e-12);
}

#[test]
fn lasota_yorke_fit_holds_on_its_ensemble() {
    for (name, spec, arity) in builtin_maps() {
        if name == "gauss" {
            continue;
        }
        let m = matrix(&spec, arity, level_for(arity));
        let r = lasota_yorke_verify(&m, 50, 12, 4);
        assert!(r.lambda < 1.0, "{name}: {}", r.lambda);
        assert_eq!(ly_violations(&m, &r, &ly_ensemble(&m, 50, 4), 12), 0, "{name}");
        if name == "doubling" {
            assert!(r.lambda <= 2f64.powf(-0.9) + 1e-12);
        }
    }
}
