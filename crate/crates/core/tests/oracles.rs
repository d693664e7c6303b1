mod common;

use besov_transfer::dynamics::MapSpec;
use besov_transfer::spectral::{invariant_density, invariant_density_exact, DensityMethod};
use common::*;
use num_complex::Complex64;

fn real(values: &[Complex64]) -> Vec<f64> {
    values.iter().map(|z| z.re).collect()
}

#[test]
fn ulam_density_matches_independent_golden_oracle() {
    let m = matrix(&MapSpec::golden(), 2, 12);
    let d = invariant_density(&m, DensityMethod::Power, 1e-14, 100_000).unwrap();
    let oracle = golden_ulam_oracle(12);
    let worst = real(d.density.values()).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "worst cell gap {worst:e}");
}

#[test]
fn exact_golden_density_has_parry_plateaus() {
    let sys = system(&MapSpec::golden(), 2, 12);
    let d = invariant_density_exact(&sys, 12, 1e-14, 1000, 1000).unwrap();
    let rho = real(d.density.values());
    let low = PHI * PHI * PHI / (1.0 + PHI * PHI);
    let high = PHI * PHI / (1.0 + PHI * PHI);
    let h = 1.0 / rho.len() as f64;
    let cut = 1.0 / PHI;
    for (j, v) in rho.iter().enumerate() {
        let (a, b) = (j as f64 * h, (j + 1) as f64 * h);
        if b <= cut {
            assert!((v - low).abs() < 1e-12, "cell {j}: {v}");
        } else if a >= cut {
            assert!((v - high).abs() < 1e-12, "cell {j}: {v}");
        }
    }
    assert!(l1_resampled(&rho, &golden_ulam_oracle(14)) < 5e-4);
}

#[test]
fn exact_and_ulam_densities_agree_on_lebesgue_preserving_maps() {
    for spec in [MapSpec::doubling(), MapSpec::pw_linear(vec![0.0, 0.4, 1.0], vec![2.5, -1.0 / 0.6], Some(vec![0.0, 1.0]))] {
        let sys = system(&spec, 2, 8);
        let exact = invariant_density_exact(&sys, 8, 1e-14, 100, 100).unwrap();
        assert!(real(exact.density.values()).iter().all(|v| (v - 1.0).abs() < 1e-12));
        let ulam = invariant_density(&matrix(&spec, 2, 8), DensityMethod::Cesaro, 1e-12, 10_000).unwrap();
        assert!(exact.density.l1_distance(&ulam.density) < 1e-10);
    }
}

#[test]
fn gauss_density_matches_closed_form() {
    let m = matrix(&MapSpec::gauss(50), 2, 10);
    let tail = system(&MapSpec::gauss(50), 2, 10).tail_mass();
    let d = invariant_density(&m, DensityMethod::Power, 1e-13, 100_000).unwrap();
    let exact = gauss_density_averages(10);
    let rho = real(d.density.values());
    let l1: f64 = rho.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>() / exact.len() as f64;
    assert!(l1 <= 1e-3 + tail, "L¹ {l1:e}, tail {tail:e}");
}

#[test]
fn gauss_operator_nearly_fixes_closed_form_density() {
    let m = matrix(&MapSpec::gauss(50), 2, 10);
    // Mass of the Gauss measure on the truncated branches `[0, 1/51)`.
    let tail = (52.0f64 / 51.0).log2();
    let exact: Vec<Complex64> = gauss_density_averages(10).into_iter().map(Complex64::from).collect();
    let image = m.ulam().apply(&exact);
    let l1: f64 = image.iter().zip(&exact).map(|(a, b)| (a - b).norm()).sum::<f64>() / exact.len() as f64;
    assert!(l1 <= 1e-4 + tail, "L¹ {l1:e}, tail {tail:e}");
}
