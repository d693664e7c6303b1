//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use besov_transfer::besov::{canonical_rep, random_rep, AtomicRep, BesovParams, PiecewiseFn};
use besov_transfer::config::{Analysis, Observable, RunConfig};
use besov_transfer::dynamics::{MapSpec, PotentialSpec};
use besov_transfer::grid::{build_grid, validate_grid, CellId};
use besov_transfer::pipeline::run;
use besov_transfer::spectral::{
    clt_variance, decay_rate, invariant_density, invariant_density_exact, lag_window, lasota_yorke_verify, ly_ensemble, ly_violations,
    monte_carlo_variance, peripheral_spectrum, support_structure, DensityMethod, PERIPHERAL_TOL,
};
use besov_transfer::transfer::{apply_transfer, Mode, TransferOptions};
use common::*;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn one() -> Complex64 {
    Complex64::new(1.0, 0.0)
}

fn grid_axioms() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    for arity in [2, 3] {
        let grid = build_grid(arity, 12).map_err(|e| e.to_string())?;
        let r = validate_grid(&grid);
        let g1_to_g6 = r.g1_pass && r.g2_pass && r.g3_pass && r.g4_pass && r.g5_pass && r.g6_pass;
        worst_sum = r.g3_sums.iter().fold(worst_sum, |a, s| a.max((s - 1.0).abs()));
        let target = 1.0 / arity as f64;
        if !g1_to_g6 || (r.g6_min - target).abs() > 1e-15 || (r.g6_max - target).abs() > 1e-15 {
            return Err(format!("arity {arity}: {r:?}"));
        }
    }
    check(worst_sum <= 1e-12, format!("dyadic and triadic to level 12; worst level-sum error {worst_sum:.1e}"))
}

fn reconstruction() -> Outcome {
    let params = BesovParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let values: Vec<f64> = (0..1 << 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = PiecewiseFn::from_real(2, 10, values);
        let g = canonical_rep(&f, &params).evaluate(10);
        worst = worst.max(f.sup_distance(&g));
    }
    check(worst <= 1e-12, format!("100 level-10 functions; worst per-cell error {worst:.1e}"))
}

fn doubling_exactness() -> Outcome {
    let params = BesovParams::default();
    let t = transfer(&MapSpec::doubling(), 2, 10);
    let phi1 = apply_transfer(&t, &AtomicRep::atom(params, 2, CellId::ROOT, one()), Mode::Analytic).map_err(|e| e.to_string())?;
    let err1 = phi1.rep.evaluate(10).sup_distance(&PiecewiseFn::constant(2, 10, one()));
    let m = common::matrix(&MapSpec::doubling(), 2, 10);
    let s = peripheral_spectrum(&m, PERIPHERAL_TOL).map_err(|e| e.to_string())?;
    let lead_err = (s.eigenvalues[0] - 1.0).norm();
    let rest = s.eigenvalues[1..].iter().map(|z| z.norm()).fold(0.0, f64::max);
    let target = 2f64.powf(1.0 / params.p - params.s - 1.0);
    let mut worst: f64 = 0.0;
    for level in 1..=10u32 {
        for index in [0, (1u64 << level) / 3, (1u64 << level) - 1] {
            let rep = AtomicRep::atom(params, 2, CellId::new(level, index), one());
            let out = apply_transfer(&t, &rep, Mode::Analytic).map_err(|e| e.to_string())?;
            let ratio = out.certificate.output_norm / out.certificate.input_norm;
            worst = worst.max((ratio - target).abs());
        }
    }
    check(
        err1 <= 1e-12 && lead_err <= 1e-12 && rest <= 1e-10 && worst <= 1e-12,
        format!("|Φ1 - 1| = {err1:.1e}; λ₁ - 1 = {lead_err:.1e}; max other |λ| = {rest:.1e}; atom ratio error vs {target:.6} = {worst:.1e}"),
    )
}

fn golden_density() -> Outcome {
    let sys = common::system(&MapSpec::golden(), 2, 12);
    let d = invariant_density_exact(&sys, 12, 1e-14, 1000, 10_000).map_err(|e| e.to_string())?;
    let rho: Vec<f64> = d.density.values().iter().map(|z| z.re).collect();
    let oracle = golden_ulam_oracle(14);
    let l1 = l1_resampled(&rho, &oracle);
    let cut = 1.0 / PHI;
    let h = 1.0 / rho.len() as f64;
    let plateau = |lo: f64, hi: f64| {
        let cells: Vec<f64> =
            rho.iter().enumerate().filter(|(j, _)| *j as f64 * h >= lo && (*j + 1) as f64 * h <= hi).map(|(_, v)| *v).collect();
        cells.iter().sum::<f64>() / cells.len() as f64
    };
    let ratio = plateau(0.0, cut) / plateau(cut, 1.0);
    check(
        l1 <= 5e-4 && (ratio - PHI).abs() <= 1e-3,
        format!("L¹ vs level-14 oracle {l1:.2e}; plateau ratio {ratio:.6} (φ = {PHI:.6})"),
    )
}

fn gauss_density() -> Outcome {
    let t = transfer(&MapSpec::gauss(50), 2, 10);
    let tail = t.system().tail_mass();
    let leb = t.lebesgue().clone();
    let m = besov_transfer::transfer::assemble_matrix(&t).map_err(|e| e.to_string())?;
    let d = invariant_density(&m, DensityMethod::Power, 1e-13, 100_000).map_err(|e| e.to_string())?;
    let exact = gauss_density_averages(10);
    let l1: f64 = d.density.values().iter().zip(&exact).map(|(a, b)| (a.re - b).abs()).sum::<f64>() / exact.len() as f64;
    let finite = leb.sum_lambda2.is_finite() && leb.sum_lambda3.is_finite();
    check(
        l1 <= 1e-3 + tail && finite,
        format!(
            "L¹ vs 1/((1+x)ln2) {l1:.2e} (allowance {:.2e} incl. tail {tail:.2e}); class sums {:.3e}, {:.3e}",
            1e-3 + tail,
            leb.sum_lambda2,
            leb.sum_lambda3
        ),
    )
}

fn random_inputs(arity: u32, level: u32, count: usize, seed: u64) -> Vec<AtomicRep> {
    let params = BesovParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let atoms = rng.random_range(1..=6);
            random_rep(params, arity, level, atoms, i % 2 == 0, &mut rng)
        })
        .collect()
}

fn certificate() -> Outcome {
    let mut violations = 0;
    let mut positivity = 0;
    let mut worst: f64 = 0.0;
    let mut budget = (0usize, 0usize);
    for (name, spec, arity) in builtin_maps() {
        let k = level_for(arity);
        let t = transfer(&spec, arity, k);
        for rep in random_inputs(arity, k, 200, 6) {
            let out = apply_transfer(&t, &rep, Mode::Analytic).map_err(|e| format!("{name}: {e}"))?;
            let c = &out.certificate;
            worst = worst.max(c.output_norm / c.bound);
            violations += usize::from(!c.holds);
            budget.0 += c.budget_violations;
            budget.1 += c.budget_checked;
            if rep.positive_flag() && spec.potential == PotentialSpec::Jacobian {
                let values_ok = out.rep.evaluate(k).values().iter().all(|v| v.re >= -1e-12);
                positivity += usize::from(!(c.positive_output && values_ok));
            }
        }
    }
    check(
        violations == 0 && positivity == 0,
        format!(
            "6 maps × 200 reps: {violations} norm violations (max ratio to bound {worst:.2e}); {positivity} positivity failures; atom-budget excess {}/{} pieces",
            budget.0, budget.1
        ),
    )
}

fn cross_check() -> Outcome {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_l1: f64 = 0.0;
    for (name, spec, arity) in builtin_maps() {
        let k = level_for(arity);
        let options = TransferOptions { cross_check: false, ..TransferOptions::default() };
        let t = besov_transfer::transfer::prepare(system(&spec, arity, k), options).map_err(|e| e.to_string())?;
        for rep in random_inputs(arity, k, 50, 7) {
            let a = apply_transfer(&t, &rep, Mode::Analytic).map_err(|e| format!("{name}: {e}"))?;
            let n = apply_transfer(&t, &rep, Mode::Numeric).map_err(|e| format!("{name}: {e}"))?;
            let l1 = a.rep.evaluate(k).l1_distance(&n.rep.evaluate(k));
            worst_l1 = worst_l1.max(l1);
            worst_excess = worst_excess.max(l1 - 1e-6 - a.certificate.truncation_defect);
        }
    }
    check(worst_excess <= 0.0, format!("6 maps × 50 reps; worst L¹ gap {worst_l1:.2e}, worst excess over allowance {worst_excess:.2e}"))
}

fn lasota_yorke() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, spec, arity) in builtin_maps() {
        let m = common::matrix(&spec, arity, level_for(arity));
        let r = lasota_yorke_verify(&m, 100, 20, 0);
        if r.lambda < 1.0 {
            let v = ly_violations(&m, &r, &ly_ensemble(&m, 100, 1), 20);
            ok &= v == 0;
            lines.push(format!("{name} λ={:.4} C={:.3} viol={v}", r.lambda, r.c));
        } else {
            lines.push(format!("{name} λ={:.4} (no contraction fits; excluded)", r.lambda));
        }
        if name == "doubling" {
            ok &= r.lambda <= 0.536;
        }
    }
    check(ok, lines.join("; "))
}

fn clt() -> Outcome {
    let m = common::matrix(&MapSpec::doubling(), 2, 10);
    let d = invariant_density(&m, DensityMethod::Power, 1e-14, 1000).map_err(|e| e.to_string())?;
    let obs = Observable::Cos { frequency: 1 };
    let v = obs.averages(2, 10);
    let mean = v.zip_with(&d.density, |a, b| a * b).integral().re;
    let v = v.map(|x| x - mean);
    let r = clt_variance(&m, &d.density, &v, &[0.05, 0.1, 0.2]).map_err(|e| e.to_string())?;
    let sys = system(&MapSpec::doubling(), 2, 10);
    let mc = monte_carlo_variance(&sys, |x| obs.eval(x), 1_000_000, 1000, lag_window(0.0), 11);
    check(
        (r.sigma2 - 0.5).abs() <= 1e-3 && (r.sigma2 - r.green_kubo).abs() <= 1e-4 && (r.sigma2 - mc.sigma2).abs() <= 5e-3,
        format!("σ² = {:.7}; Green–Kubo {:.7}; Monte-Carlo {:.5} (10⁶ samples, seed 11)", r.sigma2, r.green_kubo, mc.sigma2),
    )
}

fn decay() -> Outcome {
    let params = BesovParams::default();
    let k = 10;
    let m = common::matrix(&MapSpec::doubling(), 2, k);
    let rho = PiecewiseFn::constant(2, k, one());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_tail: f64 = 0.0;
    for _ in 0..20 {
        let mut u = random_rep(params, 2, k, 8, false, &mut rng);
        let mean = u.integral();
        u.add_to(CellId::ROOT, -mean);
        let v = PiecewiseFn::from_real(2, k, (0..1 << k).map(|_| rng.random_range(-1.0..1.0)));
        let v = v.map(|x| x - v.integral());
        let r = decay_rate(&m, &rho, 0.0, &u, &v, 20).map_err(|e| e.to_string())?;
        worst_tail = r.correlations[(k as usize + 1)..].iter().fold(worst_tail, |a, c| a.max(c.abs()));
        if r.exact_zero_from.is_none_or(|z| z > k as usize + 1) {
            return Err(format!("doubling correlations not zero after K: {:?}", &r.correlations));
        }
    }
    let g = common::matrix(&MapSpec::golden(), 2, 10);
    let s = peripheral_spectrum(&g, PERIPHERAL_TOL).map_err(|e| e.to_string())?;
    let d = invariant_density(&g, DensityMethod::Power, 1e-14, 100_000).map_err(|e| e.to_string())?;
    let v = Observable::Cos { frequency: 1 }.averages(2, 10);
    let u = canonical_rep(&v, &params);
    let r = decay_rate(&g, &d.density, s.lambda2, &u, &v, 40).map_err(|e| e.to_string())?;
    let rate = r.fitted_rate.unwrap_or(f64::NAN);
    check(
        rate <= s.lambda2 + 0.02,
        format!("doubling: max |c_k| for k > K is {worst_tail:.1e} (20 observables); golden fitted rate {rate:.4} vs |λ₂| {:.4}", s.lambda2),
    )
}

fn structure() -> Outcome {
    let mut worst_defect: f64 = 0.0;
    for (name, spec, arity) in builtin_maps() {
        let m = common::matrix(&spec, arity, level_for(arity));
        let d = invariant_density(&m, DensityMethod::Power, 1e-13, 100_000).map_err(|e| format!("{name}: {e}"))?;
        let s = support_structure(&d.density, 1e-12);
        let covered: f64 = s.cover.measure();
        if s.cells.is_empty() || covered > 1.0 + 1e-12 {
            return Err(format!("{name}: bad cover {:?}", s.cells));
        }
        worst_defect = worst_defect.max(s.defect_mass);
    }
    let dec = peripheral_spectrum(&common::matrix(&decoupled(), 2, 8), PERIPHERAL_TOL).map_err(|e| e.to_string())?;
    let sw = peripheral_spectrum(&common::matrix(&swap(), 2, 8), PERIPHERAL_TOL).map_err(|e| e.to_string())?;
    let swap_ok = sw.contains(Complex64::new(-1.0, 0.0), 1e-9) && sw.cyclic && sw.peripheral.len() == 2;
    check(
        worst_defect <= 1e-6 && dec.eigenspace_dim_at_1 == 2 && dec.contains_one() && swap_ok,
        format!(
            "worst support defect {worst_defect:.1e}; decoupled dim at 1 = {}; swap E = {:?} cyclic {}",
            dec.eigenspace_dim_at_1,
            sw.peripheral.iter().map(|e| (e.re.round(), e.order)).collect::<Vec<_>>(),
            sw.cyclic
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let analyses = [Analysis::Ledger, Analysis::Matrix, Analysis::Density, Analysis::Spectrum, Analysis::Decay, Analysis::Ly, Analysis::Bounds];
    let mut outputs = Vec::new();
    for run_id in 0..2 {
        let mut config = RunConfig::new(MapSpec::golden()).with_analyses(&analyses);
        config.seed = 5;
        config.output = dir.path().join(format!("run{run_id}"));
        let files = run(config).map_err(|e| e.to_string())?;
        let contents: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        outputs.push(contents);
    }
    let same = outputs[0] == outputs[1];
    check(same, format!("golden pipeline run twice with seed 5: {} files byte-identical = {same}", outputs[0].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("grid axioms", grid_axioms),
        ("reconstruction", reconstruction),
        ("doubling exactness", doubling_exactness),
        ("golden density", golden_density),
        ("gauss density", gauss_density),
        ("norm certificate", certificate),
        ("mode cross-check", cross_check),
        ("lasota-yorke", lasota_yorke),
        ("clt variance", clt),
        ("decay", decay),
        ("structure", structure),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
