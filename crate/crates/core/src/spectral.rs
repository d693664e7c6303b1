//! Spectral analysis of truncated transfer operators.
//!
//! The truncated matrix `C U V` is similar to the Ulam operator `U`
//! (`C = V⁻¹`), so eigenvalues are computed on `U`. The nilpotent part is
//! split off by iterating the range of `U` until its rank stabilizes; the
//! remaining core is small enough for a dense Schur decomposition.

use faer::traits::ComplexField;
use faer::Mat;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{random_rep, AtomicRep, PiecewiseFn};
use crate::dynamics::{BranchMap, BranchSystem, Potential};
use crate::grid::{checked_pow, CellId, IntervalUnion};
use crate::transfer::{values_to_coeffs, vector_norm, TransferMatrix, UlamOperator};
use crate::util::neumaier;

/// Largest deflated core handled by the dense eigensolver.
pub const DENSE_CAP: usize = 2048;
/// Correlations below this multiple of `|u|₁ |v|_∞` are rounding noise.
pub const ROUNDING_FLOOR: f64 = 1e-13;
/// Modulus tolerance for membership in the peripheral set.
pub const PERIPHERAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("{what} did not converge after {iterations} iterations (last change {change:e})")]
    NonConvergence { what: &'static str, iterations: usize, change: f64 },
    #[error("correlations underflow after {0} usable samples; at least 5 are needed")]
    DegenerateFit(usize),
    #[error("perturbed spectrum has |λ₂(t)| = {second:.4} within 0.1 of |λ(t)| = {first:.4} at t = {t}")]
    GapCollapse { t: f64, first: f64, second: f64 },
    #[error("eigensolver failure: {0}")]
    Eigensolver(String),
    #[error("observable has mean {0:e} against the invariant density; center it first")]
    NotCentered(f64),
    #[error("{0}")]
    Unsupported(&'static str),
    #[error("step function grew to {pieces} pieces, above the cap of {cap}")]
    PieceBudget { pieces: usize, cap: usize },
    #[error("observable lives at level {got}, matrix at level {want}")]
    LevelMismatch { got: u32, want: u32 },
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn l1(values: &[Complex64], h: f64) -> f64 {
    neumaier(values.iter().map(|v| v.norm())) * h
}

fn integral(values: &[Complex64], h: f64) -> Complex64 {
    Complex64::new(neumaier(values.iter().map(|v| v.re)), neumaier(values.iter().map(|v| v.im))) * h
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn vec_norm(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Invariant density

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMethod {
    /// Power iteration of the Ulam operator.
    Power,
    /// Cesàro averages of Ulam iterates.
    Cesaro,
    /// Power iteration of Φ on step functions; see [`invariant_density_exact`].
    Exact,
}

#[derive(Clone, Debug)]
pub struct DensityReport {
    pub density: PiecewiseFn,
    pub method: DensityMethod,
    pub iterations: usize,
    /// L¹ change of the last step.
    pub change: f64,
    /// Mass removed by clamping negative values.
    pub clamp_mass: f64,
    /// `|Uρ - ρ|₁`.
    pub residual: f64,
}

/// Fixed point of the Ulam operator started from `1`, normalized to mass 1.
pub fn invariant_density(
    matrix: &TransferMatrix,
    method: DensityMethod,
    tol: f64,
    max_iter: usize,
) -> Result<DensityReport, SpectralError> {
    let u = matrix.ulam();
    let n = u.dim();
    let h = 1.0 / n as f64;
    let normalize = |v: &mut Vec<Complex64>| {
        let m = integral(v, h);
        if m.norm() > 0.0 {
            v.iter_mut().for_each(|x| *x /= m);
        }
    };
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    let mut rho = vec![c(1.0); n];
    match method {
        DensityMethod::Power => {
            while iterations < max_iter {
                let mut next = u.apply(&rho);
                normalize(&mut next);
                change = l1(&next.iter().zip(&rho).map(|(a, b)| a - b).collect::<Vec<_>>(), h);
                rho = next;
                iterations += 1;
                if change < tol {
                    break;
                }
            }
        }
        DensityMethod::Exact => {
            return Err(SpectralError::Unsupported("the exact method runs on the branch system; see invariant_density_exact"));
        }
        DensityMethod::Cesaro => {
            let mut iterate = rho.clone();
            let mut sum = rho.clone();
            while iterations < max_iter {
                iterate = u.apply(&iterate);
                iterations += 1;
                let k = iterations as f64;
                let next: Vec<Complex64> = sum.iter().zip(&iterate).map(|(s, x)| (s + x) / (k + 1.0)).collect();
                change = l1(&next.iter().zip(&rho).map(|(a, b)| a - b).collect::<Vec<_>>(), h);
                sum.iter_mut().zip(&iterate).for_each(|(s, x)| *s += x);
                rho = next;
                if change < tol {
                    break;
                }
            }
        }
    }
    if !(change < tol) {
        return Err(SpectralError::NonConvergence { what: "invariant density", iterations, change });
    }
    let mut clamp_mass = 0.0;
    for v in rho.iter_mut() {
        *v = c(v.re);
        if v.re < 0.0 {
            clamp_mass += -v.re * h;
            *v = c(0.0);
        }
    }
    normalize(&mut rho);
    let image = u.apply(&rho);
    let residual = l1(&image.iter().zip(&rho).map(|(a, b)| a - b).collect::<Vec<_>>(), h);
    Ok(DensityReport {
        density: PiecewiseFn::new(u.arity(), u.level(), rho),
        method,
        iterations,
        change,
        clamp_mass,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Eigenvalues

fn dense_ulam(u: &UlamOperator) -> Mat<Complex64> {
    let mut a = Mat::zeros(u.dim(), u.dim());
    for (i, j, v) in u.entries() {
        a[(i, j)] = v;
    }
    a
}

/// Orthonormal basis of the column space, by pivoted QR.
fn range_basis<T: ComplexField>(b: &Mat<T>, rel_tol: f64, modulus: fn(&T) -> f64) -> Mat<T> {
    let qr = b.col_piv_qr();
    let r = qr.R();
    let d = r.nrows().min(r.ncols());
    let top = (0..d).map(|i| modulus(&r[(i, i)])).fold(0.0, f64::max);
    let rank = (0..d).take_while(|&i| modulus(&r[(i, i)]) > rel_tol * top.max(1e-300)).count();
    qr.compute_thin_Q().subcols(0, rank).to_owned()
}

/// Basis `Q` of the stable range of `A` with the core `Qᴴ A Q`.
fn core_of<T: ComplexField>(a: &Mat<T>, modulus: fn(&T) -> f64) -> Mat<T> {
    const RANK_TOL: f64 = 1e-11;
    let mut q = range_basis(a, RANK_TOL, modulus);
    loop {
        if q.ncols() == 0 {
            return Mat::zeros(0, 0);
        }
        let next = range_basis(&(a * &q), RANK_TOL, modulus);
        if next.ncols() == q.ncols() {
            return q.adjoint() * a * &q;
        }
        q = next;
    }
}

#[derive(Clone, Debug)]
struct CoreSpectrum {
    eigenvalues: Vec<Complex64>,
    core: Option<Mat<Complex64>>,
    dense: bool,
}

fn eig_err(e: impl std::fmt::Debug) -> SpectralError {
    SpectralError::Eigensolver(format!("{e:?}"))
}

fn core_spectrum(u: &UlamOperator, top: usize, seed: u64) -> Result<CoreSpectrum, SpectralError> {
    let n = u.dim();
    if n > DENSE_CAP {
        return Ok(CoreSpectrum { eigenvalues: subspace_eigenvalues(u, top, seed)?, core: None, dense: false });
    }
    let a = dense_ulam(u);
    let core: Mat<Complex64> = if u.is_real() {
        let ar = Mat::from_fn(n, n, |i, j| a[(i, j)].re);
        let core = core_of(&ar, |x: &f64| x.abs());
        Mat::from_fn(core.nrows(), core.ncols(), |i, j| c(core[(i, j)]))
    } else {
        core_of(&a, |x: &Complex64| x.norm())
    };
    let mut eig = if core.nrows() == 0 {
        Vec::new()
    } else if u.is_real() {
        Mat::from_fn(core.nrows(), core.ncols(), |i, j| core[(i, j)].re).eigenvalues().map_err(eig_err)?
    } else {
        core.eigenvalues().map_err(eig_err)?
    };
    eig.resize(n, c(0.0));
    Ok(CoreSpectrum { eigenvalues: eig, core: Some(core), dense: true })
}

/// Leading `top` eigenvalues by block subspace iteration with Rayleigh–Ritz.
fn subspace_eigenvalues(u: &UlamOperator, top: usize, seed: u64) -> Result<Vec<Complex64>, SpectralError> {
    let n = u.dim();
    let b = (2 * top).max(8).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Mat<Complex64> = Mat::from_fn(n, b, |_, _| c(rng.random_range(-1.0..1.0)));
    let mut x = x0.qr().compute_thin_Q();
    let apply_block = |x: &Mat<Complex64>| -> Mat<Complex64> {
        let cols: Vec<Vec<Complex64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| u.apply(&(0..n).map(|i| x[(i, j)]).collect::<Vec<_>>()))
            .collect();
        Mat::from_fn(n, x.ncols(), |i, j| cols[j][i])
    };
    let mut prev: Vec<f64> = vec![f64::INFINITY; top];
    for it in 0..5000 {
        let y = apply_block(&x);
        if it % 10 == 9 {
            let h = x.adjoint() * &y;
            let mut ev = h.eigenvalues().map_err(eig_err)?;
            ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
            ev.truncate(top);
            let mods: Vec<f64> = ev.iter().map(|z| z.norm()).collect();
            if mods.iter().zip(&prev).all(|(a, b)| (a - b).abs() < 1e-12) {
                return Ok(ev);
            }
            prev = mods;
        }
        x = y.qr().compute_thin_Q();
    }
    Err(SpectralError::NonConvergence { what: "subspace iteration", iterations: 5000, change: f64::NAN })
}

/// A real step function on `[0, 1]`: `values[i]` on `[breaks[i], breaks[i + 1])`.
#[derive(Clone, Debug, PartialEq)]
struct StepFn {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

const BREAK_TOL: f64 = 1e-13;

impl StepFn {
    fn one() -> Self {
        StepFn { breaks: vec![0.0, 1.0], values: vec![1.0] }
    }

    fn integral(&self) -> f64 {
        neumaier(self.values.iter().zip(self.breaks.windows(2)).map(|(v, w)| v * (w[1] - w[0])))
    }

    /// Value on the piece containing `x`.
    fn at(&self, x: f64) -> f64 {
        let i = self.breaks.partition_point(|b| *b <= x).clamp(1, self.values.len());
        self.values[i - 1]
    }

    /// Exact image under Φ when every branch is affine with constant weight.
    fn transfer(&self, system: &BranchSystem) -> StepFn {
        let mut breaks = vec![0.0, 1.0];
        for b in system.branches() {
            breaks.extend([b.domain.0, b.domain.1]);
            for &x in &self.breaks {
                if x > b.image.0 && x < b.image.1 {
                    breaks.push(b.h_inv(x));
                }
            }
        }
        breaks.retain(|x| (0.0..=1.0).contains(x));
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| *a - *b <= BREAK_TOL);
        *breaks.last_mut().unwrap() = 1.0;
        let mut values = Vec::with_capacity(breaks.len() - 1);
        for w in breaks.windows(2) {
            let y = 0.5 * (w[0] + w[1]);
            let mut v = 0.0;
            for (b, g) in system.branches().iter().zip(system.potentials()) {
                if y > b.domain.0 && y < b.domain.1 {
                    v += g.value(b, y).re * self.at(b.h(y));
                }
            }
            values.push(v);
        }
        let mut out = StepFn { breaks, values };
        out.merge();
        out
    }

    /// Joins neighbouring pieces with equal values.
    fn merge(&mut self) {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut breaks = vec![self.breaks[0]];
        let mut values: Vec<f64> = Vec::with_capacity(self.values.len());
        for (i, &v) in self.values.iter().enumerate() {
            match values.last() {
                Some(&last) if (last - v).abs() <= 1e-15 * scale => {
                    *breaks.last_mut().unwrap() = self.breaks[i + 1];
                }
                _ => {
                    values.push(v);
                    breaks.push(self.breaks[i + 1]);
                }
            }
        }
        self.breaks = breaks;
        self.values = values;
    }

    fn l1_distance(&self, other: &StepFn) -> f64 {
        let mut points: Vec<f64> = self.breaks.iter().chain(&other.breaks).copied().collect();
        points.sort_by(f64::total_cmp);
        points.dedup();
        neumaier(points.windows(2).map(|w| {
            let y = 0.5 * (w[0] + w[1]);
            (self.at(y) - other.at(y)).abs() * (w[1] - w[0])
        }))
    }

    /// Cell averages on the `n` equal cells of `[0, 1]`.
    fn averages(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        let h = 1.0 / n as f64;
        for (v, w) in self.values.iter().zip(self.breaks.windows(2)) {
            let (lo, hi) = (w[0], w[1]);
            let first = ((lo * n as f64).floor() as usize).min(n - 1);
            let last = ((hi * n as f64).ceil() as usize).clamp(first + 1, n);
            for (i, slot) in out.iter_mut().enumerate().take(last).skip(first) {
                let a = lo.max(i as f64 * h);
                let b = hi.min((i + 1) as f64 * h);
                if b > a {
                    *slot += v * (b - a) / h;
                }
            }
        }
        out
    }
}

/// Invariant density by power iteration of Φ on step functions, reported
/// as cell averages at `level`. Exact for affine branches with jacobian or
/// constant potentials whose discontinuity orbits are finite.
pub fn invariant_density_exact(
    system: &BranchSystem,
    level: u32,
    tol: f64,
    max_iter: usize,
    max_pieces: usize,
) -> Result<DensityReport, SpectralError> {
    let arity = system.arity();
    let affine = system.branches().iter().all(|b| matches!(b.map, BranchMap::Affine { .. }));
    let flat = system.potentials().iter().all(|g| matches!(g, Potential::Jacobian | Potential::Constant(_)));
    if !affine || !flat {
        return Err(SpectralError::Unsupported("the exact density method needs affine branches with jacobian or constant potentials"));
    }
    let n = checked_pow(arity, level).ok_or(SpectralError::Unsupported("level overflows the cell count"))?;
    let mut f = StepFn::one();
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < max_iter {
        let mut next = f.transfer(system);
        if next.values.len() > max_pieces {
            return Err(SpectralError::PieceBudget { pieces: next.values.len(), cap: max_pieces });
        }
        let mass = next.integral();
        if mass > 0.0 {
            next.values.iter_mut().for_each(|v| *v /= mass);
        }
        change = next.l1_distance(&f);
        f = next;
        iterations += 1;
        if change < tol {
            break;
        }
    }
    if !(change < tol) {
        return Err(SpectralError::NonConvergence { what: "exact invariant density", iterations, change });
    }
    let mut clamp_mass = 0.0;
    for (v, w) in f.values.iter_mut().zip(f.breaks.windows(2)) {
        if *v < 0.0 {
            clamp_mass += -*v * (w[1] - w[0]);
            *v = 0.0;
        }
    }
    let mass = f.integral();
    f.values.iter_mut().for_each(|v| *v /= mass);
    let residual = f.transfer(system).l1_distance(&f);
    let rho = f.averages(n as usize).into_iter().map(c).collect();
    Ok(DensityReport {
        density: PiecewiseFn::new(arity, level, rho),
        method: DensityMethod::Exact,
        iterations,
        change,
        clamp_mass,
        residual,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeripheralEigenvalue {
    pub re: f64,
    pub im: f64,
    /// Order of the matched root of unity.
    pub order: Option<u64>,
    pub semisimple: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    /// Sorted by decreasing modulus.
    #[serde(skip)]
    pub eigenvalues: Vec<Complex64>,
    pub peripheral: Vec<PeripheralEigenvalue>,
    pub lambda2: f64,
    pub gap: f64,
    pub essential_bound: f64,
    pub eigenspace_dim_at_1: usize,
    pub transitive: bool,
    /// Peripheral set is a cyclic group of roots of unity.
    pub cyclic: bool,
    pub dense: bool,
    pub core_dim: usize,
}

impl SpectralReport {
    pub fn contains_one(&self) -> bool {
        self.peripheral.iter().any(|e| (Complex64::new(e.re, e.im) - 1.0).norm() < 1e-9)
    }

    pub fn contains(&self, z: Complex64, tol: f64) -> bool {
        self.peripheral.iter().any(|e| (Complex64::new(e.re, e.im) - z).norm() < tol)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,re,im,modulus\n");
        for (i, z) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{i},{:e},{:e},{:e}\n", z.re, z.im, z.norm()));
        }
        out
    }
}

/// Convergent `a/b` of `x` with the smallest `b ≤ max_den` within `tol`.
fn match_root_of_unity(z: Complex64, max_den: u64, tol: f64) -> Option<u64> {
    let theta = (z.arg() / std::f64::consts::TAU).rem_euclid(1.0);
    let (mut h0, mut h1, mut k0, mut k1) = (0i128, 1i128, 1i128, 0i128);
    let mut x = theta;
    for _ in 0..64 {
        let a = x.floor() as i128;
        let (h2, k2) = (a * h1 + h0, a * k1 + k0);
        if k2 as u64 > max_den {
            break;
        }
        let root = Complex64::from_polar(1.0, std::f64::consts::TAU * h2 as f64 / k2 as f64);
        if (z - root).norm() <= tol {
            return Some(k2 as u64);
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = x - a as f64;
        if frac < 1e-15 {
            break;
        }
        x = 1.0 / frac;
    }
    if (z - 1.0).norm() <= tol {
        return Some(1);
    }
    None
}

fn count_small_singular(m: &Mat<Complex64>, tol: f64) -> usize {
    m.singular_values().map_or(0, |s| s.iter().filter(|&&x| x < tol).count())
}

fn shifted(b: &Mat<Complex64>, z: Complex64) -> Mat<Complex64> {
    Mat::from_fn(b.nrows(), b.ncols(), |i, j| if i == j { b[(i, j)] - z } else { b[(i, j)] })
}

/// Eigenvalues, peripheral set and structure of the Ulam operator.
pub fn peripheral_spectrum(matrix: &TransferMatrix, tol: f64) -> Result<SpectralReport, SpectralError> {
    let u = matrix.ulam();
    let spec = core_spectrum(u, 8, 0)?;
    let mut eig = spec.eigenvalues;
    eig.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im)));
    let max_den = u.dim() as u64;
    let core_dim = spec.core.as_ref().map_or(0, |m| m.nrows());
    let mut peripheral: Vec<PeripheralEigenvalue> = Vec::new();
    for &z in eig.iter().filter(|z| z.norm() >= 1.0 - tol) {
        if peripheral.iter().any(|p| (Complex64::new(p.re, p.im) - z).norm() < 1e-6) {
            continue;
        }
        let semisimple = spec.core.as_ref().map(|b| {
            let shifted = shifted(b, z);
            let k1 = count_small_singular(&shifted, 1e-8);
            let k2 = count_small_singular(&(&shifted * &shifted), 1e-8);
            k1 == k2
        });
        peripheral.push(PeripheralEigenvalue {
            re: z.re,
            im: z.im,
            order: match_root_of_unity(z, max_den, 1e-6),
            semisimple,
        });
    }
    let eigenspace_dim_at_1 = match &spec.core {
        Some(b) => count_small_singular(&shifted(b, c(1.0)), 1e-8),
        None => eig.iter().filter(|z| (*z - 1.0).norm() < 1e-6).count(),
    };
    let lambda2 = eig.iter().map(|z| z.norm()).filter(|&m| m < 1.0 - tol).fold(0.0, f64::max);
    let lambda2 = if peripheral.len() > 1 || eigenspace_dim_at_1 > 1 { 1.0 } else { lambda2 };
    let cyclic = is_cyclic(&peripheral);
    Ok(SpectralReport {
        eigenvalues: eig,
        peripheral,
        lambda2,
        gap: 1.0 - lambda2,
        essential_bound: matrix.bounds().essential_bound,
        eigenspace_dim_at_1,
        transitive: transitivity_check(matrix, matrix.level().min(10)),
        cyclic,
        dense: spec.dense,
        core_dim,
    })
}

fn is_cyclic(e: &[PeripheralEigenvalue]) -> bool {
    let n = e.len() as u64;
    if n == 0 || e.iter().any(|p| p.order.is_none()) {
        return false;
    }
    let lcm = e.iter().filter_map(|p| p.order).fold(1u64, |a, b| a / gcd(a, b) * b);
    lcm == n
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

// ---------------------------------------------------------------------------
// Transitivity and support

/// Strong connectivity of the level-`k` cell transition digraph.
pub fn transitivity_check(matrix: &TransferMatrix, level: u32) -> bool {
    transitivity_of(matrix.ulam(), level)
}

pub fn transitivity_of(u: &UlamOperator, level: u32) -> bool {
    let level = level.min(u.level());
    let arity = u.arity();
    let n = checked_pow(arity, level).expect("addressable") as usize;
    let shift = checked_pow(arity, u.level() - level).expect("addressable") as usize;
    let mut fwd = vec![Vec::new(); n];
    let mut bwd = vec![Vec::new(); n];
    for (i, j, v) in u.entries() {
        if v.norm() > 0.0 {
            let (a, b) = (j / shift, i / shift);
            fwd[a].push(b);
            bwd[b].push(a);
        }
    }
    let reach = |adj: &Vec<Vec<usize>>| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(&fwd) && reach(&bwd)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupportReport {
    /// Maximal cells covering `{ρ > tol}`.
    pub cells: Vec<CellId>,
    pub cover: IntervalUnion,
    /// Mass of `ρ` outside the cover.
    pub defect_mass: f64,
    pub tol: f64,
}

/// Covers `{ρ > tol}` by maximal grid cells.
pub fn support_structure(density: &PiecewiseFn, tol: f64) -> SupportReport {
    let arity = density.arity();
    let level = density.level();
    let h = density.cell_measure();
    let mut cells: Vec<CellId> =
        density.values().iter().enumerate().filter(|(_, v)| v.re > tol).map(|(j, _)| CellId::new(level, j as u64)).collect();
    for _ in 0..level {
        let mut next = Vec::with_capacity(cells.len());
        let mut i = 0;
        while i < cells.len() {
            let cell = cells[i];
            let m = arity as usize;
            let full = cell.level > 0
                && cell.index % arity as u64 == 0
                && i + m <= cells.len()
                && (0..m).all(|d| cells[i + d] == CellId::new(cell.level, cell.index + d as u64));
            if full {
                next.push(cell.parent(arity).expect("level > 0"));
                i += m;
            } else {
                next.push(cell);
                i += 1;
            }
        }
        let done = next.len() == cells.len();
        cells = next;
        if done {
            break;
        }
    }
    let defect_mass = neumaier(density.values().iter().filter(|v| v.re <= tol).map(|v| v.norm() * h));
    let cover = IntervalUnion::new(cells.iter().map(|c| c.interval(arity)));
    SupportReport { cells, cover, defect_mass, tol }
}

// ---------------------------------------------------------------------------
// Lasota–Yorke

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyReport {
    /// Smallest additive constant covering the ensemble at `lambda`.
    pub c: f64,
    /// Contraction factor fitted on the atoms.
    pub lambda: f64,
    pub n_max: usize,
    pub ensemble_size: usize,
    pub samples: String,
    pub seed: u64,
    pub essential_bound: f64,
    /// `max |Φf|₁ / |f|₁` over the ensemble.
    pub l1_factor: f64,
    pub raw_mode: bool,
    pub pass: bool,
}

/// Random canonical functions of unit coefficient norm, as level-`K` values.
pub fn ly_ensemble(matrix: &TransferMatrix, size: usize, seed: u64) -> Vec<Vec<Complex64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = matrix.level();
    let (arity, params) = (matrix.arity(), *matrix.params());
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let atoms = rng.random_range(1..=6);
        let nonneg = rng.random_bool(0.5);
        let rep = random_rep(params, arity, k, atoms, nonneg, &mut rng);
        let v = rep.evaluate(k).into_values();
        let norm = vector_norm(arity, &params, &values_to_coeffs(arity, k, &params, &v));
        if norm > 0.0 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Every atom of level at most `K`, as unit-norm level-`K` values.
pub fn atom_ensemble(matrix: &TransferMatrix) -> Vec<Vec<Complex64>> {
    let (arity, k, params) = (matrix.arity(), matrix.level(), *matrix.params());
    (0..=k)
        .flat_map(|level| (0..checked_pow(arity, level).expect("addressable")).map(move |j| CellId::new(level, j)))
        .map(|cell| {
            let v = AtomicRep::atom(params, arity, cell, c(1.0)).evaluate(k).into_values();
            let norm = vector_norm(arity, &params, &values_to_coeffs(arity, k, &params, &v));
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// `(|Φⁿf|, |Φⁿf|₁)` for `n = 0..=n_max`.
fn orbit_norms(matrix: &TransferMatrix, f: &[Complex64], n_max: usize) -> Vec<(f64, f64)> {
    let (arity, k, params) = (matrix.arity(), matrix.level(), *matrix.params());
    let h = 1.0 / f.len() as f64;
    let mut v = f.to_vec();
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            v = matrix.ulam().apply(&v);
        }
        out.push((vector_norm(arity, &params, &values_to_coeffs(arity, k, &params, &v)), l1(&v, h)));
    }
    out
}

/// Fits `|Φⁿf| ≤ C|f|₁ + λⁿ|f|` in two stages.
///
/// On every atom, `C` is the largest ratio `|Φⁿf|/|f|₁` over the second half
/// of the tested iterates and `λ` the smallest factor making the inequality
/// hold with that `C`. With `λ` fixed, `C` is then raised to the smallest
/// value covering the random ensemble as well.
pub fn lasota_yorke_verify(matrix: &TransferMatrix, ensemble_size: usize, n_max: usize, seed: u64) -> LyReport {
    let n_top = n_max.max(1);
    let norms = |fs: &[Vec<Complex64>]| -> Vec<Vec<(f64, f64)>> { fs.par_iter().map(|f| orbit_norms(matrix, f, n_top)).collect() };
    let atoms = norms(&atom_ensemble(matrix));
    let random = norms(&ly_ensemble(matrix, ensemble_size, seed));
    let mut c_fit: f64 = 0.0;
    let mut l1_factor: f64 = 0.0;
    for o in atoms.iter().chain(&random) {
        let f1 = o[0].1;
        if f1 > 0.0 {
            l1_factor = l1_factor.max(o[1].1 / f1);
        }
    }
    for o in &atoms {
        let f1 = o[0].1;
        if f1 > 0.0 {
            for item in o.iter().take(n_top + 1).skip(n_top / 2) {
                c_fit = c_fit.max(item.0 / f1);
            }
        }
    }
    let mut lambda: f64 = 0.0;
    for o in &atoms {
        let (f, f1) = o[0];
        for (n, item) in o.iter().enumerate().skip(1) {
            let excess = (item.0 - c_fit * f1).max(0.0) / f;
            if excess > 0.0 {
                lambda = lambda.max(excess.powf(1.0 / n as f64));
            }
        }
    }
    for o in &random {
        let (f, f1) = o[0];
        if f1 > 0.0 {
            for (n, item) in o.iter().enumerate() {
                c_fit = c_fit.max((item.0 - lambda.powi(n as i32) * f) / f1);
            }
        }
    }
    let essential_bound = matrix.bounds().essential_bound;
    let raw_mode = !(matrix.mass_preserving() && matrix.nonnegative());
    LyReport {
        c: c_fit,
        lambda,
        n_max,
        ensemble_size,
        samples: format!("λ from every atom up to level {}; C also covers {ensemble_size} random sparse reps (1-6 atoms); unit canonical norm", matrix.level()),
        seed,
        essential_bound,
        l1_factor,
        raw_mode,
        pass: lambda < 1.0 && lambda <= essential_bound + 1e-9,
    }
}

/// Number of `(f, n)` pairs with `n ≤ n_max` violating the fitted inequality.
pub fn ly_violations(matrix: &TransferMatrix, report: &LyReport, ensemble: &[Vec<Complex64>], n_max: usize) -> usize {
    ensemble
        .par_iter()
        .map(|f| {
            let o = orbit_norms(matrix, f, n_max);
            let (fnorm, f1) = o[0];
            o.iter()
                .enumerate()
                .filter(|(n, item)| item.0 > (report.c * f1 + report.lambda.powi(*n as i32) * fnorm) * (1.0 + 1e-12) + 1e-15)
                .count()
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Decay of correlations

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayReport {
    /// `c_k` for `k = 0..=k_max`.
    pub correlations: Vec<f64>,
    pub fitted_rate: Option<f64>,
    pub certificate_rate: f64,
    /// First `k` from which every later `c_k` is zero up to rounding.
    pub exact_zero_from: Option<usize>,
    pub pass: bool,
}

impl DecayReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,correlation\n");
        for (k, c) in self.correlations.iter().enumerate() {
            out.push_str(&format!("{k},{c:e}\n"));
        }
        out
    }
}

/// Correlations `∫ v Φᵏu − ∫vρ ∫u` and their fitted exponential rate.
pub fn decay_rate(
    matrix: &TransferMatrix,
    density: &PiecewiseFn,
    lambda2: f64,
    u: &AtomicRep,
    v: &PiecewiseFn,
    k_max: usize,
) -> Result<DecayReport, SpectralError> {
    let k = matrix.level();
    if v.level() != k {
        return Err(SpectralError::LevelMismatch { got: v.level(), want: k });
    }
    let h = v.cell_measure();
    let vv = v.values();
    let mut w = u.evaluate(k).into_values();
    let mean_term = integral(&vv.iter().zip(density.values()).map(|(a, b)| a * b).collect::<Vec<_>>(), h) * integral(&w, h);
    let mut corr = Vec::with_capacity(k_max + 1);
    for step in 0..=k_max {
        if step > 0 {
            w = matrix.ulam().apply(&w);
        }
        let cv = integral(&vv.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>(), h) - mean_term;
        corr.push(cv.re);
    }
    let u_scale = l1(&u.evaluate(k).into_values(), h) * vv.iter().fold(0.0f64, |a, x| a.max(x.norm()));
    let scale = corr.iter().fold(u_scale, |a, x| a.max(x.abs()));
    let floor = ROUNDING_FLOOR * scale;
    let exact_zero_from = (0..=k_max).find(|&i| corr[i..].iter().all(|&x| x.abs() <= floor));
    let (fitted_rate, pass) = if exact_zero_from.is_some() {
        (Some(0.0), true)
    } else {
        let pts: Vec<(f64, f64)> = corr
            .iter()
            .enumerate()
            .skip(5)
            .filter(|(_, x)| x.abs() > floor)
            .map(|(i, x)| (i as f64, x.abs().ln()))
            .collect();
        if pts.len() < 5 {
            return Err(SpectralError::DegenerateFit(pts.len()));
        }
        let nf = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let rate = (sxy / sxx).exp();
        (Some(rate), rate <= lambda2 + 0.02)
    };
    Ok(DecayReport { correlations: corr, fitted_rate, certificate_rate: lambda2, exact_zero_from, pass })
}

// ---------------------------------------------------------------------------
// Central limit theorem

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CltReport {
    /// Richardson-extrapolated `-d²/dt² log λ(t)` at 0.
    pub sigma2: f64,
    /// Difference between the two highest-order estimates.
    pub error_estimate: f64,
    /// Central second differences per step `h`.
    pub raw: Vec<(f64, f64)>,
    pub green_kubo: f64,
    pub green_kubo_terms: usize,
    /// Smallest `|λ(t)| - |λ₂(t)|` over the grid.
    pub min_gap: f64,
}

/// Leading eigenpair of `A_t = U diag(e^{itv})` by power iteration.
fn leading_pair(u: &UlamOperator, phase: &[Complex64], start: &[Complex64], adjoint: bool) -> (Complex64, Vec<Complex64>) {
    let op = |x: &[Complex64]| -> Vec<Complex64> {
        if adjoint {
            let y = u.apply_adjoint(x);
            y.iter().zip(phase).map(|(a, p)| a * p.conj()).collect()
        } else {
            u.apply(&x.iter().zip(phase).map(|(a, p)| a * p).collect::<Vec<_>>())
        }
    };
    let mut x = start.to_vec();
    let nx = vec_norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut lambda = c(0.0);
    for _ in 0..100_000 {
        let y = op(&x);
        let new_lambda = dot(&x, &y);
        let ny = vec_norm(&y);
        let next: Vec<Complex64> = y.iter().map(|v| v / ny).collect();
        let phase_fix = {
            let d = dot(&x, &next);
            if d.norm() > 0.0 { d.conj() / d.norm() } else { c(1.0) }
        };
        let next: Vec<Complex64> = next.iter().map(|v| v * phase_fix).collect();
        let diff = vec_norm(&next.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        x = next;
        let converged = (new_lambda - lambda).norm() < 1e-15 * new_lambda.norm().max(1e-300) && diff < 1e-13;
        lambda = new_lambda;
        if converged {
            break;
        }
    }
    (lambda, x)
}

/// `|λ₂|` of `A_t` by power iteration on the spectral complement.
fn second_modulus(u: &UlamOperator, phase: &[Complex64], right: &[Complex64], left: &[Complex64]) -> f64 {
    let lr = dot(left, right);
    let project = |x: &[Complex64]| -> Vec<Complex64> {
        let a = dot(left, x) / lr;
        x.iter().zip(right).map(|(xi, ri)| xi - a * ri).collect()
    };
    let n = right.len();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut x = project(&(0..n).map(|_| c(rng.random_range(-1.0..1.0))).collect::<Vec<_>>());
    let mut logs = Vec::new();
    for _ in 0..300 {
        let nx = vec_norm(&x);
        if nx < 1e-280 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let y = project(&u.apply(&x.iter().zip(phase).map(|(a, p)| a * p).collect::<Vec<_>>()));
        let ny = vec_norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        logs.push(ny.ln());
        x = y;
    }
    let tail = &logs[logs.len() - 50..];
    (tail.iter().sum::<f64>() / tail.len() as f64).exp()
}

/// Green–Kubo sum `∫v²ρ + 2 Σ_{k≥1} ∫ v Φᵏ(vρ)`.
pub fn green_kubo(u: &UlamOperator, density: &PiecewiseFn, v: &[Complex64]) -> (f64, usize) {
    let h = 1.0 / v.len() as f64;
    let mut w: Vec<Complex64> = v.iter().zip(density.values()).map(|(a, b)| a * b).collect();
    let mut total = integral(&v.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>(), h).re;
    let mut terms = 1;
    for _ in 1..=200 {
        w = u.apply(&w);
        let term = 2.0 * integral(&v.iter().zip(&w).map(|(a, b)| a * b).collect::<Vec<_>>(), h).re;
        total += term;
        terms += 1;
        if term.abs() < 1e-14 {
            break;
        }
    }
    (total, terms)
}

/// Asymptotic variance of the Birkhoff sums of a centered observable.
///
/// `t_grid` holds the positive steps `h`; each gives the central second
/// difference of `log λ(t)` and the estimates are Richardson-extrapolated
/// in `h²`.
pub fn clt_variance(
    matrix: &TransferMatrix,
    density: &PiecewiseFn,
    v: &PiecewiseFn,
    t_grid: &[f64],
) -> Result<CltReport, SpectralError> {
    let u = matrix.ulam();
    if v.level() != u.level() {
        return Err(SpectralError::LevelMismatch { got: v.level(), want: u.level() });
    }
    let h = v.cell_measure();
    let vals: Vec<Complex64> = v.values().iter().map(|x| c(x.re)).collect();
    let mean = integral(&vals.iter().zip(density.values()).map(|(a, b)| a * b).collect::<Vec<_>>(), h).re;
    if mean.abs() > 1e-10 {
        return Err(SpectralError::NotCentered(mean));
    }
    let (gk, gk_terms) = green_kubo(u, density, &vals);
    let start: Vec<Complex64> = density.values().to_vec();
    let ones = vec![c(1.0); vals.len()];
    let mut steps: Vec<f64> = t_grid.iter().map(|t| t.abs()).filter(|&t| t > 0.0).collect();
    steps.sort_by(f64::total_cmp);
    steps.dedup();
    let mut min_gap = f64::INFINITY;
    let mut log_lambda = |t: f64| -> Result<Complex64, SpectralError> {
        let phase: Vec<Complex64> = vals.iter().map(|x| Complex64::from_polar(1.0, t * x.re)).collect();
        let (lambda, right) = leading_pair(u, &phase, &start, false);
        let (_, left) = leading_pair(u, &phase, &ones, true);
        let second = second_modulus(u, &phase, &right, &left);
        min_gap = min_gap.min(lambda.norm() - second);
        if lambda.norm() - second < 0.1 {
            return Err(SpectralError::GapCollapse { t, first: lambda.norm(), second });
        }
        Ok(lambda.ln())
    };
    let l0 = log_lambda(0.0)?;
    let mut raw = Vec::new();
    for &s in &steps {
        let d2 = (log_lambda(s)? + log_lambda(-s)? - 2.0 * l0).re / (s * s);
        raw.push((s, -d2));
    }
    // Richardson in h² on a doubling sequence of steps.
    let mut table: Vec<f64> = raw.iter().map(|r| r.1).collect();
    let mut error = f64::NAN;
    let mut order = 1;
    while table.len() > 1 {
        let ratio = if raw.len() > 1 { raw[1].0 / raw[0].0 } else { 2.0 };
        let f = ratio.powi(2 * order);
        let next: Vec<f64> = table.windows(2).map(|w| (f * w[0] - w[1]) / (f - 1.0)).collect();
        error = (next[0] - table[0]).abs();
        table = next;
        order += 1;
    }
    let sigma2 = table.first().copied().unwrap_or(0.0);
    if raw.len() == 1 {
        error = (raw[0].1 - gk).abs();
    }
    Ok(CltReport { sigma2, error_estimate: error, raw, green_kubo: gk, green_kubo_terms: gk_terms, min_gap })
}

/// Monte-Carlo estimate of the asymptotic variance from one orbit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloReport {
    pub sigma2: f64,
    pub samples: usize,
    pub burn_in: usize,
    pub lags: usize,
    pub seed: u64,
    pub mean: f64,
}

/// Lag window at which `|λ₂|^L` falls below `1e-4`, at least 1.
pub fn lag_window(lambda2: f64) -> usize {
    if lambda2 <= 0.0 {
        1
    } else {
        ((1e-4f64).ln() / lambda2.min(0.999).ln()).ceil().max(1.0) as usize
    }
}

/// Birkhoff-sum variance `γ₀ + 2 Σ_{l=1}^{L} γ_l` along a random orbit.
///
/// Full shifts draw the orbit from a random digit stream, which is an exact
/// orbit at double precision; other systems iterate `T` in floating point.
pub fn monte_carlo_variance(
    system: &BranchSystem,
    observable: impl Fn(f64) -> f64,
    samples: usize,
    burn_in: usize,
    lags: usize,
    seed: u64,
) -> MonteCarloReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = samples + burn_in;
    let mut xs = Vec::with_capacity(total);
    match system.is_full_shift() {
        Some(m) => {
            let m64 = m as u64;
            let digits = (53.0 / (m as f64).log2()).floor() as usize;
            let modulus = m64.pow(digits as u32);
            let mut window: u64 = rng.random_range(0..modulus);
            for _ in 0..total {
                xs.push(window as f64 / modulus as f64);
                window = (window % (modulus / m64)) * m64 + rng.random_range(0..m64);
            }
        }
        None => {
            let mut x: f64 = rng.random_range(0.0..1.0);
            for _ in 0..total {
                xs.push(x);
                x = system.forward(x).unwrap_or_else(|| rng.random_range(0.0..1.0));
            }
        }
    }
    let v: Vec<f64> = xs[burn_in..].iter().map(|&x| observable(x)).collect();
    let n = v.len() as f64;
    let mean = neumaier(v.iter().copied()) / n;
    let d: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let gamma = |l: usize| neumaier(d.iter().zip(&d[l..]).map(|(a, b)| a * b)) / n;
    let sigma2 = gamma(0) + 2.0 * (1..=lags).map(gamma).sum::<f64>();
    MonteCarloReport { sigma2, samples, burn_in, lags, seed, mean }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roots_of_unity_are_matched() {
        assert_eq!(match_root_of_unity(c(1.0), 10, 1e-9), Some(1));
        assert_eq!(match_root_of_unity(c(-1.0), 10, 1e-9), Some(2));
        let z = Complex64::from_polar(1.0, std::f64::consts::TAU / 3.0);
        assert_eq!(match_root_of_unity(z, 10, 1e-9), Some(3));
        assert_eq!(match_root_of_unity(Complex64::from_polar(1.0, 1.0), 10, 1e-9), None);
    }

    #[test]
    fn lag_window_tracks_gap() {
        assert_eq!(lag_window(0.0), 1);
        assert!(lag_window(0.5) >= 13);
    }

    #[test]
    fn nilpotent_core_is_empty() {
        let a = Mat::from_fn(3, 3, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        let core = core_of(&a, |x: &f64| x.abs());
        assert_eq!(core.nrows(), 0);
    }

    #[test]
    fn step_function_merges_and_averages() {
        let mut f = StepFn { breaks: vec![0.0, 0.25, 0.5, 1.0], values: vec![2.0, 2.0, 0.0] };
        f.merge();
        assert_eq!(f.breaks, vec![0.0, 0.5, 1.0]);
        assert_eq!(f.integral(), 1.0);
        assert_eq!(f.averages(4), vec![2.0, 2.0, 0.0, 0.0]);
        assert_eq!(f.averages(1), vec![1.0]);
        assert_eq!(f.l1_distance(&StepFn::one()), 1.0);
        assert_eq!(f.at(0.5), 0.0);
        assert_eq!(f.at(1.0), 0.0);
    }

    #[test]
    fn exact_density_of_golden_map() {
        use crate::besov::BesovParams;
        use crate::dynamics::{make_map, MapSpec, SystemOptions};
        let sys = make_map(&MapSpec::golden(), &BesovParams::default(), &SystemOptions::with_level(8)).unwrap();
        let d = invariant_density_exact(&sys, 8, 1e-14, 200, 100).unwrap();
        let rho = d.density.values();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((rho[10].re / rho[250].re - phi).abs() < 1e-12);
        assert!((d.density.integral().re - 1.0).abs() < 1e-14);
        assert!(d.residual < 1e-12);
    }

    #[test]
    fn exact_density_rejects_curved_branches() {
        use crate::besov::BesovParams;
        use crate::dynamics::{make_map, MapSpec, SystemOptions};
        let sys = make_map(&MapSpec::lorenz_cusp(0.75), &BesovParams::default(), &SystemOptions::with_level(6)).unwrap();
        assert!(matches!(invariant_density_exact(&sys, 6, 1e-12, 10, 100), Err(SpectralError::Unsupported(_))));
    }
}
