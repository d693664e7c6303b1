//! Transfer operators on atomic representations.
//!
//! [`prepare`] checks Lebesgue boundedness, measures the slicing ledger and
//! builds the Ulam operator at the working level. [`apply_transfer`] then
//! runs either the proof-following construction (slice, decompose
//! preimages, expand local potential representations) or the quadrature
//! oracle, and [`assemble_matrix`] truncates the operator to the cells of
//! level at most `K`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{canonical_rep, norm_of_magnitudes, telescope, AtomicRep, BesovError, BesovParams, PiecewiseFn, Telescope};
use crate::domains::{decompose_to_depth, strong_regularity_scan, DomainError};
use crate::dynamics::{potential_cell_values, BranchSystem, DynamicsError};
use crate::grid::{cell_measure, checked_pow, float_exact_level, meeting_range, CellId, IntervalUnion};
use crate::util::neumaier;

/// Default cap on the number of basis cells of a matrix.
pub const DEFAULT_MAX_CELLS: u64 = 8191;
/// Absolute L¹ tolerance of the analytic/numeric cross-check.
pub const CROSS_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("Lebesgue boundedness assumption fails: {0}")]
    LebesgueBound(String),
    #[error("branch family is not strongly regular: {0}")]
    NonRegular(String),
    #[error("slicing constants diverge: {0}")]
    Divergence(String),
    #[error("analytic and numeric transfer differ by {l1:e} in L¹ (tolerance {tol:e})")]
    ModeMismatch { l1: f64, tol: f64 },
    #[error("basis of {cells} cells exceeds the cap of {cap}")]
    Budget { cells: u64, cap: u64 },
    #[error("split level {t} exceeds working level {k}")]
    BadSplit { t: u32, k: u32 },
    #[error("representation does not match the system: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Besov(#[from] BesovError),
}

/// Constants inherited from the underlying atomic-space theory. They are
/// configuration, not measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConstants {
    pub c_gc: f64,
    pub c_gbs: f64,
    pub c_gbva: f64,
    /// `None` uses `1/(1 - c_G2^{β-s})`.
    pub c_gsr: Option<f64>,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants { c_gc: 4.0, c_gbs: 2.0, c_gbva: 1.0, c_gsr: None }
    }
}

impl BoundConstants {
    pub fn gsr(&self, arity: u32, params: &BesovParams) -> f64 {
        self.c_gsr.unwrap_or_else(|| 1.0 / (1.0 - (1.0 / arity as f64).powf(params.beta - params.s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferOptions {
    /// Head/tail split level `t`.
    pub split_level: u32,
    pub constants: BoundConstants,
    /// Decomposition depth of the analytic mode; `None` is the float-exact level.
    pub analytic_depth: Option<u32>,
    /// Number of leading branches put in the summable Lebesgue class.
    pub lebesgue_head: usize,
    pub max_cells: u64,
    /// Run the numeric oracle alongside every analytic application.
    pub cross_check: bool,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            split_level: 2,
            constants: BoundConstants::default(),
            analytic_depth: None,
            lebesgue_head: 8,
            max_cells: DEFAULT_MAX_CELLS,
            cross_check: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Ulam operator

/// `E_K Φ` on functions constant on the level-`K` cells, stored as CSR.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    arity: u32,
    level: u32,
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
}

impl UlamOperator {
    pub fn build(system: &BranchSystem, level: u32) -> UlamOperator {
        let arity = system.arity();
        let n = checked_pow(arity, level).expect("level addressable") as usize;
        let h = cell_measure(arity, level);
        let per_branch: Vec<Vec<(usize, usize, Complex64)>> = system
            .branches()
            .par_iter()
            .zip(system.potentials().par_iter())
            .map(|(b, g)| {
                let mut out = Vec::new();
                for j in meeting_range(arity, level, b.image.0, b.image.1) {
                    let (lo, hi) = CellId::new(level, j).interval(arity);
                    let (plo, phi) = (lo.max(b.image.0), hi.min(b.image.1));
                    if phi <= plo {
                        continue;
                    }
                    let (a, bb) = b.preimage(plo, phi);
                    for i in meeting_range(arity, level, a, bb) {
                        let (ilo, ihi) = CellId::new(level, i).interval(arity);
                        let (olo, ohi) = (a.max(ilo), bb.min(ihi));
                        if ohi <= olo {
                            continue;
                        }
                        let v = g.integral(b, olo, ohi) / h;
                        if v != Complex64::new(0.0, 0.0) {
                            out.push((i as usize, j as usize, v));
                        }
                    }
                }
                out
            })
            .collect();
        let mut trip: Vec<(usize, usize, Complex64)> = per_branch.into_iter().flatten().collect();
        trip.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<Complex64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in trip {
            if last == Some((i, j)) {
                *vals.last_mut().expect("nonempty") += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        UlamOperator { arity, level, n, row_ptr, cols, vals }
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_real(&self) -> bool {
        self.vals.iter().all(|v| v.im == 0.0)
    }

    /// Row-major `(row, col, value)` triplets.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        (0..self.n).flat_map(move |i| (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.vals[k])))
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.n, "dimension mismatch");
        let row = |i: usize| -> Complex64 {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(|k| self.vals[k] * x[self.cols[k]]).sum()
        };
        if self.n >= 4096 {
            (0..self.n).into_par_iter().map(row).collect()
        } else {
            (0..self.n).map(row).collect()
        }
    }

    /// `U^H y`.
    pub fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(y.len(), self.n, "dimension mismatch");
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (i, j, v) in self.entries() {
            out[j] += v.conj() * y[i];
        }
        out
    }

    /// `∫ U e_j dm / |P_j|` for every column.
    pub fn column_masses(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (_, j, v) in self.entries() {
            out[j] += v;
        }
        out
    }

    pub fn apply_fn(&self, f: &PiecewiseFn) -> PiecewiseFn {
        let f = f.resample(self.level);
        PiecewiseFn::new(self.arity, self.level, self.apply(f.values()))
    }
}

// ---------------------------------------------------------------------------
// Coefficient vectors on the truncated basis

/// `Σ_{k≤K} m^k`.
pub fn basis_size(arity: u32, level: u32) -> u64 {
    (0..=level).map(|k| checked_pow(arity, k).expect("addressable")).sum()
}

/// Position of `cell` in the level-major basis.
pub fn basis_index(arity: u32, cell: &CellId) -> usize {
    (basis_size(arity, cell.level) - checked_pow(arity, cell.level).expect("addressable")) as usize + cell.index as usize
}

pub fn basis_cell(arity: u32, index: usize) -> CellId {
    let mut rest = index as u64;
    let mut level = 0;
    loop {
        let n = checked_pow(arity, level).expect("addressable");
        if rest < n {
            return CellId::new(level, rest);
        }
        rest -= n;
        level += 1;
    }
}

/// Level-`K` cell values of `Σ x_Q a_Q`.
pub fn coeffs_to_values(arity: u32, level: u32, params: &BesovParams, x: &[Complex64]) -> Vec<Complex64> {
    let m = arity as usize;
    let e = params.atom_exponent();
    let mut acc = vec![x[0]];
    let mut offset = 1;
    for k in 1..=level {
        let height = cell_measure(arity, k).powf(e);
        let n = acc.len() * m;
        let mut next = Vec::with_capacity(n);
        for (j, v) in acc.iter().enumerate() {
            for c in 0..m {
                next.push(*v + x[offset + j * m + c] * height);
            }
        }
        offset += n;
        acc = next;
    }
    acc
}

/// Canonical coefficients of the function with level-`K` values `v`.
pub fn values_to_coeffs(arity: u32, level: u32, params: &BesovParams, v: &[Complex64]) -> Vec<Complex64> {
    let m = arity as usize;
    let e = 1.0 / params.p - params.s;
    let mut levels = vec![v.to_vec()];
    for _ in 0..level {
        let finer = levels.last().expect("nonempty");
        levels.push(finer.chunks(m).map(|c| c.iter().sum::<Complex64>() / m as f64).collect());
    }
    levels.reverse();
    let mut out = Vec::with_capacity(basis_size(arity, level) as usize);
    out.push(levels[0][0]);
    for k in 1..=level as usize {
        let weight = cell_measure(arity, k as u32).powf(e);
        for (j, val) in levels[k].iter().enumerate() {
            out.push((val - levels[k - 1][j / m]) * weight);
        }
    }
    out
}

/// Dense coefficient vector of `rep`; atoms deeper than `K` are averaged
/// onto their level-`K` ancestors.
pub fn rep_to_vector(rep: &AtomicRep, level: u32) -> Vec<Complex64> {
    if rep.max_level().is_none_or(|l| l <= level) {
        let mut x = vec![Complex64::new(0.0, 0.0); basis_size(rep.arity(), level) as usize];
        for (c, d) in rep.coeffs() {
            x[basis_index(rep.arity(), c)] = *d;
        }
        x
    } else {
        values_to_coeffs(rep.arity(), level, rep.params(), rep.evaluate(level).values())
    }
}

pub fn vector_to_rep(params: &BesovParams, arity: u32, x: &[Complex64]) -> AtomicRep {
    AtomicRep::from_coeffs(
        *params,
        arity,
        x.iter().enumerate().filter(|(_, d)| d.norm() != 0.0).map(|(i, d)| (basis_cell(arity, i), *d)),
    )
}

/// Coefficient norm of a dense vector.
pub fn vector_norm(arity: u32, params: &BesovParams, x: &[Complex64]) -> f64 {
    norm_of_magnitudes(x.iter().enumerate().map(|(i, d)| (basis_cell_fast(arity, i), d.norm())), params.p, params.q)
}

fn basis_cell_fast(arity: u32, index: usize) -> CellId {
    // Only the level matters for norms.
    let m = arity as u64;
    let mut rest = index as u64;
    let mut n = 1u64;
    let mut level = 0;
    while rest >= n {
        rest -= n;
        n *= m;
        level += 1;
    }
    CellId::new(level, rest)
}

// ---------------------------------------------------------------------------
// Lebesgue boundedness

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub eps_prime: f64,
    pub t0: f64,
    pub t0_conj: f64,
    /// Disjoint branches with `sup g ≤ c_disj |Q|/|h⁻¹Q|`.
    pub lambda1: Vec<usize>,
    /// Branches with `Σ c_DC2^{ε' a_r}` summed.
    pub lambda2: Vec<usize>,
    /// Disjoint branches with `Σ c_DC2^{t0' a_r ε'}` summed.
    pub lambda3: Vec<usize>,
    pub c_disj: f64,
    pub c11: f64,
    pub c_dc1: f64,
    pub sum_lambda2: f64,
    pub sum_lambda3: f64,
    /// `|Φf|₁ ≤ c_leb |f|_{t0}`.
    pub c_leb: f64,
    pub pass: bool,
}

/// Sorts branches into the three Lebesgue classes and aggregates the
/// `L^{t0} -> L¹` constant.
pub fn lebesgue_bound_check(system: &BranchSystem, head: usize) -> Result<BoundReport, TransferError> {
    if let Some((r, e)) = system.issues().first() {
        return Err(TransferError::LebesgueBound(format!("branch {r}: {e}")));
    }
    let params = system.params();
    let eps_prime = params.eps - params.delta;
    let t0 = params.t0();
    let t0_conj = t0 / (t0 - 1.0);
    let ledger: Vec<_> = system.ledger().iter().flatten().collect();
    let disjoint = images_disjoint(system);
    let mut report = BoundReport {
        eps_prime,
        t0,
        t0_conj,
        lambda1: vec![],
        lambda2: vec![],
        lambda3: vec![],
        c_disj: 0.0,
        c11: 0.0,
        c_dc1: 0.0,
        sum_lambda2: 0.0,
        sum_lambda3: 0.0,
        c_leb: 0.0,
        pass: false,
    };
    let mut s2 = Vec::new();
    let mut s3 = Vec::new();
    for (i, l) in ledger.iter().enumerate() {
        if i < head {
            report.lambda2.push(l.r);
            s2.push(l.c_dc2.powf(eps_prime * l.a_r as f64));
        } else if disjoint && l.c_disj.is_finite() {
            report.lambda1.push(l.r);
            report.c_disj = report.c_disj.max(l.c_disj);
            continue;
        } else {
            report.lambda3.push(l.r);
            s3.push(l.c_dc2.powf(t0_conj * l.a_r as f64 * eps_prime));
        }
        report.c11 = report.c11.max(l.c11);
        report.c_dc1 = report.c_dc1.max(l.c_dc1);
    }
    if !disjoint && !report.lambda3.is_empty() {
        return Err(TransferError::LebesgueBound("overlapping branch images cannot form a disjoint class".into()));
    }
    report.sum_lambda2 = neumaier(s2);
    report.sum_lambda3 = neumaier(s3);
    let k = report.c11 * report.c_dc1.powf(eps_prime);
    report.c_leb = report.c_disj + k * report.sum_lambda2 + k * report.sum_lambda3.powf(1.0 / t0_conj);
    report.pass = report.c_leb.is_finite();
    if !report.pass {
        return Err(TransferError::LebesgueBound(format!("c_leb = {}", report.c_leb)));
    }
    Ok(report)
}

fn images_disjoint(system: &BranchSystem) -> bool {
    let mut im: Vec<(f64, f64)> = system.branches().iter().map(|b| b.image).collect();
    im.sort_by(|a, b| a.0.total_cmp(&b.0));
    im.windows(2).all(|w| w[1].0 >= w[0].1 - 1e-15)
}

/// Largest number of `J_r` covering a common cell.
fn overlap_count(system: &BranchSystem) -> usize {
    let mut ev: Vec<(f64, i32)> = Vec::new();
    for b in system.branches() {
        if b.domain.1 > b.domain.0 {
            ev.push((b.domain.0, 1));
            ev.push((b.domain.1, -1));
        }
    }
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in ev {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

// ---------------------------------------------------------------------------
// Slicing ledger

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicingMode {
    /// `Σ_r Θ_r (Σ|c|^p)^{1/p}` per level.
    Weighted,
    /// `N^{1/p'} (Σ_r Θ_r^p Σ|c|^p)^{1/p}` per level.
    Overlap,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlicingCandidate {
    pub name: &'static str,
    pub applicable: bool,
    pub c_fr: f64,
    pub c_es: f64,
    pub mode: SlicingMode,
    pub formula_fr: &'static str,
    pub formula_es: &'static str,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlicingLedger {
    pub t: u32,
    pub alpha: f64,
    /// Strong-regularity constant of the `I_r` from level `t`.
    pub c_strong_t: f64,
    /// Strong-regularity constant of the `I_r` from level 0.
    pub c_strong_0: f64,
    /// Strong-regularity constant of `∪ I_r` from level 0.
    pub c_strong_union: f64,
    pub m_crowd: usize,
    pub t_crowd: f64,
    pub n_overlap: usize,
    pub n_branches: usize,
    pub sum_theta: f64,
    pub norm_theta_pconj: f64,
    pub sup_theta: f64,
    pub c_gsr: f64,
    pub disjoint: bool,
    pub cells_single_branch: bool,
    pub candidates: Vec<SlicingCandidate>,
    /// Candidate minimizing `C_ES`.
    pub essential: usize,
    /// Candidate minimizing `C_FR + C_ES`.
    pub regular: usize,
}

impl SlicingLedger {
    pub fn c_fr(&self) -> f64 {
        self.candidates[self.essential].c_fr
    }

    pub fn c_es(&self) -> f64 {
        self.candidates[self.essential].c_es
    }

    pub fn c_rs1(&self) -> f64 {
        let c = &self.candidates[self.regular];
        c.c_fr + c.c_es
    }

    pub fn mode(&self) -> SlicingMode {
        self.candidates[self.regular].mode
    }
}

/// Measures the constants of the Core and Tail slicing theorems.
pub fn slicing_ledger(system: &BranchSystem, t: u32, constants: &BoundConstants) -> Result<SlicingLedger, TransferError> {
    let params = system.params();
    let arity = system.arity();
    let m = arity as f64;
    let thetas: Vec<f64> = system
        .branches()
        .iter()
        .map(|b| crate::dynamics::theta(system, b.id))
        .collect::<Result<_, _>>()?;
    let alpha = 1.0 - params.beta * params.p;
    let scan = system.options().probe_top();
    let depth = float_exact_level(arity);
    let strong = |set: IntervalUnion, from: u32| -> Result<f64, TransferError> {
        let r = strong_regularity_scan(arity, &set, alpha, from, scan.max(from), depth)?;
        if !r.c_strong.is_finite() {
            return Err(TransferError::NonRegular(format!("c_strong = {}", r.c_strong)));
        }
        Ok(r.c_strong)
    };
    let per_branch: Vec<(f64, f64)> = system
        .branches()
        .par_iter()
        .map(|b| {
            let set = IntervalUnion::interval(b.image.0, b.image.1);
            Ok((strong(set.clone(), t)?, strong(set, 0)?))
        })
        .collect::<Result<_, TransferError>>()?;
    let c_strong_t = per_branch.iter().map(|x| x.0).fold(0.0, f64::max);
    let c_strong_0 = per_branch.iter().map(|x| x.1).fold(0.0, f64::max);
    let union = system.image_union();
    let c_strong_union = strong(union.clone(), 0)?;

    let (mut m_crowd, mut t_crowd) = (0usize, 0.0f64);
    for j in 0..checked_pow(arity, t).expect("addressable") {
        let (lo, hi) = CellId::new(t, j).interval(arity);
        let hits = system.branches_meeting(lo, hi);
        m_crowd = m_crowd.max(hits.len());
        t_crowd = t_crowd.max(neumaier(hits.iter().map(|&i| thetas[i])));
    }
    let n_overlap = overlap_count(system);
    let n_branches = thetas.len();
    let p = params.p;
    let pc = params.p_conj();
    let sum_theta = neumaier(thetas.iter().copied());
    let sup_theta = thetas.iter().copied().fold(0.0, f64::max);
    let norm_theta_pconj =
        if pc.is_infinite() { sup_theta } else { neumaier(thetas.iter().map(|x| x.powf(pc))).powf(1.0 / pc) };
    let n_pow = if pc.is_infinite() { 1.0 } else { (n_overlap as f64).powf(1.0 / pc) };
    if !sum_theta.is_finite() {
        return Err(TransferError::Divergence(format!("Σ Θ_r = {sum_theta}")));
    }
    let gsr = constants.gsr(arity, params);
    let disjoint = images_disjoint(system);
    let cells_single_branch = cells_single_branch(system, &union, scan);
    let lift = (c_strong_t * m.powi(t as i32)).powf(1.0 / p);
    let nb = n_branches as f64;
    let candidates = vec![
        SlicingCandidate {
            name: "core_i",
            applicable: true,
            c_fr: gsr * nb * lift * norm_theta_pconj,
            c_es: gsr * m_crowd as f64 * c_strong_t.powf(1.0 / p) * norm_theta_pconj,
            mode: SlicingMode::Weighted,
            formula_fr: "C_GSR · #Λ · (c_strong(t) · c_G1^{-t})^{1/p} · (Σ Θ_r^{p'})^{1/p'}",
            formula_es: "C_GSR · M · c_strong(t)^{1/p} · (Σ Θ_r^{p'})^{1/p'}",
            note: String::new(),
        },
        SlicingCandidate {
            name: "core_ii",
            applicable: true,
            c_fr: gsr * n_pow * nb * sup_theta * lift,
            c_es: gsr * n_pow * c_strong_t.powf(1.0 / p) * t_crowd,
            mode: SlicingMode::Overlap,
            formula_fr: "C_GSR · N^{1/p'} · #Λ · sup Θ_r · (c_strong(t) · c_G1^{-t})^{1/p}",
            formula_es: "C_GSR · N^{1/p'} · c_strong(t)^{1/p} · T",
            note: String::new(),
        },
        SlicingCandidate {
            name: "tail_i",
            applicable: disjoint,
            c_fr: 0.0,
            c_es: gsr * c_strong_0.powf(1.0 / p) * sum_theta,
            mode: SlicingMode::Weighted,
            formula_fr: "0",
            formula_es: "C_GSR · c_strong(0)^{1/p} · Σ Θ_r",
            note: if disjoint { String::new() } else { "branch images overlap".into() },
        },
        SlicingCandidate {
            name: "tail_ii",
            applicable: disjoint && cells_single_branch,
            c_fr: 0.0,
            c_es: gsr * n_pow * c_strong_union.powf(1.0 / p) * sup_theta,
            mode: SlicingMode::Overlap,
            formula_fr: "0",
            formula_es: "C_GSR · N^{1/p'} · c_strong(∪I_r, 0)^{1/p} · sup Θ_r",
            note: if cells_single_branch { String::new() } else { "a cell inside ∪I_r meets two branches".into() },
        },
    ];
    let pick = |key: &dyn Fn(&SlicingCandidate) -> (f64, f64)| -> usize {
        (0..candidates.len())
            .filter(|&i| candidates[i].applicable)
            .min_by(|&a, &b| key(&candidates[a]).partial_cmp(&key(&candidates[b])).expect("finite constants"))
            .expect("core candidates always apply")
    };
    let essential = pick(&|c| (c.c_es, c.c_fr));
    let regular = pick(&|c| (c.c_fr + c.c_es, c.c_es));
    Ok(SlicingLedger {
        t,
        alpha,
        c_strong_t,
        c_strong_0,
        c_strong_union,
        m_crowd,
        t_crowd,
        n_overlap,
        n_branches,
        sum_theta,
        norm_theta_pconj,
        sup_theta,
        c_gsr: gsr,
        disjoint,
        cells_single_branch,
        candidates,
        essential,
        regular,
    })
}

/// Every cell inside `∪I_r` (up to `scan`) lies inside a single `I_r`.
fn cells_single_branch(system: &BranchSystem, union: &IntervalUnion, scan: u32) -> bool {
    let arity = system.arity();
    let cuts: Vec<f64> = system
        .branches()
        .iter()
        .flat_map(|b| [b.image.0, b.image.1])
        .filter(|&x| union.pieces().iter().any(|&(a, b)| x > a && x < b))
        .collect();
    for x in cuts {
        for k in 0..=scan {
            let n = checked_pow(arity, k).expect("addressable");
            let j = ((x * n as f64).floor() as u64).min(n - 1);
            let cell = CellId::new(k, j);
            let (lo, hi) = cell.interval(arity);
            if x > lo && x < hi && union.contains_cell(&cell, arity) {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Bound ledger

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundEntry {
    pub name: String,
    pub formula: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundLedger {
    pub c_gbs: f64,
    pub c_gc: f64,
    pub c_gbva: f64,
    pub c_gsr: f64,
    pub lambda_rs2: f64,
    pub gamma: f64,
    pub c_d: f64,
    pub t: u32,
    pub c_fr: f64,
    pub c_es: f64,
    pub c_rs1: f64,
    pub essential_source: String,
    pub regular_source: String,
    pub finite_rank_bound: f64,
    pub essential_bound: f64,
    pub norm_bound: f64,
    pub certificate_factor: f64,
}

impl BoundLedger {
    fn new(lambda_rs2: f64, params: &BesovParams, constants: &BoundConstants, slicing: &SlicingLedger) -> Self {
        let c_d = 2.0 / (1.0 - lambda_rs2.powf(params.gamma));
        let (c_fr, c_es, c_rs1) = (slicing.c_fr(), slicing.c_es(), slicing.c_rs1());
        let k = constants.c_gbs * c_d * constants.c_gc;
        BoundLedger {
            c_gbs: constants.c_gbs,
            c_gc: constants.c_gc,
            c_gbva: constants.c_gbva,
            c_gsr: slicing.c_gsr,
            lambda_rs2,
            gamma: params.gamma,
            c_d,
            t: slicing.t,
            c_fr,
            c_es,
            c_rs1,
            essential_source: slicing.candidates[slicing.essential].name.into(),
            regular_source: slicing.candidates[slicing.regular].name.into(),
            finite_rank_bound: k * c_fr,
            essential_bound: k * c_es,
            norm_bound: k * (c_fr + c_es),
            certificate_factor: constants.c_gbs * c_d * c_rs1,
        }
    }

    /// Every bound with its defining formula.
    pub fn entries(&self) -> Vec<BoundEntry> {
        let e = |name: &str, formula: &str, value: f64| BoundEntry { name: name.into(), formula: formula.into(), value };
        vec![
            e("C_GBS", "configured", self.c_gbs),
            e("C_GC", "configured", self.c_gc),
            e("C_GBVA", "configured", self.c_gbva),
            e("C_GSR", "1/(1 - c_G2^{β-s}) unless configured", self.c_gsr),
            e("lambda_RS2", "sup_r max(c_DC2^ε, c_DGD2^{1/p})", self.lambda_rs2),
            e("C_D", "2/(1 - λ_RS2^γ)", self.c_d),
            e("C_FR", "finite-rank slicing constant", self.c_fr),
            e("C_ES", "essential slicing constant", self.c_es),
            e("C_RS1", "C_FR + C_ES of the best regular slicing", self.c_rs1),
            e("finite_rank_bound", "C_GBS · C_D · C_FR · C_GC", self.finite_rank_bound),
            e("essential_bound", "C_GBS · C_D · C_ES · C_GC", self.essential_bound),
            e("norm_bound", "C_GBS · C_D · (C_FR + C_ES) · C_GC", self.norm_bound),
            e("certificate_factor", "C_GBS · C_D · C_RS1", self.certificate_factor),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&format!("{:<20} = {:<14.6e} # {}\n", e.name, e.value, e.formula));
        }
        out.push_str(&format!("{:<20} = {:<14} # split level\n", "t", self.t));
        out.push_str(&format!("{:<20} = {:<14} # candidate giving C_ES\n", "essential_source", self.essential_source));
        out.push_str(&format!("{:<20} = {:<14} # candidate giving C_RS1\n", "regular_source", self.regular_source));
        out
    }
}

// ---------------------------------------------------------------------------
// Prepared transfer

#[derive(Clone, Debug, Default)]
struct Stats {
    budget_checked: usize,
    budget_violations: usize,
    max_budget_ratio: f64,
    defect: f64,
}

impl Stats {
    fn merge(&mut self, o: &Stats, scale: f64) {
        self.budget_checked += o.budget_checked;
        self.budget_violations += o.budget_violations;
        self.max_budget_ratio = self.max_budget_ratio.max(o.max_budget_ratio);
        self.defect += o.defect * scale;
    }
}

#[derive(Clone, Debug)]
struct BranchCache {
    /// Decomposition of `I_r`.
    pieces: Vec<CellId>,
    residual: f64,
    /// Representation of `Φ_r 1_{I_r}`.
    unit: Vec<(CellId, Complex64)>,
    stats: Stats,
}

/// A branch system with its measured ledgers and Ulam operator.
#[derive(Clone, Debug)]
pub struct Transfer {
    system: BranchSystem,
    options: TransferOptions,
    lebesgue: BoundReport,
    slicing: SlicingLedger,
    bounds: BoundLedger,
    ulam: UlamOperator,
    depth: u32,
    cache: Vec<OnceLock<BranchCache>>,
}

/// Checks boundedness, measures slicing constants and builds the Ulam operator.
pub fn prepare(system: BranchSystem, options: TransferOptions) -> Result<Transfer, TransferError> {
    let k = system.options().working_level;
    if options.split_level > k {
        return Err(TransferError::BadSplit { t: options.split_level, k });
    }
    let lebesgue = lebesgue_bound_check(&system, options.lebesgue_head)?;
    let slicing = slicing_ledger(&system, options.split_level, &options.constants)?;
    let bounds = BoundLedger::new(system.lambda_rs2()?, system.params(), &options.constants, &slicing);
    let ulam = UlamOperator::build(&system, k);
    let depth = options.analytic_depth.unwrap_or_else(|| float_exact_level(system.arity()));
    let cache = (0..system.branches().len()).map(|_| OnceLock::new()).collect();
    Ok(Transfer { system, options, lebesgue, slicing, bounds, ulam, depth, cache })
}

impl Transfer {
    pub fn system(&self) -> &BranchSystem {
        &self.system
    }

    pub fn options(&self) -> &TransferOptions {
        &self.options
    }

    pub fn params(&self) -> &BesovParams {
        self.system.params()
    }

    pub fn arity(&self) -> u32 {
        self.system.arity()
    }

    pub fn level(&self) -> u32 {
        self.ulam.level
    }

    pub fn lebesgue(&self) -> &BoundReport {
        &self.lebesgue
    }

    pub fn slicing(&self) -> &SlicingLedger {
        &self.slicing
    }

    pub fn bounds(&self) -> &BoundLedger {
        &self.bounds
    }

    pub fn ulam(&self) -> &UlamOperator {
        &self.ulam
    }

    fn check_rep(&self, rep: &AtomicRep) -> Result<(), TransferError> {
        let (a, b) = (rep.params(), self.params());
        if rep.arity() != self.arity() || a.s != b.s || a.p != b.p || a.q != b.q {
            return Err(TransferError::Mismatch(format!(
                "arity {} s {} p {} vs arity {} s {} p {}",
                rep.arity(),
                a.s,
                a.p,
                self.arity(),
                b.s,
                b.p
            )));
        }
        Ok(())
    }

    /// Representation of `Φ_r 1_P` for a cell `P ⊆ I_r`.
    fn phi_indicator(&self, r: usize, p: CellId) -> Result<(Vec<(CellId, Complex64)>, Stats), TransferError> {
        let arity = self.arity();
        let params = self.params();
        let branch = &self.system.branches()[r];
        let g = &self.system.potentials()[r];
        let c_rp = self.system.ledger()[r].as_ref().map_or(f64::INFINITY, |l| l.c_rp);
        let (lo, hi) = p.interval(arity);
        let (a, b) = branch.preimage(lo, hi);
        let mut stats = Stats::default();
        let len = b - a;
        if len <= 0.0 {
            return Ok((Vec::new(), stats));
        }
        let ratio = (hi - lo) / len;
        let decomp = decompose_to_depth(arity, &IntervalUnion::interval(a, b), 1.0 - params.s * params.p, self.depth, false)?;
        stats.defect = decomp.residual * g.sup_abs(branch, a, b);
        let bscale = params.beta_scale();
        let mode = if g.is_nonnegative() { Telescope::Min } else { Telescope::Mean };
        let atom_amp = p.measure(arity).powf(params.atom_exponent());
        let mut out = Vec::new();
        for &w in decomp.cells() {
            let (depth, values) = potential_cell_values(g, branch, w, arity, self.level());
            let coeffs = telescope(w, depth, arity, &values, &bscale, mode);
            let bnorm = norm_of_magnitudes(coeffs.iter().map(|(c, e)| (*c, e.norm())), params.p, params.q);
            let wm = w.measure(arity);
            let d_qw = c_rp * ratio.powf(params.eps) * (wm / len).powf(1.0 / params.p - params.s);
            let budget = wm.powf(params.s - params.beta) * self.options.constants.c_gbva;
            let rb = atom_amp * bnorm / (d_qw * budget);
            stats.budget_checked += 1;
            stats.max_budget_ratio = stats.max_budget_ratio.max(rb);
            if rb > 1.0 + 1e-9 {
                stats.budget_violations += 1;
            }
            for (c, e) in coeffs {
                out.push((c, e * c.measure(arity).powf(params.beta - params.s)));
            }
        }
        Ok((out, stats))
    }

    fn branch_cache(&self, r: usize) -> Result<&BranchCache, TransferError> {
        if let Some(c) = self.cache[r].get() {
            return Ok(c);
        }
        let arity = self.arity();
        let b = &self.system.branches()[r];
        let decomp = decompose_to_depth(
            arity,
            &IntervalUnion::interval(b.image.0, b.image.1),
            1.0 - self.params().s * self.params().p,
            self.depth,
            false,
        )?;
        let pieces: Vec<CellId> = decomp.cells().copied().collect();
        let parts: Vec<_> = pieces.par_iter().map(|&p| self.phi_indicator(r, p)).collect::<Result<_, _>>()?;
        let mut acc: BTreeMap<CellId, Complex64> = BTreeMap::new();
        let mut stats = Stats::default();
        for (coeffs, st) in parts {
            stats.merge(&st, 1.0);
            for (c, e) in coeffs {
                *acc.entry(c).or_default() += e;
            }
        }
        let cache = BranchCache { pieces, residual: decomp.residual, unit: acc.into_iter().collect(), stats };
        Ok(self.cache[r].get_or_init(|| cache))
    }

    /// Slicing pieces `(r, P, c_P / d_Q)` of a single atom, with residual measure.
    fn slice_atom(&self, q: CellId) -> Result<(Vec<(usize, CellId, f64)>, Vec<(usize, f64)>), TransferError> {
        let arity = self.arity();
        let e = self.params().atom_exponent();
        let (lo, hi) = q.interval(arity);
        let qm = hi - lo;
        let mut pieces = Vec::new();
        let mut residual = Vec::new();
        for r in self.system.branches_meeting(lo, hi) {
            let b = &self.system.branches()[r];
            let (plo, phi) = (lo.max(b.image.0), hi.min(b.image.1));
            let tol = (1e-14 * (hi - lo)).max(4.0 * f64::EPSILON * hi);
            if phi - plo <= tol {
                continue;
            }
            if plo <= lo + tol && phi >= hi - tol {
                pieces.push((r, q, 1.0));
            } else if plo <= b.image.0 + tol && phi >= b.image.1 - tol {
                let cache = self.branch_cache(r)?;
                pieces.extend(cache.pieces.iter().map(|&p| (r, p, (qm / p.measure(arity)).powf(e))));
                residual.push((r, cache.residual));
            } else {
                let d = decompose_to_depth(arity, &IntervalUnion::interval(plo, phi), 1.0 - self.params().s * self.params().p, self.depth, false)?;
                pieces.extend(d.cells().map(|&p| (r, p, (qm / p.measure(arity)).powf(e))));
                residual.push((r, d.residual));
            }
        }
        Ok((pieces, residual))
    }

    /// `Φ(d a_Q)` following the proof construction.
    fn analytic_atom(&self, q: CellId, d: Complex64) -> Result<(Vec<(CellId, Complex64)>, Stats), TransferError> {
        let arity = self.arity();
        let amp = d * q.measure(arity).powf(self.params().atom_exponent());
        let (lo, hi) = q.interval(arity);
        let mut out = Vec::new();
        let mut stats = Stats::default();
        let c_disj = |r: usize| self.system.ledger()[r].as_ref().map_or(1.0, |l| l.c_disj);
        for r in self.system.branches_meeting(lo, hi) {
            let b = &self.system.branches()[r];
            let (plo, phi) = (lo.max(b.image.0), hi.min(b.image.1));
            let tol = (1e-14 * (hi - lo)).max(4.0 * f64::EPSILON * hi);
            if phi - plo <= tol {
                continue;
            }
            if plo <= lo + tol && phi >= hi - tol {
                let (coeffs, st) = self.phi_indicator(r, q)?;
                stats.merge(&st, amp.norm());
                out.extend(coeffs.into_iter().map(|(c, e)| (c, e * amp)));
            } else if plo <= b.image.0 + tol && phi >= b.image.1 - tol {
                let cache = self.branch_cache(r)?;
                stats.merge(&cache.stats, amp.norm());
                stats.defect += amp.norm() * cache.residual * c_disj(r);
                out.extend(cache.unit.iter().map(|&(c, e)| (c, e * amp)));
            } else {
                let dec = decompose_to_depth(arity, &IntervalUnion::interval(plo, phi), 1.0 - self.params().s * self.params().p, self.depth, false)?;
                stats.defect += amp.norm() * dec.residual * c_disj(r);
                for &p in dec.cells() {
                    let (coeffs, st) = self.phi_indicator(r, p)?;
                    stats.merge(&st, amp.norm());
                    out.extend(coeffs.into_iter().map(|(c, e)| (c, e * amp)));
                }
            }
        }
        Ok((out, stats))
    }
}

// ---------------------------------------------------------------------------
// Slicing

#[derive(Clone, Debug)]
pub struct SlicedRep {
    /// Branch id → representation of `f 1_{I_r}` with atoms inside `I_r`.
    pub pieces: BTreeMap<usize, AtomicRep>,
    pub c_rs1: f64,
    pub mode: SlicingMode,
    pub n_overlap: usize,
    pub m_crowd: usize,
    pub t_crowd: f64,
    pub input_norm: f64,
    /// Left side of the weighted inequality.
    pub lhs_weighted: f64,
    /// Left side of the overlap inequality.
    pub lhs_overlap: f64,
    /// Measure of `Q ∩ I_r` left uncovered, weighted by `|d_Q||Q|^{s-1/p}`.
    pub residual: f64,
}

impl SlicedRep {
    pub fn lhs(&self) -> f64 {
        match self.mode {
            SlicingMode::Weighted => self.lhs_weighted,
            SlicingMode::Overlap => self.lhs_overlap,
        }
    }

    pub fn certified(&self) -> bool {
        self.lhs() <= self.c_rs1 * self.input_norm * (1.0 + 1e-12) + 1e-300
    }

    /// `Σ_r evaluate(rep_r)`.
    pub fn evaluate(&self, resolution: u32, arity: u32) -> PiecewiseFn {
        self.pieces
            .values()
            .map(|r| r.evaluate(resolution))
            .fold(PiecewiseFn::zeros(arity, resolution), |a, b| a.zip_with(&b, |x, y| x + y))
    }
}

/// Re-expands `rep` so that every atom lies inside one branch image.
pub fn slice(rep: &AtomicRep, transfer: &Transfer) -> Result<SlicedRep, TransferError> {
    transfer.check_rep(rep)?;
    let params = *transfer.params();
    let arity = transfer.arity();
    let items: Vec<(CellId, Complex64)> = rep.coeffs().iter().map(|(c, d)| (*c, *d)).collect();
    let parts: Vec<_> = items.par_iter().map(|&(q, _)| transfer.slice_atom(q)).collect::<Result<_, _>>()?;
    let mut acc: BTreeMap<usize, BTreeMap<CellId, Complex64>> = BTreeMap::new();
    let mut residual = 0.0;
    for ((q, d), (pieces, res)) in items.iter().zip(parts) {
        for (r, p, w) in pieces {
            *acc.entry(r).or_default().entry(p).or_default() += *d * w;
        }
        let amp = d.norm() * q.measure(arity).powf(params.atom_exponent());
        residual += res.iter().map(|x| x.1).sum::<f64>() * amp;
    }
    let thetas: Vec<f64> = transfer.system.ledger().iter().map(|l| l.as_ref().map_or(f64::INFINITY, |l| l.theta)).collect();
    // level -> branch -> Σ|c|^p
    let mut level_sums: BTreeMap<u32, BTreeMap<usize, f64>> = BTreeMap::new();
    for (&r, coeffs) in &acc {
        for (c, d) in coeffs {
            *level_sums.entry(c.level).or_default().entry(r).or_default() += d.norm().powf(params.p);
        }
    }
    let p = params.p;
    let w_levels: Vec<f64> = level_sums
        .values()
        .map(|m| m.iter().map(|(&r, &s)| thetas[r] * s.powf(1.0 / p)).sum::<f64>().powf(p))
        .collect();
    let o_levels: Vec<f64> =
        level_sums.values().map(|m| m.iter().map(|(&r, &s)| thetas[r].powf(p) * s).sum::<f64>()).collect();
    let pc = params.p_conj();
    let n_pow = if pc.is_infinite() { 1.0 } else { (transfer.slicing.n_overlap as f64).powf(1.0 / pc) };
    let lhs_weighted = crate::besov::layered_norm(w_levels, p, params.q);
    let lhs_overlap = n_pow * crate::besov::layered_norm(o_levels, p, params.q);
    let pieces = acc
        .into_iter()
        .map(|(r, coeffs)| (transfer.system.branches()[r].id, AtomicRep::from_coeffs(params, arity, coeffs)))
        .collect();
    Ok(SlicedRep {
        pieces,
        c_rs1: transfer.slicing.c_rs1(),
        mode: transfer.slicing.mode(),
        n_overlap: transfer.slicing.n_overlap,
        m_crowd: transfer.slicing.m_crowd,
        t_crowd: transfer.slicing.t_crowd,
        input_norm: rep.coefficient_norm()?,
        lhs_weighted,
        lhs_overlap,
        residual,
    })
}

// ---------------------------------------------------------------------------
// Application

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Analytic,
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub input_norm: f64,
    pub output_norm: f64,
    /// `C_GBS · C_D · C_RS1`.
    pub factor: f64,
    pub bound: f64,
    pub holds: bool,
    pub budget_checked: usize,
    pub budget_violations: usize,
    pub max_budget_ratio: f64,
    /// L¹ bound on what the level-`K` truncation and the finite
    /// decomposition depth leave out.
    pub truncation_defect: f64,
    pub positive_input: bool,
    pub positive_output: bool,
}

#[derive(Clone, Debug)]
pub struct TransferOutput {
    pub rep: AtomicRep,
    pub mode: Mode,
    pub certificate: Certificate,
    /// L¹ distance between the modes at the working level, when checked.
    pub cross_check: Option<f64>,
}

/// L¹ bound on `Φ(f - E_K f)` for atoms deeper than `K`.
fn deep_input_defect(transfer: &Transfer, rep: &AtomicRep) -> f64 {
    let k = transfer.level();
    let arity = transfer.arity();
    let e = transfer.params().atom_exponent() + 1.0;
    let c_disj = transfer.system.ledger().iter().flatten().map(|l| l.c_disj).fold(0.0, f64::max);
    2.0 * c_disj * rep.coeffs().iter().filter(|(c, _)| c.level > k).map(|(c, d)| d.norm() * c.measure(arity).powf(e)).sum::<f64>()
}

/// L¹ mass carried by atoms deeper than `K`, doubled.
pub fn deep_mass(rep: &AtomicRep, k: u32) -> f64 {
    let e = rep.params().atom_exponent() + 1.0;
    2.0 * rep.coeffs().iter().filter(|(c, _)| c.level > k).map(|(c, d)| d.norm() * c.measure(rep.arity()).powf(e)).sum::<f64>()
}

/// Proof-following construction of `Φ(rep)` with its statistics.
fn analytic(transfer: &Transfer, rep: &AtomicRep) -> Result<(AtomicRep, Stats), TransferError> {
    let items: Vec<(CellId, Complex64)> = rep.coeffs().iter().map(|(c, d)| (*c, *d)).collect();
    let parts: Vec<_> = items.par_iter().map(|&(q, d)| transfer.analytic_atom(q, d)).collect::<Result<_, _>>()?;
    let mut acc: BTreeMap<CellId, Complex64> = BTreeMap::new();
    let mut stats = Stats::default();
    for (coeffs, st) in parts {
        stats.merge(&st, 1.0);
        for (c, e) in coeffs {
            *acc.entry(c).or_default() += e;
        }
    }
    let mut out = AtomicRep::from_coeffs(*transfer.params(), transfer.arity(), acc);
    out.prune(0.0);
    Ok((out, stats))
}

/// Quadrature oracle: canonical representation of `E_K Φ E_K f`.
pub fn apply_numeric(transfer: &Transfer, rep: &AtomicRep) -> Result<AtomicRep, TransferError> {
    transfer.check_rep(rep)?;
    let f = rep.evaluate(transfer.level());
    Ok(canonical_rep(&transfer.ulam.apply_fn(&f), transfer.params()))
}

pub fn apply_transfer(transfer: &Transfer, rep: &AtomicRep, mode: Mode) -> Result<TransferOutput, TransferError> {
    transfer.check_rep(rep)?;
    let k = transfer.level();
    let input_norm = rep.coefficient_norm()?;
    let input_defect = deep_input_defect(transfer, rep);
    let (out, stats, cross) = match mode {
        Mode::Numeric => (apply_numeric(transfer, rep)?, Stats { defect: input_defect, ..Default::default() }, None),
        Mode::Analytic => {
            let (out, mut stats) = analytic(transfer, rep)?;
            stats.defect += input_defect;
            let cross = if transfer.options.cross_check {
                let num = apply_numeric(transfer, rep)?;
                let l1 = out.evaluate(k).l1_distance(&num.evaluate(k));
                let tol = CROSS_CHECK_TOL + stats.defect;
                if !(l1 <= tol) {
                    return Err(TransferError::ModeMismatch { l1, tol });
                }
                Some(l1)
            } else {
                None
            };
            (out, stats, cross)
        }
    };
    let output_norm = out.coefficient_norm()?;
    let factor = transfer.bounds.certificate_factor;
    let certificate = Certificate {
        input_norm,
        output_norm,
        factor,
        bound: factor * input_norm,
        holds: output_norm <= factor * input_norm * (1.0 + 1e-12),
        budget_checked: stats.budget_checked,
        budget_violations: stats.budget_violations,
        max_budget_ratio: stats.max_budget_ratio,
        truncation_defect: stats.defect + if mode == Mode::Analytic { deep_mass(&out, k) } else { 0.0 },
        positive_input: rep.positive_flag(),
        positive_output: out.positive_flag(),
    };
    Ok(TransferOutput { rep: out, mode, certificate, cross_check: cross })
}

/// Splits `rep` into atoms at levels `< t` and the rest.
pub fn essential_split(rep: &AtomicRep, t: u32) -> (AtomicRep, AtomicRep) {
    rep.split_at(t)
}

// ---------------------------------------------------------------------------
// Matrix

/// `Φ` truncated to the atoms of level at most `K`, in the level-major basis.
///
/// The matrix is `C U V` with `V` the evaluation of coefficients at level
/// `K`, `U` the Ulam operator and `C` the canonical representation. It is
/// applied through this factorization; only the head columns are stored.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    arity: u32,
    level: u32,
    t: u32,
    params: BesovParams,
    ulam: UlamOperator,
    head: Vec<Vec<Complex64>>,
    bounds: BoundLedger,
    column_defects: Vec<f64>,
    name: String,
    mass_preserving: bool,
    nonnegative: bool,
}

/// Builds the truncated matrix at the working level and split level of `transfer`.
pub fn assemble_matrix(transfer: &Transfer) -> Result<TransferMatrix, TransferError> {
    let arity = transfer.arity();
    let k = transfer.level();
    let t = transfer.options.split_level;
    let cells = basis_size(arity, k);
    if cells > transfer.options.max_cells {
        return Err(TransferError::Budget { cells, cap: transfer.options.max_cells });
    }
    let params = *transfer.params();
    let unit = |i: usize| {
        let mut x = vec![Complex64::new(0.0, 0.0); cells as usize];
        x[i] = Complex64::new(1.0, 0.0);
        x
    };
    let n_head = basis_size(arity, t.saturating_sub(1)) as usize * usize::from(t > 0);
    let apply = |x: &[Complex64]| {
        let v = coeffs_to_values(arity, k, &params, x);
        values_to_coeffs(arity, k, &params, &transfer.ulam.apply(&v))
    };
    let head: Vec<Vec<Complex64>> = (0..n_head).into_par_iter().map(|i| apply(&unit(i))).collect();
    let column_defects: Vec<f64> = (0..cells as usize)
        .into_par_iter()
        .map(|i| {
            let cell = basis_cell(arity, i);
            let (out, stats) = analytic(transfer, &AtomicRep::atom(params, arity, cell, Complex64::new(1.0, 0.0)))?;
            Ok(stats.defect + deep_mass(&out, k))
        })
        .collect::<Result<_, TransferError>>()?;
    let masses = transfer.ulam.column_masses();
    let mass_preserving = masses.iter().all(|m| (m - 1.0).norm() < 1e-12);
    Ok(TransferMatrix {
        arity,
        level: k,
        t,
        params,
        ulam: transfer.ulam.clone(),
        head,
        bounds: transfer.bounds.clone(),
        column_defects,
        name: transfer.system.name(),
        mass_preserving,
        nonnegative: transfer.system.all_potentials_nonnegative(),
    })
}

impl TransferMatrix {
    pub fn arity(&self) -> u32 {
        self.arity
    }

    /// Truncation level `K`.
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn split_level(&self) -> u32 {
        self.t
    }

    pub fn params(&self) -> &BesovParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        basis_size(self.arity, self.level) as usize
    }

    pub fn head_columns(&self) -> &[Vec<Complex64>] {
        &self.head
    }

    pub fn bounds(&self) -> &BoundLedger {
        &self.bounds
    }

    pub fn ulam(&self) -> &UlamOperator {
        &self.ulam
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Every column integrates like its atom.
    pub fn mass_preserving(&self) -> bool {
        self.mass_preserving
    }

    pub fn nonnegative(&self) -> bool {
        self.nonnegative
    }

    pub fn column_defects(&self) -> &[f64] {
        &self.column_defects
    }

    /// Largest column truncation defect.
    pub fn truncation_defect(&self) -> f64 {
        self.column_defects.iter().copied().fold(0.0, f64::max)
    }

    pub fn values_of(&self, x: &[Complex64]) -> Vec<Complex64> {
        coeffs_to_values(self.arity, self.level, &self.params, x)
    }

    pub fn coeffs_of(&self, v: &[Complex64]) -> Vec<Complex64> {
        values_to_coeffs(self.arity, self.level, &self.params, v)
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.coeffs_of(&self.ulam.apply(&self.values_of(x)))
    }

    /// Applies the columns of levels `≥ t` only.
    pub fn apply_tail(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = x.to_vec();
        for v in y.iter_mut().take(self.head.len()) {
            *v = Complex64::new(0.0, 0.0);
        }
        self.apply(&y)
    }

    pub fn column(&self, i: usize) -> Vec<Complex64> {
        if let Some(c) = self.head.get(i) {
            return c.clone();
        }
        let mut x = vec![Complex64::new(0.0, 0.0); self.dim()];
        x[i] = Complex64::new(1.0, 0.0);
        self.apply(&x)
    }

    pub fn apply_rep(&self, rep: &AtomicRep) -> AtomicRep {
        vector_to_rep(&self.params, self.arity, &self.apply(&rep_to_vector(rep, self.level)))
    }

    /// Nonzero entries as `row,col,re,im` lines.
    pub fn to_triplets(&self) -> String {
        let cols: Vec<Vec<Complex64>> = (0..self.dim()).into_par_iter().map(|j| self.column(j)).collect();
        let mut out = String::from("row,col,re,im\n");
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                if v.norm() > 1e-15 {
                    out.push_str(&format!("{i},{j},{:e},{:e}\n", v.re, v.im));
                }
            }
        }
        out
    }

    /// Dense real parts, one row per line.
    pub fn to_dense_csv(&self) -> String {
        let n = self.dim();
        let cols: Vec<Vec<Complex64>> = (0..n).into_par_iter().map(|j| self.column(j)).collect();
        let mut out = String::new();
        for i in 0..n {
            let row: Vec<String> = cols.iter().map(|c| format!("{:e}", c[i].re)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Largest observed `|M_tail x| / |x|` over random tail vectors.
    pub fn sampled_tail_norm(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        let mut best: f64 = 0.0;
        for _ in 0..samples {
            let mut x = vec![Complex64::new(0.0, 0.0); n];
            let nnz = rng.random_range(1..=8usize);
            for _ in 0..nnz {
                let i = rng.random_range(self.head.len().min(n - 1)..n);
                x[i] = Complex64::new(rng.random_range(-1.0..1.0), 0.0);
            }
            let nx = vector_norm(self.arity, &self.params, &x);
            if nx == 0.0 {
                continue;
            }
            let y = self.apply_tail(&x);
            best = best.max(vector_norm(self.arity, &self.params, &y) / nx);
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_map, MapSpec, SystemOptions};

    #[test]
    fn basis_indexing_roundtrip() {
        for arity in [2, 3] {
            for i in 0..200 {
                let c = basis_cell(arity, i);
                assert_eq!(basis_index(arity, &c), i);
                assert_eq!(basis_cell_fast(arity, i), c);
            }
        }
    }

    #[test]
    fn coefficient_value_maps_invert() {
        let p = BesovParams::default();
        let v: Vec<Complex64> = (0..16).map(|i| Complex64::new((i * i % 7) as f64, 0.0)).collect();
        let x = values_to_coeffs(2, 4, &p, &v);
        let back = coeffs_to_values(2, 4, &p, &x);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn doubling_ulam_preserves_constants() {
        let sys = make_map(&MapSpec::doubling(), &BesovParams::default(), &SystemOptions::with_level(6)).unwrap();
        let u = UlamOperator::build(&sys, 6);
        let one = vec![Complex64::new(1.0, 0.0); 64];
        for v in u.apply(&one) {
            assert!((v - 1.0).norm() < 1e-14);
        }
        assert_eq!(u.nnz(), 128);
    }
}
