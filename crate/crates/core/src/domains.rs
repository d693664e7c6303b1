//! Regular and strongly regular domains.
//!
//! A set is decomposed greedily into maximal grid cells: at each level the
//! cells inside the set but not inside an already selected cell form the
//! family `F^k`. For an interval this family is at most two boundary
//! fringes of `m - 1` cells.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::grid::{cell_measure, inside_range, k0_to_depth, meeting_range, CellId, Grid, GridError, IntervalUnion};
use crate::util::{neumaier, NeumaierSum};

/// Residual measure tolerated by a strict decomposition, relative to `|Ω|`.
pub const RESOLUTION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("set has zero measure")]
    EmptySet,
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("residual measure {residual:e} exceeds tolerance for |set| = {measure:e} at level {max_level}")]
    Resolution { residual: f64, measure: f64, max_level: u32 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// A greedy maximal-cell decomposition of a set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularDecomp {
    pub arity: u32,
    pub target: IntervalUnion,
    pub alpha: f64,
    pub k0: u32,
    pub max_level: u32,
    pub families: BTreeMap<u32, Vec<CellId>>,
    /// Smallest `c` with `Σ_{F^k} |Q|^α ≤ c λ^{k-k0} |Ω|^α` at every level.
    pub c_dom: f64,
    /// Fixed fringe ratio `m^-α`.
    pub lambda_dom: f64,
    /// `|Ω|` minus the measure of the selected cells.
    pub residual: f64,
}

impl RegularDecomp {
    pub fn cells(&self) -> impl Iterator<Item = &CellId> {
        self.families.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.families.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Σ_{Q ∈ F^k} |Q|^α` for every populated level.
    pub fn level_sums(&self) -> BTreeMap<u32, f64> {
        self.families
            .iter()
            .map(|(&k, cells)| (k, cells.len() as f64 * cell_measure(self.arity, k).powf(self.alpha)))
            .collect()
    }

    pub fn covered_measure(&self) -> f64 {
        neumaier(self.families.iter().map(|(&k, c)| c.len() as f64 * cell_measure(self.arity, k)))
    }

    /// `Σ_k Σ_{Q ∈ F^k} |Q|^α`.
    pub fn alpha_mass(&self) -> f64 {
        neumaier(self.level_sums().into_values())
    }
}

/// Decomposes `set` down to the grid's finest level.
pub fn decompose(grid: &Grid, set: &IntervalUnion, alpha: f64) -> Result<RegularDecomp, DomainError> {
    decompose_to_depth(grid.arity(), set, alpha, grid.max_level(), true)
}

/// Decomposes `set` down to `depth`. With `strict` a residual above
/// [`RESOLUTION_TOL`]`·|Ω|` is an error.
pub fn decompose_to_depth(
    arity: u32,
    set: &IntervalUnion,
    alpha: f64,
    depth: u32,
    strict: bool,
) -> Result<RegularDecomp, DomainError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DomainError::BadAlpha(alpha));
    }
    let measure = set.measure();
    if measure <= 0.0 {
        return Err(DomainError::EmptySet);
    }
    let k0 = k0_to_depth(arity, set, depth)?;
    let m = arity as u64;
    let mut families: BTreeMap<u32, Vec<CellId>> = BTreeMap::new();
    for &(a, b) in set.pieces() {
        let mut prev: Option<(u64, u64)> = None;
        for k in k0..=depth {
            let r = inside_range(arity, k, a, b);
            if r.is_empty() {
                continue;
            }
            let fam = families.entry(k).or_default();
            match prev {
                None => fam.extend(r.clone().map(|j| CellId::new(k, j))),
                Some((plo, phi)) => {
                    let inner_lo = (plo * m).max(r.start);
                    let inner_hi = (phi * m).min(r.end).max(inner_lo);
                    fam.extend((r.start..inner_lo).map(|j| CellId::new(k, j)));
                    fam.extend((inner_hi..r.end).map(|j| CellId::new(k, j)));
                }
            }
            prev = Some((r.start, r.end));
        }
    }
    families.retain(|_, v| !v.is_empty());
    for cells in families.values_mut() {
        cells.sort();
    }
    let lambda_dom = (arity as f64).powf(-alpha);
    let omega_alpha = measure.powf(alpha);
    let mut decomp = RegularDecomp {
        arity,
        target: set.clone(),
        alpha,
        k0,
        max_level: depth,
        families,
        c_dom: 0.0,
        lambda_dom,
        residual: 0.0,
    };
    decomp.c_dom = decomp
        .level_sums()
        .iter()
        .map(|(&k, &s)| s / (lambda_dom.powi((k - k0) as i32) * omega_alpha))
        .fold(0.0, f64::max);
    decomp.residual = (measure - decomp.covered_measure()).max(0.0);
    if strict && decomp.residual > RESOLUTION_TOL * measure {
        return Err(DomainError::Resolution { residual: decomp.residual, measure, max_level: depth });
    }
    Ok(decomp)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrongRegularityReport {
    pub target: IntervalUnion,
    pub alpha: f64,
    pub t: u32,
    pub max_level: u32,
    /// `max_Q Σ_k Σ_{P ∈ F^k(Q∩Ω)} |P|^α / |Q|^α`.
    pub c_strong: f64,
    /// Cell attaining `c_strong`.
    pub worst_cell: Option<CellId>,
    /// Largest uncovered fraction `|Q∩Ω \ ∪F| / |Q|` over the scanned cells.
    pub truncation_defect: f64,
    pub cells_scanned: usize,
}

/// Measures the uniform regularity of `Q ∩ set` over every cell `Q` at
/// levels `t..=K` meeting `set`.
pub fn strong_regularity(
    grid: &Grid,
    set: &IntervalUnion,
    alpha: f64,
    t: u32,
) -> Result<StrongRegularityReport, DomainError> {
    strong_regularity_to_depth(grid.arity(), set, alpha, t, grid.max_level())
}

pub fn strong_regularity_to_depth(
    arity: u32,
    set: &IntervalUnion,
    alpha: f64,
    t: u32,
    max_level: u32,
) -> Result<StrongRegularityReport, DomainError> {
    strong_regularity_scan(arity, set, alpha, t, max_level, max_level)
}

/// Scans levels `t..=scan_level`, decomposing `Q ∩ set` down to `depth`.
/// Cells inside `set` contribute ratio 1 and are counted without being
/// visited.
pub fn strong_regularity_scan(
    arity: u32,
    set: &IntervalUnion,
    alpha: f64,
    t: u32,
    scan_level: u32,
    depth: u32,
) -> Result<StrongRegularityReport, DomainError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DomainError::BadAlpha(alpha));
    }
    if set.measure() <= 0.0 {
        return Err(DomainError::EmptySet);
    }
    let depth = depth.max(scan_level);
    let mut c_strong: f64 = 0.0;
    let mut worst_cell = None;
    let mut defect: f64 = 0.0;
    let mut scanned = 0;
    for level in t..=scan_level {
        let mut boundary = BTreeSet::new();
        let mut inside = BTreeSet::new();
        for &(a, b) in set.pieces() {
            let meet = meeting_range(arity, level, a, b);
            let ins = inside_range(arity, level, a, b);
            if ins.is_empty() {
                boundary.extend(meet);
            } else {
                boundary.extend(meet.start..ins.start);
                boundary.extend(ins.end..meet.end);
                inside.insert((ins.start, ins.end));
            }
        }
        let n_inside: u64 = inside.iter().map(|(a, b)| b - a).sum();
        scanned += n_inside as usize;
        if n_inside > 0 && c_strong < 1.0 {
            c_strong = 1.0;
            worst_cell = inside.iter().next().map(|&(a, _)| CellId::new(level, a));
        }
        for j in boundary {
            let q = CellId::new(level, j);
            let (lo, hi) = q.interval(arity);
            let part = set.intersect_interval(lo, hi);
            let size = hi - lo;
            if part.measure() <= 1e-14 * size {
                continue;
            }
            scanned += 1;
            let ratio = if part.contains_interval(lo, hi, 1e-14 * size) {
                1.0
            } else if level == depth {
                // Nothing finer is available: the whole intersection is residual.
                defect = defect.max(part.measure() / size);
                0.0
            } else {
                match decompose_to_depth(arity, &part, alpha, depth, false) {
                    Ok(d) => {
                        defect = defect.max(d.residual / size);
                        d.alpha_mass() / size.powf(alpha)
                    }
                    Err(DomainError::Grid(GridError::NotFound { .. })) => {
                        defect = defect.max(part.measure() / size);
                        0.0
                    }
                    Err(e) => return Err(e),
                }
            };
            if ratio > c_strong {
                c_strong = ratio;
                worst_cell = Some(q);
            }
        }
    }
    Ok(StrongRegularityReport {
        target: set.clone(),
        alpha,
        t,
        max_level: depth,
        c_strong,
        worst_cell,
        truncation_defect: defect,
        cells_scanned: scanned,
    })
}

/// Sum of `|Q|^α` over a list of cells.
pub fn alpha_sum(arity: u32, cells: impl IntoIterator<Item = CellId>, alpha: f64) -> f64 {
    let mut s = NeumaierSum::default();
    for c in cells {
        s.add(c.measure(arity).powf(alpha));
    }
    s.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn single_cell_is_its_own_decomposition() {
        let g = build_grid(2, 8).unwrap();
        let q = CellId::new(3, 5);
        let d = decompose(&g, &IntervalUnion::from_cell(&q, 2), 0.3).unwrap();
        assert_eq!(d.k0, 3);
        assert_eq!(d.cells().copied().collect::<Vec<_>>(), vec![q]);
        assert_eq!(d.c_dom, 1.0);
        assert_eq!(d.residual, 0.0);
    }

    #[test]
    fn aligned_interval_is_exact() {
        let g = build_grid(2, 6).unwrap();
        let d = decompose(&g, &IntervalUnion::interval(0.25, 0.75), 0.5).unwrap();
        assert_eq!(d.families.len(), 1);
        assert_eq!(d.families[&2], vec![CellId::new(2, 1), CellId::new(2, 2)]);
    }

    #[test]
    fn resolution_error_when_too_shallow() {
        let g = build_grid(2, 6).unwrap();
        let err = decompose(&g, &IntervalUnion::interval(0.0, 1.0 / 3.0), 0.2).unwrap_err();
        assert!(matches!(err, DomainError::Resolution { .. }));
    }

    #[test]
    fn bad_alpha_is_rejected() {
        let g = build_grid(2, 6).unwrap();
        assert!(decompose(&g, &IntervalUnion::unit(), 0.0).is_err());
        assert!(decompose(&g, &IntervalUnion::unit(), 1.5).is_err());
    }
}
