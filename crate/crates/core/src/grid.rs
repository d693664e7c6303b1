//! Uniform m-adic grids on `[0, 1]` with Lebesgue measure.
//!
//! Level `k` of a grid of arity `m` is the partition of `[0, 1]` into the
//! `m^k` cells `[j m^-k, (j + 1) m^-k)`. Cells are addressed by [`CellId`],
//! printed as `k:j`.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::util::NeumaierSum;

/// Default cap on `arity^max_level` for [`build_grid`].
pub const DEFAULT_CELL_BUDGET: u64 = 1 << 24;

/// Relative tolerance used by the axiom checks.
pub const AXIOM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("arity must be at least 2, got {0}")]
    InvalidArity(u32),
    #[error("max_level must be at least 1")]
    InvalidLevel,
    #[error("level {level} is not addressable at arity {arity}")]
    Unaddressable { arity: u32, level: u32 },
    #[error("grid needs {cells} cells at its finest level, budget is {budget}")]
    Capacity { cells: u64, budget: u64 },
    #[error("cell {0} is not a cell of this grid")]
    NoSuchCell(CellId),
    #[error("no cell up to level {max_level} is contained in the set")]
    NotFound { max_level: u32 },
    #[error("cannot parse cell id {0:?}")]
    Parse(String),
}

/// `arity^k` if it fits in a `u64`.
pub fn checked_pow(arity: u32, k: u32) -> Option<u64> {
    (arity as u64).checked_pow(k)
}

/// Deepest level whose indices are exactly representable as `f64`
/// (`arity^level <= 2^52`).
pub fn float_exact_level(arity: u32) -> u32 {
    let mut k = 0;
    while let Some(n) = checked_pow(arity, k + 1) {
        if n > 1 << 52 {
            break;
        }
        k += 1;
    }
    k
}

/// `arity^-k` as a float.
pub fn cell_measure(arity: u32, level: u32) -> f64 {
    (arity as f64).powi(-(level as i32))
}

/// A grid cell: the `index`-th cell of level `level`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub level: u32,
    pub index: u64,
}

impl CellId {
    pub const ROOT: CellId = CellId { level: 0, index: 0 };

    pub fn new(level: u32, index: u64) -> Self {
        CellId { level, index }
    }

    /// Builds a cell, checking `index < arity^level`.
    pub fn checked(arity: u32, level: u32, index: u64) -> Result<Self, GridError> {
        let n = checked_pow(arity, level).ok_or(GridError::Unaddressable { arity, level })?;
        if index >= n {
            return Err(GridError::NoSuchCell(CellId { level, index }));
        }
        Ok(CellId { level, index })
    }

    pub fn parent(&self, arity: u32) -> Option<CellId> {
        (self.level > 0).then(|| CellId::new(self.level - 1, self.index / arity as u64))
    }

    /// The ancestor at `level`; `level` must not exceed `self.level`.
    pub fn ancestor(&self, arity: u32, level: u32) -> CellId {
        assert!(level <= self.level, "ancestor level below cell level");
        let shift = checked_pow(arity, self.level - level).unwrap_or(u64::MAX);
        CellId::new(level, self.index / shift)
    }

    pub fn children(&self, arity: u32) -> impl Iterator<Item = CellId> {
        let level = self.level + 1;
        let first = self.index * arity as u64;
        (first..first + arity as u64).map(move |j| CellId::new(level, j))
    }

    /// Indices of the descendants of this cell at `level >= self.level`.
    pub fn descendant_range(&self, arity: u32, level: u32) -> Range<u64> {
        assert!(level >= self.level, "descendant level above cell level");
        let n = checked_pow(arity, level - self.level).expect("descendant level overflow");
        self.index * n..(self.index + 1) * n
    }

    /// True when `other` is this cell or one of its descendants.
    pub fn contains(&self, arity: u32, other: &CellId) -> bool {
        other.level >= self.level && other.ancestor(arity, self.level) == *self
    }

    pub fn measure(&self, arity: u32) -> f64 {
        cell_measure(arity, self.level)
    }

    /// The half-open interval `[lo, hi)` covered by the cell, with
    /// correctly rounded endpoints up to the float-exact level.
    pub fn interval(&self, arity: u32) -> (f64, f64) {
        match checked_pow(arity, self.level).filter(|n| *n <= 1 << 53) {
            Some(n) => {
                let n = n as f64;
                (self.index as f64 / n, (self.index + 1) as f64 / n)
            }
            None => {
                let h = self.measure(arity);
                (self.index as f64 * h, (self.index + 1) as f64 * h)
            }
        }
    }

    pub fn midpoint(&self, arity: u32) -> f64 {
        let (lo, hi) = self.interval(arity);
        0.5 * (lo + hi)
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.index)
    }
}

impl FromStr for CellId {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || GridError::Parse(s.to_string());
        let (k, j) = s.split_once(':').ok_or_else(err)?;
        Ok(CellId::new(
            k.trim().parse().map_err(|_| err())?,
            j.trim().parse().map_err(|_| err())?,
        ))
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Serializable grid description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub arity: u32,
    pub max_level: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { arity: 2, max_level: 10 }
    }
}

/// A uniform m-adic grid, optionally with cells removed.
///
/// Removing cells breaks the partition axioms and is only meant for
/// exercising [`validate_grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    arity: u32,
    max_level: u32,
    deleted: BTreeSet<CellId>,
}

/// Builds a uniform grid with the default cell budget.
pub fn build_grid(arity: u32, max_level: u32) -> Result<Grid, GridError> {
    build_grid_with_budget(arity, max_level, DEFAULT_CELL_BUDGET)
}

pub fn build_grid_with_budget(arity: u32, max_level: u32, budget: u64) -> Result<Grid, GridError> {
    if arity < 2 {
        return Err(GridError::InvalidArity(arity));
    }
    if max_level < 1 {
        return Err(GridError::InvalidLevel);
    }
    let cells = checked_pow(arity, max_level).ok_or(GridError::Unaddressable { arity, level: max_level })?;
    if cells > budget {
        return Err(GridError::Capacity { cells, budget });
    }
    Ok(Grid { arity, max_level, deleted: BTreeSet::new() })
}

impl Grid {
    pub fn from_spec(spec: GridSpec) -> Result<Grid, GridError> {
        build_grid(spec.arity, spec.max_level)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec { arity: self.arity, max_level: self.max_level }
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    /// `(c_G1, c_G2)`: bounds on child/parent measure ratios.
    pub fn constants(&self) -> (f64, f64) {
        let r = 1.0 / self.arity as f64;
        (r, r)
    }

    /// Bound on the number of same-level cells through a point.
    pub fn overlap_bound(&self) -> usize {
        1
    }

    pub fn measure(&self, cell: &CellId) -> f64 {
        cell.measure(self.arity)
    }

    /// Number of index slots at `level`.
    pub fn level_size(&self, level: u32) -> u64 {
        checked_pow(self.arity, level).expect("level within grid")
    }

    /// Number of cells at levels `0..=level`.
    pub fn cells_through(&self, level: u32) -> u64 {
        (0..=level).map(|k| self.level_size(k)).sum()
    }

    pub fn has_cell(&self, cell: &CellId) -> bool {
        cell.level <= self.max_level
            && cell.index < self.level_size(cell.level)
            && !self.deleted.contains(cell)
    }

    pub fn cells_at(&self, level: u32) -> impl Iterator<Item = CellId> + '_ {
        (0..self.level_size(level))
            .map(move |j| CellId::new(level, j))
            .filter(move |c| self.deleted.is_empty() || !self.deleted.contains(c))
    }

    /// A copy of this grid with `cell` removed from its level.
    pub fn without_cell(&self, cell: CellId) -> Result<Grid, GridError> {
        if !self.has_cell(&cell) {
            return Err(GridError::NoSuchCell(cell));
        }
        let mut g = self.clone();
        g.deleted.insert(cell);
        Ok(g)
    }

    /// Deepest level at which index arithmetic stays exact in `f64`.
    pub fn float_exact_level(&self) -> u32 {
        float_exact_level(self.arity)
    }
}

/// Result of checking the good-grid axioms on a finite grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AxiomReport {
    pub arity: u32,
    pub max_level: u32,
    /// Largest number of same-level cells meeting a common point.
    pub g1_overlap: usize,
    pub g1_pass: bool,
    pub g2_pass: bool,
    /// Total measure of each level.
    pub g3_sums: Vec<f64>,
    pub g3_pass: bool,
    pub g4_pass: bool,
    pub g5_pass: bool,
    pub g6_min: f64,
    pub g6_max: f64,
    pub g6_pass: bool,
    /// Mesh of the finest level; G7 holds up to this resolution.
    pub g7_resolution: f64,
    pub g7_pass: bool,
}

impl AxiomReport {
    pub fn all_pass(&self) -> bool {
        self.g1_pass
            && self.g2_pass
            && self.g3_pass
            && self.g4_pass
            && self.g5_pass
            && self.g6_pass
            && self.g7_pass
    }
}

pub fn validate_grid(grid: &Grid) -> AxiomReport {
    let m = grid.arity;
    let (c_g1, c_g2) = grid.constants();
    let mut g1_overlap = 0;
    let mut g3_sums = Vec::with_capacity(grid.max_level as usize + 1);
    let mut g4_pass = true;
    let mut g5_pass = true;
    let mut g6_min = f64::INFINITY;
    let mut g6_max = f64::NEG_INFINITY;
    let mut finest_mesh: f64 = 0.0;

    let root_ok = grid.has_cell(&CellId::ROOT) && CellId::ROOT.interval(m) == (0.0, 1.0);
    let g2_pass = root_ok && grid.cells_at(0).count() == 1;

    for k in 0..=grid.max_level {
        let mut sum = NeumaierSum::default();
        let mut prev_hi: Option<f64> = None;
        // Active right endpoints for the multiplicity sweep.
        let mut active: Vec<f64> = Vec::new();
        let mut mesh: f64 = 0.0;
        for cell in grid.cells_at(k) {
            let (lo, hi) = cell.interval(m);
            let size = hi - lo;
            sum.add(grid.measure(&cell));
            mesh = mesh.max(size);
            let tol = 1e-14 * size;
            if let Some(p) = prev_hi {
                if p > lo + tol {
                    g4_pass = false;
                }
            }
            prev_hi = Some(hi);
            active.retain(|&end| end > lo + tol);
            active.push(hi);
            g1_overlap = g1_overlap.max(active.len());

            if let Some(parent) = cell.parent(m) {
                let (plo, phi) = parent.interval(m);
                let ptol = 1e-14 * (phi - plo);
                if !grid.has_cell(&parent) || lo < plo - ptol || hi > phi + ptol {
                    g5_pass = false;
                }
                let ratio = grid.measure(&cell) / grid.measure(&parent);
                g6_min = g6_min.min(ratio);
                g6_max = g6_max.max(ratio);
            }
        }
        g3_sums.push(sum.total());
        finest_mesh = mesh;
    }

    let g3_pass = g3_sums.iter().all(|s| (s - 1.0).abs() <= AXIOM_TOL);
    let g6_pass = g6_min >= c_g1 * (1.0 - AXIOM_TOL) && g6_max <= c_g2 * (1.0 + AXIOM_TOL);
    let expected_mesh = cell_measure(m, grid.max_level);
    AxiomReport {
        arity: m,
        max_level: grid.max_level,
        g1_overlap,
        g1_pass: g1_overlap <= grid.overlap_bound(),
        g2_pass,
        g3_sums,
        g3_pass,
        g4_pass,
        g5_pass,
        g6_min,
        g6_max,
        g6_pass,
        g7_resolution: finest_mesh,
        g7_pass: g3_pass && (finest_mesh - expected_mesh).abs() <= AXIOM_TOL * expected_mesh,
    }
}

/// A finite union of half-open intervals inside `[0, 1]`, kept sorted and
/// merged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalUnion {
    pieces: Vec<(f64, f64)>,
}

impl IntervalUnion {
    pub fn new(pieces: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut v: Vec<(f64, f64)> = pieces
            .into_iter()
            .map(|(a, b)| (a.max(0.0), b.min(1.0)))
            .filter(|(a, b)| b > a)
            .collect();
        v.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(v.len());
        for (a, b) in v {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        IntervalUnion { pieces: merged }
    }

    pub fn interval(a: f64, b: f64) -> Self {
        Self::new([(a, b)])
    }

    pub fn unit() -> Self {
        Self::interval(0.0, 1.0)
    }

    pub fn from_cell(cell: &CellId, arity: u32) -> Self {
        let (a, b) = cell.interval(arity);
        Self::interval(a, b)
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.pieces.iter().map(|(a, b)| b - a).sum()
    }

    pub fn intersect_interval(&self, lo: f64, hi: f64) -> Self {
        Self::new(self.pieces.iter().map(|&(a, b)| (a.max(lo), b.min(hi))))
    }

    pub fn intersect(&self, other: &IntervalUnion) -> Self {
        let mut out = Vec::new();
        for &(a, b) in &self.pieces {
            for &(c, d) in &other.pieces {
                out.push((a.max(c), b.min(d)));
            }
        }
        Self::new(out)
    }

    pub fn union(&self, other: &IntervalUnion) -> Self {
        Self::new(self.pieces.iter().chain(other.pieces.iter()).copied())
    }

    /// Containment of `[lo, hi)` up to `tol` at each endpoint.
    pub fn contains_interval(&self, lo: f64, hi: f64, tol: f64) -> bool {
        self.pieces.iter().any(|&(a, b)| lo >= a - tol && hi <= b + tol)
    }

    pub fn contains_cell(&self, cell: &CellId, arity: u32) -> bool {
        let (lo, hi) = cell.interval(arity);
        self.contains_interval(lo, hi, 1e-14 * (hi - lo))
    }

    /// Measure of the intersection with `[lo, hi)`.
    pub fn overlap(&self, lo: f64, hi: f64) -> f64 {
        self.pieces.iter().map(|&(a, b)| (b.min(hi) - a.max(lo)).max(0.0)).sum()
    }
}

/// `ceil(x)` and `floor(x)` that snap values within float noise of an
/// integer onto it.
pub(crate) fn snap_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-14 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

pub(crate) fn snap_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-14 * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

/// Index range of the level-`level` cells contained in `[a, b)`.
pub(crate) fn inside_range(arity: u32, level: u32, a: f64, b: f64) -> Range<u64> {
    let n = (arity as f64).powi(level as i32);
    let lo = snap_ceil(a * n).max(0.0);
    let hi = snap_floor(b * n).min(n);
    if hi > lo {
        lo as u64..hi as u64
    } else {
        0..0
    }
}

/// Index range of the level-`level` cells meeting `[a, b)` in positive
/// measure.
pub(crate) fn meeting_range(arity: u32, level: u32, a: f64, b: f64) -> Range<u64> {
    let n = (arity as f64).powi(level as i32);
    let lo = snap_floor(a * n).max(0.0);
    let hi = snap_ceil(b * n).min(n);
    if hi > lo {
        lo as u64..hi as u64
    } else {
        0..0
    }
}

/// Smallest `k <= max_level` such that a level-`k` cell lies inside `set`.
pub fn k0(grid: &Grid, set: &IntervalUnion) -> Result<u32, GridError> {
    k0_to_depth(grid.arity, set, grid.max_level)
}

pub fn k0_to_depth(arity: u32, set: &IntervalUnion, max_level: u32) -> Result<u32, GridError> {
    for k in 0..=max_level {
        if set.pieces().iter().any(|&(a, b)| !inside_range(arity, k, a, b).is_empty()) {
            return Ok(k);
        }
    }
    Err(GridError::NotFound { max_level })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_arithmetic() {
        let c = CellId::new(2, 4);
        assert_eq!(c.parent(3), Some(CellId::new(1, 1)));
        assert_eq!(c.ancestor(3, 0), CellId::ROOT);
        assert_eq!(c.children(2).collect::<Vec<_>>(), vec![CellId::new(3, 8), CellId::new(3, 9)]);
        assert_eq!(c.descendant_range(2, 4), 16..20);
        assert!(CellId::new(1, 1).contains(2, &CellId::new(3, 7)));
        assert!(!CellId::new(1, 0).contains(2, &CellId::new(3, 7)));
        assert_eq!(CellId::ROOT.parent(2), None);
    }

    #[test]
    fn triadic_endpoints_are_correctly_rounded() {
        assert_eq!(CellId::new(5, 81).interval(3).0, 1.0 / 3.0);
        assert_eq!(CellId::new(5, 80).interval(3).1, 1.0 / 3.0);
        assert_eq!(CellId::new(12, 2 * 3u64.pow(11)).interval(3).0, 2.0 / 3.0);
    }

    #[test]
    fn display_round_trip() {
        let c = CellId::new(5, 7);
        assert_eq!(c.to_string(), "5:7");
        assert_eq!("5:7".parse::<CellId>().unwrap(), c);
        assert!("5-7".parse::<CellId>().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, "\"5:7\"");
        assert_eq!(serde_json::from_str::<CellId>(&json).unwrap(), c);
    }

    #[test]
    fn checked_rejects_out_of_range() {
        assert!(CellId::checked(2, 3, 7).is_ok());
        assert!(CellId::checked(2, 3, 8).is_err());
    }

    #[test]
    fn budget_and_arity_errors() {
        assert_eq!(build_grid(1, 3), Err(GridError::InvalidArity(1)));
        assert_eq!(build_grid(2, 0), Err(GridError::InvalidLevel));
        assert!(matches!(build_grid_with_budget(2, 11, 1024), Err(GridError::Capacity { .. })));
        assert!(build_grid_with_budget(2, 10, 1024).is_ok());
    }

    #[test]
    fn interval_union_normalizes() {
        let u = IntervalUnion::new([(0.5, 0.75), (0.0, 0.25), (0.25, 0.5), (0.9, 0.8)]);
        assert_eq!(u.pieces(), &[(0.0, 0.75)]);
        assert_eq!(u.measure(), 0.75);
        let v = u.intersect_interval(0.5, 1.0);
        assert_eq!(v.pieces(), &[(0.5, 0.75)]);
    }

    #[test]
    fn snapping_absorbs_noise() {
        assert_eq!(snap_ceil(3.0000000000000004), 3.0);
        assert_eq!(snap_floor(2.9999999999999996), 3.0);
        assert_eq!(snap_ceil(2.5), 3.0);
        assert_eq!(inside_range(2, 2, 0.25, 0.75), 1..3);
        assert_eq!(meeting_range(2, 2, 0.3, 0.6), 1..3);
    }
}
