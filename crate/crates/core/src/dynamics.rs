//! Inverse-branch systems of piecewise expanding maps of `[0, 1]`.
//!
//! A branch `h_r: J_r -> I_r` is an inverse branch of the map `T`, so
//! `I_r` is a piece of monotonicity of `T` and `J_r = T(I_r)`. With weights
//! `g_r` the transfer operator is `Φf(x) = Σ_r g_r(x) f(h_r(x))`.
//!
//! [`make_map`] builds one of the built-in maps and measures the per-branch
//! constant ledger over sampled cells.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::besov::{telescope, BesovParams, ParamError, Telescope};
use crate::domains::{decompose_to_depth, DomainError, RegularDecomp};
use crate::grid::{cell_measure, float_exact_level, inside_range, k0_to_depth, CellId, GridError, IntervalUnion};
use crate::util::gauss_legendre5;

/// Minimal `|T'|` accepted for a piece.
pub const EXPANSION_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("map spec error: {0}")]
    Spec(String),
    #[error("cell {cell} is not contained in the image of branch {branch}")]
    Containment { branch: usize, cell: CellId },
    #[error("branch {branch}: no scaling constant below 1 fits (|Q|/|h⁻¹Q| reaches {ratio})")]
    ScalingInfeasible { branch: usize, ratio: f64 },
    #[error("branch {branch}: potential regularity grows across levels ({first:e} -> {last:e})")]
    Divergence { branch: usize, first: f64, last: f64 },
    #[error("branch {branch}: ledger incomplete")]
    LedgerIncomplete { branch: usize },
    #[error("no sample cells for branch {branch}")]
    NoSamples { branch: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Closed form of an inverse branch `h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BranchMap {
    /// `h(y) = a y + b`.
    Affine { a: f64, b: f64 },
    /// `h(y) = 1 / (y + r)`.
    GaussInv { r: f64 },
    /// `h(y) = (1 - (1 - y)^{1/κ}) / 2`.
    LorenzLeft { kappa: f64 },
    /// `h(y) = (1 + y^{1/κ}) / 2`.
    LorenzRight { kappa: f64 },
}

impl BranchMap {
    pub fn h(&self, y: f64) -> f64 {
        match *self {
            BranchMap::Affine { a, b } => a * y + b,
            BranchMap::GaussInv { r } => 1.0 / (y + r),
            BranchMap::LorenzLeft { kappa } => 0.5 * (1.0 - (1.0 - y).max(0.0).powf(1.0 / kappa)),
            BranchMap::LorenzRight { kappa } => 0.5 * (1.0 + y.max(0.0).powf(1.0 / kappa)),
        }
    }

    /// `h⁻¹(x) = T(x)`.
    pub fn h_inv(&self, x: f64) -> f64 {
        match *self {
            BranchMap::Affine { a, b } => (x - b) / a,
            BranchMap::GaussInv { r } => 1.0 / x - r,
            BranchMap::LorenzLeft { kappa } => 1.0 - (1.0 - 2.0 * x).max(0.0).powf(kappa),
            BranchMap::LorenzRight { kappa } => (2.0 * x - 1.0).max(0.0).powf(kappa),
        }
    }

    /// `|h'(y)|`.
    pub fn dh(&self, y: f64) -> f64 {
        match *self {
            BranchMap::Affine { a, .. } => a.abs(),
            BranchMap::GaussInv { r } => 1.0 / ((y + r) * (y + r)),
            BranchMap::LorenzLeft { kappa } => (1.0 - y).max(0.0).powf(1.0 / kappa - 1.0) / (2.0 * kappa),
            BranchMap::LorenzRight { kappa } => y.max(0.0).powf(1.0 / kappa - 1.0) / (2.0 * kappa),
        }
    }

    pub fn increasing(&self) -> bool {
        match *self {
            BranchMap::Affine { a, .. } => a > 0.0,
            BranchMap::GaussInv { .. } => false,
            BranchMap::LorenzLeft { .. } | BranchMap::LorenzRight { .. } => true,
        }
    }

    /// Point of `J` where `|h'|` degenerates, if any.
    pub fn singular_point(&self) -> Option<f64> {
        match *self {
            BranchMap::LorenzLeft { .. } => Some(1.0),
            BranchMap::LorenzRight { .. } => Some(0.0),
            _ => None,
        }
    }
}

/// An inverse branch `h_r: J_r -> I_r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Branch {
    /// 1-based branch index.
    pub id: usize,
    pub map: BranchMap,
    /// `J_r`, where `Φ_r f` lives.
    pub domain: (f64, f64),
    /// `I_r = h_r(J_r)`.
    pub image: (f64, f64),
}

impl Branch {
    pub fn h(&self, y: f64) -> f64 {
        self.map.h(y)
    }

    pub fn h_inv(&self, x: f64) -> f64 {
        self.map.h_inv(x)
    }

    /// `h⁻¹([lo, hi])` for a subinterval of `I_r`, clamped to `J_r`.
    pub fn preimage(&self, lo: f64, hi: f64) -> (f64, f64) {
        let (a, b) = (self.h_inv(lo), self.h_inv(hi));
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        (a.max(self.domain.0), b.min(self.domain.1))
    }

    /// `h([lo, hi])` for a subinterval of `J_r`.
    pub fn image_of(&self, lo: f64, hi: f64) -> (f64, f64) {
        let (a, b) = (self.h(lo), self.h(hi));
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn image_contains(&self, cell: &CellId, arity: u32) -> bool {
        let (lo, hi) = cell.interval(arity);
        let tol = 1e-14 * (hi - lo);
        lo >= self.image.0 - tol && hi <= self.image.1 + tol
    }

    pub fn image_meets(&self, lo: f64, hi: f64) -> bool {
        hi.min(self.image.1) > lo.max(self.image.0)
    }
}

/// A user-supplied potential on a branch.
pub type PotentialFn = Arc<dyn Fn(f64) -> Complex64 + Send + Sync>;

/// The weight `g_r` of a branch.
#[derive(Clone)]
pub enum Potential {
    /// `g_r = |h_r'|`; Φ is then the Perron–Frobenius operator of Lebesgue measure.
    Jacobian,
    Constant(Complex64),
    Custom { f: PotentialFn, nonnegative: bool },
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Jacobian => write!(f, "Jacobian"),
            Potential::Constant(c) => write!(f, "Constant({c})"),
            Potential::Custom { nonnegative, .. } => write!(f, "Custom {{ nonnegative: {nonnegative} }}"),
        }
    }
}

impl Potential {
    pub fn value(&self, branch: &Branch, y: f64) -> Complex64 {
        match self {
            Potential::Jacobian => Complex64::from(branch.map.dh(y)),
            Potential::Constant(c) => *c,
            Potential::Custom { f, .. } => f(y),
        }
    }

    /// `∫_a^b g_r`, exact for jacobian and constant potentials.
    pub fn integral(&self, branch: &Branch, a: f64, b: f64) -> Complex64 {
        if b <= a {
            return Complex64::new(0.0, 0.0);
        }
        match self {
            Potential::Jacobian => Complex64::from((branch.h(b) - branch.h(a)).abs()),
            Potential::Constant(c) => *c * (b - a),
            Potential::Custom { f, .. } => {
                let n = 4;
                let h = (b - a) / n as f64;
                (0..n)
                    .map(|i| {
                        let lo = a + i as f64 * h;
                        gauss_legendre5(lo, lo + h, |y| f(y))
                    })
                    .sum()
            }
        }
    }

    /// `sup |g_r|` over `[a, b]`; exact for monotone `|g_r|`.
    pub fn sup_abs(&self, branch: &Branch, a: f64, b: f64) -> f64 {
        let n = match self {
            Potential::Custom { .. } => 16,
            _ => 1,
        };
        (0..=n)
            .map(|i| self.value(branch, a + (b - a) * i as f64 / n as f64).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        match self {
            Potential::Jacobian => true,
            Potential::Constant(c) => c.im == 0.0 && c.re >= 0.0,
            Potential::Custom { nonnegative, .. } => *nonnegative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Doubling,
    MAry,
    Beta,
    PwLinear,
    LorenzCusp,
    Gauss,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialSpec {
    #[default]
    Jacobian,
    Constant(f64),
}

/// Serializable description of a built-in map.
///
/// Fields not used by `map` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub map: MapKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakpoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slopes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<u32>,
    #[serde(default)]
    pub potential: PotentialSpec,
}

impl MapSpec {
    fn bare(map: MapKind) -> Self {
        MapSpec {
            map,
            m: None,
            beta: None,
            breakpoints: None,
            slopes: None,
            offsets: None,
            exponent: None,
            r_max: None,
            potential: PotentialSpec::Jacobian,
        }
    }

    pub fn doubling() -> Self {
        Self::bare(MapKind::Doubling)
    }

    pub fn m_ary(m: u32) -> Self {
        MapSpec { m: Some(m), ..Self::bare(MapKind::MAry) }
    }

    pub fn beta(beta: f64) -> Self {
        MapSpec { beta: Some(beta), ..Self::bare(MapKind::Beta) }
    }

    pub fn golden() -> Self {
        Self::beta((1.0 + 5f64.sqrt()) / 2.0)
    }

    pub fn pw_linear(breakpoints: Vec<f64>, slopes: Vec<f64>, offsets: Option<Vec<f64>>) -> Self {
        MapSpec { breakpoints: Some(breakpoints), slopes: Some(slopes), offsets, ..Self::bare(MapKind::PwLinear) }
    }

    pub fn lorenz_cusp(exponent: f64) -> Self {
        MapSpec { exponent: Some(exponent), ..Self::bare(MapKind::LorenzCusp) }
    }

    pub fn gauss(r_max: u32) -> Self {
        MapSpec { r_max: Some(r_max), ..Self::bare(MapKind::Gauss) }
    }

    pub fn with_potential(mut self, potential: PotentialSpec) -> Self {
        self.potential = potential;
        self
    }

    /// Short human-readable name.
    pub fn name(&self) -> String {
        match self.map {
            MapKind::Doubling => "doubling".into(),
            MapKind::MAry => format!("m_ary({})", self.m.unwrap_or(0)),
            MapKind::Beta => format!("beta({})", self.beta.unwrap_or(f64::NAN)),
            MapKind::PwLinear => "pw_linear".into(),
            MapKind::LorenzCusp => format!("lorenz_cusp({})", self.exponent.unwrap_or(0.75)),
            MapKind::Gauss => format!("gauss({})", self.r_max.unwrap_or(0)),
        }
    }
}

/// Measurement settings for the ledger.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemOptions {
    /// Grid arity.
    pub arity: u32,
    /// Working level `K` of matrices and local potential representations.
    pub working_level: u32,
    /// Cells are sampled up to `max(probe_level, working_level)`.
    pub probe_level: u32,
    /// Minimum number of sampled levels below `k0(I_r)`.
    pub probe_span: u32,
    /// Depth of preimage decompositions; `None` uses the deepest float-exact level.
    pub decomposition_depth: Option<u32>,
    /// Build systems with non-expanding pieces; their ledger stays incomplete.
    pub allow_non_expanding: bool,
}

impl Default for SystemOptions {
    fn default() -> Self {
        SystemOptions {
            arity: 2,
            working_level: 10,
            probe_level: 10,
            probe_span: 4,
            decomposition_depth: None,
            allow_non_expanding: false,
        }
    }
}

impl SystemOptions {
    pub fn with_level(working_level: u32) -> Self {
        SystemOptions { working_level, ..Default::default() }
    }

    pub fn depth(&self) -> u32 {
        self.decomposition_depth.unwrap_or_else(|| float_exact_level(self.arity))
    }

    pub fn probe_top(&self) -> u32 {
        self.probe_level.max(self.working_level)
    }
}

/// Measured constants of one branch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BranchLedger {
    pub r: usize,
    /// Minimal level shift `|k0(Q) - k0(h⁻¹Q)|`.
    pub a_r: u32,
    pub c_dc1: f64,
    pub c_dc2: f64,
    pub c_dgd1: f64,
    pub c_dgd2: f64,
    pub c_rp: f64,
    pub eps_sign: i8,
    /// `max(c_DC2^ε, c_DGD2^{1/p})`.
    pub lambda_rs2: f64,
    pub theta: f64,
    /// Local potential representations have nonnegative coefficients.
    pub positive: bool,
    /// `sup_Q sup(|g|, h⁻¹Q) / (|Q|/|h⁻¹Q|)`.
    pub c_disj: f64,
    /// `sup_Q sup(|g|, h⁻¹Q) / (|Q|/|h⁻¹Q|)^{1/p-s+ε}`.
    pub c11: f64,
    pub probe_levels: (u32, u32),
    pub samples: usize,
    /// Probes whose support touches a singular point of `|h'|`.
    pub singular_probes: usize,
}

/// One measured cell `Q ⊆ I_r`.
#[derive(Clone, Debug)]
struct Probe {
    level: u32,
    shift: u32,
    ratio: f64,
    c_dom: f64,
    rp: f64,
    sup_g: f64,
    singular: usize,
}

/// A family of branches with potentials and their ledger.
#[derive(Clone, Debug)]
pub struct BranchSystem {
    spec: Option<MapSpec>,
    params: BesovParams,
    options: SystemOptions,
    branches: Vec<Branch>,
    potentials: Vec<Potential>,
    ledger: Vec<Option<BranchLedger>>,
    issues: Vec<(usize, DynamicsError)>,
    tail_mass: f64,
    /// Branch indices sorted by the left end of `I_r`.
    by_image: Vec<usize>,
}

fn affine_branch(id: usize, lo: f64, hi: f64, slope: f64, offset: f64) -> Branch {
    let len = hi - lo;
    let (j0, j1) = if slope > 0.0 { (offset, offset + slope * len) } else { (offset + slope * len, offset) };
    Branch {
        id,
        map: BranchMap::Affine { a: 1.0 / slope, b: lo - offset / slope },
        domain: (j0, j1),
        image: (lo, hi),
    }
}

fn build_branches(spec: &MapSpec, allow_non_expanding: bool) -> Result<(Vec<Branch>, f64), DynamicsError> {
    let spec_err = |s: String| Err(DynamicsError::Spec(s));
    let check_slope = |s: f64| -> Result<(), DynamicsError> {
        if !s.is_finite() || s == 0.0 {
            return Err(DynamicsError::Spec(format!("slope {s} is not usable")));
        }
        if !allow_non_expanding && s.abs() < 1.0 + EXPANSION_MARGIN {
            return Err(DynamicsError::Spec(format!("piece with |T'| = {} is not expanding", s.abs())));
        }
        Ok(())
    };
    let uniform = |m: u32| -> Result<Vec<Branch>, DynamicsError> {
        if m < 2 {
            return Err(DynamicsError::Spec(format!("m_ary needs m >= 2, got {m}")));
        }
        let mf = m as f64;
        Ok((0..m).map(|j| affine_branch(j as usize + 1, j as f64 / mf, (j + 1) as f64 / mf, mf, 0.0)).collect())
    };
    match spec.map {
        MapKind::Doubling => Ok((uniform(2)?, 0.0)),
        MapKind::MAry => Ok((uniform(spec.m.unwrap_or(2))?, 0.0)),
        MapKind::Beta => {
            let beta = match spec.beta {
                Some(b) => b,
                None => return spec_err("beta map needs \"beta\"".into()),
            };
            check_slope(beta)?;
            if beta <= 1.0 {
                return spec_err(format!("beta must exceed 1, got {beta}"));
            }
            let full = beta.floor() as usize;
            let mut v: Vec<Branch> =
                (0..full).map(|j| affine_branch(j + 1, j as f64 / beta, (j + 1) as f64 / beta, beta, 0.0)).collect();
            let last = full as f64 / beta;
            if 1.0 - last > 1e-15 {
                v.push(affine_branch(full + 1, last, 1.0, beta, 0.0));
            }
            Ok((v, 0.0))
        }
        MapKind::PwLinear => {
            let (bp, sl) = match (&spec.breakpoints, &spec.slopes) {
                (Some(b), Some(s)) => (b, s),
                _ => return spec_err("pw_linear needs \"breakpoints\" and \"slopes\"".into()),
            };
            if bp.len() != sl.len() + 1 || sl.is_empty() {
                return spec_err("pw_linear needs one more breakpoint than slopes".into());
            }
            if bp[0] != 0.0 || *bp.last().expect("nonempty") != 1.0 || bp.windows(2).any(|w| w[1] <= w[0]) {
                return spec_err("breakpoints must increase from 0 to 1".into());
            }
            let offsets = match &spec.offsets {
                Some(o) if o.len() != sl.len() => return spec_err("offsets must match slopes".into()),
                Some(o) => o.clone(),
                None => sl.iter().map(|&s| if s > 0.0 { 0.0 } else { 1.0 }).collect(),
            };
            let mut v = Vec::with_capacity(sl.len());
            for (i, (&s, &o)) in sl.iter().zip(&offsets).enumerate() {
                check_slope(s)?;
                let b = affine_branch(i + 1, bp[i], bp[i + 1], s, o);
                if b.domain.0 < -1e-12 || b.domain.1 > 1.0 + 1e-12 {
                    return spec_err(format!("piece {} maps outside [0, 1]", i + 1));
                }
                v.push(Branch { domain: (b.domain.0.max(0.0), b.domain.1.min(1.0)), ..b });
            }
            Ok((v, 0.0))
        }
        MapKind::LorenzCusp => {
            let kappa = spec.exponent.unwrap_or(0.75);
            if !(kappa > 0.0 && kappa < 1.0) {
                return spec_err(format!("lorenz_cusp exponent must lie in (0, 1), got {kappa}"));
            }
            check_slope(2.0 * kappa)?;
            Ok((
                vec![
                    Branch { id: 1, map: BranchMap::LorenzLeft { kappa }, domain: (0.0, 1.0), image: (0.0, 0.5) },
                    Branch { id: 2, map: BranchMap::LorenzRight { kappa }, domain: (0.0, 1.0), image: (0.5, 1.0) },
                ],
                0.0,
            ))
        }
        MapKind::Gauss => {
            let r_max = spec.r_max.unwrap_or(50);
            if r_max < 1 {
                return spec_err("gauss needs r_max >= 1".into());
            }
            let v = (1..=r_max as usize)
                .map(|r| Branch {
                    id: r,
                    map: BranchMap::GaussInv { r: r as f64 },
                    domain: (0.0, 1.0),
                    image: (1.0 / (r as f64 + 1.0), 1.0 / r as f64),
                })
                .collect();
            Ok((v, 1.0 / (r_max as f64 + 1.0)))
        }
    }
}

/// Builds a built-in map and measures its ledger.
pub fn make_map(spec: &MapSpec, params: &BesovParams, options: &SystemOptions) -> Result<BranchSystem, DynamicsError> {
    let (branches, tail_mass) = build_branches(spec, options.allow_non_expanding)?;
    let potential = match spec.potential {
        PotentialSpec::Jacobian => Potential::Jacobian,
        PotentialSpec::Constant(c) => Potential::Constant(Complex64::from(c)),
    };
    let potentials = vec![potential; branches.len()];
    let mut sys = BranchSystem::from_parts(branches, potentials, *params, *options, tail_mass)?;
    sys.spec = Some(spec.clone());
    Ok(sys)
}

impl BranchSystem {
    /// Builds a system from explicit branches and potentials.
    pub fn from_parts(
        branches: Vec<Branch>,
        potentials: Vec<Potential>,
        params: BesovParams,
        options: SystemOptions,
        tail_mass: f64,
    ) -> Result<BranchSystem, DynamicsError> {
        params.validate()?;
        if branches.len() != potentials.len() || branches.is_empty() {
            return Err(DynamicsError::Spec("need one potential per branch".into()));
        }
        let mut by_image: Vec<usize> = (0..branches.len()).collect();
        by_image.sort_by(|&a, &b| branches[a].image.0.total_cmp(&branches[b].image.0));
        let results: Vec<Result<BranchLedger, DynamicsError>> = branches
            .par_iter()
            .zip(potentials.par_iter())
            .map(|(b, g)| measure_branch(b, g, &params, &options))
            .collect();
        let mut ledger = Vec::with_capacity(results.len());
        let mut issues = Vec::new();
        for (b, r) in branches.iter().zip(results) {
            match r {
                Ok(l) => ledger.push(Some(l)),
                Err(e) => {
                    ledger.push(None);
                    issues.push((b.id, e));
                }
            }
        }
        Ok(BranchSystem { spec: None, params, options, branches, potentials, ledger, issues, tail_mass, by_image })
    }

    /// The same branches with a potential replaced on every branch.
    pub fn with_potential(&self, potential: Potential) -> Result<BranchSystem, DynamicsError> {
        let mut sys = BranchSystem::from_parts(
            self.branches.clone(),
            vec![potential; self.branches.len()],
            self.params,
            self.options,
            self.tail_mass,
        )?;
        sys.spec = None;
        Ok(sys)
    }

    pub fn spec(&self) -> Option<&MapSpec> {
        self.spec.as_ref()
    }

    pub fn name(&self) -> String {
        self.spec.as_ref().map_or_else(|| "custom".into(), MapSpec::name)
    }

    pub fn params(&self) -> &BesovParams {
        &self.params
    }

    pub fn options(&self) -> &SystemOptions {
        &self.options
    }

    pub fn arity(&self) -> u32 {
        self.options.arity
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn potentials(&self) -> &[Potential] {
        &self.potentials
    }

    pub fn branch(&self, r: usize) -> Option<(&Branch, &Potential)> {
        let i = r.checked_sub(1)?;
        Some((self.branches.get(i)?, &self.potentials[i]))
    }

    pub fn ledger(&self) -> &[Option<BranchLedger>] {
        &self.ledger
    }

    /// Branches whose ledger could not be measured.
    pub fn issues(&self) -> &[(usize, DynamicsError)] {
        &self.issues
    }

    pub fn ledger_complete(&self) -> bool {
        self.issues.is_empty()
    }

    /// Lebesgue measure of the part of `[0, 1]` not covered by any `I_r`.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// `C_RS2 = sup_r max(c_DC2^ε, c_DGD2^{1/p})`.
    pub fn lambda_rs2(&self) -> Result<f64, DynamicsError> {
        let mut best: f64 = 0.0;
        for (b, l) in self.branches.iter().zip(&self.ledger) {
            let l = l.as_ref().ok_or(DynamicsError::LedgerIncomplete { branch: b.id })?;
            best = best.max(l.lambda_rs2);
        }
        Ok(best)
    }

    pub fn all_potentials_nonnegative(&self) -> bool {
        self.potentials.iter().all(Potential::is_nonnegative)
    }

    /// Indices (0-based) of branches whose image meets `[lo, hi)`.
    pub fn branches_meeting(&self, lo: f64, hi: f64) -> Vec<usize> {
        let start = self.by_image.partition_point(|&i| self.branches[i].image.1 <= lo);
        let mut out = Vec::new();
        for &i in &self.by_image[start..] {
            let b = &self.branches[i];
            if b.image.0 >= hi {
                break;
            }
            if b.image_meets(lo, hi) {
                out.push(i);
            }
        }
        out
    }

    /// `T(x)` for `x` in some `I_r`.
    pub fn forward(&self, x: f64) -> Option<f64> {
        let i = self.by_image.partition_point(|&i| self.branches[i].image.0 <= x);
        let b = &self.branches[*self.by_image.get(i.checked_sub(1)?)?];
        (x <= b.image.1).then(|| b.h_inv(x).clamp(0.0, 1.0))
    }

    /// Pieces `I_r` as an interval union.
    pub fn image_union(&self) -> IntervalUnion {
        IntervalUnion::new(self.branches.iter().map(|b| b.image))
    }

    /// True for maps whose branches are affine with integer slope `m` onto
    /// `[0, 1]` and pieces aligned with the grid, i.e. `x -> m x mod 1`.
    pub fn is_full_shift(&self) -> Option<u32> {
        let n = self.branches.len();
        let m = n as f64;
        let ok = self.branches.iter().enumerate().all(|(j, b)| {
            matches!(b.map, BranchMap::Affine { a, .. } if (a - 1.0 / m).abs() < 1e-15)
                && b.domain == (0.0, 1.0)
                && (b.image.0 - j as f64 / m).abs() < 1e-15
        });
        (ok && n >= 2 && self.arity() as usize == n).then_some(n as u32)
    }
}

/// `Θ_r = c_DC1^ε c_RP c_DGD1^{1/p} λ_RS2,r^{a_r(1-γ)}`.
pub fn theta(system: &BranchSystem, r: usize) -> Result<f64, DynamicsError> {
    system
        .ledger
        .get(r.wrapping_sub(1))
        .and_then(Option::as_ref)
        .map(|l| l.theta)
        .ok_or(DynamicsError::LedgerIncomplete { branch: r })
}

pub fn theta_formula(l: &BranchLedger, params: &BesovParams) -> f64 {
    l.c_dc1.powf(params.eps) * l.c_rp * l.c_dgd1.powf(1.0 / params.p) * l.lambda_rs2.powf(l.a_r as f64 * (1.0 - params.gamma))
}

/// Decomposes `h_r⁻¹(Q)` with exponent `alpha`.
pub fn preimage_decomp(
    branch: &Branch,
    q: CellId,
    alpha: f64,
    arity: u32,
    depth: u32,
) -> Result<RegularDecomp, DynamicsError> {
    if !branch.image_contains(&q, arity) {
        return Err(DynamicsError::Containment { branch: branch.id, cell: q });
    }
    let (lo, hi) = q.interval(arity);
    let (a, b) = branch.preimage(lo, hi);
    Ok(decompose_to_depth(arity, &IntervalUnion::interval(a, b), alpha, depth, true)?)
}

/// Cells `Q ⊆ I_r` sampled for the ledger.
pub fn sample_cells(branch: &Branch, arity: u32, levels: std::ops::RangeInclusive<u32>) -> Vec<CellId> {
    let mut out = Vec::new();
    for k in levels {
        out.extend(inside_range(arity, k, branch.image.0, branch.image.1).map(|j| CellId::new(k, j)));
    }
    out
}

fn default_levels(branch: &Branch, options: &SystemOptions) -> Result<std::ops::RangeInclusive<u32>, DynamicsError> {
    let k0 = k0_to_depth(options.arity, &IntervalUnion::interval(branch.image.0, branch.image.1), options.depth())?;
    Ok(k0..=options.probe_top().max(k0 + options.probe_span))
}

/// `(a_r, c_DC1, c_DC2, ε sign)` over the cells `Q ⊆ I_r` at `levels`.
pub fn scaling_constants(
    branch: &Branch,
    arity: u32,
    levels: std::ops::RangeInclusive<u32>,
    depth: u32,
) -> Result<(u32, f64, f64, i8), DynamicsError> {
    let cells = sample_cells(branch, arity, levels);
    if cells.is_empty() {
        return Err(DynamicsError::NoSamples { branch: branch.id });
    }
    let mut samples = Vec::with_capacity(cells.len());
    for q in cells {
        let (lo, hi) = q.interval(arity);
        let (a, b) = branch.preimage(lo, hi);
        let k0p = k0_to_depth(arity, &IntervalUnion::interval(a, b), depth)?;
        samples.push((q.level.abs_diff(k0p), (hi - lo) / (b - a)));
    }
    fit_scaling(branch.id, arity, &samples)
}

fn fit_scaling(branch: usize, arity: u32, samples: &[(u32, f64)]) -> Result<(u32, f64, f64, i8), DynamicsError> {
    let max_ratio = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    if max_ratio > 1.0 + EXPANSION_MARGIN {
        return Err(DynamicsError::ScalingInfeasible { branch, ratio: max_ratio });
    }
    let m = arity as f64;
    let a_r = samples.iter().map(|s| s.0).min().unwrap_or(0);
    let c_dc1 = samples.iter().map(|&(shift, ratio)| ratio * m.powi(shift as i32)).fold(0.0, f64::max);
    Ok((a_r, c_dc1, 1.0 / m, 1))
}

/// Cell averages of `g_r` on the level-`resolution` descendants of `w`
/// (or on `w` itself when it is deeper), with the relative depth.
pub fn potential_cell_values(
    potential: &Potential,
    branch: &Branch,
    w: CellId,
    arity: u32,
    resolution: u32,
) -> (u32, Vec<Complex64>) {
    let depth = resolution.saturating_sub(w.level);
    let level = w.level + depth;
    let h = cell_measure(arity, level);
    let values = w
        .descendant_range(arity, level)
        .map(|j| {
            let (lo, hi) = CellId::new(level, j).interval(arity);
            potential.integral(branch, lo, hi) / h
        })
        .collect();
    (depth, values)
}

/// Representation of `g_r 1_W` at smoothness `scale.s`, resolved to
/// `resolution`. Nonnegative potentials get the min-telescoping
/// representation, whose coefficients are all `>= 0`.
pub fn local_potential_rep(
    potential: &Potential,
    branch: &Branch,
    w: CellId,
    arity: u32,
    resolution: u32,
    scale: &BesovParams,
) -> Vec<(CellId, Complex64)> {
    let (depth, values) = potential_cell_values(potential, branch, w, arity, resolution);
    let mode = if potential.is_nonnegative() { Telescope::Min } else { Telescope::Mean };
    telescope(w, depth, arity, &values, scale, mode)
}

/// `c_RP` over pairs `(Q, W)` with `W` in the decomposition of `h⁻¹Q`.
pub fn potential_regularity(
    potential: &Potential,
    branch: &Branch,
    params: &BesovParams,
    arity: u32,
    pairs: &[(CellId, CellId)],
    resolution: u32,
) -> Result<(f64, bool), DynamicsError> {
    let mut best: f64 = 0.0;
    let mut positive = true;
    for &(q, w) in pairs {
        if !branch.image_contains(&q, arity) {
            return Err(DynamicsError::Containment { branch: branch.id, cell: q });
        }
        let (lo, hi) = q.interval(arity);
        let (a, b) = branch.preimage(lo, hi);
        let (v, pos) = regularity_ratio(potential, branch, params, arity, (hi - lo) / (b - a), w, resolution);
        best = best.max(v);
        positive &= pos;
    }
    Ok((best, positive))
}

fn regularity_ratio(
    potential: &Potential,
    branch: &Branch,
    params: &BesovParams,
    arity: u32,
    ratio: f64,
    w: CellId,
    resolution: u32,
) -> (f64, bool) {
    let bscale = params.beta_scale();
    let coeffs = local_potential_rep(potential, branch, w, arity, resolution, &bscale);
    let positive = coeffs.iter().all(|(_, c)| c.re >= -1e-12 && c.im.abs() <= 1e-12);
    let norm = crate::besov::norm_of_magnitudes(coeffs.iter().map(|(c, d)| (*c, d.norm())), params.p, params.q);
    let denom = ratio.powf(1.0 / params.p - params.s + params.eps) * w.measure(arity).powf(1.0 / params.p - params.beta);
    (norm / denom, positive)
}

fn measure_branch(
    branch: &Branch,
    potential: &Potential,
    params: &BesovParams,
    options: &SystemOptions,
) -> Result<BranchLedger, DynamicsError> {
    let arity = options.arity;
    let depth = options.depth();
    let alpha = 1.0 - params.s * params.p;
    let levels = default_levels(branch, options)?;
    let cells = sample_cells(branch, arity, levels.clone());
    if cells.is_empty() {
        return Err(DynamicsError::NoSamples { branch: branch.id });
    }
    let resolution = options.working_level;
    let probes: Vec<Probe> = cells
        .iter()
        .map(|&q| {
            let (lo, hi) = q.interval(arity);
            let (a, b) = branch.preimage(lo, hi);
            let ratio = (hi - lo) / (b - a);
            let decomp = decompose_to_depth(arity, &IntervalUnion::interval(a, b), alpha, depth, true)?;
            let mut rp: f64 = 0.0;
            let mut singular = 0;
            for &w in decomp.cells() {
                let touches = branch.map.singular_point().is_some_and(|z| {
                    let (wl, wh) = w.interval(arity);
                    (z - wl).abs() < 1e-15 || (z - wh).abs() < 1e-15
                });
                let res = if touches {
                    singular += 1;
                    resolution + 1
                } else {
                    resolution
                };
                rp = rp.max(regularity_ratio(potential, branch, params, arity, ratio, w, res).0);
            }
            Ok(Probe {
                level: q.level,
                shift: q.level.abs_diff(decomp.k0),
                ratio,
                c_dom: decomp.c_dom,
                rp,
                sup_g: potential.sup_abs(branch, a, b),
                singular,
            })
        })
        .collect::<Result<_, DynamicsError>>()?;

    let samples: Vec<(u32, f64)> = probes.iter().map(|p| (p.shift, p.ratio)).collect();
    let (a_r, c_dc1, c_dc2, eps_sign) = fit_scaling(branch.id, arity, &samples)?;
    let c_dgd1 = probes.iter().map(|p| p.c_dom).fold(0.0, f64::max);
    let c_dgd2 = (arity as f64).powf(-alpha);

    let mut per_level: BTreeMap<u32, f64> = BTreeMap::new();
    for p in &probes {
        let e = per_level.entry(p.level).or_insert(0.0);
        *e = e.max(p.rp);
    }
    let seq: Vec<f64> = per_level.values().copied().collect();
    let c_rp = seq.iter().copied().fold(0.0, f64::max);
    if seq.len() >= 4 {
        let head = seq[..seq.len() / 2].iter().copied().fold(0.0, f64::max);
        let last = *seq.last().expect("nonempty");
        if last > 8.0 * head {
            return Err(DynamicsError::Divergence { branch: branch.id, first: head, last });
        }
    }
    let positive = potential.is_nonnegative();
    let lambda_rs2 = c_dc2.powf(params.eps).max(c_dgd2.powf(1.0 / params.p));
    let e = 1.0 / params.p - params.s + params.eps;
    let c_disj = probes.iter().map(|p| p.sup_g / p.ratio).fold(0.0, f64::max);
    let c11 = probes.iter().map(|p| p.sup_g / p.ratio.powf(e)).fold(0.0, f64::max);
    let mut l = BranchLedger {
        r: branch.id,
        a_r,
        c_dc1,
        c_dc2,
        c_dgd1,
        c_dgd2,
        c_rp,
        eps_sign,
        lambda_rs2,
        theta: 0.0,
        positive,
        c_disj,
        c11,
        probe_levels: (*levels.start(), *levels.end()),
        samples: probes.len(),
        singular_probes: probes.iter().map(|p| p.singular).sum(),
    };
    l.theta = theta_formula(&l, params);
    Ok(l)
}

/// Ledger as CSV: `r,a_r,c_DC1,c_DC2,c_DGD1,c_DGD2,c_RP,theta`.
pub fn ledger_csv(system: &BranchSystem) -> String {
    let mut out = String::from("r,a_r,c_DC1,c_DC2,c_DGD1,c_DGD2,c_RP,theta\n");
    for (b, l) in system.branches.iter().zip(&system.ledger) {
        match l {
            Some(l) => out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                l.r, l.a_r, l.c_dc1, l.c_dc2, l.c_dgd1, l.c_dgd2, l.c_rp, l.theta
            )),
            None => out.push_str(&format!("{},,,,,,,\n", b.id)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_maps_invert() {
        let maps = [
            BranchMap::Affine { a: 0.5, b: 0.5 },
            BranchMap::GaussInv { r: 3.0 },
            BranchMap::LorenzLeft { kappa: 0.75 },
            BranchMap::LorenzRight { kappa: 0.75 },
        ];
        for m in maps {
            for i in 1..100 {
                let y = i as f64 / 100.0;
                assert!((m.h_inv(m.h(y)) - y).abs() < 1e-12, "{m:?} at {y}");
            }
        }
    }

    #[test]
    fn pw_linear_default_offsets() {
        let spec = MapSpec::pw_linear(vec![0.0, 1.0 / 3.0, 1.0], vec![3.0, 1.5], None);
        let (b, _) = build_branches(&spec, false).unwrap();
        assert_eq!(b.len(), 2);
        assert!((b[1].domain.1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_specs() {
        let flat = MapSpec::pw_linear(vec![0.0, 0.5, 1.0], vec![2.0, 1.0], Some(vec![0.0, 0.0]));
        assert!(matches!(build_branches(&flat, false), Err(DynamicsError::Spec(_))));
        assert!(build_branches(&MapSpec::beta(0.9), false).is_err());
        assert!(build_branches(&MapSpec::lorenz_cusp(0.4), false).is_err());
        let outside = MapSpec::pw_linear(vec![0.0, 1.0], vec![2.0], Some(vec![0.5]));
        assert!(build_branches(&outside, false).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"{"map": "beta", "beta": 1.618033988749895, "potential": "jacobian", "r_max": 50}"#;
        let spec: MapSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.map, MapKind::Beta);
        let c: MapSpec = serde_json::from_str(r#"{"map": "doubling", "potential": {"constant": 0.5}}"#).unwrap();
        assert_eq!(c.potential, PotentialSpec::Constant(0.5));
    }
}
