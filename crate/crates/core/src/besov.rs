//! Atomic representations by Souza atoms `a_Q = |Q|^{s-1/p} 1_Q`.
//!
//! An [`AtomicRep`] stores coefficients `d_Q` of `f = Σ d_Q a_Q`. Its
//! coefficient norm `(Σ_k (Σ_{Q ∈ P^k} |d_Q|^p)^{q/p})^{1/q}` bounds the
//! Besov norm of `f` from above. [`canonical_rep`] produces the
//! martingale-difference representation of a piecewise constant function,
//! which reconstructs it exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::grid::{cell_measure, checked_pow, CellId, IntervalUnion};
use crate::util::{neumaier, NeumaierSum};

/// Relative tolerance for norm comparisons.
pub const NORM_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter constraint violated: {inequality} ({detail})")]
    Violated { inequality: &'static str, detail: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BesovError {
    #[error("coefficient norm is not finite")]
    Overflow,
    #[error("atom on {support} has norm {norm:e} above its budget {budget:e}")]
    AtomViolation { support: CellId, norm: f64, budget: f64 },
    #[error("atom on {support} has a coefficient on {cell}, outside its support")]
    AtomSupport { support: CellId, cell: CellId },
    #[error("function values must be real and nonnegative")]
    NotNonnegative,
    #[error("arity mismatch: {0} vs {1}")]
    ArityMismatch(u32, u32),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Besov parameters `(s, p, q)` with the auxiliary exponents used by the
/// transfer-operator bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BesovParams {
    pub s: f64,
    pub p: f64,
    #[serde(serialize_with = "ser_exponent", deserialize_with = "de_exponent")]
    pub q: f64,
    pub beta: f64,
    pub eps: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl Default for BesovParams {
    fn default() -> Self {
        BesovParams { s: 0.4, p: 2.0, q: 2.0, beta: 0.45, eps: 0.1, delta: 0.05, gamma: 0.5 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Exponent {
    Num(f64),
    Text(String),
}

fn ser_exponent<S: Serializer>(q: &f64, s: S) -> Result<S::Ok, S::Error> {
    if q.is_infinite() {
        Exponent::Text("inf".into()).serialize(s)
    } else {
        Exponent::Num(*q).serialize(s)
    }
}

fn de_exponent<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    match Exponent::deserialize(d)? {
        Exponent::Num(x) => Ok(x),
        Exponent::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "∞") => Ok(f64::INFINITY),
        Exponent::Text(t) => Err(serde::de::Error::custom(format!("invalid exponent {t:?}"))),
    }
}

impl BesovParams {
    /// Souza-scale parameters `s = 1/p`, where atoms are indicators.
    pub fn indicator_scale(p: f64) -> Self {
        BesovParams { s: 1.0 / p, p, ..Default::default() }
    }

    /// The same parameters with smoothness replaced by `beta`.
    pub fn beta_scale(&self) -> Self {
        BesovParams { s: self.beta, ..*self }
    }

    /// Checks the standing inequalities on the exponents.
    pub fn validate(&self) -> Result<(), ParamError> {
        let BesovParams { s, p, q, beta, eps, delta, gamma } = *self;
        let bad = |inequality: &'static str, detail: String| Err(ParamError::Violated { inequality, detail });
        if !(p >= 1.0 && p.is_finite()) {
            return bad("1 ≤ p < ∞", format!("p = {p}"));
        }
        if !(q >= 1.0) {
            return bad("1 ≤ q ≤ ∞", format!("q = {q}"));
        }
        if !(s > 0.0 && s < 1.0) {
            return bad("0 < s < 1", format!("s = {s}"));
        }
        if !(gamma >= 0.0 && gamma <= 1.0) {
            return bad("0 ≤ γ ≤ 1", format!("γ = {gamma}"));
        }
        if !(eps > 0.0 && s + eps > 0.0 && s + eps <= 1.0 / p + 1e-15) {
            return bad("0 < s+ε ≤ 1/p", format!("s+ε = {}, 1/p = {}", s + eps, 1.0 / p));
        }
        if !(s < beta && beta < 1.0 / p) {
            return bad("s < β < 1/p", format!("s = {s}, β = {beta}, 1/p = {}", 1.0 / p));
        }
        if !(delta > 0.0 && delta < s.max(eps)) {
            return bad("0 < δ < max(s, ε)", format!("δ = {delta}, max(s, ε) = {}", s.max(eps)));
        }
        Ok(())
    }

    /// `t0 = p / (1 - s p + δ p)`.
    pub fn t0(&self) -> f64 {
        self.p / (1.0 - self.s * self.p + self.delta * self.p)
    }

    /// Conjugate exponent `p' = p / (p - 1)`.
    pub fn p_conj(&self) -> f64 {
        conjugate(self.p)
    }

    /// `s - 1/p`, the exponent of `|Q|` in `a_Q`.
    pub fn atom_exponent(&self) -> f64 {
        self.s - 1.0 / self.p
    }
}

/// Conjugate exponent, `∞` for `1`.
pub fn conjugate(x: f64) -> f64 {
    if x == 1.0 {
        f64::INFINITY
    } else {
        x / (x - 1.0)
    }
}

/// `(Σ_k L_k^{q/p})^{1/q}` from per-level sums `L_k = Σ |d|^p`.
pub fn layered_norm(level_sums: impl IntoIterator<Item = f64>, p: f64, q: f64) -> f64 {
    if q.is_infinite() {
        level_sums.into_iter().map(|l| l.powf(1.0 / p)).fold(0.0, f64::max)
    } else {
        neumaier(level_sums.into_iter().map(|l| l.powf(q / p))).powf(1.0 / q)
    }
}

/// Coefficient norm of `(cell, |d|)` pairs.
pub fn norm_of_magnitudes(items: impl IntoIterator<Item = (CellId, f64)>, p: f64, q: f64) -> f64 {
    let mut levels: BTreeMap<u32, NeumaierSum> = BTreeMap::new();
    for (c, a) in items {
        levels.entry(c.level).or_default().add(a.powf(p));
    }
    layered_norm(levels.values().map(NeumaierSum::total), p, q)
}

/// A function constant on the cells of one grid level.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseFn {
    arity: u32,
    level: u32,
    values: Vec<Complex64>,
}

impl PiecewiseFn {
    pub fn new(arity: u32, level: u32, values: Vec<Complex64>) -> Self {
        let n = checked_pow(arity, level).expect("level addressable") as usize;
        assert_eq!(values.len(), n, "expected {n} cell values");
        PiecewiseFn { arity, level, values }
    }

    pub fn from_real(arity: u32, level: u32, values: impl IntoIterator<Item = f64>) -> Self {
        Self::new(arity, level, values.into_iter().map(Complex64::from).collect())
    }

    pub fn constant(arity: u32, level: u32, c: Complex64) -> Self {
        let n = checked_pow(arity, level).expect("level addressable") as usize;
        PiecewiseFn { arity, level, values: vec![c; n] }
    }

    pub fn zeros(arity: u32, level: u32) -> Self {
        Self::constant(arity, level, Complex64::new(0.0, 0.0))
    }

    /// Cell values `f(lo, hi)` for each cell `[lo, hi)`.
    pub fn from_cells(arity: u32, level: u32, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let n = checked_pow(arity, level).expect("level addressable");
        let values = (0..n).map(|j| {
            let (lo, hi) = CellId::new(level, j).interval(arity);
            f(lo, hi)
        });
        PiecewiseFn { arity, level, values: values.collect() }
    }

    /// Cell averages of a real function, by 5-point Gauss–Legendre on each cell.
    pub fn from_averages(arity: u32, level: u32, f: impl Fn(f64) -> f64) -> Self {
        Self::from_cells(arity, level, |lo, hi| {
            Complex64::from(crate::util::gauss_legendre5(lo, hi, &f) / (hi - lo))
        })
    }

    /// Exact cell averages of the indicator of `set`.
    pub fn indicator(arity: u32, level: u32, set: &IntervalUnion) -> Self {
        Self::from_cells(arity, level, |lo, hi| Complex64::from(set.overlap(lo, hi) / (hi - lo)))
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn cell_measure(&self) -> f64 {
        cell_measure(self.arity, self.level)
    }

    pub fn value_at(&self, x: f64) -> Complex64 {
        let n = self.values.len();
        let j = ((x * n as f64).floor() as usize).min(n - 1);
        self.values[j]
    }

    pub fn integral(&self) -> Complex64 {
        let h = self.cell_measure();
        Complex64::new(
            neumaier(self.values.iter().map(|v| v.re)) * h,
            neumaier(self.values.iter().map(|v| v.im)) * h,
        )
    }

    pub fn lp_norm(&self, t: f64) -> f64 {
        lp_norm(self, t)
    }

    pub fn l1_distance(&self, other: &PiecewiseFn) -> f64 {
        self.zip_with(other, |a, b| a - b).lp_norm(1.0)
    }

    pub fn sup_distance(&self, other: &PiecewiseFn) -> f64 {
        self.zip_with(other, |a, b| a - b).lp_norm(f64::INFINITY)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> PiecewiseFn {
        PiecewiseFn { arity: self.arity, level: self.level, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Pointwise combination; both functions are brought to the finer level.
    pub fn zip_with(&self, other: &PiecewiseFn, f: impl Fn(Complex64, Complex64) -> Complex64) -> PiecewiseFn {
        assert_eq!(self.arity, other.arity, "arity mismatch");
        let level = self.level.max(other.level);
        let a = self.resample(level);
        let b = other.resample(level);
        let values = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
        PiecewiseFn { arity: self.arity, level, values }
    }

    pub fn scale(&self, c: Complex64) -> PiecewiseFn {
        self.map(|v| v * c)
    }

    /// Refines by repetition or coarsens by averaging.
    pub fn resample(&self, level: u32) -> PiecewiseFn {
        let m = self.arity as usize;
        if level == self.level {
            return self.clone();
        }
        if level > self.level {
            let rep = checked_pow(self.arity, level - self.level).expect("level addressable") as usize;
            let mut values = Vec::with_capacity(self.values.len() * rep);
            for &v in &self.values {
                values.extend(std::iter::repeat_n(v, rep));
            }
            return PiecewiseFn { arity: self.arity, level, values };
        }
        let mut values = self.values.clone();
        for _ in level..self.level {
            values = values.chunks(m).map(|c| c.iter().sum::<Complex64>() / m as f64).collect();
        }
        PiecewiseFn { arity: self.arity, level, values }
    }

    /// CSV with columns `midpoint,re,im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("midpoint,re,im\n");
        for (j, v) in self.values.iter().enumerate() {
            let x = CellId::new(self.level, j as u64).midpoint(self.arity);
            let _ = writeln!(out, "{x},{},{}", v.re, v.im);
        }
        out
    }
}

/// `L^t` norm of a piecewise constant function, `t = ∞` allowed.
pub fn lp_norm(f: &PiecewiseFn, t: f64) -> f64 {
    assert!(t >= 1.0, "exponent must be at least 1");
    if t.is_infinite() {
        return f.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    }
    let h = f.cell_measure();
    let s = neumaier(f.values.iter().map(|v| v.norm().powf(t)));
    (s * h).powf(1.0 / t)
}

/// Sparse Souza-atom representation `Σ d_Q a_Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicRep {
    params: BesovParams,
    arity: u32,
    coeffs: BTreeMap<CellId, Complex64>,
    positive: bool,
}

fn is_nonneg(c: Complex64) -> bool {
    c.im == 0.0 && c.re >= 0.0
}

/// One entry of a serialized representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffEntry {
    pub cell: CellId,
    pub re: f64,
    pub im: f64,
}

impl AtomicRep {
    pub fn new(params: BesovParams, arity: u32) -> Self {
        AtomicRep { params, arity, coeffs: BTreeMap::new(), positive: true }
    }

    pub fn from_coeffs(params: BesovParams, arity: u32, coeffs: impl IntoIterator<Item = (CellId, Complex64)>) -> Self {
        let mut rep = Self::new(params, arity);
        for (c, d) in coeffs {
            rep.add_to(c, d);
        }
        rep
    }

    /// The representation `c · a_Q`.
    pub fn atom(params: BesovParams, arity: u32, cell: CellId, c: Complex64) -> Self {
        Self::from_coeffs(params, arity, [(cell, c)])
    }

    pub fn params(&self) -> &BesovParams {
        &self.params
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    /// True when every coefficient is known to be real and nonnegative.
    pub fn positive_flag(&self) -> bool {
        self.positive
    }

    pub fn coeffs(&self) -> &BTreeMap<CellId, Complex64> {
        &self.coeffs
    }

    pub fn coefficient(&self, cell: &CellId) -> Complex64 {
        self.coeffs.get(cell).copied().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Deepest level carrying a coefficient.
    pub fn max_level(&self) -> Option<u32> {
        self.coeffs.keys().next_back().map(|c| c.level)
    }

    /// Adds `d` to the coefficient of `cell`.
    pub fn add_to(&mut self, cell: CellId, d: Complex64) {
        let e = self.coeffs.entry(cell).or_default();
        *e += d;
        if !is_nonneg(*e) {
            self.positive = false;
        }
    }

    /// Drops coefficients with `|d| <= tol`.
    pub fn prune(&mut self, tol: f64) {
        self.coeffs.retain(|_, d| d.norm() > tol);
    }

    /// Level-wise `ℓ^p` norms `(Σ_{Q ∈ P^k} |d_Q|^p)^{1/p}`.
    pub fn level_norms(&self) -> BTreeMap<u32, f64> {
        let p = self.params.p;
        let mut levels: BTreeMap<u32, NeumaierSum> = BTreeMap::new();
        for (c, d) in &self.coeffs {
            levels.entry(c.level).or_default().add(d.norm().powf(p));
        }
        levels.into_iter().map(|(k, s)| (k, s.total().powf(1.0 / p))).collect()
    }

    pub fn coefficient_norm(&self) -> Result<f64, BesovError> {
        let n = norm_of_magnitudes(self.coeffs.iter().map(|(c, d)| (*c, d.norm())), self.params.p, self.params.q);
        if n.is_finite() {
            Ok(n)
        } else {
            Err(BesovError::Overflow)
        }
    }

    pub fn scale(&self, alpha: Complex64) -> AtomicRep {
        AtomicRep::from_coeffs(self.params, self.arity, self.coeffs.iter().map(|(c, d)| (*c, d * alpha)))
    }

    /// Coefficientwise sum.
    pub fn add(&self, other: &AtomicRep) -> AtomicRep {
        assert_eq!(self.arity, other.arity, "arity mismatch");
        let mut out = self.clone();
        for (c, d) in &other.coeffs {
            out.add_to(*c, *d);
        }
        out
    }

    /// Coefficients at levels `< t` and the rest.
    pub fn split_at(&self, t: u32) -> (AtomicRep, AtomicRep) {
        let head = self.coeffs.iter().filter(|(c, _)| c.level < t).map(|(c, d)| (*c, *d));
        let tail = self.coeffs.iter().filter(|(c, _)| c.level >= t).map(|(c, d)| (*c, *d));
        (
            AtomicRep::from_coeffs(self.params, self.arity, head),
            AtomicRep::from_coeffs(self.params, self.arity, tail),
        )
    }

    /// Cell values at `resolution`. Atoms deeper than `resolution` are
    /// averaged onto their ancestors.
    pub fn evaluate(&self, resolution: u32) -> PiecewiseFn {
        let m = self.arity as usize;
        let e = self.params.atom_exponent();
        let mut acc = vec![Complex64::new(0.0, 0.0)];
        let mut iter = self.coeffs.iter().peekable();
        for k in 0..=resolution {
            if k > 0 {
                let mut next = Vec::with_capacity(acc.len() * m);
                for v in &acc {
                    next.extend(std::iter::repeat_n(*v, m));
                }
                acc = next;
            }
            let height = cell_measure(self.arity, k).powf(e);
            while let Some((c, d)) = iter.peek() {
                if c.level != k {
                    break;
                }
                acc[c.index as usize] += *d * height;
                iter.next();
            }
        }
        for (c, d) in iter {
            let anc = c.ancestor(self.arity, resolution);
            let mass = cell_measure(self.arity, c.level).powf(e + 1.0);
            acc[anc.index as usize] += *d * (mass / cell_measure(self.arity, resolution));
        }
        PiecewiseFn::new(self.arity, resolution, acc)
    }

    /// `∫ Σ d_Q a_Q = Σ d_Q |Q|^{s-1/p+1}`.
    pub fn integral(&self) -> Complex64 {
        let e = self.params.atom_exponent() + 1.0;
        let mut re = NeumaierSum::default();
        let mut im = NeumaierSum::default();
        for (c, d) in &self.coeffs {
            let w = c.measure(self.arity).powf(e);
            re.add(d.re * w);
            im.add(d.im * w);
        }
        Complex64::new(re.total(), im.total())
    }

    pub fn entries(&self) -> Vec<CoeffEntry> {
        self.coeffs.iter().map(|(c, d)| CoeffEntry { cell: *c, re: d.re, im: d.im }).collect()
    }

    pub fn from_entries(params: BesovParams, arity: u32, entries: &[CoeffEntry]) -> Self {
        Self::from_coeffs(params, arity, entries.iter().map(|e| (e.cell, Complex64::new(e.re, e.im))))
    }
}

/// `a_Q` as a function at `resolution >= level(Q)`.
pub fn souza_atom(cell: CellId, params: &BesovParams, arity: u32, resolution: u32) -> PiecewiseFn {
    assert!(cell.level <= resolution, "atom finer than resolution");
    let mut f = PiecewiseFn::zeros(arity, resolution);
    let height = Complex64::from(cell.measure(arity).powf(params.atom_exponent()));
    for j in cell.descendant_range(arity, resolution) {
        f.values[j as usize] = height;
    }
    f
}

/// How parent and child values are compared when telescoping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Telescope {
    /// Cell averages; gives the canonical representation.
    Mean,
    /// Cell minima of a nonnegative function; all coefficients are `>= 0`.
    Min,
}

/// Telescoping coefficients of a function given by its values on the
/// descendants of `root` at relative depth `depth`.
pub(crate) fn telescope(
    root: CellId,
    depth: u32,
    arity: u32,
    values: &[Complex64],
    params: &BesovParams,
    mode: Telescope,
) -> Vec<(CellId, Complex64)> {
    let m = arity as usize;
    let e = 1.0 / params.p - params.s;
    let mut levels: Vec<Vec<Complex64>> = vec![values.to_vec()];
    for _ in 0..depth {
        let finer = levels.last().expect("nonempty");
        let coarser = finer
            .chunks(m)
            .map(|c| match mode {
                Telescope::Mean => c.iter().sum::<Complex64>() / m as f64,
                Telescope::Min => Complex64::from(c.iter().map(|v| v.re).fold(f64::INFINITY, f64::min)),
            })
            .collect();
        levels.push(coarser);
    }
    levels.reverse();
    let mut out = Vec::new();
    let top = levels[0][0];
    if top != Complex64::new(0.0, 0.0) {
        out.push((root, top * root.measure(arity).powf(e)));
    }
    for d in 1..=depth as usize {
        let level = root.level + d as u32;
        let weight = cell_measure(arity, level).powf(e);
        let first = root.index * checked_pow(arity, d as u32).expect("addressable");
        for (j, v) in levels[d].iter().enumerate() {
            let diff = v - levels[d - 1][j / m];
            if diff != Complex64::new(0.0, 0.0) {
                out.push((CellId::new(level, first + j as u64), diff * weight));
            }
        }
    }
    out
}

/// Martingale-difference representation of `f`.
pub fn canonical_rep(f: &PiecewiseFn, params: &BesovParams) -> AtomicRep {
    let coeffs = telescope(CellId::ROOT, f.level, f.arity, &f.values, params, Telescope::Mean);
    AtomicRep::from_coeffs(*params, f.arity, coeffs)
}

/// Random sparse representation with `atoms` coefficients at levels up to
/// `max_level`, uniform in `[-1, 1]` (or `[0, 1]`).
pub fn random_rep<R: Rng + ?Sized>(
    params: BesovParams,
    arity: u32,
    max_level: u32,
    atoms: usize,
    nonnegative: bool,
    rng: &mut R,
) -> AtomicRep {
    let lo = if nonnegative { 0.0 } else { -1.0 };
    let mut rep = AtomicRep::new(params, arity);
    for _ in 0..atoms {
        let level = rng.random_range(0..=max_level);
        let n = checked_pow(arity, level).expect("addressable level");
        let cell = CellId::new(level, rng.random_range(0..n));
        rep.add_to(cell, Complex64::new(rng.random_range(lo..=1.0), 0.0));
    }
    rep
}

/// Representation with nonnegative coefficients of a nonnegative real `f`,
/// telescoping cell minima.
pub fn positive_rep(f: &PiecewiseFn, params: &BesovParams) -> Result<AtomicRep, BesovError> {
    if f.values.iter().any(|v| !is_nonneg(*v)) {
        return Err(BesovError::NotNonnegative);
    }
    let coeffs = telescope(CellId::ROOT, f.level, f.arity, &f.values, params, Telescope::Min);
    Ok(AtomicRep::from_coeffs(*params, f.arity, coeffs))
}

/// A function supported in `support`, represented at the `beta` scale.
#[derive(Clone, Debug, PartialEq)]
pub struct BesovAtom {
    pub support: CellId,
    pub rep: AtomicRep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SouzaConversion {
    pub rep: AtomicRep,
    /// Layered norm of the weights over supports.
    pub input_norm: f64,
    pub output_norm: f64,
}

impl SouzaConversion {
    /// Measured `output_norm / input_norm`; a lower bound for `C_GBS`.
    pub fn ratio(&self) -> f64 {
        if self.input_norm == 0.0 {
            0.0
        } else {
            self.output_norm / self.input_norm
        }
    }
}

/// Flattens a weighted sum of Besov atoms into a Souza representation at
/// smoothness `params.s`.
pub fn besov_to_souza(
    params: &BesovParams,
    arity: u32,
    atoms: &[(Complex64, BesovAtom)],
    c_gbva: f64,
) -> Result<SouzaConversion, BesovError> {
    let shift = params.beta - params.s;
    let mut out = AtomicRep::new(*params, arity);
    let mut weights: BTreeMap<CellId, f64> = BTreeMap::new();
    let mut positive = true;
    for (w, atom) in atoms {
        if atom.rep.arity != arity {
            return Err(BesovError::ArityMismatch(atom.rep.arity, arity));
        }
        if let Some(cell) = atom.rep.coeffs.keys().find(|c| !atom.support.contains(arity, c)) {
            return Err(BesovError::AtomSupport { support: atom.support, cell: *cell });
        }
        let norm = atom.rep.coefficient_norm()?;
        let budget = atom.support.measure(arity).powf(-shift) / c_gbva;
        if norm > budget * (1.0 + NORM_TOL) {
            return Err(BesovError::AtomViolation { support: atom.support, norm, budget });
        }
        *weights.entry(atom.support).or_default() += w.norm();
        positive &= is_nonneg(*w) && atom.rep.positive;
        for (c, e) in &atom.rep.coeffs {
            out.add_to(*c, *w * *e * c.measure(arity).powf(shift));
        }
    }
    out.positive = positive && out.coeffs.values().all(|d| is_nonneg(*d));
    let input_norm = norm_of_magnitudes(weights, params.p, params.q);
    let output_norm = out.coefficient_norm()?;
    Ok(SouzaConversion { rep: out, input_norm, output_norm })
}

/// Canonical representation of `v · f`, with `f` evaluated at `v`'s level.
pub fn multiplier_apply(v: &PiecewiseFn, rep: &AtomicRep) -> AtomicRep {
    let f = rep.evaluate(v.level);
    let prod = v.zip_with(&f, |a, b| a * b);
    canonical_rep(&prod, &rep.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn default_params_are_admissible() {
        let p = BesovParams::default();
        p.validate().unwrap();
        assert!((p.t0() - 20.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn violations_name_the_inequality() {
        let p = BesovParams { s: 0.45, ..Default::default() };
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("0 < s+ε ≤ 1/p"), "{err}");
        let p = BesovParams { beta: 0.5, ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("s < β < 1/p"));
        let p = BesovParams { delta: 0.5, ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("0 < δ < max(s, ε)"));
    }

    #[test]
    fn q_infinity_round_trips() {
        let p = BesovParams { q: f64::INFINITY, ..Default::default() };
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"q\":\"inf\""));
        let back: BesovParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn sup_over_levels_for_q_infinity() {
        let params = BesovParams { q: f64::INFINITY, ..Default::default() };
        let rep = AtomicRep::from_coeffs(
            params,
            2,
            [(CellId::new(1, 0), c(3.0)), (CellId::new(1, 1), c(4.0)), (CellId::new(2, 0), c(1.0))],
        );
        assert!((rep.coefficient_norm().unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn positive_flag_tracks_signs() {
        let params = BesovParams::default();
        let mut rep = AtomicRep::atom(params, 2, CellId::ROOT, c(1.0));
        assert!(rep.positive_flag());
        rep.add_to(CellId::new(1, 0), c(-0.5));
        assert!(!rep.positive_flag());
    }

    #[test]
    fn deep_atoms_average_onto_ancestors() {
        let params = BesovParams::indicator_scale(2.0);
        let rep = AtomicRep::atom(params, 2, CellId::new(3, 1), c(1.0));
        let f = rep.evaluate(1);
        assert_eq!(f.values()[0], c(0.25));
        assert_eq!(f.values()[1], c(0.0));
    }

    #[test]
    fn resample_round_trip() {
        let f = PiecewiseFn::from_real(2, 2, [1.0, 2.0, 3.0, 4.0]);
        let g = f.resample(4).resample(2);
        assert_eq!(f, g);
        assert_eq!(f.resample(1).values(), &[c(1.5), c(3.5)]);
    }

    #[test]
    fn positive_rep_reconstructs_and_is_nonnegative() {
        let params = BesovParams::default();
        let f = PiecewiseFn::from_real(2, 3, [0.5, 2.0, 1.0, 0.0, 3.0, 3.0, 0.25, 1.0]);
        let rep = positive_rep(&f, &params).unwrap();
        assert!(rep.positive_flag());
        assert!(rep.evaluate(3).sup_distance(&f) < 1e-14);
        assert!(positive_rep(&f.scale(c(-1.0)), &params).is_err());
    }
}
