//! Batch execution of a [`RunConfig`].
//!
//! Analyses run in dependency order: grid and parameters, branch ledger,
//! Lebesgue boundedness, truncated matrix, then the spectral analyses.
//! Every artifact is CSV or JSON and depends only on the config and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::besov::{canonical_rep, PiecewiseFn};
use crate::config::{Analysis, RunConfig, RunError};
use crate::dynamics::{ledger_csv, make_map, BranchLedger, BranchSystem, DynamicsError};
use crate::grid::{build_grid_with_budget, validate_grid, AxiomReport};
use crate::spectral::{
    clt_variance, decay_rate, invariant_density, invariant_density_exact, lag_window, lasota_yorke_verify, ly_ensemble, ly_violations,
    monte_carlo_variance, peripheral_spectrum, support_structure, CltReport, DecayReport, DensityMethod, DensityReport,
    LyReport, MonteCarloReport, SpectralError, SpectralReport, SupportReport,
};
use crate::transfer::{assemble_matrix, prepare, BoundReport, SlicingLedger, Transfer, TransferError, TransferMatrix};

fn assumption_or_numeric(e: TransferError) -> RunError {
    match e {
        TransferError::LebesgueBound(_) | TransferError::NonRegular(_) | TransferError::Divergence(_) | TransferError::Dynamics(_) => {
            RunError::Assumption(e.to_string())
        }
        TransferError::Budget { .. } | TransferError::BadSplit { .. } => RunError::Config(e.to_string()),
        _ => RunError::Numeric(e.to_string()),
    }
}

fn dynamics_error(e: DynamicsError) -> RunError {
    match e {
        DynamicsError::Spec(_) => RunError::Config(format!("at `map`: {e}")),
        _ => RunError::Assumption(e.to_string()),
    }
}

fn numeric(context: &str) -> impl Fn(SpectralError) -> RunError + '_ {
    move |e| RunError::Numeric(format!("{context}: {e}"))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct ValidateReport<'a> {
    map: String,
    grid: &'a AxiomReport,
    t0: f64,
    branches: usize,
    ledger_complete: bool,
    issues: Vec<String>,
    tail_mass: f64,
    lebesgue: Option<&'a BoundReport>,
}

#[derive(Serialize)]
struct DensitySummary<'a> {
    method: DensityMethod,
    iterations: usize,
    change: f64,
    residual: f64,
    clamp_mass: f64,
    tail_mass: f64,
    support: &'a SupportReport,
}

#[derive(Serialize)]
struct MatrixSummary {
    name: String,
    dim: usize,
    level: u32,
    split_level: u32,
    mass_preserving: bool,
    nonnegative: bool,
    truncation_defect: f64,
    sampled_tail_norm: f64,
    tail_samples: usize,
    seed: u64,
}

#[derive(Serialize)]
struct LySummary<'a> {
    #[serde(flatten)]
    report: &'a LyReport,
    fresh_seed: u64,
    fresh_violations: usize,
}

#[derive(Serialize)]
struct CltSummary<'a> {
    observable_mean: f64,
    #[serde(flatten)]
    report: &'a CltReport,
    monte_carlo: &'a MonteCarloReport,
}

/// Lazily computed state of one run.
pub struct Session {
    config: RunConfig,
    out: PathBuf,
    system: Option<BranchSystem>,
    transfer: Option<Transfer>,
    matrix: Option<TransferMatrix>,
    density: Option<DensityReport>,
    spectrum: Option<SpectralReport>,
    ly: Option<(LyReport, usize)>,
    written: Vec<PathBuf>,
}

impl Session {
    pub fn new(config: RunConfig) -> Self {
        let out = config.output.clone();
        Session {
            config,
            out,
            system: None,
            transfer: None,
            matrix: None,
            density: None,
            spectrum: None,
            ly: None,
            written: Vec::new(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Artifacts written so far, in order.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        std::fs::create_dir_all(&self.out).map_err(|source| RunError::Io { path: self.out.clone(), source })?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|source| RunError::Io { path: path.clone(), source })?;
        self.written.push(path);
        Ok(())
    }

    pub fn system(&mut self) -> Result<&BranchSystem, RunError> {
        if self.system.is_none() {
            let c = &self.config;
            let sys = make_map(&c.map, &c.params, &c.system_options()).map_err(dynamics_error)?;
            self.system = Some(sys);
        }
        Ok(self.system.as_ref().expect("set above"))
    }

    pub fn transfer(&mut self) -> Result<&Transfer, RunError> {
        if self.transfer.is_none() {
            let sys = self.system()?.clone();
            let t = prepare(sys, self.config.transfer_options()).map_err(assumption_or_numeric)?;
            self.transfer = Some(t);
        }
        Ok(self.transfer.as_ref().expect("set above"))
    }

    pub fn matrix(&mut self) -> Result<&TransferMatrix, RunError> {
        if self.matrix.is_none() {
            let m = assemble_matrix(self.transfer()?).map_err(assumption_or_numeric)?;
            self.matrix = Some(m);
        }
        Ok(self.matrix.as_ref().expect("set above"))
    }

    pub fn density(&mut self) -> Result<&DensityReport, RunError> {
        if self.density.is_none() {
            let a = self.config.analysis.clone();
            let caps = self.config.caps.clone();
            let d = match a.density_method {
                DensityMethod::Exact => {
                    let level = self.config.grid.max_level;
                    invariant_density_exact(self.system()?, level, a.density_tol, caps.max_iter, caps.max_pieces).map_err(|e| match e {
                        SpectralError::Unsupported(_) => RunError::Config(format!("invariant density: {e}")),
                        e => numeric("invariant density")(e),
                    })?
                }
                method => invariant_density(self.matrix()?, method, a.density_tol, caps.max_iter)
                    .map_err(numeric("invariant density"))?,
            };
            self.density = Some(d);
        }
        Ok(self.density.as_ref().expect("set above"))
    }

    pub fn spectrum(&mut self) -> Result<&SpectralReport, RunError> {
        if self.spectrum.is_none() {
            let tol = self.config.analysis.peripheral_tol;
            let s = peripheral_spectrum(self.matrix()?, tol).map_err(numeric("spectrum"))?;
            self.spectrum = Some(s);
        }
        Ok(self.spectrum.as_ref().expect("set above"))
    }

    /// Lasota–Yorke fit and its violations on a fresh ensemble.
    pub fn ly(&mut self) -> Result<&(LyReport, usize), RunError> {
        if self.ly.is_none() {
            let (size, n_max, seed) = (self.config.analysis.ly_ensemble, self.config.analysis.ly_n_max, self.config.seed);
            let m = self.matrix()?;
            let report = lasota_yorke_verify(m, size, n_max, seed);
            let fresh = ly_ensemble(m, size, seed.wrapping_add(1));
            let violations = ly_violations(m, &report, &fresh, n_max);
            self.ly = Some((report, violations));
        }
        Ok(self.ly.as_ref().expect("set above"))
    }

    /// Runs every configured analysis, stopping at the first hard error.
    pub fn run(&mut self) -> Result<(), RunError> {
        for a in self.config.ordered_analyses() {
            self.run_analysis(a)?;
        }
        Ok(())
    }

    pub fn run_analysis(&mut self, analysis: Analysis) -> Result<(), RunError> {
        match analysis {
            Analysis::Validate => self.run_validate(),
            Analysis::Ledger => self.run_ledger(),
            Analysis::Matrix => self.run_matrix(),
            Analysis::Density => self.run_density(),
            Analysis::Spectrum => self.run_spectrum(),
            Analysis::Decay => self.run_decay(),
            Analysis::Clt => self.run_clt(),
            Analysis::Ly => self.run_ly(),
            Analysis::Bounds => self.run_bounds(),
        }
    }

    fn run_validate(&mut self) -> Result<(), RunError> {
        let c = &self.config;
        let grid = build_grid_with_budget(c.grid.arity, c.grid.max_level, c.caps.grid_cells)
            .map_err(|e| RunError::Config(format!("at `grid`: {e}")))?;
        let axioms = validate_grid(&grid);
        let t0 = c.params.t0();
        let sys = self.system()?.clone();
        let transfer = self.transfer().map(|t| t.lebesgue().clone());
        let lebesgue = transfer.as_ref().ok();
        let report = ValidateReport {
            map: sys.name(),
            grid: &axioms,
            t0,
            branches: sys.branches().len(),
            ledger_complete: sys.ledger_complete(),
            issues: sys.issues().iter().map(|(r, e)| format!("branch {r}: {e}")).collect(),
            tail_mass: sys.tail_mass(),
            lebesgue,
        };
        let text = json(&report);
        self.write("validate.json", &text)?;
        if !axioms.all_pass() {
            return Err(RunError::Assumption("grid axioms fail".into()));
        }
        transfer.map(|_| ())
    }

    fn run_ledger(&mut self) -> Result<(), RunError> {
        let sys = self.system()?;
        let csv = ledger_csv(sys);
        let full: Vec<Option<BranchLedger>> = sys.ledger().to_vec();
        self.write("ledger.csv", &csv)?;
        self.write("ledger.json", &json(&full))
    }

    fn run_matrix(&mut self) -> Result<(), RunError> {
        let (samples, seed) = (self.config.analysis.tail_samples, self.config.seed.wrapping_add(3));
        let m = self.matrix()?;
        let summary = MatrixSummary {
            name: m.name().to_string(),
            dim: m.dim(),
            level: m.level(),
            split_level: m.split_level(),
            mass_preserving: m.mass_preserving(),
            nonnegative: m.nonnegative(),
            truncation_defect: m.truncation_defect(),
            sampled_tail_norm: m.sampled_tail_norm(samples, seed),
            tail_samples: samples,
            seed,
        };
        let triplets = m.to_triplets();
        self.write("matrix.csv", &triplets)?;
        self.write("matrix.json", &json(&summary))
    }

    fn run_density(&mut self) -> Result<(), RunError> {
        let tol = self.config.analysis.support_tol;
        let tail_mass = self.system()?.tail_mass();
        let d = self.density()?;
        let support = support_structure(&d.density, tol);
        let mut support_csv = String::from("cell,lo,hi\n");
        let arity = d.density.arity();
        for cell in &support.cells {
            let (lo, hi) = cell.interval(arity);
            let _ = writeln!(support_csv, "{cell},{lo},{hi}");
        }
        let summary = DensitySummary {
            method: d.method,
            iterations: d.iterations,
            change: d.change,
            residual: d.residual,
            clamp_mass: d.clamp_mass,
            tail_mass,
            support: &support,
        };
        let (csv, summary) = (d.density.to_csv(), json(&summary));
        self.write("density.csv", &csv)?;
        self.write("support.csv", &support_csv)?;
        self.write("density.json", &summary)
    }

    fn run_spectrum(&mut self) -> Result<(), RunError> {
        let s = self.spectrum()?;
        let (csv, summary) = (s.to_csv(), json(s));
        self.write("spectrum.csv", &csv)?;
        self.write("spectrum.json", &summary)
    }

    /// Observable cell averages at the working level and their mean against the density.
    fn observable(&mut self) -> Result<(PiecewiseFn, f64), RunError> {
        let (arity, level) = (self.config.grid.arity, self.config.grid.max_level);
        let v = self.config.analysis.observable.averages(arity, level);
        let rho = &self.density()?.density;
        let mean = v.zip_with(rho, |a, b| a * b).integral().re;
        Ok((v, mean))
    }

    fn run_decay(&mut self) -> Result<(), RunError> {
        let k_max = self.config.analysis.decay_k_max;
        let lambda2 = self.spectrum()?.lambda2;
        let (v, _) = self.observable()?;
        let u = canonical_rep(&v, &self.config.params);
        let rho = self.density()?.density.clone();
        let report: DecayReport = decay_rate(self.matrix()?, &rho, lambda2, &u, &v, k_max).map_err(numeric("decay"))?;
        self.write("correlations.csv", &report.to_csv())?;
        self.write("decay.json", &json(&report))
    }

    fn run_clt(&mut self) -> Result<(), RunError> {
        let a = self.config.analysis.clone();
        let lambda2 = self.spectrum()?.lambda2;
        let (v, mean) = self.observable()?;
        let centered = v.map(|x| x - mean);
        let rho = self.density()?.density.clone();
        let report = clt_variance(self.matrix()?, &rho, &centered, &a.clt_steps).map_err(numeric("clt"))?;
        let seed = self.config.seed.wrapping_add(2);
        let obs = a.observable.clone();
        let mc = monte_carlo_variance(self.system()?, |x| obs.eval(x), a.mc_samples, a.mc_burn_in, lag_window(lambda2), seed);
        let text = json(&CltSummary { observable_mean: mean, report: &report, monte_carlo: &mc });
        self.write("clt.json", &text)
    }

    fn run_ly(&mut self) -> Result<(), RunError> {
        let (require, fresh_seed) = (self.config.analysis.require_ly, self.config.seed.wrapping_add(1));
        let (report, violations) = self.ly()?.clone();
        let text = json(&LySummary { report: &report, fresh_seed, fresh_violations: violations });
        self.write("ly.json", &text)?;
        if require && !report.pass {
            return Err(RunError::Numeric(format!(
                "no Lasota–Yorke factor below 1 fits (λ = {:.4}, C = {:.4})",
                report.lambda, report.c
            )));
        }
        Ok(())
    }

    fn run_bounds(&mut self) -> Result<(), RunError> {
        let t = self.transfer()?;
        let bounds = t.bounds();
        let mut text = bounds.to_text();
        text.push_str(&slicing_table(t.slicing()));
        let mut csv = String::from("name,formula,value\n");
        for e in bounds.entries() {
            let _ = writeln!(csv, "{},\"{}\",{:e}", e.name, e.formula, e.value);
        }
        let leb = json(t.lebesgue());
        self.write("bounds.txt", &text)?;
        self.write("bounds.csv", &csv)?;
        self.write("lebesgue.json", &leb)
    }

    /// Formula, role and current values of a named bound.
    pub fn explain(&mut self, name: &str) -> Result<String, RunError> {
        let entry = lookup(name).ok_or_else(|| {
            let known: Vec<&str> = EXPLAIN.iter().map(|e| e.name).collect();
            RunError::Config(format!("unknown bound {name:?}; known: {}", known.join(", ")))
        })?;
        let mut out = format!("{}\n  formula: {}\n  role: {}\n  values:\n", entry.name, entry.formula, entry.role);
        let values = self.explain_values(entry.name)?;
        out.push_str(&values);
        Ok(out)
    }

    fn explain_values(&mut self, name: &str) -> Result<String, RunError> {
        let p = self.config.params;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "    {k:<18} = {v}");
        };
        match name {
            "t0" => {
                line("p", p.p.to_string());
                line("s", p.s.to_string());
                line("delta", p.delta.to_string());
                line("t0", format!("{:.4}", p.t0()));
            }
            "theta" | "a_r" | "c_DC1" | "c_DC2" | "c_DGD1" | "c_DGD2" | "c_RP" => {
                let sys = self.system()?;
                line("eps", p.eps.to_string());
                line("1/p", (1.0 / p.p).to_string());
                line("1-gamma", (1.0 - p.gamma).to_string());
                let mut table = String::from("    r  a_r  c_DC1        c_DC2        c_DGD1       c_DGD2       c_RP         lambda_RS2,r Theta_r\n");
                let mut sum = 0.0;
                for l in sys.ledger().iter().flatten() {
                    sum += l.theta;
                    let _ = writeln!(
                        table,
                        "    {:<2} {:<4} {:<12.6e} {:<12.6e} {:<12.6e} {:<12.6e} {:<12.6e} {:<12.6e} {:.6e}",
                        l.r, l.a_r, l.c_dc1, l.c_dc2, l.c_dgd1, l.c_dgd2, l.c_rp, l.lambda_rs2, l.theta
                    );
                }
                line("sum Theta_r", format!("{sum:.6e}"));
                out.push_str(&table);
            }
            "lambda_RS2" | "C_D" => {
                let b = self.transfer()?.bounds().clone();
                line("lambda_RS2", format!("{:.6e}", b.lambda_rs2));
                line("gamma", b.gamma.to_string());
                line("C_D", format!("{:.6e}", b.c_d));
            }
            "C_FR" | "C_ES" | "C_RS1" => {
                let t = self.transfer()?;
                let (b, s) = (t.bounds().clone(), t.slicing().clone());
                line("C_FR", format!("{:.6e}", b.c_fr));
                line("C_ES", format!("{:.6e}", b.c_es));
                line("C_RS1", format!("{:.6e}", b.c_rs1));
                line("essential_source", b.essential_source.clone());
                line("regular_source", b.regular_source.clone());
                line("t", b.t.to_string());
                line("sum Theta_r", format!("{:.6e}", s.sum_theta));
                line("C_GSR", format!("{:.6e}", s.c_gsr));
                out.push_str(&slicing_table(&s));
            }
            "C_GBS" | "C_GC" | "C_GBVA" | "C_GSR" | "finite_rank_bound" | "essential_bound" | "norm_bound"
            | "certificate_factor" => {
                let b = self.transfer()?.bounds().clone();
                for e in b.entries() {
                    let relevant = match name {
                        "finite_rank_bound" => ["C_GBS", "C_D", "C_FR", "C_GC"].contains(&e.name.as_str()),
                        "essential_bound" => ["C_GBS", "C_D", "C_ES", "C_GC"].contains(&e.name.as_str()),
                        "norm_bound" => ["C_GBS", "C_D", "C_FR", "C_ES", "C_GC"].contains(&e.name.as_str()),
                        "certificate_factor" => ["C_GBS", "C_D", "C_RS1"].contains(&e.name.as_str()),
                        "C_GSR" => e.name == "C_GSR",
                        _ => false,
                    };
                    if relevant || e.name == name {
                        line(&e.name, format!("{:.6e}", e.value));
                    }
                }
                if name == "C_GSR" {
                    line("c_G2", (1.0 / self.config.grid.arity as f64).to_string());
                    line("beta - s", (p.beta - p.s).to_string());
                }
            }
            "c_leb" => {
                let l = self.transfer()?.lebesgue().clone();
                line("t0", format!("{:.4}", l.t0));
                line("eps'", l.eps_prime.to_string());
                line("c_disj", format!("{:.6e}", l.c_disj));
                line("c11", format!("{:.6e}", l.c11));
                line("c_DC1", format!("{:.6e}", l.c_dc1));
                line("class 1", format!("{:?}", l.lambda1));
                line("class 2", format!("{:?}", l.lambda2));
                line("class 3", format!("{:?}", l.lambda3));
                line("class 2 sum", format!("{:.6e}", l.sum_lambda2));
                line("class 3 sum", format!("{:.6e}", l.sum_lambda3));
                line("c_leb", format!("{:.6e}", l.c_leb));
            }
            "ly_lambda" | "ly_C" => {
                let (r, v) = self.ly()?.clone();
                line("C", format!("{:.6e}", r.c));
                line("lambda", format!("{:.6e}", r.lambda));
                line("n_max", r.n_max.to_string());
                line("ensemble", r.samples.clone());
                line("seed", r.seed.to_string());
                line("essential_bound", format!("{:.6e}", r.essential_bound));
                line("fresh violations", v.to_string());
            }
            "lambda2" => {
                let s = self.spectrum()?;
                let lead = s.eigenvalues.first().map_or(0.0, |z| z.norm());
                line("|lambda_1|", format!("{lead:.12}"));
                line("lambda2", format!("{:.6e}", s.lambda2));
                line("gap", format!("{:.6e}", s.gap));
                line("peripheral", s.peripheral.len().to_string());
            }
            _ => unreachable!("every table entry has a value printer"),
        }
        Ok(out)
    }
}

fn slicing_table(s: &SlicingLedger) -> String {
    let mut out = String::from("\ncandidate  applicable  C_FR          C_ES          mode      formula (FR | ES)\n");
    for c in &s.candidates {
        let _ = writeln!(
            out,
            "{:<10} {:<11} {:<13.6e} {:<13.6e} {:<9} {} | {}",
            c.name,
            c.applicable,
            c.c_fr,
            c.c_es,
            format!("{:?}", c.mode).to_lowercase(),
            c.formula_fr,
            c.formula_es
        );
    }
    out
}

/// A named bound with its defining formula and role.
#[derive(Clone, Copy, Debug)]
pub struct ExplainEntry {
    pub name: &'static str,
    pub formula: &'static str,
    pub role: &'static str,
}

const fn entry(name: &'static str, formula: &'static str, role: &'static str) -> ExplainEntry {
    ExplainEntry { name, formula, role }
}

pub const EXPLAIN: &[ExplainEntry] = &[
    entry("t0", "p/(1 − s·p + δ·p)", "Lebesgue exponent: atoms of the space lie in L^{t0}, which drives the L¹ bound of the transfer operator"),
    entry(
        "theta",
        "Θ_r = c_DC1^ε · c_RP · c_DGD1^{1/p} · λ_RS2,r^{a_r(1−γ)}",
        "per-branch regularity score; the slicing constants are sums of Θ_r",
    ),
    entry("a_r", "min over probed Q ⊆ I_r of |k0(Q) − k0(h_r⁻¹Q)|", "level shift of branch r"),
    entry("c_DC1", "max over probed Q of (|Q|/|h_r⁻¹Q|) · m^{shift(Q)}", "scaling control prefactor"),
    entry("c_DC2", "1/m", "scaling control rate per level of shift"),
    entry("c_DGD1", "max over probed Q of the regular-domain constant of h_r⁻¹Q", "geometric distortion control prefactor"),
    entry("c_DGD2", "m^{−α}", "geometric distortion control rate"),
    entry("c_RP", "max over probed Q of the potential regularity ratio on h_r⁻¹Q", "regularity of the potential g_r"),
    entry("lambda_RS2", "sup_r max(c_DC2^ε, c_DGD2^{1/p})", "geometric rate shared by all branches"),
    entry("C_D", "2/(1 − λ_RS2^γ)", "distortion factor of the transfer bound"),
    entry("C_FR", "finite-rank slicing constant of the candidate with smallest C_ES", "bounds the head (levels < t) of the slicing"),
    entry("C_ES", "essential slicing constant, minimal over candidates", "bounds the tail (levels ≥ t); controls the essential spectral radius"),
    entry("C_RS1", "C_FR + C_ES of the candidate with smallest sum", "full slicing constant used by the norm certificate"),
    entry("C_GBS", "configured", "cost of re-expanding Besov atoms as Souza atoms"),
    entry("C_GC", "configured", "near-optimality of the canonical representation"),
    entry("C_GBVA", "configured", "Besov-atom budget of pieces"),
    entry("C_GSR", "1/(1 − c_G2^{β−s}) unless configured", "geometric series over refinement levels"),
    entry("finite_rank_bound", "C_GBS · C_D · C_FR · C_GC", "norm bound of the finite-rank part"),
    entry("essential_bound", "C_GBS · C_D · C_ES · C_GC", "upper bound on the essential spectral radius"),
    entry("norm_bound", "C_GBS · C_D · (C_FR + C_ES) · C_GC", "operator norm bound"),
    entry("certificate_factor", "C_GBS · C_D · C_RS1", "coefficient-norm factor certified on every application"),
    entry("c_leb", "|Φf|₁ ≤ c_leb · |f|_{t0}", "Lebesgue boundedness constant aggregated over the three branch classes"),
    entry(
        "ly_lambda",
        "smallest λ with |Φⁿf| ≤ C|f|₁ + λⁿ|f| on every tested (f, n)",
        "empirical contraction factor of the Lasota–Yorke inequality",
    ),
    entry("ly_C", "max over f and n ∈ [n_max/2, n_max] of |Φⁿf|/|f|₁", "empirical additive constant of the Lasota–Yorke inequality"),
    entry("lambda2", "largest |λ| below the peripheral set of the Ulam operator", "exponential rate of decay of correlations"),
];

pub fn lookup(name: &str) -> Option<&'static ExplainEntry> {
    EXPLAIN.iter().find(|e| e.name.eq_ignore_ascii_case(name))
}

/// Runs `config` and returns the artifacts written.
pub fn run(config: RunConfig) -> Result<Vec<PathBuf>, RunError> {
    let mut session = Session::new(config);
    session.run()?;
    Ok(session.written)
}

