//! Semidefinite feasibility over structured matrix variables.
//!
//! Each constraint is an affine map from the variables to a symmetric
//! matrix. Strict constraints `G ≻ 0` are handled as `G ⪰ t I` with the
//! common margin `t` maximized by a log-barrier interior-point method; a
//! solution is only reported feasible after [`certify`] re-evaluates every
//! map at the returned point.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Mat};

/// Required minimum eigenvalue of every strict constraint.
pub const MARGIN_MIN: f64 = 1e-7;
/// Allowed violation of non-strict constraints.
pub const TOL_PSD: f64 = 1e-6;
/// Bound on the magnitude of every free entry.
pub const R_BOX: f64 = 1e6;
/// Accepted line-search steps shorter than this end the centering phase.
const MIN_USEFUL_STEP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("problem has no decision variables")]
    NoVariables,
    #[error("malformed problem: {0}")]
    MalformedProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VarKind {
    Symmetric,
    Rectangular,
}

/// A matrix variable. Entries where `mask` is false are fixed at zero; a
/// symmetric variable's mask must itself be symmetric and only its upper
/// triangle is free.
#[derive(Debug, Clone)]
pub struct LmiVariable {
    pub name: String,
    pub kind: VarKind,
    pub mask: DMatrix<bool>,
}

impl LmiVariable {
    pub fn rows(&self) -> usize {
        self.mask.nrows()
    }
    pub fn cols(&self) -> usize {
        self.mask.ncols()
    }

    fn free_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for c in 0..self.cols() {
            for r in 0..self.rows() {
                let upper_ok = self.kind == VarKind::Rectangular || r <= c;
                if upper_ok && self.mask[(r, c)] {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sense {
    /// `G ≻ 0`
    PosDef,
    /// `G ⪰ 0`
    PosSemidef,
    /// `G ≺ 0`
    NegDef,
    /// `G ⪯ 0`
    NegSemidef,
}

impl Sense {
    pub fn is_strict(self) -> bool {
        matches!(self, Sense::PosDef | Sense::NegDef)
    }
    fn sign(self) -> f64 {
        match self {
            Sense::PosDef | Sense::PosSemidef => 1.0,
            Sense::NegDef | Sense::NegSemidef => -1.0,
        }
    }
}

pub type AffineMap = Box<dyn Fn(&Assignment) -> Mat + Send + Sync>;

pub struct LmiConstraint {
    pub name: String,
    pub sense: Sense,
    map: AffineMap,
}

impl LmiConstraint {
    pub fn eval(&self, x: &Assignment) -> Mat {
        (self.map)(x)
    }
}

impl std::fmt::Debug for LmiConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmiConstraint").field("name", &self.name).field("sense", &self.sense).finish()
    }
}

/// Values of all variables, indexed by [`VarId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    values: Vec<Mat>,
}

impl Assignment {
    pub fn new(values: Vec<Mat>) -> Self {
        Self { values }
    }
    pub fn get(&self, id: VarId) -> &Mat {
        &self.values[id.0]
    }
    pub fn set(&mut self, id: VarId, value: Mat) {
        self.values[id.0] = value;
    }
    pub fn values(&self) -> &[Mat] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub margin_min: f64,
    pub tol_psd: f64,
    pub r_box: f64,
    /// Cap on Newton steps summed over all outer iterations.
    pub max_newton: usize,
    /// Barrier weight multiplier between centering steps.
    pub mu: f64,
    /// Duality-gap target, relative to `max(1, |t|)`.
    pub gap_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { margin_min: MARGIN_MIN, tol_psd: TOL_PSD, r_box: R_BOX, max_newton: 4000, mu: 10.0, gap_tol: 1e-8 }
    }
}

#[derive(Debug, Default)]
pub struct LmiProblem {
    vars: Vec<LmiVariable>,
    constraints: Vec<LmiConstraint>,
    pub options: SolverOptions,
}

impl LmiProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variables(&self) -> &[LmiVariable] {
        &self.vars
    }

    pub fn constraints(&self) -> &[LmiConstraint] {
        &self.constraints
    }

    pub fn add_symmetric(&mut self, name: &str, n: usize) -> VarId {
        self.add_symmetric_masked(name, DMatrix::from_element(n, n, true))
    }

    pub fn add_symmetric_masked(&mut self, name: &str, mask: DMatrix<bool>) -> VarId {
        self.vars.push(LmiVariable { name: name.to_string(), kind: VarKind::Symmetric, mask });
        VarId(self.vars.len() - 1)
    }

    pub fn add_rectangular(&mut self, name: &str, rows: usize, cols: usize) -> VarId {
        self.add_rectangular_masked(name, DMatrix::from_element(rows, cols, true))
    }

    pub fn add_rectangular_masked(&mut self, name: &str, mask: DMatrix<bool>) -> VarId {
        self.vars.push(LmiVariable { name: name.to_string(), kind: VarKind::Rectangular, mask });
        VarId(self.vars.len() - 1)
    }

    pub fn add_constraint<F>(&mut self, name: &str, sense: Sense, map: F)
    where
        F: Fn(&Assignment) -> Mat + Send + Sync + 'static,
    {
        self.constraints.push(LmiConstraint { name: name.to_string(), sense, map: Box::new(map) });
    }

    pub fn zero_assignment(&self) -> Assignment {
        Assignment::new(self.vars.iter().map(|v| Mat::zeros(v.rows(), v.cols())).collect())
    }

    fn free_index(&self) -> Vec<(usize, usize, usize)> {
        let mut idx = Vec::new();
        for (k, v) in self.vars.iter().enumerate() {
            for (r, c) in v.free_entries() {
                idx.push((k, r, c));
            }
        }
        idx
    }

    fn assignment_from(&self, idx: &[(usize, usize, usize)], x: &[f64]) -> Assignment {
        let mut a = self.zero_assignment();
        for (&(k, r, c), &val) in idx.iter().zip(x) {
            a.values[k][(r, c)] = val;
            if self.vars[k].kind == VarKind::Symmetric {
                a.values[k][(c, r)] = val;
            }
        }
        a
    }

    /// JSON-ready description of the problem and, optionally, a solution.
    pub fn dump(&self, solution: Option<&LmiSolution>) -> ProblemDump {
        let zero = self.zero_assignment();
        ProblemDump {
            variables: self
                .vars
                .iter()
                .map(|v| VariableDump {
                    name: v.name.clone(),
                    kind: v.kind,
                    rows: v.rows(),
                    cols: v.cols(),
                    free_entries: v.free_entries().len(),
                })
                .collect(),
            constraints: self
                .constraints
                .iter()
                .map(|c| ConstraintDump { name: c.name.clone(), sense: c.sense, size: c.eval(&zero).nrows() })
                .collect(),
            status: solution.map(|s| s.status),
            termination: solution.map(|s| s.termination),
            margins: solution.map(|s| s.report.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VariableDump {
    pub name: String,
    pub kind: VarKind,
    pub rows: usize,
    pub cols: usize,
    pub free_entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintDump {
    pub name: String,
    pub sense: Sense,
    pub size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProblemDump {
    pub variables: Vec<VariableDump>,
    pub constraints: Vec<ConstraintDump>,
    pub status: Option<LmiStatus>,
    pub termination: Option<Termination>,
    pub margins: Option<MarginReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LmiStatus {
    Feasible,
    NumericallyInfeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    /// Duality gap closed.
    Converged,
    /// The barrier bound proved the best margin lies below `margin_min`.
    MarginBound,
    IterationLimit,
    /// Centering could only take vanishing steps; the margin is as accurate
    /// as floating point allows at the last barrier weight.
    PrecisionLimit,
    /// Line search could not make progress.
    Stalled,
    /// The solver's margin passed but re-evaluation did not.
    CertificationFailed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintMargin {
    pub name: String,
    pub strict: bool,
    pub size: usize,
    /// Smallest eigenvalue after sign adjustment toward `⪰ 0`.
    pub min_eig: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginReport {
    pub constraints: Vec<ConstraintMargin>,
    /// Minimum over strict constraints, `None` when there are none.
    pub margin: Option<f64>,
    pub feasible: bool,
}

impl MarginReport {
    pub fn margin_or_inf(&self) -> f64 {
        self.margin.unwrap_or(f64::INFINITY)
    }

    pub fn min_eig(&self, name: &str) -> Option<f64> {
        self.constraints.iter().find(|c| c.name == name).map(|c| c.min_eig)
    }
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub assignment: Assignment,
    /// Certified margin (see [`MarginReport::margin`]); `-inf` never occurs,
    /// `+inf` when the problem has no strict constraint.
    pub margin: f64,
    /// Margin variable `t` at the last iterate.
    pub solver_margin: f64,
    pub status: LmiStatus,
    pub termination: Termination,
    pub newton_steps: usize,
    pub report: MarginReport,
}

impl LmiSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == LmiStatus::Feasible
    }
}

/// Re-evaluates every constraint at `x` and reports sign-adjusted minimum
/// eigenvalues. Nothing from a solver run is reused.
pub fn certify(x: &Assignment, problem: &LmiProblem) -> MarginReport {
    let opts = &problem.options;
    let mut constraints = Vec::with_capacity(problem.constraints.len());
    let mut margin: Option<f64> = None;
    let mut feasible = true;
    for c in &problem.constraints {
        let g = c.eval(x) * c.sense.sign();
        let min_eig = if g.nrows() == 0 {
            f64::INFINITY
        } else if g.iter().all(|v| v.is_finite()) {
            linalg::min_sym_eigenvalue(&linalg::symmetrize(&g))
        } else {
            f64::NEG_INFINITY
        };
        let strict = c.sense.is_strict();
        let satisfied = if strict { min_eig >= opts.margin_min } else { min_eig >= -opts.tol_psd };
        feasible &= satisfied;
        if strict {
            margin = Some(margin.map_or(min_eig, |m: f64| m.min(min_eig)));
        }
        constraints.push(ConstraintMargin { name: c.name.clone(), strict, size: g.nrows(), min_eig, satisfied });
    }
    MarginReport { constraints, margin, feasible }
}

static FEASIBLE_VERDICTS: AtomicUsize = AtomicUsize::new(0);
static UNCERTIFIED_VERDICTS: AtomicUsize = AtomicUsize::new(0);

/// Process-wide tally of `Feasible` verdicts and of those that failed the
/// factorization audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AuditCounts {
    pub feasible: usize,
    pub uncertified: usize,
}

pub fn audit_counts() -> AuditCounts {
    AuditCounts {
        feasible: FEASIBLE_VERDICTS.load(Ordering::SeqCst),
        uncertified: UNCERTIFIED_VERDICTS.load(Ordering::SeqCst),
    }
}

/// Eigenvalue-free check of an assignment: strict blocks must admit a
/// Cholesky factor of `G - margin_min/2 I`, non-strict ones of `G + tol_psd I`.
pub fn cholesky_audit(x: &Assignment, problem: &LmiProblem) -> bool {
    let opts = &problem.options;
    problem.constraints.iter().all(|c| {
        let g = linalg::symmetrize(&(c.eval(x) * c.sense.sign()));
        let n = g.nrows();
        if n == 0 {
            return true;
        }
        let shift = if c.sense.is_strict() { -0.5 * opts.margin_min } else { opts.tol_psd };
        g.iter().all(|v| v.is_finite()) && Cholesky::new(g + Mat::identity(n, n) * shift).is_some()
    })
}

/// Sign-adjusted affine pieces of one constraint: `G(x) = g0 + Σ x_a G_a`.
struct Standardized {
    size: usize,
    strict: bool,
    g0: Mat,
    /// (free index, coefficient matrix) for variables that appear.
    terms: Vec<(usize, Mat)>,
}

fn extract(problem: &LmiProblem, idx: &[(usize, usize, usize)]) -> Result<Vec<Standardized>, LmiError> {
    let nx = idx.len();
    let zero = problem.zero_assignment();
    let mut out = Vec::with_capacity(problem.constraints.len());
    for c in &problem.constraints {
        let sign = c.sense.sign();
        let g0 = c.eval(&zero) * sign;
        if !g0.is_square() {
            return Err(LmiError::MalformedProblem(format!(
                "constraint '{}' is {}x{}, not square",
                c.name,
                g0.nrows(),
                g0.ncols()
            )));
        }
        check_symmetric(&c.name, &g0)?;
        let mut terms = Vec::new();
        let mut unit = vec![0.0; nx];
        for a in 0..nx {
            unit[a] = 1.0;
            let ga = c.eval(&problem.assignment_from(idx, &unit)) * sign;
            unit[a] = 0.0;
            if ga.shape() != g0.shape() {
                return Err(LmiError::MalformedProblem(format!("constraint '{}' changes shape", c.name)));
            }
            let d = ga - &g0;
            check_symmetric(&c.name, &d)?;
            if d.iter().any(|&v| v != 0.0) {
                terms.push((a, linalg::symmetrize(&d)));
            }
        }
        out.push(Standardized { size: g0.nrows(), strict: c.sense.is_strict(), g0: linalg::symmetrize(&g0), terms });
    }
    spot_test_affinity(problem, idx, &out)?;
    Ok(out)
}

fn check_symmetric(name: &str, m: &Mat) -> Result<(), LmiError> {
    let asym = (m - m.transpose()).norm();
    if !asym.is_finite() || asym > 1e-9 * (1.0 + m.norm()) {
        return Err(LmiError::MalformedProblem(format!("constraint '{name}' is not symmetric")));
    }
    Ok(())
}

fn spot_test_affinity(problem: &LmiProblem, idx: &[(usize, usize, usize)], std: &[Standardized]) -> Result<(), LmiError> {
    let nx = idx.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..2 {
        let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..nx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let ax = problem.assignment_from(idx, &x);
        let ay = problem.assignment_from(idx, &y);
        let axy = problem.assignment_from(idx, &xy);
        let zero = problem.zero_assignment();
        for (c, s) in problem.constraints.iter().zip(std) {
            let fx = c.eval(&ax);
            let fy = c.eval(&ay);
            let fxy = c.eval(&axy);
            let f0 = c.eval(&zero);
            let scale = 1.0 + fx.norm() + fy.norm() + fxy.norm() + f0.norm();
            let additive = (&fxy - &fx - &fy + &f0).norm();
            let mut recon = s.g0.clone();
            for (a, ga) in &s.terms {
                recon += ga * x[*a];
            }
            let recon_err = (recon - fx * c.sense.sign()).norm();
            if !(additive <= 1e-9 * scale && recon_err <= 1e-9 * scale) {
                return Err(LmiError::MalformedProblem(format!("constraint '{}' is not affine", c.name)));
            }
        }
    }
    Ok(())
}

struct Barrier<'a> {
    std: &'a [Standardized],
    nx: usize,
    tol_psd: f64,
    r_box: f64,
}

impl Barrier<'_> {
    fn slack(&self, s: &Standardized, z: &[f64]) -> Mat {
        let t = z[self.nx];
        let shift = if s.strict { -t } else { self.tol_psd - t };
        let mut m = s.g0.clone();
        for (a, ga) in &s.terms {
            m += ga * z[*a];
        }
        for i in 0..s.size {
            m[(i, i)] += shift;
        }
        m
    }

    fn box_ok(&self, z: &[f64]) -> bool {
        z[..self.nx].iter().all(|x| x.abs() < self.r_box) && z[self.nx] < self.r_box
    }

    /// `-η t - Σ log det S_j - box terms`, or `None` outside the domain.
    fn value(&self, z: &[f64], eta: f64) -> Option<f64> {
        if !self.box_ok(z) {
            return None;
        }
        let t = z[self.nx];
        let mut phi = -eta * t - (self.r_box - t).ln();
        for x in &z[..self.nx] {
            phi -= (self.r_box - x).ln() + (self.r_box + x).ln();
        }
        for s in self.std {
            if s.size == 0 {
                continue;
            }
            let ch = Cholesky::new(self.slack(s, z))?;
            let logdet: f64 = ch.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            phi -= logdet;
        }
        phi.is_finite().then_some(phi)
    }

    fn grad_hess(&self, z: &[f64], eta: f64) -> Option<(DVector<f64>, Mat)> {
        let n = self.nx + 1;
        let ti = self.nx;
        let mut g = DVector::zeros(n);
        let mut h = Mat::zeros(n, n);
        let t = z[ti];
        g[ti] = -eta + 1.0 / (self.r_box - t);
        h[(ti, ti)] = 1.0 / (self.r_box - t).powi(2);
        for a in 0..self.nx {
            let (up, lo) = (self.r_box - z[a], self.r_box + z[a]);
            g[a] = 1.0 / up - 1.0 / lo;
            h[(a, a)] = 1.0 / (up * up) + 1.0 / (lo * lo);
        }
        for s in self.std {
            if s.size == 0 {
                continue;
            }
            let ch = Cholesky::new(self.slack(s, z))?;
            let l = ch.l();
            let whiten = |m: &Mat| -> Mat {
                let left = l.solve_lower_triangular(m).expect("cholesky factor is nonsingular");
                l.solve_lower_triangular(&left.transpose()).expect("cholesky factor is nonsingular").transpose()
            };
            let mut ids: Vec<usize> = s.terms.iter().map(|(a, _)| *a).collect();
            let mut ws: Vec<Mat> = s.terms.iter().map(|(_, ga)| whiten(ga)).collect();
            ids.push(ti);
            ws.push(-whiten(&Mat::identity(s.size, s.size)));
            for (p, wp) in ws.iter().enumerate() {
                g[ids[p]] -= wp.trace();
                for q in 0..=p {
                    let v = wp.dot(&ws[q]);
                    h[(ids[p], ids[q])] += v;
                    if p != q {
                        h[(ids[q], ids[p])] += v;
                    }
                }
            }
        }
        Some((g, h))
    }
}

fn newton_direction(g: &DVector<f64>, h: &Mat) -> Option<DVector<f64>> {
    if let Some(ch) = Cholesky::<f64, Dyn>::new(h.clone()) {
        let d = ch.solve(&(-g));
        if d.iter().all(|v| v.is_finite()) {
            return Some(d);
        }
    }
    let n = h.nrows();
    let reg = 1e-12 * (1.0 + h.diagonal().amax());
    let d = (h + Mat::identity(n, n) * reg).lu().solve(&(-g))?;
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Maximizes the common strict margin. The result is `Feasible` exactly
/// when [`certify`] accepts the returned assignment.
pub fn solve_feasibility(problem: &LmiProblem) -> Result<LmiSolution, LmiError> {
    let idx = problem.free_index();
    if idx.is_empty() {
        return Err(LmiError::NoVariables);
    }
    let std = extract(problem, &idx)?;
    let opts = problem.options;
    let nx = idx.len();
    let barrier = Barrier { std: &std, nx, tol_psd: opts.tol_psd, r_box: opts.r_box };

    let mut z = vec![0.0; nx + 1];
    let start = std
        .iter()
        .filter(|s| s.size > 0)
        .map(|s| {
            let lam = linalg::min_sym_eigenvalue(&s.g0);
            if s.strict { lam } else { lam + opts.tol_psd }
        })
        .fold(f64::INFINITY, f64::min);
    z[nx] = if start.is_finite() { start - 1.0 } else { 0.0 };
    z[nx] = z[nx].min(opts.r_box * 0.5);

    let nu: f64 = std.iter().map(|s| s.size as f64).sum::<f64>() + 2.0 * nx as f64 + 1.0;
    let mut eta = 1.0;
    let mut steps = 0usize;
    let termination = 'outer: loop {
        let mut precision_limited = false;
        // Centering.
        loop {
            if steps >= opts.max_newton {
                break 'outer Termination::IterationLimit;
            }
            let Some((g, h)) = barrier.grad_hess(&z, eta) else {
                break 'outer Termination::Stalled;
            };
            let Some(dz) = newton_direction(&g, &h) else {
                break 'outer Termination::Stalled;
            };
            steps += 1;
            let decrement = -g.dot(&dz);
            if decrement <= 1e-10 {
                break;
            }
            let phi0 = barrier.value(&z, eta).expect("iterate stays in the domain");
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-14 {
                let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, d)| a + alpha * d).collect();
                if let Some(phi) = barrier.value(&trial, eta) {
                    if phi <= phi0 - 0.25 * alpha * decrement {
                        z = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Already centered to machine precision for this weight.
                if decrement < 1e-6 {
                    break;
                }
                break 'outer Termination::Stalled;
            }
            if alpha < MIN_USEFUL_STEP {
                precision_limited = true;
                break;
            }
        }
        let t = z[nx];
        let gap = nu / eta;
        if t + gap < opts.margin_min {
            break Termination::MarginBound;
        }
        if gap <= opts.gap_tol * t.abs().max(1.0) {
            break Termination::Converged;
        }
        if precision_limited {
            break Termination::PrecisionLimit;
        }
        eta *= opts.mu;
    };

    let assignment = problem.assignment_from(&idx, &z[..nx]);
    let report = certify(&assignment, problem);
    let t = z[nx];
    let (status, termination) = if report.feasible {
        FEASIBLE_VERDICTS.fetch_add(1, Ordering::SeqCst);
        if !cholesky_audit(&assignment, problem) {
            UNCERTIFIED_VERDICTS.fetch_add(1, Ordering::SeqCst);
            log::warn!("lmi: feasible verdict failed the factorization audit");
        }
        (LmiStatus::Feasible, termination)
    } else if t >= opts.margin_min && matches!(termination, Termination::Converged | Termination::PrecisionLimit) {
        (LmiStatus::NumericallyInfeasible, Termination::CertificationFailed)
    } else {
        (LmiStatus::NumericallyInfeasible, termination)
    };
    log::debug!(
        "lmi: {} vars, {} constraints, t = {t:.3e}, {steps} newton steps, {status:?} ({termination:?})",
        nx,
        std.len()
    );
    Ok(LmiSolution {
        margin: report.margin_or_inf(),
        assignment,
        solver_margin: t,
        status,
        termination,
        newton_steps: steps,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    #[test]
    fn interval_feasibility() {
        let mut p = LmiProblem::new();
        let x = p.add_symmetric("x", 1);
        p.add_constraint("lower", Sense::PosDef, move |a| a.get(x).add_scalar(-1.0));
        p.add_constraint("upper", Sense::PosDef, move |a| scalar(2.0) - a.get(x));
        let sol = solve_feasibility(&p).unwrap();
        assert!(sol.is_feasible());
        let v = sol.assignment.get(x)[(0, 0)];
        assert!(v > 1.0 && v < 2.0);
        assert!((v - 1.5).abs() < 1e-6);
        assert!((sol.margin - 0.5).abs() < 1e-6);
    }

    #[test]
    fn empty_interval_is_infeasible() {
        let mut p = LmiProblem::new();
        let x = p.add_symmetric("x", 1);
        p.add_constraint("lower", Sense::PosDef, move |a| a.get(x).add_scalar(-2.0));
        p.add_constraint("upper", Sense::NegDef, move |a| a.get(x).add_scalar(-1.0));
        let sol = solve_feasibility(&p).unwrap();
        assert_eq!(sol.status, LmiStatus::NumericallyInfeasible);
        assert!(sol.solver_margin <= 0.0);
    }

    #[test]
    fn zero_assignment_fails_strict_positivity() {
        let mut p = LmiProblem::new();
        let x = p.add_symmetric("P", 3);
        p.add_constraint("P", Sense::PosDef, move |a| a.get(x).clone());
        let r = certify(&p.zero_assignment(), &p);
        assert_eq!(r.margin, Some(0.0));
        assert!(!r.feasible);
    }

    #[test]
    fn lyapunov_feasible_iff_schur() {
        for (a, expect) in [(0.9, true), (1.1, false)] {
            let am = Mat::from_row_slice(2, 2, &[a, 1.0, 0.0, 0.5]);
            let mut p = LmiProblem::new();
            let x = p.add_symmetric("P", 2);
            p.add_constraint("P", Sense::PosDef, move |s| s.get(x).clone());
            p.add_constraint("stein", Sense::NegDef, move |s| &am * s.get(x) * am.transpose() - s.get(x));
            let sol = solve_feasibility(&p).unwrap();
            assert_eq!(sol.is_feasible(), expect, "a = {a}");
        }
    }

    #[test]
    fn masked_entries_stay_zero() {
        let mut mask = DMatrix::from_element(3, 3, true);
        for (r, c) in [(0, 2), (2, 0), (1, 2), (2, 1)] {
            mask[(r, c)] = false;
        }
        let mut p = LmiProblem::new();
        let x = p.add_symmetric_masked("P", mask);
        let a = Mat::from_row_slice(3, 3, &[0.5, 0.2, 0.1, 0.0, 0.3, 0.4, 0.1, 0.0, 0.2]);
        p.add_constraint("P", Sense::PosDef, move |s| s.get(x).clone());
        p.add_constraint("stein", Sense::NegDef, move |s| &a * s.get(x) * a.transpose() - s.get(x));
        let sol = solve_feasibility(&p).unwrap();
        assert!(sol.is_feasible());
        let v = sol.assignment.get(x);
        assert_eq!(v[(0, 2)], 0.0);
        assert_eq!(v[(2, 1)], 0.0);
    }

    #[test]
    fn adding_a_constraint_does_not_raise_the_margin() {
        let build = |extra: bool| {
            let mut p = LmiProblem::new();
            let x = p.add_symmetric("x", 2);
            p.add_constraint("box", Sense::PosDef, move |a| Mat::identity(2, 2) * 3.0 - a.get(x));
            p.add_constraint("pos", Sense::PosDef, move |a| a.get(x).clone());
            if extra {
                p.add_constraint("cut", Sense::PosDef, move |a| scalar(1.0 - a.get(x)[(0, 0)]));
            }
            solve_feasibility(&p).unwrap().solver_margin
        };
        let loose = build(false);
        let tight = build(true);
        assert!(tight <= loose + 1e-9, "{tight} > {loose}");
    }

    #[test]
    fn non_affine_map_is_rejected() {
        let mut p = LmiProblem::new();
        let x = p.add_symmetric("x", 1);
        p.add_constraint("square", Sense::PosDef, move |a| a.get(x) * a.get(x));
        assert!(matches!(solve_feasibility(&p), Err(LmiError::MalformedProblem(_))));
    }

    #[test]
    fn asymmetric_map_is_rejected() {
        let mut p = LmiProblem::new();
        let x = p.add_rectangular("y", 1, 1);
        p.add_constraint("skew", Sense::PosDef, move |a| {
            Mat::from_row_slice(2, 2, &[1.0, a.get(x)[(0, 0)], 0.0, 1.0])
        });
        assert!(matches!(solve_feasibility(&p), Err(LmiError::MalformedProblem(_))));
    }

    #[test]
    fn non_strict_equality_is_attainable() {
        // x ⪰ 1 and x ⪯ 1 pin x, and the strict constraint stays loose.
        let mut p = LmiProblem::new();
        let x = p.add_symmetric("x", 1);
        p.add_constraint("ge", Sense::PosSemidef, move |a| a.get(x).add_scalar(-1.0));
        p.add_constraint("le", Sense::NegSemidef, move |a| a.get(x).add_scalar(-1.0));
        p.add_constraint("pos", Sense::PosDef, move |a| a.get(x).clone());
        let sol = solve_feasibility(&p).unwrap();
        assert!(sol.is_feasible());
        assert!((sol.assignment.get(x)[(0, 0)] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rectangular_variable_in_schur_complement() {
        // [[1, y], [y, 1]] ≻ 0 and y ⪰ 0.5 strictly.
        let mut p = LmiProblem::new();
        let y = p.add_rectangular("y", 1, 1);
        p.add_constraint("schur", Sense::PosDef, move |a| {
            let v = a.get(y)[(0, 0)];
            Mat::from_row_slice(2, 2, &[1.0, v, v, 1.0])
        });
        p.add_constraint("floor", Sense::PosDef, move |a| a.get(y).add_scalar(-0.5));
        let sol = solve_feasibility(&p).unwrap();
        assert!(sol.is_feasible());
        let v = sol.assignment.get(y)[(0, 0)];
        assert!(v > 0.5 && v < 1.0);
    }

    #[test]
    fn no_variables_is_an_error() {
        let p = LmiProblem::new();
        assert_eq!(solve_feasibility(&p).unwrap_err(), LmiError::NoVariables);
    }

    #[test]
    fn dump_lists_shapes() {
        let mut p = LmiProblem::new();
        let x = p.add_symmetric("P", 2);
        p.add_constraint("P", Sense::PosDef, move |a| a.get(x).clone());
        let sol = solve_feasibility(&p).unwrap();
        let d = p.dump(Some(&sol));
        assert_eq!(d.variables[0].free_entries, 3);
        assert_eq!(d.constraints[0].size, 2);
        assert!(serde_json::to_string(&d).unwrap().contains("\"Feasible\""));
    }
}
