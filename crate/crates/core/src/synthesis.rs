//! Gain synthesis: structured global LMI, agent-wise local LMI (`D_i = 0`),
//! the agent-wise certificate for a given gain, and per-agent Riccati design
//! on acyclic graphs.

use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::{
    self, bordered_mask, gain_mask, AssemblyError, Dims, GainSet, GlobalAssembly, LocalAssembly,
};
use crate::graph::{self, AugmentedGraph, GraphMatrices, TopologicalOrder};
use crate::linalg::{self, Mat};
use crate::lmi::{self, LmiError, LmiProblem, LmiSolution, MarginReport, Sense, VarId};
use crate::verification::{self, SCHUR_TOL};

/// Riccati iteration stops when successive iterates differ by less than this.
pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITER: usize = 200;
/// Tolerance of the acyclic spectrum identity.
pub const SPECTRUM_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("LMI numerically infeasible (best margin {margin:.3e})")]
    NumericallyInfeasible { margin: f64 },
    #[error("local LMI numerically infeasible for agents {agents:?}")]
    LocalInfeasible { agents: Vec<usize>, margins: Vec<f64> },
    #[error("agent {0} has D_i != 0; use the certificate check for a given gain instead")]
    NonzeroD(usize),
    #[error("agent {agent}: r_i = {r} is below the threshold {threshold}")]
    BadThreshold { agent: usize, r: f64, threshold: f64 },
    #[error("decay rate must lie in (0, 1], got {0}")]
    BadRate(f64),
    #[error("follower graph has a directed cycle")]
    GraphHasCycle,
    #[error("Riccati iteration diverged for agent {0} (pair not stabilizable)")]
    RiccatiDiverged(usize),
    #[error("recovered gains give spectral radius {0} (not Schur)")]
    NotSchur(f64),
    #[error("expected {expected} coupling weights, got {found}")]
    WeightCount { expected: usize, found: usize },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Indices of agent `i`'s rows in `x_g`.
fn agent_index(dims: &Dims, i: usize) -> Vec<usize> {
    (dims.x_offset(i)..dims.x_offset(i) + dims.n[i]).chain(dims.z_offset(i)..dims.z_offset(i) + dims.nz).collect()
}

fn submatrix(m: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

#[derive(Debug, Clone)]
pub struct GlobalSynthesisResult {
    pub q: Mat,
    pub y: Mat,
    pub gains: GainSet,
    pub lmi_margin: f64,
    pub spectral_radius: f64,
    /// `||Y - K Q||_F / max(1, ||Y||_F)`
    pub recovery_residual: f64,
    pub solution: LmiSolution,
}

/// `[-Q, AQ + BY; (AQ + BY)^T, -Q] ≺ 0` over bordered `Q ≻ 0` and block `Y`,
/// normalized by `Q ⪯ I` since the inequality is homogeneous in `(Q, Y)`.
pub fn global_problem(ga: &GlobalAssembly) -> (LmiProblem, VarId, VarId) {
    let dims = &ga.dims;
    let mut prob = LmiProblem::new();
    let q = prob.add_symmetric_masked("Q", bordered_mask(dims));
    let y = prob.add_rectangular_masked("Y", gain_mask(dims));
    prob.add_constraint("Q", Sense::PosDef, move |s| s.get(q).clone());
    let nq = ga.a.nrows();
    prob.add_constraint("scale", Sense::PosSemidef, move |s| Mat::identity(nq, nq) - s.get(q));
    let (a, b) = (ga.a.clone(), ga.b.clone());
    prob.add_constraint("lyapunov", Sense::NegDef, move |s| {
        let qv = s.get(q);
        let off = &a * qv + &b * s.get(y);
        linalg::block2(&(-qv), &off, &off.transpose(), &(-qv))
    });
    (prob, q, y)
}

/// Per-agent recovery `[K1_i K2_i] = [Y1_i Y2_i] [Q1_i Qo_i; Qo_i^T Q2_i]^{-1}`.
pub fn recover_gains(dims: &Dims, q: &Mat, y: &Mat) -> Result<GainSet, SynthesisError> {
    let mut ks = Vec::with_capacity(dims.n_agents());
    for i in 0..dims.n_agents() {
        let idx = agent_index(dims, i);
        let rows: Vec<usize> = (dims.u_offset(i)..dims.u_offset(i) + dims.m[i]).collect();
        let qi = submatrix(q, &idx, &idx);
        let yi = submatrix(y, &rows, &idx);
        // K_i Q_i = Y_i  <=>  Q_i K_i^T = Y_i^T
        let kt = linalg::solve(&qi, &yi.transpose())?;
        ks.push(kt.transpose());
    }
    Ok(GainSet::from_local(&ks, dims)?)
}

pub fn synthesize_global(ga: &GlobalAssembly) -> Result<GlobalSynthesisResult, SynthesisError> {
    let (prob, qv, yv) = global_problem(ga);
    let sol = lmi::solve_feasibility(&prob)?;
    if !sol.is_feasible() {
        return Err(SynthesisError::NumericallyInfeasible { margin: sol.solver_margin });
    }
    let q = sol.assignment.get(qv).clone();
    let y = sol.assignment.get(yv).clone();
    let gains = recover_gains(&ga.dims, &q, &y)?;
    let kd = gains.to_dense(&ga.dims)?;
    let recovery_residual = (&y - &kd * &q).norm() / y.norm().max(1.0);
    let cl = assembly::closed_loop(ga, &gains)?;
    let (schur, radius) = verification::is_schur(&cl.a_g);
    if !schur {
        return Err(SynthesisError::NotSchur(radius));
    }
    Ok(GlobalSynthesisResult {
        q,
        y,
        gains,
        lmi_margin: sol.margin,
        spectral_radius: radius,
        recovery_residual,
        solution: sol,
    })
}

fn check_weights(r: &[f64], gm: &GraphMatrices, n: usize) -> Result<(), SynthesisError> {
    if r.len() != n {
        return Err(SynthesisError::WeightCount { expected: n, found: r.len() });
    }
    for (i, &ri) in r.iter().enumerate() {
        if !(ri >= gm.r_threshold * (1.0 - 1e-12)) {
            return Err(SynthesisError::BadThreshold { agent: i, r: ri, threshold: gm.r_threshold });
        }
    }
    Ok(())
}

/// Variables of one agent's local synthesis problem.
#[derive(Debug, Clone, Copy)]
pub struct LocalVars {
    pub p: VarId,
    pub y: VarId,
    pub theta: VarId,
}

/// One agent's convex program for `D_i = 0`:
/// `[Θ Y; Y^T P] ⪰ 0`, `[Ω, (A_o P + B_o Y) C_o^T; ·, -I] ≺ 0`,
/// `σ_min I ⪯ C_o P C_o^T ⪯ σ_max I`, `P ≻ 0`.
pub fn local_problem(la: &LocalAssembly, r: f64, gm: &GraphMatrices) -> (LmiProblem, LocalVars) {
    local_problem_capped(la, r, gm, None)
}

/// Caps tried in order by the local synthesis before the unbounded problem.
pub const P_CAPS: [f64; 8] = [1.0, 3.0, 10.0, 30.0, 100.0, 1e3, 1e4, 1e5];

/// [`local_problem`] with the extra constraint `P ⪯ cap I`. Without it the
/// feasible set is unbounded along the internal-model block of `P`, and
/// large `P_zz` drives the recovered `K_2i` to zero.
pub fn local_problem_capped(
    la: &LocalAssembly,
    r: f64,
    gm: &GraphMatrices,
    cap: Option<f64>,
) -> (LmiProblem, LocalVars) {
    let (nn, m, p) = (la.size(), la.m(), la.p());
    let mut prob = LmiProblem::new();
    let pv = prob.add_symmetric("P", nn);
    let yv = prob.add_rectangular("Y", m, nn);
    let tv = prob.add_symmetric("Theta", m);
    prob.add_constraint("P", Sense::PosDef, move |s| s.get(pv).clone());
    prob.add_constraint("theta", Sense::PosSemidef, move |s| {
        let y = s.get(yv);
        linalg::block2(s.get(tv), y, &y.transpose(), s.get(pv))
    });
    let (ao, bo, bf, co) = (la.a_o.clone(), la.b_o.clone(), la.b_f.clone(), la.c_o.clone());
    prob.add_constraint("omega", Sense::NegDef, move |s| {
        let (pm, y, th) = (s.get(pv), s.get(yv), s.get(tv));
        let by = &bo * y;
        let omega = &ao * pm * ao.transpose() + &by * ao.transpose() + &ao * by.transpose()
            + &bo * th * bo.transpose()
            - pm
            + &bf * bf.transpose() * r
            + &bf * &co * pm * co.transpose() * bf.transpose() * r;
        let off = (&ao * pm + &by) * co.transpose();
        linalg::block2(&omega, &off, &off.transpose(), &(-Mat::identity(p, p)))
    });
    let (co_l, co_u) = (la.c_o.clone(), la.c_o.clone());
    let (smin, smax) = (gm.sigma_min_nz, gm.sigma_max);
    prob.add_constraint("sigma_min", Sense::PosSemidef, move |s| {
        &co_l * s.get(pv) * co_l.transpose() - Mat::identity(p, p) * smin
    });
    prob.add_constraint("sigma_max", Sense::PosSemidef, move |s| {
        Mat::identity(p, p) * smax - &co_u * s.get(pv) * co_u.transpose()
    });
    if let Some(cap) = cap {
        prob.add_constraint("cap", Sense::PosSemidef, move |s| Mat::identity(nn, nn) * cap - s.get(pv));
    }
    (prob, LocalVars { p: pv, y: yv, theta: tv })
}

#[derive(Debug, Clone)]
pub struct LocalAgentResult {
    pub p: Mat,
    pub y: Mat,
    pub theta: Mat,
    pub r: f64,
    pub k: Mat,
    pub margin: f64,
    /// Bound `P ⪯ cap I` that the accepted solution was found under.
    pub p_cap: Option<f64>,
    pub report: MarginReport,
}

#[derive(Debug, Clone)]
pub struct LocalSynthesisResult {
    pub agents: Vec<LocalAgentResult>,
    pub gains: GainSet,
    pub a_g_schur: bool,
    pub spectral_radius: f64,
    /// Certified bound on the spectral radius of `A_g` (1 for the plain synthesis).
    pub rate: f64,
}

/// Per-agent local synthesis. `r` defaults to the graph threshold for every agent.
pub fn synthesize_local(
    ga: &GlobalAssembly,
    la: &[LocalAssembly],
    r: Option<&[f64]>,
) -> Result<LocalSynthesisResult, SynthesisError> {
    synthesize_local_with_rate(ga, la, r, 1.0)
}

/// Local synthesis for the agents scaled by `1 / alpha`. Feasibility
/// certifies that `A_g / alpha` is Schur, so the spectral radius of `A_g` is
/// below `alpha`; `alpha = 1` is the plain synthesis.
pub fn synthesize_local_with_rate(
    ga: &GlobalAssembly,
    la: &[LocalAssembly],
    r: Option<&[f64]>,
    alpha: f64,
) -> Result<LocalSynthesisResult, SynthesisError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SynthesisError::BadRate(alpha));
    }
    let scaled: Vec<LocalAssembly> = la.iter().map(|l| l.scaled(alpha)).collect();
    let la = &scaled[..];
    let gm = &ga.gm;
    let n = la.len();
    if let Some(i) = la.iter().position(|l| l.d.iter().any(|&v| v != 0.0)) {
        return Err(SynthesisError::NonzeroD(i));
    }
    let weights: Vec<f64> = r.map_or_else(|| vec![gm.r_threshold; n], <[f64]>::to_vec);
    check_weights(&weights, gm, n)?;

    let solved: Vec<Result<(LmiSolution, LocalVars, Option<f64>), SynthesisError>> = la
        .par_iter()
        .zip(weights.par_iter())
        .map(|(l, &ri)| {
            let mut last = None;
            for cap in P_CAPS.iter().copied().map(Some).chain([None]) {
                let (prob, vars) = local_problem_capped(l, ri, gm, cap);
                let sol = lmi::solve_feasibility(&prob)?;
                if sol.is_feasible() {
                    return Ok((sol, vars, cap));
                }
                last = Some((sol, vars, cap));
            }
            Ok(last.expect("at least one attempt"))
        })
        .collect();
    let mut agents = Vec::with_capacity(n);
    let mut failed = Vec::new();
    let mut margins = Vec::new();
    for (i, res) in solved.into_iter().enumerate() {
        let (sol, vars, p_cap) = res?;
        margins.push(sol.solver_margin);
        if !sol.is_feasible() {
            failed.push(i);
            continue;
        }
        let pm = sol.assignment.get(vars.p).clone();
        let y = sol.assignment.get(vars.y).clone();
        let k = linalg::solve(&pm, &y.transpose())?.transpose();
        agents.push(LocalAgentResult {
            p_cap,
            theta: sol.assignment.get(vars.theta).clone(),
            p: pm,
            y,
            r: weights[i],
            k,
            margin: sol.margin,
            report: sol.report,
        });
    }
    if !failed.is_empty() {
        return Err(SynthesisError::LocalInfeasible { agents: failed, margins });
    }
    let ks: Vec<Mat> = agents.iter().map(|a| a.k.clone()).collect();
    let gains = GainSet::from_local(&ks, &ga.dims)?;
    let cl = assembly::closed_loop(ga, &gains)?;
    let (a_g_schur, spectral_radius) = verification::is_schur(&cl.a_g);
    Ok(LocalSynthesisResult { agents, gains, a_g_schur, spectral_radius, rate: alpha })
}

/// One agent's certificate problem for a fixed `K_i`: `P ≻ 0`,
/// `[A_f P A_f^T - P + r B_f (I + C_f P C_f^T) B_f^T, A_f P C_f^T; ·, -I] ≺ 0`,
/// `σ_min I ⪯ C_f P C_f^T ⪯ σ_max I`.
pub fn certificate_problem(la: &LocalAssembly, k: &Mat, r: f64, gm: &GraphMatrices) -> (LmiProblem, VarId) {
    let (nn, p) = (la.size(), la.p());
    let af = la.a_f(k);
    let cf = la.c_f(k);
    let bf = la.b_f.clone();
    let mut prob = LmiProblem::new();
    let pv = prob.add_symmetric("P", nn);
    prob.add_constraint("P", Sense::PosDef, move |s| s.get(pv).clone());
    let (af1, cf1) = (af.clone(), cf.clone());
    prob.add_constraint("local", Sense::NegDef, move |s| {
        let pm = s.get(pv);
        let cpc = &cf1 * pm * cf1.transpose();
        let m = &af1 * pm * af1.transpose() - pm + &bf * (Mat::identity(p, p) + cpc) * bf.transpose() * r;
        let off = &af1 * pm * cf1.transpose();
        linalg::block2(&m, &off, &off.transpose(), &(-Mat::identity(p, p)))
    });
    let (cl, cu) = (cf.clone(), cf);
    let (smin, smax) = (gm.sigma_min_nz, gm.sigma_max);
    prob.add_constraint("sigma_min", Sense::PosSemidef, move |s| {
        &cl * s.get(pv) * cl.transpose() - Mat::identity(p, p) * smin
    });
    prob.add_constraint("sigma_max", Sense::PosSemidef, move |s| {
        Mat::identity(p, p) * smax - &cu * s.get(pv) * cu.transpose()
    });
    (prob, pv)
}

#[derive(Debug, Clone)]
pub struct AgentCertificate {
    pub feasible: bool,
    pub margin: f64,
    pub solver_margin: f64,
    pub r: f64,
    pub p: Option<Mat>,
    pub report: MarginReport,
}

/// Global Lyapunov certificate built from the local `P_i`.
#[derive(Debug, Clone)]
pub struct GlobalCertificate {
    /// `T^T diag(P_i) T`
    pub p: Mat,
    /// Off-pattern entries of `p` are exactly zero.
    pub structured: bool,
    /// `-λ_max(A_g P A_g^T - P)`
    pub lyapunov_margin: f64,
    pub min_eig_p: f64,
}

#[derive(Debug, Clone)]
pub struct CertificateReport {
    pub agents: Vec<AgentCertificate>,
    pub all_feasible: bool,
    pub global: Option<GlobalCertificate>,
}

impl CertificateReport {
    /// Local certificates feasible and the assembled Lyapunov inequality strict.
    pub fn passes(&self) -> bool {
        self.all_feasible
            && self.global.as_ref().is_some_and(|g| g.structured && g.lyapunov_margin > 0.0 && g.min_eig_p > 0.0)
    }
}

fn local_dims(la: &[LocalAssembly]) -> Dims {
    Dims {
        n: la.iter().map(|l| l.n).collect(),
        m: la.iter().map(LocalAssembly::m).collect(),
        nz: la.first().map_or(0, |l| l.nz),
        p: la.first().map_or(0, LocalAssembly::p),
    }
}

/// Agent-wise certificate for the given gain; if every agent passes, the
/// global structured Lyapunov matrix is assembled and checked.
pub fn check_certificate(
    la: &[LocalAssembly],
    k: &GainSet,
    gm: &GraphMatrices,
    r: &[f64],
) -> Result<CertificateReport, SynthesisError> {
    let n = la.len();
    check_weights(r, gm, n)?;
    let dims = local_dims(la);
    k.check_dims(&dims)?;
    let agents: Vec<Result<AgentCertificate, SynthesisError>> = la
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let (prob, pv) = certificate_problem(l, &k.local(i), r[i], gm);
            let sol = lmi::solve_feasibility(&prob)?;
            Ok(AgentCertificate {
                feasible: sol.is_feasible(),
                margin: sol.margin,
                solver_margin: sol.solver_margin,
                r: r[i],
                p: sol.is_feasible().then(|| sol.assignment.get(pv).clone()),
                report: sol.report,
            })
        })
        .collect();
    let agents = agents.into_iter().collect::<Result<Vec<_>, _>>()?;
    let all_feasible = agents.iter().all(|a| a.feasible);
    let global = if all_feasible {
        let blocks: Vec<Mat> = agents.iter().map(|a| a.p.clone().expect("feasible agents carry P")).collect();
        let t = assembly::permutation_t(&dims);
        let p = t.transpose() * linalg::block_diag(&blocks) * &t;
        let mask = bordered_mask(&dims);
        let structured = p.iter().zip(mask.iter()).all(|(v, &keep)| keep || *v == 0.0);
        let a_g = t.transpose() * assembly::local_composite(la, k, gm) * &t;
        let lyap = linalg::symmetrize(&(&a_g * &p * a_g.transpose() - &p));
        Some(GlobalCertificate {
            structured,
            lyapunov_margin: -linalg::max_sym_eigenvalue(&lyap),
            min_eig_p: linalg::min_sym_eigenvalue(&p),
            p,
        })
    } else {
        None
    };
    Ok(CertificateReport { agents, all_feasible, global })
}

/// Outcome of the fixed-point Riccati iteration.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub x: Mat,
    pub k: Mat,
    pub iterations: usize,
}

/// Stabilizing solution of `X = A^T X A - A^T X B (I + B^T X B)^{-1} B^T X A + I`
/// by the structure-preserving doubling iteration; returns the gain
/// `K = -(I + B^T X B)^{-1} B^T X A`. `None` when the iteration does not
/// settle, which happens when `(A, B)` is not stabilizable.
pub fn riccati(a: &Mat, b: &Mat) -> Option<RiccatiSolution> {
    let n = a.nrows();
    let m = b.ncols();
    let eye = Mat::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * b.transpose();
    let mut x = eye.clone();
    for it in 1..=RICCATI_MAX_ITER {
        let w = linalg::solve(&(&eye + &gk * &x), &eye).ok()?;
        let next_a = &ak * &w * &ak;
        let next_g = linalg::symmetrize(&(&gk + &ak * &w * &gk * ak.transpose()));
        let next_x = linalg::symmetrize(&(&x + ak.transpose() * &x * &w * &ak));
        if !next_x.iter().chain(next_g.iter()).all(|v| v.is_finite()) {
            return None;
        }
        let diff = (&next_x - &x).norm();
        x = next_x;
        ak = next_a;
        gk = next_g;
        if diff <= RICCATI_TOL * x.norm().max(1.0) {
            let btx = b.transpose() * &x;
            let s = Mat::identity(m, m) + &btx * b;
            let k = -linalg::solve(&s, &(&btx * a)).ok()?;
            let (stable, _) = verification::is_schur(&(a + b * &k));
            return stable.then_some(RiccatiSolution { x, k, iterations: it });
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct AcyclicSynthesisResult {
    pub gains: GainSet,
    pub order: Vec<usize>,
    pub local_radii: Vec<f64>,
    pub spectral_radius: f64,
    /// Matching distance between `spec(A_g)` and the union of `spec(A_fi)`.
    pub spectrum_distance: f64,
    pub a_g_schur: bool,
}

pub fn synthesize_acyclic(
    ga: &GlobalAssembly,
    la: &[LocalAssembly],
    g: &AugmentedGraph,
) -> Result<AcyclicSynthesisResult, SynthesisError> {
    let TopologicalOrder::Order(order) = graph::topological_order(g) else {
        return Err(SynthesisError::GraphHasCycle);
    };
    let ks = la
        .par_iter()
        .enumerate()
        .map(|(i, l)| riccati(&l.a_o, &l.b_o).map(|s| s.k).ok_or(SynthesisError::RiccatiDiverged(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let gains = GainSet::from_local(&ks, &ga.dims)?;
    let mut local_eigs = Vec::new();
    let mut local_radii = Vec::new();
    for (i, l) in la.iter().enumerate() {
        let af = l.a_f(&ks[i]);
        let e = linalg::eigenvalues(&af)?;
        local_radii.push(e.iter().map(|z| z.norm()).fold(0.0, f64::max));
        local_eigs.extend(e);
    }
    let cl = assembly::closed_loop(ga, &gains)?;
    let global_eigs = linalg::eigenvalues(&cl.a_g)?;
    let spectrum_distance = linalg::spectra_distance(&global_eigs, &local_eigs).unwrap_or(f64::INFINITY);
    let (a_g_schur, spectral_radius) = verification::is_schur(&cl.a_g);
    Ok(AcyclicSynthesisResult { gains, order, local_radii, spectral_radius, spectrum_distance, a_g_schur })
}

/// `true` when every radius is below `1 - SCHUR_TOL`.
pub fn all_schur(radii: &[f64]) -> bool {
    radii.iter().all(|&r| r < 1.0 - SCHUR_TOL)
}
