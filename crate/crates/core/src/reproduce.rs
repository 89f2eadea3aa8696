//! Bundled worked examples and the checks that reproduce their claims.

use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::assembly::{self, assemble_global, assemble_local, GainSet, GlobalAssembly, LocalAssembly};
use crate::config::{ConfigError, GainsFile, RunConfig, Scenario};
use crate::graph::build_graph_matrices;
use crate::linalg::{self, Mat, C64};
use crate::lmi::{self, Assignment};
use crate::synthesis::{self, SynthesisError};
use crate::verification::{self, InitialState, Verdict, VerificationError};

/// Eigenvalue facts are checked to this tolerance.
pub const FACT_TOL: f64 = 1e-8;
/// Allowed violation of the printed four-digit matrices.
pub const PRINTED_SLACK: f64 = -5e-3;
pub const REGULATION_TOL: f64 = 1e-6;

const CONFIGS: [&str; 6] = [
    include_str!("../fixtures/example1.json"),
    include_str!("../fixtures/example2.json"),
    include_str!("../fixtures/example3.json"),
    include_str!("../fixtures/example4.json"),
    include_str!("../fixtures/example5.json"),
    include_str!("../fixtures/example6.json"),
];

const GAINS: [Option<&str>; 6] = [
    None,
    Some(include_str!("../fixtures/example2_gains.json")),
    Some(include_str!("../fixtures/example3_gains.json")),
    Some(include_str!("../fixtures/example4_gains.json")),
    Some(include_str!("../fixtures/example5_gains.json")),
    Some(include_str!("../fixtures/example6_gains.json")),
];

#[derive(Debug, Error)]
pub enum ReproduceError {
    #[error("unknown example {0}; expected 1 to 6")]
    UnknownExample(u8),
    #[error("example {example}: claim failed: {claim}")]
    AssertionFailed { example: u8, claim: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Assembly(#[from] assembly::AssemblyError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error(transparent)]
    Lmi(#[from] lmi::LmiError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub claim: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Transcript {
    pub example: u8,
    pub checks: Vec<Check>,
}

impl Transcript {
    fn new(example: u8) -> Self {
        Self { example, checks: Vec::new() }
    }

    fn check(&mut self, claim: &str, passed: bool, detail: impl Into<String>) {
        let detail = detail.into();
        log::info!("example {}: {claim}: {} ({detail})", self.example, if passed { "ok" } else { "FAILED" });
        self.checks.push(Check { claim: claim.to_string(), passed, detail });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// `Err(AssertionFailed)` naming the first failed claim.
    pub fn into_result(self) -> Result<Transcript, ReproduceError> {
        match self.checks.iter().find(|c| !c.passed) {
            Some(c) => Err(ReproduceError::AssertionFailed { example: self.example, claim: c.claim.clone() }),
            None => Ok(self),
        }
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "example {}", self.example)?;
        for c in &self.checks {
            writeln!(f, "  [{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.claim, c.detail)?;
        }
        write!(f, "example {}: {}", self.example, if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn fixture_config(id: u8) -> Result<&'static str, ReproduceError> {
    CONFIGS.get(usize::from(id).wrapping_sub(1)).copied().ok_or(ReproduceError::UnknownExample(id))
}

pub fn fixture_gains(id: u8) -> Result<Option<&'static str>, ReproduceError> {
    GAINS.get(usize::from(id).wrapping_sub(1)).copied().ok_or(ReproduceError::UnknownExample(id))
}

/// Everything needed to run checks on one bundled example.
pub struct Bundle {
    pub scenario: Scenario,
    pub ga: GlobalAssembly,
    pub la: Vec<LocalAssembly>,
    pub gains: Option<GainSet>,
}

pub fn bundle(id: u8) -> Result<Bundle, ReproduceError> {
    let scenario = RunConfig::from_json_str(fixture_config(id)?)?.build()?;
    let gm = build_graph_matrices(&scenario.graph, scenario.model.p())?;
    let ga = assemble_global(&scenario.model, &scenario.im, &gm)?;
    let la = assemble_local(&scenario.model, &scenario.im)?;
    let gains = match fixture_gains(id)? {
        Some(text) => Some(GainsFile::from_json_str(text)?.gains_for(&scenario)?),
        None => None,
    };
    Ok(Bundle { scenario, ga, la, gains })
}

/// Runs every check for example `id`. Failed claims are recorded in the
/// transcript; errors are reserved for broken fixtures.
pub fn reproduce(id: u8) -> Result<Transcript, ReproduceError> {
    let b = bundle(id)?;
    match id {
        1 => example1(&b),
        2 => example2(&b),
        3 => example3(&b),
        4 => example4(&b),
        5 => example5(&b),
        6 => example6(&b),
        _ => Err(ReproduceError::UnknownExample(id)),
    }
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gains_of(b: &Bundle) -> &GainSet {
    b.gains.as_ref().expect("example ships gains")
}

/// `A + BK` with only the internal-model gains `K2 = diag(k21, k22)` nonzero.
fn example1_closed_loop(ga: &GlobalAssembly, k21: f64, k22: f64) -> Mat {
    let d = &ga.dims;
    let mut k = Mat::zeros(d.m_bar(), d.total());
    k[(d.u_offset(0), d.z_offset(0))] = k21;
    k[(d.u_offset(1), d.z_offset(1))] = k22;
    &ga.a + &ga.b * k
}

/// Closed-form `{0.5, 0.5, 5(s+q)+10, 5(s-q)+10}` with `s = k21 + k22`, `q = sqrt(k21^2 + k22^2)`.
pub fn example1_formula(k21: f64, k22: f64) -> [f64; 4] {
    let s = k21 + k22;
    let q = k21.hypot(k22);
    [0.5, 0.5, 5.0 * (s + q) + 10.0, 5.0 * (s - q) + 10.0]
}

/// Smallest spectral radius of `A + BK` over the square grid `[-lim, lim]^2`.
pub fn example1_grid_min_radius(ga: &GlobalAssembly, lim: f64, step: f64) -> (f64, f64, f64) {
    let n = (2.0 * lim / step).round() as usize + 1;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let k21 = -lim + step * i as f64;
            let mut best = (f64::INFINITY, k21, 0.0);
            for j in 0..n {
                let k22 = -lim + step * j as f64;
                let r = verification::is_schur(&example1_closed_loop(ga, k21, k22)).1;
                if r < best.0 {
                    best = (r, k21, k22);
                }
            }
            best
        })
        .reduce(|| (f64::INFINITY, 0.0, 0.0), |a, b| if b.0 < a.0 { b } else { a })
}

fn example1(b: &Bundle) -> Result<Transcript, ReproduceError> {
    let mut tr = Transcript::new(1);
    let stab = assembly::pair_stabilizability(&b.ga)?;
    tr.check(
        "(A, B) is stabilizable (PBH)",
        stab.stabilizable,
        format!("{} rank-deficient candidates", stab.certificates.len()),
    );

    let mut rng = verification::sample_rng(1, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k21 = rng.random_range(-10.0..10.0);
        let k22 = rng.random_range(-10.0..10.0);
        let dense = linalg::eigenvalues(&example1_closed_loop(&b.ga, k21, k22))?;
        let formula: Vec<C64> = example1_formula(k21, k22).iter().map(|&x| C64::new(x, 0.0)).collect();
        let d = linalg::spectra_distance(&dense, &formula).unwrap_or(f64::INFINITY);
        worst = worst.max(d / (1.0 + formula.iter().map(|z| z.norm()).fold(0.0, f64::max)));
    }
    tr.check(
        "closed-form eigenvalues match the dense eigensolver",
        worst < FACT_TOL,
        format!("largest relative deviation {worst:.2e} over 1000 random gains"),
    );

    let (r, k21, k22) = example1_grid_min_radius(&b.ga, 10.0, 0.01);
    tr.check(
        "no grid gain in [-10, 10]^2 (step 0.01) is Schur",
        r >= 1.0,
        format!("smallest spectral radius {r:.6} at K21 = {k21:.2}, K22 = {k22:.2}"),
    );

    match synthesis::synthesize_global(&b.ga) {
        Err(SynthesisError::NumericallyInfeasible { margin }) => {
            tr.check("global structured synthesis is infeasible", true, format!("best margin {margin:.3e}"))
        }
        Ok(res) => tr.check(
            "global structured synthesis is infeasible",
            false,
            format!("returned gains with spectral radius {:.6}", res.spectral_radius),
        ),
        Err(e) => return Err(e.into()),
    }
    Ok(tr)
}

fn example2(b: &Bundle) -> Result<Transcript, ReproduceError> {
    let mut tr = Transcript::new(2);
    let k = gains_of(b);
    let cl = assembly::closed_loop(&b.ga, k)?;
    let r = linalg::spectral_radius(&cl.a_g)?;
    tr.check("A_g is Schur, so K is in K_G", r < 1.0 - FACT_TOL, format!("spectral radius {r:.6}"));
    let s = verification::structured_lyapunov(&cl.a_g, &b.ga.dims)?;
    tr.check(
        "structured Lyapunov inequality is infeasible",
        !s.is_feasible(),
        format!("best margin {:.3e} ({:?})", s.solver_margin, s.termination),
    );
    let m = verification::membership(&b.ga, &b.la, k)?;
    tr.check("membership: in K_G", m.in_kg.verdict == Verdict::Yes, m.in_kg.detail.clone());
    tr.check("membership: not in K_S", m.in_ks.verdict == Verdict::NumericallyNo, m.in_ks.detail.clone());
    Ok(tr)
}

fn example3(b: &Bundle) -> Result<Transcript, ReproduceError> {
    let mut tr = Transcript::new(3);
    let k = gains_of(b);
    let cl = assembly::closed_loop(&b.ga, k)?;
    let n = cl.a_g.nrows();
    let lyap = &cl.a_g * cl.a_g.transpose() - Mat::identity(n, n);
    let top = linalg::max_sym_eigenvalue(&lyap);
    tr.check(
        "P = I certifies the structured Lyapunov inequality",
        top < -FACT_TOL,
        format!("largest eigenvalue of A_g A_g^T - I is {top:.6}"),
    );
    let gm = &b.ga.gm;
    tr.check(
        "sigma_min(FA) = sigma_max(FA) = 1 forces C_f P C_f^T = I",
        (gm.sigma_max - 1.0).abs() < FACT_TOL && (gm.sigma_min_nz - 1.0).abs() < FACT_TOL,
        format!("sigma_max {:.6}, sigma_min {:.6}", gm.sigma_max, gm.sigma_min_nz),
    );
    let cert = synthesis::check_certificate(&b.la, k, gm, &vec![gm.r_threshold; b.la.len()])?;
    let a1 = &cert.agents[0];
    tr.check(
        "local certificate of agent 1 is infeasible with margin <= 0",
        !a1.feasible && a1.solver_margin <= 0.0,
        format!("r_1 = {:.3}, best margin {:.3e}", a1.r, a1.solver_margin),
    );
    let m = verification::membership(&b.ga, &b.la, k)?;
    tr.check("membership: in K_S", m.in_ks.verdict == Verdict::Yes, m.in_ks.detail.clone());
    tr.check("membership: not in K_LC", m.in_klc.verdict == Verdict::NumericallyNo, m.in_klc.detail.clone());
    Ok(tr)
}

fn example4(b: &Bundle) -> Result<Transcript, ReproduceError> {
    let mut tr = Transcript::new(4);
    let k = gains_of(b);
    let radii: Vec<f64> =
        b.la.iter().enumerate().map(|(i, l)| linalg::spectral_radius(&l.a_f(&k.local(i)))).collect::<Result<_, _>>()?;
    tr.check(
        "every A_fi is Schur",
        radii.iter().all(|&r| r < 1.0 - FACT_TOL),
        format!("local spectral radii {radii:.6?}"),
    );
    let r = linalg::spectral_radius(&assembly::closed_loop(&b.ga, k)?.a_g)?;
    tr.check("A_g is not Schur", r >= 1.0, format!("spectral radius {r:.6}"));
    let m = verification::membership(&b.ga, &b.la, k)?;
    tr.check("membership: in K_LA", m.in_kla.verdict == Verdict::Yes, m.in_kla.detail.clone());
    tr.check("membership: not in K_G", m.in_kg.verdict == Verdict::NumericallyNo, m.in_kg.detail.clone());
    Ok(tr)
}

fn example5(b: &Bundle) -> Result<Transcript, ReproduceError> {
    let mut tr = Transcript::new(5);
    let k = gains_of(b);
    let r1 = linalg::spectral_radius(&b.la[0].a_f(&k.local(0)))?;
    tr.check("A_f1 is not Schur", r1 >= 1.0, format!("spectral radius {r1:.6}"));
    let r = linalg::spectral_radius(&assembly::closed_loop(&b.ga, k)?.a_g)?;
    tr.check("A_g is nevertheless Schur", r < 1.0 - FACT_TOL, format!("spectral radius {r:.6}"));
    Ok(tr)
}

/// `(P_i, Y_i, Theta_i)` as printed for agents of the first and second kind.
pub fn example6_printed(i: usize) -> (Mat, Mat, Mat) {
    if i % 2 == 0 {
        (
            Mat::from_row_slice(2, 2, &[0.7231, -1.8112, -1.8112, 20.7015]),
            Mat::from_row_slice(1, 2, &[-0.7377, -0.0532]),
            Mat::from_element(1, 1, 1.2077),
        )
    } else {
        (
            Mat::from_row_slice(3, 3, &[0.7033, -0.8646, -1.7348, -0.8646, 6.2609, -0.0550, -1.7348, -0.0550, 17.0840]),
            Mat::from_row_slice(1, 3, &[0.5105, -8.4232, 0.1100]),
            Mat::from_element(1, 1, 12.8017),
        )
    }
}

/// Random initial states of half-width `scale` and `v0 = 1`.
pub fn example6_initial_state(b: &Bundle, seed: u64) -> InitialState {
    let mut rng = verification::sample_rng(seed, 0);
    let mut draw = |n: usize| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let x0 = b.scenario.model.agents.iter().map(|a| draw(a.n())).collect();
    let z0 = (0..b.scenario.model.n_agents()).map(|_| draw(b.scenario.im.nz())).collect();
    InitialState { x0, z0, v0: DVector::from_element(1, 1.0) }
}

fn example6(b: &Bundle) -> Result<Transcript, ReproduceError> {
    let mut tr = Transcript::new(6);
    let gm = &b.ga.gm;
    let r = b.scenario.config.synthesis.r.clone().unwrap_or_else(|| vec![gm.r_threshold; b.la.len()]);
    tr.check(
        "r_i = 0.92 is above the graph threshold",
        r.iter().all(|&x| x >= gm.r_threshold),
        format!("threshold {:.6}", gm.r_threshold),
    );

    let mut worst = f64::INFINITY;
    let mut where_ = String::new();
    for (i, l) in b.la.iter().enumerate() {
        let (prob, vars) = synthesis::local_problem(l, r[i], gm);
        let (p, y, th) = example6_printed(i);
        let mut x: Assignment = prob.zero_assignment();
        x.set(vars.p, p);
        x.set(vars.y, y);
        x.set(vars.theta, th);
        for c in lmi::certify(&x, &prob).constraints {
            if c.min_eig < worst {
                worst = c.min_eig;
                where_ = format!("agent {}, constraint '{}'", i + 1, c.name);
            }
        }
    }
    tr.check(
        "printed P_i, Y_i, Theta_i satisfy every local constraint within 5e-3",
        worst >= PRINTED_SLACK,
        format!("smallest slack {worst:.3e} ({where_})"),
    );

    let res = match synthesis::synthesize_local(&b.ga, &b.la, Some(&r)) {
        Ok(res) => res,
        Err(SynthesisError::LocalInfeasible { agents, margins }) => {
            tr.check("local LMIs are feasible for every agent", false, format!("infeasible for {agents:?}, margins {}", sci(&margins)));
            return Ok(tr);
        }
        Err(e) => return Err(e.into()),
    };
    let margins: Vec<f64> = res.agents.iter().map(|a| a.margin).collect();
    tr.check("local LMIs are feasible for every agent", true, format!("certified margins {}", sci(&margins)));
    tr.check(
        "synthesized gains render A_g Schur",
        res.a_g_schur,
        format!("spectral radius {:.6}", res.spectral_radius),
    );

    let init = example6_initial_state(b, b.scenario.config.seed);
    let (adj, pin) = (b.scenario.graph.adjacency(), b.scenario.graph.pinning());
    let horizon = b.scenario.config.simulation.horizon;
    let trace = verification::simulate(
        &b.scenario.model,
        &b.scenario.im,
        adj,
        pin,
        &res.gains,
        &b.scenario.channels,
        &init,
        horizon,
    )?;
    let err = trace.error_norm[horizon];
    tr.check(
        "tracking error is below 1e-6 at t = 200",
        err < REGULATION_TOL,
        format!("max_i |e_i({horizon})| = {err:.3e}"),
    );

    let printed = gains_of(b);
    let m = verification::membership(&b.ga, &b.la, printed)?;
    let all = [&m.in_kg, &m.in_ks, &m.in_kla, &m.in_klc].iter().all(|e| e.verdict == Verdict::Yes);
    tr.check(
        "printed gains lie in K_G, K_S, K_LA and K_LC",
        all,
        format!(
            "{:?} {:?} {:?} {:?}, spectral radius {:.6}",
            m.in_kg.verdict, m.in_ks.verdict, m.in_kla.verdict, m.in_klc.verdict, m.spectral_radius
        ),
    );
    Ok(tr)
}
