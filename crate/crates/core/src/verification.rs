//! Schur and Lyapunov membership tests, regulator equations, closed-loop
//! simulation and robustness sampling.

use std::io::Write;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::assembly::{self, bordered_mask, AssemblyError, Dims, GainSet, GlobalAssembly, LocalAssembly};
use crate::graph::GraphMatrices;
use crate::internal_model::InternalModel;
use crate::linalg::{self, Mat};
use crate::lmi::{self, LmiError, LmiProblem, LmiSolution, Sense};
use crate::plant::{self, ExogenousChannels, MasModel, PlantError, UncertaintyDelta};
use crate::synthesis::{self, SynthesisError};

/// A matrix is Schur when its spectral radius is below `1 - SCHUR_TOL`.
pub const SCHUR_TOL: f64 = 1e-9;
/// Eigenvalues closer than this make the Sylvester operator singular.
pub const OVERLAP_TOL: f64 = 1e-8;
/// Relative Sylvester residual accepted for a regulator solution.
pub const SYLVESTER_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerificationError {
    #[error("closed loop is not Schur (spectral radius {0})")]
    NotSchur(f64),
    #[error("closed-loop and exosystem spectra overlap (distance {0:.3e})")]
    SpectraOverlap(f64),
    #[error("initial state has the wrong size: {0}")]
    InitialState(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// `(radius < 1 - SCHUR_TOL, radius)`; a failed eigensolve counts as not Schur.
pub fn is_schur(m: &Mat) -> (bool, f64) {
    match linalg::spectral_radius(m) {
        Ok(r) => (r < 1.0 - SCHUR_TOL, r),
        Err(_) => (false, f64::INFINITY),
    }
}

/// `P ≻ 0`, `A P A^T - P ≺ 0` with `P` restricted to `mask` (dense when `None`).
/// The inequalities are homogeneous in `P`, so `P ⪯ I` is added to keep the
/// margin bounded; it does not change feasibility.
pub fn lyapunov_problem(a: &Mat, mask: Option<nalgebra::DMatrix<bool>>) -> LmiProblem {
    let n = a.nrows();
    let mut prob = LmiProblem::new();
    let p = match mask {
        Some(m) => prob.add_symmetric_masked("P", m),
        None => prob.add_symmetric("P", n),
    };
    prob.add_constraint("P", Sense::PosDef, move |s| s.get(p).clone());
    prob.add_constraint("scale", Sense::PosSemidef, move |s| Mat::identity(n, n) - s.get(p));
    let a = a.clone();
    prob.add_constraint("lyapunov", Sense::NegDef, move |s| &a * s.get(p) * a.transpose() - s.get(p));
    prob
}

pub fn free_lyapunov(a_g: &Mat) -> Result<LmiSolution, LmiError> {
    lmi::solve_feasibility(&lyapunov_problem(a_g, None))
}

/// Lyapunov test with `P` in the bordered per-agent structure.
pub fn structured_lyapunov(a_g: &Mat, dims: &Dims) -> Result<LmiSolution, LmiError> {
    lmi::solve_feasibility(&lyapunov_problem(a_g, Some(bordered_mask(dims))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Yes,
    NumericallyNo,
    Undecided,
}

#[derive(Debug, Clone, Serialize)]
pub struct MembershipEntry {
    pub verdict: Verdict,
    /// Certified margin on `Yes`, best solver margin otherwise.
    pub margin: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MembershipReport {
    pub in_kg: MembershipEntry,
    pub in_ks: MembershipEntry,
    pub in_kla: MembershipEntry,
    pub in_klc: MembershipEntry,
    pub spectral_radius: f64,
    pub local_radii: Vec<f64>,
    /// Coupling weights tried for the local certificate.
    pub r_sweep: Vec<f64>,
}

impl MembershipReport {
    /// `in_klc = Yes ⇒ in_ks = Yes ⇒ in_kg = Yes`
    pub fn chain_holds(&self) -> bool {
        let yes = |e: &MembershipEntry| e.verdict == Verdict::Yes;
        (!yes(&self.in_klc) || yes(&self.in_ks)) && (!yes(&self.in_ks) || yes(&self.in_kg))
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Decides membership of `k` in the four gain sets.
pub fn membership(ga: &GlobalAssembly, la: &[LocalAssembly], k: &GainSet) -> Result<MembershipReport, VerificationError> {
    let gm = &ga.gm;
    let cl = assembly::closed_loop(ga, k)?;
    let (schur, radius) = is_schur(&cl.a_g);

    let free = free_lyapunov(&cl.a_g)?;
    let in_kg = match (free.is_feasible(), schur) {
        (true, true) => MembershipEntry { verdict: Verdict::Yes, margin: finite(free.margin), detail: "free Lyapunov LMI certified".into() },
        (false, false) => MembershipEntry {
            verdict: Verdict::NumericallyNo,
            margin: finite(free.solver_margin),
            detail: format!("spectral radius {radius:.6}"),
        },
        (lmi_ok, _) => MembershipEntry {
            verdict: Verdict::Undecided,
            margin: finite(if lmi_ok { free.margin } else { free.solver_margin }),
            detail: format!("LMI feasible = {lmi_ok} but spectral radius {radius:.6}"),
        },
    };

    let structured = structured_lyapunov(&cl.a_g, &ga.dims)?;
    let in_ks = if structured.is_feasible() {
        MembershipEntry { verdict: Verdict::Yes, margin: finite(structured.margin), detail: "structured Lyapunov LMI certified".into() }
    } else {
        MembershipEntry {
            verdict: Verdict::NumericallyNo,
            margin: finite(structured.solver_margin),
            detail: format!("structured Lyapunov LMI: {:?}", structured.termination),
        }
    };

    let local_radii: Vec<f64> = la.iter().enumerate().map(|(i, l)| is_schur(&l.a_f(&k.local(i))).1).collect();
    let unstable: Vec<usize> = local_radii.iter().enumerate().filter(|(_, &r)| r >= 1.0 - SCHUR_TOL).map(|(i, _)| i).collect();
    let in_kla = if unstable.is_empty() {
        MembershipEntry { verdict: Verdict::Yes, margin: finite(1.0 - local_radii.iter().fold(0.0, |a, &b| f64::max(a, b))), detail: "every A_fi Schur".into() }
    } else {
        MembershipEntry { verdict: Verdict::NumericallyNo, margin: None, detail: format!("A_fi not Schur for agents {unstable:?}") }
    };

    let mut r_sweep = Vec::new();
    let mut in_klc = None;
    let mut best = f64::NEG_INFINITY;
    if gm.r_threshold.is_finite() {
        let mut r = gm.r_threshold;
        while r <= 1e3 * gm.r_threshold * (1.0 + 1e-12) {
            r_sweep.push(r);
            let rep = synthesis::check_certificate(la, k, gm, &vec![r; la.len()])?;
            if rep.passes() {
                let g = rep.global.as_ref().expect("passing report carries the global certificate");
                in_klc = Some(MembershipEntry {
                    verdict: Verdict::Yes,
                    margin: Some(rep.agents.iter().map(|a| a.margin).fold(g.lyapunov_margin, f64::min)),
                    detail: format!("local certificates with r_i = {r:.6}"),
                });
                break;
            }
            best = best.max(rep.agents.iter().map(|a| a.solver_margin).fold(f64::INFINITY, f64::min));
            r *= 10.0;
        }
    }
    let in_klc = in_klc.unwrap_or_else(|| MembershipEntry {
        verdict: Verdict::NumericallyNo,
        margin: finite(best),
        detail: format!("no local certificate for r_i in [{:.6}, {:.6}]", r_sweep.first().copied().unwrap_or(f64::NAN), r_sweep.last().copied().unwrap_or(f64::NAN)),
    });

    Ok(MembershipReport { in_kg, in_ks, in_kla, in_klc, spectral_radius: radius, local_radii, r_sweep })
}

#[derive(Debug, Clone)]
pub struct RegulatorSolution {
    pub x_g: Mat,
    /// `||X_g A_0a - A_g X_g - B_g||_F / max(1, ||B_g||_F)`
    pub sylvester_residual: f64,
    /// `||C_g X_g + D_g||_F`
    pub output_residual: f64,
    pub spectral_radius: f64,
}

/// Solves `X_g A_0a = A_g X_g + B_g` for the (perturbed) closed loop.
pub fn solve_regulator(
    ga: &GlobalAssembly,
    k: &GainSet,
    channels: &ExogenousChannels,
    delta: Option<&UncertaintyDelta>,
) -> Result<RegulatorSolution, VerificationError> {
    let perturbed;
    let ga = match delta {
        Some(d) => {
            perturbed = ga.with_model(&plant::apply_uncertainty(&ga.model, d)?)?;
            &perturbed
        }
        None => ga,
    };
    let cl = assembly::closed_loop(ga, k)?;
    let (schur, radius) = is_schur(&cl.a_g);
    if !schur {
        return Err(VerificationError::NotSchur(radius));
    }
    let a0a = ga.a0a();
    let eig_g = linalg::eigenvalues(&cl.a_g)?;
    let eig_0 = linalg::eigenvalues(&ga.model.exo.a0)?;
    let gap = eig_g
        .iter()
        .flat_map(|a| eig_0.iter().map(move |b| (a - b).norm()))
        .fold(f64::INFINITY, f64::min);
    if gap < OVERLAP_TOL {
        return Err(VerificationError::SpectraOverlap(gap));
    }
    let b_g = ga.b_g(channels)?;
    let d_g = ga.d_g(&channels.f_ref);
    let n = cl.a_g.nrows();
    let q = a0a.nrows();
    let op = a0a.transpose().kronecker(&Mat::identity(n, n)) - Mat::identity(q, q).kronecker(&cl.a_g);
    let rhs = Mat::from_column_slice(n * q, 1, b_g.as_slice());
    let sol = linalg::solve(&op, &rhs)?;
    let x_g = Mat::from_column_slice(n, q, sol.as_slice());
    let sylvester_residual = (&x_g * &a0a - &cl.a_g * &x_g - &b_g).norm() / b_g.norm().max(1.0);
    let output_residual = (&cl.c_g * &x_g + d_g).norm();
    Ok(RegulatorSolution { x_g, sylvester_residual, output_residual, spectral_radius: radius })
}

/// Initial conditions of a simulation.
#[derive(Debug, Clone)]
pub struct InitialState {
    pub x0: Vec<DVector<f64>>,
    pub z0: Vec<DVector<f64>>,
    pub v0: DVector<f64>,
}

impl InitialState {
    pub fn zero(model: &MasModel, nz: usize) -> Self {
        Self {
            x0: model.agents.iter().map(|a| DVector::zeros(a.n())).collect(),
            z0: vec![DVector::zeros(nz); model.n_agents()],
            v0: DVector::zeros(model.exo.n0()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    /// `x[t][i]`
    pub x: Vec<Vec<DVector<f64>>>,
    pub z: Vec<Vec<DVector<f64>>>,
    pub v: Vec<DVector<f64>>,
    pub e: Vec<Vec<DVector<f64>>>,
    /// `max_i ||e_i(t)||_2`
    pub error_norm: Vec<f64>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.error_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.error_norm.is_empty()
    }

    /// `x_g(t) = [x_1; ...; x_N; z_1; ...; z_N]`
    pub fn x_g(&self, t: usize) -> DVector<f64> {
        let parts: Vec<f64> = self.x[t].iter().chain(&self.z[t]).flat_map(|v| v.iter().copied()).collect();
        DVector::from_vec(parts)
    }

    /// `1_N ⊗ v(t)`
    pub fn v_a(&self, t: usize) -> DVector<f64> {
        let n = self.x[t].len();
        let parts: Vec<f64> = (0..n).flat_map(|_| self.v[t].iter().copied()).collect();
        DVector::from_vec(parts)
    }

    /// CSV with `t`, every state entry and every agent's error norm.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        for (i, x) in self.x[0].iter().enumerate() {
            header.extend((0..x.len()).map(|k| format!("x{}_{}", i + 1, k + 1)));
        }
        for (i, z) in self.z[0].iter().enumerate() {
            header.extend((0..z.len()).map(|k| format!("z{}_{}", i + 1, k + 1)));
        }
        header.extend((0..self.e[0].len()).map(|i| format!("err{}", i + 1)));
        wr.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            row.extend(self.x[t].iter().chain(&self.z[t]).flat_map(|v| v.iter().map(|x| format!("{x:e}"))));
            row.extend(self.e[t].iter().map(|e| format!("{:e}", e.norm())));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `e_vi = (Σ_j a_ij (e_i - e_j) + g_i e_i) / (d_i + g_i)`
pub fn virtual_errors(adjacency: &Mat, pinning: &[f64], e: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = e.len();
    (0..n)
        .map(|i| {
            let d: f64 = adjacency.row(i).sum();
            let mut acc = &e[i] * pinning[i];
            for j in 0..n {
                let a = adjacency[(i, j)];
                if a != 0.0 {
                    acc += (&e[i] - &e[j]) * a;
                }
            }
            acc / (d + pinning[i])
        })
        .collect()
}

/// `μ_i = Σ_j a_ij e_j / (d_i + g_i)`, so that `e_vi = e_i - μ_i`.
pub fn mu_channel(adjacency: &Mat, pinning: &[f64], e: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = e.len();
    (0..n)
        .map(|i| {
            let d: f64 = adjacency.row(i).sum();
            let mut acc = DVector::zeros(e[i].len());
            for j in 0..n {
                acc += &e[j] * adjacency[(i, j)];
            }
            acc / (d + pinning[i])
        })
        .collect()
}

/// Synchronous forward iteration of agents, controllers and exosystem.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &MasModel,
    im: &InternalModel,
    adjacency: &Mat,
    pinning: &[f64],
    k: &GainSet,
    channels: &ExogenousChannels,
    init: &InitialState,
    horizon: usize,
) -> Result<SimulationTrace, VerificationError> {
    let n = model.n_agents();
    if init.x0.len() != n || init.z0.len() != n {
        return Err(VerificationError::InitialState(format!("{} / {} blocks for {n} agents", init.x0.len(), init.z0.len())));
    }
    for (i, a) in model.agents.iter().enumerate() {
        if init.x0[i].len() != a.n() || init.z0[i].len() != im.nz() {
            return Err(VerificationError::InitialState(format!("agent {i}")));
        }
    }
    if init.v0.len() != model.exo.n0() {
        return Err(VerificationError::InitialState("v0".into()));
    }
    let mut x = init.x0.clone();
    let mut z = init.z0.clone();
    let mut v = init.v0.clone();
    let mut trace = SimulationTrace {
        x: Vec::with_capacity(horizon + 1),
        z: Vec::with_capacity(horizon + 1),
        v: Vec::with_capacity(horizon + 1),
        e: Vec::with_capacity(horizon + 1),
        error_norm: Vec::with_capacity(horizon + 1),
    };
    for t in 0..=horizon {
        let u: Vec<DVector<f64>> = (0..n).map(|i| &k.k1[i] * &x[i] + &k.k2[i] * &z[i]).collect();
        let e: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let a = &model.agents[i];
                &a.c * &x[i] + &a.d * &u[i] - &channels.f_ref * &v
            })
            .collect();
        trace.error_norm.push(e.iter().map(|ei| ei.norm()).fold(0.0, f64::max));
        trace.x.push(x.clone());
        trace.z.push(z.clone());
        trace.v.push(v.clone());
        trace.e.push(e.clone());
        if t == horizon {
            break;
        }
        let ev = virtual_errors(adjacency, pinning, &e);
        for i in 0..n {
            let a = &model.agents[i];
            let pair = &im.pairs[i];
            let xn = &a.a * &x[i] + &a.b * &u[i] + &channels.e[i] * &v;
            let zn = &pair.g1 * &z[i] + &pair.g2 * &ev[i];
            x[i] = xn;
            z[i] = zn;
        }
        v = &model.exo.a0 * &v;
    }
    Ok(trace)
}

/// Horizon that brings a geometric decay at rate `radius` down as far as
/// `radius = 0.95` does in 200 steps.
pub fn regulation_horizon(radius: f64) -> usize {
    if radius <= 0.95 {
        200
    } else if radius < 1.0 {
        (200.0 * 0.95f64.ln() / radius.ln()).ceil() as usize
    } else {
        usize::MAX
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub samples: usize,
    pub schur_count: usize,
    pub fraction_schur: f64,
    /// Largest regulator output residual over the Schur samples.
    pub max_residual: f64,
    pub nominal_radius: f64,
    pub worst_radius: f64,
}

/// Generator for sample `index` of a study seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn robustness_sample(
    ga: &GlobalAssembly,
    k: &GainSet,
    channels: &ExogenousChannels,
    rho: f64,
    n_samples: usize,
    seed: u64,
) -> Result<RobustnessReport, VerificationError> {
    let cl = assembly::closed_loop(ga, k)?;
    let (schur, nominal_radius) = is_schur(&cl.a_g);
    if !schur {
        return Err(VerificationError::NotSchur(nominal_radius));
    }
    let outcomes: Vec<Result<(f64, Option<f64>), VerificationError>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_rng(seed, s as u64);
            let delta = UncertaintyDelta::sample(&ga.model, rho, &mut rng);
            let pga = ga.with_model(&plant::apply_uncertainty(&ga.model, &delta)?)?;
            let pcl = assembly::closed_loop(&pga, k)?;
            let (ok, r) = is_schur(&pcl.a_g);
            if !ok {
                return Ok((r, None));
            }
            match solve_regulator(&pga, k, channels, None) {
                Ok(sol) => Ok((r, Some(sol.output_residual))),
                Err(VerificationError::SpectraOverlap(_)) => Ok((r, Some(f64::INFINITY))),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut schur_count = 0;
    let mut max_residual: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    for o in outcomes {
        let (r, res) = o?;
        worst_radius = worst_radius.max(r);
        if let Some(res) = res {
            schur_count += 1;
            max_residual = max_residual.max(res);
        }
    }
    Ok(RobustnessReport {
        samples: n_samples,
        schur_count,
        fraction_schur: if n_samples == 0 { 1.0 } else { schur_count as f64 / n_samples as f64 },
        max_residual,
        nominal_radius,
        worst_radius,
    })
}

/// Convenience: graph data needed by [`simulate`] for an assembly.
pub fn graph_data(gm: &GraphMatrices) -> (Mat, Vec<f64>) {
    // Rebuild weights from F and FA: a_ij = FA_ij / F_ii scaled so that d_i + g_i = 1 / F_ii.
    let n = gm.f.nrows();
    let adjacency = Mat::from_fn(n, n, |i, j| gm.fa[(i, j)] / gm.f[(i, i)]);
    let pinning = (0..n).map(|i| 1.0 / gm.f[(i, i)] - adjacency.row(i).sum()).collect();
    (adjacency, pinning)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_global, assemble_local};
    use crate::graph::{build_graph_matrices, AugmentedGraph};
    use crate::internal_model::InternalModelPair;
    use crate::plant::{AgentPlant, Exosystem};

    fn s(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn example2() -> (GlobalAssembly, Vec<LocalAssembly>, GainSet, AugmentedGraph) {
        let ag = AgentPlant::new(s(0.0), s(1.0), s(1.0), s(1.0)).unwrap();
        let model = MasModel::new(vec![ag.clone(), ag], Exosystem::new(s(2.0)).unwrap()).unwrap();
        let im = InternalModel::replicated(InternalModelPair { g1: s(2.0), g2: s(1.0) }, 1, 2);
        let g = AugmentedGraph::new(Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), vec![1.0, 0.0]).unwrap();
        let gm = build_graph_matrices(&g, 1).unwrap();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        let la = assemble_local(&model, &im).unwrap();
        let k = GainSet { k1: vec![s(1.0), s(-0.9)], k2: vec![s(-1.0), s(-2.0)] };
        (ga, la, k, g)
    }

    #[test]
    fn schur_examples() {
        assert_eq!(is_schur(&(Mat::identity(3, 3) * 0.5)), (true, 0.5));
        let (ok, r) = is_schur(&Mat::identity(2, 2));
        assert!(!ok);
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn example2_is_in_kg_but_not_ks_or_kla() {
        let (ga, la, k, _) = example2();
        let rep = membership(&ga, &la, &k).unwrap();
        assert_eq!(rep.in_kg.verdict, Verdict::Yes);
        assert_eq!(rep.in_ks.verdict, Verdict::NumericallyNo);
        assert_eq!(rep.in_kla.verdict, Verdict::NumericallyNo);
        assert!(rep.local_radii[0] >= 1.0);
        assert!(rep.chain_holds());
    }

    #[test]
    fn homogeneous_regulator_is_zero() {
        let (ga, _, k, _) = example2();
        let ch = ExogenousChannels::zero(&ga.model);
        let sol = solve_regulator(&ga, &k, &ch, None).unwrap();
        assert_eq!(sol.x_g.norm(), 0.0);
        assert_eq!(sol.output_residual, 0.0);
    }

    #[test]
    fn regulator_output_residual_vanishes() {
        let (ga, _, k, _) = example2();
        let mut rng = sample_rng(7, 0);
        let ch = ExogenousChannels::sample(&ga.model, 1.0, &mut rng);
        let sol = solve_regulator(&ga, &k, &ch, None).unwrap();
        assert!(sol.sylvester_residual < SYLVESTER_TOL);
        assert!(sol.output_residual < 1e-8, "{}", sol.output_residual);
    }

    #[test]
    fn unstable_closed_loop_is_rejected() {
        let (ga, _, _, _) = example2();
        let k = GainSet::zeros(&ga.dims);
        let ch = ExogenousChannels::zero(&ga.model);
        assert!(matches!(solve_regulator(&ga, &k, &ch, None), Err(VerificationError::NotSchur(_))));
    }

    #[test]
    fn zero_initial_state_stays_zero() {
        let (ga, _, k, g) = example2();
        let ch = ExogenousChannels::zero(&ga.model);
        let init = InitialState::zero(&ga.model, 1);
        let tr = simulate(&ga.model, &ga.im, g.adjacency(), g.pinning(), &k, &ch, &init, 25).unwrap();
        assert_eq!(tr.len(), 26);
        assert!(tr.error_norm.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn simulation_tracks_reference() {
        let (ga, _, k, g) = example2();
        let ch = ExogenousChannels { e: vec![s(0.3), s(-0.2)], f_ref: s(1.0) };
        let mut init = InitialState::zero(&ga.model, 1);
        init.v0 = DVector::from_element(1, 2f64.powi(-150));
        init.x0 = vec![DVector::from_element(1, 0.4), DVector::from_element(1, -0.7)];
        // A0 = 2 grows v by 2^t; start tiny so the horizon stays finite.
        let tr = simulate(&ga.model, &ga.im, g.adjacency(), g.pinning(), &k, &ch, &init, 150).unwrap();
        let sol = solve_regulator(&ga, &k, &ch, None).unwrap();
        let dev = tr.x_g(150) - &sol.x_g * tr.v_a(150);
        assert!(dev.norm() < 1e-6 * (1.0 + tr.v[150].norm()), "{} {} {}", dev.norm(), sol.spectral_radius, tr.v[150].norm());
    }

    #[test]
    fn virtual_error_matches_mu_channel() {
        let adj = Mat::from_row_slice(3, 3, &[0.0, 0.2, 0.5, 1.0, 0.0, 0.0, 0.3, 0.3, 0.0]);
        let pin = [0.5, 0.0, 1.0];
        let e: Vec<DVector<f64>> = (0..3).map(|i| DVector::from_vec(vec![i as f64 - 0.7, 0.3 * i as f64])).collect();
        let ev = virtual_errors(&adj, &pin, &e);
        let mu = mu_channel(&adj, &pin, &e);
        for i in 0..3 {
            assert!((&ev[i] - (&e[i] - &mu[i])).norm() < 1e-12);
        }
    }

    #[test]
    fn robustness_nominal_and_large() {
        let (ga, _, k, _) = example2();
        let ch = ExogenousChannels::zero(&ga.model);
        let nominal = robustness_sample(&ga, &k, &ch, 0.0, 5, 0).unwrap();
        assert_eq!(nominal.fraction_schur, 1.0);
        let large = robustness_sample(&ga, &k, &ch, 10.0, 20, 0).unwrap();
        assert!(large.fraction_schur < 1.0);
        let again = robustness_sample(&ga, &k, &ch, 10.0, 20, 0).unwrap();
        assert_eq!(large.schur_count, again.schur_count);
    }

    #[test]
    fn graph_data_round_trips() {
        let (ga, _, _, g) = example2();
        let (adj, pin) = graph_data(&ga.gm);
        assert!((adj - g.adjacency()).norm() < 1e-15);
        assert!(pin.iter().zip(g.pinning()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn regulation_horizon_scales() {
        assert_eq!(regulation_horizon(0.5), 200);
        assert!(regulation_horizon(0.99) > 1000);
    }
}
