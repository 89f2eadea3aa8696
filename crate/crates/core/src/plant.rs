//! Agent dynamics, the exosystem, plant uncertainty and the per-agent
//! solvability conditions (antistable exosystem, transmission rank,
//! stabilizability).

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Mat, C64};

/// Modulus tolerance for `|lambda| >= 1` tests.
pub const TOL_EIG: f64 = 1e-9;
/// Relative singular-value threshold for rank tests.
pub const RANK_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("agent {agent}: {what}")]
    Dimension { agent: usize, what: String },
    #[error("exosystem matrix must be square, got {0}x{1}")]
    ExosystemShape(usize, usize),
    #[error("model has no agents")]
    NoAgents,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Nominal `(A_i, B_i, C_i, D_i)` of one follower.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPlant {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl AgentPlant {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self, PlantError> {
        let plant = Self { a, b, c, d };
        plant.validate(0)?;
        Ok(plant)
    }

    fn validate(&self, agent: usize) -> Result<(), PlantError> {
        let dim = |what: String| Err(PlantError::Dimension { agent, what });
        let n = self.a.nrows();
        if !self.a.is_square() {
            return dim(format!("A is {}x{}, not square", self.a.nrows(), self.a.ncols()));
        }
        if n == 0 {
            return dim("empty state".into());
        }
        if self.b.nrows() != n {
            return dim(format!("B has {} rows, expected {n}", self.b.nrows()));
        }
        if self.c.ncols() != n {
            return dim(format!("C has {} columns, expected {n}", self.c.ncols()));
        }
        if self.d.nrows() != self.c.nrows() || self.d.ncols() != self.b.ncols() {
            return dim(format!(
                "D is {}x{}, expected {}x{}",
                self.d.nrows(),
                self.d.ncols(),
                self.c.nrows(),
                self.b.ncols()
            ));
        }
        if self.c.nrows() == 0 || self.b.ncols() == 0 {
            return dim("zero input or output dimension".into());
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exosystem {
    pub a0: Mat,
}

impl Exosystem {
    pub fn new(a0: Mat) -> Result<Self, PlantError> {
        if !a0.is_square() || a0.nrows() == 0 {
            return Err(PlantError::ExosystemShape(a0.nrows(), a0.ncols()));
        }
        Ok(Self { a0 })
    }

    pub fn n0(&self) -> usize {
        self.a0.nrows()
    }
}

/// The follower plants together with the exosystem.
#[derive(Debug, Clone, PartialEq)]
pub struct MasModel {
    pub agents: Vec<AgentPlant>,
    pub exo: Exosystem,
}

impl MasModel {
    pub fn new(agents: Vec<AgentPlant>, exo: Exosystem) -> Result<Self, PlantError> {
        if agents.is_empty() {
            return Err(PlantError::NoAgents);
        }
        for (i, ag) in agents.iter().enumerate() {
            ag.validate(i)?;
        }
        let p = agents[0].p();
        if let Some(i) = agents.iter().position(|a| a.p() != p) {
            return Err(PlantError::Dimension {
                agent: i,
                what: format!("output dimension {} differs from {p}", agents[i].p()),
            });
        }
        Ok(Self { agents, exo })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
    pub fn p(&self) -> usize {
        self.agents[0].p()
    }
    pub fn n_bar(&self) -> usize {
        self.agents.iter().map(AgentPlant::n).sum()
    }
    pub fn m_bar(&self) -> usize {
        self.agents.iter().map(AgentPlant::m).sum()
    }
}

/// Additive perturbation of a single agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDelta {
    pub da: Mat,
    pub db: Mat,
    pub dc: Mat,
    pub dd: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyDelta {
    pub agents: Vec<AgentDelta>,
}

impl UncertaintyDelta {
    pub fn zero(model: &MasModel) -> Self {
        let agents = model
            .agents
            .iter()
            .map(|a| AgentDelta {
                da: Mat::zeros(a.n(), a.n()),
                db: Mat::zeros(a.n(), a.m()),
                dc: Mat::zeros(a.p(), a.n()),
                dd: Mat::zeros(a.p(), a.m()),
            })
            .collect();
        Self { agents }
    }

    /// Entries drawn independently and uniformly from `[-rho, rho]`.
    pub fn sample<R: Rng + ?Sized>(model: &MasModel, rho: f64, rng: &mut R) -> Self {
        let mut draw = |r: usize, c: usize| {
            Mat::from_fn(r, c, |_, _| if rho > 0.0 { rng.random_range(-rho..=rho) } else { 0.0 })
        };
        let agents = model
            .agents
            .iter()
            .map(|a| AgentDelta {
                da: draw(a.n(), a.n()),
                db: draw(a.n(), a.m()),
                dc: draw(a.p(), a.n()),
                dd: draw(a.p(), a.m()),
            })
            .collect();
        Self { agents }
    }

    pub fn negated(&self) -> Self {
        let agents = self
            .agents
            .iter()
            .map(|d| AgentDelta { da: -&d.da, db: -&d.db, dc: -&d.dc, dd: -&d.dd })
            .collect();
        Self { agents }
    }

    /// The stacked vector `[vec(dA_i)...; vec(dB_i)...; vec(dC_i)...; vec(dD_i)...]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for pick in 0..4 {
            for d in &self.agents {
                let m = match pick {
                    0 => &d.da,
                    1 => &d.db,
                    2 => &d.dc,
                    _ => &d.dd,
                };
                out.extend_from_slice(m.as_slice());
            }
        }
        out
    }
}

/// Disturbance channels `E_i` and the reference map `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousChannels {
    pub e: Vec<Mat>,
    pub f_ref: Mat,
}

impl ExogenousChannels {
    pub fn zero(model: &MasModel) -> Self {
        let n0 = model.exo.n0();
        Self {
            e: model.agents.iter().map(|a| Mat::zeros(a.n(), n0)).collect(),
            f_ref: Mat::zeros(model.p(), n0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(model: &MasModel, scale: f64, rng: &mut R) -> Self {
        let n0 = model.exo.n0();
        let mut draw = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-scale..=scale));
        let e = model.agents.iter().map(|a| draw(a.n(), n0)).collect();
        let f_ref = draw(model.p(), n0);
        Self { e, f_ref }
    }

    pub fn validate(&self, model: &MasModel) -> Result<(), PlantError> {
        let n0 = model.exo.n0();
        if self.e.len() != model.n_agents() {
            return Err(PlantError::ShapeMismatch(format!(
                "{} disturbance matrices for {} agents",
                self.e.len(),
                model.n_agents()
            )));
        }
        for (i, (e, a)) in self.e.iter().zip(&model.agents).enumerate() {
            if e.shape() != (a.n(), n0) {
                return Err(PlantError::ShapeMismatch(format!(
                    "E_{i} is {}x{}, expected {}x{n0}",
                    e.nrows(),
                    e.ncols(),
                    a.n()
                )));
            }
        }
        if self.f_ref.shape() != (model.p(), n0) {
            return Err(PlantError::ShapeMismatch(format!(
                "F is {}x{}, expected {}x{n0}",
                self.f_ref.nrows(),
                self.f_ref.ncols(),
                model.p()
            )));
        }
        Ok(())
    }
}

/// An eigenvalue at which a rank test failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankFailure {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub rank: usize,
    pub required: usize,
}

impl RankFailure {
    pub fn lambda(&self) -> C64 {
        C64::new(self.lambda_re, self.lambda_im)
    }
}

/// Every eigenvalue of `A0` has modulus at least one.
pub fn check_exosystem_antistable(exo: &Exosystem) -> bool {
    exosystem_stable_modes(exo).map(|v| v.is_empty()).unwrap_or(false)
}

/// Eigenvalues of `A0` strictly inside the unit circle.
pub fn exosystem_stable_modes(exo: &Exosystem) -> Result<Vec<C64>, PlantError> {
    Ok(linalg::eigenvalues(&exo.a0)?.into_iter().filter(|l| l.norm() < 1.0 - TOL_EIG).collect())
}

/// `[A - lambda I, B; C, D]`
fn rosenbrock(agent: &AgentPlant, lambda: C64) -> linalg::CMat {
    let n = agent.n();
    let shifted = linalg::to_complex(&agent.a) - linalg::CMat::identity(n, n) * lambda;
    let top = hstack_c(&shifted, &linalg::to_complex(&agent.b));
    let bottom = hstack_c(&linalg::to_complex(&agent.c), &linalg::to_complex(&agent.d));
    vstack_c(&top, &bottom)
}

pub(crate) fn hstack_c(a: &linalg::CMat, b: &linalg::CMat) -> linalg::CMat {
    let mut out = linalg::CMat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    out
}

pub(crate) fn vstack_c(a: &linalg::CMat, b: &linalg::CMat) -> linalg::CMat {
    let mut out = linalg::CMat::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    out
}

/// Eigenvalues of `A0` where the Rosenbrock matrix loses rank.
pub fn transmission_rank_failures(
    agent: &AgentPlant,
    exo: &Exosystem,
) -> Result<Vec<RankFailure>, PlantError> {
    let required = agent.n() + agent.p();
    let mut out = Vec::new();
    for lambda in linalg::distinct_eigenvalues(&exo.a0)? {
        let rank = linalg::complex_rank(&rosenbrock(agent, lambda), RANK_REL_TOL);
        if rank != required {
            out.push(RankFailure { lambda_re: lambda.re, lambda_im: lambda.im, rank, required });
        }
    }
    Ok(out)
}

pub fn check_transmission_rank(agent: &AgentPlant, exo: &Exosystem) -> bool {
    transmission_rank_failures(agent, exo).map(|f| f.is_empty()).unwrap_or(false)
}

/// PBH failures of `(a, b)` over the given candidate eigenvalues with `|lambda| >= 1`.
pub fn pbh_failures_at(a: &Mat, b: &Mat, candidates: &[C64]) -> Vec<RankFailure> {
    let n = a.nrows();
    candidates
        .iter()
        .filter(|l| l.norm() >= 1.0 - TOL_EIG)
        .filter_map(|&lambda| {
            let m = hstack_c(
                &(linalg::to_complex(a) - linalg::CMat::identity(n, n) * lambda),
                &linalg::to_complex(b),
            );
            let rank = linalg::complex_rank(&m, RANK_REL_TOL);
            (rank < n).then(|| RankFailure { lambda_re: lambda.re, lambda_im: lambda.im, rank, required: n })
        })
        .collect()
}

pub fn pbh_failures(a: &Mat, b: &Mat) -> Result<Vec<RankFailure>, PlantError> {
    Ok(pbh_failures_at(a, b, &linalg::distinct_eigenvalues(a)?))
}

pub fn check_agent_stabilizable(agent: &AgentPlant) -> bool {
    pbh_failures(&agent.a, &agent.b).map(|f| f.is_empty()).unwrap_or(false)
}

pub fn apply_uncertainty(model: &MasModel, delta: &UncertaintyDelta) -> Result<MasModel, PlantError> {
    if delta.agents.len() != model.n_agents() {
        return Err(PlantError::ShapeMismatch(format!(
            "{} perturbations for {} agents",
            delta.agents.len(),
            model.n_agents()
        )));
    }
    let mut agents = Vec::with_capacity(model.n_agents());
    for (i, (ag, d)) in model.agents.iter().zip(&delta.agents).enumerate() {
        let same = d.da.shape() == ag.a.shape()
            && d.db.shape() == ag.b.shape()
            && d.dc.shape() == ag.c.shape()
            && d.dd.shape() == ag.d.shape();
        if !same {
            return Err(PlantError::ShapeMismatch(format!("perturbation of agent {i}")));
        }
        agents.push(AgentPlant {
            a: &ag.a + &d.da,
            b: &ag.b + &d.db,
            c: &ag.c + &d.dc,
            d: &ag.d + &d.dd,
        });
    }
    Ok(MasModel { agents, exo: model.exo.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn scalar_agent(a: f64, b: f64, c: f64, d: f64) -> AgentPlant {
        AgentPlant::new(s(a), s(b), s(c), s(d)).unwrap()
    }

    #[test]
    fn antistable_exosystems() {
        assert!(check_exosystem_antistable(&Exosystem::new(s(1.0)).unwrap()));
        assert!(check_exosystem_antistable(&Exosystem::new(s(10.0)).unwrap()));
        assert!(!check_exosystem_antistable(&Exosystem::new(s(0.5)).unwrap()));
    }

    #[test]
    fn transmission_rank_examples() {
        let exo1 = Exosystem::new(s(1.0)).unwrap();
        assert!(check_transmission_rank(&scalar_agent(1.0, 1.0, 1.0, 0.0), &exo1));
        assert!(!check_transmission_rank(&scalar_agent(1.0, 0.0, 0.0, 0.0), &exo1));
        let exo10 = Exosystem::new(s(10.0)).unwrap();
        assert!(check_transmission_rank(&scalar_agent(0.5, 0.0, 1.0, 1.0), &exo10));
    }

    #[test]
    fn transmission_rank_with_complex_modes() {
        let rot = Exosystem::new(Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).unwrap();
        assert!(check_transmission_rank(&scalar_agent(0.5, 1.0, 1.0, 0.0), &rot));
        // A plant with a zero at the exosystem frequency: A = rotation, C = 0 row on one side.
        let ag = AgentPlant::new(
            Mat::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]),
            Mat::from_row_slice(2, 1, &[0.0, 0.0]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            s(0.0),
        )
        .unwrap();
        let failures = transmission_rank_failures(&ag, &rot).unwrap();
        assert_eq!(failures.len(), 2);
        assert!(failures.iter().all(|f| (f.lambda().norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn stabilizability_examples() {
        assert!(check_agent_stabilizable(&scalar_agent(0.5, 0.0, 1.0, 0.0)));
        assert!(!check_agent_stabilizable(&scalar_agent(1.0, 0.0, 1.0, 0.0)));
        let dbl = AgentPlant::new(
            Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            Mat::from_row_slice(2, 1, &[0.5, 1.0]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            s(0.0),
        )
        .unwrap();
        assert!(check_agent_stabilizable(&dbl));
    }

    #[test]
    fn jordan_block_with_unreachable_top_is_unstabilizable() {
        let ag = AgentPlant::new(
            Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            Mat::from_row_slice(2, 1, &[1.0, 0.0]),
            Mat::from_row_slice(1, 2, &[1.0, 0.0]),
            s(0.0),
        )
        .unwrap();
        assert!(!check_agent_stabilizable(&ag));
    }

    #[test]
    fn uncertainty_is_additive() {
        let model = MasModel::new(vec![scalar_agent(0.5, 1.0, 1.0, 0.0)], Exosystem::new(s(1.0)).unwrap())
            .unwrap();
        let zero = UncertaintyDelta::zero(&model);
        assert_eq!(apply_uncertainty(&model, &zero).unwrap(), model);
        let mut d = zero.clone();
        d.agents[0].da = s(0.01);
        let pert = apply_uncertainty(&model, &d).unwrap();
        assert!((pert.agents[0].a[(0, 0)] - 0.51).abs() < 1e-15);
        assert_eq!(model.agents[0].a[(0, 0)], 0.5);
    }

    #[test]
    fn uncertainty_shape_mismatch() {
        let model = MasModel::new(vec![scalar_agent(0.5, 1.0, 1.0, 0.0)], Exosystem::new(s(1.0)).unwrap())
            .unwrap();
        let mut d = UncertaintyDelta::zero(&model);
        d.agents[0].db = Mat::zeros(2, 1);
        assert!(matches!(apply_uncertainty(&model, &d), Err(PlantError::ShapeMismatch(_))));
    }

    #[test]
    fn mismatched_output_dimension_rejected() {
        let a = scalar_agent(0.5, 1.0, 1.0, 0.0);
        let b = AgentPlant::new(s(0.5), s(1.0), Mat::zeros(2, 1), Mat::zeros(2, 1)).unwrap();
        let err = MasModel::new(vec![a, b], Exosystem::new(s(1.0)).unwrap()).unwrap_err();
        assert!(matches!(err, PlantError::Dimension { agent: 1, .. }));
    }
}
