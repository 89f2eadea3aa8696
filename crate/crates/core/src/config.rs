//! JSON run configuration and gain files.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{AgentGainSpec, GainSet};
use crate::graph::{AugmentedGraph, GraphError, GraphSpec};
use crate::internal_model::{self, InternalModel, InternalModelError, InternalModelPair};
use crate::linalg::{self, Mat};
use crate::verification::InitialState;
use crate::plant::{
    AgentDelta, AgentPlant, ExogenousChannels, Exosystem, MasModel, PlantError, UncertaintyDelta,
};

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    InternalModel(#[from] InternalModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
    #[serde(rename = "D")]
    pub d: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExosystemSpec {
    #[serde(rename = "A0")]
    pub a0: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    #[serde(rename = "G1")]
    pub g1: Rows,
    #[serde(rename = "G2")]
    pub g2: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSpec {
    #[serde(rename = "dA")]
    pub da: Rows,
    #[serde(rename = "dB")]
    pub db: Rows,
    #[serde(rename = "dC")]
    pub dc: Rows,
    #[serde(rename = "dD")]
    pub dd: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesisPath {
    #[default]
    Global,
    Local,
    Acyclic,
    /// Certificate check of gains supplied with `--gains`.
    Check,
}

impl std::str::FromStr for SynthesisPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            "acyclic" => Ok(Self::Acyclic),
            "check" => Ok(Self::Check),
            other => Err(format!("unknown synthesis path '{other}'")),
        }
    }
}

impl std::fmt::Display for SynthesisPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Global => "global",
            Self::Local => "local",
            Self::Acyclic => "acyclic",
            Self::Check => "check",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default)]
    pub path: SynthesisPath,
    /// Per-agent coupling weights for the local path; defaults to the threshold.
    #[serde(default)]
    pub r: Option<Vec<f64>>,
}

fn default_horizon() -> usize {
    200
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub v0: Option<Vec<f64>>,
    #[serde(default)]
    pub x0: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub z0: Option<Vec<Vec<f64>>>,
    /// Half-width of the uniform draw for unspecified initial states.
    #[serde(default = "default_scale")]
    pub init_scale: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { horizon: default_horizon(), v0: None, x0: None, z0: None, init_scale: default_scale() }
    }
}

fn default_rho() -> f64 {
    1e-3
}
fn default_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self { rho: default_rho(), samples: default_samples() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub graph: GraphSpec,
    pub agents: Vec<AgentSpec>,
    pub exosystem: ExosystemSpec,
    /// One pair shared by all agents, or one per agent. Built from `A0` when absent.
    #[serde(default)]
    pub internal_model: Option<Vec<PairSpec>>,
    #[serde(default, rename = "E")]
    pub e: Option<Vec<Rows>>,
    #[serde(default, rename = "F_ref")]
    pub f_ref: Option<Rows>,
    #[serde(default)]
    pub delta: Option<Vec<DeltaSpec>>,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// Everything a command needs, validated.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: RunConfig,
    pub graph: AugmentedGraph,
    pub model: MasModel,
    pub im: InternalModel,
    pub channels: ExogenousChannels,
    pub delta: Option<UncertaintyDelta>,
}

fn mat(rows: &Rows, what: &str) -> Result<Mat, ConfigError> {
    linalg::from_rows(rows).map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))
}

/// Rows with a declared column count, so that `n x 0` blocks survive JSON.
fn mat_cols(rows: &Rows, cols: usize, what: &str) -> Result<Mat, ConfigError> {
    if rows.iter().all(|r| r.is_empty()) {
        return Ok(Mat::zeros(rows.len(), cols));
    }
    mat(rows, what)
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn build(&self) -> Result<Scenario, ConfigError> {
        let graph = AugmentedGraph::from_spec(&self.graph)?;
        let n = graph.n_followers();
        if self.agents.len() != n {
            return Err(ConfigError::Invalid(format!("{} agents for {n} followers", self.agents.len())));
        }
        let mut agents = Vec::with_capacity(n);
        for (i, a) in self.agents.iter().enumerate() {
            let am = mat(&a.a, &format!("agent {i} A"))?;
            let bm = mat_cols(&a.b, 0, &format!("agent {i} B"))?;
            let cm = mat(&a.c, &format!("agent {i} C"))?;
            let dm = mat_cols(&a.d, bm.ncols(), &format!("agent {i} D"))?;
            agents.push(AgentPlant::new(am, bm, cm, dm).map_err(|e| match e {
                PlantError::Dimension { what, .. } => PlantError::Dimension { agent: i, what },
                other => other,
            })?);
        }
        let exo = Exosystem::new(mat(&self.exosystem.a0, "A0")?)?;
        let model = MasModel::new(agents, exo)?;
        let p = model.p();

        let im = match &self.internal_model {
            None => internal_model::build_p_copy(&model.exo.a0, p, n),
            Some(pairs) => {
                let parsed = pairs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Ok(InternalModelPair {
                            g1: mat(&s.g1, &format!("internal model {i} G1"))?,
                            g2: mat(&s.g2, &format!("internal model {i} G2"))?,
                        })
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                let pairs = match parsed.len() {
                    1 => vec![parsed[0].clone(); n],
                    k if k == n => parsed,
                    k => {
                        return Err(ConfigError::Invalid(format!(
                            "internal_model lists {k} pairs; expected 1 or {n}"
                        )))
                    }
                };
                InternalModel::new(p, pairs)?
            }
        };

        let n0 = model.exo.n0();
        let mut channels = ExogenousChannels::zero(&model);
        if let Some(es) = &self.e {
            if es.len() != n {
                return Err(ConfigError::Invalid(format!("E lists {} matrices for {n} agents", es.len())));
            }
            channels.e = es.iter().enumerate().map(|(i, e)| mat(e, &format!("E_{i}"))).collect::<Result<_, _>>()?;
        }
        if let Some(f) = &self.f_ref {
            channels.f_ref = mat(f, "F_ref")?;
        }
        channels.validate(&model)?;

        let delta = match &self.delta {
            None => None,
            Some(ds) => {
                if ds.len() != n {
                    return Err(ConfigError::Invalid(format!("delta lists {} agents for {n}", ds.len())));
                }
                let agents = ds
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let ag = &model.agents[i];
                        Ok(AgentDelta {
                            da: mat(&d.da, &format!("delta {i} dA"))?,
                            db: mat_cols(&d.db, ag.m(), &format!("delta {i} dB"))?,
                            dc: mat(&d.dc, &format!("delta {i} dC"))?,
                            dd: mat_cols(&d.dd, ag.m(), &format!("delta {i} dD"))?,
                        })
                    })
                    .collect::<Result<Vec<_>, ConfigError>>()?;
                let delta = UncertaintyDelta { agents };
                crate::plant::apply_uncertainty(&model, &delta)?;
                Some(delta)
            }
        };

        if let Some(r) = &self.synthesis.r {
            if r.len() != n {
                return Err(ConfigError::Invalid(format!("synthesis.r lists {} weights for {n} agents", r.len())));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(ConfigError::Invalid("synthesis.r must be finite".into()));
            }
        }
        let sim = &self.simulation;
        if sim.horizon == 0 {
            return Err(ConfigError::Invalid("simulation.horizon must be at least 1".into()));
        }
        if let Some(v0) = &sim.v0 {
            if v0.len() != n0 {
                return Err(ConfigError::Invalid(format!("simulation.v0 has length {}, expected {n0}", v0.len())));
            }
        }
        if let Some(x0) = &sim.x0 {
            if x0.len() != n || x0.iter().zip(&model.agents).any(|(x, a)| x.len() != a.n()) {
                return Err(ConfigError::Invalid("simulation.x0 does not match the agent state sizes".into()));
            }
        }
        if let Some(z0) = &sim.z0 {
            if z0.len() != n || z0.iter().any(|z| z.len() != im.nz()) {
                return Err(ConfigError::Invalid("simulation.z0 does not match the controller size".into()));
            }
        }
        if !(self.robustness.rho >= 0.0 && self.robustness.rho.is_finite()) {
            return Err(ConfigError::Invalid("robustness.rho must be a nonnegative number".into()));
        }
        Ok(Scenario { config: self.clone(), graph, model, im, channels, delta })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Offending agents and eigenvalues.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub conditions: Vec<ConditionResult>,
    pub all_passed: bool,
}

fn fmt_lambda(re: f64, im: f64) -> String {
    if im == 0.0 {
        format!("{re:.6}")
    } else {
        format!("{re:.6}{im:+.6}i")
    }
}

impl Scenario {
    /// Initial conditions from the simulation section; missing vectors are
    /// drawn uniformly from `[-init_scale, init_scale]` with the config seed.
    pub fn initial_state(&self) -> Result<InitialState, ConfigError> {
        let sim = &self.config.simulation;
        let scale = sim.init_scale;
        let mut rng = crate::verification::sample_rng(self.config.seed, 0);
        let mut draw = |n: usize| {
            DVector::from_fn(n, |_, _| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
        };
        let nz = self.im.nz();
        let n_agents = self.model.n_agents();
        let sized = |v: &[f64], n: usize, what: String| {
            if v.len() == n {
                Ok(DVector::from_column_slice(v))
            } else {
                Err(ConfigError::Invalid(format!("{what} has length {}, expected {n}", v.len())))
            }
        };
        let x0 = match &sim.x0 {
            Some(rows) if rows.len() != n_agents => {
                return Err(ConfigError::Invalid(format!("simulation.x0 lists {} agents, expected {n_agents}", rows.len())))
            }
            Some(rows) => rows
                .iter()
                .zip(&self.model.agents)
                .enumerate()
                .map(|(i, (v, a))| sized(v, a.n(), format!("simulation.x0[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
            None => self.model.agents.iter().map(|a| draw(a.n())).collect(),
        };
        let z0 = match &sim.z0 {
            Some(rows) if rows.len() != n_agents => {
                return Err(ConfigError::Invalid(format!("simulation.z0 lists {} agents, expected {n_agents}", rows.len())))
            }
            Some(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, v)| sized(v, nz, format!("simulation.z0[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
            None => (0..n_agents).map(|_| draw(nz)).collect(),
        };
        let v0 = match &sim.v0 {
            Some(v) => sized(v, self.model.exo.n0(), "simulation.v0".into())?,
            None => draw(self.model.exo.n0()),
        };
        Ok(InitialState { x0, z0, v0 })
    }

    /// Standing conditions: spanning tree, antistable exosystem, stabilizable
    /// agents, transmission rank at `spec(A0)`, and a p-copy internal model.
    pub fn check_conditions(&self) -> ConditionReport {
        let mut conditions = Vec::with_capacity(5);

        let reach = crate::graph::reachable_from_leader(&self.graph);
        let mut unreached: Vec<String> =
            reach.iter().enumerate().filter(|(_, &r)| !r).map(|(i, _)| format!("follower {} unreachable from the leader", i + 1)).collect();
        if unreached.is_empty() {
            if let Err(e) = crate::graph::build_graph_matrices(&self.graph, self.model.p()) {
                unreached.push(e.to_string());
            }
        }
        conditions.push(ConditionResult { id: 1, name: "augmented graph has a spanning tree rooted at the leader", passed: unreached.is_empty(), diagnostics: unreached });

        let exo_diag = match crate::plant::exosystem_stable_modes(&self.model.exo) {
            Ok(modes) => modes.iter().map(|l| format!("stable mode {}", fmt_lambda(l.re, l.im))).collect(),
            Err(e) => vec![e.to_string()],
        };
        conditions.push(ConditionResult { id: 2, name: "exosystem is antistable", passed: exo_diag.is_empty(), diagnostics: exo_diag });

        let mut stab = Vec::new();
        let mut trans = Vec::new();
        for (i, a) in self.model.agents.iter().enumerate() {
            match crate::plant::pbh_failures(&a.a, &a.b) {
                Ok(f) => stab.extend(f.iter().map(|r| {
                    format!("agent {}: rank {} < {} at {}", i + 1, r.rank, r.required, fmt_lambda(r.lambda_re, r.lambda_im))
                })),
                Err(e) => stab.push(format!("agent {}: {e}", i + 1)),
            }
            match crate::plant::transmission_rank_failures(a, &self.model.exo) {
                Ok(f) => trans.extend(f.iter().map(|r| {
                    format!("agent {}: rank {} != {} at {}", i + 1, r.rank, r.required, fmt_lambda(r.lambda_re, r.lambda_im))
                })),
                Err(e) => trans.push(format!("agent {}: {e}", i + 1)),
            }
        }
        conditions.push(ConditionResult { id: 3, name: "every (A_i, B_i) is stabilizable", passed: stab.is_empty(), diagnostics: stab });
        conditions.push(ConditionResult {
            id: 4,
            name: "[A_i - lambda I, B_i; C_i, D_i] has full row rank at every eigenvalue of A0",
            passed: trans.is_empty(),
            diagnostics: trans,
        });

        let a0 = &self.model.exo.a0;
        let pcopy: Vec<String> = self
            .im
            .pairs
            .iter()
            .enumerate()
            .flat_map(|(i, pair)| {
                internal_model::p_copy_defects(pair, self.im.p, a0).into_iter().map(move |d| format!("agent {}: {d:?}", i + 1))
            })
            .collect();
        conditions.push(ConditionResult { id: 5, name: "(G1_i, G2_i) is a p-copy internal model of A0", passed: pcopy.is_empty(), diagnostics: pcopy });

        let all_passed = conditions.iter().all(|c| c.passed);
        ConditionReport { conditions, all_passed }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GainsMeta {
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub margins: Vec<f64>,
    #[serde(default)]
    pub r_i: Option<Vec<f64>>,
    #[serde(default)]
    pub spectral_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub agents: Vec<AgentGainSpec>,
    #[serde(default)]
    pub meta: GainsMeta,
}

impl GainsFile {
    pub fn new(gains: &GainSet, meta: GainsMeta) -> Self {
        Self { agents: gains.to_spec(), meta }
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("gains serialize")
    }

    /// Gains checked against the scenario's dimensions.
    pub fn gains_for(&self, sc: &Scenario) -> Result<GainSet, ConfigError> {
        let mut k1 = Vec::new();
        let mut k2 = Vec::new();
        for (i, s) in self.agents.iter().enumerate() {
            let n = sc.model.agents.get(i).map_or(0, |a| a.n());
            k1.push(mat_cols(&s.k1, n, &format!("K1 of agent {i}"))?);
            k2.push(mat_cols(&s.k2, sc.im.nz(), &format!("K2 of agent {i}"))?);
        }
        let gains = GainSet { k1, k2 };
        let dims = crate::assembly::model_dims(&sc.model, &sc.im);
        gains.check_dims(&dims).map_err(|e| ConfigError::Invalid(format!("gain file: {e}")))?;
        Ok(gains)
    }
}
