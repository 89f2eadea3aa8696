//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rcorp_core::assembly::{assemble_global, assemble_local, GlobalAssembly, LocalAssembly};
use rcorp_core::graph::{build_graph_matrices, has_spanning_tree, AugmentedGraph};
use rcorp_core::internal_model::{build_p_copy, verify_p_copy, InternalModel, InternalModelPair};
use rcorp_core::linalg::Mat;
use rcorp_core::plant::{pbh_failures, transmission_rank_failures, AgentPlant, Exosystem, MasModel};
use rcorp_core::verification::sample_rng;

pub struct Instance {
    pub graph: AugmentedGraph,
    pub model: MasModel,
    pub im: InternalModel,
    pub ga: GlobalAssembly,
    pub la: Vec<LocalAssembly>,
}

impl Instance {
    pub fn new(graph: AugmentedGraph, model: MasModel, im: InternalModel) -> Self {
        let gm = build_graph_matrices(&graph, model.p()).expect("graph has a spanning tree");
        let ga = assemble_global(&model, &im, &gm).expect("consistent instance");
        let la = assemble_local(&model, &im).expect("consistent instance");
        Self { graph, model, im, ga, la }
    }
}

pub fn rng(seed: u64, index: u64) -> ChaCha8Rng {
    sample_rng(seed, index)
}

pub fn uniform(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..=scale))
}

/// Rotation by `theta` scaled by `radius`.
fn rotation(theta: f64, radius: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::from_row_slice(2, 2, &[c, -s, s, c]) * radius
}

/// Exosystem with every eigenvalue of modulus in `[1, max_radius]`.
pub fn antistable_exosystem(rng: &mut impl Rng, max_radius: f64) -> Exosystem {
    let radius = if max_radius > 1.0 { rng.random_range(1.0..=max_radius) } else { 1.0 };
    let a0 = match rng.random_range(0..3) {
        0 => Mat::from_element(1, 1, radius),
        1 => Mat::from_element(1, 1, -radius),
        _ => rotation(rng.random_range(0.3..2.8), radius),
    };
    Exosystem::new(a0).expect("square")
}

/// p-copy internal model with an independent block-diagonal similarity per agent.
pub fn random_internal_model(rng: &mut impl Rng, a0: &Mat, p: usize, n_agents: usize) -> InternalModel {
    let base = build_p_copy(a0, p, n_agents);
    let pairs = base
        .pairs
        .iter()
        .map(|pair| {
            let h = pair.nz() / p;
            let blocks: Vec<Mat> = (0..p).map(|_| Mat::identity(h, h) + uniform(rng, h, h, 0.3)).collect();
            let t = rcorp_core::linalg::block_diag(&blocks);
            let ti = t.clone().try_inverse().expect("diagonally dominant");
            InternalModelPair { g1: &t * &pair.g1 * ti, g2: &t * &pair.g2 * rng.random_range(0.5..2.0) }
        })
        .collect();
    let im = InternalModel::new(p, pairs).expect("consistent sizes");
    assert!(verify_p_copy(&im, a0), "block-diagonal similarity keeps the p-copy");
    im
}

pub fn random_agent(rng: &mut impl Rng, n: usize, m: usize, p: usize, a_scale: f64, with_d: bool) -> AgentPlant {
    let a = uniform(rng, n, n, a_scale);
    let b = uniform(rng, n, m, 1.0);
    let c = uniform(rng, p, n, 1.0);
    let d = if with_d { uniform(rng, p, m, 0.5) } else { Mat::zeros(p, m) };
    AgentPlant::new(a, b, c, d).expect("consistent shapes")
}

/// Rejection-samples an agent that is stabilizable and satisfies the
/// transmission rank condition at every eigenvalue of `exo`.
pub fn admissible_agent(
    rng: &mut impl Rng,
    exo: &Exosystem,
    n: usize,
    m: usize,
    p: usize,
    a_scale: f64,
    with_d: bool,
) -> AgentPlant {
    loop {
        let ag = random_agent(rng, n, m, p, a_scale, with_d);
        let stab = pbh_failures(&ag.a, &ag.b).map(|f| f.is_empty()).unwrap_or(false);
        let trans = transmission_rank_failures(&ag, exo).map(|f| f.is_empty()).unwrap_or(false);
        if stab && trans {
            return ag;
        }
    }
}

/// Random DAG over `n >= 2` followers; roots are always pinned and at least
/// one follower is not.
pub fn random_acyclic_graph(rng: &mut impl Rng, n: usize) -> AugmentedGraph {
    loop {
        let g = random_dag(rng, n);
        if g.pinned_count() < n {
            return g;
        }
    }
}

fn random_dag(rng: &mut impl Rng, n: usize) -> AugmentedGraph {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut adj = Mat::zeros(n, n);
    let mut pin = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[..pos] {
            if rng.random_bool(0.5) {
                adj[(i, j)] = rng.random_range(0.2..1.5);
            }
        }
        let has_in = adj.row(i).iter().any(|&w| w > 0.0);
        if !has_in || rng.random_bool(0.3) {
            pin[i] = rng.random_range(0.2..1.5);
        }
    }
    AugmentedGraph::new(adj, pin).expect("valid weights")
}

/// Random digraph with a spanning tree and an unpinned follower; cycles allowed.
pub fn random_graph(rng: &mut impl Rng, n: usize, weight: f64, pin_range: (f64, f64)) -> AugmentedGraph {
    loop {
        let adj = Mat::from_fn(n, n, |i, j| if i != j && rng.random_bool(0.5) { rng.random_range(0.0..weight) } else { 0.0 });
        let pin: Vec<f64> =
            (0..n).map(|_| if rng.random_bool(0.6) { rng.random_range(pin_range.0..pin_range.1) } else { 0.0 }).collect();
        let g = AugmentedGraph::new(adj, pin).expect("valid weights");
        if has_spanning_tree(&g) && g.pinned_count() < n {
            return g;
        }
    }
}

/// Acyclic instance with `2 <= N <= 5`, `n_i <= 3`, an antistable exosystem
/// and admissible agents.
pub fn acyclic_instance(rng: &mut impl Rng) -> Instance {
    let n_agents = rng.random_range(2..=5);
    let p = rng.random_range(1..=2);
    let exo = antistable_exosystem(rng, 1.2);
    let agents = (0..n_agents)
        .map(|_| {
            let n = rng.random_range(1..=3);
            let m = rng.random_range(p..=2);
            let with_d = rng.random_bool(0.5) || n < p;
            admissible_agent(rng, &exo, n, m, p, 1.2, with_d)
        })
        .collect();
    let model = MasModel::new(agents, exo).expect("consistent");
    let im = random_internal_model(rng, &model.exo.a0, p, n_agents);
    let graph = random_acyclic_graph(rng, n_agents);
    Instance::new(graph, model, im)
}

/// Weakly coupled, possibly cyclic graph whose coupling weight threshold
/// is below `r_max`. Two followers always give a threshold of at least one,
/// so `n >= 3` is needed for `r_max <= 1`.
pub fn weak_graph(rng: &mut impl Rng, n: usize, r_max: f64) -> AugmentedGraph {
    loop {
        let g = random_graph(rng, n, 0.2, (0.5, 1.5));
        if build_graph_matrices(&g, 1).is_ok_and(|gm| gm.r_threshold < r_max) {
            return g;
        }
    }
}

/// Weakly coupled instance with `D_i = 0`, a marginally stable exosystem
/// and `r_threshold < 0.9`, suited to the agent-wise synthesis.
pub fn local_instance(rng: &mut impl Rng) -> Instance {
    let n_agents = rng.random_range(3..=4);
    let exo = antistable_exosystem(rng, 1.0);
    let graph = weak_graph(rng, n_agents, 0.9);
    let agents = (0..n_agents)
        .map(|_| {
            let n = rng.random_range(1..=2);
            admissible_agent(rng, &exo, n, 1, 1, 1.0, false)
        })
        .collect();
    let model = MasModel::new(agents, exo).expect("consistent");
    let im = random_internal_model(rng, &model.exo.a0, 1, n_agents);
    Instance::new(graph, model, im)
}

/// General instance with a spanning tree and admissible generic plants.
pub fn general_instance(rng: &mut impl Rng) -> Instance {
    let n_agents = rng.random_range(2..=4);
    let p = rng.random_range(1..=2);
    let exo = antistable_exosystem(rng, 1.3);
    let agents = (0..n_agents)
        .map(|_| {
            let n = rng.random_range(1..=3);
            let m = rng.random_range(p..=3);
            let with_d = rng.random_bool(0.5) || n < p;
            admissible_agent(rng, &exo, n, m, p, 1.5, with_d)
        })
        .collect();
    let model = MasModel::new(agents, exo).expect("consistent");
    let im = random_internal_model(rng, &model.exo.a0, p, n_agents);
    let graph = random_graph(rng, n_agents, 1.0, (0.2, 1.5));
    Instance::new(graph, model, im)
}
