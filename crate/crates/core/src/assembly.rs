//! Composite closed-loop matrices, the per-agent local matrices, the
//! `x_g -> xi` permutation and the stabilizability test of the augmented pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphMatrices;
use crate::internal_model::InternalModel;
use crate::linalg::{self, CMat, Mat, C64};
use crate::plant::{self, ExogenousChannels, MasModel, RankFailure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("gain entry ({row}, {col}) = {value} lies outside the decentralized block pattern")]
    StructureViolation { row: usize, col: usize, value: f64 },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Per-agent state, input and controller dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    pub nz: usize,
    pub p: usize,
}

impl Dims {
    pub fn n_agents(&self) -> usize {
        self.n.len()
    }
    pub fn n_bar(&self) -> usize {
        self.n.iter().sum()
    }
    pub fn m_bar(&self) -> usize {
        self.m.iter().sum()
    }
    /// Size of `x_g = [x; z]`.
    pub fn total(&self) -> usize {
        self.n_bar() + self.n_agents() * self.nz
    }
    pub fn x_offset(&self, i: usize) -> usize {
        self.n[..i].iter().sum()
    }
    pub fn z_offset(&self, i: usize) -> usize {
        self.n_bar() + i * self.nz
    }
    pub fn u_offset(&self, i: usize) -> usize {
        self.m[..i].iter().sum()
    }
}

/// Decentralized gains `K1_i` (m_i x n_i) and `K2_i` (m_i x n_z).
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub k1: Vec<Mat>,
    pub k2: Vec<Mat>,
}

/// JSON form: `{"K1": [[...]], "K2": [[...]]}` per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentGainSpec {
    #[serde(rename = "K1")]
    pub k1: Vec<Vec<f64>>,
    #[serde(rename = "K2")]
    pub k2: Vec<Vec<f64>>,
}

impl GainSet {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            k1: dims.n.iter().zip(&dims.m).map(|(&n, &m)| Mat::zeros(m, n)).collect(),
            k2: dims.m.iter().map(|&m| Mat::zeros(m, dims.nz)).collect(),
        }
    }

    pub fn from_local(ks: &[Mat], dims: &Dims) -> Result<Self, AssemblyError> {
        if ks.len() != dims.n_agents() {
            return Err(AssemblyError::DimensionMismatch(format!(
                "{} local gains for {} agents",
                ks.len(),
                dims.n_agents()
            )));
        }
        let mut k1 = Vec::new();
        let mut k2 = Vec::new();
        for (i, k) in ks.iter().enumerate() {
            if k.shape() != (dims.m[i], dims.n[i] + dims.nz) {
                return Err(AssemblyError::DimensionMismatch(format!(
                    "K_{i} is {}x{}, expected {}x{}",
                    k.nrows(),
                    k.ncols(),
                    dims.m[i],
                    dims.n[i] + dims.nz
                )));
            }
            k1.push(k.columns(0, dims.n[i]).into_owned());
            k2.push(k.columns(dims.n[i], dims.nz).into_owned());
        }
        Ok(Self { k1, k2 })
    }

    /// `K_i = [K1_i K2_i]`
    pub fn local(&self, i: usize) -> Mat {
        linalg::hstack(&[&self.k1[i], &self.k2[i]])
    }

    pub fn check_dims(&self, dims: &Dims) -> Result<(), AssemblyError> {
        if self.k1.len() != dims.n_agents() || self.k2.len() != dims.n_agents() {
            return Err(AssemblyError::DimensionMismatch(format!(
                "gains for {} agents, model has {}",
                self.k1.len(),
                dims.n_agents()
            )));
        }
        for i in 0..dims.n_agents() {
            if self.k1[i].shape() != (dims.m[i], dims.n[i]) || self.k2[i].shape() != (dims.m[i], dims.nz) {
                return Err(AssemblyError::DimensionMismatch(format!(
                    "agent {i}: K1 {}x{}, K2 {}x{}, expected {}x{} and {}x{}",
                    self.k1[i].nrows(),
                    self.k1[i].ncols(),
                    self.k2[i].nrows(),
                    self.k2[i].ncols(),
                    dims.m[i],
                    dims.n[i],
                    dims.m[i],
                    dims.nz
                )));
            }
        }
        Ok(())
    }

    /// Dense `K = [diag(K1_i) diag(K2_i)]`.
    pub fn to_dense(&self, dims: &Dims) -> Result<Mat, AssemblyError> {
        self.check_dims(dims)?;
        let mut k = Mat::zeros(dims.m_bar(), dims.total());
        for i in 0..dims.n_agents() {
            let r = dims.u_offset(i);
            k.view_mut((r, dims.x_offset(i)), self.k1[i].shape()).copy_from(&self.k1[i]);
            k.view_mut((r, dims.z_offset(i)), self.k2[i].shape()).copy_from(&self.k2[i]);
        }
        Ok(k)
    }

    /// Extracts the blocks of a dense gain, rejecting any nonzero outside them.
    pub fn from_dense(k: &Mat, dims: &Dims) -> Result<Self, AssemblyError> {
        if k.shape() != (dims.m_bar(), dims.total()) {
            return Err(AssemblyError::DimensionMismatch(format!(
                "dense gain is {}x{}, expected {}x{}",
                k.nrows(),
                k.ncols(),
                dims.m_bar(),
                dims.total()
            )));
        }
        let mask = gain_mask(dims);
        for r in 0..k.nrows() {
            for c in 0..k.ncols() {
                if !mask[(r, c)] && k[(r, c)] != 0.0 {
                    return Err(AssemblyError::StructureViolation { row: r, col: c, value: k[(r, c)] });
                }
            }
        }
        let mut out = Self::zeros(dims);
        for i in 0..dims.n_agents() {
            let r = dims.u_offset(i);
            out.k1[i] = k.view((r, dims.x_offset(i)), (dims.m[i], dims.n[i])).into_owned();
            out.k2[i] = k.view((r, dims.z_offset(i)), (dims.m[i], dims.nz)).into_owned();
        }
        Ok(out)
    }

    pub fn to_spec(&self) -> Vec<AgentGainSpec> {
        self.k1
            .iter()
            .zip(&self.k2)
            .map(|(a, b)| AgentGainSpec { k1: linalg::to_rows(a), k2: linalg::to_rows(b) })
            .collect()
    }

    pub fn from_spec(spec: &[AgentGainSpec]) -> Result<Self, AssemblyError> {
        let mut k1 = Vec::new();
        let mut k2 = Vec::new();
        for s in spec {
            k1.push(linalg::from_rows(&s.k1)?);
            k2.push(linalg::from_rows(&s.k2)?);
        }
        Ok(Self { k1, k2 })
    }
}

/// Sparsity pattern of the structured gain.
pub fn gain_mask(dims: &Dims) -> nalgebra::DMatrix<bool> {
    let mut mask = nalgebra::DMatrix::from_element(dims.m_bar(), dims.total(), false);
    for i in 0..dims.n_agents() {
        let r = dims.u_offset(i);
        for a in 0..dims.m[i] {
            for c in 0..dims.n[i] {
                mask[(r + a, dims.x_offset(i) + c)] = true;
            }
            for c in 0..dims.nz {
                mask[(r + a, dims.z_offset(i) + c)] = true;
            }
        }
    }
    mask
}

/// Pattern of the bordered Lyapunov matrix
/// `[diag(P1_i) diag(Po_i); diag(Po_i^T) diag(P2_i)]`.
pub fn bordered_mask(dims: &Dims) -> nalgebra::DMatrix<bool> {
    let t = dims.total();
    let mut mask = nalgebra::DMatrix::from_element(t, t, false);
    for i in 0..dims.n_agents() {
        let idx: Vec<usize> = (dims.x_offset(i)..dims.x_offset(i) + dims.n[i])
            .chain(dims.z_offset(i)..dims.z_offset(i) + dims.nz)
            .collect();
        for &r in &idx {
            for &c in &idx {
                mask[(r, c)] = true;
            }
        }
    }
    mask
}

/// Closed-loop state and output matrices for one gain.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a_g: Mat,
    pub c_g: Mat,
}

/// Global composite matrices for one (possibly perturbed) model.
#[derive(Debug, Clone)]
pub struct GlobalAssembly {
    pub dims: Dims,
    pub model: MasModel,
    pub im: InternalModel,
    pub gm: GraphMatrices,
    /// `[diag(A_i) 0; diag(G2_i) W diag(C_i) diag(G1_i)]`
    pub a: Mat,
    /// `[diag(B_i); diag(G2_i) W diag(D_i)]`
    pub b: Mat,
    /// Permutation with `t * x_g = [x_1; z_1; ...; x_N; z_N]`.
    pub t: Mat,
    pub c_diag: Mat,
    pub d_diag: Mat,
    pub g1_diag: Mat,
    pub g2_diag: Mat,
}

pub fn model_dims(model: &MasModel, im: &InternalModel) -> Dims {
    Dims {
        n: model.agents.iter().map(|a| a.n()).collect(),
        m: model.agents.iter().map(|a| a.m()).collect(),
        nz: im.nz(),
        p: model.p(),
    }
}

fn check_consistency(model: &MasModel, im: &InternalModel, gm: &GraphMatrices) -> Result<(), AssemblyError> {
    let n = model.n_agents();
    if im.n_agents() != n {
        return Err(AssemblyError::DimensionMismatch(format!(
            "internal model has {} agents, model has {n}",
            im.n_agents()
        )));
    }
    if gm.fa.nrows() != n {
        return Err(AssemblyError::DimensionMismatch(format!(
            "graph has {} followers, model has {n}",
            gm.fa.nrows()
        )));
    }
    if gm.p != model.p() || im.p != model.p() {
        return Err(AssemblyError::DimensionMismatch(format!(
            "output dimension: model {}, graph {}, internal model {}",
            model.p(),
            gm.p,
            im.p
        )));
    }
    Ok(())
}

/// `T = [diag([I_{n_i}; 0]) diag([0; I_{n_z}])]`
pub fn permutation_t(dims: &Dims) -> Mat {
    let t = dims.total();
    let mut m = Mat::zeros(t, t);
    let mut row = 0;
    for i in 0..dims.n_agents() {
        for k in 0..dims.n[i] {
            m[(row, dims.x_offset(i) + k)] = 1.0;
            row += 1;
        }
        for k in 0..dims.nz {
            m[(row, dims.z_offset(i) + k)] = 1.0;
            row += 1;
        }
    }
    m
}

pub fn assemble_global(
    model: &MasModel,
    im: &InternalModel,
    gm: &GraphMatrices,
) -> Result<GlobalAssembly, AssemblyError> {
    check_consistency(model, im, gm)?;
    let dims = model_dims(model, im);
    let a_diag = linalg::block_diag(&model.agents.iter().map(|a| a.a.clone()).collect::<Vec<_>>());
    let b_diag = linalg::block_diag(&model.agents.iter().map(|a| a.b.clone()).collect::<Vec<_>>());
    let c_diag = linalg::block_diag(&model.agents.iter().map(|a| a.c.clone()).collect::<Vec<_>>());
    let d_diag = linalg::block_diag(&model.agents.iter().map(|a| a.d.clone()).collect::<Vec<_>>());
    let g1_diag = linalg::block_diag(&im.pairs.iter().map(|p| p.g1.clone()).collect::<Vec<_>>());
    let g2_diag = linalg::block_diag(&im.pairs.iter().map(|p| p.g2.clone()).collect::<Vec<_>>());
    let g2w = &g2_diag * &gm.w;
    let nz_tot = dims.n_agents() * dims.nz;
    let a = linalg::block2(&a_diag, &Mat::zeros(dims.n_bar(), nz_tot), &(&g2w * &c_diag), &g1_diag);
    let b = linalg::vstack(&[&b_diag, &(&g2w * &d_diag)]);
    let t = permutation_t(&dims);
    Ok(GlobalAssembly {
        dims,
        model: model.clone(),
        im: im.clone(),
        gm: gm.clone(),
        a,
        b,
        t,
        c_diag,
        d_diag,
        g1_diag,
        g2_diag,
    })
}

impl GlobalAssembly {
    /// Reassembles with the same internal model and graph for another plant.
    pub fn with_model(&self, model: &MasModel) -> Result<GlobalAssembly, AssemblyError> {
        assemble_global(model, &self.im, &self.gm)
    }

    pub fn closed_loop(&self, k: &GainSet) -> Result<ClosedLoop, AssemblyError> {
        closed_loop(self, k)
    }

    /// `B_g = [diag(E_i); -diag(G2_i) W (I_N ⊗ F)]`
    pub fn b_g(&self, ch: &ExogenousChannels) -> Result<Mat, AssemblyError> {
        ch.validate(&self.model).map_err(|e| AssemblyError::DimensionMismatch(e.to_string()))?;
        let n = self.dims.n_agents();
        let e_diag = linalg::block_diag(&ch.e);
        let fa = Mat::identity(n, n).kronecker(&ch.f_ref);
        let lower = -(&self.g2_diag * &self.gm.w * fa);
        Ok(linalg::vstack(&[&e_diag, &lower]))
    }

    /// `D_g = -(I_N ⊗ F)`
    pub fn d_g(&self, f_ref: &Mat) -> Mat {
        let n = self.dims.n_agents();
        -Mat::identity(n, n).kronecker(f_ref)
    }

    /// `A_0a = I_N ⊗ A_0`
    pub fn a0a(&self) -> Mat {
        let n = self.dims.n_agents();
        Mat::identity(n, n).kronecker(&self.model.exo.a0)
    }
}

pub fn closed_loop(ga: &GlobalAssembly, k: &GainSet) -> Result<ClosedLoop, AssemblyError> {
    let kd = k.to_dense(&ga.dims)?;
    let a_g = &ga.a + &ga.b * &kd;
    let dims = &ga.dims;
    let mut c_g = Mat::zeros(dims.n_agents() * dims.p, dims.total());
    for (i, ag) in ga.model.agents.iter().enumerate() {
        let r = i * dims.p;
        let cx = &ag.c + &ag.d * &k.k1[i];
        let cz = &ag.d * &k.k2[i];
        c_g.view_mut((r, dims.x_offset(i)), cx.shape()).copy_from(&cx);
        c_g.view_mut((r, dims.z_offset(i)), cz.shape()).copy_from(&cz);
    }
    Ok(ClosedLoop { a_g, c_g })
}

/// Closed loop from a dense candidate gain; off-pattern entries are an error.
pub fn closed_loop_dense(ga: &GlobalAssembly, k: &Mat) -> Result<ClosedLoop, AssemblyError> {
    let gains = GainSet::from_dense(k, &ga.dims)?;
    closed_loop(ga, &gains)
}

/// Exosystem-free local matrices of one agent.
#[derive(Debug, Clone)]
pub struct LocalAssembly {
    /// `[A_i 0; G2_i C_i G1_i]`
    pub a_o: Mat,
    /// `[B_i; G2_i D_i]`
    pub b_o: Mat,
    /// `[0; -G2_i]`
    pub b_f: Mat,
    /// `[C_i 0]`
    pub c_o: Mat,
    pub d: Mat,
    pub n: usize,
    pub nz: usize,
}

impl LocalAssembly {
    pub fn a_f(&self, k: &Mat) -> Mat {
        &self.a_o + &self.b_o * k
    }
    pub fn c_f(&self, k: &Mat) -> Mat {
        &self.c_o + &self.d * k
    }
    pub fn m(&self) -> usize {
        self.b_o.ncols()
    }
    pub fn p(&self) -> usize {
        self.c_o.nrows()
    }
    pub fn size(&self) -> usize {
        self.n + self.nz
    }

    /// Matrices of the time-scaled agent `x⁺ = (A_f x + B_f μ) / alpha`;
    /// output maps are unchanged.
    pub fn scaled(&self, alpha: f64) -> LocalAssembly {
        LocalAssembly {
            a_o: &self.a_o / alpha,
            b_o: &self.b_o / alpha,
            b_f: &self.b_f / alpha,
            ..self.clone()
        }
    }
}

pub fn assemble_local(model: &MasModel, im: &InternalModel) -> Result<Vec<LocalAssembly>, AssemblyError> {
    if im.n_agents() != model.n_agents() || im.p != model.p() {
        return Err(AssemblyError::DimensionMismatch(format!(
            "internal model for {} agents / p = {}, model has {} agents / p = {}",
            im.n_agents(),
            im.p,
            model.n_agents(),
            model.p()
        )));
    }
    let nz = im.nz();
    let out = model
        .agents
        .iter()
        .zip(&im.pairs)
        .map(|(ag, pair)| {
            let n = ag.n();
            let a_o = linalg::block2(&ag.a, &Mat::zeros(n, nz), &(&pair.g2 * &ag.c), &pair.g1);
            let b_o = linalg::vstack(&[&ag.b, &(&pair.g2 * &ag.d)]);
            let b_f = linalg::vstack(&[&Mat::zeros(n, ag.p()), &(-&pair.g2)]);
            let c_o = linalg::hstack(&[&ag.c, &Mat::zeros(ag.p(), nz)]);
            LocalAssembly { a_o, b_o, b_f, c_o, d: ag.d.clone(), n, nz }
        })
        .collect();
    Ok(out)
}

/// `diag(A_fi) + diag(B_fi) (FA ⊗ I_p) diag(C_fi)`, in the per-agent ordering.
pub fn local_composite(la: &[LocalAssembly], k: &GainSet, gm: &GraphMatrices) -> Mat {
    let afs: Vec<Mat> = la.iter().enumerate().map(|(i, l)| l.a_f(&k.local(i))).collect();
    let bfs: Vec<Mat> = la.iter().map(|l| l.b_f.clone()).collect();
    let cfs: Vec<Mat> = la.iter().enumerate().map(|(i, l)| l.c_f(&k.local(i))).collect();
    let fa_p = gm.fa.kronecker(&Mat::identity(gm.p, gm.p));
    linalg::block_diag(&afs) + linalg::block_diag(&bfs) * fa_p * linalg::block_diag(&cfs)
}

/// `|| T A_g T^T - local_composite ||_F`
pub fn permutation_similarity(
    ga: &GlobalAssembly,
    la: &[LocalAssembly],
    k: &GainSet,
) -> Result<f64, AssemblyError> {
    let cl = closed_loop(ga, k)?;
    let lhs = &ga.t * &cl.a_g * ga.t.transpose();
    Ok((lhs - local_composite(la, k, &ga.gm)).norm())
}

/// Failed PBH point of the augmented pair, with a left null vector `w`
/// satisfying `w^H [A - lambda I, B] ≈ 0`.
#[derive(Debug, Clone, Serialize)]
pub struct PbhCertificate {
    pub failure: RankFailure,
    pub left_null_re: Vec<f64>,
    pub left_null_im: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilizabilityReport {
    pub stabilizable: bool,
    pub certificates: Vec<PbhCertificate>,
}

/// PBH test of `(A, B)` at every eigenvalue with `|lambda| >= 1`. The spectrum
/// of the block-triangular `A` is taken from its diagonal blocks.
pub fn pair_stabilizability(ga: &GlobalAssembly) -> Result<StabilizabilityReport, AssemblyError> {
    let mut cands: Vec<C64> = Vec::new();
    for ag in &ga.model.agents {
        cands.extend(linalg::distinct_eigenvalues(&ag.a)?);
    }
    for pair in &ga.im.pairs {
        cands.extend(linalg::distinct_eigenvalues(&pair.g1)?);
    }
    let mut uniq: Vec<C64> = Vec::new();
    for c in cands {
        if !uniq.iter().any(|u| (u - c).norm() < 1e-12 * (1.0 + c.norm())) {
            uniq.push(c);
        }
    }
    let failures = plant::pbh_failures_at(&ga.a, &ga.b, &uniq);
    let n = ga.a.nrows();
    let certificates = failures
        .into_iter()
        .map(|f| {
            let lambda = f.lambda();
            let m = plant::hstack_c(
                &(linalg::to_complex(&ga.a) - CMat::identity(n, n) * lambda),
                &linalg::to_complex(&ga.b),
            );
            let (w, residual) = linalg::left_null_vector(&m);
            PbhCertificate {
                failure: f,
                left_null_re: w.iter().map(|c| c.re).collect(),
                left_null_im: w.iter().map(|c| c.im).collect(),
                residual,
            }
        })
        .collect::<Vec<_>>();
    Ok(StabilizabilityReport { stabilizable: certificates.is_empty(), certificates })
}

pub fn check_pair_stabilizable(ga: &GlobalAssembly) -> bool {
    pair_stabilizability(ga).map(|r| r.stabilizable).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph_matrices, AugmentedGraph};
    use crate::internal_model::{InternalModelPair, build_p_copy};
    use crate::plant::{AgentPlant, Exosystem};

    fn s(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn example1() -> (MasModel, InternalModel, GraphMatrices) {
        let ag = AgentPlant::new(s(0.5), s(0.0), s(1.0), s(1.0)).unwrap();
        let model = MasModel::new(vec![ag.clone(), ag], Exosystem::new(s(10.0)).unwrap()).unwrap();
        let im = InternalModel::replicated(InternalModelPair { g1: s(10.0), g2: s(10.0) }, 1, 2);
        let g = AugmentedGraph::new(Mat::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), vec![1.0, 0.0]).unwrap();
        (model, im, build_graph_matrices(&g, 1).unwrap())
    }

    #[test]
    fn example1_assembly_shape_and_spectrum() {
        let (model, im, gm) = example1();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        assert_eq!(ga.a.shape(), (4, 4));
        assert!(ga.b.rows(0, 2).iter().all(|&x| x == 0.0));
        let eigs = linalg::eigenvalues(&ga.a).unwrap();
        assert_eq!(eigs.iter().filter(|l| (*l - C64::new(0.5, 0.0)).norm() < 1e-12).count(), 2);
    }

    #[test]
    fn example1_closed_form_eigenvalues() {
        let (model, im, gm) = example1();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        let (k21, k22) = (0.3, -1.7);
        let gains = GainSet { k1: vec![s(0.2), s(-0.4)], k2: vec![s(k21), s(k22)] };
        let cl = closed_loop(&ga, &gains).unwrap();
        let sum = k21 + k22;
        let q = (k21 * k21 + k22 * k22).sqrt();
        let expected = [0.5, 0.5, 5.0 * (sum + q) + 10.0, 5.0 * (sum - q) + 10.0].map(|x| C64::new(x, 0.0));
        let got = linalg::eigenvalues(&cl.a_g).unwrap();
        assert!(linalg::spectra_distance(&got, &expected).unwrap() < 1e-10);
    }

    #[test]
    fn zero_gain_leaves_a_unchanged() {
        let (model, im, gm) = example1();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        let cl = closed_loop(&ga, &GainSet::zeros(&ga.dims)).unwrap();
        assert_eq!(cl.a_g, ga.a);
    }

    #[test]
    fn single_agent_has_identity_w() {
        let ag = AgentPlant::new(s(0.5), s(1.0), s(2.0), s(0.0)).unwrap();
        let model = MasModel::new(vec![ag], Exosystem::new(s(1.0)).unwrap()).unwrap();
        let im = build_p_copy(&s(1.0), 1, 1);
        let g = AugmentedGraph::new(s(0.0), vec![1.0]).unwrap();
        // A single pinned follower is only rejected by the local theory; build W by hand.
        let gm = GraphMatrices {
            p: 1,
            f: s(1.0),
            fa: s(0.0),
            w: s(1.0),
            sigma_max: 0.0,
            sigma_min_nz: f64::INFINITY,
            r_threshold: 0.0,
        };
        assert_eq!(g.n_followers(), 1);
        let ga = assemble_global(&model, &im, &gm).unwrap();
        assert_eq!(ga.a[(1, 0)], 2.0);
    }

    #[test]
    fn dense_gain_outside_pattern_is_rejected() {
        let (model, im, gm) = example1();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        let mut k = GainSet::zeros(&ga.dims).to_dense(&ga.dims).unwrap();
        k[(0, 1)] = 1e-3;
        assert!(matches!(
            closed_loop_dense(&ga, &k),
            Err(AssemblyError::StructureViolation { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn permutation_is_orthogonal() {
        let dims = Dims { n: vec![1, 2, 3], m: vec![1, 1, 2], nz: 2, p: 1 };
        let t = permutation_t(&dims);
        assert_eq!(&t.transpose() * &t, Mat::identity(12, 12));
    }

    #[test]
    fn example1_pair_is_stabilizable() {
        let (model, im, gm) = example1();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        assert!(check_pair_stabilizable(&ga));
    }

    #[test]
    fn unreachable_unit_mode_fails_pbh_with_certificate() {
        let bad = AgentPlant::new(s(1.0), s(0.0), s(1.0), s(0.0)).unwrap();
        let good = AgentPlant::new(s(0.5), s(1.0), s(1.0), s(0.0)).unwrap();
        let model = MasModel::new(vec![bad, good], Exosystem::new(s(1.0)).unwrap()).unwrap();
        let im = build_p_copy(&s(1.0), 1, 2);
        let g = AugmentedGraph::new(Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]), vec![1.0, 0.0]).unwrap();
        let gm = build_graph_matrices(&g, 1).unwrap();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        let report = pair_stabilizability(&ga).unwrap();
        assert!(!report.stabilizable);
        assert!(report.certificates.iter().all(|c| c.residual < 1e-10));
    }

    #[test]
    fn local_matrices_of_scalar_agent() {
        let ag = AgentPlant::new(s(1.0), s(1.0), s(1.0), s(0.0)).unwrap();
        let model = MasModel::new(vec![ag], Exosystem::new(s(1.0)).unwrap()).unwrap();
        let im = build_p_copy(&s(1.0), 1, 1);
        let la = assemble_local(&model, &im).unwrap();
        assert_eq!(la[0].a_o, Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
        assert_eq!(la[0].b_o, Mat::from_row_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(la[0].b_f, Mat::from_row_slice(2, 1, &[0.0, -1.0]));
        assert_eq!(la[0].c_o, Mat::from_row_slice(1, 2, &[1.0, 0.0]));
        let k = Mat::from_row_slice(1, 2, &[0.3, 0.7]);
        assert_eq!(la[0].c_f(&k), la[0].c_o);
    }

    #[test]
    fn example3_local_closed_loop() {
        let ag = AgentPlant::new(s(0.5), s(0.0), s(1.0), s(1.0)).unwrap();
        let model = MasModel::new(vec![ag], Exosystem::new(s(1.0)).unwrap()).unwrap();
        let im = build_p_copy(&s(1.0), 1, 1);
        let la = assemble_local(&model, &im).unwrap();
        let af = la[0].a_f(&Mat::from_row_slice(1, 2, &[-1.0, -0.5]));
        assert!((af - Mat::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5])).norm() < 1e-15);
    }

    #[test]
    fn permutation_identity_for_example1() {
        let (model, im, gm) = example1();
        let ga = assemble_global(&model, &im, &gm).unwrap();
        let la = assemble_local(&model, &im).unwrap();
        let gains = GainSet { k1: vec![s(0.2), s(-0.4)], k2: vec![s(0.1), s(0.9)] };
        assert!(permutation_similarity(&ga, &la, &gains).unwrap() < 1e-12);
        assert!(permutation_similarity(&ga, &la, &GainSet::zeros(&ga.dims)).unwrap() < 1e-12);
    }
}
