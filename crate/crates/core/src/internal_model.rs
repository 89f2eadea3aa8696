//! p-copy internal models of the exosystem.

use thiserror::Error;

use crate::linalg::{self, Mat};

/// Relative threshold for linear dependence of `{I, A0, ..., A0^h}`.
pub const MINPOLY_REL_TOL: f64 = 1e-9;
/// Coefficient tolerance when comparing characteristic and minimal polynomials.
pub const POLY_COEFF_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InternalModelError {
    #[error("agent {agent}: {what}")]
    Shape { agent: usize, what: String },
    #[error("internal model is given for {found} agents, expected {expected}")]
    AgentCount { found: usize, expected: usize },
}

/// Monic polynomial, coefficients in ascending powers: `c[0] + c[1] x + ... + x^h`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonicPolynomial {
    pub coeffs: Vec<f64>,
}

impl MonicPolynomial {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Evaluates the polynomial at a square matrix by Horner's rule.
    pub fn eval_matrix(&self, a: &Mat) -> Mat {
        let n = a.nrows();
        let mut acc = Mat::zeros(n, n);
        for &c in self.coeffs.iter().rev() {
            acc = &acc * a + Mat::identity(n, n) * c;
        }
        acc
    }

    pub fn approx_eq(&self, other: &MonicPolynomial, tol: f64) -> bool {
        self.coeffs.len() == other.coeffs.len()
            && self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())))
    }
}

/// Monic polynomial of least degree annihilating `a0`.
pub fn minimal_polynomial(a0: &Mat) -> MonicPolynomial {
    let n = a0.nrows();
    let nn = n * n;
    let mut powers: Vec<Mat> = vec![Mat::identity(n, n)];
    for h in 1..=n {
        let next = &powers[h - 1] * a0;
        powers.push(next);
        // Columns vec(A0^k) scaled to unit norm so magnitudes do not drive the rank.
        let cols = Mat::from_fn(nn, h + 1, |r, k| {
            let pk = &powers[k];
            let nrm = pk.norm();
            if nrm > 0.0 { pk.as_slice()[r] / nrm } else { 0.0 }
        });
        let s = linalg::singular_values(&cols);
        let smax = s[0];
        let smin = *s.last().unwrap_or(&0.0);
        let deficient = s.len() < h + 1 || smin <= MINPOLY_REL_TOL * smax;
        if deficient || h == n {
            // Least squares: sum_{k<h} c_k vec(A0^k) = -vec(A0^h).
            let basis = Mat::from_fn(nn, h, |r, k| powers[k].as_slice()[r]);
            let rhs = Mat::from_fn(nn, 1, |r, _| -powers[h].as_slice()[r]);
            let sol = basis
                .clone()
                .svd(true, true)
                .solve(&rhs, 1e-14)
                .expect("svd was computed with u and v");
            let mut coeffs: Vec<f64> = sol.column(0).iter().copied().collect();
            coeffs.push(1.0);
            return MonicPolynomial { coeffs };
        }
    }
    unreachable!("the loop returns by h = n (Cayley-Hamilton)")
}

/// Characteristic polynomial by the Faddeev–LeVerrier recursion.
pub fn characteristic_polynomial(a: &Mat) -> MonicPolynomial {
    let n = a.nrows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let id = Mat::identity(n, n);
    let mut m = Mat::zeros(n, n);
    for k in 1..=n {
        m = a * &m + &id * coeffs[n - k + 1];
        let am = a * &m;
        coeffs[n - k] = -am.trace() / k as f64;
    }
    MonicPolynomial { coeffs }
}

/// Companion matrix with ones on the subdiagonal and `-c` in the last column.
pub fn companion(poly: &MonicPolynomial) -> Mat {
    let h = poly.degree();
    let mut m = Mat::zeros(h, h);
    for i in 1..h {
        m[(i, i - 1)] = 1.0;
    }
    for i in 0..h {
        m[(i, h - 1)] = -poly.coeffs[i];
    }
    m
}

/// `[beta, alpha beta, ..., alpha^{h-1} beta]`
pub fn reachability_matrix(alpha: &Mat, beta: &Mat) -> Mat {
    let h = alpha.nrows();
    let mut cols = Vec::with_capacity(h);
    let mut v = beta.clone();
    for _ in 0..h {
        cols.push(v.clone());
        v = alpha * &v;
    }
    let refs: Vec<&Mat> = cols.iter().collect();
    linalg::hstack(&refs)
}

pub fn is_reachable(alpha: &Mat, beta: &Mat) -> bool {
    linalg::rank(&reachability_matrix(alpha, beta), 1e-9) == alpha.nrows()
}

/// One agent's `(G1_i, G2_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalModelPair {
    pub g1: Mat,
    pub g2: Mat,
}

impl InternalModelPair {
    pub fn nz(&self) -> usize {
        self.g1.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InternalModel {
    pub p: usize,
    pub pairs: Vec<InternalModelPair>,
}

impl InternalModel {
    /// Validates shapes: square `G1`, `G2` with `p` columns, shared `n_z`.
    pub fn new(p: usize, pairs: Vec<InternalModelPair>) -> Result<Self, InternalModelError> {
        let nz = pairs.first().map_or(0, InternalModelPair::nz);
        for (i, pair) in pairs.iter().enumerate() {
            let err = |what: String| Err(InternalModelError::Shape { agent: i, what });
            if !pair.g1.is_square() || pair.g1.nrows() == 0 {
                return err(format!("G1 is {}x{}", pair.g1.nrows(), pair.g1.ncols()));
            }
            if pair.g2.shape() != (pair.g1.nrows(), p) {
                return err(format!(
                    "G2 is {}x{}, expected {}x{p}",
                    pair.g2.nrows(),
                    pair.g2.ncols(),
                    pair.g1.nrows()
                ));
            }
            if pair.nz() != nz {
                return err(format!("n_z = {} differs from {nz}", pair.nz()));
            }
        }
        Ok(Self { p, pairs })
    }

    pub fn nz(&self) -> usize {
        self.pairs.first().map_or(0, InternalModelPair::nz)
    }

    pub fn n_agents(&self) -> usize {
        self.pairs.len()
    }

    pub fn replicated(pair: InternalModelPair, p: usize, n_agents: usize) -> Self {
        Self { p, pairs: vec![pair; n_agents] }
    }
}

/// Canonical p-copy pair: `alpha` = companion of the minimal polynomial,
/// `beta` = last unit vector. A singular `A0` (outside the antistable
/// setting) makes that choice unreachable, so the first unit vector is used.
pub fn build_p_copy_blocks(a0: &Mat) -> (Mat, Mat) {
    let poly = minimal_polynomial(a0);
    let alpha = companion(&poly);
    let h = poly.degree();
    let mut beta = Mat::zeros(h, 1);
    beta[(h - 1, 0)] = 1.0;
    if !is_reachable(&alpha, &beta) {
        beta[(h - 1, 0)] = 0.0;
        beta[(0, 0)] = 1.0;
    }
    (alpha, beta)
}

pub fn build_p_copy_pair(a0: &Mat, p: usize) -> InternalModelPair {
    let (alpha, beta) = build_p_copy_blocks(a0);
    let g1 = linalg::block_diag(&vec![alpha; p]);
    let g2 = linalg::block_diag(&vec![beta; p]);
    InternalModelPair { g1, g2 }
}

pub fn build_p_copy(a0: &Mat, p: usize, n_agents: usize) -> InternalModel {
    InternalModel::replicated(build_p_copy_pair(a0, p), p, n_agents)
}

/// Why a pair fails to be a p-copy internal model.
#[derive(Debug, Clone, PartialEq)]
pub enum PCopyDefect {
    BlockSize { nz: usize, p: usize },
    OffBlockEntry { row: usize, col: usize },
    CharPoly { block: usize },
    Unreachable { block: usize },
}

/// Checks block-diagonal form, characteristic polynomials and reachability.
pub fn p_copy_defects(pair: &InternalModelPair, p: usize, a0: &Mat) -> Vec<PCopyDefect> {
    let nz = pair.nz();
    if p == 0 || nz % p != 0 {
        return vec![PCopyDefect::BlockSize { nz, p }];
    }
    let h = nz / p;
    let mut out = Vec::new();
    for r in 0..nz {
        for c in 0..nz {
            if r / h != c / h && pair.g1[(r, c)] != 0.0 {
                out.push(PCopyDefect::OffBlockEntry { row: r, col: c });
            }
        }
        for c in 0..p {
            if r / h != c && pair.g2[(r, c)] != 0.0 {
                out.push(PCopyDefect::OffBlockEntry { row: r, col: nz + c });
            }
        }
    }
    let minpoly = minimal_polynomial(a0);
    for l in 0..p {
        let alpha = pair.g1.view((l * h, l * h), (h, h)).into_owned();
        let beta = pair.g2.view((l * h, l), (h, 1)).into_owned();
        if !characteristic_polynomial(&alpha).approx_eq(&minpoly, POLY_COEFF_TOL) {
            out.push(PCopyDefect::CharPoly { block: l });
        }
        if !is_reachable(&alpha, &beta) {
            out.push(PCopyDefect::Unreachable { block: l });
        }
    }
    out
}

pub fn verify_pair(pair: &InternalModelPair, p: usize, a0: &Mat) -> bool {
    p_copy_defects(pair, p, a0).is_empty()
}

pub fn verify_p_copy(im: &InternalModel, a0: &Mat) -> bool {
    im.pairs.iter().all(|pair| verify_pair(pair, im.p, a0))
}
