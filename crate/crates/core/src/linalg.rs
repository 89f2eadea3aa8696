//! Dense linear-algebra helpers shared by every module.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`; complex arithmetic is
//! only used for eigenvalues and the rank tests evaluated at them.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex<f64>>;
pub type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("eigenvalue iteration did not converge for a {0}x{0} matrix")]
    EigenNoConvergence(usize),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("singular linear system")]
    Singular,
    #[error("ragged matrix rows: row {row} has {found} entries, expected {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("non-finite matrix entry")]
    NonFinite,
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros(rows, cols)
}

pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

/// Block-diagonal matrix of possibly rectangular blocks.
pub fn block_diag(blocks: &[Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Horizontal concatenation; all blocks must share the row count.
pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Vertical concatenation; all blocks must share the column count.
pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// 2x2 block matrix `[a b; c d]`.
pub fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    vstack(&[&hstack(&[a, b]), &hstack(&[c, d])])
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|x| C64::new(x, 0.0))
}

/// Eigenvalues of a real square matrix (real Schur form).
pub fn eigenvalues(m: &Mat) -> Result<Vec<C64>, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![C64::new(m[(0, 0)], 0.0)]);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or(LinalgError::EigenNoConvergence(n))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

pub fn spectral_radius(m: &Mat) -> Result<f64, LinalgError> {
    Ok(eigenvalues(m)?.iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Eigenvalues with numerically split clusters merged into their mean.
///
/// Defective eigenvalues come out of the QR iteration spread over a circle of
/// radius ~eps^(1/k); the cluster mean is accurate to ~eps, which is what rank
/// tests evaluated "at an eigenvalue" need.
pub fn distinct_eigenvalues(m: &Mat) -> Result<Vec<C64>, LinalgError> {
    let eigs = eigenvalues(m)?;
    let scale = 1.0 + m.norm();
    let tol = 1e-5 * scale;
    let mut used = vec![false; eigs.len()];
    let mut out = Vec::new();
    for i in 0..eigs.len() {
        if used[i] {
            continue;
        }
        // Transitive closure so a chain of near neighbours ends up together.
        let mut members = vec![i];
        used[i] = true;
        let mut k = 0;
        while k < members.len() {
            let cur = eigs[members[k]];
            for j in 0..eigs.len() {
                if !used[j] && (eigs[j] - cur).norm() < tol {
                    used[j] = true;
                    members.push(j);
                }
            }
            k += 1;
        }
        let sum: C64 = members.iter().map(|&j| eigs[j]).sum();
        let mean = sum / members.len() as f64;
        out.push(mean);
    }
    Ok(out)
}

/// Singular values, descending.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn complex_singular_values(m: &CMat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank with threshold `rel_tol * sigma_max`.
pub fn complex_rank(m: &CMat, rel_tol: f64) -> usize {
    let s = complex_singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return 0 };
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

/// A unit vector `w` minimising `||w^H M||`: the left singular vector of the
/// smallest singular value.
pub fn left_null_vector(m: &CMat) -> (DVector<C64>, f64) {
    let mh = m.adjoint();
    // Right singular vectors of M^H are the left singular vectors of M.
    let svd = mh.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let s = &svd.singular_values;
    let mut idx = 0;
    for i in 0..s.len() {
        if s[i] < s[idx] {
            idx = i;
        }
    }
    if s.len() < m.nrows() {
        // Wide M^H: a null vector exists exactly; fall back to a full SVD of M M^H.
        let gram = m * m.adjoint();
        let eig = gram.symmetric_eigen();
        let mut j = 0;
        for i in 0..eig.eigenvalues.len() {
            if eig.eigenvalues[i] < eig.eigenvalues[j] {
                j = i;
            }
        }
        let w = eig.eigenvectors.column(j).into_owned();
        let res = (w.adjoint() * m).norm();
        return (w, res);
    }
    let w: DVector<C64> = v_t.row(idx).adjoint();
    let res = (w.adjoint() * m).norm();
    (w, res)
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_sym_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `a x = b` by LU.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    a.clone().lu().solve(b).ok_or(LinalgError::Singular)
}

pub fn inverse(a: &Mat) -> Result<Mat, LinalgError> {
    a.clone().try_inverse().ok_or(LinalgError::Singular)
}

/// Greedy multiset matching of two spectra; returns the largest matched
/// distance, or `None` when the lengths differ.
pub fn spectra_distance(a: &[C64], b: &[C64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut pairs = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push(((x - y).norm(), i, j));
        }
    }
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut ua = vec![false; a.len()];
    let mut ub = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    let mut matched = 0;
    for (d, i, j) in pairs {
        if ua[i] || ub[j] {
            continue;
        }
        ua[i] = true;
        ub[j] = true;
        worst = worst.max(d);
        matched += 1;
        if matched == a.len() {
            break;
        }
    }
    Some(worst)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, LinalgError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(LinalgError::Ragged { row: i, found: r.len(), expected: ncols });
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Column-major vectorisation.
pub fn vec_of(m: &Mat) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}
