//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Smallest admissible squared Cholesky pivot of the unit-diagonal scaled system.
const PIVOT_FLOOR: f64 = 1e-14;

/// Cholesky factor of a Jacobi-scaled symmetric positive definite matrix.
///
/// Solves `A x = b` through `(S A S) (S^-1 x) = S b` with `S = diag(A)^-1/2`,
/// which is the same system but far better conditioned for raw series bases.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    scale: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Returns `None` when the matrix is not numerically positive definite.
    pub fn new(a: &DMatrix<f64>) -> Option<Self> {
        let k = a.nrows();
        if k == 0 || a.ncols() != k {
            return None;
        }
        let mut scale = DVector::zeros(k);
        for i in 0..k {
            let d = a[(i, i)];
            if !(d.is_finite() && d > 0.0) {
                return None;
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut scaled = a.clone();
        for j in 0..k {
            for i in 0..k {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(scaled)?;
        let l = chol.l_dirty();
        for i in 0..k {
            let piv = l[(i, i)] * l[(i, i)];
            if !(piv.is_finite() && piv > PIVOT_FLOOR) {
                return None;
            }
        }
        Some(Self { scale, chol })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for j in 0..rhs.ncols() {
            for i in 0..rhs.nrows() {
                rhs[(i, j)] *= self.scale[i];
            }
        }
        let mut x = self.chol.solve(&rhs);
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                x[(i, j)] *= self.scale[i];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric matrix through its eigendecomposition.
///
/// Eigenvalues below `rel_cut * max|λ|` are dropped, giving the Moore-Penrose
/// pseudo-inverse. The flag reports whether anything was dropped.
pub fn sym_pinv(a: &DMatrix<f64>, rel_cut: f64) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(symmetrize(a));
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = rel_cut * max_abs;
    let mut truncated = false;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v > cut && v > 0.0 {
                1.0 / v
            } else {
                truncated = true;
                0.0
            }
        })
        .collect();
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv));
    (q * d * q.transpose(), truncated)
}

/// Clamp negative eigenvalues of a symmetric matrix to zero.
pub fn floor_psd(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let s = symmetrize(a);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (s, false);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    (symmetrize(&out), true)
}

/// Ratio of the smallest to the largest singular value (0 for an empty matrix).
pub fn singular_value_ratio(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Relative Frobenius distance `‖a − b‖ / max(1, ‖b‖)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}
