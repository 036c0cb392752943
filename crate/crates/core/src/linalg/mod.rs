//! Sparse matrices and the symmetric factorization used by the QP kernel.

mod ldl;
mod sparse;

pub use ldl::{minimum_degree, LdlError, LdlSolver};
pub use sparse::{dot, inf_norm, CsrMatrix};

/// Minimum eigenvalue of a symmetric 3x3 matrix.
pub fn min_eigenvalue3(m: &[[f64; 3]; 3]) -> f64 {
    let mat = nalgebra::Matrix3::from_fn(|r, c| 0.5 * (m[r][c] + m[c][r]));
    mat.symmetric_eigenvalues().min()
}

/// Projection of a symmetric 3x3 matrix onto matrices with eigenvalues at
/// least `floor`.
pub fn clip_eigenvalues3(m: &[[f64; 3]; 3], floor: f64) -> [[f64; 3]; 3] {
    let mat = nalgebra::Matrix3::from_fn(|r, c| 0.5 * (m[r][c] + m[c][r]));
    let eig = mat.symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let rebuilt = eig.eigenvectors * nalgebra::Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            *x = rebuilt[(r, c)];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_eigen_helpers() {
        let m = [[2.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 3.0]];
        assert!((min_eigenvalue3(&m) + 1.0).abs() < 1e-14);
        let c = clip_eigenvalues3(&m, 0.0);
        assert!(c[1][1].abs() < 1e-14 && (c[0][0] - 2.0).abs() < 1e-14);
    }
}
