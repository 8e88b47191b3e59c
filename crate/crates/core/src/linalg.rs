//! Small dense helpers shared by the solvers.

use nalgebra::DMatrix;

pub(crate) fn shift_diagonal(a: &mut DMatrix<f64>, shift: f64) {
    let k = a.nrows().min(a.ncols());
    for i in 0..k {
        a[(i, i)] += shift;
    }
}

/// `‖new − old‖ / ‖new‖`, reading 0/0 as no change.
pub(crate) fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let diff = (new - old).norm();
    let scale = new.norm();
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Inverse square root of a symmetric positive definite matrix, or `None`
/// when its smallest eigenvalue is not safely positive.
pub(crate) fn sym_inverse_sqrt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(eig.eigenvalues.min() > 1e-14 * max.max(1.0)) {
        return None;
    }
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
    let v = &eig.eigenvectors;
    Some(v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose())
}
