use nalgebra::{DMatrix, SymmetricEigen};

/// Orthonormal basis (m × (m−1), Helmert contrasts) of the vectors in R^m
/// summing to zero.
pub fn sum_to_zero_basis(m: usize) -> DMatrix<f64> {
    let cols = m.saturating_sub(1);
    let mut b = DMatrix::zeros(m, cols);
    for k in 1..m {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            b[(i, k - 1)] = 1.0 / norm;
        }
        b[(k, k - 1)] = -(k as f64) / norm;
    }
    b
}

/// Moore–Penrose inverse of a symmetric positive-semidefinite matrix, plus
/// its nonzero eigenvalues. Eigenvalues below `rel_tol · max` count as zero.
pub fn psd_pseudo_inverse(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = rel_tol * max.max(f64::MIN_POSITIVE);
    let mut out = DMatrix::zeros(n, n);
    let mut nonzero = Vec::new();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol {
            nonzero.push(lambda);
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lambda;
        }
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (out, nonzero)
}
