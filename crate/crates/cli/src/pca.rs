//! Two-dimensional principal-component projection for the embedding
//! export: mean-center, eigendecompose the covariance, and project onto
//! the top two components with a deterministic sign convention.

use dhia::diffnet::Matrix;
use dhia::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Projects an n x d matrix onto its top two principal components.
///
/// Columns are centered first; each component's sign is fixed so that its
/// largest-magnitude entry is positive, making the output independent of
/// eigensolver sign choices. With d == 1 the second column is zero.
pub fn pca_2d(x: &Matrix) -> Result<Matrix> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Data(format!("projection needs at least 2 rows, got {n}")));
    }
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for c in 0..d {
        let mean = (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64;
        for r in 0..n {
            centered[(r, c)] = x.get(r, c) - mean;
        }
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("covariance eigenvalues are finite")
    });
    let mut w = DMatrix::<f64>::zeros(d, 2);
    for (j, &idx) in order.iter().take(2).enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
        let mut lead = 0;
        for i in 1..d {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        w.set_column(j, &col);
    }
    let y = centered * w;
    let mut out = Matrix::zeros(n, 2);
    for r in 0..n {
        out.set(r, 0, y[(r, 0)]);
        out.set(r, 1, y[(r, 1)]);
    }
    Ok(out)
}
