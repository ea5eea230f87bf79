use super::Matrix;
use crate::error::{Error, Result};

/// Principal-component projection of a point set.
#[derive(Clone, Debug)]
pub struct Pca {
    /// n x k projected coordinates.
    pub coords: Matrix,
    /// Top-k covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Fraction of total variance carried by each of the top-k axes.
    pub explained_variance_ratio: Vec<f64>,
    /// k x d principal axes (unit rows).
    pub components: Matrix,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted non-increasing and the matching eigenvectors as
/// the rows of a matrix.
pub fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "jacobi_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale: f64 = m.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (row, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(row, k, v.get(k, i));
        }
    }
    (values, vectors)
}

/// Project the rows of `data` onto the top-`k` principal axes of their
/// sample covariance.
pub fn pca_project(data: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = data.shape();
    if n < 2 {
        return Err(Error::Precondition(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k == 0 || k > d {
        return Err(Error::Precondition(format!("PCA dimension {k} outside 1..={d}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = data.clone();
    for r in 0..n {
        for (x, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let cov = centered.matmul_tn(&centered).scale(1.0 / (n - 1) as f64);
    let (values, vectors) = jacobi_eigen(&cov);
    let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total <= 1e-300 {
        return Err(Error::Precondition("PCA input has zero variance (rank 0)".into()));
    }
    let components = Matrix::from_vec(k, d, vectors.data()[..k * d].to_vec());
    let coords = centered.matmul_nt(&components);
    Ok(Pca {
        coords,
        explained_variance_ratio: values[..k].iter().map(|v| v / total).collect(),
        eigenvalues: values[..k].to_vec(),
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_have_one_axis() {
        let pts = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.5, -3.0, -4.5]]);
        let p = pca_project(&pts, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_cross_has_equal_eigenvalues() {
        let pts = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
        let p = pca_project(&pts, 2).unwrap();
        assert!((p.eigenvalues[0] - p.eigenvalues[1]).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let pts = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert!(pca_project(&pts, 1).is_err());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = Matrix::from_rows(&[[4.0, 1.0, -2.0], [1.0, 3.0, 0.5], [-2.0, 0.5, 1.0]]);
        let (vals, vecs) = jacobi_eigen(&a);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for (i, &lam) in vals.iter().enumerate() {
            let v = vecs.row(i);
            let av = a.mul_vec(v);
            for k in 0..3 {
                assert!((av[k] - lam * v[k]).abs() < 1e-12);
            }
        }
    }
}
