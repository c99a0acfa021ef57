//! Principal component analysis via Jacobi eigendecomposition of the
//! covariance matrix. Used to project deep features for scatter plots.

use crate::error::{Error, Result};
use crate::ops::Mat;

/// Stop sweeping once the off-diagonal Frobenius norm falls below this.
const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// row p holds the p-th principal axis (unit length)
    pub components: Mat<f64>,
    /// descending, clamped at 0
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits `k` components on the rows of `x`.
    pub fn fit(x: &Mat<f64>, k: usize) -> Result<Pca> {
        let (n, d) = (x.rows, x.cols);
        if n < 2 {
            return Err(Error::Data("PCA needs at least 2 rows".into()));
        }
        if k == 0 || k > d {
            return Err(Error::Data(format!("cannot keep {k} of {d} components")));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        // covariance (population normalization, matching the projection
        // variance oracle below)
        let mut cov = vec![0.0; d * d];
        for r in 0..n {
            let row = x.row(r);
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= n as f64;
                cov[j * d + i] = cov[i * d + j];
            }
        }

        let (mut eigenvalues, mut vectors) = jacobi_eigen(&mut cov, d);
        // sort descending, carrying the vectors along
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
        eigenvalues = order.iter().map(|&i| eigenvalues[i].max(0.0)).collect();
        vectors = order.iter().map(|&i| vectors[i].clone()).collect();

        let mut components = Mat::zeros(k, d);
        for (p, vec) in vectors.iter().take(k).enumerate() {
            let mut v = vec.clone();
            // sign convention: the entry with the largest magnitude is positive
            let lead = v
                .iter()
                .cloned()
                .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|e| *e = -*e);
            }
            components.row_mut(p).copy_from_slice(&v);
        }
        eigenvalues.truncate(k);
        Ok(Pca {
            mean,
            components,
            eigenvalues,
        })
    }

    /// Projects rows of `x` onto the kept components.
    pub fn project(&self, x: &Mat<f64>) -> Result<Mat<f64>> {
        let d = self.mean.len();
        if x.cols != d {
            return Err(Error::Shape(format!(
                "PCA fitted on {d} dims, got {}",
                x.cols
            )));
        }
        let k = self.components.rows;
        let mut out = Mat::zeros(x.rows, k);
        for r in 0..x.rows {
            for p in 0..k {
                let mut s = 0.0;
                for j in 0..d {
                    s += (x.row(r)[j] - self.mean[j]) * self.components.row(p)[j];
                }
                out.row_mut(r)[p] = s;
            }
        }
        Ok(out)
    }
}

/// Cyclic Jacobi on a symmetric matrix stored row-major in `a`.
/// Returns (eigenvalues, eigenvectors as rows), unsorted.
fn jacobi_eigen(a: &mut [f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    // v starts as identity; columns accumulate the rotations
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off.sqrt() < JACOBI_TOL {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    let vectors: Vec<Vec<f64>> = (0..d)
        .map(|col| (0..d).map(|row| v[row * d + col]).collect())
        .collect();
    (eigenvalues, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn rank_one_data_recovers_the_line() {
        // points along (3,4)/5 with distinct offsets
        let dir = [0.6, 0.8];
        let mut data = Vec::new();
        for i in 0..10 {
            let t = i as f64 - 4.5;
            data.extend_from_slice(&[t * dir[0], t * dir[1]]);
        }
        let x = Mat::from_vec(10, 2, data);
        let pca = Pca::fit(&x, 2).unwrap();
        let c = pca.components.row(0);
        assert!((c[0] - dir[0]).abs() < 1e-8 && (c[1] - dir[1]).abs() < 1e-8);
        assert!(pca.eigenvalues[1].abs() < 1e-8);
    }

    #[test]
    fn projection_variance_equals_eigenvalues() {
        let x = random_mat(40, 5, 11);
        let pca = Pca::fit(&x, 5).unwrap();
        let z = pca.project(&x).unwrap();
        for p in 0..5 {
            let col: Vec<f64> = (0..z.rows).map(|r| z.row(r)[p]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(
                (var - pca.eigenvalues[p]).abs() < 1e-6,
                "component {p}: variance {var} vs eigenvalue {}",
                pca.eigenvalues[p]
            );
        }
    }

    #[test]
    fn full_rank_projection_reconstructs_exactly() {
        let x = random_mat(20, 4, 3);
        let pca = Pca::fit(&x, 4).unwrap();
        let z = pca.project(&x).unwrap();
        for r in 0..x.rows {
            for j in 0..x.cols {
                let mut rec = pca.mean[j];
                for p in 0..4 {
                    rec += z.row(r)[p] * pca.components.row(p)[j];
                }
                assert!((rec - x.row(r)[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let x = random_mat(30, 6, 7);
        let pca = Pca::fit(&x, 6).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let dot: f64 = pca
                    .components
                    .row(a)
                    .iter()
                    .zip(pca.components.row(b))
                    .map(|(u, v)| u * v)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let x = random_mat(10, 3, 0);
        let pca = Pca::fit(&x, 2).unwrap();
        assert!(pca.project(&random_mat(4, 5, 1)).is_err());
    }
}
