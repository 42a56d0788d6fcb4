//! Small dense helpers shared by the filter, the cost and the controller.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Replace `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Factor `S` with `S Sᵀ = cov` for sampling; negative eigenvalues (round-off)
/// are clipped to zero so a singular or zero covariance is accepted.
pub fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    if cov.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(n, n);
    }
    if is_diagonal(cov) {
        return DMatrix::from_diagonal(&cov.diagonal().map(|v| v.max(0.0).sqrt()));
    }
    let mut s = cov.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let scale = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let mut out = eig.eigenvectors;
    for (j, sj) in scale.iter().enumerate() {
        out.column_mut(j).scale_mut(*sj);
    }
    out
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Draw `n` independent standard normals. Always consumes exactly `n` draws.
pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One sample of `N(mean, S Sᵀ)` given a square-root factor `S`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    sqrt_cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normals(mean.len(), rng);
    mean + sqrt_cov * z
}

pub fn clamp_unit(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.clamp(0.0, 1.0))
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_covariance_samples_the_mean() {
        let mean = DVector::from_vec(vec![0.1, 0.2]);
        let s = psd_sqrt(&DMatrix::zeros(2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_gaussian(&mean, &s, &mut rng), mean);
    }

    #[test]
    fn sqrt_reconstructs_full_covariance() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
        let s = psd_sqrt(&cov);
        let back = &s * s.transpose();
        assert!((back - cov).amax() < 1e-12);
    }

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0]);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(max_asymmetry(&m), 0.0);
    }
}
