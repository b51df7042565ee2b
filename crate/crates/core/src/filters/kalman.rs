use crate::error::{dim_mismatch, Result};
use crate::numerics::{solve_spd, Matrix, Real};

/// Gaussian belief `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanBelief<T: Real = f64> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
}

/// `m <- A m`, `C <- A C A^T + Sigma`.
pub fn kalman_predict<T: Real>(b: &KalmanBelief<T>, a: &Matrix<T>, sigma: &Matrix<T>) -> Result<KalmanBelief<T>> {
    let mean = a.mul_vec(&b.mean)?;
    let cov = a.matmul(&b.cov)?.matmul_t(a)?.add(sigma)?.symmetrize();
    Ok(KalmanBelief { mean, cov })
}

/// Conditions on `y = H v + N(0, Gamma)` with gain `C H^T (H C H^T + Gamma)^{-1}`.
pub fn kalman_update<T: Real>(b: &KalmanBelief<T>, h: &Matrix<T>, gamma: &Matrix<T>, y: &[T]) -> Result<KalmanBelief<T>> {
    if y.len() != h.rows() || h.cols() != b.mean.len() {
        return Err(dim_mismatch("kalman_update: observation operator shape"));
    }
    let ch_t = b.cov.matmul_t(h)?;
    let s = h.matmul(&ch_t)?.add(gamma)?.symmetrize();
    // K^T = S^{-1} (C H^T)^T
    let kt = solve_spd(&s, &ch_t.transpose())?;
    let hm = h.mul_vec(&b.mean)?;
    let innov: Vec<T> = y.iter().zip(&hm).map(|(&a, &b)| a - b).collect();
    let dm = kt.transpose().mul_vec(&innov)?;
    let mean: Vec<T> = b.mean.iter().zip(&dm).map(|(&a, &b)| a + b).collect();
    // C - K H C
    let cov = b.cov.sub(&kt.t_matmul(&h.matmul(&b.cov)?)?)?.symmetrize();
    Ok(KalmanBelief { mean, cov })
}

pub fn kalman_step<T: Real>(
    b: &KalmanBelief<T>,
    a: &Matrix<T>,
    h: &Matrix<T>,
    sigma: &Matrix<T>,
    gamma: &Matrix<T>,
    y: &[T],
) -> Result<KalmanBelief<T>> {
    kalman_update(&kalman_predict(b, a, sigma)?, h, gamma, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn belief() -> KalmanBelief<f64> {
        KalmanBelief { mean: vec![0.5, -1.0], cov: Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]).unwrap() }
    }

    #[test]
    fn uninformative_update_keeps_prediction() {
        let b = belief();
        let a = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 1.0]]).unwrap();
        let sigma = Matrix::scaled_identity(2, 0.01);
        let pred = kalman_predict(&b, &a, &sigma).unwrap();
        let post = kalman_step(&b, &a, &Matrix::identity(2), &sigma, &Matrix::scaled_identity(2, 1e12), &[5.0, 5.0]).unwrap();
        for (x, y) in post.mean.iter().zip(&pred.mean) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(post.cov.sub(&pred.cov).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn perfect_observation_pins_mean() {
        let post = kalman_update(&belief(), &Matrix::identity(2), &Matrix::scaled_identity(2, 1e-12), &[3.0, 4.0]).unwrap();
        assert!((post.mean[0] - 3.0).abs() < 1e-9 && (post.mean[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn matches_grid_quadrature_posterior() {
        // observe the sum of both coordinates
        let b = belief();
        let h = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let gamma = Matrix::from_diag(&[0.4]);
        let y = [1.2];
        let post = kalman_update(&b, &h, &gamma, &y).unwrap();

        let cinv = solve_spd(&b.cov, &Matrix::identity(2)).unwrap();
        let (lo, hi, n) = (-6.0, 6.0, 600);
        let step = (hi - lo) / n as f64;
        let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            for j in 0..=n {
                let x = [lo + i as f64 * step, lo + j as f64 * step];
                let d = [x[0] - b.mean[0], x[1] - b.mean[1]];
                let prior = d[0] * (cinv[(0, 0)] * d[0] + cinv[(0, 1)] * d[1]) + d[1] * (cinv[(1, 0)] * d[0] + cinv[(1, 1)] * d[1]);
                let r = y[0] - x[0] - x[1];
                let w = (-0.5 * prior - 0.5 * r * r / 0.4).exp();
                z += w;
                m0 += w * x[0];
                m1 += w * x[1];
            }
        }
        assert!((m0 / z - post.mean[0]).abs() < 1e-3);
        assert!((m1 / z - post.mean[1]).abs() < 1e-3);
    }
}
