use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{sym_sqrt, to_f64, Matrix, Real};

/// `sum_j |est_j - truth_j| / sum_j |truth_j|` over matching rows.
pub fn r_rmse<T: Real>(estimate: &Matrix<T>, truth: &Matrix<T>) -> Result<f64> {
    if estimate.rows() != truth.rows() || estimate.cols() != truth.cols() {
        return Err(dim_mismatch("r_rmse: estimate and truth differ in shape"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..truth.rows() {
        let (mut e, mut t) = (0.0, 0.0);
        for (&a, &b) in estimate.row(j).iter().zip(truth.row(j)) {
            let (a, b) = (to_f64(a), to_f64(b));
            e += (a - b) * (a - b);
            t += b * b;
        }
        num += e.sqrt();
        den += t.sqrt();
    }
    if den == 0.0 {
        return Err(Error::DegenerateTruth { step: 0 });
    }
    Ok(num / den)
}

/// `(benchmark - ours) / benchmark`; negative when `ours` is worse.
pub fn relative_improvement(ours: f64, benchmark: f64) -> Result<f64> {
    if benchmark == 0.0 {
        return Err(Error::DivideByZero("relative_improvement"));
    }
    Ok((benchmark - ours) / benchmark)
}

/// 2-Wasserstein distance between `N(m1, c1)` and `N(m2, c2)`.
pub fn w2_gaussian<T: Real>(m1: &[T], c1: &Matrix<T>, m2: &[T], c2: &Matrix<T>) -> Result<f64> {
    if m1.len() != m2.len() || c1.rows() != m1.len() || c2.rows() != m2.len() {
        return Err(dim_mismatch("w2_gaussian: dimensions"));
    }
    let dm: f64 = m1.iter().zip(m2).map(|(&a, &b)| to_f64(a - b).powi(2)).sum();
    let c1 = c1.cast::<f64>().symmetrize();
    let c2 = c2.cast::<f64>().symmetrize();
    let s2 = sym_sqrt(&c2)?;
    let cross = sym_sqrt(&s2.matmul(&c1)?.matmul(&s2)?.symmetrize())?;
    let tr = (c1.trace() + c2.trace() - 2.0 * cross.trace()).max(0.0);
    Ok((dm + tr).sqrt())
}

/// Summary of per-trajectory R-RMSE values for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub members: usize,
    pub sigma_y: f64,
    pub values: Vec<f64>,
}

impl MetricReport {
    /// Mean over trajectories; NaN if any run diverged.
    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// Population standard deviation over trajectories.
    pub fn std(&self) -> f64 {
        std_dev(&self.values)
    }

    pub fn diverged(&self) -> usize {
        self.values.iter().filter(|x| !x.is_finite()).count()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}
