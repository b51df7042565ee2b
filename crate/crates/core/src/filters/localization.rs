use crate::dynamics::{IndexMetric, ObsOperator};
use crate::error::{Error, Result};
use crate::numerics::{lit, Matrix, Real};

/// Default factor applied to the localization radius before tapering.
pub fn default_radius_scale() -> f64 {
    (10.0f64 / 3.0).sqrt()
}

/// Fifth-order piecewise-rational Gaspari-Cohn taper of normalized distance `r`.
pub fn gaspari_cohn(r: f64) -> f64 {
    let r = r.abs();
    if r <= 1.0 {
        let r2 = r * r;
        let r3 = r2 * r;
        -0.25 * r3 * r2 + 0.5 * r2 * r2 + 0.625 * r3 - 5.0 / 3.0 * r2 + 1.0
    } else if r < 2.0 {
        let r2 = r * r;
        let r3 = r2 * r;
        r3 * r2 / 12.0 - 0.5 * r2 * r2 + 0.625 * r3 + 5.0 / 3.0 * r2 - 5.0 * r + 4.0 - 2.0 / (3.0 * r)
    } else {
        0.0
    }
}

/// Distance-based tapering with weight `gaspari_cohn(D / (radius * radius_scale))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationSpec {
    pub metric: IndexMetric,
    pub radius: f64,
    pub radius_scale: f64,
}

impl LocalizationSpec {
    pub fn new(metric: IndexMetric, radius: f64) -> Result<Self> {
        if !metric.is_spatial() {
            return Err(Error::InvalidConfig("localization needs a spatial index metric".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidConfig(format!("localization radius must be positive, got {radius}")));
        }
        Ok(Self { metric, radius, radius_scale: default_radius_scale() })
    }

    pub fn weight(&self, k: usize, l: usize) -> f64 {
        match self.metric.distance(k, l) {
            Some(d) if self.radius.is_finite() => gaspari_cohn(d / (self.radius * self.radius_scale)),
            _ => 1.0,
        }
    }

    /// State-observation mask `L^{vh}` (`d_v x d_y`).
    pub fn state_obs_mask<T: Real>(&self, obs: &ObsOperator) -> Matrix<T> {
        Matrix::from_fn(obs.state_dim, obs.obs_dim, |k, l| lit(self.weight(k, obs.index(l))))
    }

    /// Observation-observation mask `L^{hh}` (`d_y x d_y`).
    pub fn obs_obs_mask<T: Real>(&self, obs: &ObsOperator) -> Matrix<T> {
        Matrix::from_fn(obs.obs_dim, obs.obs_dim, |l, m| lit(self.weight(obs.index(l), obs.index(m))))
    }
}
