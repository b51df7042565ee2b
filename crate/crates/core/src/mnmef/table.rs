use crate::dynamics::{IndexMetric, ObsOperator};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Distinct pairwise distances of a spatial observation layout and, for every
/// entry of `L1` (`d_v x d_y`) and `L2` (`d_y x d_y`), the position of its
/// distance in that list.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    /// Sorted ascending.
    pub distances: Vec<f64>,
    pub state_dim: usize,
    pub obs_dim: usize,
    /// Row-major `d_v x d_y` indices into `distances`.
    pub state_obs: Vec<usize>,
    /// Row-major `d_y x d_y` indices into `distances`.
    pub obs_obs: Vec<usize>,
}

impl DistanceTable {
    pub fn new(metric: IndexMetric, obs: &ObsOperator) -> Result<Self> {
        if !metric.is_spatial() {
            return Err(Error::InvalidConfig("a distance table needs a spatial index metric".into()));
        }
        let dist = |k: usize, l: usize| metric.distance(k, l).expect("spatial metric");
        let (d_v, d_y) = (obs.state_dim, obs.obs_dim);
        let so: Vec<f64> = (0..d_v * d_y).map(|i| dist(i / d_y, obs.index(i % d_y))).collect();
        let oo: Vec<f64> = (0..d_y * d_y).map(|i| dist(obs.index(i / d_y), obs.index(i % d_y))).collect();
        let mut distances: Vec<f64> = so.iter().chain(&oo).copied().collect();
        distances.sort_by(f64::total_cmp);
        distances.dedup();
        let pos = |d: &f64| distances.binary_search_by(|x| x.total_cmp(d)).expect("listed distance");
        let state_obs = so.iter().map(pos).collect();
        let obs_obs = oo.iter().map(pos).collect();
        Ok(Self { distances, state_dim: d_v, obs_dim: d_y, state_obs, obs_obs })
    }

    /// Number of distinct distances `N_D`.
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// `L1[k, l] = g[position of d(k, obs index l)]`.
    pub fn l1<T: Real>(&self, g: &[T]) -> Matrix<T> {
        Matrix::from_fn(self.state_dim, self.obs_dim, |k, l| g[self.state_obs[k * self.obs_dim + l]])
    }

    /// `L2[l, m] = g[position of d(obs index l, obs index m)]`.
    pub fn l2<T: Real>(&self, g: &[T]) -> Matrix<T> {
        Matrix::from_fn(self.obs_dim, self.obs_dim, |l, m| g[self.obs_obs[l * self.obs_dim + m]])
    }
}
