use crate::error::{dim_mismatch, Result};
use crate::mnmef::{ParamStore, Partition};
use crate::numerics::Matrix;

/// Gradient matrices laid out like the parameters of a [`ParamStore`].
pub type PartGrads = [Vec<Matrix<f64>>; 4];

/// Zero gradients shaped like `store`.
pub fn zero_grads(store: &ParamStore<f64>) -> PartGrads {
    Partition::ALL.map(|p| store.get(p).values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect())
}

/// `acc += g`, partition by partition.
pub fn add_grads(acc: &mut PartGrads, g: &PartGrads) -> Result<()> {
    for (a, b) in acc.iter_mut().zip(g) {
        if a.len() != b.len() {
            return Err(dim_mismatch("gradient layouts differ"));
        }
        for (x, y) in a.iter_mut().zip(b) {
            *x = x.add(y)?;
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    first: PartGrads,
    second: PartGrads,
}

impl AdamW {
    pub fn new(store: &ParamStore<f64>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: zero_grads(store),
            second: zero_grads(store),
        }
    }

    /// One update of every partition that is not frozen.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &PartGrads) -> Result<()> {
        for p in Partition::ALL {
            let i = p.index();
            let shapes_match = grads[i].len() == store.get(p).len()
                && grads[i].iter().zip(&store.get(p).values).all(|(g, v)| g.rows() == v.rows() && g.cols() == v.cols());
            if !shapes_match || self.first[i].len() != grads[i].len() {
                return Err(crate::error::Error::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("gradient layout of partition {p} does not match the parameters"),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let decay = 1.0 - self.lr * self.weight_decay;
        for p in Partition::ALL {
            if store.is_frozen(p) {
                continue;
            }
            let i = p.index();
            let values = &mut store.get_mut(p).values;
            for (k, param) in values.iter_mut().enumerate() {
                let g = grads[i][k].as_slice();
                let m = self.first[i][k].as_mut_slice();
                let v = self.second[i][k].as_mut_slice();
                for (j, x) in param.as_mut_slice().iter_mut().enumerate() {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                    let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    *x = *x * decay - self.lr * update;
                }
            }
        }
        Ok(())
    }
}
