use super::params::{Bound, ParamStore, Partition};
use crate::autodiff::{relative_error, Tape, Var, FD_STEP};
use crate::error::Result;
use crate::numerics::{Matrix, RngStream};

/// For each partition, the relative error between the reverse-mode
/// directional derivative of `loss` along one random direction over the whole
/// partition and its central finite difference. Empty partitions report 0.
pub fn partition_gradient_errors<F>(store: &ParamStore<f64>, loss: F, rng: &mut RngStream) -> Result<[f64; 4]>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut store = store.clone();
    store.frozen = [false; 4];
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape, false);
        Ok(loss(&tape, &bound)?.scalar())
    };
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let l = loss(&tape, &bound)?;
    let grads = tape.backward(l)?;
    let mut out = [0.0; 4];
    for p in Partition::ALL {
        if store.get(p).is_empty() {
            continue;
        }
        let dirs: Vec<Matrix<f64>> = store
            .get(p)
            .values
            .iter()
            .map(|m| Matrix::from_fn(m.rows(), m.cols(), |_, _| rng.standard_normal::<f64>()))
            .collect();
        let ad: f64 = bound
            .get(p)
            .iter()
            .zip(&dirs)
            .map(|(v, u)| grads.get_or_zeros(*v).as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |sign: f64| -> Result<ParamStore<f64>> {
            let mut s = store.clone();
            for (m, u) in s.get_mut(p).values.iter_mut().zip(&dirs) {
                *m = m.add(&u.scale(sign * FD_STEP))?;
            }
            Ok(s)
        };
        let fd = (eval(&shifted(1.0)?)? - eval(&shifted(-1.0)?)?) / (2.0 * FD_STEP);
        out[p.index()] = relative_error(ad, fd);
    }
    Ok(out)
}
