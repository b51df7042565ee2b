//! The deterministic map `Psi` applied to every row of a tape variable.

use std::rc::Rc;
use std::sync::Arc;

use super::system::{Model, SystemSpec};
use crate::autodiff::{Tape, Var, Vjp};
use crate::error::{dim_mismatch, Result};
use crate::numerics::{lit, Matrix, Real};

fn rk4_on_tape<'t, T: Real>(
    x: Var<'t, T>,
    h: T,
    substeps: usize,
    rhs: impl Fn(Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let half = h * lit(0.5);
    let two = lit::<T>(2.0);
    let mut x = x;
    for _ in 0..substeps.max(1) {
        let k1 = rhs(x)?;
        let k2 = rhs(x.add(k1.scale(half))?)?;
        let k3 = rhs(x.add(k2.scale(half))?)?;
        let k4 = rhs(x.add(k3.scale(h))?)?;
        let sum = k1.add(k2.scale(two))?.add(k3.scale(two))?.add(k4)?;
        x = x.add(sum.scale(h / lit(6.0)))?;
    }
    Ok(x)
}

/// Columns of `x` cyclically shifted: `out[:, i] = x[:, (i + shift) mod d]`.
fn roll<'t, T: Real>(x: Var<'t, T>, shift: isize) -> Result<Var<'t, T>> {
    let (n, d) = x.shape();
    let di = d as isize;
    let index = (0..n * d)
        .map(|k| {
            let (r, i) = (k / d, (k % d) as isize);
            r * d + (i + shift).rem_euclid(di) as usize
        })
        .collect();
    x.gather(index, n, d)
}

/// `Psi` on each row, built from tape primitives.
pub fn step_on_tape<'t, T: Real>(spec: &SystemSpec<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (_, d) = x.shape();
    if d != spec.state_dim() {
        return Err(dim_mismatch(format!("state rows of width {d} for a {}-dimensional system", spec.state_dim())));
    }
    let tape = x.tape();
    let h = lit::<T>(spec.dt) / T::from_usize(spec.substeps.max(1)).unwrap();
    match &spec.model {
        Model::Lorenz63 { sigma, rho, beta } => {
            let (sigma, beta) = (*sigma, *beta);
            let rho_row = tape.row(&[*rho]);
            rk4_on_tape(x, h, spec.substeps, |v| {
                let (a, b, c) = (v.slice_cols(0, 1)?, v.slice_cols(1, 1)?, v.slice_cols(2, 1)?);
                let da = b.sub(a)?.scale(sigma);
                let db = a.mul(c.scale(-T::one()).add_row(rho_row)?)?.sub(b)?;
                let dc = a.mul(b)?.sub(c.scale(beta))?;
                tape.concat_cols(&[da, db, dc])
            })
        }
        Model::Lorenz96 { forcing, .. } => {
            let f_row = tape.row(&vec![*forcing; d]);
            rk4_on_tape(x, h, spec.substeps, |v| {
                let diff = roll(v, 1)?.sub(roll(v, -2)?)?;
                diff.mul(roll(v, -1)?)?.sub(v)?.add_row(f_row)
            })
        }
        Model::Ks(solver) => solver.step_on_tape(x, spec.substeps),
        Model::Linear { a } => x.matmul_t(tape.constant(a.clone())),
    }
}

struct StepVjp<T: Real> {
    spec: Arc<SystemSpec<T>>,
}

impl<T: Real> Vjp<T> for StepVjp<T> {
    fn vjp(&self, input: &Matrix<T>, cotangent: &Matrix<T>) -> Result<Matrix<T>> {
        let tape = Tape::new();
        let x = tape.param(input.clone());
        let y = step_on_tape(&self.spec, x)?;
        let loss = y.mul(tape.constant(cotangent.clone()))?.sum();
        Ok(tape.backward(loss)?.get_or_zeros(x))
    }
}

/// `Psi` on each row with values from [`SystemSpec::step`] (bitwise equal to
/// the classical filters' forecast) and gradients from a replay of
/// [`step_on_tape`] during the backward sweep.
pub fn propagate<'t, T: Real>(spec: &Arc<SystemSpec<T>>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let value = {
        let xv = x.value();
        if xv.cols() != spec.state_dim() {
            return Err(dim_mismatch("propagate: ensemble width differs from the state dimension"));
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&spec.step(xv.row(i))?);
        }
        out
    };
    Ok(x.tape().custom(x, value, Rc::new(StepVjp { spec: Arc::clone(spec) })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::dynamics::rotation_blocks;
    use crate::numerics::RngStream;

    fn systems() -> Vec<(SystemSpec<f64>, f64)> {
        vec![
            (SystemSpec::lorenz63(1.0, 0.0).unwrap(), 5.0),
            (SystemSpec::lorenz96(1.0, 0.0).unwrap(), 2.0),
            (SystemSpec::ks(1.0, 0.0).unwrap(), 1.0),
            (SystemSpec::linear(rotation_blocks(&[0.1, 0.2]), 1.0, 0.0).unwrap(), 1.0),
        ]
    }

    #[test]
    fn tape_step_matches_integrator() {
        let mut rng = RngStream::new(1, 0);
        for (spec, scale) in systems() {
            let d = spec.state_dim();
            let x = Matrix::from_fn(3, d, |_, _| scale * rng.standard_normal::<f64>());
            let tape = Tape::new();
            let y = step_on_tape(&spec, tape.constant(x.clone())).unwrap().to_matrix();
            for i in 0..3 {
                let expect = spec.step(x.row(i)).unwrap();
                let err = y.row(i).iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let size = expect.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                assert!(err < 1e-11 * size, "{}: {err:e}", spec.name);
            }
        }
    }

    #[test]
    fn propagate_gradients_match_finite_differences() {
        let mut rng = RngStream::new(2, 0);
        for (spec, scale) in systems() {
            let spec = Arc::new(spec);
            let d = spec.state_dim();
            let x = Matrix::from_fn(2, d, |_, _| scale * rng.standard_normal::<f64>());
            let w = Matrix::from_fn(2, d, |_, _| rng.standard_normal::<f64>());
            let (sp, wr) = (&spec, &w);
            let err = check_gradient(
                &[x],
                move |tape, v| Ok(propagate(sp, v[0])?.mul(tape.constant(wr.clone()))?.sum()),
                3,
                &mut rng,
            )
            .unwrap();
            assert!(err < 1e-6, "{}: {err:e}", spec.name);
        }
    }

    #[test]
    fn propagate_values_are_bitwise_equal_to_step() {
        let spec = Arc::new(SystemSpec::<f64>::lorenz96(1.0, 0.0).unwrap());
        let mut rng = RngStream::new(3, 0);
        let x = Matrix::from_fn(4, 40, |_, _| rng.standard_normal::<f64>());
        let tape = Tape::new();
        let y = propagate(&spec, tape.constant(x.clone())).unwrap().to_matrix();
        for i in 0..4 {
            assert_eq!(y.row(i), spec.step(x.row(i)).unwrap().as_slice());
        }
    }
}
