use super::{Tape, Var};
use crate::error::Result;
use crate::numerics::{Matrix, RngStream};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps exact zeros comparable.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode directional derivatives of the scalar `f` with
/// central finite differences along `directions` random directions per input.
/// Returns the worst relative error.
pub fn check_gradient<F>(inputs: &[Matrix<f64>], f: F, directions: usize, rng: &mut RngStream) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    Ok(gradient_errors(inputs, f, directions, rng)?.into_iter().fold(0.0, f64::max))
}

/// Worst relative error of the directional derivative for each input.
pub fn gradient_errors<F>(inputs: &[Matrix<f64>], f: F, directions: usize, rng: &mut RngStream) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Matrix<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.scalar())
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(vars[i]);
        let mut worst: f64 = 0.0;
        for _ in 0..directions {
            let u = Matrix::from_fn(x.rows(), x.cols(), |_, _| rng.standard_normal::<f64>());
            let ad: f64 = g.as_slice().iter().zip(u.as_slice()).map(|(a, b)| a * b).sum();
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i] = x.add(&u.scale(FD_STEP))?;
            minus[i] = x.sub(&u.scale(FD_STEP))?;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(ad, fd));
        }
        out.push(worst);
    }
    Ok(out)
}

type Primitive = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Weights a matrix output into a scalar so every entry is exercised.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let (r, c) = out.shape();
    let w = Matrix::from_fn(r, c, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.37 - 0.61);
    Ok(out.mul(tape.constant(w))?.sum())
}

fn spd<'t>(tape: &'t Tape<f64>, p: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let n = p.shape().0;
    p.matmul_t(p)?.add(tape.constant(Matrix::identity(n)))
}

/// Named primitive cases: input shapes and the scalar function of them.
#[allow(clippy::type_complexity)]
pub fn primitive_cases() -> Vec<(&'static str, Vec<(usize, usize)>, Primitive)> {
    vec![
        ("matmul", vec![(4, 6), (6, 3)], |t, x| project(t, x[0].matmul(x[1])?)),
        ("matmul_t", vec![(4, 6), (5, 6)], |t, x| project(t, x[0].matmul_t(x[1])?)),
        ("t_matmul", vec![(4, 6), (4, 3)], |t, x| project(t, x[0].t_matmul(x[1])?)),
        ("add", vec![(4, 6), (4, 6)], |t, x| project(t, x[0].add(x[1])?)),
        ("sub", vec![(4, 6), (4, 6)], |t, x| project(t, x[0].sub(x[1])?)),
        ("mul", vec![(4, 6), (4, 6)], |t, x| project(t, x[0].mul(x[1])?)),
        ("scale", vec![(4, 6)], |t, x| project(t, x[0].scale(-1.7))),
        ("add_row", vec![(4, 6), (1, 6)], |t, x| project(t, x[0].add_row(x[1])?)),
        ("mul_row", vec![(4, 6), (1, 6)], |t, x| project(t, x[0].mul_row(x[1])?)),
        ("repeat_rows", vec![(2, 6)], |t, x| project(t, x[0].repeat_rows(3)?)),
        ("block_means", vec![(4, 6)], |t, x| project(t, x[0].block_means(2)?)),
        ("concat", vec![(4, 6), (4, 2)], |t, x| project(t, t.concat_cols(&[x[0], x[1], x[0]])?)),
        ("slice", vec![(4, 6)], |t, x| project(t, x[0].slice_cols(2, 3)?)),
        ("slice_rows", vec![(4, 6)], |t, x| project(t, x[0].slice_rows(1, 2)?)),
        ("concat_rows", vec![(4, 6), (2, 6)], |t, x| project(t, t.concat_rows(&[x[0], x[1], x[0]])?)),
        ("attention", vec![(4, 6), (5, 6), (5, 6)], |t, x| {
            project(t, t.attention(x[0], x[1], x[2], 2, vec![(1, 2), (3, 3)])?)
        }),
        ("gather", vec![(4, 6)], |t, x| project(t, x[0].gather(vec![0, 5, 5, 23, 7, 0], 2, 3)?)),
        ("reshape", vec![(4, 6)], |t, x| project(t, x[0].reshape(3, 8)?)),
        ("transpose", vec![(4, 6)], |t, x| project(t, x[0].transpose())),
        ("mean_rows", vec![(4, 6)], |t, x| project(t, x[0].mean_rows())),
        ("mean_cols", vec![(4, 6)], |t, x| project(t, x[0].mean_cols())),
        ("sum", vec![(4, 6)], |_, x| Ok(x[0].sum())),
        ("softmax", vec![(4, 6)], |t, x| project(t, x[0].softmax_rows())),
        ("exp", vec![(4, 6)], |t, x| project(t, x[0].exp())),
        ("relu", vec![(4, 6)], |t, x| project(t, x[0].relu())),
        ("logistic", vec![(4, 6)], |t, x| project(t, x[0].logistic())),
        ("layer_norm", vec![(4, 6), (1, 6), (1, 6)], |t, x| project(t, x[0].layer_norm(x[1], x[2])?)),
        ("clamp", vec![(4, 6)], |t, x| project(t, x[0].scale(3.0).clamp_abs(2.0))),
        ("solve_spd", vec![(5, 5), (5, 3)], |t, x| project(t, t.solve_spd(spd(t, x[0])?, x[1])?)),
        ("quadratic", vec![(4, 6), (6, 1)], |_, x| x[0].matmul(x[1])?.sq_sum()),
    ]
}

/// Worst relative error per primitive over `seeds` random input draws.
pub fn primitive_suite(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = RngStream::derived(seed, &[0x4744, out.len() as u64]);
            let inputs: Vec<Matrix<f64>> = shapes
                .iter()
                .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| rng.standard_normal::<f64>()))
                .collect();
            worst = worst.max(check_gradient(&inputs, f, 2, &mut rng)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}
