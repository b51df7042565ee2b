use crate::error::{Error, Result};
use crate::numerics::{all_finite, lit, Real};

/// Lorenz '63 vector field `(s(y-x), x(r-z)-y, xy-bz)`.
pub fn lorenz63_rhs<T: Real>(v: &[T], sigma: T, rho: T, beta: T) -> [T; 3] {
    let (x, y, z) = (v[0], v[1], v[2]);
    [sigma * (y - x), x * (rho - z) - y, x * y - beta * z]
}

/// Lorenz '96 vector field with cyclic indexing, written into `out`.
pub fn lorenz96_rhs_into<T: Real>(v: &[T], forcing: T, out: &mut [T]) {
    let d = v.len();
    debug_assert!(d >= 4);
    for i in 0..d {
        let ip1 = v[(i + 1) % d];
        let im1 = v[(i + d - 1) % d];
        let im2 = v[(i + d - 2) % d];
        out[i] = (ip1 - im2) * im1 - v[i] + forcing;
    }
}

pub fn lorenz96_rhs<T: Real>(v: &[T], forcing: T) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    lorenz96_rhs_into(v, forcing, &mut out);
    out
}

/// One classical fourth-order Runge-Kutta step of size `h`.
pub fn rk4_step<T: Real, F>(rhs: F, v: &[T], h: T) -> Result<Vec<T>>
where
    F: Fn(&[T], &mut [T]),
{
    let d = v.len();
    let half = lit::<T>(0.5);
    let mut k1 = vec![T::zero(); d];
    let mut k2 = vec![T::zero(); d];
    let mut k3 = vec![T::zero(); d];
    let mut k4 = vec![T::zero(); d];
    let mut tmp = vec![T::zero(); d];

    rhs(v, &mut k1);
    for i in 0..d {
        tmp[i] = v[i] + half * h * k1[i];
    }
    rhs(&tmp, &mut k2);
    for i in 0..d {
        tmp[i] = v[i] + half * h * k2[i];
    }
    rhs(&tmp, &mut k3);
    for i in 0..d {
        tmp[i] = v[i] + h * k3[i];
    }
    rhs(&tmp, &mut k4);

    let sixth = h / lit::<T>(6.0);
    let two = lit::<T>(2.0);
    let out: Vec<T> = (0..d)
        .map(|i| v[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    if !all_finite(&out) {
        return Err(Error::NonFinite("rk4_step"));
    }
    Ok(out)
}

/// Advances `v` over `dt` with `substeps` RK4 steps.
pub fn rk4_integrate<T: Real, F>(rhs: F, v: &[T], dt: T, substeps: usize) -> Result<Vec<T>>
where
    F: Fn(&[T], &mut [T]),
{
    let h = dt / T::from_usize(substeps.max(1)).unwrap();
    let mut x = v.to_vec();
    for _ in 0..substeps.max(1) {
        x = rk4_step(&rhs, &x, h)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    const S: f64 = 10.0;
    const R: f64 = 28.0;
    const B: f64 = 8.0 / 3.0;

    fn l63(v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&lorenz63_rhs(v, S, R, B));
    }

    #[test]
    fn lorenz63_fixed_points() {
        assert_eq!(lorenz63_rhs(&[0.0, 0.0, 0.0], S, R, B), [0.0; 3]);
        let c = (B * (R - 1.0)).sqrt();
        let f = lorenz63_rhs(&[c, c, R - 1.0], S, R, B);
        assert!(f.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn lorenz63_hand_value() {
        // (10(2-1), 1(28-3)-2, 1*2-(8/3)3) = (10, 23, -6)
        let f = lorenz63_rhs(&[1.0, 2.0, 3.0], S, R, B);
        assert_eq!(f[0], 10.0);
        assert_eq!(f[1], 23.0);
        assert!((f[2] + 6.0).abs() < 1e-14);
    }

    #[test]
    fn lorenz96_constant_and_zero_states() {
        let f = lorenz96_rhs(&[8.0; 40], 8.0);
        assert!(f.iter().all(|&x| x == 0.0));
        let g = lorenz96_rhs(&[0.0; 40], 8.0);
        assert!(g.iter().all(|&x| x == 8.0));
    }

    #[test]
    fn lorenz96_matches_index_loop() {
        let mut rng = RngStream::new(3, 0);
        let v: Vec<f64> = rng.normal_vec(5);
        let f = lorenz96_rhs(&v, 8.0);
        // explicit cyclic neighbours for d = 5
        let nb = |i: usize| -> (usize, usize, usize) {
            match i {
                0 => (1, 4, 3),
                1 => (2, 0, 4),
                2 => (3, 1, 0),
                3 => (4, 2, 1),
                _ => (0, 3, 2),
            }
        };
        for i in 0..5 {
            let (p1, m1, m2) = nb(i);
            let expect = (v[p1] - v[m2]) * v[m1] - v[i] + 8.0;
            assert_eq!(f[i], expect);
        }
    }

    #[test]
    fn lorenz96_rotation_equivariance() {
        let mut rng = RngStream::new(4, 0);
        let v: Vec<f64> = rng.normal_vec(40).into_iter().map(|x: f64| 3.0 * x).collect();
        let f = lorenz96_rhs(&v, 8.0);
        for shift in [1, 7, 39] {
            let rv: Vec<f64> = (0..40).map(|i| v[(i + shift) % 40]).collect();
            let rf = lorenz96_rhs(&rv, 8.0);
            for i in 0..40 {
                assert!((rf[i] - f[(i + shift) % 40]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let v = vec![1.0, -2.0];
        let out = rk4_step(|_: &[f64], o: &mut [f64]| o.fill(0.0), &v, 0.3).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn rk4_linear_growth_is_fourth_order_taylor() {
        let out = rk4_step(|x: &[f64], o: &mut [f64]| o[0] = x[0], &[2.0], 0.1).unwrap();
        let h: f64 = 0.1;
        let expect = 2.0 * (1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0);
        assert!((out[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn rk4_refinement_lorenz63() {
        let v = [1.0, 1.0, 20.0];
        let coarse = rk4_integrate(l63, &v, 0.15, 5).unwrap();
        let fine = rk4_integrate(l63, &v, 0.15, 50).unwrap();
        let diff: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fine.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative difference {}", diff / norm);
    }

    #[test]
    fn rk4_reports_blowup() {
        let r = rk4_step(|x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0] * 1e300, &[1e10], 1.0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
