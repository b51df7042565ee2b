//! Kuramoto-Sivashinsky `u_t + u_xxxx + u_xx + u u_x = 0` on a periodic
//! domain, integrated with ETDRK4 on a Fourier pseudo-spectral grid.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::autodiff::Var;
use crate::numerics::{all_finite, lit, Matrix, Real};

/// Number of contour points used to evaluate the ETDRK4 phi functions.
const CONTOUR_POINTS: usize = 32;

#[derive(Clone)]
pub struct KsSolver<T: Real = f64> {
    n: usize,
    length: f64,
    h: f64,
    nonlinear: bool,
    e: Vec<T>,
    e2: Vec<T>,
    q: Vec<T>,
    f1: Vec<T>,
    f2: Vec<T>,
    f3: Vec<T>,
    /// `-0.5 i k` with 2/3-rule dealiasing folded in.
    g: Vec<Complex<T>>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
    /// `cos(2 pi j m / n)` and `sin(2 pi j m / n)` for the differentiable step.
    dft_cos: Arc<Matrix<T>>,
    dft_sin: Arc<Matrix<T>>,
}

impl<T: Real> std::fmt::Debug for KsSolver<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KsSolver")
            .field("n", &self.n)
            .field("length", &self.length)
            .field("h", &self.h)
            .field("nonlinear", &self.nonlinear)
            .finish()
    }
}

impl<T: Real> KsSolver<T> {
    /// Solver on `n` grid points `x_j = j L / n` with ETDRK4 step `h`.
    pub fn new(n: usize, length: f64, h: f64) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);

        let cutoff = n as f64 / 3.0;
        let mut e = Vec::with_capacity(n);
        let mut e2 = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        let mut f1 = Vec::with_capacity(n);
        let mut f2 = Vec::with_capacity(n);
        let mut f3 = Vec::with_capacity(n);
        let mut g = Vec::with_capacity(n);
        let roots: Vec<Complex<f64>> = (0..CONTOUR_POINTS)
            .map(|j| Complex::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / CONTOUR_POINTS as f64))
            .collect();

        for m in 0..n {
            let mode = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
            let k = 2.0 * PI * mode / length;
            let lin = k * k - k.powi(4);
            e.push(lit((h * lin).exp()));
            e2.push(lit((h * lin / 2.0).exp()));

            let (mut sq, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for r in &roots {
                let lr = Complex::new(h * lin, 0.0) + r;
                let elr = lr.exp();
                let lr3 = lr * lr * lr;
                sq += (((lr / 2.0).exp() - 1.0) / lr).re;
                s1 += ((-4.0 - lr + elr * (4.0 - 3.0 * lr + lr * lr)) / lr3).re;
                s2 += ((2.0 + lr + elr * (-2.0 + lr)) / lr3).re;
                s3 += ((-4.0 - 3.0 * lr - lr * lr + elr * (4.0 - lr)) / lr3).re;
            }
            let mp = CONTOUR_POINTS as f64;
            q.push(lit(h * sq / mp));
            f1.push(lit(h * s1 / mp));
            f2.push(lit(h * s2 / mp));
            f3.push(lit(h * s3 / mp));

            let nyquist = n.is_multiple_of(2) && m == n / 2;
            let kept = mode.abs() <= cutoff && !nyquist;
            g.push(if kept { Complex::new(T::zero(), lit(-0.5 * k)) } else { Complex::new(T::zero(), T::zero()) });
        }
        let angle = |j: usize, m: usize| 2.0 * PI * ((j * m) % n) as f64 / n as f64;
        let dft_cos = Arc::new(Matrix::from_fn(n, n, |j, m| lit(angle(j, m).cos())));
        let dft_sin = Arc::new(Matrix::from_fn(n, n, |j, m| lit(angle(j, m).sin())));
        Self { n, length, h, nonlinear: true, e, e2, q, f1, f2, f3, g, fwd, inv, dft_cos, dft_sin }
    }

    /// Drops the `u u_x` term, leaving the diagonal linear propagator.
    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn domain_length(&self) -> f64 {
        self.length
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Linear growth rate `k^2 - k^4` of Fourier mode `m`.
    pub fn linear_rate(&self, m: usize) -> f64 {
        let mode = if m <= self.n / 2 { m as f64 } else { m as f64 - self.n as f64 };
        let k = 2.0 * PI * mode / self.length;
        k * k - k.powi(4)
    }

    pub fn forward_fft(&self, u: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = u.iter().map(|&x| Complex::new(x, T::zero())).collect();
        self.fwd.process(&mut buf);
        buf
    }

    fn to_physical(&self, v: &[Complex<T>]) -> Vec<T> {
        let mut buf = v.to_vec();
        self.inv.process(&mut buf);
        let scale = T::one() / T::from_usize(self.n).unwrap();
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn nonlinear_term(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        if !self.nonlinear {
            return vec![Complex::new(T::zero(), T::zero()); self.n];
        }
        let u = self.to_physical(v);
        let sq: Vec<T> = u.iter().map(|&x| x * x).collect();
        let mut spec = self.forward_fft(&sq);
        for (s, g) in spec.iter_mut().zip(&self.g) {
            *s *= *g;
        }
        spec
    }

    /// One ETDRK4 step of size `h` in spectral space.
    fn etdrk4(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.n;
        let two = lit::<T>(2.0);
        let nv = self.nonlinear_term(v);
        let a: Vec<Complex<T>> = (0..n).map(|i| v[i] * self.e2[i] + nv[i] * self.q[i]).collect();
        let na = self.nonlinear_term(&a);
        let b: Vec<Complex<T>> = (0..n).map(|i| v[i] * self.e2[i] + na[i] * self.q[i]).collect();
        let nb = self.nonlinear_term(&b);
        let c: Vec<Complex<T>> =
            (0..n).map(|i| a[i] * self.e2[i] + (nb[i] * two - nv[i]) * self.q[i]).collect();
        let nc = self.nonlinear_term(&c);
        (0..n)
            .map(|i| {
                v[i] * self.e[i]
                    + nv[i] * self.f1[i]
                    + (na[i] + nb[i]) * (two * self.f2[i])
                    + nc[i] * self.f3[i]
            })
            .collect()
    }

    /// Advances the grid values `u` by `substeps` ETDRK4 steps.
    pub fn step(&self, u: &[T], substeps: usize) -> Result<Vec<T>> {
        if u.len() != self.n {
            return Err(crate::error::dim_mismatch(format!(
                "KS state of length {} on a {}-point grid",
                u.len(),
                self.n
            )));
        }
        let mut v = self.forward_fft(u);
        for _ in 0..substeps {
            v = self.etdrk4(&v);
        }
        let out = self.to_physical(&v);
        if !all_finite(&out) {
            return Err(Error::NonFinite("ks_step"));
        }
        Ok(out)
    }
}

type Spectrum<'t, T> = (Var<'t, T>, Var<'t, T>);

impl<T: Real> KsSolver<T> {
    /// The step of [`KsSolver::step`] on rows of `u`, recorded on a tape with
    /// dense real DFTs (real and imaginary parts carried separately).
    pub fn step_on_tape<'t>(&self, u: Var<'t, T>, substeps: usize) -> Result<Var<'t, T>> {
        let tape = u.tape();
        let c = tape.constant((*self.dft_cos).clone());
        let s = tape.constant((*self.dft_sin).clone());
        let row = |v: &[T]| tape.row(v);
        let gamma: Vec<T> = self.g.iter().map(|z| z.im).collect();
        let (e, e2, q, gam) = (row(&self.e), row(&self.e2), row(&self.q), row(&gamma));
        let (f1, f2x2, f3) = (row(&self.f1), row(&self.f2.iter().map(|&x| x + x).collect::<Vec<T>>()), row(&self.f3));
        let inv_n = T::one() / lit::<T>(self.n as f64);
        let physical = |(re, im): Spectrum<'t, T>| -> Result<Var<'t, T>> {
            Ok(re.matmul(c)?.sub(im.matmul(s)?)?.scale(inv_n))
        };
        let nonlinear = |v: Spectrum<'t, T>| -> Result<Spectrum<'t, T>> {
            let x = physical(v)?;
            let sq = x.mul(x)?;
            // (sq C - i sq S) * (i gamma)
            Ok((sq.matmul(s)?.mul_row(gam)?, sq.matmul(c)?.mul_row(gam)?))
        };
        // x * a + y * b, componentwise on spectra with real row coefficients
        let lin = |x: Spectrum<'t, T>, a: Var<'t, T>, y: Spectrum<'t, T>, b: Var<'t, T>| -> Result<Spectrum<'t, T>> {
            Ok((x.0.mul_row(a)?.add(y.0.mul_row(b)?)?, x.1.mul_row(a)?.add(y.1.mul_row(b)?)?))
        };
        let add = |x: Spectrum<'t, T>, y: Spectrum<'t, T>| -> Result<Spectrum<'t, T>> { Ok((x.0.add(y.0)?, x.1.add(y.1)?)) };
        let mut v: Spectrum<'t, T> = (u.matmul(c)?, u.matmul(s)?.scale(-T::one()));
        for _ in 0..substeps {
            if !self.nonlinear {
                v = (v.0.mul_row(e)?, v.1.mul_row(e)?);
                continue;
            }
            let nv = nonlinear(v)?;
            let a = lin(v, e2, nv, q)?;
            let na = nonlinear(a)?;
            let b = lin(v, e2, na, q)?;
            let nb = nonlinear(b)?;
            let two = lit::<T>(2.0);
            let nb2 = (nb.0.scale(two).sub(nv.0)?, nb.1.scale(two).sub(nv.1)?);
            let cc = lin(a, e2, nb2, q)?;
            let nc = nonlinear(cc)?;
            let first = lin(v, e, nv, f1)?;
            let mid = lin(add(na, nb)?, f2x2, nc, f3)?;
            v = add(first, mid)?;
        }
        physical(v)
    }
}

/// Initial profile `cos(2x/L) (1 + sin(2x/L))` sampled on the grid.
pub fn ks_base_profile<T: Real>(n: usize, length: f64) -> Vec<T> {
    (0..n)
        .map(|j| {
            let x = j as f64 * length / n as f64;
            lit((2.0 * x / length).cos() * (1.0 + (2.0 * x / length).sin()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn solver() -> KsSolver<f64> {
        KsSolver::new(128, 32.0 * PI, 0.25)
    }

    #[test]
    fn zero_stays_zero() {
        let u = solver().step(&[0.0; 128], 4).unwrap();
        assert!(u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_is_steady() {
        let u = solver().step(&[0.7; 128], 4).unwrap();
        assert!(u.iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn linear_modes_follow_exponential_factors() {
        let s = solver().linear_only();
        let mut rng = RngStream::new(8, 0);
        let u0: Vec<f64> = rng.normal_vec(128);
        let before = s.forward_fft(&u0);
        let after = s.forward_fft(&s.step(&u0, 4).unwrap());
        for m in 0..=64 {
            let expect = (1.0 * s.linear_rate(m)).exp();
            // modes damped below 1e-6 sink into FFT round-off
            if before[m].norm() < 1e-8 || expect < 1e-6 {
                continue;
            }
            let ratio = after[m].norm() / before[m].norm();
            assert!(((ratio - expect) / expect).abs() < 1e-6, "mode {m}: {ratio} vs {expect}");
        }
    }

    #[test]
    fn long_run_stays_bounded() {
        let s = solver();
        let mut rng = RngStream::new(1, 0);
        let mut u = ks_base_profile::<f64>(128, 32.0 * PI);
        for x in u.iter_mut() {
            *x += 0.01 * rng.standard_normal::<f64>();
        }
        for _ in 0..500 {
            u = s.step(&u, 4).unwrap();
        }
        assert!(u.iter().all(|x| x.abs() < 10.0));
        // chaotic regime: the solution should not have decayed to a constant
        let mean = u.iter().sum::<f64>() / 128.0;
        assert!(u.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max) > 0.5);
    }
}
