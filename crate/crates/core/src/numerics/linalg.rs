use super::{lit, Matrix, Real};
use crate::error::{dim_mismatch, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Clone, Debug)]
pub struct Cholesky<T: Real = f64> {
    l: Matrix<T>,
}

pub fn cholesky<T: Real>(a: &Matrix<T>) -> Result<Cholesky<T>> {
    if !a.is_square() {
        return Err(dim_mismatch(format!("cholesky of {}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::NotSpd { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(Cholesky { l })
}

impl<T: Real> Cholesky<T> {
    pub fn factor(&self) -> &Matrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.dim();
        if b.rows() != n {
            return Err(dim_mismatch(format!("solve with {n}x{n} against {} rows", b.rows())));
        }
        let mut x = b.clone();
        for c in 0..b.cols() {
            // forward: L z = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            // backward: L^T x = z
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[T]) -> Result<Vec<T>> {
        let m = Matrix::from_vec(b.len(), 1, b.to_vec())?;
        Ok(self.solve(&m)?.into_vec())
    }

    pub fn log_det(&self) -> T {
        let two = lit::<T>(2.0);
        self.l.diag().into_iter().map(|d| two * d.ln()).sum()
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    cholesky(a)?.solve(b)
}

/// Eigen-decomposition of a symmetric matrix: `A = V diag(values) V^T`.
///
/// Eigenvalues are sorted ascending; column `i` of `vectors` pairs with `values[i]`.
#[derive(Clone, Debug)]
pub struct SymEig<T: Real = f64> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

impl<T: Real> SymEig<T> {
    /// Rebuilds `V diag(f(values)) V^T`.
    pub fn reconstruct(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            for i in 0..n {
                scaled[(i, j)] *= fj;
            }
        }
        scaled.matmul_t(&self.vectors).expect("square factors")
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eig<T: Real>(a: &Matrix<T>) -> Result<SymEig<T>> {
    if !a.is_square() {
        return Err(dim_mismatch(format!("eigendecomposition of {}x{}", a.rows(), a.cols())));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("sym_eig"));
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let tol = T::epsilon() * lit::<T>(0.5) * scale;
    let mut converged = n <= 1 || scale == T::zero();
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        sweeps += 1;
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= T::min_positive_value() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::EigFailure { sweeps });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Applies a scalar function to the spectrum of a symmetric matrix.
pub fn sym_fn<T: Real>(a: &Matrix<T>, f: impl Fn(T) -> T) -> Result<Matrix<T>> {
    Ok(sym_eig(a)?.reconstruct(f).symmetrize())
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
pub fn sym_sqrt<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    sym_fn(a, |x| x.max(T::zero()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_matrix(rng: &mut RngStream, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.standard_normal())
    }

    fn random_spd(rng: &mut RngStream, n: usize) -> Matrix<f64> {
        let m = random_matrix(rng, n, n);
        m.matmul_t(&m).unwrap().add(&Matrix::identity(n)).unwrap()
    }

    /// Gauss-Jordan elimination with partial pivoting, independent of Cholesky.
    fn gauss_jordan(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let n = a.rows();
        let m = b.cols();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for x in aug[col].iter_mut() {
                *x /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    let pivot_row = aug[col].clone();
                    for (x, y) in aug[r].iter_mut().zip(pivot_row) {
                        *x -= f * y;
                    }
                }
            }
        }
        Matrix::from_fn(n, m, |i, j| aug[i][n + j])
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let mut rng = RngStream::new(1, 0);
        let b = random_matrix(&mut rng, 3, 2);
        let x = solve_spd(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_diagonal() {
        let a = Matrix::from_diag(&[2.0, 4.0]);
        let x = solve_spd(&a, &Matrix::identity(2)).unwrap();
        assert!(x.sub(&Matrix::from_diag(&[0.5, 0.25])).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn solve_matches_gauss_jordan() {
        let mut rng = RngStream::new(7, 3);
        let a = random_spd(&mut rng, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let x = solve_spd(&a, &b).unwrap();
        let oracle = gauss_jordan(&a, &b);
        assert!(x.sub(&oracle).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn solve_residual_up_to_dim_128() {
        let mut rng = RngStream::new(11, 0);
        for n in [1, 2, 7, 32, 128] {
            let a = random_spd(&mut rng, n);
            let b = random_matrix(&mut rng, n, 2);
            let x = solve_spd(&a, &b).unwrap();
            let r = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
            assert!(r <= 1e-8 * b.frobenius_norm(), "n={n} residual {r}");
        }
    }

    #[test]
    fn not_spd_is_reported() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(solve_spd(&a, &Matrix::identity(2)), Err(Error::NotSpd { pivot: 1 })));
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(sym_sqrt(&Matrix::<f64>::identity(3)).unwrap(), Matrix::identity(3));
        let s = sym_sqrt(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(s.sub(&Matrix::from_diag(&[2.0, 3.0])).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn sqrt_reconstructs_random_psd() {
        let mut rng = RngStream::new(5, 5);
        for n in [2, 6, 12] {
            let m = random_matrix(&mut rng, n, n - 1);
            let a = m.matmul_t(&m).unwrap();
            let s = sym_sqrt(&a).unwrap();
            assert!(s.is_symmetric(1e-12));
            let r = s.matmul(&s).unwrap().sub(&a).unwrap().frobenius_norm();
            assert!(r <= 1e-8 * (1.0 + a.frobenius_norm()), "residual {r}");
            let min_eig = sym_eig(&s).unwrap().values[0];
            assert!(min_eig >= -1e-10);
        }
    }

    #[test]
    fn eig_sorted_and_orthonormal() {
        let mut rng = RngStream::new(2, 9);
        let a = random_spd(&mut rng, 8);
        let e = sym_eig(&a).unwrap();
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let vtv = e.vectors.t_matmul(&e.vectors).unwrap();
        assert!(vtv.sub(&Matrix::identity(8)).unwrap().max_abs() < 1e-12);
        assert!(e.reconstruct(|x| x).sub(&a).unwrap().max_abs() < 1e-10);
    }
}
