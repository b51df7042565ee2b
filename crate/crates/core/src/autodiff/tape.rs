use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{cholesky, gemm_into, lit, Cholesky, Matrix, Real};

/// Layer-norm stabilizer added to the variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Vector-Jacobian product of a map evaluated outside the tape.
pub trait Vjp<T: Real> {
    /// Gradient with respect to `input` given the output cotangent.
    fn vjp(&self, input: &Matrix<T>, cotangent: &Matrix<T>) -> Result<Matrix<T>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    RepeatRows { a: usize, n: usize },
    BlockMeans { a: usize, n: usize },
    Concat(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    Attention { q: usize, k: usize, v: usize, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<T> },
    Gather { a: usize, index: Vec<usize> },
    Reshape(usize),
    Transpose(usize),
    MeanRows(usize),
    MeanCols(usize),
    Sum(usize),
    SoftmaxRows(usize),
    Exp(usize),
    Relu(usize),
    Logistic(usize),
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Matrix<T>, inv_std: Vec<T> },
    SolveSpd { a: usize, b: usize, chol: Cholesky<T> },
    Clamp { a: usize, bound: T },
    Custom { a: usize, f: Rc<dyn Vjp<T>> },
}

struct Node<T: Real> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of matrix operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so inputs always precede outputs.
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` if no gradient flowed to it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Matrix<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Matrix<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Matrix<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Row vector constant.
    pub fn row(&self, values: &[T]) -> Var<'_, T> {
        self.constant(Matrix::from_vec(1, values.len(), values.to_vec()).expect("row length"))
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Matrix<T>) -> Matrix<T>, op: Op<T>) -> Var<'_, T> {
        let value = f(&self.nodes.borrow()[a].value);
        let rg = self.grad_flag(&[a]);
        self.push(value, op, rg)
    }

    /// Column-wise concatenation `[x_1, x_2, ...]` of equally tall blocks.
    pub fn concat_cols(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = match ids.first() {
                Some(&i) => nodes[i].value.rows(),
                None => return Err(shape_err("concat_cols", "no inputs".into())),
            };
            if ids.iter().any(|&i| nodes[i].value.rows() != rows) {
                return Err(shape_err("concat_cols", "row counts differ".into()));
            }
            let cols: usize = ids.iter().map(|&i| nodes[i].value.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for &i in &ids {
                    let src = nodes[i].value.row(r);
                    out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                    off += src.len();
                }
            }
            out
        };
        let rg = self.grad_flag(&ids);
        Ok(self.push(value, Op::Concat(ids), rg))
    }

    /// Row-wise stacking of equally wide blocks.
    pub fn concat_rows(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let cols = match ids.first() {
                Some(&i) => nodes[i].value.cols(),
                None => return Err(shape_err("concat_rows", "no inputs".into())),
            };
            if ids.iter().any(|&i| nodes[i].value.cols() != cols) {
                return Err(shape_err("concat_rows", "column counts differ".into()));
            }
            let rows: usize = ids.iter().map(|&i| nodes[i].value.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &i in &ids {
                data.extend_from_slice(nodes[i].value.as_slice());
            }
            Matrix::from_vec(rows, cols, data)?
        };
        let rg = self.grad_flag(&ids);
        Ok(self.push(value, Op::ConcatRows(ids), rg))
    }

    /// Multi-head dot-product attention applied independently to consecutive
    /// row segments. `segments[s] = (queries, keys)` gives the row counts of
    /// segment `s` in `q` and in `k`/`v`; head `h` uses columns
    /// `h*d_k..(h+1)*d_k`. Scores are not rescaled.
    pub fn attention(
        &self,
        q: Var<'_, T>,
        k: Var<'_, T>,
        v: Var<'_, T>,
        heads: usize,
        segments: Vec<(usize, usize)>,
    ) -> Result<Var<'_, T>> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (qm, km, vm) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
            let d = qm.cols();
            let (nq, nk): (usize, usize) = segments.iter().fold((0, 0), |(a, b), &(x, y)| (a + x, b + y));
            if heads == 0
                || d % heads != 0
                || km.cols() != d
                || vm.cols() != d
                || km.rows() != vm.rows()
                || nq != qm.rows()
                || nk != km.rows()
            {
                return Err(shape_err(
                    "attention",
                    format!("q {}x{}, k {}x{}, v {}x{}, {heads} heads", qm.rows(), d, km.rows(), km.cols(), vm.rows(), vm.cols()),
                ));
            }
            attention_forward(qm, km, vm, heads, &segments)
        };
        let rg = self.grad_flag(&[q.id, k.id, v.id]);
        Ok(self.push(value, Op::Attention { q: q.id, k: k.id, v: v.id, heads, segments, probs }, rg))
    }

    /// `X = A^{-1} B` for symmetric positive-definite `A` (lower triangle read).
    pub fn solve_spd(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>> {
        let (chol, value) = {
            let nodes = self.nodes.borrow();
            let (am, bm) = (&nodes[a.id].value, &nodes[b.id].value);
            if !am.is_square() || am.rows() != bm.rows() {
                return Err(shape_err(
                    "solve_spd",
                    format!("{}x{} against {}x{}", am.rows(), am.cols(), bm.rows(), bm.cols()),
                ));
            }
            let chol = cholesky(am)?;
            let x = chol.solve(bm)?;
            (chol, x)
        };
        let rg = self.grad_flag(&[a.id, b.id]);
        Ok(self.push(value, Op::SolveSpd { a: a.id, b: b.id, chol }, rg))
    }

    /// Node with a value computed elsewhere from `a`; `f` supplies the
    /// backward rule.
    pub fn custom(&self, a: Var<'_, T>, value: Matrix<T>, f: Rc<dyn Vjp<T>>) -> Var<'_, T> {
        let rg = self.grad_flag(&[a.id]);
        self.push(value, Op::Custom { a: a.id, f }, rg)
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::NotScalar { rows: lv.rows(), cols: lv.cols() });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::from_vec(1, 1, vec![T::one()])?);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backprop(&nodes, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

/// Gradient slot of `id`, created on first use; `None` for constants.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Matrix<T>>], id: usize) -> Option<&'g mut Matrix<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let v = &nodes[id].value;
    Some(grads[id].get_or_insert_with(|| Matrix::zeros(v.rows(), v.cols())))
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Matrix<T>>], id: usize, f: impl Fn(usize) -> T) {
    if let Some(s) = slot(nodes, grads, id) {
        for (k, x) in s.as_mut_slice().iter_mut().enumerate() {
            *x += f(k);
        }
    }
}

fn accumulate_range<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Matrix<T>>], id: usize, off: usize, g: &[T]) {
    if let Some(s) = slot(nodes, grads, id) {
        for (x, &y) in s.as_mut_slice()[off..off + g.len()].iter_mut().zip(g) {
            *x += y;
        }
    }
}

/// Segment offsets `(query row, key row)` for each segment.
fn segment_offsets(segments: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut at = (0, 0);
    segments
        .iter()
        .map(|&(a, b)| {
            let o = at;
            at = (at.0 + a, at.1 + b);
            o
        })
        .collect()
}

/// Output and attention weights, the latter laid out per segment, head, query
/// row and key row.
fn attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    segments: &[(usize, usize)],
) -> (Matrix<T>, Vec<T>) {
    let d = q.cols();
    let dk = d / heads;
    let total: usize = segments.iter().map(|&(a, b)| a * b).sum::<usize>() * heads;
    let mut probs = Vec::with_capacity(total);
    let mut out = Matrix::zeros(q.rows(), d);
    let (qs, ks, vs) = (q.as_slice(), k.as_slice(), v.as_slice());
    for (&(nq, nk), &(q0, k0)) in segments.iter().zip(&segment_offsets(segments)) {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in q0..q0 + nq {
                let qi = &qs[i * d + cols.start..i * d + cols.end];
                let base = probs.len();
                let mut mx = T::neg_infinity();
                for j in k0..k0 + nk {
                    let kj = &ks[j * d + cols.start..j * d + cols.end];
                    let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    mx = mx.max(s);
                    probs.push(s);
                }
                let mut z = T::zero();
                for p in &mut probs[base..] {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                for p in &mut probs[base..] {
                    *p /= z;
                }
                let o = &mut out.as_mut_slice()[i * d + cols.start..i * d + cols.end];
                for (jj, j) in (k0..k0 + nk).enumerate() {
                    let p = probs[base + jj];
                    for (x, &y) in o.iter_mut().zip(&vs[j * d + cols.start..j * d + cols.end]) {
                        *x += p * y;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    segments: &[(usize, usize)],
    probs: &[T],
    g: &Matrix<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = q.cols();
    let dk = d / heads;
    let (qs, ks, vs, gs) = (q.as_slice(), k.as_slice(), v.as_slice(), g.as_slice());
    let mut dq = vec![T::zero(); qs.len()];
    let mut dkk = vec![T::zero(); ks.len()];
    let mut dv = vec![T::zero(); vs.len()];
    let mut ds = Vec::new();
    let mut at = 0;
    for (&(nq, nk), &(q0, k0)) in segments.iter().zip(&segment_offsets(segments)) {
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in q0..q0 + nq {
                let p = &probs[at..at + nk];
                at += nk;
                let gi = &gs[i * d + cols.start..i * d + cols.end];
                ds.clear();
                let mut dot = T::zero();
                for (jj, j) in (k0..k0 + nk).enumerate() {
                    let vj = &vs[j * d + cols.start..j * d + cols.end];
                    let dp = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    dot += dp * p[jj];
                    ds.push(dp);
                    for (x, &y) in dv[j * d + cols.start..j * d + cols.end].iter_mut().zip(gi) {
                        *x += p[jj] * y;
                    }
                }
                let qi = &qs[i * d + cols.start..i * d + cols.end];
                for (jj, j) in (k0..k0 + nk).enumerate() {
                    let s = p[jj] * (ds[jj] - dot);
                    let kj = &ks[j * d + cols.start..j * d + cols.end];
                    for (x, &y) in dq[i * d + cols.start..i * d + cols.end].iter_mut().zip(kj) {
                        *x += s * y;
                    }
                    for (x, &y) in dkk[j * d + cols.start..j * d + cols.end].iter_mut().zip(qi) {
                        *x += s * y;
                    }
                }
            }
        }
    }
    (dq, dkk, dv)
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
    let out = &nodes[id].value;
    let gs = g.as_slice();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (am, bm) = (&nodes[a].value, &nodes[b].value);
            if let Some(s) = slot(nodes, grads, a) {
                if ta {
                    gemm_into(bm, tb, g, true, T::one(), T::one(), s);
                } else {
                    gemm_into(g, false, bm, !tb, T::one(), T::one(), s);
                }
            }
            if let Some(s) = slot(nodes, grads, b) {
                if tb {
                    gemm_into(g, true, am, ta, T::one(), T::one(), s);
                } else {
                    gemm_into(am, !ta, g, false, T::one(), T::one(), s);
                }
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, |k| gs[k]);
            accumulate(nodes, grads, b, |k| gs[k]);
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |k| gs[k]);
            accumulate(nodes, grads, b, |k| -gs[k]);
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.as_slice(), nodes[b].value.as_slice());
            accumulate(nodes, grads, a, |k| gs[k] * bv[k]);
            accumulate(nodes, grads, b, |k| gs[k] * av[k]);
        }
        &Op::Scale(a, s) => accumulate(nodes, grads, a, |k| gs[k] * s),
        &Op::AddRow { a, row } => {
            accumulate(nodes, grads, a, |k| gs[k]);
            let sums = col_sums(g);
            accumulate(nodes, grads, row, |k| sums[k]);
        }
        &Op::MulRow { a, row } => {
            let (av, rv) = (nodes[a].value.as_slice(), nodes[row].value.as_slice());
            let c = rv.len();
            accumulate(nodes, grads, a, |k| gs[k] * rv[k % c]);
            let mut sums = vec![T::zero(); c];
            for (k, (&y, &x)) in gs.iter().zip(av).enumerate() {
                sums[k % c] += y * x;
            }
            accumulate(nodes, grads, row, |k| sums[k]);
        }
        &Op::RepeatRows { a, n } => {
            let c = g.cols();
            let mut sums = Matrix::zeros(g.rows() / n, c);
            for r in 0..g.rows() {
                for (x, &y) in sums.row_mut(r / n).iter_mut().zip(g.row(r)) {
                    *x += y;
                }
            }
            accumulate(nodes, grads, a, |k| sums.as_slice()[k]);
        }
        &Op::BlockMeans { a, n } => {
            let c = g.cols();
            let nf = lit::<T>(n as f64);
            accumulate(nodes, grads, a, |k| gs[(k / c / n) * c + k % c] / nf);
        }
        Op::Concat(ids) => {
            let mut off = 0;
            for &i in ids {
                let w = nodes[i].value.cols();
                let total = g.cols();
                accumulate(nodes, grads, i, |k| gs[(k / w) * total + off + k % w]);
                off += w;
            }
        }
        &Op::SliceCols { a, start } => {
            let w = out.cols();
            if let Some(s) = slot(nodes, grads, a) {
                for r in 0..g.rows() {
                    for (x, &y) in s.row_mut(r)[start..start + w].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
        }
        &Op::SliceRows { a, start } => {
            let c = g.cols();
            accumulate_range(nodes, grads, a, start * c, gs);
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &i in ids {
                let n = nodes[i].value.as_slice().len();
                accumulate(nodes, grads, i, |k| gs[off + k]);
                off += n;
            }
        }
        Op::Attention { q, k, v, heads, segments, probs } => {
            let (dq, dk, dv) = attention_backward(
                &nodes[*q].value,
                &nodes[*k].value,
                &nodes[*v].value,
                *heads,
                segments,
                probs,
                g,
            );
            accumulate(nodes, grads, *q, |i| dq[i]);
            accumulate(nodes, grads, *k, |i| dk[i]);
            accumulate(nodes, grads, *v, |i| dv[i]);
        }
        Op::Gather { a, index } => {
            if let Some(s) = slot(nodes, grads, *a) {
                let d = s.as_mut_slice();
                for (&i, &y) in index.iter().zip(gs) {
                    d[i] += y;
                }
            }
        }
        &Op::Reshape(a) => accumulate(nodes, grads, a, |k| gs[k]),
        &Op::Transpose(a) => {
            let c = g.cols();
            let ac = nodes[a].value.cols();
            accumulate(nodes, grads, a, |k| gs[(k % ac) * c + k / ac]);
        }
        &Op::MeanRows(a) => {
            let n = lit::<T>(nodes[a].value.rows() as f64);
            let c = g.cols();
            accumulate(nodes, grads, a, |k| gs[k % c] / n);
        }
        &Op::MeanCols(a) => {
            let c = nodes[a].value.cols();
            let n = lit::<T>(c as f64);
            accumulate(nodes, grads, a, |k| gs[k / c] / n);
        }
        &Op::Sum(a) => accumulate(nodes, grads, a, |_| gs[0]),
        &Op::SoftmaxRows(a) => {
            let c = out.cols();
            let y = out.as_slice();
            let dots: Vec<T> = (0..out.rows())
                .map(|r| (0..c).map(|j| gs[r * c + j] * y[r * c + j]).sum())
                .collect();
            accumulate(nodes, grads, a, |k| y[k] * (gs[k] - dots[k / c]));
        }
        &Op::Exp(a) => {
            let y = out.as_slice();
            accumulate(nodes, grads, a, |k| gs[k] * y[k]);
        }
        &Op::Relu(a) => {
            let x = nodes[a].value.as_slice();
            accumulate(nodes, grads, a, |k| if x[k] > T::zero() { gs[k] } else { T::zero() });
        }
        &Op::Logistic(a) => {
            let y = out.as_slice();
            accumulate(nodes, grads, a, |k| gs[k] * y[k] * (T::one() - y[k]));
        }
        Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
            let c = out.cols();
            let gam = nodes[*gamma].value.as_slice();
            let xh = xhat.as_slice();
            let cf = lit::<T>(c as f64);
            let mut dx = vec![T::zero(); gs.len()];
            for r in 0..out.rows() {
                let row = r * c..(r + 1) * c;
                let dxh: Vec<T> = row.clone().map(|k| gs[k] * gam[k % c]).collect();
                let m1 = dxh.iter().copied().sum::<T>() / cf;
                let m2 = dxh.iter().zip(&xh[row.clone()]).map(|(&d, &x)| d * x).sum::<T>() / cf;
                for (j, k) in row.enumerate() {
                    dx[k] = inv_std[r] * (dxh[j] - m1 - xh[k] * m2);
                }
            }
            accumulate(nodes, grads, *a, |k| dx[k]);
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (k, &y) in gs.iter().enumerate() {
                dg[k % c] += y * xh[k];
                db[k % c] += y;
            }
            accumulate(nodes, grads, *gamma, |k| dg[k]);
            accumulate(nodes, grads, *beta, |k| db[k]);
        }
        Op::SolveSpd { a, b, chol } => {
            let need_a = nodes[*a].requires_grad;
            let need_b = nodes[*b].requires_grad;
            if !(need_a || need_b) {
                return Ok(());
            }
            let gb = chol.solve(g)?;
            if let Some(s) = slot(nodes, grads, *a) {
                // -(A^{-1} G) X^T, symmetrized
                let mut m = Matrix::zeros(s.rows(), s.cols());
                gemm_into(&gb, false, out, true, -T::one(), T::zero(), &mut m);
                let half = lit::<T>(0.5);
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        s[(i, j)] += half * (m[(i, j)] + m[(j, i)]);
                    }
                }
            }
            accumulate(nodes, grads, *b, |k| gb.as_slice()[k]);
        }
        &Op::Clamp { a, bound } => {
            let x = nodes[a].value.as_slice();
            accumulate(nodes, grads, a, |k| if x[k].abs() <= bound { gs[k] } else { T::zero() });
        }
        Op::Custom { a, f } => {
            if nodes[*a].requires_grad {
                let ga = f.vjp(&nodes[*a].value, g)?;
                accumulate(nodes, grads, *a, |k| ga.as_slice()[k]);
            }
        }
    }
    Ok(())
}

fn col_sums<T: Real>(g: &Matrix<T>) -> Vec<T> {
    let mut s = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (a, &b) in s.iter_mut().zip(g.row(r)) {
            *a += b;
        }
    }
    s
}

fn zip_values<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked")
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Copy of the current value.
    pub fn to_matrix(&self) -> Matrix<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        let v = self.value();
        (v.rows(), v.cols())
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self) -> T {
        self.value().as_slice()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value as a new constant leaf; blocks gradient flow.
    pub fn detach(self) -> Var<'t, T> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn same_shape(self, other: Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, format!("{}x{} and {}x{}", a.0, a.1, b.0, b.1)));
        }
        Ok(())
    }

    fn binary(self, other: Var<'t, T>, value: Matrix<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.grad_flag(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn matmul_impl(self, other: Var<'t, T>, ta: bool, tb: bool, name: &'static str) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
            let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
            if k != k2 {
                return Err(shape_err(
                    name,
                    format!("{}x{} by {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
                ));
            }
            let mut out = Matrix::zeros(m, n);
            gemm_into(&a, ta, &b, tb, T::one(), T::zero(), &mut out);
            out
        };
        Ok(self.binary(other, value, Op::MatMul { a: self.id, b: other.id, ta, tb }))
    }

    /// `self * other`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, false, "matmul")
    }

    /// `self * other^T`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false, true, "matmul_t")
    }

    /// `self^T * other`.
    pub fn t_matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true, false, "t_matmul")
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "add")?;
        let v = zip_values(&self.value(), &other.value(), |a, b| a + b);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "sub")?;
        let v = zip_values(&self.value(), &other.value(), |a, b| a - b);
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "mul")?;
        let v = zip_values(&self.value(), &other.value(), |a, b| a * b);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.tape.unary(self.id, |m| m.scale(s), Op::Scale(self.id, s))
    }

    /// Adds the `1 x cols` row `row` to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, r) = (self.value(), row.value());
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(shape_err("add_row", format!("{}x{} plus {}x{}", a.rows(), a.cols(), r.rows(), r.cols())));
            }
            let rs = r.as_slice();
            let data = a.as_slice().iter().enumerate().map(|(k, &x)| x + rs[k % a.cols()]).collect();
            Matrix::from_vec(a.rows(), a.cols(), data)?
        };
        Ok(self.binary(row, value, Op::AddRow { a: self.id, row: row.id }))
    }

    /// Multiplies every row elementwise by the `1 x cols` row `row`.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let (a, r) = (self.value(), row.value());
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(shape_err("mul_row", format!("{}x{} times {}x{}", a.rows(), a.cols(), r.rows(), r.cols())));
            }
            let rs = r.as_slice();
            let data = a.as_slice().iter().enumerate().map(|(k, &x)| x * rs[k % a.cols()]).collect();
            Matrix::from_vec(a.rows(), a.cols(), data)?
        };
        Ok(self.binary(row, value, Op::MulRow { a: self.id, row: row.id }))
    }

    /// Repeats every row `n` times in place: output row `r` is input row `r / n`.
    pub fn repeat_rows(self, n: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if n == 0 {
                return Err(shape_err("repeat_rows", "zero repetitions".into()));
            }
            Matrix::from_fn(a.rows() * n, a.cols(), |i, j| a[(i / n, j)])
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::RepeatRows { a: self.id, n }, rg))
    }

    /// Means of consecutive blocks of `n` rows, giving `rows / n x cols`.
    pub fn block_means(self, n: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if n == 0 || !a.rows().is_multiple_of(n) {
                return Err(shape_err("block_means", format!("{} rows in blocks of {n}", a.rows())));
            }
            let nf = lit::<T>(n as f64);
            let mut out = Matrix::zeros(a.rows() / n, a.cols());
            for r in 0..a.rows() {
                for (x, &y) in out.row_mut(r / n).iter_mut().zip(a.row(r)) {
                    *x += y;
                }
            }
            out.map(|x| x / nf)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::BlockMeans { a: self.id, n }, rg))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if start + len > a.cols() {
                return Err(shape_err("slice_cols", format!("{start}..{} of {} columns", start + len, a.cols())));
            }
            Matrix::from_fn(a.rows(), len, |i, j| a[(i, start + j)])
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SliceCols { a: self.id, start }, rg))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if start + len > a.rows() {
                return Err(shape_err("slice_rows", format!("{start}..{} of {} rows", start + len, a.rows())));
            }
            let c = a.cols();
            Matrix::from_vec(len, c, a.as_slice()[start * c..(start + len) * c].to_vec())?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SliceRows { a: self.id, start }, rg))
    }

    /// `out.flat[i] = self.flat[index[i]]` with output shape `rows x cols`.
    pub fn gather(self, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if index.len() != rows * cols {
                return Err(shape_err("gather", format!("{} indices for {rows}x{cols}", index.len())));
            }
            let src = a.as_slice();
            if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                return Err(Error::IndexOutOfRange { index: bad, len: src.len() });
            }
            Matrix::from_vec(rows, cols, index.iter().map(|&i| src[i]).collect())?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Gather { a: self.id, index }, rg))
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t, T>> {
        let value = {
            let a = self.value();
            if a.rows() * a.cols() != rows * cols {
                return Err(shape_err("reshape", format!("{}x{} into {rows}x{cols}", a.rows(), a.cols())));
            }
            Matrix::from_vec(rows, cols, a.as_slice().to_vec())?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    pub fn transpose(self) -> Var<'t, T> {
        self.tape.unary(self.id, |m| m.transpose(), Op::Transpose(self.id))
    }

    /// Mean over rows (axis 0), giving `1 x cols`.
    pub fn mean_rows(self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |m| {
                let n = lit::<T>(m.rows() as f64);
                let s = col_sums(m);
                Matrix::from_vec(1, m.cols(), s.into_iter().map(|x| x / n).collect()).expect("row")
            },
            Op::MeanRows(self.id),
        )
    }

    /// Mean over columns (axis 1), giving `rows x 1`.
    pub fn mean_cols(self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |m| {
                let n = lit::<T>(m.cols() as f64);
                Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().copied().sum::<T>() / n)
            },
            Op::MeanCols(self.id),
        )
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |m| Matrix::from_vec(1, 1, vec![m.as_slice().iter().copied().sum()]).expect("scalar"),
            Op::Sum(self.id),
        )
    }

    /// Softmax along each row.
    pub fn softmax_rows(self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |m| {
                let mut out = m.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut z = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                out
            },
            Op::SoftmaxRows(self.id),
        )
    }

    pub fn exp(self) -> Var<'t, T> {
        self.tape.unary(self.id, |m| m.map(|x| x.exp()), Op::Exp(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.tape.unary(self.id, |m| m.map(|x| x.max(T::zero())), Op::Relu(self.id))
    }

    pub fn logistic(self) -> Var<'t, T> {
        self.tape.unary(self.id, |m| m.map(|x| T::one() / (T::one() + (-x).exp())), Op::Logistic(self.id))
    }

    /// Per-row normalization to zero mean and unit variance followed by the
    /// affine map `gamma * x + beta` (`gamma`, `beta`: `1 x cols`).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, xhat, inv_std) = {
            let (a, g, b) = (self.value(), gamma.value(), beta.value());
            let c = a.cols();
            if g.rows() != 1 || b.rows() != 1 || g.cols() != c || b.cols() != c {
                return Err(shape_err("layer_norm", format!("affine parameters must be 1x{c}")));
            }
            let cf = lit::<T>(c as f64);
            let eps = lit::<T>(LAYER_NORM_EPS);
            let mut xhat = a.clone();
            let mut inv_std = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let row = xhat.row_mut(r);
                let mean = row.iter().copied().sum::<T>() / cf;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / cf;
                let is = T::one() / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv_std.push(is);
            }
            let (gs, bs) = (g.as_slice(), b.as_slice());
            let data = xhat.as_slice().iter().enumerate().map(|(k, &x)| gs[k % c] * x + bs[k % c]).collect();
            (Matrix::from_vec(a.rows(), c, data)?, xhat, inv_std)
        };
        let rg = self.tape.grad_flag(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(value, Op::LayerNorm { a: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std }, rg))
    }

    /// Sign-preserving clamp of every entry to `[-bound, bound]`.
    pub fn clamp_abs(self, bound: T) -> Var<'t, T> {
        let clamp = |x: T| {
            if x > bound {
                bound
            } else if x < -bound {
                -bound
            } else {
                x
            }
        };
        self.tape.unary(self.id, |m| m.map(clamp), Op::Clamp { a: self.id, bound })
    }

    /// Sum of squared entries.
    pub fn sq_sum(self) -> Result<Var<'t, T>> {
        Ok(self.mul(self)?.sum())
    }
}
