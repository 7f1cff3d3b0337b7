//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates the
//! gradient of a scalar (1×1) output with respect to every recorded node.
//! Shapes are checked eagerly when an operation is recorded; a mismatch is
//! a programming error and panics.

use std::sync::Arc;

use crate::matrix::{Csr, Matrix};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    /// Constant sparse left factor.
    SparseLeft(Arc<Csr<T>>, Var),
    Add(Var, Var),
    Scale(Var, T),
    /// x + row vector broadcast over rows
    AddRow(Var, Var),
    /// x ⊙ row vector broadcast over rows
    MulRow(Var, Var),
    /// x ⊙ column vector broadcast over columns
    MulCol(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    /// Row i from `primary[map[i]]` when mapped, else `fallback[i]`.
    SelectRows {
        primary: Var,
        fallback: Var,
        map: Arc<Vec<Option<usize>>>,
    },
    HConcat(Vec<Var>),
    SliceCols(Var, usize, usize),
    RowSoftmax(Var),
    LayerNorm(Var, T),
    Gelu(Var),
    /// Summed softmax cross-entropy over rows whose mask is set.
    CrossEntropySum {
        logits: Var,
        targets: Arc<Vec<usize>>,
        mask: Arc<Vec<bool>>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Recorded computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]. Nodes that did not influence the output
/// have no entry.
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn sparse_left(&mut self, s: Arc<Csr<T>>, x: Var) -> Var {
        let v = s.matmul_dense(self.value(x));
        self.push(v, Op::SparseLeft(s, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.shape(), (1, xv.cols()), "add_row broadcast shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        assert_eq!(gv.shape(), (1, xv.cols()), "mul_row broadcast shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &gg) in out.row_mut(r).iter_mut().zip(gv.row(0)) {
                *o *= gg;
            }
        }
        self.push(out, Op::MulRow(x, g))
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert_eq!(cv.shape(), (xv.rows(), 1), "mul_col broadcast shape");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = cv[(r, 0)];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(x, c))
    }

    pub fn gather(&mut self, x: Var, rows: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::Gather(x, rows))
    }

    pub fn select_rows(&mut self, primary: Var, fallback: Var, map: Arc<Vec<Option<usize>>>) -> Var {
        let (pv, fv) = (self.value(primary), self.value(fallback));
        assert_eq!(map.len(), fv.rows(), "select_rows map length");
        assert_eq!(pv.cols(), fv.cols(), "select_rows width");
        let mut out = fv.clone();
        for (i, m) in map.iter().enumerate() {
            if let Some(u) = *m {
                out.row_mut(i).copy_from_slice(pv.row(u));
            }
        }
        self.push(out, Op::SelectRows { primary, fallback, map })
    }

    pub fn hconcat(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty(), "hconcat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "hconcat row count");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(out, Op::HConcat(parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.cols(), "slice_cols range");
        let mut out = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(x, start, end))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::RowSoftmax(x))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let (mean, rstd) = row_moments(xv.row(r), eps);
            for o in out.row_mut(r) {
                *o = (*o - mean) * rstd;
            }
        }
        self.push(out, Op::LayerNorm(x, eps))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Arc<Vec<usize>>, mask: Arc<Vec<bool>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "cross entropy target count");
        assert_eq!(mask.len(), lv.rows(), "cross entropy mask length");
        let mut total = T::zero();
        for r in 0..lv.rows() {
            if mask[r] {
                let row = lv.row(r);
                total += log_sum_exp(row) - row[targets[r]];
            }
        }
        self.push(
            Matrix::filled(1, 1, total),
            Op::CrossEntropySum { logits, targets, mask },
        )
    }

    /// Gradient of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar");
        self.backward_from(out, Matrix::filled(1, 1, T::one()))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, seed: Matrix<T>) -> Grads<T> {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let ga = g.matmul(self.value(*b));
                let gb = g.t_matmul(self.value(*a));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::SparseLeft(s, x) => {
                accumulate(grads, *x, s.t_matmul_dense(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let mut gx = g.clone();
                let mut gg = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gx[(r, c)] = g[(r, c)] * gv[(0, c)];
                        gg[(0, c)] += g[(r, c)] * xv[(r, c)];
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let mut gx = g.clone();
                let mut gc = Matrix::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    let s = cv[(r, 0)];
                    let mut acc = T::zero();
                    for c in 0..g.cols() {
                        gx[(r, c)] = g[(r, c)] * s;
                        acc += g[(r, c)] * xv[(r, c)];
                    }
                    gc[(r, 0)] = acc;
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *col, gc);
            }
            Op::Gather(x, rows) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SelectRows { primary, fallback, map } => {
                let pv = self.value(*primary);
                let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                let mut gf = g.clone();
                for (i, m) in map.iter().enumerate() {
                    if let Some(u) = *m {
                        for (o, &v) in gp.row_mut(u).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                        gf.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                accumulate(grads, *primary, gp);
                accumulate(grads, *fallback, gf);
            }
            Op::HConcat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    accumulate(grads, p, gp);
                    off += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner: T = y.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols() {
                        gx[(r, c)] = y[(r, c)] * (g[(r, c)] - inner);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm(x, eps) => {
                let xv = self.value(*x);
                let y = &node.value;
                let n = T::lit(xv.cols() as f64);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let (_, rstd) = row_moments(xv.row(r), *eps);
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g: T = gr.iter().copied().sum::<T>() / n;
                    let mean_gy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for c in 0..xv.cols() {
                        gx[(r, c)] = rstd * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu(v).1;
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropySum { logits, targets, mask } => {
                let lv = self.value(*logits);
                let up = g[(0, 0)];
                let mut gl = Matrix::zeros(lv.rows(), lv.cols());
                for r in 0..lv.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let out = gl.row_mut(r);
                    out.copy_from_slice(lv.row(r));
                    softmax_in_place(out);
                    out[targets[r]] -= T::one();
                    for o in out.iter_mut() {
                        *o *= up;
                    }
                }
                accumulate(grads, *logits, gl);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// tanh-approximated GELU and its derivative.
fn gelu<T: Real>(x: T) -> (T, T) {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

/// Numerically stable in-place softmax (max subtraction).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of a scalar function built on the tape
    /// with respect to every leaf it is given.
    fn check(leaves: Vec<Matrix<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let run = |vals: &[Matrix<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| t.leaf(m.clone())).collect();
            let out = build(&mut t, &vars);
            (t, vars, out)
        };
        let (tape, vars, out) = run(&leaves);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(leaf.rows(), leaf.cols()));
            for k in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].as_mut_slice()[k] += eps;
                let mut minus = leaves.clone();
                minus[li].as_mut_slice()[k] -= eps;
                let (tp, _, op) = run(&plus);
                let (tm, _, om) = run(&minus);
                let fd = (tp.value(op)[(0, 0)] - tm.value(om)[(0, 0)]) / (2.0 * eps);
                let a = analytic.as_slice()[k];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "leaf {li} coord {k}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn sum_all(t: &mut Tape<f64>, x: Var, weights: &Matrix<f64>) -> Var {
        // <x, weights> as a sum of per-row dot products
        let r = t.value(x).rows();
        assert_eq!(weights.shape(), t.value(x).shape());
        let w = t.leaf(weights.clone());
        let mut acc: Option<Var> = None;
        for i in 0..r {
            let sel = t.gather(x, Arc::new(vec![i]));
            let wsel = t.gather(w, Arc::new(vec![i]));
            let d = t.matmul_t(sel, wsel);
            acc = Some(match acc {
                None => d,
                Some(a) => t.add(a, d),
            });
        }
        acc.unwrap()
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 4, 2);
        let row = rand_matrix(&mut rng, 1, 2);
        let col = rand_matrix(&mut rng, 3, 1);
        let w = rand_matrix(&mut rng, 3, 2);
        check(vec![a, b, row.clone(), row, col], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let p = t.add_row(p, v[2]);
            let p = t.mul_row(p, v[3]);
            let p = t.mul_col(p, v[4]);
            let p = t.gelu(p);
            let p = t.layer_norm(p, 1e-5);
            let p = t.row_softmax(p);
            let p = t.scale(p, 1.7);
            sum_all(t, p, &w)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = rand_matrix(&mut rng, 3, 2);
        let e = rand_matrix(&mut rng, 4, 2);
        let v = rand_matrix(&mut rng, 2, 2);
        let adj = Arc::new(Csr::from_dense(&Matrix::from_f64(
            3,
            3,
            &[0.5, 0.5, 0.0, 0.5, 0.3, 0.2, 0.0, 0.2, 0.8],
        )));
        let map = Arc::new(vec![Some(2), None, Some(0), None]);
        check(vec![h, e, v], move |t, x| {
            let ah = t.sparse_left(adj.clone(), x[0]);
            let w = t.select_rows(ah, x[1], map.clone());
            let g = t.gather(x[1], Arc::new(vec![1, 1]));
            let cat = t.hconcat(vec![g, x[2]]);
            let s = t.slice_cols(cat, 1, 3);
            let logits = t.matmul_t(s, w);
            t.cross_entropy_sum(logits, Arc::new(vec![3, 0]), Arc::new(vec![true, true]))
        });
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(Matrix::from_f64(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let ce = t.cross_entropy_sum(l, Arc::new(vec![0, 1]), Arc::new(vec![false, true]));
        assert!((t.value(ce)[(0, 0)] - 3f64.ln()).abs() < 1e-12);
        let g = t.backward(ce);
        assert!(g.get(l).unwrap().row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = vec![1.0f64, 2.0, -3.0];
        let mut b: Vec<f64> = a.iter().map(|x| x + 1000.0).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
