//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1×1`. Operations are
//! recorded in creation order, so a single reverse sweep in index order is a
//! valid topological traversal.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// Compressed sparse row matrix with constant entries.
#[derive(Debug, Clone)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` entries; entries are grouped by row in
    /// the order given, which fixes the summation order of products.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for &(r, _, _) in entries {
            counts[r + 1] += 1;
        }
        for r in 0..rows {
            counts[r + 1] += counts[r];
        }
        let indptr = counts.clone();
        let mut fill = counts;
        let mut indices = vec![0; entries.len()];
        let mut values = vec![0.0; entries.len()];
        for &(r, c, v) in entries {
            let at = fill[r];
            indices[at] = c;
            values[at] = v;
            fill[r] += 1;
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut entries = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                entries.push((self.indices[k], r, self.values[k]));
            }
        }
        // stable by original row order within each new row
        Csr::from_triplets(self.cols, self.rows, &entries)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn matmul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "csr matmul shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut row = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                row.scaled_add(self.values[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] += self.values[k];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    ConcatCols(usize, usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    SegmentSoftmax(usize, Rc<Vec<usize>>, usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    RowSum(usize),
    Sum(usize),
    BlockRowDot(usize, usize, usize),
    StraightThrough(usize),
    SpMM(Rc<Csr>, usize),
    RowNormalize(usize, f64),
    Diag(usize),
    SumSquares(usize),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
}

/// Recording tape. Variables borrow the tape, so a tape lives for one
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}{:?}", self.idx, v.dim())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient with respect to `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Array2<f64> {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.idx]),
        }
    }

    pub fn touched(&self, v: Var<'_>) -> bool {
        self.grads[v.idx].is_some()
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    fn val(&self, idx: usize) -> Rc<Array2<f64>> {
        self.nodes.borrow()[idx].value.clone()
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, out: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[out.idx].value.dim(),
            (1, 1),
            "backward needs a scalar output"
        );
        let n = nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[out.idx] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
            match &mut grads[idx] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, g.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut grads, *a, &g * &**bv);
                    acc(&mut grads, *b, &g * &**av);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulCol(a, col) => {
                    let av = &nodes[*a].value;
                    let cv = &nodes[*col].value;
                    acc(&mut grads, *a, &g * &**cv);
                    let gc = (&g * &**av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddConst(a) => acc(&mut grads, *a, g.clone()),
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(r);
                        row += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    for (k, &r) in idx.iter().enumerate() {
                        ga.row_mut(k).assign(&g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[*a].value.ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::LeakyRelu(a, slope) => {
                    let av = &nodes[*a].value;
                    let mut ga = g.clone();
                    ga.zip_mut_with(av, |gv, &x| {
                        if x <= 0.0 {
                            *gv *= slope
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &**y),
                Op::Log(a) => acc(&mut grads, *a, &g / &*nodes[*a].value),
                Op::Sigmoid(a) => {
                    let d = y.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, &g * &d);
                }
                Op::LogSigmoid(a) => {
                    let d = nodes[*a].value.mapv(|x| 1.0 - sigmoid(x));
                    acc(&mut grads, *a, &g * &d);
                }
                Op::SegmentSoftmax(a, seg, n_seg) => {
                    let mut dot = vec![0.0; *n_seg];
                    for (k, &sgm) in seg.iter().enumerate() {
                        dot[sgm] += y[[k, 0]] * g[[k, 0]];
                    }
                    let mut ga = Array2::zeros(y.dim());
                    for (k, &sgm) in seg.iter().enumerate() {
                        ga[[k, 0]] = y[[k, 0]] * (g[[k, 0]] - dot[sgm]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.dot(&gr);
                        for c in 0..y.ncols() {
                            ga[[r, c]] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let lse = y[[r, 0]];
                        for c in 0..av.ncols() {
                            ga[[r, c]] = g[[r, 0]] * (av[[r, c]] - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let dim = nodes[*a].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for r in 0..dim.0 {
                        ga.row_mut(r).fill(g[[r, 0]]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let dim = nodes[*a].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]));
                }
                Op::BlockRowDot(a, b, blocks) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let d = bv.ncols();
                    let mut ga = Array2::zeros(av.dim());
                    let mut gb = Array2::zeros(bv.dim());
                    for t in 0..av.nrows() {
                        for k in 0..*blocks {
                            let gk = g[[t, k]];
                            for j in 0..d {
                                ga[[t, k * d + j]] = gk * bv[[t, j]];
                                gb[[t, j]] += gk * av[[t, k * d + j]];
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g.clone()),
                Op::SpMM(m, a) => {
                    let mt = m.transpose();
                    acc(&mut grads, *a, mt.matmul_dense(&g));
                }
                Op::RowNormalize(a, eps) => {
                    let av = &nodes[*a].value;
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let norm = av.row(r).dot(&av.row(r)).sqrt();
                        let gr = g.row(r);
                        if norm > *eps {
                            let yr = y.row(r);
                            let proj = yr.dot(&gr);
                            for c in 0..av.ncols() {
                                ga[[r, c]] = (gr[c] - yr[c] * proj) / norm;
                            }
                        } else {
                            for c in 0..av.ncols() {
                                ga[[r, c]] = gr[c] / eps;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Diag(a) => {
                    let dim = nodes[*a].value.dim();
                    let mut ga = Array2::zeros(dim);
                    for k in 0..dim.0 {
                        ga[[k, k]] = g[[k, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumSquares(a) => {
                    let av = &nodes[*a].value;
                    acc(&mut grads, *a, &**av * (2.0 * g[[0, 0]]));
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.dim()).collect();
        Grads { grads, shapes }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Array2<f64>> {
        self.tape.val(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    /// Value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(&self, value: Array2<f64>, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let v = self.value().dot(&*other.value());
        self.unary(v, Op::MatMul(self.idx, other.idx))
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.unary(v, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.unary(v, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.unary(v, Op::Mul(self.idx, other.idx))
    }

    /// Adds a `1×c` row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        let r = row.value();
        assert_eq!(r.nrows(), 1);
        let v = &*self.value() + &*r;
        self.unary(v, Op::AddRow(self.idx, row.idx))
    }

    /// Multiplies every row `k` by the scalar `col[k]` of a `n×1` column.
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        let c = col.value();
        assert_eq!(c.ncols(), 1);
        let v = &*self.value() * &*c;
        self.unary(v, Op::MulCol(self.idx, col.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.idx, c))
    }

    /// Adds a constant (non-differentiated) matrix.
    pub fn add_const(&self, c: &Array2<f64>) -> Var<'t> {
        let v = &*self.value() + c;
        self.unary(v, Op::AddConst(self.idx))
    }

    /// Selects rows by index (rows may repeat).
    pub fn gather(&self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let src = self.value();
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (k, &r) in idx.iter().enumerate() {
            v.row_mut(k).assign(&src.row(r));
        }
        self.unary(v, Op::Gather(self.idx, idx))
    }

    /// Sums row `k` into output row `idx[k]` of an `n_out`-row matrix.
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, n_out: usize) -> Var<'t> {
        let src = self.value();
        assert_eq!(src.nrows(), idx.len());
        let mut v = Array2::zeros((n_out, src.ncols()));
        for (k, &r) in idx.iter().enumerate() {
            let mut row = v.row_mut(r);
            row += &src.row(k);
        }
        self.unary(v, Op::ScatterAdd(self.idx, idx))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree");
        self.unary(v, Op::ConcatCols(self.idx, other.idx))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| leaky(x, slope));
        self.unary(v, Op::LeakyRelu(self.idx, slope))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Log(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, Op::Sigmoid(self.idx))
    }

    pub fn log_sigmoid(&self) -> Var<'t> {
        let v = self.value().mapv(log_sigmoid);
        self.unary(v, Op::LogSigmoid(self.idx))
    }

    /// Softmax of a `T×1` column within groups given by `segments[k]`.
    pub fn segment_softmax(&self, segments: Rc<Vec<usize>>, n_segments: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.ncols(), 1);
        assert_eq!(x.nrows(), segments.len());
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &sg) in segments.iter().enumerate() {
            max[sg] = max[sg].max(x[[k, 0]]);
        }
        let mut e = Array2::zeros(x.dim());
        let mut total = vec![0.0; n_segments];
        for (k, &sg) in segments.iter().enumerate() {
            let ek = (x[[k, 0]] - max[sg]).exp();
            e[[k, 0]] = ek;
            total[sg] += ek;
        }
        for (k, &sg) in segments.iter().enumerate() {
            e[[k, 0]] /= total[sg];
        }
        self.unary(e, Op::SegmentSoftmax(self.idx, segments, n_segments))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let mut v = x.as_ref().clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|z| (z - m).exp());
            let s = row.sum();
            row.mapv_inplace(|z| z / s);
        }
        self.unary(v, Op::SoftmaxRows(self.idx))
    }

    /// `log Σ_c exp(x[r, c])` per row, as an `n×1` column.
    pub fn logsumexp_rows(&self) -> Var<'t> {
        let x = self.value();
        let mut v = Array2::zeros((x.nrows(), 1));
        for (r, row) in x.rows().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = row.iter().map(|&z| (z - m).exp()).sum();
            v[[r, 0]] = m + s.ln();
        }
        self.unary(v, Op::LogSumExpRows(self.idx))
    }

    pub fn row_sum(&self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(v, Op::RowSum(self.idx))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.idx))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// For `self: T×(k·d)` and `other: T×d`, returns `T×k` with entry
    /// `(t, j)` the dot product of block `j` of row `t` with row `t` of `other`.
    pub fn block_row_dot(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let d = b.ncols();
        assert_eq!(a.nrows(), b.nrows());
        assert_eq!(a.ncols() % d, 0);
        let blocks = a.ncols() / d;
        let mut v = Array2::zeros((a.nrows(), blocks));
        for t in 0..a.nrows() {
            for k in 0..blocks {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += a[[t, k * d + j]] * b[[t, j]];
                }
                v[[t, k]] = acc;
            }
        }
        self.unary(v, Op::BlockRowDot(self.idx, other.idx, blocks))
    }

    /// Forward value `hard`, gradient routed to `self` unchanged.
    pub fn straight_through(&self, hard: Array2<f64>) -> Var<'t> {
        assert_eq!(hard.dim(), self.shape());
        self.unary(hard, Op::StraightThrough(self.idx))
    }

    /// Left-multiplies by a constant sparse matrix.
    pub fn spmm(&self, m: Rc<Csr>) -> Var<'t> {
        let v = m.matmul_dense(&self.value());
        self.unary(v, Op::SpMM(m, self.idx))
    }

    /// Scales each row to unit L2 norm; rows with norm ≤ `eps` are divided by `eps`.
    pub fn row_normalize(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let mut v = x.as_ref().clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|z| z / norm);
        }
        self.unary(v, Op::RowNormalize(self.idx, eps))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&self) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.nrows(), x.ncols());
        let v = Array2::from_shape_fn((x.nrows(), 1), |(k, _)| x[[k, k]]);
        self.unary(v, Op::Diag(self.idx))
    }

    pub fn sum_squares(&self) -> Var<'t> {
        let x = self.value();
        let v = Array2::from_elem((1, 1), x.iter().map(|z| z * z).sum());
        self.unary(v, Op::SumSquares(self.idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of `f` at `x` against the tape gradient.
    fn check<F>(x: Array2<f64>, f: F)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = f(&tape, v);
        let g = tape.backward(out).wrt(v);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let tp = Tape::new();
            let fp = f(&tp, tp.leaf(xp)).item();
            let tm = Tape::new();
            let fm = f(&tm, tm.leaf(xm)).item();
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() < 1e-6 * (1.0 + fd.abs()),
                "idx {idx}: fd {fd} vs {an}"
            );
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.5], [1.1, 0.4, -0.7], [-0.2, 0.9, 0.05]]
    }

    #[test]
    fn matmul_transpose_gradient() {
        check(sample(), |t, x| {
            let w = t.leaf(array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.7]]);
            x.matmul(w).t().matmul(x).sum_squares()
        });
    }

    #[test]
    fn elementwise_gradients() {
        check(sample(), |_, x| x.leaky_relu(0.2).mul(x).exp().sum());
        check(sample(), |_, x| x.sigmoid().ln().sum());
        check(sample(), |_, x| x.log_sigmoid().scale(3.0).sum());
        check(sample(), |t, x| {
            x.sub(t.leaf(sample().mapv(|z| z * z))).sum_squares()
        });
    }

    #[test]
    fn softmax_family_gradients() {
        check(sample(), |t, x| {
            x.softmax_rows().mul(t.leaf(sample())).sum()
        });
        check(sample(), |_, x| x.logsumexp_rows().sum_squares());
        check(array![[0.1], [0.7], [-0.4], [1.3]], |t, x| {
            let seg = Rc::new(vec![0, 1, 0, 1]);
            x.segment_softmax(seg, 2)
                .mul(t.leaf(array![[1.0], [-2.0], [0.5], [3.0]]))
                .sum()
        });
    }

    #[test]
    fn indexing_gradients() {
        check(sample(), |_, x| {
            let g = x.gather(Rc::new(vec![2, 0, 2, 1]));
            g.scatter_add(Rc::new(vec![1, 1, 0, 3]), 4).sum_squares()
        });
        check(sample(), |t, x| {
            let other = t.leaf(array![[1.0], [2.0], [3.0]]);
            x.concat_cols(other).mul_col(other).row_sum().sum_squares()
        });
        check(sample(), |t, x| {
            x.add_row(t.leaf(array![[1.0, -1.0, 0.5]]))
                .diag()
                .sum_squares()
        });
    }

    #[test]
    fn block_dot_and_normalize_gradients() {
        check(
            array![[0.3, -1.2, 0.5, 0.2], [1.1, 0.4, -0.7, 0.9]],
            |t, x| {
                let b = t.leaf(array![[0.5, -0.25], [1.5, 0.75]]);
                x.block_row_dot(b).sum_squares()
            },
        );
        check(sample(), |_, x| {
            let n = x.row_normalize(1e-12);
            n.matmul(n.t()).scale(5.0).sum()
        });
    }

    #[test]
    fn spmm_gradient_matches_dense() {
        let m = Rc::new(Csr::from_triplets(
            2,
            3,
            &[(0, 1, 0.5), (1, 0, 2.0), (0, 2, -1.0)],
        ));
        let dense = m.to_dense();
        check(sample(), move |t, x| {
            x.spmm(m.clone())
                .sub(t.leaf(dense.clone()).matmul(x))
                .sum_squares()
                .add(x.spmm(m.clone()).sum())
        });
    }

    #[test]
    fn straight_through_passes_gradient_to_soft() {
        let tape = Tape::new();
        let soft = tape.leaf(array![[0.3], [0.8]]);
        let st = soft.straight_through(array![[0.0], [1.0]]);
        assert_eq!(*st.value(), array![[0.0], [1.0]]);
        let out = st.mul(tape.leaf(array![[2.0], [5.0]])).sum();
        let g = tape.backward(out).wrt(soft);
        assert_eq!(g, array![[2.0], [5.0]]);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(sample());
        let b = tape.leaf(sample());
        let out = a.sum();
        let grads = tape.backward(out);
        assert!(!grads.touched(b));
        assert_eq!(grads.wrt(b), Array2::<f64>::zeros((3, 3)));
    }
}
