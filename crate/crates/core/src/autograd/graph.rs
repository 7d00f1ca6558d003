//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! Every op records its inputs by index; `backward` walks the tape once in
//! reverse. Leaves are either constants (no gradient is reported) or bound
//! parameters, whose gradients are collected into a [`Gradients`] map.

use super::mat::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MaxAll(Var, usize),
    CrossEntropy(Var, Vec<usize>, Mat),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// A tape of matrix operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients from one backward pass, keyed by the parameter slot
/// used when the parameter was bound.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: Vec<(usize, Mat)>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.by_param
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.by_param.iter().map(|(s, g)| (*s, g))
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::scalar(x))
    }

    /// A leaf whose gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, m: Mat) -> Var {
        self.push(m, Op::Param(slot))
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    fn assert_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "div");
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    /// Adds the `1 x c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (rows, cols) = self.value(a).shape();
        assert_eq!(self.value(r).shape(), (1, cols), "add_row");
        let mut value = self.value(a).clone();
        let rv = self.value(r).data().to_vec();
        for i in 0..rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, r))
    }

    /// Scales each column `j` of `a` by `r[j]`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (rows, cols) = self.value(a).shape();
        assert_eq!(self.value(r).shape(), (1, cols), "mul_row");
        let mut value = self.value(a).clone();
        let rv = self.value(r).data().to_vec();
        for i in 0..rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *v *= b;
            }
        }
        self.push(value, Op::MulRow(a, r))
    }

    /// Scales each row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (rows, _) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (rows, 1), "mul_col");
        let mut value = self.value(a).clone();
        let cv = self.value(col).data().to_vec();
        for (i, w) in cv.iter().enumerate() {
            for v in value.row_mut(i) {
                *v *= w;
            }
        }
        self.push(value, Op::MulCol(a, col))
    }

    /// Broadcasts a 1x1 variable to `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).shape(), (1, 1), "broadcast needs a scalar");
        let value = Mat::filled(rows, cols, self.value(a).item());
        self.push(value, Op::Broadcast(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddConst(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Elementwise clamp; the gradient passes only strictly inside the bounds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(value, Op::LayerNorm(a, inv_std))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = value.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::L2NormalizeRows(a, norms))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows: col mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let value = Mat::from_vec(rows, cols, data).expect("concat_rows shape");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut value = Mat::zeros(m.rows(), len);
        for r in 0..m.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::scalar(m.sum() / m.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        let n = m.rows() as f64;
        let value = Mat::row_vector(out.into_iter().map(|v| v / n).collect());
        self.push(value, Op::MeanRows(a))
    }

    /// Global maximum; the gradient flows to the first maximal entry.
    pub fn max_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut best = 0;
        for (i, &v) in m.data().iter().enumerate() {
            if v > m.data()[best] {
                best = i;
            }
        }
        let value = Mat::scalar(m.data()[best]);
        self.push(value, Op::MaxAll(a, best))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows(), targets.len(), "cross_entropy: row/target mismatch");
        let logp = log_softmax_rows(m);
        let n = targets.len() as f64;
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| logp.get(r, t))
            .sum::<f64>()
            / n;
        let probs = logp.map(f64::exp);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Mat::scalar(1.0));
        let mut by_param: Vec<(usize, Mat)> = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => match by_param.iter_mut().find(|(s, _)| s == slot) {
                    Some((_, existing)) => existing.add_assign(&g),
                    None => by_param.push((*slot, g)),
                },
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(self.value(*b)));
                    acc(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T ; da = g b ; db = g^T a
                    acc(*a, g.matmul(self.value(*b)));
                    acc(*b, g.t_matmul(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                    let da = g.zip_map(&node.value, |x, q| x * q);
                    acc(*b, da.zip_map(bv, |x, y| -x / y));
                }
                Op::AddRow(a, r) => {
                    let mut gr = vec![0.0; g.cols()];
                    for row in 0..g.rows() {
                        for (o, v) in gr.iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    acc(*r, Mat::row_vector(gr));
                    acc(*a, g);
                }
                Op::MulRow(a, r) => {
                    let av = self.value(*a);
                    let rv = self.value(*r).data();
                    let mut ga = g.clone();
                    let mut gr = vec![0.0; g.cols()];
                    for row in 0..g.rows() {
                        let grow = g.row(row);
                        let arow = av.row(row);
                        for j in 0..g.cols() {
                            gr[j] += grow[j] * arow[j];
                        }
                        for (x, w) in ga.row_mut(row).iter_mut().zip(rv) {
                            *x *= w;
                        }
                    }
                    acc(*a, ga);
                    acc(*r, Mat::row_vector(gr));
                }
                Op::MulCol(a, c) => {
                    let av = self.value(*a);
                    let cv = self.value(*c).data();
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; g.rows()];
                    for row in 0..g.rows() {
                        gc[row] = g.row(row).iter().zip(av.row(row)).map(|(x, y)| x * y).sum();
                        for x in ga.row_mut(row) {
                            *x *= cv[row];
                        }
                    }
                    acc(*a, ga);
                    acc(*c, Mat::column(gc));
                }
                Op::Broadcast(a) => acc(*a, Mat::scalar(g.sum())),
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::AddConst(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
                Op::Softplus(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * sigmoid(y))),
                Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
                ),
                Op::Clamp(a, lo, hi) => acc(
                    *a,
                    g.zip_map(self.value(*a), |x, y| {
                        if y > *lo && y < *hi {
                            x
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (x, &s) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *x = s * (*x - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (x, &l) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *x -= l.exp() * total;
                        }
                    }
                    acc(*a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let n = y.cols() as f64;
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((x, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *x = inv_std[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    acc(*a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (x, &yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *x = (*x - yi * dot) / norms[r];
                        }
                    }
                    acc(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Mat::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        acc(p, g.gather_rows(&idx));
                        offset += rows;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut ga = Mat::zeros(av.rows(), av.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (x, v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *x += v;
                        }
                    }
                    acc(*a, ga);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Mat::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Mat::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for row in 0..r {
                        for (x, v) in ga.row_mut(row).iter_mut().zip(g.data()) {
                            *x = v / r as f64;
                        }
                    }
                    acc(*a, ga);
                }
                Op::MaxAll(a, best) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    ga.data_mut()[*best] = g.item();
                    acc(*a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let n = targets.len() as f64;
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = ga.get(r, t);
                        ga.set(r, t, v - 1.0);
                    }
                    acc(*a, ga.scale(g.item() / n));
                }
            }
        }
        Gradients { by_param }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`, entry by entry.
    fn numeric(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data_mut()[i] += h;
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(x: Mat, build: impl Fn(&mut Graph, Var) -> Var) {
        let f = |m: &Mat| {
            let mut g = Graph::new();
            let v = g.param(0, m.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.param(0, x.clone());
        let out = build(&mut g, v);
        let analytic = g.backward(out).get(0).cloned().unwrap();
        let num = numeric(&x, &f);
        for (a, n) in analytic.data().iter().zip(num.data()) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + a.abs().max(n.abs())),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * 0.7 + seed as f64).sin())
            .collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn elementwise_ops() {
        check(sample(3, 4, 1), |g, x| {
            let s = g.sigmoid(x);
            let p = g.softplus(x);
            let e = g.gelu(x);
            let m = g.mul(s, p);
            let a = g.add(m, e);
            let t = g.exp(a);
            g.sum(t)
        });
    }

    #[test]
    fn matrix_ops() {
        let w = sample(4, 2, 2);
        check(sample(3, 4, 3), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let yt = g.matmul_t(x, x);
            let s = g.softmax_rows(yt);
            let l = g.layer_norm(y);
            let a = g.sum(s);
            let b = g.mean(l);
            let n = g.l2_normalize_rows(x);
            let c = g.sum(n);
            let ab = g.add(a, b);
            let sq = g.mul(ab, c);
            g.add(sq, c)
        });
    }

    #[test]
    fn structural_ops() {
        check(sample(4, 3, 4), |g, x| {
            let left = g.slice_cols(x, 0, 2);
            let right = g.slice_cols(x, 1, 2);
            let cat = g.concat_cols(&[left, right]);
            let rows = g.gather_rows(cat, &[0, 2, 2]);
            let stacked = g.concat_rows(&[rows, cat]);
            let t = g.transpose(stacked);
            let ls = g.log_softmax_rows(t);
            let mr = g.mean_rows(ls);
            let sq = g.mul(mr, mr);
            g.sum(sq)
        });
    }

    #[test]
    fn broadcast_ops() {
        check(sample(3, 2, 5), |g, x| {
            let row = g.mean_rows(x);
            let col = g.slice_cols(x, 0, 1);
            let a = g.add_row(x, row);
            let b = g.mul_row(a, row);
            let c = g.mul_col(b, col);
            let s = g.slice_cols(x, 1, 1);
            let s = g.gather_rows(s, &[0]);
            let bs = g.broadcast(s, 3, 2);
            let e = g.exp(bs);
            let d = g.div(c, e);
            let ce = g.cross_entropy(d, &[0, 1, 1]);
            let m = g.max_all(d);
            g.add(ce, m)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(0, Mat::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(0).unwrap().item(), 2.0);
    }

    #[test]
    fn clamp_and_relu_zero_outside() {
        let mut g = Graph::new();
        let x = g.param(0, Mat::row_vector(vec![-1.0, 0.5, 2.0]));
        let c = g.clamp(x, 0.0, 1.0);
        let r = g.relu(x);
        let s = g.add(c, r);
        let y = g.sum(s);
        let grads = g.backward(y);
        assert_eq!(grads.get(0).unwrap().data(), &[0.0, 2.0, 1.0]);
    }
}
