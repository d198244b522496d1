//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its value. Calling
//! [`Tape::backward`] walks the nodes in reverse insertion order and
//! accumulates adjoints. Scalars are 1×1 matrices and vectors are n×1
//! columns.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sqrt,
    Square,
    Abs,
    Recip,
    Relu,
    LeakyRelu(f64),
    Elu(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Recip => 1.0 / x,
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Recip => -y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
        }
    }
}

/// Row-wise neighbor lists used by [`Tape::masked_softmax`].
pub type Neighborhoods = Arc<Vec<Vec<usize>>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    OuterSum(Var, Var),
    MaskedSoftmax(Var, Neighborhoods),
    RowLogSumExp(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    CosineCost(Var, Var),
    Max(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the seeds.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, materialized as zeros of `shape` when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

/// Cosine distance matrix plus the row norms it was built from.
pub(crate) fn cosine_distance(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let (xn, _) = normalize_rows(x);
    let (yn, _) = normalize_rows(y);
    let mut d = xn.dot(&yn.t());
    d.mapv_inplace(|s| (1.0 - s).clamp(0.0, 2.0));
    d
}

/// Unit-normalized rows; zero rows stay zero.
fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        norms.push(norm);
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    (out, norms)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf (parameter or constant).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(scalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    /// `a` (n×d) plus the row vector `b` (1×d) broadcast down the rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    /// `a` (n×m) plus the column vector `c` (n×1) broadcast across columns.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        let v = self.value(a) + self.value(c);
        self.push(v, Op::AddCol(a, c))
    }

    /// `diag(u) · a` with `u` an n×1 column.
    pub fn scale_rows(&mut self, a: Var, u: Var) -> Var {
        let v = self.value(a) * self.value(u);
        self.push(v, Op::ScaleRows(a, u))
    }

    /// `a · diag(v)` with `v` an m×1 column.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Var {
        let out = self.value(a) * &self.value(v).t();
        self.push(out, Op::ScaleCols(a, v))
    }

    /// `a` times the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar_value(s);
        let v = self.value(a) * k;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).mapv(|x| f.apply(x));
        self.push(v, Op::Unary(a, f))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let count = self.value(a).len().max(1) as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / count)
    }

    /// Frobenius norm of `a`.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let sq = self.unary(a, Unary::Square);
        let total = self.sum(sq);
        self.unary(total, Unary::Sqrt)
    }

    /// `out[i][j] = s[i] + t[j]` for columns `s` (n×1) and `t` (m×1).
    pub fn outer_sum(&mut self, s: Var, t: Var) -> Var {
        let sv = self.value(s);
        let tv = self.value(t);
        let (n, m) = (sv.nrows(), tv.nrows());
        let v = Array2::from_shape_fn((n, m), |(i, j)| sv[[i, 0]] + tv[[j, 0]]);
        self.push(v, Op::OuterSum(s, t))
    }

    /// Row-wise softmax restricted to `neighbors[i]`; all other entries are zero.
    ///
    /// Panics if a row has an empty neighborhood.
    pub fn masked_softmax(&mut self, logits: Var, neighbors: Neighborhoods) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), neighbors.len(), "neighborhood count mismatch");
        let mut out = Array2::zeros(x.raw_dim());
        for (i, nbrs) in neighbors.iter().enumerate() {
            assert!(!nbrs.is_empty(), "node {i} has an empty neighborhood");
            let peak = nbrs
                .iter()
                .map(|&j| x[[i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &j in nbrs {
                let e = (x[[i, j]] - peak).exp();
                out[[i, j]] = e;
                total += e;
            }
            for &j in nbrs {
                out[[i, j]] /= total;
            }
        }
        self.push(out, Op::MaskedSoftmax(logits, neighbors))
    }

    /// Dense row-wise softmax.
    pub fn row_softmax(&mut self, logits: Var) -> Var {
        let (n, m) = self.value(logits).dim();
        let full: Vec<Vec<usize>> = (0..n).map(|_| (0..m).collect()).collect();
        self.masked_softmax(logits, Arc::new(full))
    }

    /// `log Σ_j exp(a[i][j])` for each row, as an n×1 column.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
            let row = x.row(i);
            let peak = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if peak == f64::NEG_INFINITY {
                return peak;
            }
            peak + row.mapv(|v| (v - peak).exp()).sum().ln()
        });
        self.push(v, Op::RowLogSumExp(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Cosine-distance matrix `1 - <x_i, y_j> / (|x_i| |y_j|)`; zero rows give distance 1.
    pub fn cosine_cost(&mut self, x: Var, y: Var) -> Var {
        let v = cosine_distance(self.value(x), self.value(y));
        self.push(v, Op::CosineCost(x, y))
    }

    /// Global maximum entry, as 1×1. The adjoint flows to the first argmax.
    pub fn max(&mut self, a: Var) -> Var {
        let m = self
            .value(a)
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        self.push(scalar(m), Op::Max(a))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).dim(),
            (1, 1),
            "backward expects a scalar output"
        );
        self.backward_from(&[(output, scalar(1.0))])
    }

    /// Reverse sweep seeded with explicit adjoints on any set of nodes.
    pub fn backward_from(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).dim(), g.dim(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                accumulate(grads, *a, g / bv);
                let mut gb = g * out;
                gb /= bv;
                accumulate(grads, *b, -gb);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(a, c) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::ScaleRows(a, u) => {
                let av = self.value(*a);
                let uv = self.value(*u);
                accumulate(grads, *a, g * uv);
                let gu = (g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(grads, *u, gu);
            }
            Op::ScaleCols(a, v) => {
                let av = self.value(*a);
                let vv = self.value(*v);
                accumulate(grads, *a, g * &vv.t());
                let gv = (g * av).sum_axis(Axis(0)).insert_axis(Axis(1));
                accumulate(grads, *v, gv);
            }
            Op::ScaleBy(a, s) => {
                let k = self.scalar_value(*s);
                accumulate(grads, *a, g * k);
                let gs = (g * self.value(*a)).sum();
                accumulate(grads, *s, scalar(gs));
            }
            Op::Scale(a, k) => accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .and(out)
                    .for_each(|gi, &x, &y| *gi *= f.derivative(x, y));
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).raw_dim();
                accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::OuterSum(s, t) => {
                accumulate(grads, *s, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                accumulate(grads, *t, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
            }
            Op::MaskedSoftmax(a, neighbors) => {
                let mut ga = Array2::zeros(out.raw_dim());
                for (i, nbrs) in neighbors.iter().enumerate() {
                    let dot: f64 = nbrs.iter().map(|&j| out[[i, j]] * g[[i, j]]).sum();
                    for &j in nbrs {
                        ga[[i, j]] = out[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowLogSumExp(a) => {
                let x = self.value(*a);
                let mut ga = Array2::zeros(x.raw_dim());
                for i in 0..x.nrows() {
                    let lse = out[[i, 0]];
                    if !lse.is_finite() {
                        continue;
                    }
                    for j in 0..x.ncols() {
                        ga[[i, j]] = g[[i, 0]] * (x[[i, j]] - lse).exp();
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                ga.slice_mut(s![.., *start..*end]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).ncols();
                    let gp = g.slice(s![.., offset..offset + width]).to_owned();
                    accumulate(grads, p, gp);
                    offset += width;
                }
            }
            Op::CosineCost(x, y) => {
                let (xn, xnorm) = normalize_rows(self.value(*x));
                let (yn, ynorm) = normalize_rows(self.value(*y));
                // out = 1 - Xn Ynᵀ, so d(similarity) = -g.
                let gs = -g;
                let gxn = gs.dot(&yn);
                let gyn = gs.t().dot(&xn);
                accumulate(grads, *x, unnormalize_grad(&xn, &xnorm, gxn));
                accumulate(grads, *y, unnormalize_grad(&yn, &ynorm, gyn));
            }
            Op::Max(a) => {
                let av = self.value(*a);
                let peak = out[[0, 0]];
                let mut ga = Array2::zeros(av.raw_dim());
                if let Some((pos, _)) = av.indexed_iter().find(|(_, &v)| v == peak) {
                    ga[pos] = g[[0, 0]];
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

/// Chain rule through row normalization `xn = x / |x|`.
fn unnormalize_grad(xn: &Array2<f64>, norms: &[f64], mut gxn: Array2<f64>) -> Array2<f64> {
    for (i, mut row) in gxn.rows_mut().into_iter().enumerate() {
        let norm = norms[i];
        if norm == 0.0 {
            row.fill(0.0);
            continue;
        }
        let unit = xn.row(i);
        let radial = unit.dot(&row);
        Zip::from(&mut row)
            .and(&unit)
            .for_each(|r, &u| *r = (*r - u * radial) / norm);
    }
    gxn
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
