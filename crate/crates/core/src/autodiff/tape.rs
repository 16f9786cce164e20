use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs in [`Tape::kl_rows`].
pub const KL_EPS: f64 = 1e-8;

const ROW_SUM_TOL: f64 = 1e-6;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulCol { x: Var, col: Var },
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Conv1d { x: Var, w: Var, b: Var, k: usize },
    TopkMeanTime { x: Var, k: usize, picks: Vec<usize> },
    Column { x: Var, j: usize },
    SumAll(Var),
    MeanAll(Var),
    DotConst { x: Var, c: Tensor2 },
    KlRows { p: Var, q: Var },
}

struct Node {
    value: Tensor2,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every parent precedes its
/// children and a single reverse sweep is a valid topological traversal.
/// A tape supports exactly one [`Tape::backward`] call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
    backward_done: bool,
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor2) -> Result<Var> {
        value.ensure_finite("param")?;
        Ok(self.push(value, true, Op::Leaf))
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Result<Var> {
        value.ensure_finite("constant")?;
        Ok(self.push(value, false, Op::Leaf))
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor2, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor2, parents: &[Var], op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, requires_grad, op))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.record(out, &[a, b], Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= *v;
        }
        self.record(out, &[a, b], Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *v;
        }
        self.record(out, &[a, b], Op::Mul(a, b), "mul")
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o /= *v;
        }
        self.record(out, &[a, b], Op::Div(a, b), "div")
    }

    /// Scales every row `t` of `x` (T×C) by `col[t]` (T×1).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (t, c) = self.shape(x);
        if self.shape(col) != (t, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: (t, c),
                right: self.shape(col),
            });
        }
        let mut out = self.value(x).clone();
        let a = self.value(col).data().to_vec();
        for (r, scale) in a.iter().enumerate() {
            for v in out.row_slice_mut(r) {
                *v *= scale;
            }
        }
        self.record(out, &[x, col], Op::MulCol { x, col }, "mul_col")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.record(out, &[x], Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (n2, p) = self.shape(b);
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (m, n),
                right: (n2, p),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor2::zeros(m, p);
        for i in 0..m {
            let arow = av.row_slice(i);
            let orow = out.row_slice_mut(i);
            for (l, &x) in arow.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(bv.row_slice(l)) {
                    *o += x * w;
                }
            }
        }
        self.record(out, &[a, b], Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (p, n2) = self.shape(b);
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: (m, n),
                right: (p, n2),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor2::zeros(m, p);
        for i in 0..m {
            let arow = av.row_slice(i);
            for j in 0..p {
                out[(i, j)] = dot(arow, bv.row_slice(j));
            }
        }
        self.record(out, &[a, b], Op::MatMulT(a, b), "matmul_t")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.record(out, &[x], Op::Transpose(x), "transpose")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(out, &[x], Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.record(out, &[x], Op::Sigmoid(x), "sigmoid")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let out = self.value(x).map(f64::sqrt);
        self.record(out, &[x], Op::Sqrt(x), "sqrt")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.record(out, &[x], Op::Abs(x), "abs")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows();
        self.record(out, &[x], Op::SoftmaxRows(x), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.record(out, &[x], Op::LogSoftmaxRows(x), "log_softmax_rows")
    }

    /// Temporal convolution with "same" zero padding.
    ///
    /// `x` is T×Fin, `w` is (k·Fin)×Fout with row `δ·Fin + i` holding the
    /// weights from input channel `i` at tap `δ`, `b` is 1×Fout.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel width must be odd, got {k}")));
        }
        let (t_len, fin) = self.shape(x);
        let (wr, fout) = self.shape(w);
        if wr != k * fin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: (t_len, fin),
                right: (wr, fout),
            });
        }
        if self.shape(b) != (1, fout) {
            return Err(Error::ShapeMismatch {
                op: "conv1d bias",
                left: (1, fout),
                right: self.shape(b),
            });
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b).data();
        let pad = (k - 1) / 2;
        let mut out = Tensor2::zeros(t_len, fout);
        for t in 0..t_len {
            let orow = out.row_slice_mut(t);
            orow.copy_from_slice(bv);
            for d in 0..k {
                let Some(src) = (t + d).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                let xrow = xv.row_slice(src);
                for (i, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    axpy(orow, xval, wv.row_slice(d * fin + i));
                }
            }
        }
        self.record(out, &[x, w, b], Op::Conv1d { x, w, b, k }, "conv1d")
    }

    /// Mean of the `k` largest entries of each column, giving a 1×C row.
    ///
    /// Ties at the cut go to the lowest temporal index, so gradient routing
    /// is deterministic.
    pub fn topk_mean_time(&mut self, x: Var, k: usize) -> Result<Var> {
        let (t_len, c) = self.shape(x);
        if k == 0 || k > t_len {
            return Err(Error::invalid(format!("top-k with k={k} over T={t_len}")));
        }
        let xv = self.value(x);
        let mut picks = Vec::with_capacity(k * c);
        let mut out = Tensor2::zeros(1, c);
        let mut order: Vec<usize> = Vec::with_capacity(t_len);
        for j in 0..c {
            order.clear();
            order.extend(0..t_len);
            order.sort_by(|&a, &b| {
                xv[(b, j)]
                    .partial_cmp(&xv[(a, j)])
                    .expect("finite values")
                    .then(a.cmp(&b))
            });
            let mut acc = 0.0;
            for &t in &order[..k] {
                acc += xv[(t, j)];
                picks.push(t);
            }
            out[(0, j)] = acc / k as f64;
        }
        self.record(out, &[x], Op::TopkMeanTime { x, k, picks }, "topk_mean_time")
    }

    /// Column `j` of `x` as a T×1 tensor.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (_, c) = self.shape(x);
        if j >= c {
            return Err(Error::invalid(format!("column {j} out of {c}")));
        }
        let out = Tensor2::column(&self.value(x).col_vec(j));
        self.record(out, &[x], Op::Column { x, j }, "column")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor2::scalar(self.value(x).sum());
        self.record(out, &[x], Op::SumAll(x), "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.data().len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let out = Tensor2::scalar(v.sum() / n as f64);
        self.record(out, &[x], Op::MeanAll(x), "mean_all")
    }

    /// `Σ x ⊙ c` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, x: Var, c: &Tensor2) -> Result<Var> {
        self.value(x).check_same_shape(c, "dot_const")?;
        let out = Tensor2::scalar(dot(self.value(x).data(), c.data()));
        self.record(out, &[x], Op::DotConst { x, c: c.clone() }, "dot_const")
    }

    /// Mean over rows of `KL(p_t ‖ q_t)`.
    ///
    /// `p` is the target and never receives a gradient. Both inputs must be
    /// row-stochastic. Log arguments are floored at [`KL_EPS`].
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_rows")?;
        let pv = self.value(p);
        let qv = self.value(q);
        check_row_stochastic(pv, "kl_rows target")?;
        check_row_stochastic(qv, "kl_rows prediction")?;
        let t_len = pv.rows();
        let mut total = 0.0;
        for (&pi, &qi) in pv.data().iter().zip(qv.data()) {
            total += pi * (pi.max(KL_EPS).ln() - qi.max(KL_EPS).ln());
        }
        let out = Tensor2::scalar(total / t_len as f64);
        let requires_grad = self.nodes[q.0].requires_grad;
        out.ensure_finite("kl_rows")?;
        Ok(self.push(out, requires_grad, Op::KlRows { p, q }))
    }

    /// Left-fold of [`Tape::add`] over `vars`.
    pub fn sum_vars(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("sum of no terms"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn mean_vars(&mut self, vars: &[Var]) -> Result<Var> {
        let sum = self.sum_vars(vars)?;
        self.scale(sum, 1.0 / vars.len() as f64)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot(r, c));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor2>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.propagate(i, g, lower);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if wants(v) {
                        acc_slice(slot(grads, v, val(v)), g.data(), 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc_slice(slot(grads, *a, val(*a)), g.data(), 1.0);
                }
                if wants(*b) {
                    acc_slice(slot(grads, *b, val(*b)), g.data(), -1.0);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let dst = slot(grads, *a, val(*a)).data_mut();
                    for ((d, &gi), &o) in dst.iter_mut().zip(g.data()).zip(other) {
                        *d += gi * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let dst = slot(grads, *b, val(*b)).data_mut();
                    for ((d, &gi), &o) in dst.iter_mut().zip(g.data()).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if wants(*a) {
                    let dst = slot(grads, *a, val(*a)).data_mut();
                    for ((d, &gi), &bi) in dst.iter_mut().zip(g.data()).zip(bv) {
                        *d += gi / bi;
                    }
                }
                if wants(*b) {
                    let dst = slot(grads, *b, val(*b)).data_mut();
                    for (((d, &gi), &bi), &yi) in dst.iter_mut().zip(g.data()).zip(bv).zip(out.data()) {
                        *d -= gi * yi / bi;
                    }
                }
            }
            Op::MulCol { x, col } => {
                let (t_len, _) = out.shape();
                if wants(*x) {
                    let colv = val(*col).data();
                    let dst = slot(grads, *x, val(*x));
                    for (r, &c) in colv.iter().enumerate().take(t_len) {
                        axpy(dst.row_slice_mut(r), c, g.row_slice(r));
                    }
                }
                if wants(*col) {
                    let xv = val(*x);
                    let dst = slot(grads, *col, val(*col)).data_mut();
                    for (r, d) in dst.iter_mut().enumerate().take(t_len) {
                        *d += dot(g.row_slice(r), xv.row_slice(r));
                    }
                }
            }
            Op::Affine { x, scale } => {
                acc_slice(slot(grads, *x, val(*x)), g.data(), *scale);
            }
            Op::MatMul(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                if wants(*a) {
                    let dst = slot(grads, *a, av);
                    for i in 0..av.rows() {
                        let grow = g.row_slice(i);
                        let drow = dst.row_slice_mut(i);
                        for (l, d) in drow.iter_mut().enumerate() {
                            *d += dot(grow, bv.row_slice(l));
                        }
                    }
                }
                if wants(*b) {
                    let dst = slot(grads, *b, bv);
                    for i in 0..av.rows() {
                        let grow = g.row_slice(i);
                        for (l, &x) in av.row_slice(i).iter().enumerate() {
                            if x != 0.0 {
                                axpy(dst.row_slice_mut(l), x, grow);
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                if wants(*a) {
                    let dst = slot(grads, *a, av);
                    for i in 0..av.rows() {
                        let drow = dst.row_slice_mut(i);
                        for (j, &gij) in g.row_slice(i).iter().enumerate() {
                            axpy(drow, gij, bv.row_slice(j));
                        }
                    }
                }
                if wants(*b) {
                    let dst = slot(grads, *b, bv);
                    for i in 0..av.rows() {
                        let arow = av.row_slice(i);
                        for (j, &gij) in g.row_slice(i).iter().enumerate() {
                            axpy(dst.row_slice_mut(j), gij, arow);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                acc_slice(slot(grads, *x, val(*x)), gt.data(), 1.0);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let dst = slot(grads, *x, val(*x)).data_mut();
                for ((d, &gi), &xi) in dst.iter_mut().zip(g.data()).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dst = slot(grads, *x, val(*x)).data_mut();
                for ((d, &gi), &y) in dst.iter_mut().zip(g.data()).zip(out.data()) {
                    *d += gi * y * (1.0 - y);
                }
            }
            Op::Sqrt(x) => {
                let dst = slot(grads, *x, val(*x)).data_mut();
                for ((d, &gi), &y) in dst.iter_mut().zip(g.data()).zip(out.data()) {
                    if y > 0.0 {
                        *d += gi / (2.0 * y);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = val(*x).data();
                let dst = slot(grads, *x, val(*x)).data_mut();
                for ((d, &gi), &xi) in dst.iter_mut().zip(g.data()).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    } else if xi < 0.0 {
                        *d -= gi;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let dst = slot(grads, *x, val(*x));
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner = dot(gr, y);
                    for ((d, &gi), &yi) in dst.row_slice_mut(r).iter_mut().zip(gr).zip(y) {
                        *d += yi * (gi - inner);
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let dst = slot(grads, *x, val(*x));
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let total: f64 = gr.iter().sum();
                    for ((d, &gi), &yi) in dst.row_slice_mut(r).iter_mut().zip(gr).zip(y) {
                        *d += gi - yi.exp() * total;
                    }
                }
            }
            Op::Conv1d { x, w, b, k } => {
                conv1d_backward(grads, nodes, g, *x, *w, *b, *k);
            }
            Op::TopkMeanTime { x, k, picks } => {
                let dst = slot(grads, *x, val(*x));
                let share = 1.0 / *k as f64;
                for (j, chunk) in picks.chunks(*k).enumerate() {
                    let gj = g[(0, j)] * share;
                    for &t in chunk {
                        dst[(t, j)] += gj;
                    }
                }
            }
            Op::Column { x, j } => {
                let dst = slot(grads, *x, val(*x));
                for (t, &gi) in g.data().iter().enumerate() {
                    dst[(t, *j)] += gi;
                }
            }
            Op::SumAll(x) => {
                let gi = g.item();
                for d in slot(grads, *x, val(*x)).data_mut() {
                    *d += gi;
                }
            }
            Op::MeanAll(x) => {
                let n = val(*x).data().len() as f64;
                let gi = g.item() / n;
                for d in slot(grads, *x, val(*x)).data_mut() {
                    *d += gi;
                }
            }
            Op::DotConst { x, c } => {
                acc_slice(slot(grads, *x, val(*x)), c.data(), g.item());
            }
            Op::KlRows { p, q } => {
                let pv = val(*p).data();
                let qv = val(*q).data();
                let t_len = val(*q).rows() as f64;
                let gi = g.item() / t_len;
                let dst = slot(grads, *q, val(*q)).data_mut();
                for ((d, &pi), &qi) in dst.iter_mut().zip(pv).zip(qv) {
                    if qi > KL_EPS {
                        *d -= gi * pi / qi;
                    }
                }
            }
        }
    }
}

fn conv1d_backward(
    grads: &mut [Option<Tensor2>],
    nodes: &[Node],
    g: &Tensor2,
    x: Var,
    w: Var,
    b: Var,
    k: usize,
) {
    let xv = &nodes[x.0].value;
    let wv = &nodes[w.0].value;
    let (t_len, fin) = xv.shape();
    let pad = (k - 1) / 2;
    if nodes[b.0].requires_grad {
        let dst = slot(grads, b, &nodes[b.0].value);
        for t in 0..t_len {
            acc_slice_raw(dst.data_mut(), g.row_slice(t), 1.0);
        }
    }
    if nodes[x.0].requires_grad {
        let dst = slot(grads, x, xv);
        for t in 0..t_len {
            let grow = g.row_slice(t);
            for d in 0..k {
                let Some(src) = (t + d).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                let drow = dst.row_slice_mut(src);
                for (i, dv) in drow.iter_mut().enumerate() {
                    *dv += dot(grow, wv.row_slice(d * fin + i));
                }
            }
        }
    }
    if nodes[w.0].requires_grad {
        let dst = slot(grads, w, wv);
        for t in 0..t_len {
            let grow = g.row_slice(t);
            for d in 0..k {
                let Some(src) = (t + d).checked_sub(pad).filter(|&s| s < t_len) else {
                    continue;
                };
                for (i, &xval) in xv.row_slice(src).iter().enumerate() {
                    if xval != 0.0 {
                        axpy(dst.row_slice_mut(d * fin + i), xval, grow);
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor2>], v: Var, like: &Tensor2) -> &'a mut Tensor2 {
    grads[v.0].get_or_insert_with(|| Tensor2::zeros(like.rows(), like.cols()))
}

fn acc_slice(dst: &mut Tensor2, src: &[f64], scale: f64) {
    acc_slice_raw(dst.data_mut(), src, scale);
}

fn acc_slice_raw(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        total += a[i] * b[i];
    }
    total
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_row_stochastic(t: &Tensor2, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row_slice(r);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "{what}: row {r} is not a distribution (sum {total})"
            )));
        }
    }
    Ok(())
}
