//! Reverse-mode autodiff over dense row-major matrices.
//!
//! Every value on a [`Tape`] is a 2D `f64` array; vectors are `1 x d` rows.
//! Operations append a node recording their parents, and [`Tape::backward`]
//! walks the nodes in reverse to accumulate gradients into parameter leaves.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::ParamStore;
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumCols(Var),
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    GroupMeanRows(Var, usize),
    RepeatRows(Var, usize),
    BlockMatMulBt(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    Pick(Var, Vec<usize>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients keyed by parameter path.
pub type Gradients = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Branch taken by every piecewise op (relu, clamp, minimum) on every
    /// element. Equal signatures mean the same linear piece was active.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.value(*a).iter().map(|&x| x > 0.0)),
                Op::Clamp(a, lo, hi) => {
                    for &x in self.value(*a) {
                        sig.push(x >= *lo);
                        sig.push(x <= *hi);
                    }
                }
                Op::Minimum(a, b) => sig.extend(self.value(*a).iter().zip(self.value(*b).iter()).map(|(x, y)| x <= y)),
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter path.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Load parameter `path` from `store`; repeated loads share one leaf.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let value = store.get(path).ok_or_else(|| TensorError::MissingParam(path.to_string()))?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(TensorError::Shape { op: "matmul", left: sa, right: sb });
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(TensorError::Shape { op: "matmul_bt", left: sa, right: sb });
        }
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("minimum", a, b)?;
        let v = Zip::from(self.value(a)).and(self.value(b)).map_collect(|&x, &y| x.min(y));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Minimum(a, b), rg))
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(TensorError::Shape { op: "add_row", left: sa, right: sr });
        }
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(v, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Adds a constant array; gradients pass straight through.
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if c.dim() != sa {
            return Err(TensorError::Shape { op: "add_const", left: sa, right: c.dim() });
        }
        let v = self.value(a) + c;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Affine(a, 1.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Sum across columns: `n x d -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0 as f64;
        let v = (self.value(a).sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::Shape { op: "concat_cols", left: self.shape(parts[0]), right: self.shape(p) });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(TensorError::Shape { op: "concat_rows", left: self.shape(parts[0]), right: self.shape(p) });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if start + len > sa.1 {
            return Err(TensorError::Shape { op: "slice_cols", left: sa, right: (start, len) });
        }
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start, len), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa.0) {
            return Err(TensorError::Shape { op: "gather_rows", left: sa, right: (bad, 0) });
        }
        let v = self.value(a).select(Axis(0), idx);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Mean of consecutive blocks of `group` rows: `(g*n) x d -> n x d`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if group == 0 || !sa.0.is_multiple_of(group) {
            return Err(TensorError::Shape { op: "group_mean_rows", left: sa, right: (group, 0) });
        }
        let x = self.value(a);
        let n = sa.0 / group;
        let mut v = Array2::zeros((n, sa.1));
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let block = x.slice(s![i * group..(i + 1) * group, ..]);
            row.assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::GroupMeanRows(a, group), rg))
    }

    /// Repeat every row `times` times, consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let idx: Vec<usize> = (0..self.shape(a).0).flat_map(|i| std::iter::repeat_n(i, times)).collect();
        let v = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(&[a]);
        self.push(v, Op::RepeatRows(a, times), rg)
    }

    fn block_dims(&self, op: &'static str, a: Var, b: Var, blocks: usize) -> Result<(usize, usize), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if blocks == 0 || sa.0 % blocks != 0 || sb.0 % blocks != 0 {
            return Err(TensorError::Shape { op, left: sa, right: sb });
        }
        Ok((sa.0 / blocks, sb.0 / blocks))
    }

    /// Per block `k`: `a_k · b_kᵀ`, with `a` split into `blocks` row blocks
    /// of equal height and likewise `b`.
    pub fn block_matmul_bt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var, TensorError> {
        let (n, m) = self.block_dims("block_matmul_bt", a, b, blocks)?;
        if self.shape(a).1 != self.shape(b).1 {
            return Err(TensorError::Shape { op: "block_matmul_bt", left: self.shape(a), right: self.shape(b) });
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut v = Array2::zeros((blocks * n, m));
        for k in 0..blocks {
            let xa = x.slice(s![k * n..(k + 1) * n, ..]);
            let yb = y.slice(s![k * m..(k + 1) * m, ..]);
            v.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&xa.dot(&yb.t()));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::BlockMatMulBt(a, b, blocks), rg))
    }

    /// Per block `k`: `w_k · v_k` where `w_k` is `n x m` and `v_k` is `m x d`.
    pub fn block_matmul(&mut self, w: Var, v: Var, blocks: usize) -> Result<Var, TensorError> {
        let (n, m) = self.block_dims("block_matmul", w, v, blocks)?;
        if self.shape(w).1 != m {
            return Err(TensorError::Shape { op: "block_matmul", left: self.shape(w), right: self.shape(v) });
        }
        let (x, y) = (self.value(w), self.value(v));
        let d = y.ncols();
        let mut out = Array2::zeros((blocks * n, d));
        for k in 0..blocks {
            let wa = x.slice(s![k * n..(k + 1) * n, ..]);
            let vb = y.slice(s![k * m..(k + 1) * m, ..]);
            out.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&wa.dot(&vb));
        }
        let rg = self.rg(&[w, v]);
        Ok(self.push(out, Op::BlockMatMul(w, v, blocks), rg))
    }

    /// Element `cols[i]` of row `i`: `n x d -> n x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        if cols.len() != sa.0 || cols.iter().any(|&c| c >= sa.1) {
            return Err(TensorError::Shape { op: "pick", left: sa, right: (cols.len(), 0) });
        }
        let x = self.value(a);
        let v = Array2::from_shape_fn((sa.0, 1), |(i, _)| x[[i, cols[i]]]);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Pick(a, cols.to_vec()), rg))
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every parameter
    /// loaded on this tape. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        let grads = self.run_backward(loss)?;
        Ok(self.params.iter().map(|(path, v)| (path.clone(), self.grad_or_zero(&grads, *v))).collect())
    }

    /// Like [`Tape::backward`] but returns gradients for the given leaves.
    pub fn backward_leaves(&mut self, loss: Var, leaves: &[Var]) -> Result<Vec<Array2<f64>>, TensorError> {
        let grads = self.run_backward(loss)?;
        Ok(leaves.iter().map(|v| self.grad_or_zero(&grads, *v)).collect())
    }

    fn grad_or_zero(&self, grads: &[Option<Array2<f64>>], v: Var) -> Array2<f64> {
        grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| Array2::zeros(self.nodes[v.0].value.dim()))
    }

    fn run_backward(&mut self, loss: Var) -> Result<Vec<Option<Array2<f64>>>, TensorError> {
        if self.consumed {
            return Err(TensorError::AlreadyDifferentiated);
        }
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::NonScalarLoss(self.shape(loss)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            // The tape is spent, so the recorded op can be moved out.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g, &mut grads);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, op: &Op, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Minimum(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                // Ties route the gradient to the first operand.
                let ga = Zip::from(g).and(x).and(y).map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                let gb = Zip::from(g).and(x).and(y).map_collect(|&g, &x, &y| if x <= y { 0.0 } else { g });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Affine(a, scale) => self.accumulate(grads, *a, g * *scale),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Zip::from(g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(a) => self.accumulate(grads, *a, Zip::from(g).and(out).map_collect(|&g, &y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y))),
            Op::Exp(a) => self.accumulate(grads, *a, g * out),
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Zip::from(g).and(x).map_collect(|&g, &x| 2.0 * g * x));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Zip::from(g).and(x).map_collect(|&g, &x| if x >= *lo && x <= *hi { g } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let dot = (g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, *a, out * &(g - &dot));
            }
            Op::LogSoftmaxRows(a) => {
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let p = out.mapv(f64::exp);
                self.accumulate(grads, *a, g - &(p * &gsum));
            }
            Op::SumCols(a) => {
                let cols = self.shape(*a).1;
                let ga = g.broadcast((g.nrows(), cols)).expect("n x 1 broadcasts").to_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let sa = self.shape(*a);
                let ga = g.broadcast(sa).expect("1 x d broadcasts").to_owned() / sa.0 as f64;
                self.accumulate(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let sa = self.shape(*a);
                let n = (sa.0 * sa.1) as f64;
                self.accumulate(grads, *a, Array2::from_elem(sa, g[[0, 0]] / n));
            }
            Op::SumAll(a) => {
                let sa = self.shape(*a);
                self.accumulate(grads, *a, Array2::from_elem(sa, g[[0, 0]]));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, len) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*start + *len]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GroupMeanRows(a, group) => {
                let ga =
                    g.select(Axis(0), &(0..g.nrows()).flat_map(|i| std::iter::repeat_n(i, *group)).collect::<Vec<_>>()) / *group as f64;
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatRows(a, times) => {
                let sa = self.shape(*a);
                let mut ga = Array2::zeros(sa);
                for i in 0..sa.0 {
                    let block = g.slice(s![i * times..(i + 1) * times, ..]);
                    ga.row_mut(i).assign(&block.sum_axis(Axis(0)));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BlockMatMulBt(a, b, blocks) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let n = x.nrows() / blocks;
                let m = y.nrows() / blocks;
                let mut ga = Array2::zeros(x.dim());
                let mut gb = Array2::zeros(y.dim());
                for k in 0..*blocks {
                    let gk = g.slice(s![k * n..(k + 1) * n, ..]);
                    let xa = x.slice(s![k * n..(k + 1) * n, ..]);
                    let yb = y.slice(s![k * m..(k + 1) * m, ..]);
                    ga.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&gk.dot(&yb));
                    gb.slice_mut(s![k * m..(k + 1) * m, ..]).assign(&gk.t().dot(&xa));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BlockMatMul(w, v, blocks) => {
                let (x, y) = (self.value(*w), self.value(*v));
                let n = x.nrows() / blocks;
                let m = y.nrows() / blocks;
                let mut gw = Array2::zeros(x.dim());
                let mut gv = Array2::zeros(y.dim());
                for k in 0..*blocks {
                    let gk = g.slice(s![k * n..(k + 1) * n, ..]);
                    let wa = x.slice(s![k * n..(k + 1) * n, ..]);
                    let vb = y.slice(s![k * m..(k + 1) * m, ..]);
                    gw.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&gk.dot(&vb.t()));
                    gv.slice_mut(s![k * m..(k + 1) * m, ..]).assign(&wa.t().dot(&gk));
                }
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *v, gv);
            }
            Op::Pick(a, cols) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (i, &c) in cols.iter().enumerate() {
                    ga[[i, c]] = g[[i, 0]];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}
