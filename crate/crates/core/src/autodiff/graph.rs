use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// `a (n x c) + b (1 x c)` with `b` repeated over rows.
    AddRow(Var, Var),
    Hadamard(Var, Var),
    /// `a (n x c) ⊙ b (1 x c)` with `b` repeated over rows.
    MulRow(Var, Var),
    /// `a (n x c)` with row `i` scaled by `w[i]`, `w` is `n x 1`.
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
    Column { input: Var, index: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    /// `x ln x` elementwise with `0 ln 0 = 0`.
    XLogX(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// Pairwise squared euclidean distances between the rows of two matrices.
    SqDist(Var, Var),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Hadamard(..) => "hadamard",
            Op::MulRow(..) => "mul_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::MatMul(..) => "matmul",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Column { .. } => "column",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::XLogX(..) => "xlogx",
            Op::SoftmaxRows(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::SqDist(..) => "sq_dist",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Hadamard(a, b)
            | Op::MulRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::MatMul(a, b)
            | Op::SqDist(a, b) => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::SliceRows { input, .. } | Op::Column { input, .. } => vec![*input],
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::XLogX(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    needs_grad: bool,
}

/// Reverse-mode computation graph. Nodes are appended in evaluation order,
/// so parents always precede children.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> Var {
        let needs = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(op, value, needs)
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    fn zip_row(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err(op, ta, tb));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % c.max(1)]))
            .collect();
        Tensor::new(ta.rows(), c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(Op::Sub(a, b), v))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.zip_row("add_row", a, row, |x, y| x + y)?;
        Ok(self.push_op(Op::AddRow(a, row), v))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push_op(Op::Hadamard(a, b), v))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.zip_row("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push_op(Op::MulRow(a, row), v))
    }

    pub fn scale_rows(&mut self, a: Var, weights: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(weights));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(shape_err("scale_rows", ta, tw));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tw.data()[i / c])
            .collect();
        let v = Tensor::new(ta.rows(), c, data)?;
        Ok(self.push_op(Op::ScaleRows(a, weights), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), v))
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat_cols of zero tensors".into()));
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::new(rows, cols, data)?;
        Ok(self.push_op(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Concatenation along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Invalid("concat_rows of zero tensors".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(rows, cols, data)?;
        Ok(self.push_op(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        if start + len > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape(),
                rhs: [start, len],
            });
        }
        let c = t.cols();
        let v = Tensor::new(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push_op(Op::SliceRows { input, start }, v))
    }

    pub fn column(&mut self, input: Var, index: usize) -> Result<Var> {
        let t = self.value(input);
        if index >= t.cols() {
            return Err(Error::Shape {
                op: "column",
                lhs: t.shape(),
                rhs: [0, index],
            });
        }
        let data = (0..t.rows()).map(|r| t.get(r, index)).collect();
        let v = Tensor::new(t.rows(), 1, data)?;
        Ok(self.push_op(Op::Column { input, index }, v))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push_op(op, v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, Op::XLogX(a), xlogx)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a, s), |x| x + s)
    }

    /// Row-wise softmax, computed with the row maximum subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            data.extend(softmax(t.row_slice(r)));
        }
        let v = Tensor::new(t.rows(), c, data).expect("softmax preserves shape");
        self.push_op(Op::SoftmaxRows(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_op(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.cols() != ty.cols() {
            return Err(shape_err("sq_dist", tx, ty));
        }
        let (n, m) = (tx.rows(), ty.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let xi = tx.row_slice(i);
            for j in 0..m {
                let yj = ty.row_slice(j);
                data.push(xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        let v = Tensor::new(n, m, data)?;
        Ok(self.push_op(Op::SqDist(x, y), v))
    }

    /// Dense layer `x · w + b` with `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Populates `grad` for every node reachable from the scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                let op = self.nodes[i].op.clone();
                // Parents all have smaller indices, so the output value can be
                // moved out while they are updated.
                let out = std::mem::replace(&mut self.nodes[i].value, Tensor::zeros(0, 0));
                self.propagate(&op, &out, &g);
                self.nodes[i].value = out;
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => g.add_assign(&contribution),
            None => node.grad = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, op: &Op, out: &Tensor, g: &Tensor) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(b, g.map(|x| -x));
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(a) {
                    self.accumulate(a, g.clone());
                }
                if self.wants(b) {
                    self.accumulate(b, column_sums(g));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(a) {
                    let gb = zip(g, self.value(b), |x, y| x * y);
                    self.accumulate(a, gb);
                }
                if self.wants(b) {
                    let ga = zip(g, self.value(a), |x, y| x * y);
                    self.accumulate(b, ga);
                }
            }
            Op::MulRow(a, b) => {
                let c = g.cols();
                if self.wants(a) {
                    let tb = self.value(b);
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * tb.data()[i % c])
                        .collect();
                    let t = Tensor::new(g.rows(), c, data).expect("shape");
                    self.accumulate(a, t);
                }
                if self.wants(b) {
                    let prod = zip(g, self.value(a), |x, y| x * y);
                    self.accumulate(b, column_sums(&prod));
                }
            }
            Op::ScaleRows(a, w) => {
                let c = g.cols();
                if self.wants(a) {
                    let tw = self.value(w);
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * tw.data()[i / c])
                        .collect();
                    let t = Tensor::new(g.rows(), c, data).expect("shape");
                    self.accumulate(a, t);
                }
                if self.wants(w) {
                    let ta = self.value(a);
                    let data = (0..g.rows())
                        .map(|r| {
                            g.row_slice(r)
                                .iter()
                                .zip(ta.row_slice(r))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    let t = Tensor::new(g.rows(), 1, data).expect("shape");
                    self.accumulate(w, t);
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let ga = g.matmul_t_raw(self.value(b));
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let gb = self.value(a).t_matmul_raw(g);
                    self.accumulate(b, gb);
                }
            }
            Op::ConcatCols(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        let t = Tensor::new(g.rows(), pc, data).expect("shape");
                        self.accumulate(p, t);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(ref parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.wants(p) {
                        let data = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(p, Tensor::new(pr, c, data).expect("shape"));
                    }
                    offset += pr;
                }
            }
            Op::SliceRows { input, start } => {
                if self.wants(input) {
                    let t = self.value(input);
                    let c = t.cols();
                    let mut full = Tensor::zeros(t.rows(), c);
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(input, full);
                }
            }
            Op::Column { input, index } => {
                if self.wants(input) {
                    let t = self.value(input);
                    let mut full = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..t.rows() {
                        full.set(r, index, g.data()[r]);
                    }
                    self.accumulate(input, full);
                }
            }
            Op::Sigmoid(a) => {
                let t = zip(g, out, |gv, y| gv * y * (1.0 - y));
                self.accumulate(a, t);
            }
            Op::Tanh(a) => {
                let t = zip(g, out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(a, t);
            }
            Op::Relu(a) => {
                let t = zip(g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(a, t);
            }
            Op::Exp(a) => {
                let t = zip(g, out, |gv, y| gv * y);
                self.accumulate(a, t);
            }
            Op::Log(a) => {
                let t = zip(g, self.value(a), |gv, x| gv / x);
                self.accumulate(a, t);
            }
            Op::Square(a) => {
                let t = zip(g, self.value(a), |gv, x| 2.0 * gv * x);
                self.accumulate(a, t);
            }
            Op::XLogX(a) => {
                let t = zip(g, self.value(a), |gv, x| {
                    if x > 0.0 {
                        gv * (x.ln() + 1.0)
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, t);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(a, Tensor::new(out.rows(), c, data).expect("shape"));
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(a);
                self.accumulate(a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = self.shape(a);
                let n = (r * c) as f64;
                self.accumulate(a, Tensor::filled(r, c, g.item() / n));
            }
            Op::Scale(a, s) => {
                self.accumulate(a, g.map(|x| x * s));
            }
            Op::AddScalar(a, _) => {
                self.accumulate(a, g.clone());
            }
            Op::SqDist(x, y) => {
                let (tx, ty) = (self.value(x).clone(), self.value(y).clone());
                let (n, m, d) = (tx.rows(), ty.rows(), tx.cols());
                if self.wants(x) {
                    let mut gx = Tensor::zeros(n, d);
                    for i in 0..n {
                        let xi = tx.row_slice(i);
                        for j in 0..m {
                            let w = 2.0 * g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            let yj = ty.row_slice(j);
                            for k in 0..d {
                                gx.data_mut()[i * d + k] += w * (xi[k] - yj[k]);
                            }
                        }
                    }
                    self.accumulate(x, gx);
                }
                if self.wants(y) {
                    let mut gy = Tensor::zeros(m, d);
                    for i in 0..n {
                        let xi = tx.row_slice(i);
                        for j in 0..m {
                            let w = 2.0 * g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            let yj = ty.row_slice(j);
                            for k in 0..d {
                                gy.data_mut()[j * d + k] -= w * (xi[k] - yj[k]);
                            }
                        }
                    }
                    self.accumulate(y, gy);
                }
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("zip of equal shapes")
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(&out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Softmax of a slice with the maximum logit subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
