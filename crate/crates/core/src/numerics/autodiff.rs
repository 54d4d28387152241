//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates adjoints. Nodes that do not depend on
//! any leaf created with [`Tape::param`] are treated as constants and skipped
//! during the backward sweep.

use std::rc::Rc;

use super::matrix::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 x d` row to every row of an `n x d` operand.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<Matrix>),
    Relu(Var),
    Exp(Var),
    /// `ln(max(x, floor))`
    Ln(Var, f64),
    Softplus(Var),
    Softmax(Var),
    /// Row-wise `x / max(|x|, floor)`.
    RowNormalize(Var, f64),
    SumAll(Var),
    /// `n x d -> n x 1`
    SumRows(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    GatherEntries(Var, Rc<Vec<(usize, usize)>>),
    /// Row-wise inner products, `n x 1`.
    RowDot(Var, Var),
    /// Pairwise squared Euclidean distances between rows.
    SqDist(Var, Var),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node on the tape; `None` where no gradient flows.
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_rc(&mut self, value: Rc<Matrix>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).hadamard(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a).add_row_broadcast(self.value(row));
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Matrix>) -> Var {
        let out = self.value(a).hadamard(&c);
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor).ln());
        let ng = self.ng(a);
        self.push(out, Op::Ln(a, floor), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn row_normalize(&mut self, a: Var, floor: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..out.rows() {
            let n = dot(x.row(i), x.row(i)).sqrt().max(floor);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RowNormalize(a, floor), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = Matrix::column(&self.value(a).row_sums());
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = self.value(a).select_rows(&idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    pub fn gather_entries(&mut self, a: Var, at: Rc<Vec<(usize, usize)>>) -> Var {
        let x = self.value(a);
        let vals: Vec<f64> = at.iter().map(|&(r, c)| x[(r, c)]).collect();
        let ng = self.ng(a);
        self.push(Matrix::column(&vals), Op::GatherEntries(a, at), ng)
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "row_dot shape mismatch");
        let vals: Vec<f64> = (0..x.rows()).map(|i| dot(x.row(i), y.row(i))).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(Matrix::column(&vals), Op::RowDot(a, b), ng)
    }

    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let out = pairwise_sq_dist(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::SqDist(a, b), ng)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Adjoints {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a b^T: da = g b, db = g^T a
                    if self.ng(*a) {
                        let ga = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.t_matmul(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.hadamard(self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.hadamard(self.value(*a)));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        accumulate(&mut grads, *row, g.col_sums());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g.hadamard(c)),
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g.hadamard(out)),
                Op::Ln(a, floor) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > *floor { gv / x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let y = out.row(i);
                        let gy = g.row(i);
                        let inner = dot(y, gy);
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = y[j] * (gy[j] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNormalize(a, floor) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let norm = dot(x.row(i), x.row(i)).sqrt();
                        let gy = g.row(i);
                        if norm > *floor {
                            let y = out.row(i);
                            let inner = dot(y, gy);
                            for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                                *o = (gy[j] - y[j] * inner) / norm;
                            }
                        } else {
                            for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                                *o = gy[j] / floor;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let ga = Matrix::from_fn(r, c, |i, _| g[(i, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherEntries(a, at) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &(i, j)) in at.iter().enumerate() {
                        ga[(i, j)] += g[(k, 0)];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| g[(i, 0)] * y[(i, j)]);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = Matrix::from_fn(x.rows(), x.cols(), |i, j| g[(i, 0)] * x[(i, j)]);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::SqDist(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let d = x.cols();
                    let mut ga = Matrix::zeros(x.rows(), d);
                    let mut gb = Matrix::zeros(y.rows(), d);
                    for i in 0..x.rows() {
                        for j in 0..y.rows() {
                            let w = 2.0 * g[(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = w * (x[(i, k)] - y[(j, k)]);
                                ga[(i, k)] += diff;
                                gb[(j, k)] -= diff;
                            }
                        }
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
            }
        }
        Adjoints { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "sq_dist dimension mismatch");
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut t = Tape::new();
        let v = t.param(w.clone());
        let sq = t.mul(v, v);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss);
        assert_eq!(g.get(v).unwrap(), &w);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let p = t.param(Matrix::scalar(3.0));
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut t = Tape::new();
        let p = t.param(Matrix::row_vector(&[0.0, 1.0, -1.0]));
        let r = t.relu(p);
        let s = t.sum(r);
        let g = t.backward(s);
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
