use std::rc::Rc;

use super::ops::{self, Mask};
use super::Tensor;
use crate::error::{CclError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    NormalizeRows(Var, Vec<f64>),
    Exp(Var),
    Log(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    MaskedLogSoftmax(Var, Rc<Mask>),
    MaskedLogSumExp(Var, Rc<Mask>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
///
/// Node ids are assigned in creation order, so every node's inputs precede
/// it. [`Tape::backward`] walks the ids in reverse exactly once. A tape is
/// meant to live for a single training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if nothing flowed into it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("shape"))
    }

    /// Gradient for `var`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn has(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(usize) -> f64) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    for (i, v) in g.iter_mut().enumerate() {
        *v += f(i);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) || value.is_finite(),
            "non-finite output from {op:?}"
        );
        self.push_raw(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 × n` row (typically a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = ops::add_row(self.value(a), self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = ops::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (v, norms) = ops::normalize_rows(self.value(a))?;
        Ok(self.push(v, Op::NormalizeRows(a, norms), &[a]))
    }

    /// Pairwise cosine similarity matrix between the rows of `a` and `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims2()?.1 != self.value(b).dims2()?.1 {
            return Err(CclError::dim(
                "cosine_similarity",
                self.shape(a),
                self.shape(b),
            ));
        }
        let an = self.normalize_rows(a)?;
        let bn = if a == b { an } else { self.normalize_rows(b)? };
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = ops::exp(self.value(a));
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = ops::log(self.value(a))?;
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = ops::sum_axis(self.value(a), axis)?;
        Ok(self.push(v, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let count = if axis == 0 { m } else { n };
        if count == 0 {
            return Err(CclError::domain("mean_axis", "empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ops::sum_all(self.value(a));
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(CclError::domain("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn masked_log_softmax(&mut self, a: Var, mask: Rc<Mask>) -> Result<Var> {
        let v = ops::masked_log_softmax(self.value(a), &mask)?;
        Ok(self.push(v, Op::MaskedLogSoftmax(a, mask), &[a]))
    }

    pub fn masked_logsumexp(&mut self, a: Var, mask: Rc<Mask>) -> Result<Var> {
        let v = ops::masked_logsumexp(self.value(a), &mask)?;
        Ok(self.push(v, Op::MaskedLogSumExp(a, mask), &[a]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(CclError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.tracked {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| g.filter(|_| node.tracked))
                .collect(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                if self.tracked(*a) {
                    let bt = ops::transpose(self.value(*b))?;
                    let ga = ops::matmul(&gt, &bt)?;
                    accumulate(&mut grads[a.0], ga.len(), |i| ga.data()[i]);
                }
                if self.tracked(*b) {
                    let at = ops::transpose(self.value(*a))?;
                    let gb = ops::matmul(&at, &gt)?;
                    accumulate(&mut grads[b.0], gb.len(), |i| gb.data()[i]);
                }
            }
            Op::Transpose(a) => {
                let gt = ops::transpose(&Tensor::new(out.shape().to_vec(), g.to_vec())?)?;
                accumulate(&mut grads[a.0], gt.len(), |i| gt.data()[i]);
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |i| g[i]);
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.len(), |i| g[i]);
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |i| g[i]);
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.len(), |i| -g[i]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |i| g[i] * bv[i]);
                }
                if self.tracked(*b) {
                    accumulate(&mut grads[b.0], g.len(), |i| g[i] * av[i]);
                }
            }
            Op::AddRow(a, row) => {
                if self.tracked(*a) {
                    accumulate(&mut grads[a.0], g.len(), |i| g[i]);
                }
                if self.tracked(*row) {
                    let gs = ops::sum_axis(&Tensor::new(out.shape().to_vec(), g.to_vec())?, 0)?;
                    accumulate(&mut grads[row.0], gs.len(), |i| gs.data()[i]);
                }
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g.len(), |i| g[i] * c),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                accumulate(&mut grads[a.0], g.len(), |i| {
                    if av[i] > 0.0 {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::NormalizeRows(a, norms) => {
                // dx = (dy - y (y . dy)) / |x|
                let (m, c) = out.dims2()?;
                let y = out.data();
                let mut gx = vec![0.0; m * c];
                for i in 0..m {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                accumulate(&mut grads[a.0], gx.len(), |i| gx[i]);
            }
            Op::Exp(a) => {
                let y = out.data();
                accumulate(&mut grads[a.0], g.len(), |i| g[i] * y[i]);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                accumulate(&mut grads[a.0], g.len(), |i| g[i] / x[i]);
            }
            Op::SumAxis(a, axis) => {
                let (_, n) = self.value(*a).dims2()?;
                let len = self.value(*a).len();
                if *axis == 0 {
                    accumulate(&mut grads[a.0], len, |i| g[i % n]);
                } else {
                    accumulate(&mut grads[a.0], len, |i| g[i / n]);
                }
            }
            Op::SumAll(a) => {
                let len = self.value(*a).len();
                accumulate(&mut grads[a.0], len, |_| g[0]);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                // dx_j = dy_j - softmax_j * sum_k dy_k, over included entries
                let (m, n) = out.dims2()?;
                let y = out.data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let total: f64 = (0..n)
                        .filter(|&j| mask.get(i, j))
                        .map(|j| g[i * n + j])
                        .sum();
                    for j in 0..n {
                        if mask.get(i, j) {
                            gx[i * n + j] = g[i * n + j] - y[i * n + j].exp() * total;
                        }
                    }
                }
                accumulate(&mut grads[a.0], gx.len(), |i| gx[i]);
            }
            Op::MaskedLogSumExp(a, mask) => {
                let x = self.value(*a);
                let (m, n) = x.dims2()?;
                let xd = x.data();
                let lse = out.data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        if mask.get(i, j) {
                            gx[i * n + j] = g[i] * (xd[i * n + j] - lse[i]).exp();
                        }
                    }
                }
                accumulate(&mut grads[a.0], gx.len(), |i| gx[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sum_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 9.0]]).unwrap());
        let s = t.sum_all(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x), Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.5, -0.5]));
        let y = t.add(x, x).unwrap();
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn self_cosine_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[0.3, -1.2, 2.0]));
        let s = t.cosine_similarity(x, x).unwrap();
        let l = t.sum_all(s);
        assert_abs_diff_eq!(t.scalar(l).unwrap(), 1.0, epsilon = 1e-15);
        let g = t.backward(l).unwrap();
        for v in g.wrt(x).data() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(CclError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let c = t.constant(Tensor::row_vector(&[3.0, 4.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
        assert!(!g.has(c));
    }

    #[test]
    fn matmul_gradient_by_hand() {
        // L = sum(A B), dL/dA = 1 Bᵀ, dL/dB = Aᵀ 1
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![3.0, 4.0, 5.0], vec![6.0, 7.0, 8.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[12.0, 21.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn node_ids_are_topological() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(&[1.0]));
        let y = t.exp(x);
        let z = t.log(y).unwrap();
        assert!(x.id() < y.id() && y.id() < z.id());
        assert_eq!(t.len(), 3);
    }
}
