use super::Tensor;
use crate::error::{NdaError, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
    Scale(Var, f64),
    ClampMin(Var, f64),
    ConcatRows(Var, Var),
    RowSelect(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Tape of tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so insertion order is a valid
/// topological order and the graph is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_events: usize,
}

/// Gradients produced by one call to [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if `var` does not
    /// reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Number of entries floored by [`Graph::clamp_min`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn is_param(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Param)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NdaError::NonFinite { op: name });
        }
        Ok(self.push(op, value))
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NdaError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str, a: Var) -> Result<()> {
        if self.shape(a).len() != 2 {
            return Err(NdaError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: vec![],
            });
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = &self.nodes[a.0].value;
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked(Op::MatMul(a, b), out, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push_checked(Op::Add(a, b), out, "add")
    }

    /// Adds a length-`m` bias to every row of an `n × m` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.require_matrix("add_bias", a)?;
        let cols = self.shape(a)[1];
        if self.value(bias).len() != cols || self.value(bias).rows() != 1 {
            return Err(NdaError::Shape {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push_checked(Op::AddBias(a, bias), out, "add_bias")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push_checked(Op::Sub(a, b), out, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push_checked(Op::Mul(a, b), out, "mul")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push_checked(Op::Relu(a), out, "relu")
    }

    /// Row-wise softmax of a 2-D tensor, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.require_matrix("softmax_rows", a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push_checked(Op::SoftmaxRows(a), out, "softmax_rows")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(NdaError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.map(a, f64::ln);
        self.push_checked(Op::Log(a), out, "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * x);
        self.push_checked(Op::Square(a), out, "square")
    }

    /// Square root. The derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(NdaError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        let out = self.map(a, f64::sqrt);
        self.push_checked(Op::Sqrt(a), out, "sqrt")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_checked(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Sums each row of a 2-D tensor into an `n × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.require_matrix("sum_rows", a)?;
        let v = self.value(a);
        let data: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Tensor::new(vec![data.len(), 1], data)?;
        self.push_checked(Op::SumRows(a), out, "sum_rows")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(NdaError::contract("mean of empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push_checked(Op::Mean(a), Tensor::scalar(m), "mean")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| c * x);
        self.push_checked(Op::Scale(a, c), out, "scale")
    }

    /// `max(a, floor)` elementwise; floored entries get zero gradient and are
    /// counted in [`Graph::clamp_events`].
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let clamped = self.value(a).data().iter().filter(|&&x| x < floor).count();
        self.clamp_events += clamped;
        let out = self.map(a, |x| x.max(floor));
        self.push_checked(Op::ClampMin(a, floor), out, "clamp_min")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_matrix("concat_rows", a)?;
        self.require_matrix("concat_rows", b)?;
        if self.shape(a)[1] != self.shape(b)[1] {
            return Err(NdaError::Shape {
                op: "concat_rows",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::new(vec![va.rows() + vb.rows(), va.cols()], data)?;
        self.push_checked(Op::ConcatRows(a, b), out, "concat_rows")
    }

    pub fn row_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.require_matrix("row_select", a)?;
        let rows = self.shape(a)[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NdaError::Shape {
                op: "row_select",
                left: self.shape(a).to_vec(),
                right: vec![bad],
            });
        }
        let out = self.value(a).select_rows(indices);
        self.push_checked(Op::RowSelect(a, indices.to_vec()), out, "row_select")
    }

    /// Branch decisions taken by non-smooth ops (relu sign, clamp, sqrt at 0).
    /// Two evaluations with different signatures straddle a kink.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.value(*a).data().iter().map(|&x| x > 0.0)),
                Op::ClampMin(a, floor) => {
                    sig.extend(self.value(*a).data().iter().map(|&x| x >= *floor))
                }
                Op::Sqrt(a) => sig.extend(self.value(*a).data().iter().map(|&x| x > 0.0)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a scalar `loss`. Every call starts from fresh
    /// buffers, so repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(NdaError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddBias(a, b) => {
                    let bias = self.value(*b);
                    let mut db = vec![0.0; bias.len()];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(bias.shape().to_vec(), db)?);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, negate(&g));
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&g, self.value(*b), |x, y| x * y);
                    let db = elementwise(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let d = elementwise(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut d = Tensor::zeros(s.shape().to_vec());
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), g.row(r));
                        let dot: f64 = sr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in d.row_mut(r).iter_mut().zip(sr).zip(gr) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let d = elementwise(&g, self.value(*a), |x, y| x / y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = elementwise(&g, self.value(*a), |x, y| 2.0 * x * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let d = elementwise(
                        &g,
                        &node.value,
                        |x, y| {
                            if y > 0.0 {
                                x / (2.0 * y)
                            } else {
                                0.0
                            }
                        },
                    );
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Tensor::full(self.shape(*a).to_vec(), g.item());
                    accumulate(&mut grads, *a, d);
                }
                Op::SumRows(a) => {
                    let v = self.value(*a);
                    let mut d = Tensor::zeros(v.shape().to_vec());
                    for r in 0..v.rows() {
                        let gr = g.data()[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let v = self.value(*a);
                    let d = Tensor::full(v.shape().to_vec(), g.item() / v.len() as f64);
                    accumulate(&mut grads, *a, d);
                }
                Op::Scale(a, c) => {
                    let d =
                        Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| c * x).collect())?;
                    accumulate(&mut grads, *a, d);
                }
                Op::ClampMin(a, floor) => {
                    let d =
                        elementwise(&g, self.value(*a), |x, y| if y >= *floor { x } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).len();
                    let da = Tensor::new(self.shape(*a).to_vec(), g.data()[..split].to_vec())?;
                    let db = Tensor::new(self.shape(*b).to_vec(), g.data()[split..].to_vec())?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::RowSelect(a, indices) => {
                    let mut d = Tensor::zeros(self.shape(*a).to_vec());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
            // Only leaf gradients are kept; intermediates were consumed above.
            if matches!(node.op, Op::Param | Op::Constant) {
                grads[id] = Some(g);
            }
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn negate(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| -x).collect()).expect("same shape")
}

fn elementwise(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(v.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(v.shape().to_vec(), data).expect("same shape")
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
