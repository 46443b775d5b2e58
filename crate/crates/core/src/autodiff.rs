//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation pushes a node holding its output value and
//! a backward rule. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because inputs must
//! exist before an operation can consume them. Gradients from several
//! consumers of the same node are summed.
//!
//! Nodes whose inputs do not require gradients keep only their value, so
//! inference through a tape costs no backward bookkeeping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Op: Send {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: gradient with respect to each input given the
    /// gradient of the output. Entries for inputs with `needs[i] == false`
    /// may be `None`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op>>,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Drops every node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(tensor, requires_grad, Vec::new(), None)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(tensor.with_requires_grad(false), false, Vec::new(), None)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.zero_grad();
        self.push_node(value, true, Vec::new(), None)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records the result of an operation. The backward rule is kept only if
    /// some input requires a gradient.
    pub fn push(&mut self, op: Box<dyn Op>, inputs: &[Var], value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if requires_grad {
            let inputs = inputs.iter().map(|v| v.0).collect();
            self.push_node(value, true, inputs, Some(op))
        } else {
            self.push_node(value, false, Vec::new(), None)
        }
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, inputs: Vec<usize>, op: Option<Box<dyn Op>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                let input_grads = op.backward(&inputs, &node.value, &grad_out, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                let targets = node.inputs.clone();
                for ((target, grad), need) in targets.into_iter().zip(input_grads).zip(needs) {
                    if let (true, Some(grad)) = (need, grad) {
                        accumulate(&mut self.grads[target], grad);
                    }
                }
            }
            self.grads[idx] = Some(grad_out);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor.grad`.
    pub fn write_grad(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let Some(g) = self.grad(var) else {
            return Ok(());
        };
        let merged = match tensor.grad() {
            Some(existing) => existing.iter().zip(g).map(|(a, b)| a + b).collect(),
            None => g.to_vec(),
        };
        tensor.set_grad(Some(merged))
    }

    // ---------------------------------------------------------------------
    // Elementwise and reduction operations
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Box::new(AddOp), &[a, b], out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Box::new(SubOp), &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Box::new(MulOp), &[a, b], out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(Box::new(ScaleOp(factor)), &[a], out)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Box::new(SumOp), &[a], Tensor::scalar(total))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(Box::new(ReshapeOp), &[a], out))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.push(Box::new(SiluOp), &[a], out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Box::new(ReluOp), &[a], out)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))?;
        Ok(self.push(Box::new(MatmulOp { m, k, n }), &[a, b], out))
    }

    /// Adds `bias[n]` to every row of `x[rows×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = bv.len();
        if xv.ndim() != 2 || xv.shape()[1] != n {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Box::new(AddBiasOp { n }), &[x, bias], out))
    }

    /// Row-wise `x − log Σ exp(x)` with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.shape()[1] == 0 {
            return Err(Error::Shape(format!(
                "log_softmax expects [batch, classes] with classes >= 1, got {:?}",
                xv.shape()
            )));
        }
        let cols = xv.shape()[1];
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Box::new(LogSoftmaxOp { cols }), &[x], out))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grad) {
                *e += g;
            }
        }
        None => *slot = Some(grad),
    }
}

fn check_same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x·σ(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `σ(x)(1 + x(1 − σ(x)))`.
pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubOp;
impl Op for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulOp;
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect());
        let gb = needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect());
        vec![ga, gb]
    }
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct SumOp;
impl Op for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].len()])]
    }
}

struct ReshapeOp;
impl Op for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct SiluOp;
impl Op for SiluOp {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(g.iter().zip(x).map(|(g, &x)| g * silu_derivative(x)).collect())]
    }
}

struct ReluOp;
impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        vec![Some(
            g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
        )]
    }
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}
impl Op for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (inputs[0].data(), inputs[1].data());
        // dA = G·Bᵀ, dB = Aᵀ·G
        let ga = needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    out[i * k + p] = (0..n).map(|j| g[i * n + j] * b[p * n + j]).sum();
                }
            }
            out
        });
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    for j in 0..n {
                        out[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            out
        });
        vec![ga, gb]
    }
}

struct AddBiasOp {
    n: usize,
}
impl Op for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; self.n];
            for row in g.chunks(self.n) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        });
        vec![Some(g.to_vec()), gb]
    }
}

struct LogSoftmaxOp {
    cols: usize,
}
impl Op for LogSoftmaxOp {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        // dx = g − softmax · Σg
        let mut dx = Vec::with_capacity(g.len());
        for (grow, orow) in g.chunks(self.cols).zip(out.data().chunks(self.cols)) {
            let gsum: f64 = grow.iter().sum();
            dx.extend(grow.iter().zip(orow).map(|(g, o)| g - o.exp() * gsum));
        }
        vec![Some(dx)]
    }
}
