//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node whose
//! inputs were pushed earlier, so index order is a topological order and the
//! tape is acyclic by construction. [`Graph::backward`] walks the tape once in
//! reverse, visiting each node at most once.

use crate::error::{NumError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`: same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(NumError::UnknownVar { index: v.0 })
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product of an `m×k` and a `k×n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = gemm(ta.data(), (m, k), false, tb.data(), (k, n), false);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix (or to an `n` vector).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        if tb.shape().len() != 1 || tx.shape().is_empty() || tx.cols() != tb.len() {
            return Err(NumError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tb.len();
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        Ok(self.binary(x, bias, value, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.unary(x, value, Op::AddScalar(x))
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.unary(x, value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.unary(x, value, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        if t.is_empty() {
            return Err(NumError::BadShape {
                op: "mean",
                shape: t.shape().to_vec(),
                reason: "no elements",
            });
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.unary(x, Tensor::scalar(m), Op::Mean(x)))
    }

    /// Concatenation along the last axis. Matrices must agree on row count.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let ok = !ta.shape().is_empty()
            && ta.shape().len() == tb.shape().len()
            && ta.rows() == tb.rows();
        if !ok {
            return Err(NumError::ShapeMismatch {
                op: "concat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let shape = if ta.shape().len() == 1 {
            vec![ca + cb]
        } else {
            vec![rows, ca + cb]
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.binary(a, b, value, Op::Concat(a, b)))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.unary(x, value, Op::Clamp(x, lo, hi))
    }

    /// Gradients of a scalar `output` with respect to every node on the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        if !out.is_scalar() {
            return Err(NumError::NonScalarOutput {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let ga = gemm(g.data(), (m, n), false, tb.data(), (k, n), true);
                    send(a, Tensor::matrix(m, k, ga).expect("matmul grad shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = gemm(ta.data(), (m, k), true, g.data(), (m, n), false);
                    send(b, Tensor::matrix(k, n, gb).expect("matmul grad shape"));
                }
            }
            Op::AddBias(x, b) => {
                send(x, g.clone());
                let n = val(b).len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(b, Tensor::vector(gb));
            }
            Op::Add(a, b) => {
                send(a, g.clone());
                send(b, g.clone());
            }
            Op::Sub(a, b) => {
                send(a, g.clone());
                send(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(a, g.zip_map(val(b), |gv, bv| gv * bv));
                send(b, g.zip_map(val(a), |gv, av| gv * av));
            }
            Op::Scale(x, c) => send(x, g.map(|v| v * c)),
            Op::AddScalar(x) => send(x, g.clone()),
            Op::Relu(x) => send(x, g.zip_map(val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::Tanh(x) => {
                let y = &node.value;
                send(x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Exp(x) => send(x, g.zip_map(&node.value, |gv, yv| gv * yv)),
            Op::Square(x) => send(x, g.zip_map(val(x), |gv, xv| 2.0 * gv * xv)),
            Op::Sum(x) => {
                let gs = g.data()[0];
                send(x, Tensor::full(val(x).shape(), gs));
            }
            Op::Mean(x) => {
                let t = val(x);
                send(x, Tensor::full(t.shape(), g.data()[0] / t.len() as f64));
            }
            Op::Concat(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (ca, cb) = (ta.cols(), tb.cols());
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for row in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(a, Tensor::new(ta.shape().to_vec(), ga).expect("concat grad shape"));
                send(b, Tensor::new(tb.shape().to_vec(), gb).expect("concat grad shape"));
            }
            Op::Clamp(x, lo, hi) => send(
                x,
                g.zip_map(val(x), |gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
            ),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros where no gradient reached it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}
