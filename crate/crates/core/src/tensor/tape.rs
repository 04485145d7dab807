//! Reverse-mode differentiation over a linear tape of matrix ops.
//!
//! Every op records its output value when it is pushed, so building the
//! graph *is* the forward pass. [`Tape::backward`] walks the tape in reverse
//! and writes parameter gradients into a [`ParamStore`].

use super::nn;
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Mul(Var, Var),
    Sum(Var),
    /// Scalar function of one input whose gradient was computed alongside
    /// the value (fused softmax cross-entropy, kernel regularizers).
    Fused { input: Var, grad: Matrix },
    /// Σ cᵢ·xᵢ over scalar nodes.
    Combine(Vec<(f64, Var)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let mut value = self.value(input).clone();
        nn::add_row_bias(&mut value, self.value(bias))?;
        Ok(self.push(value, Op::AddBias(input, bias)))
    }

    /// `input · weights + bias`, recorded as a matmul followed by a bias add.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let z = self.matmul(input, weights)?;
        self.add_bias(z, bias)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = nn::relu(self.value(a));
        self.push(value, Op::Relu(a))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Fused softmax + mean cross-entropy over the rows of `logits`.
    /// The local gradient is `(probs - onehot) / batch`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let probs = nn::softmax_rows(self.value(logits))?;
        let loss = nn::cross_entropy(&probs, targets)?;
        let batch = targets.len() as f64;
        let mut grad = probs;
        for (i, &t) in targets.iter().enumerate() {
            let v = grad.get(i, t);
            grad.set(i, t, v - 1.0);
        }
        let grad = grad.scale(1.0 / batch);
        Ok(self.push(Matrix::scalar(loss), Op::Fused { input: logits, grad }))
    }

    /// Records a scalar `value = f(input)` together with `∂f/∂input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, grad: Matrix) -> Result<Var> {
        self.value(input).ensure_same_shape(&grad)?;
        Ok(self.push(Matrix::scalar(value), Op::Fused { input, grad }))
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut total = 0.0;
        for &(c, v) in terms {
            if self.value(v).shape() != (1, 1) {
                return Err(Error::dim("combine expects scalar nodes"));
            }
            total += c * self.scalar(v);
        }
        Ok(self.push(Matrix::scalar(total), Op::Combine(terms.to_vec())))
    }

    /// Back-propagates from the scalar `root`, overwriting the gradients in
    /// `store`. Gradients are reset first, so repeated calls give the same
    /// result.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before a forward pass was recorded".into(),
            ));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::State("backward root must be a scalar".into()));
        }
        store.zero_grad();

        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g)?,
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::AddBias(input, bias) => {
                    let mut gb = vec![0.0; g.cols()];
                    for row in g.iter_rows() {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let (r, c) = self.value(*bias).shape();
                    accumulate(&mut adj, *bias, Matrix::new(r, c, gb)?)?;
                    accumulate(&mut adj, *input, g)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |gv, y| gv * y)?;
                    let gb = g.zip_map(self.value(*a), |gv, x| gv * x)?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::Fused { input, grad } => {
                    accumulate(&mut adj, *input, grad.scale(g.get(0, 0)))?;
                }
                Op::Combine(terms) => {
                    let up = g.get(0, 0);
                    for &(c, v) in terms {
                        accumulate(&mut adj, v, Matrix::scalar(c * up))?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
