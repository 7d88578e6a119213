//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so parents always precede
//! children and the backward sweep is a single reverse pass.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
}

impl Activation {
    /// Leaky ReLU with the 0.2 slope used by the default architectures.
    pub const LEAKY: Activation = Activation::LeakyRelu(0.2);
    pub const RELU: Activation = Activation::LeakyRelu(0.0);

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at pre-activation `x`, given output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x W + b` with `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Record of the most recent network evaluation made through
/// [`crate::numerics::forward`].
#[derive(Debug, Clone)]
pub(crate) struct ForwardRecord {
    pub input: Var,
    pub output: Var,
    pub params: Vec<Var>,
}

/// Recording of primitive operations for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pub(crate) last_forward: Option<ForwardRecord>,
}

/// Adjoints produced by a backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Adjoints {
    /// Gradient with respect to `v`; zeros when `v` does not influence the
    /// seeded output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (input, parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.rows() {
            return Err(shape_err(
                "affine input",
                format!("[n, {}]", wv.rows()),
                format!("{:?}", xv.shape()),
            ));
        }
        if bv.len() != wv.cols() {
            return Err(shape_err("affine bias", wv.cols(), bv.len()));
        }
        let mut y = xv.matmul(wv)?;
        let out = wv.cols();
        let bd = bv.data().to_vec();
        for r in y.data_mut().chunks_mut(out) {
            for (yv, b) in r.iter_mut().zip(&bd) {
                *yv += b;
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, y))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let y = self.value(x).map(|v| act.apply(v));
        self.push(Op::Act(x, act), y)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err(
                what,
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).scale(c);
        self.push(Op::Scale(a, c), y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a), y)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), y)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), y)
    }

    /// Sweeps the tape backwards from `output`, seeded with `seed`
    /// (same shape as the output value).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Adjoints> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage("backward on a variable not recorded on this tape".into()));
        }
        let out_val = &self.nodes[output.0].value;
        if !out_val.same_shape(seed) {
            return Err(shape_err(
                "backward seed",
                format!("{:?}", out_val.shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, g.matmul_t(wv)?);
                    accumulate(&mut grads, *w, xv.t_matmul(&g)?);
                    let db = g.sum_rows().reshape(shapes[b.0].clone())?;
                    accumulate(&mut grads, *b, db);
                }
                Op::Act(x, act) => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                        *d *= act.derivative(xi, yi);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |u, v| u * v);
                    let db = g.zip_map(self.value(*a), |u, v| u * v);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(&shapes[a.0], s));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len().max(1) as f64;
                    let s = g.data()[0] / n;
                    accumulate(&mut grads, *a, Tensor::full(&shapes[a.0], s));
                }
            }
            // Nodes only feed later nodes, so this adjoint is final.
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Adjoints { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
