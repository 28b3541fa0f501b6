//! Wengert tape: reverse-mode differentiation via operation recording.
//!
//! The forward pass pushes one node per operation onto a linear tape; the
//! backward pass walks the tape in reverse and accumulates gradients through
//! the chain rule. Tapes are rebuilt per training step (define-by-run), hold
//! no globals, and separate tapes may run on separate threads.

use super::array::{
    self, dot, gelu, gelu_derivative, mean_var, sigmoid, Array, LAYER_NORM_EPS,
};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Whether a leaf is a trainable parameter, a frozen input, or the result of
/// an operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Parameter,
    Input,
    Intermediate,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    /// a @ b^T
    MatmulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    /// c - x
    RsubConst(Var),
    PowConst(Var, f64),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var },
    /// Broadcast-multiply by a one-element node.
    MulScalarV { x: Var, s: Var },
    /// Broadcast-add a one-element node.
    AddScalarV { x: Var, s: Var },
    SumAll(Var),
    MeanAll(Var),
    StackRows(Vec<Var>),
    Transpose(Var),
    Flatten(Var),
    SliceRange { x: Var, start: usize },
}

struct Node {
    value: Array,
    grad: Option<Array>,
    role: Role,
    op: Op,
}

/// Linear operation tape. All recorded values are f64 arrays; gradients are
/// allocated lazily during [`Tape::backward`].
#[derive(Default)]
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

    fn push(&mut self, value: Array, role: Role, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            role,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable parameter leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Role::Parameter, Op::Leaf)
    }

    /// Record a frozen input leaf.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Role::Input, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn role(&self, v: Var) -> Role {
        self.nodes[v.0].role
    }

    /// Gradient of the last `backward` target with respect to `v`; zeros if
    /// the node was never reached.
    pub fn grad(&self, v: Var) -> Array {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Array::zeros(self.nodes[v.0].value.shape()),
        }
    }

    /// Clear all gradients back to the all-zeros state.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = array::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Role::Intermediate, Op::Matmul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = array::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Role::Intermediate, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, |x, y| x + y)?;
        Ok(self.push(v, Role::Intermediate, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, |x, y| x - y)?;
        Ok(self.push(v, Role::Intermediate, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, |x, y| x * y)?;
        Ok(self.push(v, Role::Intermediate, Op::Mul(a, b)))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Array::from_raw(va.shape().to_vec(), data))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| -v);
        self.push(v, Role::Intermediate, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Role::Intermediate, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v + c);
        self.push(v, Role::Intermediate, Op::AddConst(x))
    }

    /// c - x
    pub fn rsub_const(&mut self, c: f64, x: Var) -> Var {
        let v = self.value(x).map(|v| c - v);
        self.push(v, Role::Intermediate, Op::RsubConst(x))
    }

    pub fn pow_const(&mut self, x: Var, e: f64) -> Var {
        let v = self.value(x).map(|v| v.powf(e));
        self.push(v, Role::Intermediate, Op::PowConst(x, e))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Role::Intermediate, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Role::Intermediate, Op::Ln(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Role::Intermediate, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Role::Intermediate, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Role::Intermediate, Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(v, Role::Intermediate, Op::Clamp(x, lo, hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = array::softmax_rows(self.value(x));
        self.push(v, Role::Intermediate, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = array::log_softmax_rows(self.value(x));
        self.push(v, Role::Intermediate, Op::LogSoftmaxRows(x))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = array::layer_norm_rows(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(v, Role::Intermediate, Op::LayerNormRows { x, gain, bias }))
    }

    pub fn mul_scalar_v(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar(s)?;
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v * sv);
        Ok(self.push(v, Role::Intermediate, Op::MulScalarV { x, s }))
    }

    pub fn add_scalar_v(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar(s)?;
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v + sv);
        Ok(self.push(v, Role::Intermediate, Op::AddScalarV { x, s }))
    }

    fn check_scalar(&self, s: Var) -> Result<()> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!(
                "scalar operand must have one element, got {:?}",
                self.value(s).shape()
            )));
        }
        Ok(())
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array::scalar(self.value(x).data().iter().sum());
        self.push(v, Role::Intermediate, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let v = Array::scalar(self.value(x).data().iter().sum::<f64>() / n);
        self.push(v, Role::Intermediate, Op::MeanAll(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = array::transpose(self.value(x));
        self.push(v, Role::Intermediate, Op::Transpose(x))
    }

    /// View as rank-1.
    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let v = Array::from_raw(vec![n], self.value(x).data().to_vec());
        self.push(v, Role::Intermediate, Op::Flatten(x))
    }

    /// Contiguous sub-range of a rank-1 node.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if src.shape().len() != 1 || start + len > src.numel() {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) out of range for {:?}",
                src.shape()
            )));
        }
        let v = Array::from_raw(vec![len], src.data()[start..start + len].to_vec());
        Ok(self.push(v, Role::Intermediate, Op::SliceRange { x, start }))
    }

    /// Stack rank-1 nodes of equal length into a rank-2 node.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let slices: Vec<&[f64]> = rows.iter().map(|&r| self.value(r).data()).collect();
        let v = array::stack_rows(&slices)?;
        Ok(self.push(v, Role::Intermediate, Op::StackRows(rows.to_vec())))
    }

    /// Seed the gradient of a one-element `loss` node with 1 and propagate
    /// backward through the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("backward on non-finite loss".into()));
        }
        self.nodes[loss.0].grad = Some(Array::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Array) {
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn step_backward(&mut self, idx: usize, grad: &Array) {
        // The op is simple enough to match by value; parents are Vars.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let da = array::matmul_nt(grad, self.value(b)).expect("matmul backward");
                let db = array::matmul_tn(self.value(a), grad).expect("matmul backward");
                let db = reshape_like(db, self.value(b));
                self.accumulate(a, reshape_like(da, self.value(a)));
                self.accumulate(b, db);
            }
            Op::MatmulNT(a, b) => {
                let (a, b) = (*a, *b);
                let da = array::matmul(grad, self.value(b)).expect("matmul_nt backward");
                let db = array::matmul_tn(grad, self.value(a)).expect("matmul_nt backward");
                self.accumulate(a, reshape_like(da, self.value(a)));
                self.accumulate(b, reshape_like(db, self.value(b)));
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad.clone());
                self.accumulate(b, grad.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = elementwise(grad, self.value(b), |g, y| g * y);
                let db = elementwise(grad, self.value(a), |g, x| g * x);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Neg(x) => {
                let x = *x;
                self.accumulate(x, grad.map(|g| -g));
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.accumulate(x, grad.map(|g| g * c));
            }
            Op::AddConst(x) => {
                let x = *x;
                self.accumulate(x, grad.clone());
            }
            Op::RsubConst(x) => {
                let x = *x;
                self.accumulate(x, grad.map(|g| -g));
            }
            Op::PowConst(x, e) => {
                let (x, e) = (*x, *e);
                let dx = elementwise(grad, self.value(x), |g, v| {
                    if e == 0.0 {
                        0.0
                    } else {
                        g * e * v.powf(e - 1.0)
                    }
                });
                self.accumulate(x, dx);
            }
            Op::Exp(x) => {
                let x = *x;
                let dx = elementwise(grad, &self.nodes[idx].value, |g, y| g * y);
                self.accumulate(x, dx);
            }
            Op::Ln(x) => {
                let x = *x;
                let dx = elementwise(grad, self.value(x), |g, v| g / v);
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let dx = elementwise(grad, &self.nodes[idx].value, |g, s| g * s * (1.0 - s));
                self.accumulate(x, dx);
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx = elementwise(grad, self.value(x), |g, v| g * gelu_derivative(v));
                self.accumulate(x, dx);
            }
            Op::Relu(x) => {
                let x = *x;
                let dx = elementwise(grad, self.value(x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let dx = elementwise(grad, self.value(x), |g, v| {
                    if v > lo && v < hi {
                        g
                    } else {
                        0.0
                    }
                });
                self.accumulate(x, dx);
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let s = &self.nodes[idx].value;
                let (r, c) = (s.rows(), s.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let srow = &s.data()[i * c..(i + 1) * c];
                    let grow = &grad.data()[i * c..(i + 1) * c];
                    let inner = dot(grow, srow);
                    for j in 0..c {
                        dx[i * c + j] = srow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(x, Array::from_raw(s.shape().to_vec(), dx));
            }
            Op::LogSoftmaxRows(x) => {
                let x = *x;
                let lsm = &self.nodes[idx].value;
                let (r, c) = (lsm.rows(), lsm.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let lrow = &lsm.data()[i * c..(i + 1) * c];
                    let grow = &grad.data()[i * c..(i + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = grow[j] - lrow[j].exp() * gsum;
                    }
                }
                self.accumulate(x, Array::from_raw(lsm.shape().to_vec(), dx));
            }
            Op::LayerNormRows { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.value(x);
                let gv = self.value(gain);
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = &xv.data()[i * c..(i + 1) * c];
                    let grow = &grad.data()[i * c..(i + 1) * c];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv; out_j = xhat_j * g_j + b_j
                    let mut sum_gg = 0.0; // sum_j grad_j * g_j
                    let mut sum_ggx = 0.0; // sum_j grad_j * g_j * xhat_j
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        sum_gg += grow[j] * gv.data()[j];
                        sum_ggx += grow[j] * gv.data()[j] * xhat;
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        dx[i * c + j] = inv
                            * (grow[j] * gv.data()[j] - sum_gg / n - xhat * sum_ggx / n);
                    }
                }
                let xshape = xv.shape().to_vec();
                let gshape = gv.shape().to_vec();
                self.accumulate(x, Array::from_raw(xshape, dx));
                self.accumulate(gain, Array::from_raw(gshape.clone(), dgain));
                self.accumulate(bias, Array::from_raw(gshape, dbias));
            }
            Op::MulScalarV { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.value(s).item();
                let ds: f64 = grad
                    .data()
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, v)| g * v)
                    .sum();
                self.accumulate(x, grad.map(|g| g * sv));
                self.accumulate(s, Array::scalar(ds));
            }
            Op::AddScalarV { x, s } => {
                let (x, s) = (*x, *s);
                let ds: f64 = grad.data().iter().sum();
                self.accumulate(x, grad.clone());
                self.accumulate(s, Array::scalar(ds));
            }
            Op::SumAll(x) => {
                let x = *x;
                let g = grad.item();
                let dx = Array::full(self.value(x).shape(), g);
                self.accumulate(x, dx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.value(x).numel() as f64;
                let dx = Array::full(self.value(x).shape(), grad.item() / n);
                self.accumulate(x, dx);
            }
            Op::StackRows(rows) => {
                let rows = rows.clone();
                let c = grad.cols();
                for (i, r) in rows.into_iter().enumerate() {
                    let slice = grad.data()[i * c..(i + 1) * c].to_vec();
                    let shape = self.value(r).shape().to_vec();
                    self.accumulate(r, Array::from_raw(shape, slice));
                }
            }
            Op::Transpose(x) => {
                let x = *x;
                self.accumulate(x, array::transpose(grad));
            }
            Op::Flatten(x) => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Array::from_raw(shape, grad.data().to_vec()));
            }
            Op::SliceRange { x, start } => {
                let (x, start) = (*x, *start);
                let mut dx = Array::zeros(self.value(x).shape());
                dx.data_mut()[start..start + grad.numel()].copy_from_slice(grad.data());
                self.accumulate(x, dx);
            }
        }
    }
}

fn elementwise(g: &Array, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    debug_assert_eq!(g.numel(), other.numel());
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::from_raw(other.shape().to_vec(), data)
}

/// Gradients of matmul variants may come out rank-2 where the forward operand
/// was rank-1; restore the operand's shape.
fn reshape_like(a: Array, like: &Array) -> Array {
    if a.shape() == like.shape() {
        a
    } else {
        debug_assert_eq!(a.numel(), like.numel());
        Array::from_raw(like.shape().to_vec(), a.into_data())
    }
}
