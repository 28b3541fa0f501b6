//! Compute-context abstraction: the model forward pass is written once and
//! runs either on plain arrays (inference) or on a [`Tape`] (training), so the
//! two paths cannot diverge numerically.

use std::sync::Arc;

use super::array::{self, Array};
use super::tape::{Tape, Var};
use crate::Result;

/// The operation set the alignment model needs from a compute backend.
pub trait Ctx {
    type V: Clone;

    /// Bring a frozen array into the context.
    fn lift(&mut self, a: &Array) -> Self::V;
    fn value(&self, v: &Self::V) -> Array;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// a @ b^T
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f64) -> Self::V;
    fn softmax_rows(&mut self, x: &Self::V) -> Self::V;
    fn layer_norm_rows(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V)
        -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn exp(&mut self, x: &Self::V) -> Self::V;
    fn mul_scalar_v(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn add_scalar_v(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn stack_rows(&mut self, rows: &[Self::V]) -> Result<Self::V>;
}

/// Plain-array backend for inference. Values are `Arc<Array>` so lifted
/// weights can be shared across calls and threads without copying.
#[derive(Default, Clone, Copy)]
pub struct EvalCtx;

impl Ctx for EvalCtx {
    type V = Arc<Array>;

    fn lift(&mut self, a: &Array) -> Self::V {
        Arc::new(a.clone())
    }

    fn value(&self, v: &Self::V) -> Array {
        v.as_ref().clone()
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Arc::new(array::matmul(a, b)?))
    }

    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Arc::new(array::matmul_nt(a, b)?))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        if a.shape() != b.shape() {
            return Err(crate::Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(Arc::new(Array::from_raw(a.shape().to_vec(), data)))
    }

    fn scale(&mut self, x: &Self::V, c: f64) -> Self::V {
        Arc::new(x.map(|v| v * c))
    }

    fn softmax_rows(&mut self, x: &Self::V) -> Self::V {
        Arc::new(array::softmax_rows(x))
    }

    fn layer_norm_rows(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        bias: &Self::V,
    ) -> Result<Self::V> {
        Ok(Arc::new(array::layer_norm_rows(x, gain, bias)?))
    }

    fn gelu(&mut self, x: &Self::V) -> Self::V {
        Arc::new(x.map(array::gelu))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        Arc::new(x.map(array::sigmoid))
    }

    fn exp(&mut self, x: &Self::V) -> Self::V {
        Arc::new(x.map(f64::exp))
    }

    fn mul_scalar_v(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        let sv = s.item();
        Ok(Arc::new(x.map(|v| v * sv)))
    }

    fn add_scalar_v(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        let sv = s.item();
        Ok(Arc::new(x.map(|v| v + sv)))
    }

    fn stack_rows(&mut self, rows: &[Self::V]) -> Result<Self::V> {
        let slices: Vec<&[f64]> = rows.iter().map(|r| r.data()).collect();
        Ok(Arc::new(array::stack_rows(&slices)?))
    }
}

impl Ctx for Tape {
    type V = Var;

    fn lift(&mut self, a: &Array) -> Self::V {
        self.input(a.clone())
    }

    fn value(&self, v: &Self::V) -> Array {
        Tape::value(self, *v).clone()
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Tape::matmul(self, *a, *b)
    }

    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Tape::matmul_nt(self, *a, *b)
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Tape::add(self, *a, *b)
    }

    fn scale(&mut self, x: &Self::V, c: f64) -> Self::V {
        Tape::scale(self, *x, c)
    }

    fn softmax_rows(&mut self, x: &Self::V) -> Self::V {
        Tape::softmax_rows(self, *x)
    }

    fn layer_norm_rows(
        &mut self,
        x: &Self::V,
        gain: &Self::V,
        bias: &Self::V,
    ) -> Result<Self::V> {
        Tape::layer_norm_rows(self, *x, *gain, *bias)
    }

    fn gelu(&mut self, x: &Self::V) -> Self::V {
        Tape::gelu(self, *x)
    }

    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        Tape::sigmoid(self, *x)
    }

    fn exp(&mut self, x: &Self::V) -> Self::V {
        Tape::exp(self, *x)
    }

    fn mul_scalar_v(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        Tape::mul_scalar_v(self, *x, *s)
    }

    fn add_scalar_v(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V> {
        Tape::add_scalar_v(self, *x, *s)
    }

    fn stack_rows(&mut self, rows: &[Self::V]) -> Result<Self::V> {
        Tape::stack_rows(self, rows)
    }
}
