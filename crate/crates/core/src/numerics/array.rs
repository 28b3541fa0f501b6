//! Dense row-major f64 arrays and the forward kernels shared by the
//! evaluation and training paths.

use crate::{Error, Result};

/// Dense array of 64-bit floats in row-major order.
///
/// Public constructors reject non-finite entries; internal kernels build
/// results through [`Array::from_raw`], which only debug-checks the shape
/// product.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite value {x} rejected at array construction"
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_raw(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_raw(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for rank-2 arrays; rank-1 arrays count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} array", self.shape.len()),
        }
    }

    /// Column count for rank-1/rank-2 arrays.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} array", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// L2-normalized copy; inputs with norm below 1e-12 come back as zeros.
    pub fn normalized(&self) -> Self {
        let n = self.l2_norm();
        if n < 1e-12 {
            return Self::zeros(&self.shape);
        }
        let data = self.data.iter().map(|x| x / n).collect();
        Self::from_raw(self.shape.clone(), data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }
}

fn dims2(a: &Array) -> (usize, usize) {
    (a.rows(), a.cols())
}

/// `a @ b` for `[m, k] x [k, n]`.
///
/// i-k-j order with the k loop unrolled by four: the `n`-wide accumulator row
/// stays contiguous and gets four fused updates per pass, which matters --
/// this is the hot kernel for batched scoring and training.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, ka) = dims2(a);
    let (kb, n) = dims2(b);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul dimension mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut k = 0;
        while k + 4 <= ka {
            let (a0, a1, a2, a3) = (arow[k], arow[k + 1], arow[k + 2], arow[k + 3]);
            let b0 = &b.data[k * n..k * n + n];
            let b1 = &b.data[(k + 1) * n..(k + 1) * n + n];
            let b2 = &b.data[(k + 2) * n..(k + 2) * n + n];
            let b3 = &b.data[(k + 3) * n..(k + 3) * n + n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            k += 4;
        }
        while k < ka {
            let av = arow[k];
            let brow = &b.data[k * n..k * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
            k += 1;
        }
    }
    Ok(Array::from_raw(out_shape(a, m, n), out))
}

/// `a @ b^T` for `[m, k] x [n, k]`: rows of both operands are contiguous.
pub fn matmul_nt(a: &Array, b: &Array) -> Result<Array> {
    let (m, ka) = dims2(a);
    let (n, kb) = dims2(b);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_nt dimension mismatch: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data[j * kb..(j + 1) * kb];
            *o = dot(arow, brow);
        }
    }
    Ok(Array::from_raw(out_shape(a, m, n), out))
}

/// `a^T @ b` for `[k, m] x [k, n]`, accumulated as a sum of outer products
/// with the k loop unrolled by four.
pub fn matmul_tn(a: &Array, b: &Array) -> Result<Array> {
    let (ka, m) = dims2(a);
    let (kb, n) = dims2(b);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_tn dimension mismatch: {:?}^T x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let mut k = 0;
    while k + 4 <= ka {
        let a0 = &a.data[k * m..k * m + m];
        let a1 = &a.data[(k + 1) * m..(k + 1) * m + m];
        let a2 = &a.data[(k + 2) * m..(k + 2) * m + m];
        let a3 = &a.data[(k + 3) * m..(k + 3) * m + m];
        let b0 = &b.data[k * n..k * n + n];
        let b1 = &b.data[(k + 1) * n..(k + 1) * n + n];
        let b2 = &b.data[(k + 2) * n..(k + 2) * n + n];
        let b3 = &b.data[(k + 3) * n..(k + 3) * n + n];
        for i in 0..m {
            let (x0, x1, x2, x3) = (a0[i], a1[i], a2[i], a3[i]);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
            }
        }
        k += 4;
    }
    while k < ka {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * n..(k + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        k += 1;
    }
    Ok(Array::from_raw(vec![m, n], out))
}

fn out_shape(a: &Array, m: usize, n: usize) -> Vec<usize> {
    // Rank-1 left operands keep rank 1 so vector @ matrix stays a vector.
    if a.shape().len() == 1 && m == 1 {
        vec![n]
    } else {
        vec![m, n]
    }
}

/// Dot product over four independent accumulator lanes (fixed order, so the
/// result is deterministic; the lanes break the serial-add latency chain).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i + 4 <= n {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

/// Numerically stable softmax along `axis` (0 for rank-1; 0 or 1 for rank-2).
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    match (x.shape().len(), axis) {
        (1, 0) | (2, 1) => Ok(softmax_rows(x)),
        (2, 0) => {
            let t = transpose(x);
            Ok(transpose(&softmax_rows(&t)))
        }
        (rank, _) => Err(Error::Shape(format!(
            "softmax axis {axis} invalid for rank-{rank} array"
        ))),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array) -> Array {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Array::from_raw(x.shape().to_vec(), out)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Array) -> Array {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - log_z;
        }
    }
    Array::from_raw(x.shape().to_vec(), out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization: zero mean, unit variance (epsilon inside the
/// square root), then elementwise gain and bias.
pub fn layer_norm_rows(x: &Array, gain: &Array, bias: &Array) -> Result<Array> {
    let (r, c) = (x.rows(), x.cols());
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::Shape(format!(
            "layer_norm expects gain/bias of width {c}, got {} and {}",
            gain.numel(),
            bias.numel()
        )));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let (mean, var) = mean_var(row);
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((o, &v), (&g, &b)) in orow
            .iter_mut()
            .zip(row)
            .zip(gain.data().iter().zip(bias.data()))
        {
            *o = (v - mean) * inv * g + b;
        }
    }
    Ok(Array::from_raw(x.shape().to_vec(), out))
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn transpose(x: &Array) -> Array {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data[i * c + j];
        }
    }
    Array::from_raw(vec![c, r], out)
}

/// Stack equal-length rank-1 rows into a rank-2 array.
pub fn stack_rows(rows: &[&[f64]]) -> Result<Array> {
    let n = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || n == 0 {
        return Err(Error::Shape("stack_rows needs at least one nonempty row".into()));
    }
    let mut data = Vec::with_capacity(rows.len() * n);
    for r in rows {
        if r.len() != n {
            return Err(Error::Shape(format!(
                "stack_rows row length {} != {n}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Ok(Array::from_raw(vec![rows.len(), n], data))
}
