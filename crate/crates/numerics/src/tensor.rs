use rand::Rng;

use crate::real::{cst, Real};
use crate::{shape_err, Result, TensorError};

/// Variance epsilon inside layer-norm's square root.
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp on probabilities inside cross-entropy.
pub const CE_CLAMP: f64 = 1e-12;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of the tensor viewed as a matrix over its last dimension.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last dimension (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(shape_err(
                "transpose",
                format!("need 2-D, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn matrix_dims<F: Real>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected 2-D operand, got {s:?}"))),
    }
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    F::gemm(
        m,
        k,
        n,
        a.data(),
        false,
        b.data(),
        false,
        out.data_mut(),
        false,
    );
    Ok(out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.is_empty() {
        return Ok(Tensor::scalar(F::one()));
    }
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op: "softmax",
            detail: format!("axis {axis} for shape {shape:?}"),
        });
    }
    let len = shape[axis];
    if len == 0 {
        return Err(TensorError::Invalid {
            op: "softmax",
            detail: "empty axis".into(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| data[idx(j)])
                .fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                data[idx(j)] /= total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_rows_in_place<F: Real>(data: &mut [F], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_mut(cols) {
        softmax_slice(row);
    }
}

pub(crate) fn softmax_slice<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) struct LayerNormOut<F> {
    pub y: Tensor<F>,
    pub normalized: Vec<F>,
    pub inv_std: Vec<F>,
}

pub(crate) fn layer_norm_forward<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<LayerNormOut<F>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(shape_err(
            "layer_norm",
            format!("width {c}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let eps = cst::<F>(LN_EPS);
    let n = cst::<F>(c as f64);
    let rows = x.len().checked_div(c).unwrap_or(0);
    let mut y = x.clone();
    let mut normalized = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let out = y.row_mut(r);
        for j in 0..c {
            let h = (row[j] - mean) * is;
            normalized[r * c + j] = h;
            out[j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormOut {
        y,
        normalized,
        inv_std,
    })
}

/// Per-vector layer normalisation over the last dimension, then `gain·x̂ + bias`.
pub fn layer_norm<F: Real>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    layer_norm_forward(x, gain, bias).map(|o| o.y)
}

pub fn leaky_relu<F: Real>(x: &Tensor<F>, slope: F) -> Tensor<F> {
    x.map(|v| if v >= F::zero() { v } else { slope * v })
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Vec<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid {
            op: "dropout",
            detail: format!("rate {rate} outside [0,1)"),
        });
    }
    let keep = cst::<F>(1.0 / (1.0 - rate));
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect())
}

pub fn dropout<F: Real, R: Rng + ?Sized>(
    x: &Tensor<F>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid {
            op: "dropout",
            detail: format!("rate {rate} outside [0,1)"),
        });
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<F, R>(x.len(), rate, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(out)
}

/// `-ln(max(probs[target], 1e-12))` for a single distribution.
pub fn cross_entropy<F: Real>(probs: &Tensor<F>, target: usize) -> Result<F> {
    let p = *probs.data().get(target).ok_or(TensorError::Index {
        op: "cross_entropy",
        index: target,
        bound: probs.len(),
    })?;
    Ok(-p.max(cst(CE_CLAMP)).ln())
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform Glorot initialisation of a 2-D weight matrix.
pub fn glorot_init<F: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<F>> {
    let [fan_in, fan_out] = shape else {
        return Err(shape_err(
            "glorot_init",
            format!("need 2-D shape, got {shape:?}"),
        ));
    };
    let bound = glorot_bound(*fan_in, *fan_out);
    Ok(Tensor::from_fn(shape, |_| {
        cst(rng.random_range(-bound..bound))
    }))
}
