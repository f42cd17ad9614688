//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one record to the tape holding its output value
//! and whatever it saved for the backward pass. [`Tape::backward`] walks the
//! records once, newest first.

use std::rc::Rc;

use crate::real::{cst, Real};
use crate::tensor::{layer_norm_forward, matrix_dims, softmax_rows_in_place, Tensor, CE_CLAMP};
use crate::{shape_err, Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: `(inputs, output, output grad) -> input grads`.
pub type CustomBackward<F> = Rc<dyn Fn(&[&Tensor<F>], &Tensor<F>, &Tensor<F>) -> Vec<Tensor<F>>>;

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    LeakyRelu(Var, F),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<F>,
        inv_std: Vec<F>,
    },
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    ScaleRows(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ReplaceRows(Var, Vec<usize>),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
    },
    Sum(Var),
    Custom(Vec<Var>, CustomBackward<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every recorded value.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input: gradients are tracked through it.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<F>,
        op: Op<F>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_t")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            out.data_mut(),
            false,
        );
        self.push("matmul_t", out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(shape_err(
                "add_bias",
                format!("width {c}, bias {}", vb.len()),
            ));
        }
        let mut out = vx.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant of the same length (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<F>) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.len() {
            return Err(shape_err(
                "mul_const",
                format!("{} values, {} factors", vx.len(), factors.len()),
            ));
        }
        let mut out = vx.clone();
        for (o, &f) in out.data_mut().iter_mut().zip(&factors) {
            *o *= f;
        }
        self.push("mul_const", out, Op::MulConst(x, factors), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        let out = crate::tensor::leaky_relu(self.value(x), slope);
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if c == 0 && !vx.is_empty() {
            return Err(TensorError::Invalid {
                op: "softmax",
                detail: "empty axis".into(),
            });
        }
        let mut out = vx.clone();
        softmax_rows_in_place(out.data_mut(), c);
        self.push("softmax", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let o = layer_norm_forward(self.value(x), self.value(gain), self.value(bias))?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized: o.normalized,
            inv_std: o.inv_std,
        };
        self.push("layer_norm", o.y, op, &[x, gain, bias])
    }

    /// Selects rows `idx` of a 2-D value (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = matrix_dims(vx, "gather_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push("gather_rows", out, Op::GatherRows(x, idx), &[x])
    }

    /// Sums row `e` of `x` into output row `idx[e]`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<[usize]>, n: usize) -> Result<Var> {
        let vx = self.value(x);
        let (e, c) = matrix_dims(vx, "scatter_add_rows")?;
        if e != idx.len() {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{e} rows, {} indices", idx.len()),
            ));
        }
        let mut out = Tensor::zeros(&[n, c]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Index {
                    op: "scatter_add_rows",
                    index: i,
                    bound: n,
                });
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        self.push("scatter_add_rows", out, Op::ScatterAddRows(x, idx), &[x])
    }

    /// Softmax of scores grouped by `segment[e] < n_segments`.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segment: Rc<[usize]>,
        n_segments: usize,
    ) -> Result<Var> {
        let vs = self.value(scores);
        if vs.len() != segment.len() {
            return Err(shape_err(
                "segment_softmax",
                format!("{} scores, {} segment ids", vs.len(), segment.len()),
            ));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(TensorError::Index {
                op: "segment_softmax",
                index: bad,
                bound: n_segments,
            });
        }
        let mut max = vec![F::neg_infinity(); n_segments];
        for (&v, &s) in vs.data().iter().zip(segment.iter()) {
            max[s] = max[s].max(v);
        }
        let mut out = vs.clone();
        let mut total = vec![F::zero(); n_segments];
        for (o, &s) in out.data_mut().iter_mut().zip(segment.iter()) {
            *o = (*o - max[s]).exp();
            total[s] += *o;
        }
        for (o, &s) in out.data_mut().iter_mut().zip(segment.iter()) {
            *o /= total[s];
        }
        self.push(
            "segment_softmax",
            out,
            Op::SegmentSoftmax(scores, segment, n_segments),
            &[scores],
        )
    }

    /// Multiplies row `e` of `x` by `s[e]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let (e, c) = matrix_dims(vx, "scale_rows")?;
        if vs.len() != e {
            return Err(shape_err(
                "scale_rows",
                format!("{e} rows, {} scales", vs.len()),
            ));
        }
        let mut out = vx.clone();
        if c > 0 {
            for (row, &f) in out.data_mut().chunks_mut(c).zip(vs.data()) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        self.push("scale_rows", out, Op::ScaleRows(x, s), &[x, s])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        };
        let (_, c) = matrix_dims(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = matrix_dims(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("widths {c} and {pc}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = matrix_dims(vx, "slice_rows")?;
        if start > end || end > n {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {n} rows"),
            ));
        }
        let out = Tensor::new(vec![end - start, c], vx.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(x, start), &[x])
    }

    /// Overwrites `rows` of `x` with constant `values` (one row each); no
    /// gradient flows through the overwritten rows.
    pub fn replace_rows(&mut self, x: Var, rows: Vec<usize>, values: &Tensor<F>) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = matrix_dims(vx, "replace_rows")?;
        if values.len() != rows.len() * c {
            return Err(shape_err(
                "replace_rows",
                format!("{} rows of width {c}, {} values", rows.len(), values.len()),
            ));
        }
        let mut out = vx.clone();
        for (k, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(TensorError::Index {
                    op: "replace_rows",
                    index: r,
                    bound: n,
                });
            }
            out.row_mut(r)
                .copy_from_slice(&values.data()[k * c..(k + 1) * c]);
        }
        self.push("replace_rows", out, Op::ReplaceRows(x, rows), &[x])
    }

    /// `Σ_r w_r · -ln(max(p[r, t_r], 1e-12))` over the rows of a probability matrix.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let vp = self.value(probs);
        let (r, c) = matrix_dims(vp, "cross_entropy")?;
        if targets.len() != r || weights.len() != r {
            return Err(shape_err(
                "cross_entropy",
                format!(
                    "{r} rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let clamp = cst::<F>(CE_CLAMP);
        let mut total = F::zero();
        for (row, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            total += -w * vp.at(row, t).max(clamp).ln();
        }
        let op = Op::CrossEntropy {
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push("cross_entropy", Tensor::scalar(total), op, &[probs])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        backward: CustomBackward<F>,
    ) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom(inputs.to_vec(), backward),
            inputs,
        )
    }

    /// Differentiates the scalar `loss` with respect to every value recorded before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter()) {
            if let Some(g) = slot {
                if !g.all_finite() && node.requires_grad {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    F::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        true,
                        ga.data_mut(),
                        false,
                    );
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    F::gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        true,
                        g.data(),
                        false,
                        gb.data_mut(),
                        false,
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    F::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        vb.data(),
                        false,
                        ga.data_mut(),
                        false,
                    );
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(&[n, k]);
                    F::gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        true,
                        va.data(),
                        false,
                        gb.data_mut(),
                        false,
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let vb = self.value(*b);
                    let c = vb.len();
                    let mut gb = Tensor::zeros(vb.shape());
                    if c > 0 {
                        for row in g.data().chunks(c) {
                            for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(
                        grads,
                        *a,
                        Tensor::new(va.shape().to_vec(), d).expect("shape"),
                    );
                }
                if self.wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(
                        grads,
                        *b,
                        Tensor::new(vb.shape().to_vec(), d).expect("shape"),
                    );
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::MulConst(x, factors) => {
                let mut gx = g.clone();
                for (o, &f) in gx.data_mut().iter_mut().zip(factors) {
                    *o *= f;
                }
                accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(vx.data()) {
                    if v < F::zero() {
                        *o *= *slope;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut gx = g.clone();
                if c > 0 {
                    for (gr, yr) in gx.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (gv, &y) in gr.iter_mut().zip(yr) {
                            *gv = y * (*gv - dot);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let vg = self.value(*gain);
                let c = vg.len();
                let rows = inv_std.len();
                let n = cst::<F>(c as f64);
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let mut gh = vec![F::zero(); c];
                    for r in 0..rows {
                        let go = &g.data()[r * c..(r + 1) * c];
                        let xh = &normalized[r * c..(r + 1) * c];
                        for j in 0..c {
                            gh[j] = go[j] * vg.data()[j];
                        }
                        let mean_gh = gh.iter().copied().sum::<F>() / n;
                        let mean_ghx = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
                        let dst = gx.row_mut(r);
                        for j in 0..c {
                            dst[j] = inv_std[r] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gain) {
                    let mut gg = Tensor::zeros(vg.shape());
                    for (i, (&go, &xh)) in g.data().iter().zip(normalized).enumerate() {
                        gg.data_mut()[i % c] += go * xh;
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for (i, &go) in g.data().iter().enumerate() {
                        gb.data_mut()[i % c] += go;
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ScatterAddRows(x, idx) => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    gx.row_mut(r).copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentSoftmax(x, segment, n_segments) => {
                let mut dot = vec![F::zero(); *n_segments];
                for ((&gv, &y), &s) in g.data().iter().zip(out.data()).zip(segment.iter()) {
                    dot[s] += gv * y;
                }
                let mut gx = g.clone();
                for ((o, &y), &s) in gx.data_mut().iter_mut().zip(out.data()).zip(segment.iter()) {
                    *o = y * (*o - dot[s]);
                }
                accumulate(grads, *x, gx);
            }
            Op::ScaleRows(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let c = vx.cols();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    if c > 0 {
                        for (row, &f) in gx.data_mut().chunks_mut(c).zip(vs.data()) {
                            row.iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*s) {
                    let mut gs = Tensor::zeros(vs.shape());
                    for (e, o) in gs.data_mut().iter_mut().enumerate() {
                        *o = g.row(e).iter().zip(vx.row(e)).map(|(&a, &b)| a * b).sum();
                    }
                    accumulate(grads, *s, gs);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let gp = Tensor::new(
                            self.value(p).shape().to_vec(),
                            g.data()[offset..offset + len].to_vec(),
                        )
                        .expect("shape");
                        accumulate(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut gx = Tensor::zeros(vx.shape());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::ReplaceRows(x, rows) => {
                let mut gx = g.clone();
                for &r in rows {
                    gx.row_mut(r).iter_mut().for_each(|v| *v = F::zero());
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                probs,
                targets,
                weights,
            } => {
                let vp = self.value(*probs);
                let clamp = cst::<F>(CE_CLAMP);
                let go = g.item();
                let mut gp = Tensor::zeros(vp.shape());
                let c = vp.cols();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let p = vp.at(r, t);
                    if p > clamp {
                        gp.data_mut()[r * c + t] = -go * w / p;
                    }
                }
                accumulate(grads, *probs, gp);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                accumulate(grads, *x, Tensor::full(vx.shape(), g.item()));
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let input_grads = backward(&values, out, g);
                for (&v, gv) in inputs.iter().zip(input_grads) {
                    if self.wants(v) {
                        accumulate(grads, v, gv);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_sum_gradient_is_row_and_column_sums() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[1, 2], &[1., 2.]));
        let b = tape.param(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3., 4.]);
        assert_eq!(g.get(b).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.param(t(&[2], &[3., 4.]));
        let c = tape.mul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[f64::MAX]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[0.; 6]));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.backward(a).is_err());
        assert!(tape.slice_rows(a, 1, 3).is_err());
        let i: Rc<[usize]> = Rc::from(vec![2usize]);
        assert!(tape.gather_rows(a, i).is_err());
    }

    #[test]
    fn segment_softmax_normalises_each_segment() {
        let mut tape = Tape::new();
        let e = tape.param(t(&[5, 1], &[1., 2., 3., 0.5, -1.]));
        let seg: Rc<[usize]> = Rc::from(vec![0usize, 0, 1, 2, 2]);
        let a = tape.segment_softmax(e, seg, 4).unwrap();
        let v = tape.value(a).data();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert_eq!(v[2], 1.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }
}
