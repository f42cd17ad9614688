//! Trainable tensors and the per-pass binding of those tensors to a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemata_numerics::{dropout_mask, glorot_init, Gradients, Real, Tape, Tensor, Var};

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order. The order is the
/// checkpoint layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let t = glorot_init(shape, rng)?;
        Ok(self.add(name, t))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One forward pass: a fresh tape with parameters bound lazily.
///
/// In training mode parameters are differentiable and dropout draws from
/// the pass's own generator; in eval mode parameters are constants and
/// dropout is the identity.
pub struct Forward<'a, F: Real> {
    pub tape: Tape<F>,
    params: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    differentiable: bool,
}

impl<'a, F: Real> Forward<'a, F> {
    pub fn eval(params: &'a ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            rng: None,
            differentiable: false,
        }
    }

    pub fn train(params: &'a ParamStore<F>, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            differentiable: true,
        }
    }

    /// Eval-mode semantics (no dropout) with differentiable parameters.
    pub fn differentiable_eval(params: &'a ParamStore<F>) -> Self {
        Self {
            differentiable: true,
            ..Self::eval(params)
        }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.tape.leaf(value, self.differentiable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask::<F, _>(self.tape.value(x).len(), rate, rng)?;
        Ok(self.tape.mul_const(x, mask)?)
    }

    /// Gradients aligned with the parameter store; unused parameters get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.glorot(format!("{name}.weight"), &[inputs, outputs], rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Ok(Self { weight, bias })
    }

    pub fn forward<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let w = fx.param(self.weight);
        let b = fx.param(self.bias);
        let y = fx.tape.matmul(x, w)?;
        Ok(fx.tape.add_bias(y, b)?)
    }
}

/// Learned gain and bias of one layer-norm instance.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[width], F::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn forward<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let g = fx.param(self.gain);
        let b = fx.param(self.bias);
        Ok(fx.tape.layer_norm(x, g, b)?)
    }
}

/// Two affine layers with a leaky-ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub first: Linear,
    pub second: Linear,
    pub slope: f64,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        widths: [usize; 3],
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let first = Linear::new(store, &format!("{name}.0"), widths[0], widths[1], rng)?;
        let second = Linear::new(store, &format!("{name}.1"), widths[1], widths[2], rng)?;
        Ok(Self {
            first,
            second,
            slope,
        })
    }

    pub fn forward<F: Real>(&self, fx: &mut Forward<'_, F>, x: Var) -> Result<Var> {
        let h = self.first.forward(fx, x)?;
        let h = fx.tape.leaky_relu(h, schemata_numerics::cst(self.slope))?;
        self.second.forward(fx, h)
    }
}
