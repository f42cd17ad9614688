use crate::real::{cst, Real};
use crate::{shape_err, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if let Some(g) = g {
                if g.shape() != p.shape() || m.shape() != p.shape() {
                    return Err(shape_err(
                        "adam_step",
                        format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                    ));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2, eps): (F, F, F) = (cst(beta1), cst(beta2), cst(epsilon));
        let (step_size, inv_c2): (F, F) = (cst(lr / c1), cst(1.0 / c2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in params[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v)
            {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<F: Real>(
        &self,
        params: &mut [Tensor<F>],
        grads: &[Option<Tensor<F>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "sgd_step",
                format!("{} params, {} grads", params.len(), grads.len()),
            ));
        }
        let lr = cst::<F>(self.lr);
        for (p, g) in params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(shape_err(
                    "sgd_step",
                    format!("param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<F> {
    Adam(Adam<F>),
    Sgd(Sgd),
}

impl<F: Real> Optimizer<F> {
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd(s) => s.step(params, grads),
        }
    }
}
