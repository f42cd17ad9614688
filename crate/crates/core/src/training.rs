//! IC + ICP multi-task training with scheduled sampling.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemata_numerics::{cst, Adam, AdamConfig, Optimizer, Real, Sgd, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::data::{KbTriple, Vocabulary};
use crate::model::Model;
use crate::params::Forward;
use crate::schema::{
    assimilate_batch, kb_assimilate, AssimilationTrace, Distributions, ScheduledSampler,
};
use crate::srg::{SceneBatch, SceneInput};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Assimilation steps unrolled during training (`T`).
    pub assimilations: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Triples per knowledge-base batch.
    pub kb_batch_size: usize,
    pub epochs: usize,
    pub max_rate: f64,
    /// Epoch at which the replacement rate reaches `max_rate`; `None` means
    /// a third of `epochs`.
    pub ramp_end: Option<f64>,
    /// Weight of the step-0 loss.
    pub ic_weight: f64,
    /// Weight of each post-injection step loss, image and knowledge-base alike.
    pub icp_weight: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            assimilations: 4,
            lr: 1e-5,
            batch_size: 14,
            kb_batch_size: 14,
            epochs: 24,
            max_rate: 0.1,
            ramp_end: None,
            ic_weight: 1.0,
            icp_weight: 1.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_rate) {
            return Err(Error::invalid(format!(
                "max_rate {} outside [0, 1]",
                self.max_rate
            )));
        }
        if self.batch_size == 0 || self.kb_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.ic_weight < 0.0 || self.icp_weight < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn step_weight(&self, step: usize) -> f64 {
        if step == 0 {
            self.ic_weight
        } else {
            self.icp_weight
        }
    }

    fn ramp_end(&self) -> f64 {
        self.ramp_end.unwrap_or(self.epochs as f64 / 3.0)
    }
}

/// Replacement rate for `epoch`: linear from 0 to `max_rate` at the ramp
/// end, constant afterwards.
pub fn ramp(epoch: f64, config: &TrainConfig) -> f64 {
    let end = config.ramp_end();
    if end <= 0.0 {
        return config.max_rate;
    }
    config.max_rate * (epoch / end).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// Object cross-entropy summed and divided by the node count.
    pub objects: f64,
    /// Predicate cross-entropy summed and divided by the node count.
    pub predicates: f64,
}

impl StepLoss {
    pub fn mean(&self) -> f64 {
        self.objects + self.predicates
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub steps: Vec<StepLoss>,
    pub total: f64,
    pub replaced: usize,
    pub nodes: usize,
}

/// Mean cross-entropy of one step over all nodes, objects and predicates
/// pooled with equal weight.
pub fn step_loss<F: Real>(
    fx: &mut Forward<'_, F>,
    dist: Distributions,
    object_labels: &[usize],
    predicate_labels: &[usize],
) -> Result<(Var, StepLoss)> {
    let nodes = object_labels.len() + predicate_labels.len();
    if nodes == 0 {
        return Err(Error::invalid("loss over an empty graph"));
    }
    let ones = |n: usize| vec![F::one(); n];
    let lo = fx
        .tape
        .cross_entropy(dist.objects, object_labels, &ones(object_labels.len()))?;
    let lp = fx.tape.cross_entropy(
        dist.predicates,
        predicate_labels,
        &ones(predicate_labels.len()),
    )?;
    let inv = 1.0 / nodes as f64;
    let part = StepLoss {
        objects: fx.tape.value(lo).item().to_f64().unwrap_or(f64::NAN) * inv,
        predicates: fx.tape.value(lp).item().to_f64().unwrap_or(f64::NAN) * inv,
    };
    let s = fx.tape.add(lo, lp)?;
    Ok((fx.tape.scale(s, cst(inv))?, part))
}

/// Image-based classification loss: the step-0 term alone.
pub fn ic_loss<F: Real>(
    fx: &mut Forward<'_, F>,
    trace: &AssimilationTrace,
    object_labels: &[usize],
    predicate_labels: &[usize],
) -> Result<Var> {
    Ok(step_loss(fx, trace.steps[0].dist, object_labels, predicate_labels)?.0)
}

/// `Σ_t w_t · loss_t` over every step of the trace.
pub fn multi_task_loss<F: Real>(
    fx: &mut Forward<'_, F>,
    trace: &AssimilationTrace,
    object_labels: &[usize],
    predicate_labels: &[usize],
    config: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let mut total: Option<Var> = None;
    let mut report = LossReport {
        nodes: object_labels.len() + predicate_labels.len(),
        ..LossReport::default()
    };
    for (t, step) in trace.steps.iter().enumerate() {
        let (l, part) = step_loss(fx, step.dist, object_labels, predicate_labels)?;
        let w = config.step_weight(t);
        let l = if w == 1.0 {
            l
        } else {
            fx.tape.scale(l, cst(w))?
        };
        report.total += w * part.mean();
        report.steps.push(part);
        total = Some(match total {
            Some(acc) => fx.tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty assimilation trace"))?;
    Ok((total, report))
}

/// A knowledge-base triple resolved to class indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KbExample {
    pub head: usize,
    pub predicate: usize,
    pub tail: usize,
    pub count: f64,
}

pub fn resolve_kb(triples: &[KbTriple], vocab: &Vocabulary) -> Result<Vec<KbExample>> {
    triples
        .iter()
        .map(|t| {
            let lookup = |name: &str, idx: Option<usize>| {
                idx.ok_or_else(|| Error::invalid(format!("unknown class {name:?}")))
            };
            Ok(KbExample {
                head: lookup(&t.head, vocab.object_index(&t.head))?,
                predicate: lookup(&t.predicate, vocab.predicate_index(&t.predicate))?,
                tail: lookup(&t.tail, vocab.object_index(&t.tail))?,
                count: t.count as f64,
            })
        })
        .collect()
}

/// Count-weighted mean predicate cross-entropy of the knowledge-base path.
pub fn kb_loss<F: Real>(
    fx: &mut Forward<'_, F>,
    model: &Model<F>,
    batch: &[KbExample],
) -> Result<(Var, f64)> {
    let pairs: Vec<(usize, usize)> = batch.iter().map(|e| (e.head, e.tail)).collect();
    let probs = kb_assimilate(fx, model, &pairs)?;
    let total: f64 = batch.iter().map(|e| e.count).sum();
    if total <= 0.0 {
        return Err(Error::invalid("knowledge-base batch has no weight"));
    }
    let targets: Vec<usize> = batch.iter().map(|e| e.predicate).collect();
    let weights: Vec<F> = batch.iter().map(|e| cst(e.count / total)).collect();
    let l = fx.tape.cross_entropy(probs, &targets, &weights)?;
    let v = fx.tape.value(l).item().to_f64().unwrap_or(f64::NAN);
    Ok((l, v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub rate: f64,
    /// Node-weighted means over image batches.
    pub steps: Vec<StepLoss>,
    pub total: f64,
    pub replaced: usize,
    pub image_batches: usize,
    /// Count-weighted mean over knowledge-base batches.
    pub kb_loss: Option<f64>,
    pub kb_batches: usize,
}

enum Batch<'a> {
    Images(Vec<usize>),
    Kb(&'a [KbExample]),
}

/// Places `a` and `b` items at fractional positions `(i + ½)/len` and
/// merges them, `a` first on ties.
fn interleave(a: usize, b: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(a + b);
    let (mut i, mut j) = (0, 0);
    while i < a || j < b {
        // (i + ½)/a ≤ (j + ½)/b  ⇔  (2i + 1)·b ≤ (2j + 1)·a
        let take_a = j >= b || (i < a && (2 * i + 1) * b <= (2 * j + 1) * a);
        out.push(take_a);
        if take_a {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

pub struct Trainer<F: Real> {
    pub config: TrainConfig,
    optimizer: Optimizer<F>,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: u64,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: &Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = match config.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(
                AdamConfig {
                    lr: config.lr,
                    ..AdamConfig::default()
                },
                model.params.tensors(),
            )),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr: config.lr }),
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            optimizer,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Optimizer updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn apply(
        &mut self,
        model: &mut Model<F>,
        grads: Vec<Option<schemata_numerics::Tensor<F>>>,
    ) -> Result<()> {
        self.optimizer.step(model.params.tensors_mut(), &grads)?;
        self.steps += 1;
        Ok(())
    }

    /// One optimizer update on an image batch.
    pub fn train_image_batch(
        &mut self,
        model: &mut Model<F>,
        batch: &SceneBatch<F>,
        rate: f64,
    ) -> Result<LossReport> {
        let dropout_seed = self.rng.next_u64();
        let sampler_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
        let (grads, mut report) = {
            let mut fx = Forward::train(&model.params, dropout_seed);
            let mut sampler = ScheduledSampler::new(batch, rate, sampler_rng)?;
            let trace = assimilate_batch(
                &mut fx,
                model,
                batch,
                self.config.assimilations,
                &mut sampler,
            )?;
            let (loss, mut report) = multi_task_loss(
                &mut fx,
                &trace,
                &batch.object_labels,
                &batch.predicate_labels,
                &self.config,
            )?;
            report.replaced = sampler.replaced;
            let mut g = fx.tape.backward(loss)?;
            (fx.param_grads(&mut g), report)
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "image batch loss {}",
                report.total
            )));
        }
        self.apply(model, grads)?;
        report.nodes = batch.object_labels.len() + batch.predicate_labels.len();
        Ok(report)
    }

    /// One optimizer update on a knowledge-base batch; returns its loss.
    pub fn train_kb_batch(&mut self, model: &mut Model<F>, batch: &[KbExample]) -> Result<f64> {
        let dropout_seed = self.rng.next_u64();
        let (grads, value) = {
            let mut fx = Forward::train(&model.params, dropout_seed);
            let (l, v) = kb_loss(&mut fx, model, batch)?;
            let l = fx.tape.scale(l, cst(self.config.icp_weight))?;
            let mut g = fx.tape.backward(l)?;
            (fx.param_grads(&mut g), v)
        };
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "knowledge-base batch loss {value}"
            )));
        }
        self.apply(model, grads)?;
        Ok(value)
    }

    /// One pass over shuffled image batches and knowledge-base batches,
    /// interleaved in proportion to their counts.
    pub fn train_epoch(
        &mut self,
        model: &mut Model<F>,
        scenes: &[SceneInput<F>],
        kb: &[KbExample],
    ) -> Result<EpochReport> {
        if scenes.is_empty() && kb.is_empty() {
            return Err(Error::invalid(
                "nothing to train on: no scenes and no triples",
            ));
        }
        let epoch = self.epoch;
        let rate = ramp(epoch as f64, &self.config);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let mut kb_order: Vec<KbExample> = kb.to_vec();
        kb_order.shuffle(&mut self.rng);

        let image_batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let kb_batches: Vec<&[KbExample]> = kb_order.chunks(self.config.kb_batch_size).collect();
        let plan = interleave(image_batches.len(), kb_batches.len());
        let (mut images, mut kbs) = (image_batches.into_iter(), kb_batches.into_iter());

        let mut step_sums: Vec<StepLoss> = Vec::new();
        let (mut nodes, mut total, mut replaced) = (0usize, 0.0, 0usize);
        let (mut kb_sum, mut kb_weight) = (0.0, 0.0);
        let (mut n_images, mut n_kb) = (0, 0);
        for (position, is_image) in plan.into_iter().enumerate() {
            let batch = if is_image {
                Batch::Images(images.next().expect("planned"))
            } else {
                Batch::Kb(kbs.next().expect("planned"))
            };
            let context = |e: Error| match e {
                Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss(format!(
                    "epoch {epoch}, batch {position}: non-finite value in {op}"
                )),
                Error::NonFiniteLoss(m) => {
                    Error::NonFiniteLoss(format!("epoch {epoch}, batch {position}: {m}"))
                }
                other => other,
            };
            match batch {
                Batch::Images(idx) => {
                    let refs: Vec<&SceneInput<F>> = idx.iter().map(|&i| &scenes[i]).collect();
                    let batch = SceneBatch::collate(&refs)?;
                    let r = self
                        .train_image_batch(model, &batch, rate)
                        .map_err(context)?;
                    if step_sums.is_empty() {
                        step_sums = vec![StepLoss::default(); r.steps.len()];
                    }
                    let w = r.nodes as f64;
                    for (acc, s) in step_sums.iter_mut().zip(&r.steps) {
                        acc.objects += w * s.objects;
                        acc.predicates += w * s.predicates;
                    }
                    total += w * r.total;
                    nodes += r.nodes;
                    replaced += r.replaced;
                    n_images += 1;
                }
                Batch::Kb(b) => {
                    let v = self.train_kb_batch(model, b).map_err(context)?;
                    let w: f64 = b.iter().map(|e| e.count).sum();
                    kb_sum += w * v;
                    kb_weight += w;
                    n_kb += 1;
                }
            }
        }
        let norm = if nodes > 0 { 1.0 / nodes as f64 } else { 0.0 };
        self.epoch += 1;
        Ok(EpochReport {
            epoch,
            rate,
            steps: step_sums
                .into_iter()
                .map(|s| StepLoss {
                    objects: s.objects * norm,
                    predicates: s.predicates * norm,
                })
                .collect(),
            total: total * norm,
            replaced,
            image_batches: n_images,
            kb_loss: (kb_weight > 0.0).then(|| kb_sum / kb_weight),
            kb_batches: n_kb,
        })
    }

    /// Runs the remaining epochs of the configured schedule.
    pub fn fit(
        &mut self,
        model: &mut Model<F>,
        scenes: &[SceneInput<F>],
        kb: &[KbExample],
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while self.epoch < self.config.epochs {
            let r = self.train_epoch(model, scenes, kb)?;
            on_epoch(&r);
            reports.push(r);
        }
        Ok(reports)
    }
}
