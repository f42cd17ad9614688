//! Schemata: class embeddings that act both as classifier weights and as
//! prior-knowledge messages, and the assimilation loop built on them.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use schemata_numerics::{Real, Tensor, Var};

use crate::model::Model;
use crate::params::{FeedForward, Forward, LayerNormParams, ParamId, ParamStore};
use crate::srg::{EdgeIndex, SceneBatch, Topology};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SchemaBank {
    /// `|C^o| × d`
    pub objects: ParamId,
    /// `|C^p| × d`
    pub predicates: ParamId,
}

impl SchemaBank {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        n_objects: usize,
        n_predicates: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            objects: store.glorot("schemata.objects", &[n_objects, dim], rng)?,
            predicates: store.glorot("schemata.predicates", &[n_predicates, dim], rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct InjectionNet {
    pub g: FeedForward,
    pub norm_fuse: LayerNormParams,
    pub norm_out: LayerNormParams,
}

impl InjectionNet {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        dim: usize,
        hidden: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            g: FeedForward::new(store, "injection.g", [dim, hidden, dim], slope, rng)?,
            norm_fuse: LayerNormParams::new(store, "injection.ln0", dim),
            norm_out: LayerNormParams::new(store, "injection.ln1", dim),
        })
    }
}

/// Class distributions of the object rows and the predicate rows.
#[derive(Clone, Copy, Debug)]
pub struct Distributions {
    pub objects: Var,
    pub predicates: Var,
}

/// `α'_ic = softmax_c(z_i · s_c)`, objects against object schemata and
/// predicates against predicate schemata.
pub fn classify<F: Real>(
    fx: &mut Forward<'_, F>,
    bank: &SchemaBank,
    z: Var,
    n_objects: usize,
) -> Result<Distributions> {
    let n_nodes = fx.tape.value(z).rows();
    let zo = fx.tape.slice_rows(z, 0, n_objects)?;
    let zp = fx.tape.slice_rows(z, n_objects, n_nodes)?;
    let so = fx.param(bank.objects);
    let sp = fx.param(bank.predicates);
    let lo = fx.tape.matmul_t(zo, so)?;
    let lp = fx.tape.matmul_t(zp, sp)?;
    Ok(Distributions {
        objects: fx.tape.softmax_rows(lo)?,
        predicates: fx.tape.softmax_rows(lp)?,
    })
}

/// `δ_i = Σ_c α'_ic s_c`, stacked in node order.
pub fn schema_message<F: Real>(
    fx: &mut Forward<'_, F>,
    bank: &SchemaBank,
    dist: Distributions,
) -> Result<Var> {
    let so = fx.param(bank.objects);
    let sp = fx.param(bank.predicates);
    let mo = fx.tape.matmul(dist.objects, so)?;
    let mp = fx.tape.matmul(dist.predicates, sp)?;
    Ok(fx.tape.concat_rows(&[mo, mp])?)
}

/// `u = LN(x + δ)`, then `LN(u + g(u))`.
pub fn inject<F: Real>(
    fx: &mut Forward<'_, F>,
    net: &InjectionNet,
    x: Var,
    delta: Var,
) -> Result<Var> {
    let s = fx.tape.add(x, delta)?;
    let u = net.norm_fuse.forward(fx, s)?;
    let g = net.g.forward(fx, u)?;
    let r = fx.tape.add(u, g)?;
    net.norm_out.forward(fx, r)
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Contextualized node states `z^(L,t)`.
    pub states: Var,
    pub dist: Distributions,
}

#[derive(Clone, Debug)]
pub struct AssimilationTrace {
    /// Step-0 node features; every injection fuses with exactly this value.
    pub inputs: Var,
    pub steps: Vec<StepOutput>,
}

/// Rewrites the distributions that feed the next schema message. `step` is
/// the index of the step that produced them.
pub trait MessageHook<F: Real> {
    fn adjust(
        &mut self,
        fx: &mut Forward<'_, F>,
        step: usize,
        dist: Distributions,
    ) -> Result<Distributions>;
}

pub struct NoHook;

impl<F: Real> MessageHook<F> for NoHook {
    fn adjust(
        &mut self,
        _: &mut Forward<'_, F>,
        _: usize,
        dist: Distributions,
    ) -> Result<Distributions> {
        Ok(dist)
    }
}

fn one_hot<F: Real>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &c) in labels.iter().enumerate() {
        if c >= classes {
            return Err(Error::invalid(format!(
                "class {c} out of range for {classes} classes"
            )));
        }
        t.row_mut(r)[c] = F::one();
    }
    Ok(t)
}

fn replace_all<F: Real>(fx: &mut Forward<'_, F>, x: Var, values: &Tensor<F>) -> Result<Var> {
    let rows = (0..values.rows()).collect();
    Ok(fx.tape.replace_rows(x, rows, values)?)
}

/// Substitutes ground-truth one-hot object distributions before every
/// message (object labels are given).
pub struct GroundTruthObjects<F> {
    one_hot: Tensor<F>,
}

impl<F: Real> GroundTruthObjects<F> {
    pub fn new(labels: &[usize], classes: usize) -> Result<Self> {
        Ok(Self {
            one_hot: one_hot(labels, classes)?,
        })
    }
}

impl<F: Real> MessageHook<F> for GroundTruthObjects<F> {
    fn adjust(
        &mut self,
        fx: &mut Forward<'_, F>,
        _: usize,
        dist: Distributions,
    ) -> Result<Distributions> {
        Ok(Distributions {
            objects: replace_all(fx, dist.objects, &self.one_hot)?,
            predicates: dist.predicates,
        })
    }
}

/// Overwrites every row of the step-0 distributions with fixed seeds.
pub struct SeedDistributions<F> {
    pub objects: Tensor<F>,
    pub predicates: Tensor<F>,
}

impl<F: Real> MessageHook<F> for SeedDistributions<F> {
    fn adjust(
        &mut self,
        fx: &mut Forward<'_, F>,
        step: usize,
        dist: Distributions,
    ) -> Result<Distributions> {
        if step != 0 {
            return Ok(dist);
        }
        Ok(Distributions {
            objects: replace_all(fx, dist.objects, &self.objects)?,
            predicates: replace_all(fx, dist.predicates, &self.predicates)?,
        })
    }
}

/// `⌈rate · nodes⌉`, robust to representation error in `rate · nodes`.
pub fn replacement_cap(rate: f64, nodes: usize) -> usize {
    let x = rate * nodes as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Indices (into `predicted`) of the false negatives chosen for
/// replacement: at most `⌈rate · len⌉`, drawn uniformly without replacement.
pub fn select_replacements<R: Rng + ?Sized>(
    predicted: &[usize],
    labels: &[usize],
    rate: f64,
    rng: &mut R,
) -> Vec<usize> {
    let wrong: Vec<usize> = (0..predicted.len())
        .filter(|&i| predicted[i] != labels[i])
        .collect();
    let k = replacement_cap(rate, predicted.len()).min(wrong.len());
    if k == 0 {
        return Vec::new();
    }
    let mut chosen: Vec<usize> = sample(rng, wrong.len(), k)
        .into_iter()
        .map(|i| wrong[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Replaces a bounded random subset of misclassified rows with their
/// one-hot labels. Rows are indexed in node order (objects, then
/// predicates); returns the new distributions and the replaced node indices.
pub fn scheduled_replace<F: Real, R: Rng + ?Sized>(
    objects: &Tensor<F>,
    predicates: &Tensor<F>,
    object_labels: &[usize],
    predicate_labels: &[usize],
    rate: f64,
    rng: &mut R,
) -> Result<(Tensor<F>, Tensor<F>, Vec<usize>)> {
    check_rate(rate)?;
    let n = objects.rows();
    if object_labels.len() != n || predicate_labels.len() != predicates.rows() {
        return Err(Error::invalid("label count differs from row count"));
    }
    let mut predicted = objects.argmax_rows();
    predicted.extend(predicates.argmax_rows());
    let labels: Vec<usize> = object_labels
        .iter()
        .chain(predicate_labels)
        .copied()
        .collect();
    let chosen = select_replacements(&predicted, &labels, rate, rng);
    let (mut o, mut p) = (objects.clone(), predicates.clone());
    for &i in &chosen {
        let (t, r) = if i < n { (&mut o, i) } else { (&mut p, i - n) };
        let row = t.row_mut(r);
        row.iter_mut().for_each(|v| *v = F::zero());
        row[labels[i]] = F::one();
    }
    Ok((o, p, chosen))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "replacement rate {rate} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Scheduled sampling over a batch; the cap applies to each scene separately.
pub struct ScheduledSampler {
    object_labels: Vec<usize>,
    predicate_labels: Vec<usize>,
    object_offsets: Vec<usize>,
    predicate_offsets: Vec<usize>,
    rate: f64,
    rng: ChaCha8Rng,
    pub replaced: usize,
}

impl ScheduledSampler {
    pub fn new<F: Real>(batch: &SceneBatch<F>, rate: f64, rng: ChaCha8Rng) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            object_labels: batch.object_labels.clone(),
            predicate_labels: batch.predicate_labels.clone(),
            object_offsets: batch.object_offsets.clone(),
            predicate_offsets: batch.predicate_offsets.clone(),
            rate,
            rng,
            replaced: 0,
        })
    }
}

impl<F: Real> MessageHook<F> for ScheduledSampler {
    fn adjust(
        &mut self,
        fx: &mut Forward<'_, F>,
        _: usize,
        dist: Distributions,
    ) -> Result<Distributions> {
        if self.rate == 0.0 {
            return Ok(dist);
        }
        let po = fx.tape.value(dist.objects).argmax_rows();
        let pp = fx.tape.value(dist.predicates).argmax_rows();
        let (mut obj_rows, mut pred_rows) = (Vec::new(), Vec::new());
        for s in 0..self.object_offsets.len() - 1 {
            let (o0, o1) = (self.object_offsets[s], self.object_offsets[s + 1]);
            let (p0, p1) = (self.predicate_offsets[s], self.predicate_offsets[s + 1]);
            let predicted: Vec<usize> = po[o0..o1].iter().chain(&pp[p0..p1]).copied().collect();
            let labels: Vec<usize> = self.object_labels[o0..o1]
                .iter()
                .chain(&self.predicate_labels[p0..p1])
                .copied()
                .collect();
            for i in select_replacements(&predicted, &labels, self.rate, &mut self.rng) {
                if i < o1 - o0 {
                    obj_rows.push(o0 + i);
                } else {
                    pred_rows.push(p0 + i - (o1 - o0));
                }
            }
        }
        self.replaced += obj_rows.len() + pred_rows.len();
        let mut out = dist;
        if !obj_rows.is_empty() {
            let classes = fx.tape.value(dist.objects).cols();
            let labels: Vec<usize> = obj_rows.iter().map(|&r| self.object_labels[r]).collect();
            out.objects =
                fx.tape
                    .replace_rows(dist.objects, obj_rows, &one_hot(&labels, classes)?)?;
        }
        if !pred_rows.is_empty() {
            let classes = fx.tape.value(dist.predicates).cols();
            let labels: Vec<usize> = pred_rows
                .iter()
                .map(|&r| self.predicate_labels[r])
                .collect();
            out.predicates =
                fx.tape
                    .replace_rows(dist.predicates, pred_rows, &one_hot(&labels, classes)?)?;
        }
        Ok(out)
    }
}

/// Step 0 contextualizes and classifies `inputs`; each further step sends
/// schema messages, injects them into `inputs`, and re-contextualizes.
pub fn assimilate<F: Real>(
    fx: &mut Forward<'_, F>,
    model: &Model<F>,
    inputs: Var,
    edges: &EdgeIndex,
    n_objects: usize,
    steps: usize,
    hook: &mut dyn MessageHook<F>,
) -> Result<AssimilationTrace> {
    let z = model.stack.contextualize(fx, inputs, edges, None)?;
    let dist = classify(fx, &model.schemata, z, n_objects)?;
    let mut trace = vec![StepOutput { states: z, dist }];
    for t in 0..steps {
        let dist = hook.adjust(fx, t, trace[t].dist)?;
        let delta = schema_message(fx, &model.schemata, dist)?;
        let z0 = inject(fx, &model.injection, inputs, delta)?;
        let z = model.stack.contextualize(fx, z0, edges, None)?;
        let dist = classify(fx, &model.schemata, z, n_objects)?;
        trace.push(StepOutput { states: z, dist });
    }
    Ok(AssimilationTrace {
        inputs,
        steps: trace,
    })
}

pub fn assimilate_batch<F: Real>(
    fx: &mut Forward<'_, F>,
    model: &Model<F>,
    batch: &SceneBatch<F>,
    steps: usize,
    hook: &mut dyn MessageHook<F>,
) -> Result<AssimilationTrace> {
    let x = model.node_inputs(fx, &batch.object_features, &batch.rel_positions)?;
    let edges = batch.topology.edge_index();
    assimilate(
        fx,
        model,
        x,
        &edges,
        batch.topology.n_objects(),
        steps,
        hook,
    )
}

/// Graph of `b` disconnected head → predicate → tail triples.
pub fn kb_topology(b: usize) -> Topology {
    Topology::new(2 * b, (0..b).map(|i| (2 * i, 2 * i + 1)).collect())
        .expect("valid by construction")
}

/// Seeds for a batch of class pairs: one-hot heads and tails (in node
/// order h0, t0, h1, t1, ...) and uniform predicates.
pub fn kb_seeds<F: Real>(
    pairs: &[(usize, usize)],
    n_object_classes: usize,
    n_predicate_classes: usize,
) -> Result<SeedDistributions<F>> {
    let labels: Vec<usize> = pairs.iter().flat_map(|&(h, t)| [h, t]).collect();
    let u = F::one() / F::from_usize(n_predicate_classes).expect("class count fits");
    Ok(SeedDistributions {
        objects: one_hot(&labels, n_object_classes)?,
        predicates: Tensor::full(&[pairs.len(), n_predicate_classes], u),
    })
}

/// Predicate distributions for class pairs with no image evidence: zero
/// features, one-hot head/tail seeds, uniform predicate seed, one step.
pub fn kb_assimilate<F: Real>(
    fx: &mut Forward<'_, F>,
    model: &Model<F>,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let seeds = kb_seeds::<F>(pairs, model.n_object_classes, model.n_predicate_classes)?;
    let topo = kb_topology(pairs.len());
    let x = fx
        .tape
        .constant(Tensor::zeros(&[topo.n_nodes(), model.dim()]));
    let so = fx.tape.constant(seeds.objects);
    let sp = fx.tape.constant(seeds.predicates);
    let dist = Distributions {
        objects: so,
        predicates: sp,
    };
    let delta = schema_message(fx, &model.schemata, dist)?;
    let z0 = inject(fx, &model.injection, x, delta)?;
    let z = model
        .stack
        .contextualize(fx, z0, &topo.edge_index(), None)?;
    Ok(classify(fx, &model.schemata, z, topo.n_objects())?.predicates)
}
