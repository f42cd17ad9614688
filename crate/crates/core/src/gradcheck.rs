//! Finite-difference checks of every primitive and of model-level losses.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemata_numerics::{grad_check, relative_error, GradCheckReport, Tape, Tensor, Var};
use serde::Serialize;

use crate::model::{Model, ModelConfig};
use crate::params::Forward;
use crate::schema::{assimilate, NoHook};
use crate::srg::Topology;
use crate::training::{kb_loss, multi_task_loss, KbExample, TrainConfig};
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Compares parameter gradients of `loss` (evaluated without dropout)
/// against central differences over every parameter element.
pub fn check_model_loss<L>(model: &Model<f64>, loss: L, h: f64, tol: f64) -> Result<GradCheckReport>
where
    L: Fn(&mut Forward<'_, f64>, &Model<f64>) -> Result<Var>,
{
    let analytic = {
        let mut fx = Forward::differentiable_eval(&model.params);
        let l = loss(&mut fx, model)?;
        let mut g = fx.tape.backward(l)?;
        fx.param_grads(&mut g)
    };
    let value = |m: &Model<f64>| -> Result<f64> {
        let mut fx = Forward::eval(&m.params);
        let l = loss(&mut fx, m)?;
        Ok(fx.tape.value(l).item())
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_input: vec![0.0; model.params.len()],
        worst: None,
        tol,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..model.params.tensors()[i].len() {
            let orig = model.params.tensors()[i].data()[k];
            probe.params.tensors_mut()[i].data_mut()[k] = orig + h;
            let plus = value(&probe)?;
            probe.params.tensors_mut()[i].data_mut()[k] = orig - h;
            let minus = value(&probe)?;
            probe.params.tensors_mut()[i].data_mut()[k] = orig;
            let a = grad.as_ref().map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, (plus - minus) / (2.0 * h));
            report.per_input[i] = report.per_input[i].max(err);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((i, k));
            }
        }
    }
    Ok(report)
}

/// Random features for a small graph of `n` objects joined by `pairs`.
pub fn toy_graph(
    n: usize,
    pairs: Vec<(usize, usize)>,
    dim: usize,
    seed: u64,
) -> Result<(Topology, Tensor<f64>)> {
    let topo = Topology::new(n, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[topo.n_nodes(), dim], |_| rng.random_range(-1.0..1.0));
    Ok((topo, x))
}

pub fn toy_config(dim: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        dim,
        layers,
        heads,
        ffn_hidden: dim + 2,
        injection_hidden: dim + 1,
        predicate_hidden: 5,
        ..ModelConfig::default()
    }
}

/// Multi-task loss with `steps` assimilations on a fixed toy graph.
pub fn assimilation_loss(
    topo: &Topology,
    x: &Tensor<f64>,
    object_labels: &[usize],
    predicate_labels: &[usize],
    steps: usize,
) -> impl Fn(&mut Forward<'_, f64>, &Model<f64>) -> Result<Var> {
    let edges = topo.edge_index();
    let n = topo.n_objects();
    let (x, ol, pl) = (x.clone(), object_labels.to_vec(), predicate_labels.to_vec());
    let config = TrainConfig {
        assimilations: steps,
        ic_weight: 0.7,
        ..TrainConfig::default()
    };
    move |fx, model| {
        let inputs = fx.tape.constant(x.clone());
        let trace = assimilate(fx, model, inputs, &edges, n, steps, &mut NoHook)?;
        Ok(multi_task_loss(fx, &trace, &ol, &pl, &config)?.0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, r: &GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            tol: r.tol,
            passed: r.passed(),
        }
    }
}

type Primitive = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> schemata_numerics::Result<Var>>;

fn weighted_sum(t: &mut Tape<f64>, x: Var, w: &Tensor<f64>) -> schemata_numerics::Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(x, w)?;
    t.sum(p)
}

/// Leaky ReLU whose backward pass uses the wrong negative slope.
fn faulty_leaky(t: &mut Tape<f64>, x: Var) -> schemata_numerics::Result<Var> {
    let value = t.value(x).map(|v| if v > 0.0 { v } else { 0.2 * v });
    t.custom(
        &[x],
        value,
        Rc::new(|ins, _, g| {
            let d = ins[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.5 * g })
                .collect();
            vec![Tensor::new(ins[0].shape().to_vec(), d).expect("same shape")]
        }),
    )
}

/// Every primitive and composite check, with `fault` swapping a deliberately
/// wrong backward pass into the leaky ReLU check.
pub fn run_suite(seed: u64, fault: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let (a, b, c, v) = (
        random(&[4, 5]),
        random(&[5, 3]),
        random(&[4, 5]),
        random(&[5]),
    );
    let (bt, scores) = (random(&[3, 5]), random(&[6, 1]));
    let (w43, w45, w35, w44, w63) = (
        random(&[4, 3]),
        random(&[4, 5]),
        random(&[3, 5]),
        random(&[4, 4]),
        random(&[6, 5]),
    );
    let fixed = random(&[1, 5]);
    let idx: Rc<[usize]> = Rc::from(vec![0usize, 2, 2, 3, 1, 0]);
    let recv: Rc<[usize]> = Rc::from(vec![1usize, 1, 0, 3, 3, 3]);
    let seg: Rc<[usize]> = Rc::from(vec![0usize, 0, 1, 2, 2, 2]);

    let mut prims: Vec<(&str, Vec<Tensor<f64>>, Primitive)> = Vec::new();
    let w = w43.clone();
    prims.push((
        "matmul",
        vec![a.clone(), b.clone()],
        Box::new(move |t, x| {
            let y = t.matmul(x[0], x[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w43.clone();
    prims.push((
        "matmul_t",
        vec![a.clone(), bt],
        Box::new(move |t, x| {
            let y = t.matmul_t(x[0], x[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "add",
        vec![a.clone(), c.clone()],
        Box::new(move |t, x| {
            let y = t.add(x[0], x[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "mul",
        vec![a.clone(), c.clone()],
        Box::new(move |t, x| {
            let y = t.mul(x[0], x[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "add_bias",
        vec![a.clone(), v.clone()],
        Box::new(move |t, x| {
            let y = t.add_bias(x[0], x[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "leaky_relu",
        vec![a.clone()],
        Box::new(move |t, x| {
            let y = if fault {
                faulty_leaky(t, x[0])?
            } else {
                t.leaky_relu(x[0], 0.2)?
            };
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "softmax_rows",
        vec![a.clone()],
        Box::new(move |t, x| {
            let y = t.softmax_rows(x[0])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "layer_norm",
        vec![a.clone(), v.clone(), random(&[5])],
        Box::new(move |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w63.clone();
    prims.push((
        "gather_rows",
        vec![a.clone()],
        Box::new(move |t, x| {
            let y = t.gather_rows(x[0], idx.clone())?;
            weighted_sum(t, y, &w)
        }),
    ));
    let (w, r2) = (w45.clone(), recv.clone());
    prims.push((
        "scatter_add_rows",
        vec![random(&[6, 5])],
        Box::new(move |t, x| {
            let y = t.scatter_add_rows(x[0], r2.clone(), 4)?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = random(&[6, 1]);
    prims.push((
        "segment_softmax",
        vec![scores.clone()],
        Box::new(move |t, x| {
            let y = t.segment_softmax(x[0], seg.clone(), 3)?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w63;
    prims.push((
        "scale_rows",
        vec![random(&[6, 5]), scores],
        Box::new(move |t, x| {
            let y = t.scale_rows(x[0], x[1])?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = random(&[9, 5]);
    prims.push((
        "slice_rows/concat_rows",
        vec![a.clone(), c],
        Box::new(move |t, x| {
            let s = t.slice_rows(x[0], 1, 3)?;
            let y = t.concat_rows(&[s, x[1], s, x[0]])?;
            let y = t.slice_rows(y, 0, 9)?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w45.clone();
    prims.push((
        "replace_rows",
        vec![a.clone()],
        Box::new(move |t, x| {
            let y = t.replace_rows(x[0], vec![2], &fixed)?;
            weighted_sum(t, y, &w)
        }),
    ));
    prims.push((
        "cross_entropy",
        vec![a.clone()],
        Box::new(|t, x| {
            let p = t.softmax_rows(x[0])?;
            t.cross_entropy(p, &[1, 4, 0, 2], &[1.0, 0.5, 2.0, 1.0])
        }),
    ));
    let w = w35;
    prims.push((
        "mul_const",
        vec![random(&[3, 5])],
        Box::new(move |t, x| {
            let y = t.mul_const(
                x[0],
                vec![
                    0.0, 1.25, 1.25, 0.0, 1.25, 1.25, 0.0, 1.25, 0.0, 0.0, 1.25, 1.25, 1.25, 0.0,
                    1.25,
                ],
            )?;
            weighted_sum(t, y, &w)
        }),
    ));
    let w = w44;
    prims.push((
        "scale",
        vec![random(&[4, 4])],
        Box::new(move |t, x| {
            let y = t.scale(x[0], -1.5)?;
            weighted_sum(t, y, &w)
        }),
    ));

    let mut out = Vec::new();
    for (name, inputs, f) in &prims {
        let r = grad_check(|t, x| f(t, x), inputs, STEP, TOLERANCE)?;
        out.push(CheckResult::new(name, &r));
    }

    let model = Model::<f64>::new(toy_config(6, 1, 2), 3, 2, seed)?;
    let (topo, x) = toy_graph(3, vec![(0, 1), (2, 1)], 6, seed)?;
    let r = check_model_loss(
        &model,
        assimilation_loss(&topo, &x, &[0, 2, 1], &[1, 0], 1),
        STEP,
        TOLERANCE,
    )?;
    out.push(CheckResult::new(
        "assimilation loss (3 objects, 2 predicates)",
        &r,
    ));

    let model = Model::<f64>::new(toy_config(8, 2, 2), 3, 2, seed)?;
    let (topo, x) = toy_graph(3, vec![(0, 1), (1, 2)], 8, seed ^ 1)?;
    let edges = topo.edge_index();
    let r = check_model_loss(
        &model,
        |fx, m| {
            let z = fx.tape.constant(x.clone());
            let z = m.stack.contextualize(fx, z, &edges, None)?;
            let w = fx.tape.constant(w_for(&x, seed));
            let p = fx.tape.mul(z, w)?;
            Ok(fx.tape.sum(p)?)
        },
        STEP,
        TOLERANCE,
    )?;
    out.push(CheckResult::new("transformer stack (L=2, K=2, d=8)", &r));

    let model = Model::<f64>::new(toy_config(6, 1, 2), 3, 2, seed)?;
    let batch = [
        KbExample {
            head: 0,
            predicate: 1,
            tail: 2,
            count: 3.0,
        },
        KbExample {
            head: 2,
            predicate: 0,
            tail: 2,
            count: 1.0,
        },
    ];
    let r = check_model_loss(
        &model,
        |fx, m| Ok(kb_loss(fx, m, &batch)?.0),
        STEP,
        TOLERANCE,
    )?;
    out.push(CheckResult::new("triple loss", &r));
    Ok(out)
}

fn w_for(x: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::from_fn(x.shape(), |_| rng.random_range(-1.0..1.0))
}
