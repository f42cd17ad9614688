//! Triple ranking, recall metrics and link prediction.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use schemata_numerics::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::params::Forward;
use crate::schema::{assimilate_batch, kb_assimilate, GroundTruthObjects, MessageHook, NoHook};
use crate::srg::{SceneBatch, SceneInput};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Object and predicate labels are predicted.
    SgCls,
    /// Object labels are given; predicates are predicted.
    PredCls,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgcls" => Ok(Task::SgCls),
            "predcls" => Ok(Task::PredCls),
            other => Err(Error::invalid(format!(
                "unknown task {other:?} (expected sgcls or predcls)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::SgCls => "sgcls",
            Task::PredCls => "predcls",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredTriple {
    /// Index of the annotated (head, tail) pair this candidate belongs to.
    pub pair: usize,
    pub head: usize,
    pub tail: usize,
    pub predicate: usize,
    pub head_label: usize,
    pub tail_label: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtTriple {
    pub head: usize,
    pub predicate: usize,
    pub tail: usize,
    pub head_label: usize,
    pub tail_label: usize,
}

impl GtTriple {
    pub fn matches(&self, t: &ScoredTriple) -> bool {
        self.head == t.head
            && self.tail == t.tail
            && self.predicate == t.predicate
            && self.head_label == t.head_label
            && self.tail_label == t.tail_label
    }
}

pub fn ground_truth<F>(scene: &SceneInput<F>) -> Vec<GtTriple> {
    scene
        .topology
        .pairs()
        .iter()
        .zip(&scene.predicate_labels)
        .map(|(&(h, t), &p)| GtTriple {
            head: h,
            predicate: p,
            tail: t,
            head_label: scene.object_labels[h],
            tail_label: scene.object_labels[t],
        })
        .collect()
}

/// Descending score; ties by pair index, then class index.
pub fn rank_order(a: &ScoredTriple, b: &ScoredTriple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.pair.cmp(&b.pair))
        .then(a.predicate.cmp(&b.predicate))
}

/// Every (pair, predicate class) candidate, ranked. SGCls fixes each object
/// to its argmax class and multiplies in that probability; PredCls uses the
/// given object labels with factor 1.
pub fn score_triples<F: Real>(
    objects: &Tensor<F>,
    predicates: &Tensor<F>,
    pairs: &[(usize, usize)],
    task: Task,
    object_labels: &[usize],
) -> Vec<ScoredTriple> {
    let (labels, probs): (Vec<usize>, Vec<f64>) = match task {
        Task::SgCls => {
            let arg = objects.argmax_rows();
            let p = arg
                .iter()
                .enumerate()
                .map(|(i, &c)| objects.at(i, c).to_f64().unwrap_or(0.0))
                .collect();
            (arg, p)
        }
        Task::PredCls => (object_labels.to_vec(), vec![1.0; object_labels.len()]),
    };
    let mut out = Vec::with_capacity(pairs.len() * predicates.cols());
    for (pair, &(h, t)) in pairs.iter().enumerate() {
        let obj = probs[h] * probs[t];
        for (c, &p) in predicates.row(pair).iter().enumerate() {
            out.push(ScoredTriple {
                pair,
                head: h,
                tail: t,
                predicate: c,
                head_label: labels[h],
                tail_label: labels[t],
                score: obj * p.to_f64().unwrap_or(0.0),
            });
        }
    }
    out.sort_by(rank_order);
    out
}

/// Constrained: the best predicate per ordered (head, tail) pair, lower class
/// index on ties. Unconstrained: all candidates. Output stays ranked.
pub fn apply_graph_constraint(triples: &[ScoredTriple], constrained: bool) -> Vec<ScoredTriple> {
    let mut out = triples.to_vec();
    out.sort_by(rank_order);
    if constrained {
        let mut seen = std::collections::HashSet::new();
        out.retain(|t| seen.insert((t.head, t.tail)));
    }
    out
}

/// Which ground-truth triples are matched inside the top `k` of `ranked`.
pub fn gt_hits(ranked: &[ScoredTriple], gt: &[GtTriple], k: usize) -> Vec<bool> {
    let top = &ranked[..k.min(ranked.len())];
    gt.iter()
        .map(|g| top.iter().any(|t| g.matches(t)))
        .collect()
}

/// `|top-K ∩ GT| / |GT|`, or `None` for an image without ground truth.
pub fn image_recall(ranked: &[ScoredTriple], gt: &[GtTriple], k: usize) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let hits = gt_hits(ranked, gt, k).iter().filter(|&&h| h).count();
    Some(hits as f64 / gt.len() as f64)
}

/// Mean per-image recall over images with nonempty ground truth.
pub fn recall_at_k(images: &[(Vec<ScoredTriple>, Vec<GtTriple>)], k: usize) -> Option<f64> {
    let r: Vec<f64> = images
        .iter()
        .filter_map(|(ranked, gt)| image_recall(ranked, gt, k))
        .collect();
    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
}

/// Per predicate class recall pooled over all images (`None` for classes
/// absent from the ground truth).
pub fn per_predicate_recall(
    images: &[(Vec<ScoredTriple>, Vec<GtTriple>)],
    k: usize,
    n_predicates: usize,
) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; n_predicates];
    let mut total = vec![0usize; n_predicates];
    for (ranked, gt) in images {
        for (g, h) in gt.iter().zip(gt_hits(ranked, gt, k)) {
            total[g.predicate] += 1;
            hit[g.predicate] += h as usize;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect()
}

/// Unweighted mean of per-class recall over classes present in the ground truth.
pub fn mean_recall_at_k(
    images: &[(Vec<ScoredTriple>, Vec<GtTriple>)],
    k: usize,
    n_predicates: usize,
) -> Option<f64> {
    let present: Vec<f64> = per_predicate_recall(images, k, n_predicates)
        .into_iter()
        .flatten()
        .collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Class distributions of one scene at every assimilation step.
#[derive(Clone, Debug)]
pub struct ScenePrediction<F> {
    /// `(objects n × |C^o|, predicates m × |C^p|)` per step.
    pub steps: Vec<(Tensor<F>, Tensor<F>)>,
}

fn check_labels<F>(model: &Model<F>, scene: &SceneInput<F>) -> Result<()> {
    let bad_o = scene
        .object_labels
        .iter()
        .any(|&c| c >= model.n_object_classes);
    let bad_p = scene
        .predicate_labels
        .iter()
        .any(|&c| c >= model.n_predicate_classes);
    if bad_o || bad_p {
        return Err(Error::invalid(format!(
            "scene {:?} has labels outside the model vocabulary",
            scene.id
        )));
    }
    Ok(())
}

/// Eval-mode assimilation of every scene, in batches of `batch_size`.
pub fn predict<F: Real>(
    model: &Model<F>,
    scenes: &[SceneInput<F>],
    task: Task,
    assimilations: usize,
    batch_size: usize,
) -> Result<Vec<ScenePrediction<F>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        for s in chunk {
            check_labels(model, s)?;
        }
        let refs: Vec<&SceneInput<F>> = chunk.iter().collect();
        let batch = SceneBatch::collate(&refs)?;
        let mut fx = Forward::eval(&model.params);
        let mut hook: Box<dyn MessageHook<F>> = match task {
            Task::SgCls => Box::new(NoHook),
            Task::PredCls => Box::new(GroundTruthObjects::new(
                &batch.object_labels,
                model.n_object_classes,
            )?),
        };
        let trace = assimilate_batch(&mut fx, model, &batch, assimilations, hook.as_mut())?;
        let mut per_scene: Vec<ScenePrediction<F>> = (0..chunk.len())
            .map(|_| ScenePrediction { steps: Vec::new() })
            .collect();
        for step in &trace.steps {
            let o = fx.tape.value(step.dist.objects);
            let p = fx.tape.value(step.dist.predicates);
            for (s, pred) in per_scene.iter_mut().enumerate() {
                let (o0, o1) = (batch.object_offsets[s], batch.object_offsets[s + 1]);
                let (p0, p1) = (batch.predicate_offsets[s], batch.predicate_offsets[s + 1]);
                pred.steps.push((rows(o, o0, o1)?, rows(p, p0, p1)?));
            }
        }
        out.extend(per_scene);
    }
    Ok(out)
}

fn rows<F: Real>(t: &Tensor<F>, start: usize, end: usize) -> Result<Tensor<F>> {
    let c = t.cols();
    Ok(Tensor::new(
        vec![end - start, c],
        t.data()[start * c..end * c].to_vec(),
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub task: Task,
    pub constrained: bool,
    pub step: usize,
    pub k: Vec<usize>,
    /// `R@K` per entry of `k`.
    pub recall: Vec<f64>,
    /// `mR@K` per entry of `k`.
    pub mean_recall: Vec<f64>,
    /// Per entry of `k`, recall per predicate class (`None` when absent).
    pub per_predicate: Vec<Vec<Option<f64>>>,
    pub images: usize,
}

/// One recall report per assimilation step `0..=assimilations`.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    scenes: &[SceneInput<F>],
    task: Task,
    constrained: bool,
    ks: &[usize],
    assimilations: usize,
    batch_size: usize,
) -> Result<Vec<RecallReport>> {
    if ks.contains(&0) {
        return Err(Error::invalid("K must be at least 1"));
    }
    let preds = predict(model, scenes, task, assimilations, batch_size)?;
    report_from_predictions(
        scenes,
        &preds,
        task,
        constrained,
        ks,
        model.n_predicate_classes,
    )
}

pub fn report_from_predictions<F: Real>(
    scenes: &[SceneInput<F>],
    preds: &[ScenePrediction<F>],
    task: Task,
    constrained: bool,
    ks: &[usize],
    n_predicates: usize,
) -> Result<Vec<RecallReport>> {
    let gts: Vec<Vec<GtTriple>> = scenes.iter().map(ground_truth).collect();
    let n_steps = preds.first().map_or(0, |p| p.steps.len());
    let mut reports = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let images: Vec<(Vec<ScoredTriple>, Vec<GtTriple>)> = scenes
            .iter()
            .zip(preds)
            .zip(&gts)
            .map(|((s, p), gt)| {
                let (o, pr) = &p.steps[step];
                let scored = score_triples(o, pr, s.topology.pairs(), task, &s.object_labels);
                (apply_graph_constraint(&scored, constrained), gt.clone())
            })
            .collect();
        reports.push(RecallReport {
            task,
            constrained,
            step,
            k: ks.to_vec(),
            recall: ks
                .iter()
                .map(|&k| recall_at_k(&images, k).unwrap_or(0.0))
                .collect(),
            mean_recall: ks
                .iter()
                .map(|&k| mean_recall_at_k(&images, k, n_predicates).unwrap_or(0.0))
                .collect(),
            per_predicate: ks
                .iter()
                .map(|&k| per_predicate_recall(&images, k, n_predicates))
                .collect(),
            images: images.iter().filter(|(_, gt)| !gt.is_empty()).count(),
        });
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub objects: f64,
    pub predicates: f64,
    /// Pooled over all nodes.
    pub nodes: f64,
}

/// Argmax classification accuracy at every step.
pub fn accuracy_by_step<F: Real>(
    scenes: &[SceneInput<F>],
    preds: &[ScenePrediction<F>],
) -> Vec<Accuracy> {
    let n_steps = preds.first().map_or(0, |p| p.steps.len());
    (0..n_steps)
        .map(|step| {
            let (mut ho, mut no, mut hp, mut np) = (0usize, 0usize, 0usize, 0usize);
            for (s, p) in scenes.iter().zip(preds) {
                let (o, pr) = &p.steps[step];
                ho += o
                    .argmax_rows()
                    .iter()
                    .zip(&s.object_labels)
                    .filter(|(a, b)| a == b)
                    .count();
                hp += pr
                    .argmax_rows()
                    .iter()
                    .zip(&s.predicate_labels)
                    .filter(|(a, b)| a == b)
                    .count();
                no += s.object_labels.len();
                np += s.predicate_labels.len();
            }
            let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
            Accuracy {
                objects: ratio(ho, no),
                predicates: ratio(hp, np),
                nodes: ratio(ho + hp, no + np),
            }
        })
        .collect()
}

/// Predicate distribution of each class pair from schemata alone.
pub fn pkg_distribution<F: Real>(model: &Model<F>, pairs: &[(usize, usize)]) -> Result<Tensor<F>> {
    let mut fx = Forward::eval(&model.params);
    let probs = kb_assimilate(&mut fx, model, pairs)?;
    Ok(fx.tape.value(probs).clone())
}

/// Top `top` predicate classes for a (head, tail) class pair, by probability
/// descending, lower class index on ties.
pub fn pkg_link_predict<F: Real>(
    model: &Model<F>,
    head: usize,
    tail: usize,
    top: usize,
) -> Result<Vec<(usize, f64)>> {
    let dist = pkg_distribution(model, &[(head, tail)])?;
    let mut ranked: Vec<(usize, f64)> = dist
        .row(0)
        .iter()
        .enumerate()
        .map(|(c, &p)| (c, p.to_f64().unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(pair: usize, h: usize, tl: usize, p: usize, score: f64) -> ScoredTriple {
        ScoredTriple {
            pair,
            head: h,
            tail: tl,
            predicate: p,
            head_label: 0,
            tail_label: 0,
            score,
        }
    }

    fn g(h: usize, tl: usize, p: usize) -> GtTriple {
        GtTriple {
            head: h,
            predicate: p,
            tail: tl,
            head_label: 0,
            tail_label: 0,
        }
    }

    #[test]
    fn predcls_scores_are_predicate_probabilities() {
        let o = Tensor::<f64>::zeros(&[2, 3]);
        let p = Tensor::from_rows(&[vec![0.7, 0.3]]).unwrap();
        let s = score_triples(&o, &p, &[(0, 1)], Task::PredCls, &[2, 1]);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].predicate, s[0].score), (0, 0.7));
        assert_eq!((s[1].predicate, s[1].score), (1, 0.3));
        assert_eq!((s[0].head_label, s[0].tail_label), (2, 1));
    }

    #[test]
    fn sgcls_one_hot_scores_one() {
        let o = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let s = score_triples(&o, &p, &[(0, 1)], Task::SgCls, &[]);
        assert_eq!(s[0].score, 1.0);
        assert_eq!(
            (s[0].predicate, s[0].head_label, s[0].tail_label),
            (2, 1, 0)
        );
    }

    #[test]
    fn ties_rank_by_pair_then_class() {
        let o = Tensor::<f64>::zeros(&[3, 1]);
        let p = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let s = score_triples(&o, &p, &[(0, 1), (1, 2)], Task::PredCls, &[0, 0, 0]);
        let order: Vec<(usize, usize)> = s.iter().map(|x| (x.pair, x.predicate)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn constraint_keeps_best_per_pair() {
        let cands: Vec<ScoredTriple> = (0..50)
            .map(|c| t(0, 0, 1, c, if c == 17 { 0.9 } else { 0.01 }))
            .collect();
        let c = apply_graph_constraint(&cands, true);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].predicate, 17);
        assert_eq!(apply_graph_constraint(&cands, false).len(), 50);
        let tie = vec![t(0, 0, 1, 3, 0.5), t(0, 0, 1, 1, 0.5)];
        assert_eq!(apply_graph_constraint(&tie, true)[0].predicate, 1);
    }

    #[test]
    fn recall_examples() {
        let ranked = vec![t(0, 0, 1, 0, 0.9), t(1, 1, 2, 0, 0.1)];
        let gt = vec![g(0, 1, 0), g(1, 2, 1)];
        assert_eq!(image_recall(&ranked, &gt, 2), Some(0.5));
        assert_eq!(image_recall(&ranked, &[g(0, 1, 0)], 2), Some(1.0));
        assert_eq!(image_recall(&ranked, &[], 2), None);
        let images = vec![
            (ranked.clone(), vec![g(0, 1, 0)]),
            (ranked.clone(), vec![g(0, 1, 5)]),
            (ranked, vec![]),
        ];
        assert_eq!(recall_at_k(&images, 5), Some(0.5));
    }

    #[test]
    fn mean_recall_examples() {
        let ranked = vec![t(0, 0, 1, 0, 0.9)];
        let images = vec![
            (ranked.clone(), vec![g(0, 1, 0)]),
            (ranked.clone(), vec![g(0, 1, 1)]),
        ];
        assert_eq!(mean_recall_at_k(&images, 1, 3), Some(0.5));
        assert_eq!(mean_recall_at_k(&images[..1], 1, 3), Some(1.0));

        // Nine hits of class 0, one miss of class 1.
        let mut skew: Vec<_> = (0..9).map(|_| (ranked.clone(), vec![g(0, 1, 0)])).collect();
        skew.push((ranked, vec![g(0, 1, 1)]));
        assert!((recall_at_k(&skew, 1).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(mean_recall_at_k(&skew, 1, 2), Some(0.5));
    }

    #[test]
    fn task_parsing() {
        assert_eq!("SGCls".parse::<Task>().unwrap(), Task::SgCls);
        assert_eq!("predcls".parse::<Task>().unwrap(), Task::PredCls);
        assert!("sgdet".parse::<Task>().is_err());
    }
}
