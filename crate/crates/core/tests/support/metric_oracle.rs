//! Exhaustive reference implementation of triple ranking and recall, plus a
//! generator of small random evaluation instances.

#![allow(dead_code)]

use rand::Rng;
use schemata_core::evaluation::{
    apply_graph_constraint, mean_recall_at_k, recall_at_k, score_triples, GtTriple, ScoredTriple,
    Task,
};
use schemata_numerics::Tensor;

pub struct Image {
    pub objects: Tensor<f64>,
    pub predicates: Tensor<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub object_labels: Vec<usize>,
    pub gt: Vec<GtTriple>,
}

pub const OBJECT_CLASSES: usize = 3;
pub const PREDICATE_CLASSES: usize = 4;

/// Coarsely quantised distribution so that ties are common.
fn coarse_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0..4) as f64 + 0.5 * rng.random_range(0..2) as f64)
        .collect();
    let s: f64 = w.iter().sum();
    if s == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    w.iter().map(|v| v / s).collect()
}

/// One image: up to 3 objects, 1 to 5 annotated pairs (repeats allowed).
pub fn random_image<R: Rng>(rng: &mut R) -> Image {
    let n = rng.random_range(2..=3);
    let m = rng.random_range(1..=5);
    let pairs: Vec<(usize, usize)> = (0..m)
        .map(|_| {
            let h = rng.random_range(0..n);
            let t = (h + rng.random_range(1..n)) % n;
            (h, t)
        })
        .collect();
    let object_labels: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..OBJECT_CLASSES))
        .collect();
    let objects = rows(
        &(0..n)
            .map(|_| coarse_row(rng, OBJECT_CLASSES))
            .collect::<Vec<_>>(),
    );
    let predicates = rows(
        &(0..m)
            .map(|_| coarse_row(rng, PREDICATE_CLASSES))
            .collect::<Vec<_>>(),
    );
    let gt = pairs
        .iter()
        .map(|&(h, t)| GtTriple {
            head: h,
            predicate: rng.random_range(0..PREDICATE_CLASSES),
            tail: t,
            head_label: object_labels[h],
            tail_label: object_labels[t],
        })
        .collect();
    Image {
        objects,
        predicates,
        pairs,
        object_labels,
        gt,
    }
}

fn rows(r: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(r).unwrap()
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy)]
struct Candidate {
    pair: usize,
    head: usize,
    tail: usize,
    class: usize,
    head_label: usize,
    tail_label: usize,
    score: f64,
}

fn beats(a: &Candidate, b: &Candidate) -> bool {
    a.score > b.score || (a.score == b.score && (a.pair, a.class) < (b.pair, b.class))
}

/// Matched flag for every GT triple of `img`, by exhaustive comparison.
pub fn oracle_hits(img: &Image, task: Task, constrained: bool, k: usize) -> Vec<bool> {
    let (labels, conf): (Vec<usize>, Vec<f64>) = (0..img.objects.rows())
        .map(|i| match task {
            Task::SgCls => {
                let c = first_argmax(img.objects.row(i));
                (c, img.objects.at(i, c))
            }
            Task::PredCls => (img.object_labels[i], 1.0),
        })
        .unzip();
    let mut all = Vec::new();
    for (pair, &(h, t)) in img.pairs.iter().enumerate() {
        for class in 0..img.predicates.cols() {
            all.push(Candidate {
                pair,
                head: h,
                tail: t,
                class,
                head_label: labels[h],
                tail_label: labels[t],
                score: conf[h] * conf[t] * img.predicates.at(pair, class),
            });
        }
    }
    let kept: Vec<Candidate> = all
        .iter()
        .filter(|x| {
            !constrained
                || !all
                    .iter()
                    .any(|y| (y.head, y.tail) == (x.head, x.tail) && beats(y, x))
        })
        .copied()
        .collect();
    let top: Vec<Candidate> = kept
        .iter()
        .filter(|x| kept.iter().filter(|y| beats(y, x)).count() < k)
        .copied()
        .collect();
    img.gt
        .iter()
        .map(|g| {
            top.iter().any(|c| {
                (c.head, c.tail, c.class, c.head_label, c.tail_label)
                    == (g.head, g.tail, g.predicate, g.head_label, g.tail_label)
            })
        })
        .collect()
}

/// `(R@K, mR@K)` from the exhaustive matcher.
pub fn oracle_recall(
    images: &[Image],
    task: Task,
    constrained: bool,
    k: usize,
) -> (Option<f64>, Option<f64>) {
    let mut per_image = Vec::new();
    let mut hit = [0usize; PREDICATE_CLASSES];
    let mut total = [0usize; PREDICATE_CLASSES];
    for img in images {
        let hits = oracle_hits(img, task, constrained, k);
        if !img.gt.is_empty() {
            per_image.push(hits.iter().filter(|&&h| h).count() as f64 / img.gt.len() as f64);
        }
        for (g, h) in img.gt.iter().zip(hits) {
            total[g.predicate] += 1;
            hit[g.predicate] += h as usize;
        }
    }
    let r = (!per_image.is_empty()).then(|| per_image.iter().sum::<f64>() / per_image.len() as f64);
    let present: Vec<f64> = hit
        .iter()
        .zip(&total)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    let mr = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (r, mr)
}

pub fn ranked(img: &Image, task: Task, constrained: bool) -> Vec<ScoredTriple> {
    let scored = score_triples(
        &img.objects,
        &img.predicates,
        &img.pairs,
        task,
        &img.object_labels,
    );
    apply_graph_constraint(&scored, constrained)
}

/// `(R@K, mR@K)` from the library.
pub fn library_recall(
    images: &[Image],
    task: Task,
    constrained: bool,
    k: usize,
) -> (Option<f64>, Option<f64>) {
    let cases: Vec<(Vec<ScoredTriple>, Vec<GtTriple>)> = images
        .iter()
        .map(|img| (ranked(img, task, constrained), img.gt.clone()))
        .collect();
    (
        recall_at_k(&cases, k),
        mean_recall_at_k(&cases, k, PREDICATE_CLASSES),
    )
}
