//! Synthetic scene worlds with a known class-level knowledge graph.
//!
//! A world fixes per-class feature prototypes, a predicate distribution for
//! every ordered class pair, a canonical head-relative-to-tail geometry per
//! predicate, and topics that make some classes co-occur. Scenes draw a
//! topic, object classes from it, a random spanning tree of relations plus
//! extra links, predicates from the pair distributions, and boxes laid out
//! from the predicate geometry.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    kb_from_records, KbTriple, ObjectRecord, RelationRecord, SceneRecord, Vocabulary,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldSpec {
    pub n_object_classes: usize,
    pub n_predicate_classes: usize,
    pub dim: usize,
    /// `|C^o| × d`
    pub prototypes: Vec<Vec<f32>>,
    /// Row `h·|C^o| + t`: predicate distribution of head class `h`, tail class `t`.
    pub pkg: Vec<Vec<f64>>,
    /// Mean `[t_x, t_y, t_w, t_h]` of each predicate.
    pub geometry: Vec<[f64; 4]>,
    pub geometry_noise: f64,
    /// Class weights per topic; scenes draw one topic uniformly.
    pub topics: Vec<Vec<f64>>,
    pub feature_noise: f64,
    pub occlusion_rate: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Inclusive object-count range per scene.
    pub objects_per_scene: [usize; 2],
    /// Extra relations per scene beyond the spanning tree, as a fraction of
    /// the object count.
    pub extra_relation_rate: f64,
    pub seed: u64,
}

/// Knobs for drawing a random world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_object_classes: usize,
    pub n_predicate_classes: usize,
    pub dim: usize,
    pub n_topics: usize,
    pub classes_per_topic: usize,
    /// Probability mass of each pair's majority predicate.
    pub majority_mass: f64,
    /// Predicates with nonzero probability per pair.
    pub pkg_support: usize,
    pub geometry_spread: f64,
    pub geometry_noise: f64,
    pub feature_noise: f64,
    pub occlusion_rate: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub objects_per_scene: [usize; 2],
    pub extra_relation_rate: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_object_classes: 20,
            n_predicate_classes: 10,
            dim: 64,
            n_topics: 5,
            classes_per_topic: 4,
            majority_mass: 0.75,
            pkg_support: 3,
            geometry_spread: 1.0,
            geometry_noise: 0.3,
            feature_noise: 2.5,
            occlusion_rate: 0.3,
            train_scenes: 2000,
            test_scenes: 500,
            objects_per_scene: [4, 8],
            extra_relation_rate: 0.25,
            seed: 0,
        }
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite nonnegative deviation")
}

impl SynthParams {
    pub fn world(&self) -> Result<SynthWorldSpec> {
        let (co, cp) = (self.n_object_classes, self.n_predicate_classes);
        if co == 0 || cp == 0 || self.dim == 0 {
            return Err(Error::invalid(
                "synthetic world needs classes and a positive width",
            ));
        }
        if self.n_topics == 0 || self.classes_per_topic == 0 || self.classes_per_topic > co {
            return Err(Error::invalid(
                "topics need between 1 and |C^o| classes each",
            ));
        }
        if self.pkg_support == 0
            || self.pkg_support > cp
            || !(0.0..=1.0).contains(&self.majority_mass)
        {
            return Err(Error::invalid(
                "pkg support must lie in 1..=|C^p| and majority mass in [0, 1]",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x05ee_d0f3_a11d);
        let unit = normal(1.0);
        let prototypes = (0..co)
            .map(|_| {
                (0..self.dim)
                    .map(|_| unit.sample(&mut rng) as f32)
                    .collect()
            })
            .collect();
        // Topics take consecutive runs of one shuffled class order, so they
        // partition the classes whenever `n_topics · classes_per_topic ≤ |C^o|`.
        let mut classes: Vec<usize> = (0..co).collect();
        classes.shuffle(&mut rng);
        let topics = (0..self.n_topics)
            .map(|k| {
                let mut w = vec![0.0; co];
                for i in 0..self.classes_per_topic {
                    w[classes[(k * self.classes_per_topic + i) % co]] = 1.0;
                }
                w
            })
            .collect();
        let mut preds: Vec<usize> = (0..cp).collect();
        let pkg = (0..co * co)
            .map(|_| {
                preds.shuffle(&mut rng);
                let mut row = vec![0.0; cp];
                if self.pkg_support == 1 {
                    row[preds[0]] = 1.0;
                } else {
                    row[preds[0]] = self.majority_mass;
                    let rest = (1.0 - self.majority_mass) / (self.pkg_support - 1) as f64;
                    for &p in &preds[1..self.pkg_support] {
                        row[p] = rest;
                    }
                }
                row
            })
            .collect();
        let spread = normal(self.geometry_spread);
        let geometry = (0..cp)
            .map(|_| {
                [
                    spread.sample(&mut rng),
                    spread.sample(&mut rng),
                    0.5 * spread.sample(&mut rng),
                    0.5 * spread.sample(&mut rng),
                ]
            })
            .collect();
        let spec = SynthWorldSpec {
            n_object_classes: co,
            n_predicate_classes: cp,
            dim: self.dim,
            prototypes,
            pkg,
            geometry,
            geometry_noise: self.geometry_noise,
            topics,
            feature_noise: self.feature_noise,
            occlusion_rate: self.occlusion_rate,
            train_scenes: self.train_scenes,
            test_scenes: self.test_scenes,
            objects_per_scene: self.objects_per_scene,
            extra_relation_rate: self.extra_relation_rate,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub vocab: Vocabulary,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
    /// Class-level triple counts of the train split.
    pub kb: Vec<KbTriple>,
}

pub fn object_class_name(c: usize) -> String {
    format!("obj{c:02}")
}

pub fn predicate_class_name(p: usize) -> String {
    format!("rel{p:02}")
}

impl SynthWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let (co, cp) = (self.n_object_classes, self.n_predicate_classes);
        let fail = |m: String| Err(Error::invalid(format!("synthetic world: {m}")));
        if co == 0 || cp == 0 {
            return fail("zero classes".into());
        }
        if self.prototypes.len() != co || self.prototypes.iter().any(|p| p.len() != self.dim) {
            return fail(format!("need {co} prototypes of width {}", self.dim));
        }
        if self.pkg.len() != co * co {
            return fail(format!("pkg needs {} rows", co * co));
        }
        for (i, row) in self.pkg.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != cp
                || row.iter().any(|&p| p.is_nan() || p < 0.0)
                || (s - 1.0).abs() > 1e-9
            {
                return fail(format!(
                    "pkg row {i} is not a distribution over {cp} predicates"
                ));
            }
        }
        if self.geometry.len() != cp || self.geometry.iter().flatten().any(|v| !v.is_finite()) {
            return fail(format!("need {cp} finite geometry rows"));
        }
        if self.topics.is_empty()
            || self.topics.iter().any(|t| {
                t.len() != co
                    || t.iter().any(|&w| w.is_nan() || w < 0.0)
                    || t.iter().sum::<f64>() <= 0.0
            })
        {
            return fail("topics need nonnegative class weights with positive sum".into());
        }
        if !(0.0..1.0).contains(&self.occlusion_rate) {
            return fail(format!(
                "occlusion rate {} outside [0, 1)",
                self.occlusion_rate
            ));
        }
        if !(self.feature_noise >= 0.0
            && self.geometry_noise >= 0.0
            && self.extra_relation_rate >= 0.0)
        {
            return fail("noise levels and extra-relation rate must be nonnegative".into());
        }
        let [lo, hi] = self.objects_per_scene;
        if lo < 2 || hi < lo {
            return fail(format!(
                "objects per scene {lo}..={hi} needs 2 <= min <= max"
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(
            (0..self.n_object_classes).map(object_class_name).collect(),
            (0..self.n_predicate_classes)
                .map(predicate_class_name)
                .collect(),
        )
        .expect("generated names are distinct")
    }

    /// Draws a predicate for an ordered class pair.
    pub fn sample_predicate<R: Rng + ?Sized>(
        &self,
        head: usize,
        tail: usize,
        rng: &mut R,
    ) -> usize {
        let row = &self.pkg[head * self.n_object_classes + tail];
        WeightedIndex::new(row)
            .expect("validated distribution")
            .sample(rng)
    }

    fn scene<R: Rng + ?Sized>(&self, id: String, rng: &mut R) -> SceneRecord {
        let topic = &self.topics[rng.random_range(0..self.topics.len())];
        let class_dist = WeightedIndex::new(topic).expect("validated weights");
        let n = rng.random_range(self.objects_per_scene[0]..=self.objects_per_scene[1]);
        let classes: Vec<usize> = (0..n).map(|_| class_dist.sample(rng)).collect();

        // Spanning tree in insertion order: object i links to an earlier one.
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut linked: HashSet<(usize, usize)> = HashSet::new();
        for i in 1..n {
            let j = rng.random_range(0..i);
            let pair = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
            pairs.push(pair);
            linked.insert((i.min(j), i.max(j)));
        }
        let tree_edges = pairs.len();
        let max_links = n * (n - 1) / 2;
        let extra =
            ((self.extra_relation_rate * n as f64).round() as usize).min(max_links - tree_edges);
        while pairs.len() < tree_edges + extra {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b && linked.insert((a.min(b), a.max(b))) {
                pairs.push((a, b));
            }
        }
        let predicates: Vec<usize> = pairs
            .iter()
            .map(|&(h, t)| self.sample_predicate(classes[h], classes[t], rng))
            .collect();

        // Boxes: root at the origin; each tree edge places its new endpoint
        // from the predicate's geometry.
        let geo_noise = normal(self.geometry_noise);
        let mut boxes = vec![[0.0f64; 4]; n];
        boxes[0] = [0.0, 0.0, 1.0, 1.0];
        for (k, &(h, t)) in pairs[..tree_edges].iter().enumerate() {
            let g = self.geometry[predicates[k]];
            let v: Vec<f64> = g.iter().map(|&m| m + geo_noise.sample(rng)).collect();
            let new = k + 1;
            if h == new {
                let [xt, yt, wt, ht] = boxes[t];
                boxes[h] = [
                    xt + v[0] * wt,
                    yt + v[1] * ht,
                    wt * v[2].exp(),
                    ht * v[3].exp(),
                ];
            } else {
                let [xh, yh, wh, hh] = boxes[h];
                let (wt, ht) = (wh / v[2].exp(), hh / v[3].exp());
                boxes[t] = [xh - v[0] * wt, yh - v[1] * ht, wt, ht];
            }
        }
        let feat_noise = normal(self.feature_noise);
        let objects = classes
            .iter()
            .zip(&boxes)
            .map(|(&c, b)| {
                let occluded = rng.random_bool(self.occlusion_rate);
                let feature = self.prototypes[c]
                    .iter()
                    .map(|&p| {
                        let base = if occluded { 0.0 } else { p as f64 };
                        (base + feat_noise.sample(rng)) as f32
                    })
                    .collect();
                ObjectRecord {
                    bbox: *b,
                    label: object_class_name(c),
                    feature: Some(feature),
                }
            })
            .collect();
        let relations = pairs
            .iter()
            .zip(&predicates)
            .map(|(&(h, t), &p)| RelationRecord {
                head: h,
                predicate: predicate_class_name(p),
                tail: t,
            })
            .collect();
        SceneRecord {
            id,
            objects,
            relations,
        }
    }
}

/// Train and test scenes plus the train split's class-level knowledge base.
pub fn synth_generate(spec: &SynthWorldSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train: Vec<SceneRecord> = (0..spec.train_scenes)
        .map(|i| spec.scene(format!("train-{i}"), &mut rng))
        .collect();
    let test: Vec<SceneRecord> = (0..spec.test_scenes)
        .map(|i| spec.scene(format!("test-{i}"), &mut rng))
        .collect();
    Ok(SynthData {
        vocab: spec.vocabulary(),
        kb: kb_from_records(&train),
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthParams {
        SynthParams {
            n_object_classes: 5,
            n_predicate_classes: 4,
            dim: 6,
            n_topics: 2,
            classes_per_topic: 3,
            train_scenes: 30,
            test_scenes: 10,
            ..SynthParams::default()
        }
    }

    #[test]
    fn noiseless_unoccluded_features_equal_prototypes() {
        let mut spec = small().world().unwrap();
        spec.occlusion_rate = 0.0;
        spec.feature_noise = 0.0;
        let data = synth_generate(&spec).unwrap();
        for rec in data.train.iter().chain(&data.test) {
            for o in &rec.objects {
                let c = data.vocab.object_index(&o.label).unwrap();
                assert_eq!(o.feature.as_ref().unwrap(), &spec.prototypes[c]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let spec = small().world().unwrap();
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.kb, b.kb);
        assert_eq!(small().world().unwrap(), spec);
        for rec in a.train.iter().chain(&a.test) {
            rec.validate(&a.vocab, Some(6)).unwrap();
            let n = rec.objects.len();
            assert!((4..=8).contains(&n));
            let mut touched = vec![false; n];
            for r in &rec.relations {
                touched[r.head] = true;
                touched[r.tail] = true;
            }
            assert!(touched.iter().all(|&t| t));
        }
        let train_ids: HashSet<_> = a.train.iter().map(|r| &r.id).collect();
        assert!(a.test.iter().all(|r| !train_ids.contains(&r.id)));
        let kb_total: u64 = a.kb.iter().map(|t| t.count).sum();
        assert_eq!(
            kb_total as usize,
            a.train.iter().map(|r| r.relations.len()).sum::<usize>()
        );
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(SynthParams {
            n_object_classes: 0,
            ..small()
        }
        .world()
        .is_err());
        let mut spec = small().world().unwrap();
        spec.occlusion_rate = 1.0;
        assert!(synth_generate(&spec).is_err());
    }
}
