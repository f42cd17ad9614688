//! Recall metrics against an exhaustive matcher, plus ordering properties.

#[path = "support/metric_oracle.rs"]
mod oracle;

use oracle::{library_recall, oracle_recall, random_image, ranked, Image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemata_core::evaluation::{recall_at_k, GtTriple, Task};
use schemata_numerics::Tensor;

fn instance(seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    (0..n).map(|_| random_image(&mut rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn library_matches_exhaustive_oracle(seed in any::<u64>(), k in 1usize..=22) {
        let images = instance(seed);
        for task in [Task::SgCls, Task::PredCls] {
            for constrained in [true, false] {
                prop_assert_eq!(
                    library_recall(&images, task, constrained, k),
                    oracle_recall(&images, task, constrained, k)
                );
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let images = instance(seed);
        for task in [Task::SgCls, Task::PredCls] {
            for constrained in [true, false] {
                let r: Vec<f64> = (1..=22).map(|k| library_recall(&images, task, constrained, k).0.unwrap()).collect();
                prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn constrained_output_is_a_subset(seed in any::<u64>()) {
        for img in instance(seed) {
            for task in [Task::SgCls, Task::PredCls] {
                let all = ranked(&img, task, false);
                let few = ranked(&img, task, true);
                prop_assert!(few.iter().all(|t| all.contains(t)));
                prop_assert!(few.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }
    }

    #[test]
    fn given_labels_help_when_confidences_are_equal(seed in any::<u64>(), k in 1usize..=22, conf in 0.4f64..1.0) {
        // Every object's top class carries the same probability, so both
        // tasks rank candidates identically and only label correctness differs.
        let mut images = instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        for img in &mut images {
            let c = img.objects.cols();
            let rest = (1.0 - conf) / (c - 1) as f64;
            img.objects = Tensor::from_fn(img.objects.shape(), |_| rest);
            for r in 0..img.objects.rows() {
                let top = rng.random_range(0..c);
                img.objects.row_mut(r)[top] = conf;
            }
        }
        for constrained in [true, false] {
            let sg = library_recall(&images, Task::SgCls, constrained, k).0.unwrap();
            let pc = library_recall(&images, Task::PredCls, constrained, k).0.unwrap();
            prop_assert!(sg <= pc, "sgcls {} > predcls {}", sg, pc);
        }
    }
}

fn two_pair_image(
    objects: Vec<Vec<f64>>,
    predicates: Vec<Vec<f64>>,
    gt: Vec<(usize, usize, usize)>,
) -> Image {
    let labels = vec![0, 0, 0, 0];
    Image {
        objects: Tensor::from_rows(&objects).unwrap(),
        predicates: Tensor::from_rows(&predicates).unwrap(),
        pairs: vec![(0, 1), (2, 3)],
        gt: gt
            .into_iter()
            .map(|(head, predicate, tail)| GtTriple {
                head,
                predicate,
                tail,
                head_label: 0,
                tail_label: 0,
            })
            .collect(),
        object_labels: labels,
    }
}

#[test]
fn object_confidence_can_favour_sgcls() {
    // Pair (0,1) is correct with 0.6; pair (2,3) is confidently wrong with 0.9
    // but its objects are uncertain.
    let sure = vec![1.0, 0.0];
    let img = two_pair_image(
        vec![sure.clone(), sure, vec![0.4, 0.35], vec![0.4, 0.35]],
        vec![vec![0.6, 0.4], vec![0.1, 0.9]],
        vec![(0, 0, 1)],
    );
    let images = [img];
    assert_eq!(library_recall(&images, Task::PredCls, true, 1).0, Some(0.0));
    assert_eq!(library_recall(&images, Task::SgCls, true, 1).0, Some(1.0));
}

#[test]
fn constrained_recall_can_exceed_unconstrained() {
    let img = two_pair_image(
        vec![vec![1.0, 0.0]; 4],
        vec![vec![0.5, 0.45, 0.05], vec![0.4, 0.3, 0.3]],
        vec![(2, 0, 3)],
    );
    let images = [img];
    assert_eq!(library_recall(&images, Task::PredCls, true, 2).0, Some(1.0));
    assert_eq!(
        library_recall(&images, Task::PredCls, false, 2).0,
        Some(0.0)
    );
}

#[test]
fn images_without_ground_truth_are_skipped() {
    let img = two_pair_image(
        vec![vec![1.0, 0.0]; 4],
        vec![vec![1.0, 0.0]; 2],
        vec![(0, 0, 1)],
    );
    let empty = two_pair_image(vec![vec![1.0, 0.0]; 4], vec![vec![1.0, 0.0]; 2], vec![]);
    let cases: Vec<_> = [img, empty]
        .iter()
        .map(|i| (ranked(i, Task::PredCls, true), i.gt.clone()))
        .collect();
    assert_eq!(recall_at_k(&cases, 1), Some(1.0));
    assert_eq!(recall_at_k(&cases[1..], 1), None);
}
