use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use tvts::evalkit::{median_rank, text_to_video_retrieval, train_probe, zero_shot_video_retrieval, EmbeddingIndex, ProbeConfig, TextQuery};
use tvts::rng::derived_rng;

fn unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:04}")).collect()
}

fn random_index(n: usize, classes: usize, d: usize, rng: &mut impl Rng) -> EmbeddingIndex {
    let labels = (0..n).map(|i| i % classes).collect();
    let rows = (0..n).map(|_| unit(d, rng)).collect();
    EmbeddingIndex::new(ids(n), labels, rows).unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn rotation(d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

fn rotate(r: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    r.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn zero_shot_chance_level_matches_category_odds() {
    let (n, classes) = (100, 10);
    let m = n / classes;
    let mut total = 0.0;
    for seed in 0..20 {
        let index = random_index(n, classes, 16, &mut derived_rng(seed, &[1]));
        total += zero_shot_video_retrieval(&index).unwrap().r1;
    }
    let expect = (m - 1) as f64 / (n - 1) as f64;
    assert!((total / 20.0 - expect).abs() < 0.03, "{} vs {expect}", total / 20.0);
}

#[test]
fn text_to_video_chance_median_rank() {
    let n = 100;
    let mut total = 0.0;
    for seed in 0..20 {
        let mut rng = derived_rng(seed, &[2]);
        let index = random_index(n, 10, 16, &mut rng);
        let texts: Vec<TextQuery> = ids(n)
            .into_iter()
            .map(|video_id| TextQuery { video_id, embedding: unit(16, &mut rng) })
            .collect();
        total += text_to_video_retrieval(&index, &texts).unwrap().medr;
    }
    let medr = total / 20.0;
    assert!((medr - n as f64 / 2.0).abs() < n as f64 / 10.0, "{medr}");
}

#[test]
fn median_of_odd_ranks() {
    assert_eq!(median_rank(&[1, 3, 5]).unwrap(), 3.0);
}

#[test]
fn shuffled_labels_give_chance_probe() {
    let mut rng = derived_rng(9, &[]);
    let classes = 10;
    let make = |n: usize, rng: &mut tvts::rng::Rng| -> (Vec<Vec<f64>>, Vec<usize>) {
        (0..n).map(|_| (unit(12, rng), rng.gen_range(0..classes))).unzip()
    };
    let mut acc = 0.0;
    for _ in 0..5 {
        let (xtr, ytr) = make(400, &mut rng);
        let (xte, yte) = make(400, &mut rng);
        acc += train_probe(&xtr, &ytr, &xte, &yte, classes, &ProbeConfig { epochs: 20, ..ProbeConfig::default() })
            .unwrap()
            .1;
    }
    assert!((acc / 5.0 - 0.1).abs() < 0.05, "{}", acc / 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recall_is_monotone(seed in 0u64..10_000, n in 4usize..60, classes in 2usize..6) {
        // Every category needs a second item to be queried at all.
        let classes = classes.min(n / 2);
        let mut rng = derived_rng(seed, &[3]);
        let index = random_index(n, classes, 6, &mut rng);
        let r = zero_shot_video_retrieval(&index).unwrap();
        prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 1.0);
        let texts: Vec<TextQuery> = ids(n)
            .into_iter()
            .map(|video_id| TextQuery { video_id, embedding: unit(6, &mut rng) })
            .collect();
        let r = text_to_video_retrieval(&index, &texts).unwrap();
        prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 1.0);
        prop_assert!(r.medr >= 1.0 && r.medr <= n as f64);
    }

    #[test]
    fn rankings_survive_rotation(seed in 0u64..10_000, n in 6usize..40) {
        let d = 8;
        let mut rng = derived_rng(seed, &[4]);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit(d, &mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rot = rotation(d, &mut rng);
        let turned: Vec<Vec<f64>> = rows.iter().map(|r| rotate(&rot, r)).collect();
        let a = EmbeddingIndex::new(ids(n), labels.clone(), rows.clone()).unwrap();
        let b = EmbeddingIndex::new(ids(n), labels, turned.clone()).unwrap();
        for q in 0..n {
            prop_assert_eq!(a.rank(&rows[q], Some(q)), b.rank(&turned[q], Some(q)));
        }
        prop_assert_eq!(zero_shot_video_retrieval(&a).unwrap(), zero_shot_video_retrieval(&b).unwrap());
    }

    #[test]
    fn median_lies_between_extremes(ranks in prop::collection::vec(1usize..500, 1..40)) {
        let m = median_rank(&ranks).unwrap();
        let below = ranks.iter().filter(|&&r| r as f64 <= m).count();
        let above = ranks.iter().filter(|&&r| r as f64 >= m).count();
        prop_assert!(2 * below >= ranks.len() && 2 * above >= ranks.len());
    }
}
