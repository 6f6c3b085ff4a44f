use std::collections::BTreeMap;

use gaclab::data::Pair;
use gaclab::metrics::{
    best_threshold_accuracy, biasness, correlation_histogram, kl_divergence, ratio_distribution, relative_entropy,
    verification_accuracy,
};
use gaclab::{Execution, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every score (and one below all) as a threshold; genuine iff score > t.
fn exhaustive_accuracy(scores: &[(f64, bool)]) -> f64 {
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.push(f64::NEG_INFINITY);
    thresholds
        .iter()
        .map(|&t| scores.iter().filter(|&&(s, g)| (s > t) == g).count())
        .max()
        .unwrap() as f64
        / scores.len() as f64
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::new(vec![r.len(), r[0].len()], r.concat()).unwrap()
}

#[test]
fn verification_examples() {
    let separable = [(0.9, true), (0.9, true), (0.1, false), (0.1, false)];
    assert_eq!(best_threshold_accuracy(&separable).accuracy, 1.0);
    let flat = [(0.3, true), (0.3, false), (0.3, true), (0.3, false)];
    assert_eq!(best_threshold_accuracy(&flat).accuracy, 0.5);
    let mixed = [(0.8, true), (0.6, true), (0.7, false), (0.1, false)];
    assert_eq!(exhaustive_accuracy(&mixed), 0.75);
    assert_eq!(best_threshold_accuracy(&mixed).accuracy, 0.75);
}

#[test]
fn verification_scores_cosines_per_group() {
    let emb = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]);
    let pairs = [
        Pair { idx_a: 0, idx_b: 1, genuine: true, group: 0 },
        Pair { idx_a: 0, idx_b: 2, genuine: false, group: 0 },
        Pair { idx_a: 2, idx_b: 3, genuine: true, group: 2 },
    ];
    let acc = verification_accuracy(&pairs, &emb, 3, Execution::Sequential).unwrap();
    assert_eq!(acc.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
    assert_eq!(acc[&0].accuracy, 1.0);
    assert_eq!(acc[&0].pairs, 2);
    let bad = [Pair { idx_a: 0, idx_b: 9, genuine: true, group: 0 }];
    assert!(verification_accuracy(&bad, &emb, 3, Execution::Sequential).is_err());
}

#[test]
fn biasness_reproduces_published_rows() {
    for (accs, avg, std) in [
        ([96.20, 94.77, 94.87, 94.98], 95.21, 0.58),
        ([96.27, 95.00, 94.82, 94.68], 95.19, 0.63),
        ([95.95, 93.67, 94.33, 94.78], 94.68, 0.83),
    ] {
        let b = biasness(&accs).unwrap();
        assert!((b.average - avg).abs() <= 0.005, "{accs:?}: {}", b.average);
        assert!((b.std - std).abs() <= 0.005, "{accs:?}: {}", b.std);
    }
    assert_eq!(biasness(&[0.9; 4]).unwrap().std, 0.0);
    assert_eq!(biasness(&[1.0, 3.0]).unwrap().std, 1.0);
    assert!(biasness(&[0.9]).is_err());
}

#[test]
fn ratio_of_hand_computed_subjects() {
    let emb = rows(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0], &[0.5, 0.5], &[0.5, 0.5]]);
    let r = ratio_distribution(&emb, &[0, 0, 1, 2, 2], &[0, 0, 0, 0, 0], Execution::Sequential);
    // Subject 1 has one image and subject 2 coincident images.
    assert_eq!(r[&0].len(), 1);
    assert_eq!(r[&0][0].identity, 0);
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let own = [[1.0, 0.0], [0.8, 0.6]];
    let others = [[0.0, 1.0], [0.5, 0.5]];
    let inter = own
        .iter()
        .flat_map(|a| others.iter().map(move |b| dist(*a, *b)))
        .fold(f64::INFINITY, f64::min);
    let intra = dist(own[0], own[1]);
    assert!((r[&0][0].ratio - inter / intra).abs() < 1e-12);

    let two = rows(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0]]);
    let r = ratio_distribution(&two, &[0, 0, 1], &[0, 0, 0], Execution::Sequential);
    assert!((r[&0][0].ratio - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn two_bin_divergence() {
    let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    let got = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
    assert!((got - want).abs() < 1e-15);
    assert!((got - 0.1438).abs() < 1e-3);

    let mut sets = BTreeMap::new();
    sets.insert(0, vec![0.1, 0.2, 0.3]);
    sets.insert(1, vec![0.1, 0.2, 0.3]);
    sets.insert(2, vec![]);
    let kl = relative_entropy(&sets, 0, 8).unwrap();
    assert_eq!(kl[&0], 0.0);
    assert!(kl[&1].abs() < 1e-12);
    assert!(!kl.contains_key(&2));
}

#[test]
fn divergence_is_nonnegative_on_random_sets() {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sets = BTreeMap::new();
        for g in 0..3 {
            let n = rng.gen_range(1..30);
            sets.insert(g, (0..n).map(|_| rng.gen_range(0.0..3.0)).collect::<Vec<f64>>());
        }
        let kl = relative_entropy(&sets, 0, rng.gen_range(1..65)).unwrap();
        assert!(kl.values().all(|&v| v >= -1e-12), "seed {seed}: {kl:?}");
    }
}

#[test]
fn correlation_examples() {
    let same = rows(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]);
    let h = correlation_histogram(&same, &[0, 1, 2], 10, 4).unwrap();
    assert_eq!(h.counts, vec![0, 0, 0, 3]);

    let opposite = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let h = correlation_histogram(&opposite, &[0, 1], 10, 4).unwrap();
    assert_eq!(h.counts, vec![1, 0, 0, 0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let many = Tensor::new(vec![12, 5], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let ids = [0, 0, 1, 2, 2, 3, 4, 5, 6, 7, 8, 9];
    assert_eq!(correlation_histogram(&many, &ids, 100, 16).unwrap().total(), 45);
    assert_eq!(correlation_histogram(&many, &ids, 4, 16).unwrap().total(), 6);
    assert!(correlation_histogram(&many, &[0; 12], 100, 16).is_err());
}

/// Random orthogonal matrix from Gram-Schmidt.
fn rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn accuracy_ignores_monotone_rescoring(raw in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 1..40)) {
        let base = best_threshold_accuracy(&raw).accuracy;
        prop_assert_eq!(base, exhaustive_accuracy(&raw));
        for f in [|s: f64| s.exp(), |s: f64| s.powi(3), |s: f64| 5.0 * s - 2.0, |s: f64| s.atan()] {
            let moved: Vec<(f64, bool)> = raw.iter().map(|&(s, g)| (f(s), g)).collect();
            prop_assert_eq!(best_threshold_accuracy(&moved).accuracy, base);
        }
    }

    #[test]
    fn biasness_shift_and_scale(accs in prop::collection::vec(0.0f64..100.0, 2..8), c in -50.0f64..50.0, k in 0.01f64..10.0) {
        let b = biasness(&accs).unwrap();
        let shifted: Vec<f64> = accs.iter().map(|a| a + c).collect();
        let scaled: Vec<f64> = accs.iter().map(|a| a * k).collect();
        prop_assert!(b.std >= 0.0);
        prop_assert!((biasness(&shifted).unwrap().std - b.std).abs() <= 1e-9);
        prop_assert!((biasness(&scaled).unwrap().std - k * b.std).abs() <= 1e-9 * (1.0 + k * b.std));
        prop_assert!((b.average - accs.iter().sum::<f64>() / accs.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn ratios_survive_rotation_and_duplication(seed in any::<u64>(), d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let ids: Vec<usize> = (0..n).map(|i| i / 3).collect();
        let groups: Vec<usize> = (0..n).map(|i| (i / 3) % 2).collect();
        let emb = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let base = ratio_distribution(&emb, &ids, &groups, Execution::Sequential);

        let q = rotation(d, &mut rng);
        let mut turned = Vec::with_capacity(n * d);
        for i in 0..n {
            turned.extend(q.iter().map(|row| row.iter().zip(emb.row(i)).map(|(a, b)| a * b).sum::<f64>()));
        }
        let turned = ratio_distribution(&Tensor::new(vec![n, d], turned).unwrap(), &ids, &groups, Execution::Parallel);
        for (g, list) in &base {
            for (a, b) in list.iter().zip(&turned[g]) {
                prop_assert_eq!(a.identity, b.identity);
                prop_assert!((a.ratio - b.ratio).abs() <= 1e-9 * a.ratio.max(1.0));
            }
        }

        let doubled = Tensor::new(vec![2 * n, d], [emb.data(), emb.data()].concat()).unwrap();
        let twice = ratio_distribution(&doubled, &[ids.clone(), ids.clone()].concat(), &[groups.clone(), groups.clone()].concat(), Execution::Sequential);
        prop_assert_eq!(twice, base);
    }
}
