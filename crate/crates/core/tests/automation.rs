use gaclab::automation::{
    adapt_decision, merge_rows, pairwise_cosine, replay_merged_layers, similarity_report, AutomationConfig, Decision,
    Monitor,
};
use gaclab::layers::{adaptive_conv_forward, KernelMaskBank, Network, NetworkConfig, Placement, Preset};
use gaclab::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn cfg(tau: f64, allow_resplit: bool) -> AutomationConfig {
    AutomationConfig {
        tau,
        allow_resplit,
        ..AutomationConfig::default()
    }
}

fn tiny(nd: usize) -> Network {
    Network::new(
        NetworkConfig {
            preset: Preset::Tiny,
            image_size: 8,
            embedding_dim: 4,
            nd,
            placement: Placement::Automatic,
            ..NetworkConfig::default()
        },
        0,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_row_scaling_keeps_cosines(seed in any::<u64>(), nd in 2usize..6, scale in 0.01f64..100.0, tau in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random(&[nd, 2, 3, 3], &mut rng);
        let row = rng.gen_range(0..nd);
        let mut scaled = bank.clone();
        scaled.row_mut(row).iter_mut().for_each(|v| *v *= scale);
        let (a, b) = (similarity_report(0, &bank, 1).unwrap(), similarity_report(0, &scaled, 1).unwrap());
        prop_assert!((a.mean_similarity - b.mean_similarity).abs() < 1e-12);
        // Values within rounding of tau may legitimately flip.
        prop_assume!((a.mean_similarity - tau).abs() > 1e-9);
        prop_assert_eq!(adapt_decision(&a, &cfg(tau, true)), adapt_decision(&b, &cfg(tau, true)));
    }

    #[test]
    fn theta_has_unit_diagonal_and_bounded_mean(seed in any::<u64>(), nd in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random(&[nd, 5], &mut rng);
        let r = similarity_report(0, &bank, 1).unwrap();
        for i in 0..nd {
            prop_assert!((r.theta[i][i] - 1.0).abs() <= 1e-12);
            for j in 0..nd {
                prop_assert_eq!(r.theta[i][j], r.theta[j][i]);
            }
        }
        prop_assert!((-1.0..=1.0).contains(&r.mean_similarity));
    }

    #[test]
    fn merging_twice_equals_merging_once(seed in any::<u64>(), nd in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut once = random(&[nd, 3, 2], &mut rng);
        merge_rows(&mut once);
        let mut twice = once.clone();
        merge_rows(&mut twice);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    // Under "merge iff mean similarity > tau", lowering tau can only add
    // merged layers.
    #[test]
    fn lower_threshold_merges_a_superset(seed in any::<u64>(), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0, resplit in any::<bool>()) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snapshots: Vec<Vec<Tensor>> = (0..6)
            .map(|_| (0..5).map(|_| random(&[4, 6], &mut rng)).collect())
            .collect();
        let low = replay_merged_layers(&snapshots, &cfg(lo, resplit));
        let high = replay_merged_layers(&snapshots, &cfg(hi, resplit));
        prop_assert!(high.is_subset(&low), "tau {} -> {:?}, tau {} -> {:?}", lo, low, hi, high);
    }
}

#[test]
fn merged_masks_route_every_group_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = random(&[3, 2, 3, 3], &mut rng);
    let mut masks = random(&[4, 2, 3, 3], &mut rng);
    let input = random(&[2, 5, 5], &mut rng);
    merge_rows(&mut masks);
    let bank = KernelMaskBank::from_tensor(masks).unwrap();
    let first = adaptive_conv_forward(&input, &base, &bank, 0, 1, 1).unwrap();
    for g in 1..4 {
        assert_eq!(adaptive_conv_forward(&input, &base, &bank, g, 1, 1).unwrap().data(), first.data());
    }
}

#[test]
fn degenerate_vectors_are_rejected() {
    assert!(pairwise_cosine(&[vec![0.0, 0.0], vec![1.0, 0.0]]).is_err());
}

#[test]
fn frozen_banks_converge_after_the_window() {
    let mut net = tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Dissimilar rows keep every layer adaptive at tau = 0.99.
    for (_, p) in net.params_mut().iter_mut() {
        if p.name.ends_with(".masks") || p.name.ends_with(".maps") {
            let shape = p.value.shape().to_vec();
            p.value = random(&shape, &mut rng);
        }
    }
    let config = AutomationConfig {
        tau: 0.99,
        stability_window: 3,
        check_period: 1,
        ..AutomationConfig::default()
    };
    let layers = net.adaptive_layers().len();
    let mut monitor = Monitor::new(config, layers).unwrap();
    for step in 1..=3 {
        assert!(!monitor.converged(net.adaptive_layers(), 3));
        let reports = monitor.check(&mut net, step);
        assert_eq!(reports.len(), layers);
    }
    assert!(monitor.converged(net.adaptive_layers(), 3));
    for layer in net.adaptive_layers() {
        let history: Vec<f64> = layer.state.similarity_history.iter().map(|h| h.1).collect();
        assert!(history.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn single_group_network_reports_nothing() {
    let mut net = tiny(1);
    let mut monitor = Monitor::new(AutomationConfig::default(), net.adaptive_layers().len()).unwrap();
    assert!(monitor.check(&mut net, 100).is_empty());
    assert!(monitor.converged(net.adaptive_layers(), 1));
    assert!(net.adaptive_layers().iter().all(|l| l.state.shared_flag));
}

#[test]
fn merged_layers_stay_merged_without_resplit() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = tiny(4);
    let config = AutomationConfig {
        tau: 0.0,
        check_period: 1,
        allow_resplit: false,
        ..AutomationConfig::default()
    };
    let mut monitor = Monitor::new(config, net.adaptive_layers().len()).unwrap();
    let mut merged = Vec::new();
    for step in 1..=8 {
        for (_, p) in net.params_mut().iter_mut() {
            if p.name.ends_with(".masks") || p.name.ends_with(".maps") {
                for v in p.value.data_mut() {
                    *v += rng.gen_range(-1.0..1.0);
                }
            }
        }
        monitor.check(&mut net, step);
        merged.push(net.adaptive_layers().iter().filter(|l| l.state.shared_flag).count());
    }
    assert!(merged.windows(2).all(|w| w[0] <= w[1]), "{merged:?}");
    assert!(merged[0] > 0);
}

#[test]
fn identical_rows_merge_at_default_tau() {
    let bank = Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap();
    let r = similarity_report(0, &bank, 1).unwrap();
    assert_eq!(adapt_decision(&r, &AutomationConfig::default()), Decision::Merge);
}
