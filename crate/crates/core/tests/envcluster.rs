mod common;

use common::random_matrix;
use disc_core::envcluster::{
    adjusted_rand_index, build_environments, cluster_per_class, fit_gmm, silhouette_score, ClassClusters, GmmParams,
};
use disc_core::model::{Classifier, Encoder, LossKind};
use disc_core::rng;
use disc_core::synthdata::{self, DataConfig, CLASSES};
use disc_core::Matrix;
use proptest::prelude::*;

fn two_blobs(n_each: usize, gap: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng::stream(seed, "blobs");
    let mut m = random_matrix(2 * n_each, 3, &mut r);
    let mut truth = Vec::with_capacity(2 * n_each);
    for i in 0..2 * n_each {
        let c = usize::from(i >= n_each);
        m[(i, 0)] += gap * c as f64;
        truth.push(c);
    }
    (m, truth)
}

#[test]
fn well_separated_blobs_are_recovered() {
    for seed in 0..5 {
        let (x, truth) = two_blobs(200, 12.0, seed);
        let fit = fit_gmm(&x, 2, &GmmParams::default(), &mut rng::stream(seed, "fit")).unwrap();
        assert_eq!(adjusted_rand_index(&fit.assignments, &truth).unwrap(), 1.0, "seed {seed}");
    }
}

#[test]
fn em_log_likelihood_never_decreases() {
    for seed in 0..10 {
        let (x, _) = two_blobs(150, 2.0, seed);
        let params = GmmParams { n_init: 1, ..GmmParams::default() };
        let fit = fit_gmm(&x, 3, &params, &mut rng::stream(seed, "fit")).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn responsibilities_are_distributions() {
    let (x, _) = two_blobs(100, 1.5, 3);
    let fit = fit_gmm(&x, 4, &GmmParams::default(), &mut rng::stream(3, "fit")).unwrap();
    for r in fit.responsibilities.row_iter() {
        assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(fit.variances.data().iter().all(|v| *v >= GmmParams::default().var_floor));
}

#[test]
fn per_class_clusters_follow_true_environments() {
    let mut scores = Vec::new();
    for seed in 0..5 {
        let mut cfg = DataConfig::new(2, 4, 1200, 2, seed);
        cfg.spu_noise_scale = 0.25;
        let (_, train, _) = synthdata::generate_all(&cfg, 10).unwrap();
        let reference = Classifier::new(Encoder::Identity { dim: 6 }, 1, LossKind::Squared, false).unwrap();
        let clusters =
            cluster_per_class(&train.view(), &reference, 2, &GmmParams::default(), &mut rng::stream(seed, "c")).unwrap();
        for (ci, &y) in CLASSES.iter().enumerate() {
            let rows = train.view().indices_of(y);
            let mut found = vec![0usize; train.len()];
            for (j, members) in clusters.clusters[ci].iter().enumerate() {
                for &r in members {
                    found[r] = j;
                }
            }
            let a: Vec<usize> = rows.iter().map(|&r| found[r]).collect();
            let b: Vec<usize> = rows.iter().map(|&r| train.env_ids[r] as usize - 1).collect();
            scores.push(adjusted_rand_index(&a, &b).unwrap());
        }
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean > 0.9, "mean ARI {mean}, per class {scores:?}");
}

fn fixed_clusters(k: usize) -> ClassClusters {
    let mut next = 0;
    let clusters = (0..2)
        .map(|_| {
            (0..k)
                .map(|j| {
                    let rows: Vec<usize> = (next..next + j + 2).collect();
                    next += j + 2;
                    rows
                })
                .collect()
        })
        .collect();
    ClassClusters { k, clusters }
}

#[test]
fn two_cluster_pairing_is_a_fair_coin() {
    let clusters = fixed_clusters(2);
    let mut r = rng::stream(11, "pairing");
    let trials = 10_000;
    let mut same = 0;
    for _ in 0..trials {
        let p = build_environments(&clusters, &mut r);
        if p.pairing[0][0] == p.pairing[1][0] {
            same += 1;
        }
    }
    let f = same as f64 / trials as f64;
    assert!((f - 0.5).abs() < 0.02, "{f}");
}

proptest! {
    #[test]
    fn environments_partition_rows(k in 1usize..6, seed in 0u64..1000) {
        let clusters = fixed_clusters(k);
        let total: usize = clusters.clusters.iter().flatten().map(Vec::len).sum();
        let p = build_environments(&clusters, &mut rng::stream(seed, "p"));
        prop_assert_eq!(p.k(), k);
        let mut seen = vec![0u8; total];
        for env in &p.environments {
            for &r in env {
                seen[r] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for (ci, perm) in p.pairing.iter().enumerate() {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..k).collect::<Vec<_>>());
            for (j, env) in p.environments.iter().enumerate() {
                for r in &clusters.clusters[ci][perm[j]] {
                    prop_assert!(env.contains(r));
                }
            }
        }
    }

    #[test]
    fn silhouette_is_bounded(n in 4usize..40, k in 2usize..4, seed in 0u64..1000) {
        let mut r = rng::stream(seed, "s");
        let x = random_matrix(n, 2, &mut r);
        let assign: Vec<usize> = (0..n).map(|i| i % k).collect();
        let s = silhouette_score(&x, &assign).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn silhouette_near_zero_without_structure() {
    let mut r = rng::stream(5, "noise");
    let x = random_matrix(600, 2, &mut r);
    let assign: Vec<usize> = (0..600).map(|i| i % 2).collect();
    let s = silhouette_score(&x, &assign).unwrap();
    assert!(s.abs() < 0.05, "{s}");
    let (blobs, truth) = two_blobs(100, 12.0, 1);
    assert!(silhouette_score(&blobs, &truth).unwrap() > 0.7);
}
