mod common;

use common::{planted, random_labels, random_matrix};
use disc_core::conceptbank::{CavParams, ConceptBank};
use disc_core::cure::{build_intervened_batch, mixup, mixup_with, sample_concepts, MixupConfig};
use disc_core::rng;
use disc_core::synthdata::{TrainView, CLASSES};
use proptest::prelude::*;

#[test]
fn concept_frequencies_follow_probabilities() {
    let bank = ConceptBank::synthetic(2, 0, 0.0, CavParams::default()).unwrap();
    let draws = sample_concepts(&bank, &[0.75, 0.25], 10_000, &mut rng::stream(1, "freq")).unwrap();
    let first = draws.row_iter().filter(|r| r[0] == 1.0).count() as f64 / 10_000.0;
    assert!((first - 0.75).abs() < 0.02, "{first}");
    assert!(draws.row_iter().all(|r| r == [1.0, 0.0] || r == [0.0, 1.0]));
}

#[test]
fn beta_two_two_mean() {
    let l = MixupConfig::default().sample_lambdas(100_000, &mut rng::stream(2, "beta")).unwrap();
    let mean = l.iter().sum::<f64>() / l.len() as f64;
    assert!((mean - 0.5).abs() < 0.005, "{mean}");
    assert!(l.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn batch_comes_from_the_complement() {
    let mut r = rng::stream(3, "batch");
    let x = random_matrix(60, 4, &mut r);
    let y = random_labels(60, &mut r);
    let view = TrainView { features: &x, labels: &y };
    let bank = ConceptBank::synthetic(2, 2, 0.0, CavParams::default()).unwrap();
    let p = [0.0, 0.0, 0.5, 0.5];
    for &label in &CLASSES {
        let b = build_intervened_batch(&view, label, &bank, Some(&p), 32, &MixupConfig::default(), &mut r).unwrap().unwrap();
        assert!(b.labels.iter().all(|&l| l == -label));
        for (i, &row) in b.rows.iter().enumerate() {
            assert_eq!(b.labels[i], y[row]);
        }
    }
    assert!(build_intervened_batch(&view, 1, &bank, None, 32, &MixupConfig::default(), &mut r).unwrap().is_none());
    let one_class = vec![1; 60];
    let view = TrainView { features: &x, labels: &one_class };
    assert!(build_intervened_batch(&view, 1, &bank, Some(&p), 32, &MixupConfig::default(), &mut r).is_err());
}

proptest! {
    #[test]
    fn mixed_rows_are_convex(seed in 0u64..10_000, rows in 1usize..20, cols in 1usize..6) {
        let mut r = rng::stream(seed, "convex");
        let x = random_matrix(rows, cols, &mut r);
        let c = random_matrix(rows, cols, &mut r);
        let (mixed, lambdas) = mixup(&x, &c, &MixupConfig::default(), &mut r).unwrap();
        prop_assert_eq!(lambdas.len(), rows);
        for i in 0..rows {
            for j in 0..cols {
                let (lo, hi) = (x[(i, j)].min(c[(i, j)]), x[(i, j)].max(c[(i, j)]));
                prop_assert!(mixed[(i, j)] >= lo - 1e-12 && mixed[(i, j)] <= hi + 1e-12);
                let expect = lambdas[i] * x[(i, j)] + (1.0 - lambdas[i]) * c[(i, j)];
                prop_assert!((mixed[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mixing_in_a_concept_raises_its_coordinate() {
    let mut r = rng::stream(4, "raise");
    let x = random_matrix(500, 3, &mut r);
    let mut concepts = disc_core::Matrix::zeros(500, 3);
    for i in 0..500 {
        concepts[(i, 1)] = 1.0;
    }
    let lambdas = MixupConfig::default().sample_lambdas(500, &mut r).unwrap();
    let mixed = mixup_with(&x, &concepts, &lambdas).unwrap();
    let before = x.column(1).iter().sum::<f64>() / 500.0;
    let after = mixed.column(1).iter().sum::<f64>() / 500.0;
    assert!(after > before, "{before} -> {after}");
}

/// Class-conditional mean gap of each spurious coordinate, raw and over one
/// epoch of intervened batches that target the planted supports.
#[test]
fn one_intervened_epoch_narrows_spurious_gaps() {
    let seeds = 10;
    let mut narrowed = 0;
    let mut total = 0;
    for seed in 0..seeds {
        let (cfg, patterns, train, _) = planted(6, 4, 2000, 3, seed);
        let bank = ConceptBank::synthetic(6, 4, 0.0, CavParams::default()).unwrap();
        let view = train.view();
        let mut r = rng::stream(seed, "epoch");
        let probs: Vec<Vec<f64>> = CLASSES
            .iter()
            .map(|&y| {
                let owned = patterns.owned(y);
                let mut p = vec![0.0; bank.len()];
                for j in owned.clone() {
                    p[cfg.p1 + j] = 1.0 / owned.len() as f64;
                }
                p
            })
            .collect();
        let mut sums = [[0.0; 4]; 2];
        let mut counts = [0.0; 2];
        for _ in 0..train.len().div_ceil(32) {
            for (ci, &y) in CLASSES.iter().enumerate() {
                let b = build_intervened_batch(&view, y, &bank, Some(&probs[ci]), 32, &MixupConfig::default(), &mut r)
                    .unwrap()
                    .unwrap();
                for (row, &label) in b.features.row_iter().zip(&b.labels) {
                    let k = disc_core::synthdata::class_index(label);
                    counts[k] += 1.0;
                    for j in 0..4 {
                        sums[k][j] += row[cfg.p1 + j];
                    }
                }
            }
        }
        for j in 0..4 {
            let raw = |label: i32| {
                let rows = view.indices_of(label);
                rows.iter().map(|&i| train.features[(i, cfg.p1 + j)]).sum::<f64>() / rows.len() as f64
            };
            let raw_gap = (raw(1) - raw(-1)).abs();
            let mixed_gap = (sums[1][j] / counts[1] - sums[0][j] / counts[0]).abs();
            total += 1;
            if mixed_gap < raw_gap {
                narrowed += 1;
            }
        }
    }
    // One-sided sign test: 40 coordinates, p < 0.05 needs at least 26 narrowed.
    assert!(narrowed >= 26, "{narrowed}/{total}");
}
