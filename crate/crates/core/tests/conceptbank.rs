mod common;

use disc_core::conceptbank::{
    self, fit_pegasos, learn_cav, query_cavs, synth_concept_image, CavParams, Concept, ConceptBank,
};
use disc_core::linalg::Matrix;
use disc_core::math;
use disc_core::model::Encoder;
use disc_core::rng;
use proptest::prelude::*;

/// Hard-margin direction in 2-D by exhaustive search over support sets: either
/// one point per class (normal along their difference) or two points of one
/// class (normal perpendicular to their segment).
fn brute_force_hard_margin(pos: &[[f64; 2]], neg: &[[f64; 2]]) -> [f64; 2] {
    let margin = |w: [f64; 2]| {
        let n = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let w = [w[0] / n, w[1] / n];
        let lo = pos.iter().map(|p| w[0] * p[0] + w[1] * p[1]).fold(f64::INFINITY, f64::min);
        let hi = neg.iter().map(|p| w[0] * p[0] + w[1] * p[1]).fold(f64::NEG_INFINITY, f64::max);
        ((lo - hi) / 2.0, w)
    };
    let mut candidates = Vec::new();
    for p in pos {
        for q in neg {
            candidates.push([p[0] - q[0], p[1] - q[1]]);
        }
    }
    for set in [pos, neg] {
        for (i, a) in set.iter().enumerate() {
            for b in &set[i + 1..] {
                let d = [b[0] - a[0], b[1] - a[1]];
                candidates.push([-d[1], d[0]]);
                candidates.push([d[1], -d[0]]);
            }
        }
    }
    candidates
        .into_iter()
        .filter(|w| w[0] != 0.0 || w[1] != 0.0)
        .map(margin)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, w)| w)
        .unwrap()
}

#[test]
fn pegasos_agrees_with_brute_force_hard_margin() {
    for seed in 0..10 {
        let mut r = rng::stream(seed, "svm2d");
        let angle = rng::uniform(&mut r) * std::f64::consts::TAU;
        let dir = [angle.cos(), angle.sin()];
        let draw = |r: &mut rng::StreamRng, sign: f64| -> Vec<[f64; 2]> {
            (0..40)
                .map(|_| [sign * 1.5 * dir[0] + 0.4 * rng::normal(r), sign * 1.5 * dir[1] + 0.4 * rng::normal(r)])
                .filter(|p| sign * (p[0] * dir[0] + p[1] * dir[1]) > 0.6)
                .collect()
        };
        let pos = draw(&mut r, 1.0);
        let neg = draw(&mut r, -1.0);
        let oracle = brute_force_hard_margin(&pos, &neg);
        let pos_m = Matrix::from_rows(&pos.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
        let neg_m = Matrix::from_rows(&neg.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
        let (v, margin) =
            learn_cav(&Encoder::Identity { dim: 2 }, &pos_m, &neg_m, &CavParams::default(), &mut r).unwrap();
        let cos = v[0] * oracle[0] + v[1] * oracle[1];
        assert!(cos > 0.95, "seed {seed}: cosine {cos}");
        assert!(margin > 0.0);
    }
}

#[test]
fn averaged_objective_does_not_increase() {
    let mut r = rng::stream(4, "obj");
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for i in 0..200 {
        let t = if i % 2 == 0 { 1.0 } else { -1.0 };
        rows.push(vec![t + 0.7 * rng::normal(&mut r), 0.5 * t + rng::normal(&mut r), rng::normal(&mut r)]);
        targets.push(t);
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let fit = fit_pegasos(&x, &targets, 1e-2, 200, &mut r);
    for w in fit.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-12 * w[0].abs(), "objective rose: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn rescaling_points_keeps_direction() {
    let bank = ConceptBank::synthetic(3, 2, 0.2, CavParams::default()).unwrap();
    let (pos, neg) = conceptbank::concept_samples(&bank, 1, &mut rng::stream(1, "s")).unwrap();
    let id = Encoder::Identity { dim: 5 };
    let (v, m) = learn_cav(&id, &pos, &neg, &bank.cav, &mut rng::stream(1, "fit")).unwrap();
    let (mut pos2, mut neg2) = (pos.clone(), neg.clone());
    pos2.scale(3.0);
    neg2.scale(3.0);
    let (v2, m2) = learn_cav(&id, &pos2, &neg2, &bank.cav, &mut rng::stream(1, "fit")).unwrap();
    assert!(1.0 - math::cosine(&v, &v2) < 1e-3, "cosine distance {}", 1.0 - math::cosine(&v, &v2));
    assert!(m2 > m);
}

#[test]
fn axis_aligned_clusters() {
    let mut r = rng::stream(2, "axis");
    let cloud = |r: &mut rng::StreamRng, s: f64| {
        Matrix::from_rows(&(0..150).map(|_| vec![s + 0.1 * rng::normal(r), 0.1 * rng::normal(r), 0.1 * rng::normal(r)]).collect::<Vec<_>>())
            .unwrap()
    };
    let pos = cloud(&mut r, 1.0);
    let neg = cloud(&mut r, -1.0);
    let (v, _) = learn_cav(&Encoder::Identity { dim: 3 }, &pos, &neg, &CavParams::default(), &mut r).unwrap();
    assert!(v[0] > 0.99);
}

#[test]
fn noisy_concept_image_mean() {
    let bank = ConceptBank::synthetic(4, 2, 0.1, CavParams::default()).unwrap();
    let mut r = rng::stream(0, "img");
    let mut mean = [0.0; 6];
    let draws = 10_000;
    for _ in 0..draws {
        let img = synth_concept_image(&bank, 3, &mut r).unwrap();
        for (m, v) in mean.iter_mut().zip(img) {
            *m += v / draws as f64;
        }
    }
    for (j, m) in mean.iter().enumerate() {
        let target = if j == 3 { 1.0 } else { 0.0 };
        assert!((m - target).abs() < 3.0 * 0.1 / 100.0, "coordinate {j}: {m}");
    }
    assert!(synth_concept_image(&bank, 99, &mut r).is_err());
}

#[test]
fn two_orthogonal_concepts() {
    let concepts = vec![
        Concept { id: 0, name: "a".into(), category: "c".into(), coordinate: 0 },
        Concept { id: 1, name: "b".into(), category: "c".into(), coordinate: 1 },
    ];
    let bank = ConceptBank::new(concepts, 3, 0.05, CavParams::default()).unwrap();
    let id = Encoder::Identity { dim: 3 };
    let cavs = query_cavs(&bank, &id, &mut rng::stream(7, "q")).unwrap();
    let (a, b) = (cavs.vector(0), cavs.vector(1));
    for v in [a, b] {
        assert!((math::norm(v) - 1.0).abs() < 1e-9);
    }
    assert!(a[0] > 0.0 && b[1] > 0.0);
    // With two concepts each is the other's only negative, so the probes
    // are the two ends of the segment between e_0 and e_1.
    assert!(math::cosine(a, &[1.0, -1.0, 0.0]) > 0.99);
    assert_eq!(cavs, query_cavs(&bank, &id, &mut rng::stream(7, "q")).unwrap());
}

#[test]
fn full_bank_probes_match_centroid_geometry() {
    // Each probe separates e_i from the hull of the other basis vectors, whose
    // closest point is their centroid: v_i ~ e_i - mean_{j != i} e_j. Those
    // directions have own weight sqrt((m-1)/m) and pairwise cosine -1/(m-1).
    let bank = ConceptBank::synthetic(6, 2, 0.05, CavParams::default()).unwrap();
    let m = bank.len() as f64;
    let id = Encoder::Identity { dim: 8 };
    let cavs = query_cavs(&bank, &id, &mut rng::stream(1, "q")).unwrap();
    for i in 0..cavs.len() {
        let v = cavs.vector(i);
        let own = v[bank.concepts[i].coordinate];
        assert!((own - ((m - 1.0) / m).sqrt()).abs() < 0.05, "concept {i}: own weight {own}");
        for j in 0..i {
            let c = math::cosine(v, cavs.vector(j));
            assert!((c + 1.0 / (m - 1.0)).abs() < 0.1, "concepts {i},{j}: cosine {c}");
        }
    }
}

#[test]
fn probes_are_oriented_toward_positives() {
    let bank = ConceptBank::synthetic(5, 4, 0.3, CavParams::default()).unwrap();
    let id = Encoder::Identity { dim: 9 };
    for i in 0..bank.len() {
        let (pos, neg) = conceptbank::concept_samples(&bank, i, &mut rng::stream(i as u64, "o")).unwrap();
        let (v, _) = learn_cav(&id, &pos, &neg, &bank.cav, &mut rng::stream(i as u64, "f")).unwrap();
        let mean_proj = |m: &Matrix| m.row_iter().map(|r| math::dot(r, &v)).sum::<f64>() / m.rows() as f64;
        assert!(mean_proj(&pos) > mean_proj(&neg));
        assert_eq!((pos.rows(), neg.rows()), (150, 150));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn probe_rows_have_unit_norm(p1 in 1usize..5, half in 1usize..3, noise in 0.0f64..0.5, seed in any::<u64>()) {
        let bank = ConceptBank::synthetic(p1, 2 * half, noise, CavParams { epochs: 20, ..CavParams::default() }).unwrap();
        let cavs = query_cavs(&bank, &Encoder::Identity { dim: p1 + 2 * half }, &mut rng::stream(seed, "q")).unwrap();
        prop_assert_eq!(cavs.concept_ids.clone(), bank.ids());
        for i in 0..cavs.len() {
            prop_assert!((math::norm(cavs.vector(i)) - 1.0).abs() < 1e-9);
        }
    }
}
