//! Metrics against exhaustive reference evaluators.

mod common;

use common::{random_instance, reference_ap};

use lpdet::geometry::{quad_iou, HBox, Point, Quad};
use lpdet::metrics::{ap_voc07, c_recall, prf_quad, Prf, ScoredBox, ScoredQuad};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn ap_matches_exhaustive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (dets, gts) = random_instance(&mut rng);
        for thr in [0.5, 0.75] {
            let got = ap_voc07(&dets, &gts, thr);
            let want = reference_ap(&dets, &gts, thr);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn false_positive_before_true_positive() {
    let g = HBox::new(0.5, 0.5, 0.2, 0.2);
    let dets = [
        ScoredBox { image: 0, score: 0.9, bbox: HBox::new(0.1, 0.1, 0.1, 0.1) },
        ScoredBox { image: 0, score: 0.8, bbox: g },
    ];
    assert!((ap_voc07(&dets, &[vec![g]], 0.5) - 0.5).abs() < 1e-12);
}

#[test]
fn ap_is_invariant_to_monotone_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (dets, gts) = random_instance(&mut rng);
        let rescaled: Vec<ScoredBox> =
            dets.iter().map(|d| ScoredBox { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect();
        assert_eq!(ap_voc07(&dets, &gts, 0.5), ap_voc07(&rescaled, &gts, 0.5));
    }
}

#[test]
fn appending_a_miss_never_raises_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let (mut dets, gts) = random_instance(&mut rng);
        let before = ap_voc07(&dets, &gts, 0.5);
        dets.push(ScoredBox { image: 0, score: -1.0, bbox: HBox::new(5.0, 5.0, 0.1, 0.1) });
        assert!(ap_voc07(&dets, &gts, 0.5) <= before);
    }
}

#[test]
fn prf_examples() {
    let q = HBox::new(0.5, 0.5, 0.2, 0.1).to_quad();
    let far = HBox::new(0.1, 0.1, 0.05, 0.05).to_quad();
    let dets = [ScoredQuad { image: 0, score: 0.9, quad: q }, ScoredQuad { image: 0, score: 0.8, quad: far }];
    let p = prf_quad(&dets, &[vec![q]], 0.5, 0.5);
    assert_eq!((p.tp, p.fp, p.fn_), (1, 1, 0));
    assert!((p.precision - 0.5).abs() < 1e-12 && p.recall == 1.0 && (p.f1 - 2.0 / 3.0).abs() < 1e-12);
    let none = prf_quad(&[], &[vec![q, q, q]], 0.5, 0.5);
    assert_eq!(none, Prf::from_counts(0, 0, 3));
    assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
}

/// Largest number of one-to-one (detection, ground truth) pairs reaching the
/// threshold, by exhaustive search.
fn optimal_tp(dets: &[Quad], gts: &[Quad], thr: f64) -> usize {
    fn go(i: usize, dets: &[Quad], gts: &[Quad], used: &mut Vec<bool>, thr: f64) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, gts, used, thr);
        for j in 0..gts.len() {
            if !used[j] && quad_iou(&dets[i], &gts[j]).unwrap_or(0.0) >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, dets, gts, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], thr)
}

#[test]
fn greedy_quad_matching_is_optimal_on_separated_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let jitter = |rng: &mut ChaCha8Rng, q: &Quad, s: f64| {
        Quad::new(std::array::from_fn(|i| Point::new(q.pts[i].x + rng.gen_range(-s..s), q.pts[i].y + rng.gen_range(-s..s))))
    };
    for _ in 0..200 {
        // ground truths on separate cells of a 3x2 grid so no detection can
        // overlap two of them
        let mut cells: Vec<(usize, usize)> = (0..3).flat_map(|x| (0..2).map(move |y| (x, y))).collect();
        cells.shuffle(&mut rng);
        let gts: Vec<Quad> = cells[..rng.gen_range(1..=3)]
            .iter()
            .map(|&(x, y)| {
                let base = HBox::new(x as f64 / 3.0 + 1.0 / 6.0, y as f64 / 2.0 + 0.25, 0.15, 0.06).to_quad();
                jitter(&mut rng, &base, 0.01)
            })
            .collect();
        let n = rng.gen_range(0..=3);
        let mut scores: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * i as f64).collect();
        scores.shuffle(&mut rng);
        let dets: Vec<ScoredQuad> = scores
            .into_iter()
            .map(|score| {
                let target = gts[rng.gen_range(0..gts.len())];
                ScoredQuad { image: 0, score, quad: jitter(&mut rng, &target, 0.02) }
            })
            .collect();
        for thr in [0.5, 0.75] {
            let p = prf_quad(&dets, &[gts.clone()], thr, 0.5);
            let quads: Vec<Quad> = dets.iter().map(|d| d.quad).collect();
            assert_eq!(p.tp, optimal_tp(&quads, &gts, thr));
            assert_eq!(p.tp + p.fp, dets.len());
            assert_eq!(p.tp + p.fn_, gts.len());
        }
    }
}

#[test]
fn c_recall_cases() {
    let plate = HBox::new(0.5, 0.5, 0.1, 0.05);
    let other = HBox::new(0.1, 0.1, 0.1, 0.05);
    assert_eq!(c_recall(&[vec![HBox::new(0.5, 0.5, 0.3, 0.3)]], &[vec![plate, other]]), Some(0.5));
    // boundary-inclusive
    assert_eq!(c_recall(&[vec![plate]], &[vec![plate]]), Some(1.0));
    assert_eq!(c_recall(&[], &[vec![plate]]), Some(0.0));
    assert_eq!(c_recall(&[vec![]], &[vec![]]), None);
}
