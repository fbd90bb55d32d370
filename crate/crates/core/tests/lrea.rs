//! Region expansion, patch transforms and the differentiable aggregation.

use lpdet::geometry::{contains, HBox, Point, Quad};
use lpdet::losses::ALPD_COLUMNS;
use lpdet::lrea::{aggregate, expand_region, region_from_prediction, LocalRegion, LreaError, PatchTransform};
use lpdet::metrics::c_recall;
use lpdet_autodiff::gradcheck::{check_gradients, GradcheckConfig};
use lpdet_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: &HBox, b: &HBox) -> bool {
    (a.cx - b.cx).abs() < 1e-12 && (a.cy - b.cy).abs() < 1e-12 && (a.w - b.w).abs() < 1e-12 && (a.h - b.h).abs() < 1e-12
}

fn random_box(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> HBox {
    HBox::new(rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

#[test]
fn expansion_examples() {
    let vehicle = HBox::new(0.5, 0.5, 0.8, 0.8);
    let hint = HBox::new(0.5, 0.5, 0.1, 0.05);
    assert!(close(&expand_region(&hint, &vehicle, 1.0).unwrap(), &hint));
    assert!(close(&expand_region(&hint, &vehicle, 3.0).unwrap(), &HBox::new(0.5, 0.5, 0.3, 0.15)));
    assert!(close(&expand_region(&hint, &vehicle, f64::INFINITY).unwrap(), &vehicle));

    // near the right edge of the vehicle the corner-form x1 is clamped
    let edge = HBox::new(0.85, 0.5, 0.1, 0.05);
    let r = expand_region(&edge, &vehicle, 3.0).unwrap();
    let [x0, y0, x1, y1] = r.corners();
    assert!((x0 - 0.7).abs() < 1e-12 && (x1 - 0.9).abs() < 1e-12);
    assert!((y0 - 0.425).abs() < 1e-12 && (y1 - 0.575).abs() < 1e-12);

    assert!(matches!(expand_region(&hint, &vehicle, 0.5), Err(LreaError::InvalidRatio(_))));
    assert!(matches!(expand_region(&hint, &vehicle, f64::NAN), Err(LreaError::InvalidRatio(_))));
    let outside = HBox::new(0.05, 0.05, 0.02, 0.02);
    assert!(matches!(expand_region(&outside, &vehicle, 1.0), Err(LreaError::EmptyRegion)));
}

#[test]
fn regions_stay_inside_vehicle_and_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let unit = HBox::new(0.5, 0.5, 1.0, 1.0);
    for _ in 0..2000 {
        let vehicle = random_box(&mut rng, 0.1, 0.8);
        let hint = random_box(&mut rng, 0.01, 0.3);
        let ratio = [1.0, 2.0, 3.0, 4.0, 5.0, f64::INFINITY][rng.gen_range(0..6)];
        if let Ok(r) = expand_region(&hint, &vehicle, ratio) {
            assert!(r.area() > 0.0);
            let [x0, y0, x1, y1] = r.corners();
            let [vx0, vy0, vx1, vy1] = vehicle.corners();
            let slack = 1e-12;
            assert!(x0 >= vx0.max(0.0) - slack && y0 >= vy0.max(0.0) - slack);
            assert!(x1 <= vx1.min(1.0) + slack && y1 <= vy1.min(1.0) + slack);
            assert!(contains(&HBox::new(unit.cx, unit.cy, 1.0 + 2.0 * slack, 1.0 + 2.0 * slack), &r));
        }
    }
}

#[test]
fn containment_grows_with_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..500 {
        let vehicle = HBox::new(0.5, 0.5, 0.6, 0.5);
        let plate = HBox::new(rng.gen_range(0.35..0.65), rng.gen_range(0.45..0.7), 0.12, 0.05);
        let hint = HBox::new(plate.cx + rng.gen_range(-0.03..0.03), plate.cy + rng.gen_range(-0.02..0.02), 0.12, 0.05);
        let mut previous = 0.0;
        for ratio in [1.0, 2.0, 3.0, 4.0, 5.0, f64::INFINITY] {
            let region = expand_region(&hint, &vehicle, ratio).unwrap();
            let cr = c_recall(&[vec![region]], &[vec![plate]]).unwrap();
            assert!(cr >= previous);
            previous = cr;
        }
    }
}

#[test]
fn ratio_one_recall_counts_exact_hints() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let vehicle = HBox::new(0.5, 0.5, 0.9, 0.9);
    let mut regions = Vec::new();
    let mut plates = Vec::new();
    let mut exact = 0;
    for i in 0..400 {
        let plate = HBox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.05..0.2), rng.gen_range(0.02..0.08));
        let hint = if i % 2 == 0 {
            plate
        } else {
            HBox::new(plate.cx + rng.gen_range(-0.01..0.01), plate.cy, plate.w * rng.gen_range(0.9..1.1), plate.h)
        };
        exact += usize::from(contains(&hint, &plate));
        regions.push(vec![expand_region(&hint, &vehicle, 1.0).unwrap()]);
        plates.push(vec![plate]);
    }
    let cr = c_recall(&regions, &plates).unwrap();
    assert_eq!(cr, exact as f64 / plates.len() as f64);
    assert!(exact >= 200);
}

#[test]
fn transforms_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..1000 {
        let region = HBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5));
        let t = PatchTransform::for_region(&region);
        let p = Point::new(rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0));
        let back = t.to_patch(t.to_image(p));
        assert!((back.x - p.x).abs() < 1e-9 && (back.y - p.y).abs() < 1e-9);
        let q = t.to_image(t.to_patch(p));
        assert!((q.x - p.x).abs() < 1e-9 && (q.y - p.y).abs() < 1e-9);
        // a quad detected inside the patch lands inside the region
        let patch_quad = Quad::new(std::array::from_fn(|_| Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))));
        let [x0, y0, x1, y1] = region.corners();
        for pt in t.quad_to_image(&patch_quad).pts {
            assert!(pt.x >= x0 - 1e-12 && pt.x <= x1 + 1e-12 && pt.y >= y0 - 1e-12 && pt.y <= y1 + 1e-12);
        }
    }
}

/// `sum(w * y)` for a fixed weight vector, via a one-row linear layer.
fn project(tape: &mut Tape<f64>, y: Var, weights: &[f64]) -> lpdet_autodiff::Result<Var> {
    let n = weights.len();
    let w = tape.constant(Tensor::new(vec![1, n], weights.to_vec())?);
    let zero = tape.constant(Tensor::zeros(vec![1]));
    let flat = tape.reshape(y, &[1, n])?;
    tape.linear(flat, w, zero)
}

fn region(image: usize, vehicle: usize, r: HBox) -> LocalRegion {
    LocalRegion { region: r, image, vehicle, hint: r, source: None }
}

#[test]
fn aggregation_order_and_empty_batch() {
    let mut tape = Tape::<f64>::new();
    let mut data = vec![0.0; 2 * 16 * 16];
    data[256..].iter_mut().for_each(|v| *v = 1.0);
    let features = tape.constant(Tensor::new(vec![2, 1, 16, 16], data).unwrap());

    let empty = aggregate(&mut tape, features, Vec::new(), 4, None).unwrap();
    assert!(empty.is_empty() && empty.patches.is_none());

    let a = HBox::new(0.5, 0.5, 0.5, 0.5);
    let regions = vec![region(1, 0, a), region(0, 1, a), region(0, 0, a)];
    let batch = aggregate(&mut tape, features, regions, 4, None).unwrap();
    let order: Vec<(usize, usize)> = batch.regions.iter().map(|r| (r.image, r.vehicle)).collect();
    assert_eq!(order, vec![(0, 0), (0, 1), (1, 0)]);
    let patches = batch.patches.unwrap();
    assert_eq!(tape.shape(patches), &[3, 1, 4, 4]);
    // constant maps give constant patches, and each patch reads its own image
    let v = tape.value(patches).data();
    assert!(v[..32].iter().all(|&x| x == 0.0));
    assert!(v[32..].iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn aligned_region_copies_pixels() {
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..64).map(f64::from).collect();
    let features = tape.constant(Tensor::new(vec![1, 1, 8, 8], data.clone()).unwrap());
    // pixels 2..6 in both axes
    let r = HBox::from_corners(2.0 / 8.0, 2.0 / 8.0, 6.0 / 8.0, 6.0 / 8.0);
    let batch = aggregate(&mut tape, features, vec![region(0, 0, r)], 4, None).unwrap();
    let v = tape.value(batch.patches.unwrap()).data();
    for y in 0..4 {
        for x in 0..4 {
            assert!((v[y * 4 + x] - data[(y + 2) * 8 + x + 2]).abs() < 1e-9);
        }
    }
}

#[test]
fn feature_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features =
            Tensor::new(vec![2, 2, 8, 8], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let regions: Vec<LocalRegion> = (0..3)
            .map(|i| {
                let r = HBox::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5));
                region(i % 2, i, r)
            })
            .collect();
        let weights: Vec<f64> = (0..3 * 2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = check_gradients(&[features], &GradcheckConfig::default(), |tape, vars| {
            let batch = aggregate(tape, vars[0], regions.clone(), 5, None).unwrap();
            project(tape, batch.patches.unwrap(), &weights)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < 1e-4, "max rel err {worst:.3e}");
}

#[test]
fn region_corner_gradients_match_finite_differences() {
    let priors = [HBox::new(0.4, 0.5, 0.5, 0.4), HBox::new(0.6, 0.5, 0.4, 0.5)];
    let vehicle = HBox::new(0.5, 0.5, 1.0, 1.0);
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // smooth features keep the bilinear sampler away from kinks
        let features: Vec<f64> = (0..2 * 16 * 16)
            .map(|i| {
                let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
                ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos()) + 0.05 * x as f64
            })
            .collect();
        let pred: Vec<f64> = (0..2 * ALPD_COLUMNS)
            .map(|c| match c % ALPD_COLUMNS {
                9 | 10 => rng.gen_range(-1.6..-1.0),
                _ => rng.gen_range(-0.1..0.1),
            })
            .collect();
        let pred = Tensor::new(vec![1, 2, ALPD_COLUMNS], pred).unwrap();
        let regions: Vec<LocalRegion> = (0..2)
            .map(|i| {
                let row = &pred.data()[i * ALPD_COLUMNS..(i + 1) * ALPD_COLUMNS];
                let (r, hint, source) = region_from_prediction(row, i, &priors[i], &vehicle, 2.0).unwrap();
                LocalRegion { region: r, image: 0, vehicle: i, hint, source: Some(source) }
            })
            .collect();
        let weights: Vec<f64> = (0..2 * 2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = Tensor::new(vec![1, 2, 16, 16], features).unwrap();
        let config = GradcheckConfig { step: 1e-6, ..GradcheckConfig::default() };
        let report = check_gradients(&[pred], &config, |tape, vars| {
            let f = tape.constant(features.clone());
            let batch = aggregate(tape, f, regions.clone(), 6, Some(vars[0])).unwrap();
            project(tape, batch.patches.unwrap(), &weights)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < 1e-4, "max rel err {worst:.3e}");
}
