//! Synthetic scenes: label audit, rendering contrast, determinism and the
//! on-disk split format.

use lpdet::dataset::{generate_split, read_labels, split_assignment, Dataset, Split, IMAGE_DIR, LABEL_FILE};
use lpdet::geometry::{contains, quad_aabb, quad_iou, Point};
use lpdet::geometry::HBox;
use lpdet::synth::{augment, generate_scene, luminance, scene_seed, SceneParams, PLATE_CONTRAST_FLOOR};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn label_audit_over_many_scenes() {
    let params = SceneParams::default();
    let (mut vehicles, mut without, mut large, mut plates) = (0, 0, 0, 0);
    let mut contrast_sum = 0.0;
    for i in 0..1000u64 {
        let (img, label) = generate_scene(scene_seed(1, i), "audit", &params).unwrap();
        let n = img.size as f64;
        for v in &label.vehicles {
            vehicles += 1;
            assert!(v.bbox.validate().is_ok());
            assert_eq!(v.has_lp, v.quad.is_some(), "has_lp and the plate record disagree");
            let Some(q) = v.quad else {
                without += 1;
                continue;
            };
            assert!(q.validate().is_ok());
            assert!(contains(&v.bbox, &quad_aabb(&q)), "plate outside its vehicle");
            assert_eq!(v.plate_box(), Some(quad_aabb(&q)));
            if v.bbox.w * n >= params.large_vehicle_width.0 {
                large += 1;
                assert!(q.area() / v.bbox.area() < 0.01, "large vehicle plate too big");
            }
            // luminance spread over the pixels whose centers fall inside the plate
            let [x0, y0, x1, y1] = quad_aabb(&q).corners();
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for y in (y0 * n).floor() as usize..((y1 * n).ceil() as usize).min(img.size) {
                for x in (x0 * n).floor() as usize..((x1 * n).ceil() as usize).min(img.size) {
                    if q.contains_point(Point::new((x as f64 + 0.5) / n, (y as f64 + 0.5) / n)) {
                        let l = luminance(img.get(x, y));
                        lo = lo.min(l);
                        hi = hi.max(l);
                    }
                }
            }
            plates += 1;
            contrast_sum += (hi - lo).max(0.0);
        }
    }
    assert!(without as f64 >= 0.2 * vehicles as f64, "only {without}/{vehicles} vehicles without a plate");
    assert!(large > 0, "no large vehicles generated");
    let mean = contrast_sum / plates as f64;
    assert!(mean >= PLATE_CONTRAST_FLOOR, "mean plate contrast {mean:.1}");
}

#[test]
fn scenes_are_deterministic() {
    let params = SceneParams::default();
    for i in 0..20 {
        let a = generate_scene(scene_seed(9, i), "x", &params).unwrap();
        let b = generate_scene(scene_seed(9, i), "x", &params).unwrap();
        assert_eq!(a, b);
    }
    let a = generate_scene(1, "x", &params).unwrap();
    let b = generate_scene(2, "x", &params).unwrap();
    assert_ne!(a.0, b.0);
}

#[test]
fn zero_tilt_gives_axis_aligned_plates() {
    let params = SceneParams { tilt: 0.0, ..SceneParams::default() };
    let mut seen = 0;
    for i in 0..100 {
        let (_, label) = generate_scene(scene_seed(3, i), "x", &params).unwrap();
        for q in label.plate_quads() {
            assert!(quad_iou(&q, &quad_aabb(&q).to_quad()).unwrap() > 1.0 - 1e-12);
            let p = q.pts;
            assert!(p[0].y == p[1].y && p[2].y == p[3].y && p[0].x == p[3].x && p[1].x == p[2].x);
            seen += 1;
        }
    }
    assert!(seen > 50);
}

#[test]
fn infeasible_parameters_are_rejected() {
    let params = SceneParams { plate_width: (0.8, 0.95), ..SceneParams::default() };
    assert!(generate_scene(0, "x", &params).is_err());
    let params = SceneParams { max_vehicles: 7, ..SceneParams::default() };
    assert!(generate_scene(0, "x", &params).is_err());
}

#[test]
fn split_is_nine_to_one_and_stable() {
    let a = split_assignment(5, 100);
    assert_eq!(a.iter().filter(|s| **s == Split::Test).count(), 10);
    assert_eq!(a, split_assignment(5, 100));
    assert_ne!(a, split_assignment(6, 100));
}

#[test]
fn split_on_disk_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let params = SceneParams::default();
    let written = generate_split(dir.path(), 17, 20, &params).unwrap();
    assert_eq!(written.len(), 20);
    let read = read_labels(&dir.path().join(LABEL_FILE)).unwrap();
    // serde round trip: every float comes back bit-identical
    assert_eq!(read, written);
    for (r, w) in read.iter().zip(&written) {
        for (a, b) in r.label.vehicles.iter().zip(&w.label.vehicles) {
            assert_eq!(a.bbox.cx.to_bits(), b.bbox.cx.to_bits());
            if let (Some(qa), Some(qb)) = (a.quad, b.quad) {
                assert!(qa.to_flat().iter().zip(qb.to_flat()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
    assert_eq!(std::fs::read_dir(dir.path().join(IMAGE_DIR)).unwrap().count(), 20);
    let test = Dataset::open(dir.path(), Split::Test, 128).unwrap();
    let train = Dataset::open(dir.path(), Split::Train, 128).unwrap();
    assert_eq!((train.len(), test.len()), (18, 2));
    // images on disk equal freshly rendered ones
    let first = &test.labels[0];
    let (img, label) = generate_scene(first.seed, &first.image_id, &params).unwrap();
    assert_eq!(&label, first);
    assert_eq!(img, test.images[0]);
    assert!(generate_split(dir.path(), 17, 9, &params).is_err());
}

#[test]
fn augmentation_keeps_labels_consistent() {
    let params = SceneParams::default();
    let unit = HBox::from_corners(0.0, 0.0, 1.0, 1.0);
    let (mut flat, mut shrunk, trials) = (0, 0, 600u64);
    for i in 0..trials {
        let (img, label) = generate_scene(scene_seed(3, i % 50), "aug", &params).unwrap();
        let (out, aug) = augment(&img, &label, &mut ChaCha8Rng::seed_from_u64(i));
        let again = augment(&img, &label, &mut ChaCha8Rng::seed_from_u64(i));
        assert!(out == again.0 && aug == again.1, "augmentation not deterministic");
        assert_eq!(out.size, img.size);
        if aug.vehicles.is_empty() {
            flat += 1;
            continue;
        }
        assert_eq!(aug.vehicles.len(), label.vehicles.len());
        let scale = aug.vehicles[0].bbox.w / label.vehicles[0].bbox.w;
        if scale < 1.0 - 1e-9 {
            shrunk += 1;
        }
        for (a, v) in aug.vehicles.iter().zip(&label.vehicles) {
            assert!(contains(&unit, &a.bbox), "vehicle left the image");
            assert!((a.bbox.w / v.bbox.w - scale).abs() < 1e-9, "vehicles scaled differently");
            assert_eq!(a.has_lp, v.has_lp);
            if let Some(q) = a.quad {
                assert!(contains(&a.bbox, &quad_aabb(&q)), "plate left its vehicle");
            }
        }
    }
    // flat negatives ~5% and zoom-outs ~48%; crops only enlarge
    assert!((10..=60).contains(&flat), "flat negatives {flat}");
    assert!((220..=350).contains(&shrunk), "zoomed-out scenes {shrunk}");
}
