//! Encode/decode round trips over random instances.

mod common;

use common::{box_err, random_box};

use lpdet::codec::{
    decode_corners, decode_plate_hint, decode_vehicle, encode_corners, encode_plate_hint, encode_vehicle,
    PlateHintTarget,
};
use lpdet::geometry::{HBox, Point, Quad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn vehicle_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (g, d) = (random_box(&mut rng), random_box(&mut rng));
        let back = decode_vehicle(&encode_vehicle(&g, &d).unwrap(), &d);
        assert!(box_err(&g, &back) < 1e-9);
    }
}

#[test]
fn plate_hint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (plate, vehicle, d) = (random_box(&mut rng), random_box(&mut rng), random_box(&mut rng));
        let t = encode_plate_hint(&plate, &vehicle, &d).unwrap();
        let back = decode_plate_hint(&t, &d, Point::new(vehicle.cx, vehicle.cy));
        assert!(box_err(&plate, &back) < 1e-9);
    }
    // sizes stay positive for any finite target
    for _ in 0..1000 {
        let t = PlateHintTarget {
            off_x: rng.gen_range(-1e3..1e3),
            off_y: rng.gen_range(-1e3..1e3),
            w: rng.gen_range(-1e3..1e3),
            h: rng.gen_range(-1e3..1e3),
        };
        let b = decode_plate_hint(&t, &random_box(&mut rng), Point::new(0.5, 0.5));
        assert!(b.w > 0.0 && b.h > 0.0);
    }
}

#[test]
fn corner_round_trip_keeps_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let q = Quad::new(std::array::from_fn(|_| Point::new(rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5))));
        let d = random_box(&mut rng);
        let back = decode_corners(&encode_corners(&q, &d).unwrap(), &d);
        for (a, b) in q.pts.iter().zip(&back.pts) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }
}

#[test]
fn encodings_are_translation_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (g, v, d) = (random_box(&mut rng), random_box(&mut rng), random_box(&mut rng));
        let (dx, dy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let shift = |b: &HBox| HBox::new(b.cx + dx, b.cy + dy, b.w, b.h);
        let a = encode_vehicle(&g, &d).unwrap().to_array();
        let b = encode_vehicle(&shift(&g), &shift(&d)).unwrap().to_array();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
        let a = encode_plate_hint(&g, &v, &d).unwrap().to_array();
        let b = encode_plate_hint(&shift(&g), &shift(&v), &shift(&d)).unwrap().to_array();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
        let q = g.to_quad();
        let a = encode_corners(&q, &d).unwrap().0;
        let b = encode_corners(&q.translate(dx, dy), &shift(&d)).unwrap().0;
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}
