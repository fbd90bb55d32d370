//! Independent oracles shared by the test targets.
#![allow(dead_code)]

use lpdet::geometry::{iou_hbox, HBox, Point, Quad};
use lpdet::metrics::ScoredBox;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Convex quad with vertices at increasing angle around a center, which is
/// clockwise on screen (y down).
pub fn random_convex_quad(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64) -> Quad {
    loop {
        let mut angles: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts: Vec<Point> = angles
            .iter()
            .map(|&a| {
                let rr = r * rng.gen_range(0.6..1.0);
                Point::new(cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect();
        let q = Quad::new([pts[0], pts[1], pts[2], pts[3]]);
        if q.validate().is_ok() && q.area() > 0.02 * r * r {
            return q;
        }
    }
}

/// Point-in-convex-polygon by ray crossing, independent of the clipping code.
pub fn inside(q: &Quad, x: f64, y: f64) -> bool {
    let mut hit = false;
    for i in 0..4 {
        let (a, b) = (q.pts[i], q.pts[(i + 1) % 4]);
        if (a.y > y) != (b.y > y) {
            let xi = a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x);
            if x < xi {
                hit = !hit;
            }
        }
    }
    hit
}

/// IOU from a 1000 x 1000 sample grid over the pair's bounding box.
pub fn rasterized_iou(a: &Quad, b: &Quad) -> f64 {
    let all: Vec<Point> = a.pts.iter().chain(b.pts.iter()).copied().collect();
    let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
    let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
    let n = 1000;
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    for j in 0..n {
        let y = y0 + (j as f64 + 0.5) / n as f64 * (y1 - y0);
        for i in 0..n {
            let x = x0 + (i as f64 + 0.5) / n as f64 * (x1 - x0);
            let (in_a, in_b) = (inside(a, x, y), inside(b, x, y));
            ia += in_a as u64;
            ib += in_b as u64;
            both += (in_a && in_b) as u64;
        }
    }
    both as f64 / (ia + ib - both) as f64
}

/// Reference AP: for every cutoff k, re-run the matching on the top-k
/// detections from scratch, then interpolate with exact integer recall tests.
pub fn reference_ap(dets: &[ScoredBox], gts: &[Vec<HBox>], thr: f64) -> f64 {
    let m: usize = gts.iter().map(Vec::len).sum();
    if m == 0 {
        return 0.0;
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut points = Vec::new(); // (tp, k)
    for k in 1..=sorted.len() {
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for d in &sorted[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[d.image].iter().enumerate() {
                let v = iou_hbox(&d.bbox, g).unwrap();
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, v)) = best {
                if v >= thr && !claimed[d.image][j] {
                    claimed[d.image][j] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp, k));
    }
    let mut total = 0.0;
    for i in 0..=10usize {
        let mut best: f64 = 0.0;
        for &(tp, k) in &points {
            if tp * 10 >= i * m {
                best = best.max(tp as f64 / k as f64);
            }
        }
        total += best;
    }
    total / 11.0
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<ScoredBox>, Vec<Vec<HBox>>) {
    let images = rng.gen_range(1..4);
    let gts: Vec<Vec<HBox>> = (0..images)
        .map(|_| {
            (0..rng.gen_range(0..4))
                .map(|_| HBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.3), rng.gen_range(0.1..0.3)))
                .collect()
        })
        .collect();
    let mut scores: Vec<f64> = (1..=rng.gen_range(0..=10)).map(|i| i as f64 / 10.0).collect();
    scores.shuffle(rng);
    let dets = scores
        .into_iter()
        .map(|score| {
            let image = rng.gen_range(0..images);
            let bbox = match gts[image].choose(rng) {
                Some(g) if rng.gen_bool(0.7) => HBox::new(
                    g.cx + rng.gen_range(-0.05..0.05),
                    g.cy + rng.gen_range(-0.05..0.05),
                    g.w * rng.gen_range(0.8..1.2),
                    g.h * rng.gen_range(0.8..1.2),
                ),
                _ => HBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2),
            };
            ScoredBox { image, score, bbox }
        })
        .collect();
    (dets, gts)
}

/// Random box with center in the unit square and sides in [0.01, 1).
pub fn random_box(rng: &mut ChaCha8Rng) -> HBox {
    HBox::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0))
}

pub fn box_err(a: &HBox, b: &HBox) -> f64 {
    [a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h].iter().fold(0.0, |m, d| m.max(d.abs()))
}
