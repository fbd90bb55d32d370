//! Deterministic synthetic street scenes with exact labels.
//!
//! Each scene is a textured background with one to six non-overlapping
//! vehicles (solid bodies with a dark border and a windshield band). Each
//! vehicle gets a bright plate with dark vertical stripes, drawn as the
//! projective image of a rectangle. A vehicle is labeled as carrying a plate
//! only when the plate is fully visible and the vehicle is at least
//! [`SceneParams::min_plate_vehicle_area`] pixels. Small vehicles and
//! vehicles whose plate is partly covered by an occluder are labeled without
//! a plate, even though a plate is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{quad_aabb, HBox, Point, Quad};
use crate::label::{SceneLabel, VehicleLabel, LABEL_FORMAT_VERSION};

/// Luminance floor between a plate's background and its stripes.
pub const PLATE_CONTRAST_FLOOR: f64 = 150.0;

/// Chance that augmentation swaps a training scene for a flat, empty image.
pub const FLAT_NEGATIVE_PROB: f64 = 0.05;

/// Chance that augmentation zooms a scene out onto a flat canvas, and the
/// largest canvas side relative to the image.
pub const EXPAND_PROB: f64 = 0.5;
pub const EXPAND_MAX: f64 = 1.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub size: usize,
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    /// Vehicle width range in pixels for ordinary vehicles.
    pub vehicle_width: (f64, f64),
    /// Plate width as a fraction of the vehicle width.
    pub plate_width: (f64, f64),
    /// Plate width / height.
    pub plate_aspect: (f64, f64),
    /// Maximum corner displacement as a fraction of the plate extents.
    pub tilt: f64,
    pub occlusion_prob: f64,
    pub small_vehicle_prob: f64,
    pub small_vehicle_width: (f64, f64),
    pub large_vehicle_prob: f64,
    pub large_vehicle_width: (f64, f64),
    /// Vehicles below this area (pixels) are labeled without a plate.
    pub min_plate_vehicle_area: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 128,
            min_vehicles: 1,
            max_vehicles: 4,
            vehicle_width: (32.0, 64.0),
            plate_width: (0.22, 0.32),
            plate_aspect: (2.0, 3.0),
            tilt: 0.25,
            occlusion_prob: 0.15,
            small_vehicle_prob: 0.15,
            small_vehicle_width: (14.0, 20.0),
            large_vehicle_prob: 0.1,
            large_vehicle_width: (72.0, 100.0),
            min_plate_vehicle_area: 400.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Params(m.to_string()));
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if self.size < 32 {
            return err("image size must be at least 32");
        }
        if self.min_vehicles == 0 || self.min_vehicles > self.max_vehicles || self.max_vehicles > 6 {
            return err("vehicle count must satisfy 1 <= min <= max <= 6");
        }
        for (name, r) in [
            ("vehicle_width", self.vehicle_width),
            ("plate_width", self.plate_width),
            ("plate_aspect", self.plate_aspect),
            ("small_vehicle_width", self.small_vehicle_width),
            ("large_vehicle_width", self.large_vehicle_width),
        ] {
            if !range_ok(r) {
                return err(&format!("{name} must be a positive, ordered range"));
            }
        }
        if self.plate_width.1 * (1.0 + 2.0 * self.tilt) >= 0.9 {
            return err("plate would not fit inside its vehicle");
        }
        if self.large_vehicle_width.1 > self.size as f64 || self.vehicle_width.1 > self.size as f64 {
            return err("vehicles wider than the image");
        }
        if !(0.0..=0.45).contains(&self.tilt) {
            return err("tilt must lie in [0, 0.45]");
        }
        for p in [self.occlusion_prob, self.small_vehicle_prob, self.large_vehicle_prob] {
            if !(0.0..=1.0).contains(&p) {
                return err("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// An 8-bit RGB image, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    fn filled(size: usize) -> Self {
        Self { size, pixels: vec![0; size * size * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.size + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Paints pixels whose centers fall inside the pixel-space rectangle.
    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        let (lo_x, hi_x) = (pixel_span(x0, x1, self.size).0, pixel_span(x0, x1, self.size).1);
        let (lo_y, hi_y) = pixel_span(y0, y1, self.size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                self.put(x, y, c);
            }
        }
    }
}

/// Pixel indices whose centers lie in `[a, b)`.
fn pixel_span(a: f64, b: f64, size: usize) -> (usize, usize) {
    let lo = (a - 0.5).ceil().clamp(0.0, size as f64) as usize;
    let hi = (b - 0.5).ceil().clamp(0.0, size as f64) as usize;
    (lo, hi.max(lo))
}

/// Luminance used by the contrast checks.
pub fn luminance(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

/// Projective map of the unit square onto a quad: `(0,0)`, `(1,0)`, `(1,1)`,
/// `(0,1)` go to the quad's corners in order.
#[derive(Debug, Clone, Copy)]
pub struct Homography([f64; 9]);

impl Homography {
    pub fn square_to_quad(q: &Quad) -> Self {
        let [p0, p1, p2, p3] = q.pts;
        let sx = p0.x - p1.x + p2.x - p3.x;
        let sy = p0.y - p1.y + p2.y - p3.y;
        let (dx1, dx2, dy1, dy2) = (p1.x - p2.x, p3.x - p2.x, p1.y - p2.y, p3.y - p2.y);
        let den = dx1 * dy2 - dx2 * dy1;
        let g = (sx * dy2 - dx2 * sy) / den;
        let h = (dx1 * sy - sx * dy1) / den;
        Self([
            p1.x - p0.x + g * p1.x,
            p3.x - p0.x + h * p3.x,
            p0.x,
            p1.y - p0.y + g * p1.y,
            p3.y - p0.y + h * p3.y,
            p0.y,
            g,
            h,
            1.0,
        ])
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.0;
        let w = m[6] * p.x + m[7] * p.y + m[8];
        Point::new((m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w)
    }

    pub fn inverse(&self) -> Self {
        let [a, b, c, d, e, f, g, h, i] = self.0;
        let adj = [
            e * i - f * h,
            c * h - b * i,
            b * f - c * e,
            f * g - d * i,
            a * i - c * g,
            c * d - a * f,
            d * h - e * g,
            b * g - a * h,
            a * e - b * d,
        ];
        let det = a * adj[0] + b * adj[3] + c * adj[6];
        Self(adj.map(|v| v / det))
    }
}

/// Seed of scene `index` in a split generated from `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum VehicleKind {
    Normal,
    Small,
    Large,
}

fn random_color(rng: &mut ChaCha8Rng, max_luma: f64) -> [u8; 3] {
    loop {
        let c = [rng.gen_range(20..230u8), rng.gen_range(20..230u8), rng.gen_range(20..230u8)];
        if luminance(c) <= max_luma {
            return c;
        }
    }
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// Perspective-jittered plate inside the pixel-space vehicle rectangle.
fn place_plate(rng: &mut ChaCha8Rng, params: &SceneParams, v: &[f64; 4], kind: VehicleKind) -> Option<Quad> {
    let (vw, vh) = (v[2] - v[0], v[3] - v[1]);
    for _ in 0..50 {
        let frac = match kind {
            VehicleKind::Large => rng.gen_range(0.08..0.1),
            _ => rng.gen_range(params.plate_width.0..=params.plate_width.1),
        };
        let pw = frac * vw;
        let ph = pw / rng.gen_range(params.plate_aspect.0..=params.plate_aspect.1);
        let cx = v[0] + vw * (0.5 + rng.gen_range(-0.08..=0.08));
        let cy = v[1] + vh * rng.gen_range(0.6..=0.78);
        let t = params.tilt;
        let mut jitter = || {
            if t == 0.0 {
                (0.0, 0.0)
            } else {
                (rng.gen_range(-t..=t) * pw, rng.gen_range(-t..=t) * ph)
            }
        };
        let base = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        let pts = base.map(|(sx, sy)| {
            let (dx, dy) = jitter();
            Point::new(cx + sx * pw + dx, cy + sy * ph + dy)
        });
        let q = Quad::new(pts);
        if q.validate().is_err() {
            continue;
        }
        let margin = 1.0;
        if q.pts.iter().all(|p| p.x >= v[0] + margin && p.x <= v[2] - margin && p.y >= v[1] + margin && p.y <= v[3] - margin) {
            return Some(q);
        }
    }
    None
}

fn draw_background(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let base = [rng.gen_range(60..150) as f64, rng.gen_range(60..150) as f64, rng.gen_range(60..150) as f64];
    let (gx, gy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let n = img.size;
    for y in 0..n {
        for x in 0..n {
            let shade = gx * x as f64 + gy * y as f64;
            let noise = rng.gen_range(-12.0..12.0);
            let c = base.map(|b| (b + shade + noise).clamp(0.0, 255.0) as u8);
            img.put(x, y, c);
        }
    }
    // a few road markings as low-frequency clutter
    for _ in 0..rng.gen_range(0..3) {
        let y = rng.gen_range(0.0..n as f64);
        let len = rng.gen_range(10.0..40.0);
        let x = rng.gen_range(0.0..n as f64);
        img.fill_rect(x, y, x + len, y + 2.0, [200, 200, 120]);
    }
}

fn draw_vehicle(img: &mut RgbImage, rng: &mut ChaCha8Rng, v: &[f64; 4]) {
    let body = random_color(rng, 170.0);
    let border = body.map(|c| c / 3);
    img.fill_rect(v[0], v[1], v[2], v[3], border);
    let b = 2.0;
    img.fill_rect(v[0] + b, v[1] + b, v[2] - b, v[3] - b, body);
    let (vw, vh) = (v[2] - v[0], v[3] - v[1]);
    let glass = [40, 50, 70];
    img.fill_rect(v[0] + 0.15 * vw, v[1] + 0.12 * vh, v[2] - 0.15 * vw, v[1] + 0.4 * vh, glass);
}

fn draw_plate(img: &mut RgbImage, q: &Quad, stripes: usize) {
    let to_square = Homography::square_to_quad(q).inverse();
    let bb = quad_aabb(q);
    let [x0, y0, x1, y1] = bb.corners();
    let (lx, hx) = pixel_span(x0, x1 + 1.0, img.size);
    let (ly, hy) = pixel_span(y0, y1 + 1.0, img.size);
    for y in ly..hy {
        for x in lx..hx {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            if !q.contains_point(p) {
                continue;
            }
            let s = to_square.apply(p);
            let band = (s.x * (2 * stripes + 1) as f64).floor() as i64;
            let dark = band % 2 == 1 && (0.2..0.8).contains(&s.y);
            img.put(x, y, if dark { [20, 20, 25] } else { [245, 245, 235] });
        }
    }
}

/// Renders scene `seed`. Coordinates in the label are normalized by the
/// image size.
pub fn generate_scene(seed: u64, image_id: &str, params: &SceneParams) -> Result<(RgbImage, SceneLabel), SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.size as f64;
    let mut img = RgbImage::filled(params.size);
    draw_background(&mut img, &mut rng);

    let count = rng.gen_range(params.min_vehicles..=params.max_vehicles);
    let mut placed: Vec<([f64; 4], VehicleKind)> = Vec::new();
    for k in 0..count {
        let roll: f64 = rng.gen();
        let kind = if k == 0 && roll < params.large_vehicle_prob {
            VehicleKind::Large
        } else if roll < params.large_vehicle_prob + params.small_vehicle_prob {
            VehicleKind::Small
        } else {
            VehicleKind::Normal
        };
        let range = match kind {
            VehicleKind::Normal => params.vehicle_width,
            VehicleKind::Small => params.small_vehicle_width,
            VehicleKind::Large => params.large_vehicle_width,
        };
        for _ in 0..30 {
            let w = rng.gen_range(range.0..=range.1);
            let h = w * rng.gen_range(0.6..=0.9);
            let x0 = rng.gen_range(0.0..=(n - w));
            let y0 = rng.gen_range(0.0..=(n - h));
            let r = [x0, y0, x0 + w, y0 + h];
            if placed.iter().all(|(o, _)| !overlaps(o, &r, 2.0)) {
                placed.push((r, kind));
                break;
            }
        }
    }

    let mut vehicles = Vec::with_capacity(placed.len());
    for (v, kind) in &placed {
        draw_vehicle(&mut img, &mut rng, v);
        let quad = place_plate(&mut rng, params, v, *kind);
        let mut visible = quad.is_some();
        if let Some(q) = &quad {
            draw_plate(&mut img, q, rng.gen_range(3..=5));
            if rng.gen_bool(params.occlusion_prob) {
                let bb = quad_aabb(q);
                let [x0, y0, x1, y1] = bb.corners();
                let cover = rng.gen_range(0.4..=0.7) * (x1 - x0);
                let color = random_color(&mut rng, 200.0);
                if rng.gen_bool(0.5) {
                    img.fill_rect(x0 - 1.0, y0 - 2.0, x0 + cover, y1 + 2.0, color);
                } else {
                    img.fill_rect(x1 - cover, y0 - 2.0, x1 + 1.0, y1 + 2.0, color);
                }
                visible = false;
            }
        }
        let area = (v[2] - v[0]) * (v[3] - v[1]);
        let has_lp = visible && area >= params.min_plate_vehicle_area;
        let to_unit = |p: Point| Point::new(p.x / n, p.y / n);
        vehicles.push(VehicleLabel {
            bbox: HBox::from_corners(v[0] / n, v[1] / n, v[2] / n, v[3] / n),
            has_lp,
            quad: if has_lp { quad.map(|q| q.map(to_unit)) } else { None },
        });
    }
    let label = SceneLabel { version: LABEL_FORMAT_VERSION, image_id: image_id.to_string(), seed, vehicles };
    Ok((img, label))
}

/// Photometric jitter plus either a zoom-out onto a flat canvas or a random
/// square crop that keeps every vehicle whole, resampled back to the
/// original size. Occasionally the scene is swapped for a flat negative.
/// Labels follow the geometry.
pub fn augment(img: &RgbImage, label: &SceneLabel, rng: &mut impl Rng) -> (RgbImage, SceneLabel) {
    if rng.gen_bool(FLAT_NEGATIVE_PROB) {
        return flat_negative(img.size, &label.image_id, label.seed, rng);
    }
    let n = img.size as f64;
    let mut out = img.clone();
    let mut label = label.clone();

    if rng.gen_bool(EXPAND_PROB) {
        // zoom out onto a flat canvas so uniform surroundings of any
        // brightness appear next to real vehicles as negatives
        let r = rng.gen_range(1.0..=EXPAND_MAX);
        let (ox, oy) = (rng.gen_range(0.0..=r - 1.0), rng.gen_range(0.0..=r - 1.0));
        let fill = FlatFill::random(rng);
        for y in 0..img.size {
            for x in 0..img.size {
                let u = (x as f64 + 0.5) / n * r - ox;
                let v = (y as f64 + 0.5) / n * r - oy;
                let c = if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) {
                    bilinear(img, u * n - 0.5, v * n - 0.5)
                } else {
                    fill.sample(rng)
                };
                out.put(x, y, c);
            }
        }
        let map = |p: Point| Point::new((p.x + ox) / r, (p.y + oy) / r);
        for v in &mut label.vehicles {
            let [a, b, c, d] = v.bbox.corners();
            v.bbox = HBox::from_corners((a + ox) / r, (b + oy) / r, (c + ox) / r, (d + oy) / r);
            v.quad = v.quad.map(|q| q.map(map));
        }
    } else if rng.gen_bool(0.5) && !label.vehicles.is_empty() {
        let [mut lo_x, mut lo_y, mut hi_x, mut hi_y] = [1.0f64, 1.0, 0.0, 0.0];
        for v in &label.vehicles {
            let [a, b, c, d] = v.bbox.corners();
            lo_x = lo_x.min(a);
            lo_y = lo_y.min(b);
            hi_x = hi_x.max(c);
            hi_y = hi_y.max(d);
        }
        let need = (hi_x - lo_x).max(hi_y - lo_y);
        let side = rng.gen_range(0.7f64.max(need)..=1.0);
        let x_range = ((hi_x - side).max(0.0), lo_x.min(1.0 - side));
        let y_range = ((hi_y - side).max(0.0), lo_y.min(1.0 - side));
        if x_range.0 <= x_range.1 && y_range.0 <= y_range.1 && side < 1.0 {
            let cx0 = rng.gen_range(x_range.0..=x_range.1);
            let cy0 = rng.gen_range(y_range.0..=y_range.1);
            let size = img.size;
            for y in 0..size {
                for x in 0..size {
                    let sx = (cx0 + (x as f64 + 0.5) / n * side) * n - 0.5;
                    let sy = (cy0 + (y as f64 + 0.5) / n * side) * n - 0.5;
                    out.put(x, y, bilinear(img, sx, sy));
                }
            }
            let map = |p: Point| Point::new((p.x - cx0) / side, (p.y - cy0) / side);
            for v in &mut label.vehicles {
                let [a, b, c, d] = v.bbox.corners();
                v.bbox = HBox::from_corners((a - cx0) / side, (b - cy0) / side, (c - cx0) / side, (d - cy0) / side);
                v.quad = v.quad.map(|q| q.map(map));
            }
        }
    }

    // SSD-style photometric distortion; the wide range also covers the near
    // black and near white scenes the generator never renders
    let gain = if rng.gen_bool(0.5) { rng.gen_range(0.5..1.5) } else { 1.0 };
    let bias = if rng.gen_bool(0.5) { rng.gen_range(-32.0..32.0) } else { 0.0 };
    for p in &mut out.pixels {
        *p = (*p as f64 * gain + bias).round().clamp(0.0, 255.0) as u8;
    }
    (out, label)
}

/// One random color, with no noise half of the time and otherwise up to ±8
/// per channel.
struct FlatFill {
    base: [f64; 3],
    noise: f64,
}

impl FlatFill {
    fn random(rng: &mut impl Rng) -> Self {
        let base = [rng.gen_range(0.0..=255.0), rng.gen_range(0.0..=255.0), rng.gen_range(0.0..=255.0)];
        let noise = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..8.0) };
        Self { base, noise }
    }

    fn sample(&self, rng: &mut impl Rng) -> [u8; 3] {
        if self.noise == 0.0 {
            return self.base.map(|b| b.round() as u8);
        }
        self.base.map(|b| (b + self.noise * rng.gen_range(-1.0..=1.0)).round().clamp(0.0, 255.0) as u8)
    }
}

/// A featureless image with no vehicles. The scenes never contain such
/// inputs, and without them the detector fires on the zero padding around
/// dark uniform images.
fn flat_negative(size: usize, image_id: &str, seed: u64, rng: &mut impl Rng) -> (RgbImage, SceneLabel) {
    let fill = FlatFill::random(rng);
    let mut out = RgbImage::filled(size);
    for y in 0..size {
        for x in 0..size {
            out.put(x, y, fill.sample(rng));
        }
    }
    let label = SceneLabel { version: LABEL_FORMAT_VERSION, image_id: image_id.to_string(), seed, vehicles: Vec::new() };
    (out, label)
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [u8; 3] {
    let max = (img.size - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.size - 1), (y0 + 1).min(img.size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
    std::array::from_fn(|k| {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bottom = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy).round() as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_maps_corners() {
        let q = Quad::new([Point::new(1.0, 1.0), Point::new(5.0, 1.5), Point::new(4.5, 3.0), Point::new(1.2, 2.7)]);
        let h = Homography::square_to_quad(&q);
        let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for (i, (u, v)) in square.into_iter().enumerate() {
            let p = h.apply(Point::new(u, v));
            assert!((p.x - q.pts[i].x).abs() < 1e-12 && (p.y - q.pts[i].y).abs() < 1e-12);
            let back = h.inverse().apply(p);
            assert!((back.x - u).abs() < 1e-12 && (back.y - v).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let p = SceneParams::default();
        assert_eq!(generate_scene(9, "a", &p).unwrap(), generate_scene(9, "a", &p).unwrap());
        assert_ne!(generate_scene(9, "a", &p).unwrap().0, generate_scene(10, "a", &p).unwrap().0);
    }

    #[test]
    fn infeasible_params_rejected() {
        let p = SceneParams { plate_width: (0.6, 0.8), ..Default::default() };
        assert!(generate_scene(1, "a", &p).is_err());
    }
}
