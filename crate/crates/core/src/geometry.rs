//! Horizontal boxes, quadrilaterals and their overlap measures.
//!
//! All coordinates are normalized to the image (`[0, 1]` for in-frame
//! geometry) with y pointing down.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Intersections smaller than this are reported as empty.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box (w = {w}, h = {h})")]
    DegenerateBox { w: f64, h: f64 },
    #[error("quadrilateral is self-intersecting")]
    SelfIntersecting,
    #[error("quadrilateral is not clockwise (signed area {0})")]
    WrongOrientation(f64),
    #[error("quadrilateral is not convex")]
    NonConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box in center-size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl HBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self {
            cx: 0.5 * (xmin + xmax),
            cy: 0.5 * (ymin + ymax),
            w: xmax - xmin,
            h: ymax - ymin,
        }
    }

    /// `(xmin, ymin, xmax, ymax)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::DegenerateBox {
                w: self.w,
                h: self.h,
            })
        }
    }

    /// Overlap box, `None` when the boxes do not overlap with positive area.
    pub fn intersection(&self, other: &HBox) -> Option<HBox> {
        let [ax0, ay0, ax1, ay1] = self.corners();
        let [bx0, by0, bx1, by1] = other.corners();
        let (x0, y0) = (ax0.max(bx0), ay0.max(by0));
        let (x1, y1) = (ax1.min(bx1), ay1.min(by1));
        (x1 > x0 && y1 > y0).then(|| HBox::from_corners(x0, y0, x1, y1))
    }

    /// Intersection with the unit square.
    pub fn clip_unit(&self) -> Option<HBox> {
        self.intersection(&HBox::new(0.5, 0.5, 1.0, 1.0))
    }

    pub fn to_quad(&self) -> Quad {
        let [x0, y0, x1, y1] = self.corners();
        Quad::new([
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }
}

/// Four corners in order top-left, top-right, bottom-right, bottom-left.
///
/// Serialized as the flat array `[tlx, tly, trx, try, brx, bry, blx, bly]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 8]", into = "[f64; 8]")]
pub struct Quad {
    pub pts: [Point; 4],
}

impl From<[f64; 8]> for Quad {
    fn from(v: [f64; 8]) -> Self {
        Quad::from_flat(v)
    }
}

impl From<Quad> for [f64; 8] {
    fn from(q: Quad) -> Self {
        q.to_flat()
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_cross(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

/// Shoelace area; positive for tl→tr→br→bl order with y down.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

impl Quad {
    pub const fn new(pts: [Point; 4]) -> Self {
        Self { pts }
    }

    /// From `[tlx, tly, trx, try, brx, bry, blx, bly]`.
    pub fn from_flat(v: [f64; 8]) -> Self {
        Self::new([
            Point::new(v[0], v[1]),
            Point::new(v[2], v[3]),
            Point::new(v[4], v[5]),
            Point::new(v[6], v[7]),
        ])
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let p = &self.pts;
        [p[0].x, p[0].y, p[1].x, p[1].y, p[2].x, p[2].y, p[3].x, p[3].y]
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.pts)
    }

    pub fn is_simple(&self) -> bool {
        let p = &self.pts;
        !segments_cross(p[0], p[1], p[2], p[3]) && !segments_cross(p[1], p[2], p[3], p[0])
    }

    pub fn is_convex(&self) -> bool {
        (0..4).all(|i| cross(self.pts[i], self.pts[(i + 1) % 4], self.pts[(i + 2) % 4]) > 0.0)
    }

    /// Checks the quad is simple, clockwise (y down) and convex.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.is_simple() {
            return Err(GeometryError::SelfIntersecting);
        }
        let area = self.area();
        if !(area > 0.0) {
            return Err(GeometryError::WrongOrientation(area));
        }
        if !self.is_convex() {
            return Err(GeometryError::NonConvex);
        }
        Ok(())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Quad {
        Quad::new(self.pts.map(|p| Point::new(p.x + dx, p.y + dy)))
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Quad {
        Quad::new(self.pts.map(f))
    }

    /// Point-in-quad for convex clockwise quads, boundary inclusive.
    pub fn contains_point(&self, p: Point) -> bool {
        (0..4).all(|i| cross(self.pts[i], self.pts[(i + 1) % 4], p) >= 0.0)
    }
}

pub fn iou_hbox(a: &HBox, b: &HBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    if inter < AREA_EPS {
        return Ok(0.0);
    }
    Ok((inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0))
}

/// Clips `subject` by every edge of the convex clockwise polygon `clip`.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                output.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                output.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
            }
        }
    }
    output
}

/// Exact intersection area of two convex quads.
pub fn quad_intersection_area(a: &Quad, b: &Quad) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    let poly = clip_convex(&a.pts, &b.pts);
    let area = if poly.len() < 3 { 0.0 } else { signed_area(&poly).max(0.0) };
    Ok(if area < AREA_EPS { 0.0 } else { area })
}

pub fn quad_iou(a: &Quad, b: &Quad) -> Result<f64, GeometryError> {
    let inter = quad_intersection_area(a, b)?;
    if inter == 0.0 {
        return Ok(0.0);
    }
    Ok((inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0))
}

/// Tightest axis-aligned box around the quad's vertices.
pub fn quad_aabb(q: &Quad) -> HBox {
    let xs = q.pts.map(|p| p.x);
    let ys = q.pts.map(|p| p.y);
    let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    HBox::from_corners(min(xs), min(ys), max(xs), max(ys))
}

/// Slack for [`contains`]: boxes stored as center/size drift by an ulp or
/// so when rebuilt from corners.
pub const CONTAINMENT_EPS: f64 = 1e-12;

/// Whether `inner` lies entirely within `outer`, boundary inclusive (up to
/// [`CONTAINMENT_EPS`]).
pub fn contains(outer: &HBox, inner: &HBox) -> bool {
    let [ox0, oy0, ox1, oy1] = outer.corners();
    let [ix0, iy0, ix1, iy1] = inner.corners();
    let e = CONTAINMENT_EPS;
    ix0 >= ox0 - e && iy0 >= oy0 - e && ix1 <= ox1 + e && iy1 <= oy1 + e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Quad {
        HBox::new(0.5, 0.5, 1.0, 1.0).to_quad()
    }

    fn diamond() -> Quad {
        Quad::new([
            Point::new(0.5, 0.0),
            Point::new(1.0, 0.5),
            Point::new(0.5, 1.0),
            Point::new(0.0, 0.5),
        ])
    }

    #[test]
    fn hbox_iou_examples() {
        let a = HBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = HBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((iou_hbox(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou_hbox(&a, &a).unwrap(), 1.0);
        let c = HBox::from_corners(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou_hbox(&a, &c).unwrap(), 0.0);
        assert!(iou_hbox(&a, &HBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn quad_iou_examples() {
        let a = HBox::from_corners(0.0, 0.0, 2.0, 2.0).to_quad();
        let b = HBox::from_corners(1.0, 1.0, 3.0, 3.0).to_quad();
        assert!((quad_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!((quad_iou(&unit_square(), &diamond()).unwrap() - 0.5).abs() < 1e-12);
        assert!((quad_iou(&diamond(), &diamond()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quad_validation_errors() {
        let bow = Quad::new([
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ]);
        assert_eq!(bow.validate(), Err(GeometryError::SelfIntersecting));
        assert!(quad_iou(&bow, &unit_square()).is_err());
        let ccw = Quad::new([
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
        ]);
        assert!(matches!(ccw.validate(), Err(GeometryError::WrongOrientation(_))));
        let dart = Quad::new([
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.4, 0.4),
            Point::new(0.0, 1.0),
        ]);
        assert_eq!(dart.validate(), Err(GeometryError::NonConvex));
    }

    #[test]
    fn aabb_examples() {
        let sq = HBox::from_corners(0.1, 0.2, 0.4, 0.6);
        let back = quad_aabb(&sq.to_quad());
        for (a, b) in back.corners().iter().zip(sq.corners()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(quad_aabb(&diamond()).corners(), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn contains_examples() {
        let a = HBox::from_corners(0.1, 0.1, 0.5, 0.5);
        assert!(contains(&a, &a));
        let shifted = HBox::new(a.cx + 1e-9, a.cy, a.w, a.h);
        assert!(!contains(&a, &shifted));
        assert!(contains(&HBox::new(0.5, 0.5, 1.0, 1.0), &a));
    }

    #[test]
    fn tiny_overlaps_are_zero() {
        let a = HBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let b = HBox::from_corners(1.0 - 1e-7, 1.0 - 1e-7, 2.0, 2.0);
        assert_eq!(iou_hbox(&a, &b).unwrap(), 0.0);
        assert_eq!(quad_iou(&a.to_quad(), &b.to_quad()).unwrap(), 0.0);
    }
}
