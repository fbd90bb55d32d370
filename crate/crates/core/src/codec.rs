//! Regression targets relative to a prior box, and their inverses.
//!
//! No variance scalers are applied: targets are the raw normalized offsets and
//! log size ratios.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{HBox, Point, Quad};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("prior box has non-positive extent (w = {w}, h = {h})")]
    DegeneratePrior { w: f64, h: f64 },
    #[error("target box has non-positive extent (w = {w}, h = {h})")]
    DegenerateTarget { w: f64, h: f64 },
}

fn check_prior(d: &HBox) -> Result<(), CodecError> {
    if d.w > 0.0 && d.h > 0.0 {
        Ok(())
    } else {
        Err(CodecError::DegeneratePrior { w: d.w, h: d.h })
    }
}

fn check_target(g: &HBox) -> Result<(), CodecError> {
    if g.w > 0.0 && g.h > 0.0 {
        Ok(())
    } else {
        Err(CodecError::DegenerateTarget { w: g.w, h: g.h })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleTarget {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl VehicleTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }
}

pub fn encode_vehicle(g: &HBox, d: &HBox) -> Result<VehicleTarget, CodecError> {
    check_prior(d)?;
    check_target(g)?;
    Ok(VehicleTarget {
        cx: (g.cx - d.cx) / d.w,
        cy: (g.cy - d.cy) / d.h,
        w: (g.w / d.w).ln(),
        h: (g.h / d.h).ln(),
    })
}

pub fn decode_vehicle(t: &VehicleTarget, d: &HBox) -> HBox {
    HBox::new(d.cx + t.cx * d.w, d.cy + t.cy * d.h, d.w * t.w.exp(), d.h * t.h.exp())
}

/// Plate center offset from the vehicle center, and log plate size, both
/// normalized by the vehicle prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateHintTarget {
    pub off_x: f64,
    pub off_y: f64,
    pub w: f64,
    pub h: f64,
}

impl PlateHintTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.off_x, self.off_y, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { off_x: v[0], off_y: v[1], w: v[2], h: v[3] }
    }
}

/// `vehicle` is the ground-truth vehicle box the offset is measured from.
pub fn encode_plate_hint(plate: &HBox, vehicle: &HBox, d: &HBox) -> Result<PlateHintTarget, CodecError> {
    check_prior(d)?;
    check_target(plate)?;
    Ok(PlateHintTarget {
        off_x: (plate.cx - vehicle.cx) / d.w,
        off_y: (plate.cy - vehicle.cy) / d.h,
        w: (plate.w / d.w).ln(),
        h: (plate.h / d.h).ln(),
    })
}

/// The decoded offset is added to `vehicle_center`, normally the center of the
/// decoded vehicle prediction. Sizes stay strictly positive even when the
/// exponential underflows.
pub fn decode_plate_hint(t: &PlateHintTarget, d: &HBox, vehicle_center: Point) -> HBox {
    HBox::new(
        vehicle_center.x + t.off_x * d.w,
        vehicle_center.y + t.off_y * d.h,
        (d.w * t.w.exp()).max(f64::MIN_POSITIVE),
        (d.h * t.h.exp()).max(f64::MIN_POSITIVE),
    )
}

/// Corner coordinates `(tlx, tly, trx, try, brx, bry, blx, bly)` normalized
/// by the prior center and extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerTarget(pub [f64; 8]);

pub fn encode_corners(q: &Quad, d: &HBox) -> Result<CornerTarget, CodecError> {
    check_prior(d)?;
    let mut t = [0.0; 8];
    for (i, p) in q.pts.iter().enumerate() {
        t[2 * i] = (p.x - d.cx) / d.w;
        t[2 * i + 1] = (p.y - d.cy) / d.h;
    }
    Ok(CornerTarget(t))
}

pub fn decode_corners(t: &CornerTarget, d: &HBox) -> Quad {
    let v = &t.0;
    Quad {
        pts: std::array::from_fn(|i| Point::new(d.cx + v[2 * i] * d.w, d.cy + v[2 * i + 1] * d.h)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vehicle_examples() {
        let d = HBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(encode_vehicle(&d, &d).unwrap().to_array(), [0.0; 4]);
        let t = encode_vehicle(&HBox::new(0.6, 0.5, 0.4, 0.2), &d).unwrap();
        assert!((t.cx - 0.5).abs() < 1e-12);
        assert_eq!(t.cy, 0.0);
        assert!((t.w - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(t.h, 0.0);
        assert!(encode_vehicle(&HBox::new(0.5, 0.5, 0.0, 0.1), &d).is_err());
    }

    #[test]
    fn plate_hint_examples() {
        let d = HBox::new(0.5, 0.5, 0.2, 0.2);
        let v = HBox::new(0.4, 0.4, 0.3, 0.3);
        let plate = HBox::new(0.4, 0.4, 0.2, 0.2);
        assert_eq!(encode_plate_hint(&plate, &v, &d).unwrap().to_array(), [0.0; 4]);
        let shifted = HBox::new(0.45, 0.4, 0.2, 0.2);
        assert!((encode_plate_hint(&shifted, &v, &d).unwrap().off_x - 0.25).abs() < 1e-12);
        let huge = PlateHintTarget { off_x: 0.0, off_y: 0.0, w: -800.0, h: -50.0 };
        let b = decode_plate_hint(&huge, &d, Point::new(0.5, 0.5));
        assert!(b.w > 0.0 && b.h > 0.0);
    }

    #[test]
    fn corner_examples() {
        let d = HBox::new(0.5, 0.5, 0.2, 0.1);
        let q = Quad { pts: [Point::new(0.7, 0.5), Point::new(0.5, 0.5), Point::new(0.5, 0.5), Point::new(0.5, 0.5)] };
        let t = encode_corners(&q, &d).unwrap();
        let expected = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(t.0.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12), "{t:?}");
    }
}
