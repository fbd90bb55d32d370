//! Local regions around coarse plate boxes, and their aggregation into one
//! batch of fixed-size feature patches.

use lpdet_autodiff::{BackwardContext, Function, Real, Tape, Tensor, TensorError, Var, WarpRegion};
use thiserror::Error;

use crate::geometry::{HBox, Point, Quad};
use crate::label::VehicleLabel;
use crate::losses::{PlateGt, ALPD_COLUMNS};

#[derive(Debug, Error)]
pub enum LreaError {
    #[error("expansion ratio must be at least 1, got {0}")]
    InvalidRatio(f64),
    #[error("plate hint does not overlap its vehicle")]
    EmptyRegion,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Links a region back to the first-stage prediction row it was decoded
/// from, so the region corners can be differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HintSource {
    /// Flat `(image * priors + prior)` row in the prediction tensor.
    pub row: usize,
    pub prior: HBox,
    pub ratio: f64,
    /// Clip bounds `(x0, y0, x1, y1)`: the vehicle box within the image.
    pub bounds: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRegion {
    pub region: HBox,
    pub image: usize,
    pub vehicle: usize,
    pub hint: HBox,
    pub source: Option<HintSource>,
}

fn clip_bounds(vehicle: &HBox) -> [f64; 4] {
    let [x0, y0, x1, y1] = vehicle.corners();
    [x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0)]
}

/// Corners of the expanded box clipped to `bounds`, plus which of them were
/// clipped.
fn expand_corners(center: Point, w: f64, h: f64, ratio: f64, bounds: [f64; 4]) -> ([f64; 4], [bool; 4]) {
    if ratio.is_infinite() {
        return (bounds, [true; 4]);
    }
    let (hw, hh) = (0.5 * ratio * w, 0.5 * ratio * h);
    let raw = [center.x - hw, center.y - hh, center.x + hw, center.y + hh];
    let clipped = [
        raw[0].max(bounds[0]),
        raw[1].max(bounds[1]),
        raw[2].min(bounds[2]),
        raw[3].min(bounds[3]),
    ];
    let flags = std::array::from_fn(|i| clipped[i] != raw[i]);
    (clipped, flags)
}

/// Scales the hint by `ratio` about its center (an infinite ratio takes the
/// whole vehicle), then clips to the vehicle and the image.
pub fn expand_region(hint: &HBox, vehicle: &HBox, ratio: f64) -> Result<HBox, LreaError> {
    if !(ratio >= 1.0) {
        return Err(LreaError::InvalidRatio(ratio));
    }
    let (c, _) = expand_corners(Point::new(hint.cx, hint.cy), hint.w, hint.h, ratio, clip_bounds(vehicle));
    if c[2] > c[0] && c[3] > c[1] {
        Ok(HBox::from_corners(c[0], c[1], c[2], c[3]))
    } else {
        Err(LreaError::EmptyRegion)
    }
}

/// Affine map between a region's patch frame (`[0, 1]^2` over the patch) and
/// normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTransform {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl PatchTransform {
    pub fn for_region(region: &HBox) -> Self {
        let [x0, y0, _, _] = region.corners();
        Self { x0, y0, w: region.w, h: region.h }
    }

    pub fn to_image(&self, p: Point) -> Point {
        Point::new(self.x0 + p.x * self.w, self.y0 + p.y * self.h)
    }

    pub fn to_patch(&self, p: Point) -> Point {
        Point::new((p.x - self.x0) / self.w, (p.y - self.y0) / self.h)
    }

    pub fn box_to_image(&self, b: &HBox) -> HBox {
        let c = self.to_image(Point::new(b.cx, b.cy));
        HBox::new(c.x, c.y, b.w * self.w, b.h * self.h)
    }

    pub fn box_to_patch(&self, b: &HBox) -> HBox {
        let c = self.to_patch(Point::new(b.cx, b.cy));
        HBox::new(c.x, c.y, b.w / self.w, b.h / self.h)
    }

    pub fn quad_to_image(&self, q: &Quad) -> Quad {
        q.map(|p| self.to_image(p))
    }

    pub fn quad_to_patch(&self, q: &Quad) -> Quad {
        q.map(|p| self.to_patch(p))
    }
}

/// Warped patches `(regions, C, S, S)` with their transforms, in region order.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub patches: Option<Var>,
    pub regions: Vec<LocalRegion>,
    pub transforms: Vec<PatchTransform>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Region corners as a differentiable function of the first-stage
/// predictions. Rows without a [`HintSource`] are constants.
struct RegionCorners {
    inputs: [Var; 1],
    sources: Vec<Option<HintSource>>,
    clipped: Vec<[bool; 4]>,
}

/// Center and size of the decoded hint from a prediction row.
fn decode_row(row: &[f64], d: &HBox) -> (Point, f64, f64) {
    let vx = d.cx + row[2] * d.w;
    let vy = d.cy + row[3] * d.h;
    let center = Point::new(vx + row[7] * d.w, vy + row[8] * d.h);
    (center, d.w * row[9].exp(), d.h * row[10].exp())
}

impl<T: Real> Function<T> for RegionCorners {
    fn name(&self) -> &'static str {
        "region_corners"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        if !ctx.needs(0) {
            return vec![None];
        }
        let pred = ctx.value(self.inputs[0]).data();
        let mut grad = vec![T::zero(); pred.len()];
        for (r, src) in self.sources.iter().enumerate() {
            let Some(s) = src else { continue };
            let base = s.row * ALPD_COLUMNS;
            let row: Vec<f64> = pred[base..base + ALPD_COLUMNS].iter().map(|v| v.as_f64()).collect();
            let (_, w, h) = decode_row(&row, &s.prior);
            let g: [f64; 4] = std::array::from_fn(|i| {
                if self.clipped[r][i] {
                    0.0
                } else {
                    out_grad[r * 4 + i].as_f64()
                }
            });
            let (gx, gy) = (g[0] + g[2], g[1] + g[3]);
            let mut add = |col: usize, v: f64| grad[base + col] += T::of(v);
            add(2, gx * s.prior.w);
            add(7, gx * s.prior.w);
            add(3, gy * s.prior.h);
            add(8, gy * s.prior.h);
            add(9, (g[2] - g[0]) * 0.5 * s.ratio * w);
            add(10, (g[3] - g[1]) * 0.5 * s.ratio * h);
        }
        vec![Some(grad)]
    }
}

fn region_corners<T: Real>(tape: &mut Tape<T>, predictions: Var, regions: &[LocalRegion]) -> Result<Var, LreaError> {
    let pred = tape.value(predictions).data();
    let mut out = Vec::with_capacity(regions.len() * 4);
    let mut clipped = Vec::with_capacity(regions.len());
    for r in regions {
        match &r.source {
            Some(s) => {
                let base = s.row * ALPD_COLUMNS;
                let row: Vec<f64> = pred[base..base + ALPD_COLUMNS].iter().map(|v| v.as_f64()).collect();
                let (center, w, h) = decode_row(&row, &s.prior);
                let (c, f) = expand_corners(center, w, h, s.ratio, s.bounds);
                out.extend(c.map(T::of));
                clipped.push(f);
            }
            None => {
                out.extend(r.region.corners().map(T::of));
                clipped.push([true; 4]);
            }
        }
    }
    let value = Tensor::new(vec![regions.len(), 4], out)?;
    Ok(tape.apply(
        Box::new(RegionCorners {
            inputs: [predictions],
            sources: regions.iter().map(|r| r.source).collect(),
            clipped,
        }),
        value,
    )?)
}

/// Sorts regions by (image, vehicle) and warps each from `features`
/// `(B, C, H, W)` onto a `size x size` patch.
///
/// With `predictions` given, regions that carry a [`HintSource`] pass
/// gradients back into the first-stage rows they were decoded from.
pub fn aggregate<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    mut regions: Vec<LocalRegion>,
    size: usize,
    predictions: Option<Var>,
) -> Result<PatchBatch, LreaError> {
    regions.sort_by_key(|r| (r.image, r.vehicle));
    let transforms = regions.iter().map(|r| PatchTransform::for_region(&r.region)).collect();
    if regions.is_empty() {
        return Ok(PatchBatch { patches: None, regions, transforms });
    }
    let patches = match predictions {
        Some(pred) if regions.iter().any(|r| r.source.is_some()) => {
            let coords = region_corners(tape, pred, &regions)?;
            let batch: Vec<usize> = regions.iter().map(|r| r.image).collect();
            tape.roi_warp_with_coords(features, &batch, coords, size)?
        }
        _ => {
            let warp: Vec<WarpRegion> = regions
                .iter()
                .map(|r| {
                    let [x0, y0, x1, y1] = r.region.corners();
                    WarpRegion { batch: r.image, x0, y0, x1, y1 }
                })
                .collect();
            tape.roi_warp(features, &warp, size)?
        }
    };
    Ok(PatchBatch { patches: Some(patches), regions, transforms })
}

/// Builds the region for a coarse hint decoded from prediction row `row`.
pub fn region_from_prediction(
    row_values: &[f64],
    row: usize,
    prior: &HBox,
    vehicle: &HBox,
    ratio: f64,
) -> Result<(HBox, HBox, HintSource), LreaError> {
    if !(ratio >= 1.0) {
        return Err(LreaError::InvalidRatio(ratio));
    }
    let (center, w, h) = decode_row(row_values, prior);
    let hint = HBox::new(center.x, center.y, w.max(f64::MIN_POSITIVE), h.max(f64::MIN_POSITIVE));
    let bounds = clip_bounds(vehicle);
    let (c, _) = expand_corners(center, hint.w, hint.h, ratio, bounds);
    if !(c[2] > c[0] && c[3] > c[1]) {
        return Err(LreaError::EmptyRegion);
    }
    let source = HintSource { row, prior: *prior, ratio, bounds };
    Ok((HBox::from_corners(c[0], c[1], c[2], c[3]), hint, source))
}

/// Plates of `vehicles` with at least half of their box inside `region`,
/// expressed in the region's patch frame.
pub fn plates_in_region(region: &HBox, vehicles: &[VehicleLabel]) -> Vec<PlateGt> {
    let t = PatchTransform::for_region(region);
    vehicles
        .iter()
        .filter_map(|v| Some((v.plate_box()?, v.quad?)))
        .filter(|(b, _)| region.intersection(b).is_some_and(|i| i.area() >= 0.5 * b.area()))
        .map(|(b, q)| PlateGt { bbox: t.box_to_patch(&b), quad: t.quad_to_patch(&q) })
        .collect()
}
