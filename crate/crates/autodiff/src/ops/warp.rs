use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{BackwardContext, Function, Tape, Var};
use crate::tensor::Tensor;

/// A region of one image in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpRegion {
    pub batch: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// One bilinear tap along an axis.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// Sample fell outside the map and was clamped to the border.
    clamped: bool,
}

fn taps<T: Real>(start: f64, end: f64, size: usize, extent: usize) -> Vec<Tap<T>> {
    (0..size)
        .map(|j| {
            let t = (j as f64 + 0.5) / size as f64;
            let pos = (start + t * (end - start)) * extent as f64 - 0.5;
            let max = (extent - 1) as f64;
            let clamped = !(0.0..=max).contains(&pos);
            let p = pos.clamp(0.0, max);
            let lo = (p.floor() as usize).min(extent.saturating_sub(2));
            let hi = (lo + 1).min(extent - 1);
            Tap {
                lo,
                hi,
                frac: T::of(p - lo as f64),
                clamped,
            }
        })
        .collect()
}

struct RoiWarp<T> {
    inputs: Vec<Var>,
    regions: Vec<WarpRegion>,
    dims: [usize; 4],
    size: usize,
    x_taps: Vec<Vec<Tap<T>>>,
    y_taps: Vec<Vec<Tap<T>>>,
}

impl<T: Real> Function<T> for RoiWarp<T> {
    fn name(&self) -> &'static str {
        "roi_warp"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, out_grad: &[T]) -> Vec<Option<Vec<T>>> {
        let [_, c, h, w] = self.dims;
        let s = self.size;
        let feats = ctx.value(self.inputs[0]).data();
        let mut d_feat = ctx.needs(0).then(|| vec![T::zero(); feats.len()]);
        let want_coords = self.inputs.len() > 1 && ctx.needs(1);
        let mut d_coords = want_coords.then(|| vec![T::zero(); self.regions.len() * 4]);
        let one = T::one();
        for (r, region) in self.regions.iter().enumerate() {
            let (xt, yt) = (&self.x_taps[r], &self.y_taps[r]);
            for ch in 0..c {
                let plane = (region.batch * c + ch) * h * w;
                let out_base = (r * c + ch) * s * s;
                for (i, ty) in yt.iter().enumerate() {
                    for (j, tx) in xt.iter().enumerate() {
                        let g = out_grad[out_base + i * s + j];
                        if let Some(df) = d_feat.as_mut() {
                            df[plane + ty.lo * w + tx.lo] += g * (one - ty.frac) * (one - tx.frac);
                            df[plane + ty.lo * w + tx.hi] += g * (one - ty.frac) * tx.frac;
                            df[plane + ty.hi * w + tx.lo] += g * ty.frac * (one - tx.frac);
                            df[plane + ty.hi * w + tx.hi] += g * ty.frac * tx.frac;
                        }
                        if let Some(dc) = d_coords.as_mut() {
                            let v = |y: usize, x: usize| feats[plane + y * w + x];
                            let t_i = T::of((i as f64 + 0.5) / s as f64);
                            let t_j = T::of((j as f64 + 0.5) / s as f64);
                            if !tx.clamped {
                                let d_px = (one - ty.frac) * (v(ty.lo, tx.hi) - v(ty.lo, tx.lo))
                                    + ty.frac * (v(ty.hi, tx.hi) - v(ty.hi, tx.lo));
                                let scale = g * d_px * T::of(w as f64);
                                dc[r * 4] += scale * (one - t_j);
                                dc[r * 4 + 2] += scale * t_j;
                            }
                            if !ty.clamped {
                                let d_py = (one - tx.frac) * (v(ty.hi, tx.lo) - v(ty.lo, tx.lo))
                                    + tx.frac * (v(ty.hi, tx.hi) - v(ty.lo, tx.hi));
                                let scale = g * d_py * T::of(h as f64);
                                dc[r * 4 + 1] += scale * (one - t_i);
                                dc[r * 4 + 3] += scale * t_i;
                            }
                        }
                    }
                }
            }
        }
        let mut grads = vec![d_feat];
        if self.inputs.len() > 1 {
            grads.push(d_coords);
        }
        grads
    }
}

impl<T: Real> Tape<T> {
    /// Bilinearly resamples each region of `features` `(B, C, H, W)` onto an
    /// `size x size` grid of region-uniform sample points, giving
    /// `(regions, C, size, size)`.
    ///
    /// Pixel `k` covers normalized `[k/W, (k+1)/W)`, so a region aligned to a
    /// `size x size` pixel block reproduces that block exactly.
    pub fn roi_warp(&mut self, features: Var, regions: &[WarpRegion], size: usize) -> Result<Var> {
        self.warp_impl(features, regions.to_vec(), None, size)
    }

    /// As [`Tape::roi_warp`], but region corners `(x0, y0, x1, y1)` are read
    /// from the `(regions, 4)` tensor `coords` and receive gradients.
    pub fn roi_warp_with_coords(
        &mut self,
        features: Var,
        batch_index: &[usize],
        coords: Var,
        size: usize,
    ) -> Result<Var> {
        self.check(&[coords])?;
        if self.shape(coords) != [batch_index.len(), 4] {
            return Err(TensorError::ShapeMismatch {
                op: "roi_warp",
                detail: format!(
                    "coords {:?} for {} regions",
                    self.shape(coords),
                    batch_index.len()
                ),
            });
        }
        let c = self.value(coords).data();
        let regions = batch_index
            .iter()
            .enumerate()
            .map(|(r, &batch)| WarpRegion {
                batch,
                x0: c[r * 4].as_f64(),
                y0: c[r * 4 + 1].as_f64(),
                x1: c[r * 4 + 2].as_f64(),
                y1: c[r * 4 + 3].as_f64(),
            })
            .collect();
        self.warp_impl(features, regions, Some(coords), size)
    }

    fn warp_impl(
        &mut self,
        features: Var,
        regions: Vec<WarpRegion>,
        coords: Option<Var>,
        size: usize,
    ) -> Result<Var> {
        self.check(&[features])?;
        let fs = self.shape(features).to_vec();
        if fs.len() != 4 || size == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "roi_warp",
                detail: format!("features {fs:?}, size {size}"),
            });
        }
        let [b, c, h, w] = [fs[0], fs[1], fs[2], fs[3]];
        for (i, r) in regions.iter().enumerate() {
            if r.batch >= b {
                return Err(TensorError::ShapeMismatch {
                    op: "roi_warp",
                    detail: format!("region {i} refers to image {} of {b}", r.batch),
                });
            }
            if !(r.x1 > r.x0 && r.y1 > r.y0) {
                return Err(TensorError::InvalidRegion { index: i });
            }
        }
        let x_taps: Vec<Vec<Tap<T>>> = regions.iter().map(|r| taps(r.x0, r.x1, size, w)).collect();
        let y_taps: Vec<Vec<Tap<T>>> = regions.iter().map(|r| taps(r.y0, r.y1, size, h)).collect();
        let feats = self.value(features).data();
        let one = T::one();
        let mut out = vec![T::zero(); regions.len() * c * size * size];
        for (r, region) in regions.iter().enumerate() {
            for ch in 0..c {
                let plane = &feats[(region.batch * c + ch) * h * w..(region.batch * c + ch + 1) * h * w];
                let out_base = (r * c + ch) * size * size;
                for (i, ty) in y_taps[r].iter().enumerate() {
                    let row_lo = &plane[ty.lo * w..(ty.lo + 1) * w];
                    let row_hi = &plane[ty.hi * w..(ty.hi + 1) * w];
                    for (j, tx) in x_taps[r].iter().enumerate() {
                        let top = row_lo[tx.lo] * (one - tx.frac) + row_lo[tx.hi] * tx.frac;
                        let bottom = row_hi[tx.lo] * (one - tx.frac) + row_hi[tx.hi] * tx.frac;
                        out[out_base + i * size + j] = top * (one - ty.frac) + bottom * ty.frac;
                    }
                }
            }
        }
        let mut inputs = vec![features];
        inputs.extend(coords);
        let shape = vec![regions.len(), c, size, size];
        self.apply(
            Box::new(RoiWarp {
                inputs,
                regions,
                dims: [b, c, h, w],
                size,
                x_taps,
                y_taps,
            }),
            Tensor::from_parts(shape, out),
        )
    }
}
