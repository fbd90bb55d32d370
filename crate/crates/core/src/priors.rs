//! Default boxes tiled over detection feature maps, and their assignment to
//! ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_hbox, HBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("prior spec has no layers")]
    Empty,
    #[error("layer {0}: grid size must be positive")]
    ZeroGrid(usize),
    #[error("layer {0}: no aspect ratios")]
    NoRatios(usize),
    #[error("layer {layer}: invalid scale or ratio")]
    InvalidValue { layer: usize },
    #[error("scales must increase across layers")]
    ScalesNotIncreasing,
}

/// One detection layer: `grid x grid` cells, each with one prior per ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub grid: usize,
    pub scale: f64,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    pub boxes: Vec<HBox>,
    pub layer: Vec<usize>,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Priors ordered by layer, then row-major cell, then ratio. Each is centered
/// on its cell with `w = scale * sqrt(ratio)`, `h = scale / sqrt(ratio)`, and
/// clipped to the unit square.
pub fn generate_priors(specs: &[LayerSpec]) -> Result<PriorSet, PriorError> {
    if specs.is_empty() {
        return Err(PriorError::Empty);
    }
    for (i, s) in specs.iter().enumerate() {
        if s.grid == 0 {
            return Err(PriorError::ZeroGrid(i));
        }
        if s.ratios.is_empty() {
            return Err(PriorError::NoRatios(i));
        }
        if !(s.scale > 0.0) || s.ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(PriorError::InvalidValue { layer: i });
        }
    }
    if specs.windows(2).any(|w| w[1].scale <= w[0].scale) {
        return Err(PriorError::ScalesNotIncreasing);
    }
    let mut boxes = Vec::new();
    let mut layer = Vec::new();
    for (li, spec) in specs.iter().enumerate() {
        let g = spec.grid as f64;
        for row in 0..spec.grid {
            for col in 0..spec.grid {
                let (cx, cy) = ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g);
                for &ar in &spec.ratios {
                    let b = HBox::new(cx, cy, spec.scale * ar.sqrt(), spec.scale / ar.sqrt());
                    let [x0, y0, x1, y1] = b.corners();
                    boxes.push(HBox::from_corners(
                        x0.clamp(0.0, 1.0),
                        y0.clamp(0.0, 1.0),
                        x1.clamp(0.0, 1.0),
                        y1.clamp(0.0, 1.0),
                    ));
                    layer.push(li);
                }
            }
        }
    }
    Ok(PriorSet { boxes, layer })
}

/// Per-prior ground-truth assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matched: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn positive(&self) -> Vec<bool> {
        self.matched.iter().map(Option::is_some).collect()
    }

    /// 1 for matched priors, 0 for background.
    pub fn category(&self) -> Vec<usize> {
        self.matched.iter().map(|m| usize::from(m.is_some())).collect()
    }

    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

fn iou_or_zero(a: &HBox, b: &HBox) -> f64 {
    iou_hbox(a, b).unwrap_or(0.0)
}

/// Assigns priors to ground-truth boxes.
///
/// First every GT claims a prior: repeatedly the highest-IOU pair among
/// unmatched GTs and unclaimed priors is fixed (ties: lower prior index, then
/// lower GT index). Then every unclaimed prior whose best IOU reaches
/// `threshold` is matched to that best GT (ties: lower GT index).
pub fn match_priors(priors: &PriorSet, gts: &[HBox], threshold: f64) -> MatchResult {
    let p = priors.len();
    let mut matched = vec![None; p];
    if gts.is_empty() {
        return MatchResult { matched };
    }
    let iou: Vec<Vec<f64>> = priors
        .boxes
        .iter()
        .map(|d| gts.iter().map(|g| iou_or_zero(d, g)).collect())
        .collect();

    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(p) {
        let mut best: Option<(f64, usize, usize)> = None;
        for (pi, row) in iou.iter().enumerate() {
            if matched[pi].is_some() {
                continue;
            }
            for (gi, &v) in row.iter().enumerate() {
                if gt_done[gi] {
                    continue;
                }
                // strict comparison keeps the lowest prior, then GT, index on ties
                if best.is_none_or(|(bv, _, _)| v > bv) {
                    best = Some((v, pi, gi));
                }
            }
        }
        let Some((_, pi, gi)) = best else { break };
        matched[pi] = Some(gi);
        gt_done[gi] = true;
    }

    for (pi, row) in iou.iter().enumerate() {
        if matched[pi].is_some() {
            continue;
        }
        let (gi, &v) = row
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if v >= threshold {
            matched[pi] = Some(gi);
        }
    }
    MatchResult { matched }
}

/// Picks the highest-loss negatives, up to `ratio` per positive (one when
/// there are no positives). Ties go to the lower index.
pub fn hard_negative_mine(conf_losses: &[f64], positive: &[bool], ratio: usize) -> Vec<bool> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut negatives: Vec<usize> = (0..conf_losses.len()).filter(|&i| !positive[i]).collect();
    let quota = if n_pos == 0 { 1 } else { ratio.max(1) * n_pos }.min(negatives.len());
    negatives.sort_by(|&a, &b| conf_losses[b].total_cmp(&conf_losses[a]).then(a.cmp(&b)));
    let mut selected = vec![false; conf_losses.len()];
    for &i in &negatives[..quota] {
        selected[i] = true;
    }
    selected
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_alpd() -> Vec<LayerSpec> {
        let ratios = vec![1.0, 2.0, 3.0, 0.5];
        vec![
            LayerSpec { grid: 16, scale: 0.15, ratios: ratios.clone() },
            LayerSpec { grid: 8, scale: 0.35, ratios: ratios.clone() },
            LayerSpec { grid: 4, scale: 0.60, ratios },
        ]
    }

    #[test]
    fn tiny_alpd_prior_count() {
        assert_eq!(generate_priors(&tiny_alpd()).unwrap().len(), 1344);
    }

    #[test]
    fn single_cell_prior() {
        let p = generate_priors(&[LayerSpec { grid: 1, scale: 0.5, ratios: vec![1.0] }]).unwrap();
        assert_eq!(p.boxes, vec![HBox::new(0.5, 0.5, 0.5, 0.5)]);
    }

    #[test]
    fn all_priors_inside_unit_square() {
        let p = generate_priors(&tiny_alpd()).unwrap();
        for b in &p.boxes {
            let [x0, y0, x1, y1] = b.corners();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 + 1e-15 && y1 <= 1.0 + 1e-15, "{b:?}");
            assert!(b.w > 0.0 && b.h > 0.0);
        }
    }

    #[test]
    fn spec_errors() {
        assert_eq!(generate_priors(&[]), Err(PriorError::Empty));
        let mut s = tiny_alpd();
        s[1].scale = 0.1;
        assert_eq!(generate_priors(&s), Err(PriorError::ScalesNotIncreasing));
    }

    #[test]
    fn identical_gt_claims_that_prior() {
        let p = generate_priors(&tiny_alpd()).unwrap();
        let gt = p.boxes[77];
        let m = match_priors(&p, &[gt], 0.5);
        assert_eq!(m.matched[77], Some(0));
        assert!(match_priors(&p, &[], 0.5).positive().iter().all(|x| !x));
    }

    #[test]
    fn mining_examples() {
        let losses: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mut pos = vec![false; 20];
        pos[..4].iter_mut().for_each(|p| *p = true);
        let sel = hard_negative_mine(&losses, &pos, 3);
        assert_eq!(sel.iter().filter(|&&s| s).count(), 12);
        assert!(sel[8..].iter().all(|&s| s));
        assert!(hard_negative_mine(&losses, &[true; 20], 3).iter().all(|&s| !s));
        let none = hard_negative_mine(&losses, &[false; 20], 3);
        assert_eq!(none.iter().filter(|&&s| s).count(), 1);
        assert!(none[19]);
        // fewer negatives than the quota
        let mut most = vec![true; 20];
        most[0] = false;
        most[1] = false;
        assert_eq!(hard_negative_mine(&losses, &most, 3).iter().filter(|&&s| s).count(), 2);
    }
}
