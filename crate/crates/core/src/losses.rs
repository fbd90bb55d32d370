//! Training objectives of both stages.
//!
//! Each stage has a target-building step (matching, target encoding and
//! hard-negative mining, all on plain values) and an assembly step that
//! records the loss on the tape. Keeping them apart lets gradient checks hold
//! the mined negatives fixed.
//!
//! Per-prior prediction rows are laid out as
//! `[bg, obj, loc(4), has_lp, off(2), plate_wh(2)]` for the first stage and
//! `[bg, obj, loc(4), corners(8)]` for the second.

use lpdet_autodiff::{Real, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_corners, encode_plate_hint, encode_vehicle, CodecError};
use crate::geometry::{HBox, Quad};
use crate::label::VehicleLabel;
use crate::priors::{hard_negative_mine, match_priors, PriorSet};

pub use lpdet_autodiff::smooth_l1_value as smooth_l1;

pub const ALPD_COLUMNS: usize = 11;
pub const MOLPR_COLUMNS: usize = 14;

const CONF: usize = 0;
const LOC: usize = 2;
const HAS_LP: usize = 6;
const OFF: usize = 7;
const PLATE_WH: usize = 9;
const CORNERS: usize = 6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("prediction shape {got:?} does not fit {expected}")]
    Shape { got: Vec<usize>, expected: String },
    #[error("no prior selected for the confidence loss")]
    NothingSelected,
}

/// Matching and mining settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub negative_ratio: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, negative_ratio: 3 }
    }
}

/// Unnormalized first-stage terms; `total() = sum / n_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlpdLossBreakdown {
    pub conf: f64,
    pub loc: f64,
    pub has_lp: f64,
    pub off: f64,
    pub lp_wh: f64,
    pub n_pos: usize,
}

impl AlpdLossBreakdown {
    pub fn total(&self) -> f64 {
        (self.conf + self.loc + self.has_lp + self.off + self.lp_wh) / self.n_pos.max(1) as f64
    }
}

/// Unnormalized second-stage terms; `total() = sum / n_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MolprLossBreakdown {
    pub conf: f64,
    pub loc: f64,
    pub corner: f64,
    pub n_pos: usize,
}

impl MolprLossBreakdown {
    pub fn total(&self) -> f64 {
        (self.conf + self.loc + self.corner) / self.n_pos.max(1) as f64
    }
}

/// `L1 + alpha * L2`; a missing second stage contributes nothing.
pub fn total_loss(l1: &AlpdLossBreakdown, l2: Option<&MolprLossBreakdown>, alpha: f64) -> f64 {
    l1.total() + l2.map_or(0.0, |l| alpha * l.total())
}

/// Everything the first-stage loss needs besides the predictions, flattened
/// over `(image, prior)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AlpdTargets {
    pub labels: Vec<usize>,
    pub conf_mask: Vec<bool>,
    pub positive: Vec<bool>,
    pub loc: Vec<f64>,
    pub has_lp: Vec<f64>,
    pub off: Vec<f64>,
    pub plate_wh: Vec<f64>,
    /// 1 on positives whose vehicle carries a plate, else 0.
    pub plate_weight: Vec<f64>,
    /// Index of the vehicle each row is matched to.
    pub matched: Vec<Option<usize>>,
    pub n_pos: usize,
}

/// Second-stage counterpart of [`AlpdTargets`], over `(region, prior)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MolprTargets {
    pub labels: Vec<usize>,
    pub conf_mask: Vec<bool>,
    pub positive: Vec<bool>,
    pub loc: Vec<f64>,
    pub corners: Vec<f64>,
    pub n_pos: usize,
}

/// A plate inside one patch, in patch coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateGt {
    pub bbox: HBox,
    pub quad: Quad,
}

fn check_rows(shape: &[usize], units: usize, priors: usize, cols: usize) -> Result<(), LossError> {
    if shape != [units, priors, cols] {
        return Err(LossError::Shape {
            got: shape.to_vec(),
            expected: format!("[{units}, {priors}, {cols}]"),
        });
    }
    Ok(())
}

/// Background-class loss per prior, used to rank negatives.
fn background_losses(logits: &[f64], cols: usize) -> Vec<f64> {
    logits
        .chunks_exact(cols)
        .map(|row| {
            let (a, b) = (row[CONF], row[CONF + 1]);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln() - a
        })
        .collect()
}

fn values<T: Real>(tape: &Tape<T>, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|x| x.as_f64()).collect()
}

/// Matches every image's vehicles to the priors, encodes regression targets
/// and mines negatives from the current confidence predictions.
pub fn alpd_targets(
    predictions: &[f64],
    priors: &PriorSet,
    scenes: &[&[VehicleLabel]],
    config: MatchConfig,
) -> Result<AlpdTargets, LossError> {
    let p = priors.len();
    let rows = scenes.len() * p;
    if predictions.len() != rows * ALPD_COLUMNS {
        return Err(LossError::Shape {
            got: vec![predictions.len()],
            expected: format!("{rows} rows x {ALPD_COLUMNS}"),
        });
    }
    let bg = background_losses(predictions, ALPD_COLUMNS);
    let mut t = AlpdTargets {
        labels: vec![0; rows],
        conf_mask: vec![false; rows],
        positive: vec![false; rows],
        loc: vec![0.0; rows * 4],
        has_lp: vec![0.0; rows],
        off: vec![0.0; rows * 2],
        plate_wh: vec![0.0; rows * 2],
        plate_weight: vec![0.0; rows],
        matched: vec![None; rows],
        n_pos: 0,
    };
    for (b, vehicles) in scenes.iter().enumerate() {
        let boxes: Vec<HBox> = vehicles.iter().map(|v| v.bbox).collect();
        let m = match_priors(priors, &boxes, config.iou_threshold);
        let pos = m.positive();
        let neg = hard_negative_mine(&bg[b * p..(b + 1) * p], &pos, config.negative_ratio);
        for (i, d) in priors.boxes.iter().enumerate() {
            let r = b * p + i;
            t.conf_mask[r] = pos[i] || neg[i];
            let Some(g) = m.matched[i] else { continue };
            let v = &vehicles[g];
            t.matched[r] = Some(g);
            t.labels[r] = 1;
            t.positive[r] = true;
            t.n_pos += 1;
            t.loc[r * 4..r * 4 + 4].copy_from_slice(&encode_vehicle(&v.bbox, d)?.to_array());
            if let Some(plate) = v.plate_box().filter(|_| v.has_lp) {
                t.has_lp[r] = 1.0;
                t.plate_weight[r] = 1.0;
                let h = encode_plate_hint(&plate, &v.bbox, d)?.to_array();
                t.off[r * 2..r * 2 + 2].copy_from_slice(&h[..2]);
                t.plate_wh[r * 2..r * 2 + 2].copy_from_slice(&h[2..]);
            }
        }
    }
    Ok(t)
}

/// Matches each patch's plates (by their horizontal boxes) to the priors.
pub fn molpr_targets(
    predictions: &[f64],
    priors: &PriorSet,
    regions: &[Vec<PlateGt>],
    config: MatchConfig,
) -> Result<MolprTargets, LossError> {
    let p = priors.len();
    let rows = regions.len() * p;
    if predictions.len() != rows * MOLPR_COLUMNS {
        return Err(LossError::Shape {
            got: vec![predictions.len()],
            expected: format!("{rows} rows x {MOLPR_COLUMNS}"),
        });
    }
    let bg = background_losses(predictions, MOLPR_COLUMNS);
    let mut t = MolprTargets {
        labels: vec![0; rows],
        conf_mask: vec![false; rows],
        positive: vec![false; rows],
        loc: vec![0.0; rows * 4],
        corners: vec![0.0; rows * 8],
        n_pos: 0,
    };
    for (r_idx, plates) in regions.iter().enumerate() {
        let boxes: Vec<HBox> = plates.iter().map(|g| g.bbox).collect();
        let m = match_priors(priors, &boxes, config.iou_threshold);
        let pos = m.positive();
        let neg = hard_negative_mine(&bg[r_idx * p..(r_idx + 1) * p], &pos, config.negative_ratio);
        for (i, d) in priors.boxes.iter().enumerate() {
            let r = r_idx * p + i;
            t.conf_mask[r] = pos[i] || neg[i];
            let Some(g) = m.matched[i] else { continue };
            t.labels[r] = 1;
            t.positive[r] = true;
            t.n_pos += 1;
            t.loc[r * 4..r * 4 + 4].copy_from_slice(&encode_vehicle(&plates[g].bbox, d)?.to_array());
            t.corners[r * 8..r * 8 + 8].copy_from_slice(&encode_corners(&plates[g].quad, d)?.0);
        }
    }
    Ok(t)
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

fn weights<T: Real>(mask: &[bool]) -> Vec<T> {
    mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
}

fn confidence<T: Real>(tape: &mut Tape<T>, pred: Var, labels: &[usize], mask: &[bool]) -> Result<Var, LossError> {
    let logits = tape.slice_last(pred, CONF, 2)?;
    tape.softmax_ce(logits, labels, mask).map_err(|e| match e {
        TensorError::EmptySelection { .. } => LossError::NothingSelected,
        other => other.into(),
    })
}

fn regression<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    start: usize,
    len: usize,
    targets: &[f64],
    row_weights: &[T],
) -> Result<Var, LossError> {
    let cols = tape.slice_last(pred, start, len)?;
    Ok(tape.smooth_l1(cols, &cast::<T>(targets), row_weights)?)
}

fn normalized_sum<T: Real>(tape: &mut Tape<T>, terms: &[Var], n_pos: usize) -> Result<Var, LossError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, T::of(1.0 / n_pos.max(1) as f64))?)
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

/// The five first-stage terms before normalization.
#[derive(Debug, Clone, Copy)]
pub struct AlpdTerms {
    pub conf: Var,
    pub loc: Var,
    pub has_lp: Var,
    pub off: Var,
    pub lp_wh: Var,
}

/// Records each first-stage term (raw sums) for predictions `(B, P, 11)`.
pub fn alpd_terms<T: Real>(tape: &mut Tape<T>, predictions: Var, targets: &AlpdTargets) -> Result<AlpdTerms, LossError> {
    let rows = targets.labels.len();
    let shape = tape.shape(predictions).to_vec();
    if shape.len() != 3 || shape[0] * shape[1] != rows || shape[2] != ALPD_COLUMNS {
        return Err(LossError::Shape { got: shape, expected: format!("{rows} rows x {ALPD_COLUMNS}") });
    }
    let pos_w = weights::<T>(&targets.positive);
    let plate_w = cast::<T>(&targets.plate_weight);
    let conf = confidence(tape, predictions, &targets.labels, &targets.conf_mask)?;
    let loc = regression(tape, predictions, LOC, 4, &targets.loc, &pos_w)?;
    let has_lp_logits = tape.slice_last(predictions, HAS_LP, 1)?;
    let has_lp = tape.bce_logits(has_lp_logits, &cast::<T>(&targets.has_lp), &targets.positive)?;
    let off = regression(tape, predictions, OFF, 2, &targets.off, &plate_w)?;
    let lp_wh = regression(tape, predictions, PLATE_WH, 2, &targets.plate_wh, &plate_w)?;
    Ok(AlpdTerms { conf, loc, has_lp, off, lp_wh })
}

/// Records the first-stage loss for predictions `(B, P, 11)`.
pub fn alpd_loss_with_targets<T: Real>(
    tape: &mut Tape<T>,
    predictions: Var,
    targets: &AlpdTargets,
) -> Result<(Var, AlpdLossBreakdown), LossError> {
    let t = alpd_terms(tape, predictions, targets)?;
    let total = normalized_sum(tape, &[t.conf, t.loc, t.has_lp, t.off, t.lp_wh], targets.n_pos)?;
    let breakdown = AlpdLossBreakdown {
        conf: scalar(tape, t.conf),
        loc: scalar(tape, t.loc),
        has_lp: scalar(tape, t.has_lp),
        off: scalar(tape, t.off),
        lp_wh: scalar(tape, t.lp_wh),
        n_pos: targets.n_pos,
    };
    Ok((total, breakdown))
}

/// Matches, mines and records the first-stage loss in one go.
pub fn alpd_loss<T: Real>(
    tape: &mut Tape<T>,
    predictions: Var,
    priors: &PriorSet,
    scenes: &[&[VehicleLabel]],
    config: MatchConfig,
) -> Result<(Var, AlpdLossBreakdown), LossError> {
    check_rows(tape.shape(predictions), scenes.len(), priors.len(), ALPD_COLUMNS)?;
    let targets = alpd_targets(&values(tape, predictions), priors, scenes, config)?;
    alpd_loss_with_targets(tape, predictions, &targets)
}

/// The three second-stage terms before normalization.
#[derive(Debug, Clone, Copy)]
pub struct MolprTerms {
    pub conf: Var,
    pub loc: Var,
    pub corner: Var,
}

/// Records each second-stage term (raw sums) for predictions `(R, P', 14)`.
pub fn molpr_terms<T: Real>(tape: &mut Tape<T>, predictions: Var, targets: &MolprTargets) -> Result<MolprTerms, LossError> {
    let rows = targets.labels.len();
    let shape = tape.shape(predictions).to_vec();
    if shape.len() != 3 || shape[0] * shape[1] != rows || shape[2] != MOLPR_COLUMNS {
        return Err(LossError::Shape { got: shape, expected: format!("{rows} rows x {MOLPR_COLUMNS}") });
    }
    let pos_w = weights::<T>(&targets.positive);
    let conf = confidence(tape, predictions, &targets.labels, &targets.conf_mask)?;
    let loc = regression(tape, predictions, LOC, 4, &targets.loc, &pos_w)?;
    let corner = regression(tape, predictions, CORNERS, 8, &targets.corners, &pos_w)?;
    Ok(MolprTerms { conf, loc, corner })
}

/// Records the second-stage loss for predictions `(R, P', 14)`.
pub fn molpr_loss_with_targets<T: Real>(
    tape: &mut Tape<T>,
    predictions: Var,
    targets: &MolprTargets,
) -> Result<(Var, MolprLossBreakdown), LossError> {
    let t = molpr_terms(tape, predictions, targets)?;
    let total = normalized_sum(tape, &[t.conf, t.loc, t.corner], targets.n_pos)?;
    let breakdown = MolprLossBreakdown {
        conf: scalar(tape, t.conf),
        loc: scalar(tape, t.loc),
        corner: scalar(tape, t.corner),
        n_pos: targets.n_pos,
    };
    Ok((total, breakdown))
}

/// Second-stage loss; `None` when there are no regions (an empty batch).
pub fn molpr_loss<T: Real>(
    tape: &mut Tape<T>,
    predictions: Option<Var>,
    priors: &PriorSet,
    regions: &[Vec<PlateGt>],
    config: MatchConfig,
) -> Result<Option<(Var, MolprLossBreakdown)>, LossError> {
    let Some(predictions) = predictions.filter(|_| !regions.is_empty()) else {
        return Ok(None);
    };
    check_rows(tape.shape(predictions), regions.len(), priors.len(), MOLPR_COLUMNS)?;
    let targets = molpr_targets(&values(tape, predictions), priors, regions, config)?;
    molpr_loss_with_targets(tape, predictions, &targets).map(Some)
}

/// Records `L1 + alpha * L2` on the tape.
pub fn combine<T: Real>(tape: &mut Tape<T>, l1: Var, l2: Option<Var>, alpha: f64) -> Result<Var, LossError> {
    match l2 {
        None => Ok(l1),
        Some(l2) => {
            let weighted = tape.scale(l2, T::of(alpha))?;
            Ok(tape.add(l1, weighted)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals() {
        let l1 = AlpdLossBreakdown { conf: 2.0, n_pos: 1, ..Default::default() };
        let l2 = MolprLossBreakdown { conf: 3.0, n_pos: 1, ..Default::default() };
        assert_eq!(total_loss(&l1, Some(&l2), 1.0), 5.0);
        assert_eq!(total_loss(&l1, Some(&l2), 2.0), 8.0);
        assert_eq!(total_loss(&l1, None, 1.0), 2.0);
    }

    #[test]
    fn scalar_smooth_l1() {
        assert_eq!(smooth_l1(0.0_f64), 0.0);
        assert_eq!(smooth_l1(0.5_f64), 0.125);
        assert_eq!(smooth_l1(2.0_f64), 1.5);
    }
}
