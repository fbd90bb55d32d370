//! End-to-end training and staged inference.

use lpdet_autodiff::{sigmoid, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_corners, decode_plate_hint, decode_vehicle, CornerTarget, PlateHintTarget, VehicleTarget};
use crate::geometry::{iou_hbox, HBox, Point, Quad};
use crate::label::SceneLabel;
use crate::losses::{
    alpd_loss_with_targets, alpd_targets, combine, molpr_loss, AlpdLossBreakdown, LossError, MatchConfig,
    MolprLossBreakdown, ALPD_COLUMNS, MOLPR_COLUMNS,
};
use crate::lrea::{aggregate, expand_region, plates_in_region, region_from_prediction, LocalRegion, LreaError};
use crate::model::{forward_alpd, forward_molpr, normalize_image, Model, ModelError};
use crate::optim::{Adam, AdamConfig};
use crate::synth::{augment, RgbImage};

/// Detection record format version.
pub const DETECTION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Region(#[from] LreaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("iteration {iteration}: non-finite loss (first stage {l1:?}, second stage {l2:?})")]
    NonFiniteLoss {
        iteration: usize,
        l1: AlpdLossBreakdown,
        l2: Option<MolprLossBreakdown>,
    },
    #[error("empty batch")]
    EmptyBatch,
}

/// Which stages are trained and used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Both stages; plates come from the refinement stage.
    EndToEnd,
    /// First stage only; plates are the coarse hints.
    AlpdOnly,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "e2e" | "end-to-end" => Ok(Mode::EndToEnd),
            "alpd" | "alpd-only" => Ok(Mode::AlpdOnly),
            other => Err(format!("unknown mode {other:?} (expected e2e or alpd)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::EndToEnd => "e2e",
            Mode::AlpdOnly => "alpd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub alpha: f64,
    pub matching: MatchConfig,
    pub expansion_ratio: f64,
    /// Fraction of iterations whose regions come from ground-truth plates.
    pub teacher_forcing: f64,
    /// Relative jitter applied to ground-truth plates while teacher forcing.
    pub teacher_jitter: f64,
    pub has_lp_threshold: f64,
    /// Let region corners pass gradients back into the first-stage heads.
    pub region_coord_grad: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EndToEnd,
            batch_size: 4,
            iterations: 1500,
            adam: AdamConfig { lr: 1e-3, milestones: vec![1000, 1300], ..Default::default() },
            alpha: 1.0,
            matching: MatchConfig::default(),
            expansion_ratio: 3.0,
            teacher_forcing: 0.25,
            teacher_jitter: 0.1,
            has_lp_threshold: 0.5,
            region_coord_grad: false,
            augment: true,
            seed: 0,
        }
    }
}

/// Losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub l1: AlpdLossBreakdown,
    /// Absent when no local region was formed.
    pub l2: Option<MolprLossBreakdown>,
    pub total: f64,
    pub regions: usize,
    pub teacher_forced: bool,
}

impl StepReport {
    pub fn l2_total(&self) -> f64 {
        self.l2.map_or(0.0, |l| l.total())
    }
}

fn image_batch(images: &[&RgbImage], size: usize) -> Result<Tensor<f32>, TensorError> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        data.extend(normalize_image(&img.pixels, size));
    }
    Tensor::new(vec![images.len(), 3, size, size], data)
}

fn object_prob(row: &[f64]) -> f64 {
    // softmax over [background, object]
    sigmoid(row[1] - row[0])
}

/// Single-writer trainer owning the weights and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let adam = Adam::new(config.adam.clone(), &model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self { model, config, adam, rng, order: Vec::new(), cursor: 0, iteration: 0 }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn teacher_forced(&self) -> bool {
        (self.iteration as f64) < self.config.teacher_forcing * self.config.iterations as f64
    }

    /// Draws the next batch from a shuffled pass over `count` scenes.
    pub fn next_batch(&mut self, count: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(count) {
            if self.cursor >= self.order.len() {
                self.order = (0..count).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Runs one iteration on a batch drawn from `images`/`labels`, with
    /// augmentation if enabled.
    pub fn train_on(&mut self, images: &[RgbImage], labels: &[SceneLabel]) -> Result<StepReport, PipelineError> {
        let idx = self.next_batch(images.len());
        let (imgs, labs): (Vec<RgbImage>, Vec<SceneLabel>) = if self.config.augment {
            idx.iter().map(|&i| augment(&images[i], &labels[i], &mut self.rng)).unzip()
        } else {
            idx.iter().map(|&i| (images[i].clone(), labels[i].clone())).unzip()
        };
        let img_refs: Vec<&RgbImage> = imgs.iter().collect();
        let lab_refs: Vec<&SceneLabel> = labs.iter().collect();
        self.step(&img_refs, &lab_refs)
    }

    fn teacher_regions(&mut self, labels: &[&SceneLabel]) -> Vec<LocalRegion> {
        let j = self.config.teacher_jitter;
        let mut out = Vec::new();
        for (b, label) in labels.iter().enumerate() {
            for (k, v) in label.vehicles.iter().enumerate() {
                let Some(plate) = v.plate_box() else { continue };
                let mut u = || if j > 0.0 { self.rng.gen_range(-j..=j) } else { 0.0 };
                let hint = HBox::new(plate.cx + u() * plate.w, plate.cy + u() * plate.h, plate.w * u().exp(), plate.h * u().exp());
                if let Ok(region) = expand_region(&hint, &v.bbox, self.config.expansion_ratio) {
                    out.push(LocalRegion { region, image: b, vehicle: k, hint, source: None });
                }
            }
        }
        out
    }

    /// For each ground-truth vehicle, the matched prior the model is most
    /// confident about; a region is formed if its has-plate probability
    /// passes the gate.
    fn predicted_regions(&self, labels: &[&SceneLabel], pred: &[f64], matched: &[Option<usize>]) -> Vec<LocalRegion> {
        let priors = &self.model.alpd_priors;
        let p = priors.len();
        let mut out = Vec::new();
        for (b, label) in labels.iter().enumerate() {
            for k in 0..label.vehicles.len() {
                let best = (0..p)
                    .filter(|&i| matched[b * p + i] == Some(k))
                    .map(|i| (i, object_prob(&pred[(b * p + i) * ALPD_COLUMNS..])))
                    .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                        Some((_, bs)) if bs >= s => acc,
                        _ => Some((i, s)),
                    });
                let Some((i, _)) = best else { continue };
                let row_index = b * p + i;
                let row = &pred[row_index * ALPD_COLUMNS..(row_index + 1) * ALPD_COLUMNS];
                if sigmoid(row[6]) < self.config.has_lp_threshold {
                    continue;
                }
                let d = &priors.boxes[i];
                let Some(vehicle) = decode_vehicle(&VehicleTarget::from_slice(&row[2..6]), d).clip_unit() else {
                    continue;
                };
                if let Ok((region, hint, source)) =
                    region_from_prediction(row, row_index, d, &vehicle, self.config.expansion_ratio)
                {
                    out.push(LocalRegion { region, image: b, vehicle: k, hint, source: Some(source) });
                }
            }
        }
        out
    }

    /// One optimization step on a prepared batch.
    pub fn step(&mut self, images: &[&RgbImage], labels: &[&SceneLabel]) -> Result<StepReport, PipelineError> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(PipelineError::EmptyBatch);
        }
        let size = self.model.config.input_size;
        let mut tape = Tape::<f32>::new();
        let bound = self.model.bind(&mut tape, true);
        let x = tape.constant(image_batch(images, size)?);
        let fwd = forward_alpd(&mut tape, &self.model, &bound, x)?;
        let pred: Vec<f64> = tape.value(fwd.predictions).data().iter().map(|&v| v as f64).collect();
        let scenes: Vec<&[_]> = labels.iter().map(|l| l.vehicles.as_slice()).collect();
        let targets = alpd_targets(&pred, &self.model.alpd_priors, &scenes, self.config.matching)?;
        let (l1, b1) = alpd_loss_with_targets(&mut tape, fwd.predictions, &targets)?;

        let teacher_forced = self.teacher_forced();
        let mut regions_used = 0;
        let mut second = None;
        if self.config.mode == Mode::EndToEnd {
            let regions = if teacher_forced {
                self.teacher_regions(labels)
            } else {
                self.predicted_regions(labels, &pred, &targets.matched)
            };
            let coord_source = self.config.region_coord_grad.then_some(fwd.predictions);
            let batch = aggregate(&mut tape, fwd.features, regions, self.model.config.patch_size, coord_source)?;
            regions_used = batch.len();
            let gts: Vec<_> = batch
                .regions
                .iter()
                .map(|r| plates_in_region(&r.region, &labels[r.image].vehicles))
                .collect();
            let out = forward_molpr(&mut tape, &self.model, &bound, batch.patches)?;
            second = molpr_loss(&mut tape, out, &self.model.molpr_priors, &gts, self.config.matching)?;
        }
        let (l2, b2) = match second {
            Some((v, b)) => (Some(v), Some(b)),
            None => (None, None),
        };
        let total = combine(&mut tape, l1, l2, self.config.alpha)?;
        let total_value = tape.value(total).data()[0] as f64;
        if !total_value.is_finite() {
            return Err(PipelineError::NonFiniteLoss { iteration: self.iteration, l1: b1, l2: b2 });
        }
        tape.backward(total)?;
        let grads: Vec<Option<Vec<f64>>> = bound
            .vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.iter().map(|&x| x as f64).collect()))
            .collect();
        let lr = self.config.adam.lr_at(self.iteration);
        self.adam.step(&mut self.model.params, &grads);
        let report = StepReport {
            iteration: self.iteration,
            lr,
            l1: b1,
            l2: b2,
            total: total_value,
            regions: regions_used,
            teacher_forced: teacher_forced && self.config.mode == Mode::EndToEnd,
        };
        self.iteration += 1;
        Ok(report)
    }
}

/// Greedy suppression: keeps boxes in descending score order (ties: lower
/// index first), dropping any whose IOU with a kept box exceeds `threshold`.
pub fn nms(boxes: &[HBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_hbox(&boxes[k], &boxes[i]).unwrap_or(0.0) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateDetection {
    #[serde(rename = "box")]
    pub bbox: HBox,
    pub conf: f64,
    pub quad: Quad,
    pub stage: Stage,
}

/// One detected vehicle with (at most) one plate. A vehicle whose plate
/// stage yields several plates appears once per plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub vehicle: HBox,
    pub vehicle_conf: f64,
    pub has_lp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<PlateDetection>,
}

/// Line-delimited output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub version: u32,
    pub image_id: String,
    #[serde(flatten)]
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub mode: Mode,
    pub vehicle_threshold: f64,
    pub plate_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub max_vehicles: usize,
    pub max_plates_per_region: usize,
    /// `None` disables the has-plate gate.
    pub has_lp_threshold: Option<f64>,
    pub expansion_ratio: f64,
    /// Images per forward pass.
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EndToEnd,
            vehicle_threshold: 0.05,
            plate_threshold: 0.01,
            nms_iou: 0.45,
            top_k: 200,
            max_vehicles: 20,
            max_plates_per_region: 3,
            has_lp_threshold: Some(0.5),
            expansion_ratio: 3.0,
            batch_size: 8,
        }
    }
}

/// Inference result for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    /// Local regions formed for the refinement stage.
    pub regions: Vec<HBox>,
    /// Hints dropped because they fell outside their vehicle.
    pub dropped_regions: usize,
}

struct VehicleCandidate {
    image: usize,
    vehicle: HBox,
    conf: f64,
    has_lp: f64,
    hint: HBox,
}

/// Runs the staged detector on `images`; weights are only read.
pub fn infer(model: &Model, images: &[&RgbImage], config: &InferConfig) -> Result<Vec<ImageResult>, PipelineError> {
    let mut results = Vec::with_capacity(images.len());
    for chunk in images.chunks(config.batch_size.max(1)) {
        results.extend(infer_batch(model, chunk, config)?);
    }
    Ok(results)
}

fn infer_batch(model: &Model, images: &[&RgbImage], config: &InferConfig) -> Result<Vec<ImageResult>, PipelineError> {
    let size = model.config.input_size;
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(image_batch(images, size)?);
    let fwd = forward_alpd(&mut tape, model, &bound, x)?;
    let pred: Vec<f64> = tape.value(fwd.predictions).data().iter().map(|&v| v as f64).collect();
    let priors = &model.alpd_priors;
    let p = priors.len();

    let mut results = vec![ImageResult::default(); images.len()];
    let mut candidates = Vec::new();
    for b in 0..images.len() {
        let rows = |i: usize| &pred[(b * p + i) * ALPD_COLUMNS..(b * p + i + 1) * ALPD_COLUMNS];
        let mut scored: Vec<(usize, f64)> = (0..p)
            .map(|i| (i, object_prob(rows(i))))
            .filter(|&(_, s)| s >= config.vehicle_threshold)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(config.top_k);
        let mut boxes = Vec::new();
        let mut kept_rows = Vec::new();
        for &(i, s) in &scored {
            let row = rows(i);
            let raw = decode_vehicle(&VehicleTarget::from_slice(&row[2..6]), &priors.boxes[i]);
            if let Some(clipped) = raw.clip_unit() {
                boxes.push(clipped);
                kept_rows.push((i, s, raw));
            }
        }
        let scores: Vec<f64> = kept_rows.iter().map(|r| r.1).collect();
        for k in nms(&boxes, &scores, config.nms_iou).into_iter().take(config.max_vehicles) {
            let (i, conf, raw) = kept_rows[k];
            let row = rows(i);
            let hint = decode_plate_hint(&PlateHintTarget::from_slice(&row[7..11]), &priors.boxes[i], Point::new(raw.cx, raw.cy));
            candidates.push(VehicleCandidate { image: b, vehicle: boxes[k], conf, has_lp: sigmoid(row[6]), hint });
        }
    }

    let mut regions = Vec::new();
    let mut region_owner = Vec::new();
    for (c_idx, c) in candidates.iter().enumerate() {
        let gated = config.has_lp_threshold.is_some_and(|t| c.has_lp < t);
        let base = Detection { vehicle: c.vehicle, vehicle_conf: c.conf, has_lp: c.has_lp, plate: None };
        if gated {
            results[c.image].detections.push(base);
            continue;
        }
        match config.mode {
            Mode::AlpdOnly => {
                if let Ok(region) = expand_region(&c.hint, &c.vehicle, config.expansion_ratio) {
                    results[c.image].regions.push(region);
                }
                let plate = c.hint.clip_unit().map(|bbox| PlateDetection {
                    bbox,
                    conf: c.conf * c.has_lp,
                    quad: bbox.to_quad(),
                    stage: Stage::Coarse,
                });
                results[c.image].detections.push(Detection { plate, ..base });
            }
            Mode::EndToEnd => match expand_region(&c.hint, &c.vehicle, config.expansion_ratio) {
                Ok(region) => {
                    results[c.image].regions.push(region);
                    regions.push(LocalRegion { region, image: c.image, vehicle: c_idx, hint: c.hint, source: None });
                    region_owner.push(c_idx);
                }
                Err(_) => {
                    results[c.image].dropped_regions += 1;
                    results[c.image].detections.push(base);
                }
            },
        }
    }
    if config.mode == Mode::AlpdOnly || regions.is_empty() {
        return Ok(results);
    }

    let batch = aggregate(&mut tape, fwd.features, regions, model.config.patch_size, None)?;
    let out = forward_molpr(&mut tape, model, &bound, batch.patches)?.expect("non-empty patch batch");
    let out: Vec<f64> = tape.value(out).data().iter().map(|&v| v as f64).collect();
    let mp = &model.molpr_priors;
    for (r, (region, transform)) in batch.regions.iter().zip(&batch.transforms).enumerate() {
        let c = &candidates[region.vehicle];
        let mut boxes = Vec::new();
        let mut plates = Vec::new();
        for (i, d) in mp.boxes.iter().enumerate() {
            let row = &out[(r * mp.len() + i) * MOLPR_COLUMNS..(r * mp.len() + i + 1) * MOLPR_COLUMNS];
            let conf = object_prob(row);
            if conf < config.plate_threshold {
                continue;
            }
            let patch_box = decode_vehicle(&VehicleTarget::from_slice(&row[2..6]), d);
            let mut corners = [0.0; 8];
            corners.copy_from_slice(&row[6..14]);
            let quad = transform.quad_to_image(&decode_corners(&CornerTarget(corners), d));
            let Some(bbox) = transform.box_to_image(&patch_box).clip_unit() else { continue };
            boxes.push(bbox);
            plates.push(PlateDetection { bbox, conf, quad, stage: Stage::Refined });
        }
        let scores: Vec<f64> = plates.iter().map(|p| p.conf).collect();
        let kept = nms(&boxes, &scores, config.nms_iou);
        let image = &mut results[c.image];
        let base = Detection { vehicle: c.vehicle, vehicle_conf: c.conf, has_lp: c.has_lp, plate: None };
        if kept.is_empty() {
            image.detections.push(base);
        }
        for k in kept.into_iter().take(config.max_plates_per_region) {
            image.detections.push(Detection { plate: Some(plates[k]), ..base });
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_examples() {
        let a = HBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(nms(&[a, a], &[0.5, 0.9], 0.45), vec![1]);
        assert_eq!(nms(&[a, a], &[0.7, 0.7], 0.45), vec![0]);
        let c = HBox::new(0.1, 0.1, 0.1, 0.1);
        assert_eq!(nms(&[a, c], &[0.2, 0.9], 0.45), vec![1, 0]);
    }
}
