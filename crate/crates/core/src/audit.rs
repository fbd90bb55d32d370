//! Finite-difference audit of every differentiable op and loss term, run at
//! 64-bit over many random seeds. Backs the `gradcheck` command.

use lpdet_autodiff::gradcheck::{check_gradients, GradcheckConfig, GradcheckReport};
use lpdet_autodiff::{Tape, Tensor, TensorError, Var, WarpRegion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::HBox;
use crate::label::VehicleLabel;
use crate::losses::{
    alpd_loss_with_targets, alpd_targets, alpd_terms, combine, molpr_loss_with_targets, molpr_targets, molpr_terms,
    LossError, MatchConfig, PlateGt, ALPD_COLUMNS, MOLPR_COLUMNS,
};
use crate::lrea::{aggregate, expand_region, plates_in_region, region_from_prediction, LocalRegion};
use crate::model::{forward_alpd, forward_molpr, Bound, Model, ModelConfig};
use crate::priors::{generate_priors, LayerSpec, PriorSet};

/// Relative error every check must stay under.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// What an audit entry covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    /// One differentiable operation.
    Op,
    /// One loss term, or the combined loss.
    LossTerm,
    /// The whole network end to end (on fewer seeds; it is the slowest).
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub name: String,
    pub kind: AuditKind,
    pub seeds: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

/// `sum(r * y)` for a random projection `r` fixed by `seed`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let n = tape.value(y).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let r = tape.constant(random(&mut rng, &[1, n], 1.0));
    let zero = tape.constant(Tensor::zeros(vec![1]));
    let flat = tape.reshape(y, &[1, n])?;
    let out = tape.linear(flat, r, zero)?;
    tape.reshape(out, &[1])
}

fn loss_to_tensor(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        LossError::NothingSelected => TensorError::EmptySelection { op: "loss" },
        other => TensorError::ShapeMismatch { op: "loss", detail: other.to_string() },
    }
}

struct Audit {
    seeds: u64,
    entries: Vec<AuditEntry>,
}

impl Audit {
    fn record(&mut self, name: &str, kind: AuditKind, seeds: u64, report: &GradcheckReport) {
        self.entries.push(AuditEntry {
            name: name.to_string(),
            kind,
            seeds,
            checked: report.checked,
            max_rel_error: report.max_rel_error,
            tolerance: AUDIT_TOLERANCE,
        });
    }

    /// Checks `build` on inputs from `make`, once per seed.
    fn op(
        &mut self,
        name: &str,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var, TensorError>,
    ) -> Result<(), AuditError> {
        let mut total = GradcheckReport::default();
        for seed in 0..self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let report = check_gradients(&inputs, &GradcheckConfig::default(), |tape, vars| build(tape, vars, seed))?;
            total.merge(&report);
        }
        self.record(name, AuditKind::Op, self.seeds, &total);
        Ok(())
    }
}

fn audit_priors(ratios: [f64; 2]) -> PriorSet {
    generate_priors(&[
        LayerSpec { grid: 4, scale: 0.3, ratios: ratios.to_vec() },
        LayerSpec { grid: 2, scale: 0.6, ratios: ratios.to_vec() },
    ])
    .expect("valid audit priors")
}

fn audit_scene(rng: &mut ChaCha8Rng) -> Vec<VehicleLabel> {
    (0..2)
        .map(|i| {
            let bbox = HBox::new(0.3 + 0.4 * i as f64, rng.gen_range(0.3..0.7), rng.gen_range(0.25..0.4), rng.gen_range(0.2..0.3));
            let has_lp = i == 0 || rng.gen_bool(0.5);
            let plate = HBox::new(bbox.cx + rng.gen_range(-0.03..0.03), bbox.cy + 0.05, bbox.w * 0.4, bbox.w * 0.15);
            VehicleLabel { bbox, has_lp, quad: has_lp.then(|| plate.to_quad()) }
        })
        .collect()
}

fn audit_plates(rng: &mut ChaCha8Rng) -> Vec<PlateGt> {
    let bbox = HBox::new(rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6), rng.gen_range(0.3..0.5), rng.gen_range(0.12..0.2));
    let mut quad = bbox.to_quad();
    for p in &mut quad.pts {
        p.x += rng.gen_range(-0.01..0.01);
        p.y += rng.gen_range(-0.01..0.01);
    }
    vec![PlateGt { bbox: crate::geometry::quad_aabb(&quad), quad }]
}

fn alpd_case(seed: u64) -> Result<(Tensor<f64>, crate::losses::AlpdTargets), AuditError> {
    let priors = audit_priors([1.0, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = audit_scene(&mut rng);
    let pred = random(&mut rng, &[1, priors.len(), ALPD_COLUMNS], 1.0);
    let targets = alpd_targets(pred.data(), &priors, &[&scene], MatchConfig::default())?;
    Ok((pred, targets))
}

fn molpr_case(seed: u64) -> Result<(Tensor<f64>, crate::losses::MolprTargets), AuditError> {
    let priors = audit_priors([2.0, 3.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let regions = vec![audit_plates(&mut rng), audit_plates(&mut rng)];
    let pred = random(&mut rng, &[2, priors.len(), MOLPR_COLUMNS], 1.0);
    let targets = molpr_targets(pred.data(), &priors, &regions, MatchConfig::default())?;
    Ok((pred, targets))
}

/// Every op of the engine, every loss term, the region-coordinate path and
/// the whole Tiny network, each over `seeds` random seeds (the network over
/// a fifth of them, at least one).
pub fn gradient_audit(seeds: u64) -> Result<Vec<AuditEntry>, AuditError> {
    let mut a = Audit { seeds, entries: Vec::new() };
    for (stride, pad) in [(1, 1), (2, 1)] {
        a.op(
            &format!("conv2d stride {stride}"),
            |rng| vec![random(rng, &[2, 3, 7, 7], 1.0), random(rng, &[4, 3, 3, 3], 0.5), random(rng, &[4], 0.5)],
            |tape, v, seed| {
                let y = tape.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(tape, y, seed)
            },
        )?;
    }
    a.op(
        "maxpool2d",
        |rng| {
            // distinct values far apart relative to the step
            let mut vals: Vec<f64> = (0..2 * 3 * 6 * 6).map(|i| i as f64 * 0.01).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            vec![Tensor::new(vec![2, 3, 6, 6], vals).expect("shape matches data")]
        },
        |tape, v, seed| {
            let y = tape.maxpool2d(v[0], 2, 2)?;
            project(tape, y, seed)
        },
    )?;
    a.op(
        "relu",
        |rng| {
            let mut t = random(rng, &[5, 7], 1.0);
            t.data_mut().iter_mut().for_each(|v| *v += 0.01f64.copysign(*v));
            vec![t]
        },
        |tape, v, seed| {
            let y = tape.relu(v[0])?;
            project(tape, y, seed)
        },
    )?;
    a.op(
        "linear",
        |rng| vec![random(rng, &[4, 6], 1.0), random(rng, &[3, 6], 1.0), random(rng, &[3], 1.0)],
        |tape, v, seed| {
            let y = tape.linear(v[0], v[1], v[2])?;
            project(tape, y, seed)
        },
    )?;
    a.op(
        "add/scale/sum",
        |rng| vec![random(rng, &[3, 4], 1.0), random(rng, &[3, 4], 1.0)],
        |tape, v, _| {
            let s = tape.scale(v[1], -2.5)?;
            let y = tape.add(v[0], s)?;
            let y = tape.relu(y)?;
            tape.sum(y)
        },
    )?;
    a.op(
        "l2norm",
        |rng| vec![random(rng, &[2, 5, 3, 3], 1.0), random(rng, &[5], 20.0)],
        |tape, v, seed| {
            let y = tape.l2norm(v[0], v[1])?;
            project(tape, y, seed)
        },
    )?;
    a.op(
        "flatten_head/concat/slice/reshape",
        |rng| vec![random(rng, &[2, 6, 2, 3], 1.0), random(rng, &[2, 4, 1, 2], 1.0)],
        |tape, v, seed| {
            let x = tape.flatten_head(v[0], 2)?;
            let y = tape.flatten_head(v[1], 4)?;
            let y = tape.concat_rows(&[y, y])?;
            let y = tape.slice_last(y, 0, 1)?;
            let y = tape.reshape(y, &[2, 8, 2])?;
            let x = tape.slice_last(x, 1, 2)?;
            let c = tape.concat_rows(&[x, y])?;
            project(tape, c, seed)
        },
    )?;
    a.op(
        "roi_warp (features)",
        |rng| vec![random(rng, &[2, 3, 10, 12], 1.0)],
        |tape, v, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let regions: Vec<WarpRegion> = (0..3)
                .map(|i| {
                    let (x0, y0) = (rng.gen_range(-0.1..0.5), rng.gen_range(-0.1..0.5));
                    WarpRegion { batch: i % 2, x0, y0, x1: x0 + rng.gen_range(0.1..0.6), y1: y0 + rng.gen_range(0.1..0.6) }
                })
                .collect();
            let y = tape.roi_warp(v[0], &regions, 5)?;
            project(tape, y, seed)
        },
    )?;
    a.op(
        "roi_warp (coordinates)",
        |rng| {
            let (x0, y0) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
            let coords = vec![x0, y0, x0 + rng.gen_range(0.2..0.5), y0 + rng.gen_range(0.2..0.5)];
            vec![random(rng, &[1, 2, 9, 11], 1.0), Tensor::new(vec![1, 4], coords).expect("shape matches data")]
        },
        |tape, v, seed| {
            let y = tape.roi_warp_with_coords(v[0], &[0], v[1], 4)?;
            project(tape, y, seed)
        },
    )?;
    a.op(
        "softmax_ce",
        |rng| vec![random(rng, &[6, 2], 3.0)],
        |tape, v, seed| {
            let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 2).collect();
            tape.softmax_ce(v[0], &labels, &[true, false, true, true, false, true])
        },
    )?;
    a.op(
        "bce_logits",
        |rng| vec![random(rng, &[8], 6.0)],
        |tape, v, seed| {
            let targets: Vec<f64> = (0..8).map(|i| ((i + seed) % 2) as f64).collect();
            let mask: Vec<bool> = (0..8).map(|i| i % 3 != 0).collect();
            tape.bce_logits(v[0], &targets, &mask)
        },
    )?;
    a.op(
        "smooth_l1",
        |rng| vec![random(rng, &[5, 4], 3.0)],
        |tape, v, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let targets: Vec<f64> = (0..20).map(|_| rng.gen_range(-3.0..3.0)).collect();
            tape.smooth_l1(v[0], &targets, &[1.0, 0.0, 2.0, 0.5, 1.0])
        },
    )?;

    // loss terms, each normalized by the positive count as in training
    type AlpdPick = fn(&crate::losses::AlpdTerms) -> Var;
    let alpd_picks: [(&str, AlpdPick); 5] = [
        ("first-stage loss: vehicle confidence", |t| t.conf),
        ("first-stage loss: vehicle box", |t| t.loc),
        ("first-stage loss: has-plate", |t| t.has_lp),
        ("first-stage loss: plate offset", |t| t.off),
        ("first-stage loss: plate size", |t| t.lp_wh),
    ];
    let cases: Vec<_> = (0..seeds).map(alpd_case).collect::<Result<_, _>>()?;
    for (name, pick) in alpd_picks {
        let mut total = GradcheckReport::default();
        for (pred, targets) in &cases {
            let report = check_gradients(std::slice::from_ref(pred), &GradcheckConfig::default(), |tape, v| {
                let terms = alpd_terms(tape, v[0], targets).map_err(loss_to_tensor)?;
                tape.scale(pick(&terms), 1.0 / targets.n_pos.max(1) as f64)
            })?;
            total.merge(&report);
        }
        a.record(name, AuditKind::LossTerm, seeds, &total);
    }
    type MolprPick = fn(&crate::losses::MolprTerms) -> Var;
    let molpr_picks: [(&str, MolprPick); 3] = [
        ("second-stage loss: plate confidence", |t| t.conf),
        ("second-stage loss: plate box", |t| t.loc),
        ("second-stage loss: corners", |t| t.corner),
    ];
    let cases: Vec<_> = (0..seeds).map(molpr_case).collect::<Result<_, _>>()?;
    for (name, pick) in molpr_picks {
        let mut total = GradcheckReport::default();
        for (pred, targets) in &cases {
            let report = check_gradients(std::slice::from_ref(pred), &GradcheckConfig::default(), |tape, v| {
                let terms = molpr_terms(tape, v[0], targets).map_err(loss_to_tensor)?;
                tape.scale(pick(&terms), 1.0 / targets.n_pos.max(1) as f64)
            })?;
            total.merge(&report);
        }
        a.record(name, AuditKind::LossTerm, seeds, &total);
    }

    // total loss L1 + alpha * L2 on the raw predictions of both stages
    let mut total = GradcheckReport::default();
    for seed in 0..seeds {
        let (p1, t1) = alpd_case(seed)?;
        let (p2, t2) = molpr_case(seed)?;
        let report = check_gradients(&[p1, p2], &GradcheckConfig::default(), |tape, v| {
            let (l1, _) = alpd_loss_with_targets(tape, v[0], &t1).map_err(loss_to_tensor)?;
            let (l2, _) = molpr_loss_with_targets(tape, v[1], &t2).map_err(loss_to_tensor)?;
            combine(tape, l1, Some(l2), 0.7).map_err(loss_to_tensor)
        })?;
        total.merge(&report);
    }
    a.record("total loss", AuditKind::LossTerm, seeds, &total);

    a.entries.push(region_corner_audit(seeds)?);
    a.entries.push(network_audit((seeds / 5).max(1))?);
    Ok(a.entries)
}

/// Gradients flowing from warped patches back into the first-stage plate
/// offset and size columns through the region corners.
fn region_corner_audit(seeds: u64) -> Result<AuditEntry, AuditError> {
    let priors = [HBox::new(0.4, 0.5, 0.5, 0.4), HBox::new(0.6, 0.5, 0.4, 0.5)];
    let vehicle = HBox::new(0.5, 0.5, 1.0, 1.0);
    // smooth features keep the bilinear sampler's kinks negligible
    let features: Vec<f64> = (0..2 * 16 * 16)
        .map(|i| {
            let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
            (x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos() + 0.05 * x as f64
        })
        .collect();
    let features = Tensor::new(vec![1, 2, 16, 16], features)?;
    let config = GradcheckConfig { step: 1e-6, ..GradcheckConfig::default() };
    let mut total = GradcheckReport::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..2 * ALPD_COLUMNS)
            .map(|c| match c % ALPD_COLUMNS {
                9 | 10 => rng.gen_range(-1.6..-1.0),
                _ => rng.gen_range(-0.1..0.1),
            })
            .collect();
        let pred = Tensor::new(vec![1, 2, ALPD_COLUMNS], pred)?;
        let mut regions = Vec::new();
        for (i, prior) in priors.iter().enumerate() {
            let row = &pred.data()[i * ALPD_COLUMNS..(i + 1) * ALPD_COLUMNS];
            let (region, hint, source) = region_from_prediction(row, i, prior, &vehicle, 2.0)
                .map_err(|e| TensorError::ShapeMismatch { op: "region", detail: e.to_string() })?;
            regions.push(LocalRegion { region, image: 0, vehicle: i, hint, source: Some(source) });
        }
        let report = check_gradients(std::slice::from_ref(&pred), &config, |tape, v| {
            let f = tape.constant(features.clone());
            let batch = aggregate(tape, f, regions.clone(), 6, Some(v[0]))
                .map_err(|e| TensorError::ShapeMismatch { op: "aggregate", detail: e.to_string() })?;
            let patches = batch.patches.ok_or(TensorError::EmptySelection { op: "aggregate" })?;
            project(tape, patches, seed)
        })?;
        total.merge(&report);
    }
    Ok(AuditEntry {
        name: "region corners (coordinate gradients)".into(),
        kind: AuditKind::Op,
        seeds,
        checked: total.checked,
        max_rel_error: total.max_rel_error,
        tolerance: AUDIT_TOLERANCE,
    })
}

/// Whole two-stage loss with respect to a sample of every weight tensor of
/// a small network, with teacher regions.
fn network_audit(seeds: u64) -> Result<AuditEntry, AuditError> {
    let config = ModelConfig { input_size: 32, patch_size: 8, ..ModelConfig::default() };
    // A bias shift moves many ReLU and max-pool inputs at once; the smaller
    // step keeps the central difference from straddling their kinks.
    let check = GradcheckConfig { step: 1e-7, max_checks_per_input: Some(3), ..GradcheckConfig::default() };
    let mut total = GradcheckReport::default();
    for seed in 0..seeds {
        let model = Model::new(config.clone(), seed).map_err(|e| TensorError::ShapeMismatch { op: "model", detail: e.to_string() })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let image = random(&mut rng, &[1, 3, 32, 32], 1.5);
        let scene = audit_scene(&mut rng);
        let regions: Vec<LocalRegion> = scene
            .iter()
            .enumerate()
            .filter_map(|(k, v)| {
                let hint = v.plate_box()?;
                let region = expand_region(&hint, &v.bbox, 3.0).ok()?;
                Some(LocalRegion { region, image: 0, vehicle: k, hint, source: None })
            })
            .collect();
        let gts: Vec<Vec<PlateGt>> = regions.iter().map(|r| plates_in_region(&r.region, &scene)).collect();
        let params: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.cast()).collect();

        // targets are fixed from the unperturbed forward pass
        let mut tape = Tape::<f64>::new();
        let vars = params.iter().map(|t| tape.constant(t.clone())).collect();
        let bound = Bound::from_vars(&model, vars);
        let x = tape.constant(image.clone());
        let fwd = forward_alpd(&mut tape, &model, &bound, x).map_err(|e| TensorError::ShapeMismatch { op: "forward", detail: e.to_string() })?;
        let batch = aggregate(&mut tape, fwd.features, regions.clone(), 8, None)
            .map_err(|e| TensorError::ShapeMismatch { op: "aggregate", detail: e.to_string() })?;
        let out = forward_molpr(&mut tape, &model, &bound, batch.patches).map_err(|e| TensorError::ShapeMismatch { op: "forward", detail: e.to_string() })?;
        let t1 = alpd_targets(tape.value(fwd.predictions).data(), &model.alpd_priors, &[&scene], MatchConfig::default())?;
        let t2 = match out {
            Some(o) => Some(molpr_targets(tape.value(o).data(), &model.molpr_priors, &gts, MatchConfig::default())?),
            None => None,
        };

        let report = check_gradients(&params, &check, |tape, vars| {
            let bound = Bound::from_vars(&model, vars.to_vec());
            let x = tape.constant(image.clone());
            let fwd = forward_alpd(tape, &model, &bound, x).map_err(|e| TensorError::ShapeMismatch { op: "forward", detail: e.to_string() })?;
            let (l1, _) = alpd_loss_with_targets(tape, fwd.predictions, &t1).map_err(loss_to_tensor)?;
            let batch = aggregate(tape, fwd.features, regions.clone(), 8, None)
                .map_err(|e| TensorError::ShapeMismatch { op: "aggregate", detail: e.to_string() })?;
            let out = forward_molpr(tape, &model, &bound, batch.patches).map_err(|e| TensorError::ShapeMismatch { op: "forward", detail: e.to_string() })?;
            let l2 = match (out, &t2) {
                (Some(o), Some(t)) => Some(molpr_loss_with_targets(tape, o, t).map_err(loss_to_tensor)?.0),
                _ => None,
            };
            combine(tape, l1, l2, 1.0).map_err(loss_to_tensor)
        })?;
        total.merge(&report);
    }
    Ok(AuditEntry {
        name: "tiny network (both stages, all weights)".into(),
        kind: AuditKind::Network,
        seeds,
        checked: total.checked,
        max_rel_error: total.max_rel_error,
        tolerance: AUDIT_TOLERANCE,
    })
}
