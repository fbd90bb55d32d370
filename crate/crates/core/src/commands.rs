//! The operations behind each CLI subcommand.
//!
//! Every command takes a resolved [`RunConfig`]; all randomness derives from
//! its seeds, so a configuration determines every output byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{gradient_audit, AuditEntry, AuditError};
use crate::config::{ConfigError, RunConfig, CONFIG_FILE};
use crate::dataset::{generate_split, read_image, DatasetError, Split, Dataset, LABEL_FILE};
use crate::eval::evaluate;
use crate::losses::{AlpdLossBreakdown, MolprLossBreakdown};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelError};
use crate::pipeline::{infer, DetectionRecord, Mode, PipelineError, StepReport, Trainer};
use crate::synth::RgbImage;

pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const SWEEP_FILE: &str = "sweep.json";

/// Ratios covered by the expansion-ratio sweep.
pub const SWEEP_RATIOS: [f64; 6] = [1.0, 2.0, 3.0, 4.0, 5.0, f64::INFINITY];

/// Recall at which false positives are counted in evaluation reports.
pub const FP_RECALL: f64 = 0.8;

/// Version tag of detection records.
pub const DETECTION_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no dataset at {0} (run `synth` first)")]
    MissingDataset(PathBuf),
    #[error("no checkpoint at {0} (run `train` first)")]
    MissingCheckpoint(PathBuf),
    #[error("split {0:?} of the dataset is empty")]
    EmptySplit(Split),
}

impl CommandError {
    /// Stable short name of the failure class.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Dataset(_) => "dataset",
            Self::Model(ModelError::Checkpoint { .. }) => "checkpoint",
            Self::Model(_) => "model",
            Self::Pipeline(_) => "pipeline",
            Self::Audit(_) => "audit",
            Self::Io { .. } => "io",
            Self::MissingDataset(_) => "missing_dataset",
            Self::MissingCheckpoint(_) => "missing_checkpoint",
            Self::EmptySplit(_) => "empty_split",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CommandError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Validates `config` and echoes it into `dir`.
fn prepare_dir(config: &RunConfig, dir: &Path) -> Result<(), CommandError> {
    config.validate()?;
    write_file(&dir.join(CONFIG_FILE), &config.to_text())
}

fn open_split(config: &RunConfig, split: Split) -> Result<Dataset, CommandError> {
    if !config.data_dir.join(LABEL_FILE).is_file() {
        return Err(CommandError::MissingDataset(config.data_dir.clone()));
    }
    let data = Dataset::open(&config.data_dir, split, config.model.input_size)?;
    if data.is_empty() {
        return Err(CommandError::EmptySplit(split));
    }
    Ok(data)
}

fn load_model(config: &RunConfig) -> Result<Model, CommandError> {
    let path = config.checkpoint_path();
    if !path.is_file() {
        return Err(CommandError::MissingCheckpoint(path));
    }
    Ok(Model::load(config.model_config(), &path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
}

/// Writes a synthetic dataset (images, labels and the config) to `data_dir`.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthSummary, CommandError> {
    prepare_dir(config, &config.data_dir)?;
    let records = generate_split(&config.data_dir, config.data_seed, config.scenes, &config.scene_params())?;
    let test = records.iter().filter(|r| r.split == Split::Test).count();
    Ok(SynthSummary { train: records.len() - test, test })
}

/// First-stage terms of a loss-log line, each divided by the positive count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStageTerms {
    pub conf: f64,
    pub loc: f64,
    pub has_lp: f64,
    pub off: f64,
    pub lp_wh: f64,
    pub positives: usize,
    pub total: f64,
}

/// Second-stage terms of a loss-log line; all zero when no region formed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SecondStageTerms {
    pub conf: f64,
    pub loc: f64,
    pub corner: f64,
    pub positives: usize,
    pub total: f64,
}

/// One line of `loss.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub teacher_forced: bool,
    pub regions: usize,
    pub l1: FirstStageTerms,
    pub l2: SecondStageTerms,
    pub total: f64,
}

impl LossRecord {
    pub fn from_step(step: &StepReport) -> Self {
        let l1 = first_stage_terms(&step.l1);
        let l2 = step.l2.as_ref().map(second_stage_terms).unwrap_or_default();
        Self {
            iter: step.iteration,
            lr: step.lr,
            teacher_forced: step.teacher_forced,
            regions: step.regions,
            l1,
            l2,
            total: step.total,
        }
    }
}

fn first_stage_terms(b: &AlpdLossBreakdown) -> FirstStageTerms {
    let n = b.n_pos.max(1) as f64;
    FirstStageTerms {
        conf: b.conf / n,
        loc: b.loc / n,
        has_lp: b.has_lp / n,
        off: b.off / n,
        lp_wh: b.lp_wh / n,
        positives: b.n_pos,
        total: b.total(),
    }
}

fn second_stage_terms(b: &MolprLossBreakdown) -> SecondStageTerms {
    let n = b.n_pos.max(1) as f64;
    SecondStageTerms { conf: b.conf / n, loc: b.loc / n, corner: b.corner / n, positives: b.n_pos, total: b.total() }
}

/// Reads a loss log written by [`cmd_train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>, CommandError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CommandError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

/// Trains on the train split, writing `config.txt`, `loss.jsonl` and the
/// checkpoint. `on_step` sees every iteration's record.
pub fn cmd_train(config: &RunConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<PathBuf, CommandError> {
    prepare_dir(config, &config.run_dir)?;
    let data = open_split(config, Split::Train)?;
    let model = Model::new(config.model_config(), config.seed)?;
    let mut trainer = Trainer::new(model, config.train_config());

    let log_path = config.run_dir.join(LOSS_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    for _ in 0..config.train.iterations {
        let step = trainer.train_on(&data.images, &data.labels)?;
        let record = LossRecord::from_step(&step);
        let line = serde_json::to_string(&record).expect("loss records serialize");
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        on_step(&record);
    }
    log.flush().map_err(io_err(&log_path))?;

    let checkpoint = config.checkpoint_path();
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    trainer.model.save(&checkpoint)?;
    Ok(checkpoint)
}

/// Evaluation of one checkpoint under one inference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mode: Mode,
    /// Rendered like the config value (`inf` for the whole vehicle).
    pub expansion_ratio: String,
    pub has_lp_gate: bool,
    /// Plate false positives (IOU 0.5) when recall first reaches 0.8.
    pub plate_fp_at_recall_0_8: Option<usize>,
    pub report: EvalReport,
}

impl EvalOutcome {
    pub fn to_table(&self) -> String {
        let fp = self.plate_fp_at_recall_0_8.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        format!(
            "mode              {}\nexpansion ratio   {}\nhas-plate gate    {}\n{}FP @ recall 0.8   {fp}\n",
            self.mode,
            self.expansion_ratio,
            if self.has_lp_gate { "on" } else { "off" },
            self.report.to_table()
        )
    }
}

fn evaluate_model(model: &Model, config: &RunConfig, data: &Dataset) -> Result<EvalOutcome, CommandError> {
    let images: Vec<&RgbImage> = data.images.iter().collect();
    let results = infer(model, &images, &config.infer_config())?;
    let evaluation = evaluate(&results, &data.labels);
    Ok(EvalOutcome {
        mode: config.train.mode,
        expansion_ratio: config.get("expansion_ratio")?,
        has_lp_gate: config.has_lp_gate,
        plate_fp_at_recall_0_8: evaluation.plate_matches50.false_positives_at_recall(FP_RECALL),
        report: evaluation.report,
    })
}

/// Evaluates the checkpoint on the test split and writes `eval.json`.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalOutcome, CommandError> {
    config.validate()?;
    let model = load_model(config)?;
    let data = open_split(config, Split::Test)?;
    let outcome = evaluate_model(&model, config, &data)?;
    let json = serde_json::to_string_pretty(&outcome).expect("reports serialize");
    write_file(&config.run_dir.join(EVAL_FILE), &format!("{json}\n"))?;
    Ok(outcome)
}

/// Evaluates the checkpoint at every ratio of [`SWEEP_RATIOS`] (all other
/// settings as configured) and writes `sweep.json`.
pub fn cmd_sweep_ratio(config: &RunConfig) -> Result<Vec<EvalOutcome>, CommandError> {
    config.validate()?;
    let model = load_model(config)?;
    let data = open_split(config, Split::Test)?;
    let mut rows = Vec::with_capacity(SWEEP_RATIOS.len());
    for ratio in SWEEP_RATIOS {
        let mut c = config.clone();
        c.train.expansion_ratio = ratio;
        rows.push(evaluate_model(&model, &c, &data)?);
    }
    let json = serde_json::to_string_pretty(&rows).expect("reports serialize");
    write_file(&config.run_dir.join(SWEEP_FILE), &format!("{json}\n"))?;
    Ok(rows)
}

/// One table row per sweep entry.
pub fn sweep_table(rows: &[EvalOutcome]) -> String {
    let pct = |v: f64| format!("{:7.2}", 100.0 * v);
    let mut s = String::from("ratio   AP@0.5  AP@0.75 C_recall\n");
    for r in rows {
        let c = r.report.c_recall.map_or_else(|| "    n/a".to_string(), pct);
        s.push_str(&format!("{:<6} {} {} {}\n", r.expansion_ratio, pct(r.report.ap50), pct(r.report.ap75), c));
    }
    s
}

/// Detection records for `images`, or for the test split when empty.
pub fn cmd_infer(config: &RunConfig, images: &[PathBuf]) -> Result<Vec<DetectionRecord>, CommandError> {
    config.validate()?;
    let model = load_model(config)?;
    let (ids, pixels): (Vec<String>, Vec<RgbImage>) = if images.is_empty() {
        let data = open_split(config, Split::Test)?;
        (data.labels.into_iter().map(|l| l.image_id).collect(), data.images)
    } else {
        let mut ids = Vec::with_capacity(images.len());
        let mut pixels = Vec::with_capacity(images.len());
        for path in images {
            pixels.push(read_image(path, config.model.input_size)?);
            ids.push(path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()));
        }
        (ids, pixels)
    };
    let refs: Vec<&RgbImage> = pixels.iter().collect();
    let results = infer(&model, &refs, &config.infer_config())?;
    Ok(ids
        .into_iter()
        .zip(results)
        .flat_map(|(id, r)| {
            r.detections.into_iter().map(move |detection| DetectionRecord {
                version: DETECTION_VERSION,
                image_id: id.clone(),
                detection,
            })
        })
        .collect())
}

/// Finite-difference audit of every op and loss term over `seeds` seeds.
pub fn cmd_gradcheck(seeds: u64) -> Result<Vec<AuditEntry>, CommandError> {
    Ok(gradient_audit(seeds)?)
}
