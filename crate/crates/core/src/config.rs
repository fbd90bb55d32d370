//! Flat `key = value` run configuration.
//!
//! Every key has a default and a one-line description (see [`KEYS`]);
//! unknown keys are rejected. Lines starting with `#` are comments. The
//! resolved configuration renders back to the same format, so a run
//! directory's `config.txt` can be fed to any command to reproduce it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::ModelConfig;
use crate::pipeline::{InferConfig, Mode, TrainConfig};
use crate::synth::SceneParams;

/// File name of the resolved configuration inside run and data directories.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("inconsistent config: {0}")]
    Invalid(String),
}

/// A value that can be read from and written to the text format.
trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool, Mode);

impl ConfigValue for PathBuf {
    fn parse(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for (f64, f64) {
    fn parse(s: &str) -> Result<Self, String> {
        match Vec::<f64>::parse(s)?.as_slice() {
            &[lo, hi] => Ok((lo, hi)),
            other => Err(format!("expected `low,high`, got {} values", other.len())),
        }
    }
    fn render(&self) -> String {
        format!("{},{}", self.0, self.1)
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse(s: &str) -> Result<Self, String> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(T::parse).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

/// Everything a command needs, resolved from defaults, a file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub scenes: usize,
    pub log_every: usize,
    pub has_lp_gate: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub synth: SceneParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
            checkpoint: PathBuf::new(),
            scenes: 2000,
            log_every: 50,
            has_lp_gate: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            synth: SceneParams::default(),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ : $doc:literal;)*) => {
        /// Every key with its description, in rendering order.
        pub const KEYS: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                let bad = |reason: String| ConfigError::Value { key: key.to_string(), value: value.to_string(), reason };
                match key {
                    $($key => self.$($field).+ = ConfigValue::parse(value).map_err(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            /// The text form of one key's current value.
            pub fn get(&self, key: &str) -> Result<String, ConfigError> {
                match key {
                    $($key => Ok(self.$($field).+.render()),)*
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }
        }
    };
}

config_keys! {
    "seed" => seed: "seed for weight initialization, batching and augmentation";
    "data_seed" => data_seed: "seed for scene synthesis and the train/test split";
    "data_dir" => data_dir: "dataset directory (written by synth, read by train/eval)";
    "run_dir" => run_dir: "output directory for logs, checkpoints and reports";
    "checkpoint" => checkpoint: "weights file to load; empty means <run_dir>/model.bin";
    "scenes" => scenes: "number of synthetic scenes (a tenth go to the test split)";
    "log_every" => log_every: "progress line to stderr every this many iterations (0: never)";
    "input_size" => model.input_size: "network input side in pixels (multiple of 32); also the synthetic image size";
    "patch_size" => model.patch_size: "side of the warped feature patches (multiple of 4)";
    "alpd_scales" => model.alpd_scales: "first-stage prior scales for the three heads";
    "alpd_ratios" => model.alpd_ratios: "first-stage prior aspect ratios (width / height)";
    "molpr_scales" => model.molpr_scales: "second-stage prior scales for the two heads";
    "molpr_ratios" => model.molpr_ratios: "second-stage prior aspect ratios (width / height)";
    "l2norm_init" => model.l2norm_init: "initial per-channel scale of the L2 normalization";
    "mode" => train.mode: "e2e (both stages) or alpd (first stage only, coarse plates)";
    "iterations" => train.iterations: "training iterations";
    "batch_size" => train.batch_size: "scenes per training iteration";
    "lr" => train.adam.lr: "Adam learning rate";
    "beta1" => train.adam.beta1: "Adam first-moment decay";
    "beta2" => train.adam.beta2: "Adam second-moment decay";
    "eps" => train.adam.eps: "Adam denominator epsilon";
    "weight_decay" => train.adam.weight_decay: "L2 weight decay added to the gradient";
    "milestones" => train.adam.milestones: "iterations at which the learning rate is multiplied by gamma";
    "gamma" => train.adam.gamma: "learning-rate decay factor";
    "alpha" => train.alpha: "weight of the second-stage loss in the total loss";
    "iou_threshold" => train.matching.iou_threshold: "IOU at which a prior is matched to a ground truth";
    "negative_ratio" => train.matching.negative_ratio: "mined negatives per positive";
    "expansion_ratio" => train.expansion_ratio: "plate-box expansion for local regions (inf: whole vehicle)";
    "teacher_forcing" => train.teacher_forcing: "fraction of iterations whose regions come from ground-truth plates";
    "teacher_jitter" => train.teacher_jitter: "relative jitter applied to ground-truth plates under teacher forcing";
    "has_lp_threshold" => train.has_lp_threshold: "has-plate probability needed to form a region";
    "region_coord_grad" => train.region_coord_grad: "backpropagate through region corners into the plate offset/size outputs";
    "augment" => train.augment: "random crops and photometric jitter during training";
    "has_lp_gate" => has_lp_gate: "apply the has-plate threshold at inference";
    "vehicle_threshold" => infer.vehicle_threshold: "minimum vehicle confidence kept at inference";
    "plate_threshold" => infer.plate_threshold: "minimum plate confidence kept at inference";
    "nms_iou" => infer.nms_iou: "IOU above which lower-scored boxes are suppressed";
    "top_k" => infer.top_k: "vehicle candidates per image before suppression";
    "max_vehicles" => infer.max_vehicles: "vehicles kept per image after suppression";
    "max_plates_per_region" => infer.max_plates_per_region: "plates kept per local region";
    "eval_batch_size" => infer.batch_size: "images per inference batch";
    "synth_min_vehicles" => synth.min_vehicles: "fewest vehicles per synthetic scene";
    "synth_max_vehicles" => synth.max_vehicles: "most vehicles per synthetic scene (at most 6)";
    "synth_vehicle_width" => synth.vehicle_width: "width range of ordinary vehicles in pixels (low,high)";
    "synth_plate_width" => synth.plate_width: "plate width as a fraction of its vehicle's width (low,high)";
    "synth_plate_aspect" => synth.plate_aspect: "plate width / height (low,high)";
    "synth_small_vehicle_width" => synth.small_vehicle_width: "width range of small vehicles in pixels (low,high)";
    "synth_large_vehicle_width" => synth.large_vehicle_width: "width range of large vehicles in pixels (low,high)";
    "synth_tilt" => synth.tilt: "largest plate corner displacement as a fraction of the plate size";
    "synth_occlusion_prob" => synth.occlusion_prob: "chance a plate is partly covered (labeled without plate)";
    "synth_small_vehicle_prob" => synth.small_vehicle_prob: "chance of a small vehicle (labeled without plate)";
    "synth_large_vehicle_prob" => synth.large_vehicle_prob: "chance the first vehicle is a large one with a tiny plate";
    "synth_min_plate_vehicle_area" => synth.min_plate_vehicle_area: "vehicles below this many pixels are labeled without plate";
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            };
            config.set(key.trim(), value)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) =
                o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.to_string() })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Every key with its description, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = self.get(key).expect("listed keys are known");
            let _ = writeln!(out, "# {doc}\n{key} = {value}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scene_params().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.train;
        if t.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        if !(t.expansion_ratio >= 1.0) {
            return invalid(format!("expansion_ratio must be at least 1, got {}", t.expansion_ratio));
        }
        if !(t.adam.lr >= 0.0) || !(t.alpha > 0.0) {
            return invalid("lr must be non-negative and alpha positive".into());
        }
        for (name, v) in [
            ("teacher_forcing", t.teacher_forcing),
            ("has_lp_threshold", t.has_lp_threshold),
            ("iou_threshold", t.matching.iou_threshold),
            ("vehicle_threshold", self.infer.vehicle_threshold),
            ("plate_threshold", self.infer.plate_threshold),
            ("nms_iou", self.infer.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&t.teacher_jitter) {
            return invalid(format!("teacher_jitter must lie in [0, 1), got {}", t.teacher_jitter));
        }
        if self.scenes < 10 {
            return invalid(format!("scenes must be at least 10, got {}", self.scenes));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Inference settings; mode and expansion ratio follow the training keys.
    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            mode: self.train.mode,
            expansion_ratio: self.train.expansion_ratio,
            has_lp_threshold: self.has_lp_gate.then_some(self.train.has_lp_threshold),
            ..self.infer.clone()
        }
    }

    /// Scene parameters; the image size follows `input_size`.
    pub fn scene_params(&self) -> SceneParams {
        SceneParams { size: self.model.input_size, ..self.synth.clone() }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.as_os_str().is_empty() {
            self.run_dir.join("model.bin")
        } else {
            self.checkpoint.clone()
        }
    }
}
