//! The two Tiny networks, their parameters and forward passes.
//!
//! First stage (input `3 x N x N`, `N` divisible by 32):
//!
//! ```text
//! conv1 16 (kept as the full-resolution features for region warping)
//! conv2 16, pool | conv3 32, conv4 32, pool | conv5 64, pool   -> N/8
//! l2norm -> head1                                               @ N/8
//! conv6 64 stride 2 -> head2                                    @ N/16
//! conv7 64 stride 2 -> head3                                    @ N/32
//! ```
//!
//! Second stage (input `16 x S x S`, `S` divisible by 4):
//!
//! ```text
//! conv1 32, conv2 32, pool | conv3 32, conv4 32 -> head1        @ S/2
//! pool | conv5 32 -> head2                                      @ S/4
//! ```
//!
//! All convolutions are 3x3 with padding 1 and followed by ReLU; heads are
//! plain 3x3 convolutions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use lpdet_autodiff::{CheckpointError, ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::{ALPD_COLUMNS, MOLPR_COLUMNS};
use crate::priors::{generate_priors, LayerSpec, PriorError, PriorSet};

/// Channels of the features handed to the second stage.
pub const FEATURE_CHANNELS: usize = 16;

/// Prior probability the has-plate logit starts at.
const HAS_LP_PRIOR: f64 = 0.01;
/// Spread of the head weights at initialization.
const HEAD_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input size {0} must be a positive multiple of 32")]
    InputSize(usize),
    #[error("patch size {0} must be a positive multiple of 4")]
    PatchSize(usize),
    #[error("{stage} needs {expected} prior scales, got {got}")]
    ScaleCount { stage: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Priors(#[from] PriorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image batch has shape {got:?}, expected [B, 3, {size}, {size}]")]
    InputShape { got: Vec<usize>, size: usize },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: String, source: CheckpointError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub alpd_scales: Vec<f64>,
    pub alpd_ratios: Vec<f64>,
    pub molpr_scales: Vec<f64>,
    pub molpr_ratios: Vec<f64>,
    pub l2norm_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            patch_size: 28,
            alpd_scales: vec![0.15, 0.35, 0.60],
            alpd_ratios: vec![1.0, 2.0, 3.0, 0.5],
            molpr_scales: vec![0.3, 0.6],
            molpr_ratios: vec![1.0, 2.0, 3.0, 0.5],
            l2norm_init: 20.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(ModelError::InputSize(self.input_size));
        }
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return Err(ModelError::PatchSize(self.patch_size));
        }
        if self.alpd_scales.len() != 3 {
            return Err(ModelError::ScaleCount { stage: "first stage", expected: 3, got: self.alpd_scales.len() });
        }
        if self.molpr_scales.len() != 2 {
            return Err(ModelError::ScaleCount { stage: "second stage", expected: 2, got: self.molpr_scales.len() });
        }
        Ok(())
    }

    pub fn alpd_layers(&self) -> Vec<LayerSpec> {
        let n = self.input_size;
        [n / 8, n / 16, n / 32]
            .iter()
            .zip(&self.alpd_scales)
            .map(|(&grid, &scale)| LayerSpec { grid, scale, ratios: self.alpd_ratios.clone() })
            .collect()
    }

    pub fn molpr_layers(&self) -> Vec<LayerSpec> {
        let s = self.patch_size;
        [s / 2, s / 4]
            .iter()
            .zip(&self.molpr_scales)
            .map(|(&grid, &scale)| LayerSpec { grid, scale, ratios: self.molpr_ratios.clone() })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform with bound `sqrt(6 / fan_in)`.
    FanIn,
    /// Small uniform weights of standard deviation [`HEAD_STD`].
    Head,
}

struct ConvSpec {
    name: &'static str,
    input: usize,
    output: usize,
    init: Init,
}

/// Weights plus the prior sets they predict against.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub alpd_priors: PriorSet,
    pub molpr_priors: PriorSet,
}

fn conv_specs(config: &ModelConfig) -> Vec<ConvSpec> {
    let a = config.alpd_ratios.len() * ALPD_COLUMNS;
    let m = config.molpr_ratios.len() * MOLPR_COLUMNS;
    let c = |name, input, output| ConvSpec { name, input, output, init: Init::FanIn };
    let h = |name, input, output| ConvSpec { name, input, output, init: Init::Head };
    vec![
        c("alpd.conv1", 3, FEATURE_CHANNELS),
        c("alpd.conv2", FEATURE_CHANNELS, 16),
        c("alpd.conv3", 16, 32),
        c("alpd.conv4", 32, 32),
        c("alpd.conv5", 32, 64),
        h("alpd.head1", 64, a),
        c("alpd.conv6", 64, 64),
        h("alpd.head2", 64, a),
        c("alpd.conv7", 64, 64),
        h("alpd.head3", 64, a),
        c("molpr.conv1", FEATURE_CHANNELS, 32),
        c("molpr.conv2", 32, 32),
        c("molpr.conv3", 32, 32),
        c("molpr.conv4", 32, 32),
        h("molpr.head1", 32, m),
        c("molpr.conv5", 32, 32),
        h("molpr.head2", 32, m),
    ]
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let alpd_priors = generate_priors(&config.alpd_layers())?;
        let molpr_priors = generate_priors(&config.molpr_layers())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let anchors = config.alpd_ratios.len();
        for spec in conv_specs(&config) {
            let fan_in = spec.input * 9;
            let bound = match spec.init {
                Init::FanIn => (6.0 / fan_in as f64).sqrt(),
                Init::Head => HEAD_STD * 3f64.sqrt(),
            };
            let weights = (0..spec.output * fan_in).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            let mut bias = vec![0.0f32; spec.output];
            if spec.name.starts_with("alpd.head") {
                let logit = (HAS_LP_PRIOR / (1.0 - HAS_LP_PRIOR)).ln() as f32;
                for a in 0..anchors {
                    bias[a * ALPD_COLUMNS + 6] = logit;
                }
            }
            params.insert(format!("{}.weight", spec.name), Tensor::new(vec![spec.output, spec.input, 3, 3], weights)?)
                .expect("unique parameter names");
            params.insert(format!("{}.bias", spec.name), Tensor::new(vec![spec.output], bias)?)
                .expect("unique parameter names");
            if spec.name == "alpd.conv5" {
                params
                    .insert("alpd.l2norm.scale", Tensor::full(vec![64], config.l2norm_init as f32))
                    .expect("unique parameter names");
            }
        }
        Ok(Self { config, params, alpd_priors, molpr_priors })
    }

    /// Writes the weights to `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let wrap = |source| ModelError::Checkpoint { path: path.display().to_string(), source };
        let file = File::create(path).map_err(|e| wrap(e.into()))?;
        let mut w = BufWriter::new(file);
        self.params.write_to(&mut w).map_err(wrap)?;
        w.flush().map_err(|e| wrap(e.into()))
    }

    /// Builds a model for `config` and fills it from `path`; every tensor
    /// must be present with the shape `config` implies.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self, ModelError> {
        let wrap = |source| ModelError::Checkpoint { path: path.display().to_string(), source };
        let mut model = Self::new(config, 0)?;
        let file = File::open(path).map_err(|e| wrap(e.into()))?;
        let stored = ParamStore::read_from(BufReader::new(file)).map_err(wrap)?;
        model.params.load_matching(stored).map_err(wrap)?;
        Ok(model)
    }

    /// Registers every parameter on `tape`, in store order.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self.params.iter().map(|(_, t)| tape.leaf(t.cast(), trainable)).collect();
        let names = self.params.iter().map(|(n, _)| n.to_string()).collect();
        Bound { names, vars }
    }
}

/// Parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already holding `model`'s parameters, in store order.
    pub fn from_vars(model: &Model, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), model.params.len(), "one variable per parameter");
        let names = model.params.iter().map(|(n, _)| n.to_string()).collect();
        Self { names, vars }
    }

    fn get(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    fn conv<T: Real>(&self, tape: &mut Tape<T>, name: &str, x: Var, stride: usize, relu: bool) -> Result<Var, TensorError> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        let y = tape.conv2d(x, w, b, stride, 1)?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// First-stage outputs.
#[derive(Debug, Clone, Copy)]
pub struct AlpdForward {
    /// `(B, priors, 11)`.
    pub predictions: Var,
    /// `(B, 16, N, N)`.
    pub features: Var,
}

pub fn forward_alpd<T: Real>(tape: &mut Tape<T>, model: &Model, p: &Bound, images: Var) -> Result<AlpdForward, ModelError> {
    let n = model.config.input_size;
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
        return Err(ModelError::InputShape { got: s, size: n });
    }
    let anchors = model.config.alpd_ratios.len();
    let features = p.conv(tape, "alpd.conv1", images, 1, true)?;
    let x = p.conv(tape, "alpd.conv2", features, 1, true)?;
    let x = tape.maxpool2d(x, 2, 2)?;
    let x = p.conv(tape, "alpd.conv3", x, 1, true)?;
    let x = p.conv(tape, "alpd.conv4", x, 1, true)?;
    let x = tape.maxpool2d(x, 2, 2)?;
    let x = p.conv(tape, "alpd.conv5", x, 1, true)?;
    let x1 = tape.maxpool2d(x, 2, 2)?;
    let normed = tape.l2norm(x1, p.get("alpd.l2norm.scale"))?;
    let h1 = p.conv(tape, "alpd.head1", normed, 1, false)?;
    let x2 = p.conv(tape, "alpd.conv6", x1, 2, true)?;
    let h2 = p.conv(tape, "alpd.head2", x2, 1, false)?;
    let x3 = p.conv(tape, "alpd.conv7", x2, 2, true)?;
    let h3 = p.conv(tape, "alpd.head3", x3, 1, false)?;
    let rows = [h1, h2, h3]
        .into_iter()
        .map(|h| tape.flatten_head(h, anchors))
        .collect::<Result<Vec<_>, _>>()?;
    let predictions = tape.concat_rows(&rows)?;
    Ok(AlpdForward { predictions, features })
}

/// Second-stage predictions `(R, priors, 14)` for a `(R, 16, S, S)` patch
/// batch; `None` in, `None` out.
pub fn forward_molpr<T: Real>(tape: &mut Tape<T>, model: &Model, p: &Bound, patches: Option<Var>) -> Result<Option<Var>, ModelError> {
    let Some(patches) = patches else { return Ok(None) };
    let anchors = model.config.molpr_ratios.len();
    let x = p.conv(tape, "molpr.conv1", patches, 1, true)?;
    let x = p.conv(tape, "molpr.conv2", x, 1, true)?;
    let x = tape.maxpool2d(x, 2, 2)?;
    let x = p.conv(tape, "molpr.conv3", x, 1, true)?;
    let x1 = p.conv(tape, "molpr.conv4", x, 1, true)?;
    let h1 = p.conv(tape, "molpr.head1", x1, 1, false)?;
    let x = tape.maxpool2d(x1, 2, 2)?;
    let x2 = p.conv(tape, "molpr.conv5", x, 1, true)?;
    let h2 = p.conv(tape, "molpr.head2", x2, 1, false)?;
    let a = tape.flatten_head(h1, anchors)?;
    let b = tape.flatten_head(h2, anchors)?;
    Ok(Some(tape.concat_rows(&[a, b])?))
}

/// Maps 8-bit RGB (`H x W x 3`, row-major) to the network's `(3, H, W)`
/// input range.
pub fn normalize_image(rgb: &[u8], size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = (px[c] as f32 - 127.5) / 64.0;
        }
    }
    out
}
