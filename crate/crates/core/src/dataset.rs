//! On-disk datasets: binary PPM images plus one JSON-lines label file.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! labels.jsonl        one record per scene: {"split": "train"|"test", <SceneLabel fields>}
//! images/<id>.ppm     binary RGB pixmap
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::SceneLabel;
use crate::synth::{generate_scene, scene_seed, RgbImage, SceneParams, SynthError};

pub const LABEL_FILE: &str = "labels.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}:{line}: {source}")]
    Label { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: expected a square RGB image of side {expected}, got {width}x{height}")]
    ImageSize { path: PathBuf, expected: usize, width: u32, height: u32 },
    #[error("a split needs at least 10 scenes, got {0}")]
    TooFewScenes(usize),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub split: Split,
    #[serde(flatten)]
    pub label: SceneLabel,
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    encoder
        .write_image(&img.pixels, img.size as u32, img.size as u32, ExtendedColorType::Rgb8)
        .map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

pub fn read_image(path: &Path, expected: usize) -> Result<RgbImage, DatasetError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Pnm);
    let img = image::load(reader, format)
        .map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })?
        .into_rgb8();
    if img.width() as usize != expected || img.height() as usize != expected {
        return Err(DatasetError::ImageSize {
            path: path.to_path_buf(),
            expected,
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(RgbImage { size: expected, pixels: img.into_raw() })
}

/// Test membership: the `count / 10` scenes with the smallest split hash.
pub fn split_assignment(seed: u64, count: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| (scene_seed(seed ^ 0x5EED_5EED, i as u64), i));
    let mut splits = vec![Split::Train; count];
    for &i in &order[..count / 10] {
        splits[i] = Split::Test;
    }
    splits
}

pub fn image_id(index: usize) -> String {
    format!("scene_{index:06}")
}

/// Generates `count` scenes into `dir` and returns their records.
pub fn generate_split(dir: &Path, seed: u64, count: usize, params: &SceneParams) -> Result<Vec<LabelRecord>, DatasetError> {
    if count < 10 {
        return Err(DatasetError::TooFewScenes(count));
    }
    params.validate()?;
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let splits = split_assignment(seed, count);
    let label_path = dir.join(LABEL_FILE);
    let mut out = BufWriter::new(File::create(&label_path).map_err(io_err(&label_path))?);
    let mut records = Vec::with_capacity(count);
    for (i, split) in splits.into_iter().enumerate() {
        let id = image_id(i);
        let (img, label) = generate_scene(scene_seed(seed, i as u64), &id, params)?;
        write_ppm(&images.join(format!("{id}.ppm")), &img)?;
        let record = LabelRecord { split, label };
        let line = serde_json::to_string(&record).expect("label records serialize");
        writeln!(out, "{line}").map_err(io_err(&label_path))?;
        records.push(record);
    }
    out.flush().map_err(io_err(&label_path))?;
    Ok(records)
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| DatasetError::Label {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}

/// A loaded split held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub labels: Vec<SceneLabel>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Loads every scene of `split` from a dataset directory.
    pub fn open(dir: &Path, split: Split, image_size: usize) -> Result<Self, DatasetError> {
        let records = read_labels(&dir.join(LABEL_FILE))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for r in records.into_iter().filter(|r| r.split == split) {
            let path = dir.join(IMAGE_DIR).join(format!("{}.ppm", r.label.image_id));
            images.push(read_image(&path, image_size)?);
            labels.push(r.label);
        }
        Ok(Self { images, labels })
    }
}
