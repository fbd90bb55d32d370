//! Ground-truth annotations for one image.

use serde::{Deserialize, Serialize};

use crate::geometry::{quad_aabb, HBox, Quad};

/// Label record format version written with every scene.
pub const LABEL_FORMAT_VERSION: u32 = 1;

/// One vehicle. `quad` is present exactly when the vehicle carries a
/// visible plate (`has_lp`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleLabel {
    #[serde(rename = "box")]
    pub bbox: HBox,
    pub has_lp: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad: Option<Quad>,
}

impl VehicleLabel {
    /// Horizontal plate box: the tightest box around the quad.
    pub fn plate_box(&self) -> Option<HBox> {
        self.quad.as_ref().map(quad_aabb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabel {
    pub version: u32,
    pub image_id: String,
    pub seed: u64,
    pub vehicles: Vec<VehicleLabel>,
}

impl SceneLabel {
    pub fn vehicle_boxes(&self) -> Vec<HBox> {
        self.vehicles.iter().map(|v| v.bbox).collect()
    }

    pub fn plate_quads(&self) -> Vec<Quad> {
        self.vehicles.iter().filter_map(|v| v.quad).collect()
    }

    pub fn plate_boxes(&self) -> Vec<HBox> {
        self.vehicles.iter().filter_map(VehicleLabel::plate_box).collect()
    }
}
