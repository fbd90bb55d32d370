//! Scoring inference output against labels.

use crate::geometry::HBox;
use crate::label::SceneLabel;
use crate::metrics::{c_recall, match_ranked, prf_quad, EvalReport, RankedMatches, ScoredBox, ScoredQuad};
use crate::pipeline::ImageResult;

/// Confidence at which quads are counted for precision/recall.
pub const QUAD_CONF_THRESHOLD: f64 = 0.5;

/// A report plus the ranked plate matches behind its AP@0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub plate_matches50: RankedMatches,
}

pub fn evaluate(results: &[ImageResult], labels: &[SceneLabel]) -> Evaluation {
    let plate_gts: Vec<Vec<HBox>> = labels.iter().map(SceneLabel::plate_boxes).collect();
    let quad_gts: Vec<_> = labels.iter().map(SceneLabel::plate_quads).collect();
    let vehicle_gts: Vec<Vec<HBox>> = labels.iter().map(SceneLabel::vehicle_boxes).collect();

    let mut plates = Vec::new();
    let mut quads = Vec::new();
    let mut vehicles = Vec::new();
    for (image, r) in results.iter().enumerate() {
        let mut seen: Vec<HBox> = Vec::new();
        for d in &r.detections {
            // a vehicle with several plates is listed once per plate
            if !seen.contains(&d.vehicle) {
                seen.push(d.vehicle);
                vehicles.push(ScoredBox { image, score: d.vehicle_conf, bbox: d.vehicle });
            }
            if let Some(p) = &d.plate {
                plates.push(ScoredBox { image, score: p.conf, bbox: p.bbox });
                quads.push(ScoredQuad { image, score: p.conf, quad: p.quad });
            }
        }
    }
    let regions: Vec<Vec<HBox>> = results.iter().map(|r| r.regions.clone()).collect();
    let plate_matches50 = match_ranked(&plates, &plate_gts, 0.5);
    let report = EvalReport {
        images: labels.len(),
        plates: plate_gts.iter().map(Vec::len).sum(),
        ap50: plate_matches50.ap_11_point(),
        ap75: match_ranked(&plates, &plate_gts, 0.75).ap_11_point(),
        c_recall: c_recall(&regions, &plate_gts),
        quad50: prf_quad(&quads, &quad_gts, 0.5, QUAD_CONF_THRESHOLD),
        quad75: prf_quad(&quads, &quad_gts, 0.75, QUAD_CONF_THRESHOLD),
        vehicle_ap50: match_ranked(&vehicles, &vehicle_gts, 0.5).ap_11_point(),
    };
    Evaluation { report, plate_matches50 }
}
