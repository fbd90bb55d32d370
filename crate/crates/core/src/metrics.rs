//! Evaluation: 11-point average precision, region containment recall and
//! quadrilateral precision/recall/F1.
//!
//! All matchers are greedy in descending confidence; ties keep input order.

use serde::{Deserialize, Serialize};

use crate::geometry::{contains, iou_hbox, quad_iou, HBox, Quad};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: HBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredQuad {
    pub image: usize,
    pub score: f64,
    pub quad: Quad,
}

/// Ranked matching outcome behind an AP value.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatches {
    /// Whether the detection at each rank is a true positive.
    pub tp: Vec<bool>,
    pub num_gt: usize,
}

impl RankedMatches {
    /// `(precision, recall)` after each rank.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        self.tp
            .iter()
            .enumerate()
            .map(|(k, &hit)| {
                tp += usize::from(hit);
                let recall = if self.num_gt == 0 { 0.0 } else { tp as f64 / self.num_gt as f64 };
                (tp as f64 / (k + 1) as f64, recall)
            })
            .collect()
    }

    /// False positives ranked above the point where recall first reaches
    /// `recall`, or `None` if it never does.
    pub fn false_positives_at_recall(&self, recall: f64) -> Option<usize> {
        let mut tp = 0usize;
        for (k, &hit) in self.tp.iter().enumerate() {
            tp += usize::from(hit);
            if self.num_gt > 0 && tp as f64 / self.num_gt as f64 >= recall {
                return Some(k + 1 - tp);
            }
        }
        None
    }

    /// Mean over recall levels 0, 0.1, ..., 1 of the best precision at or
    /// beyond that recall.
    pub fn ap_11_point(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        let curve = self.curve();
        (0..=10)
            .map(|i| {
                let r = i as f64 / 10.0;
                curve.iter().filter(|(_, rec)| *rec >= r - 1e-12).map(|(p, _)| *p).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0
    }
}

fn ranked<T>(dets: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| score(&dets[b]).total_cmp(&score(&dets[a])).then(a.cmp(&b)));
    order
}

/// VOC-style matching: each detection takes its highest-IOU ground truth in
/// the same image; it is a true positive if that IOU reaches `threshold` and
/// the ground truth is still unclaimed.
pub fn match_ranked(dets: &[ScoredBox], gts: &[Vec<HBox>], threshold: f64) -> RankedMatches {
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp = ranked(dets, |d| d.score)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let Some(image_gts) = gts.get(d.image) else { return false };
            let best = image_gts
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou_hbox(&d.bbox, g).unwrap_or(0.0)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= threshold && !claimed[d.image][j] => {
                    claimed[d.image][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    RankedMatches { tp, num_gt: gts.iter().map(Vec::len).sum() }
}

/// 11-point interpolated AP. With no ground truth at all the value is 0.
pub fn ap_voc07(dets: &[ScoredBox], gts: &[Vec<HBox>], threshold: f64) -> f64 {
    match_ranked(dets, gts, threshold).ap_11_point()
}

/// Fraction of ground-truth plates lying entirely (boundary inclusive) inside
/// at least one region of their image; `None` when there are no plates.
pub fn c_recall(regions: &[Vec<HBox>], gts: &[Vec<HBox>]) -> Option<f64> {
    let m: usize = gts.iter().map(Vec::len).sum();
    if m == 0 {
        return None;
    }
    let empty = Vec::new();
    let hit = gts
        .iter()
        .enumerate()
        .map(|(i, image_gts)| {
            let regs = regions.get(i).unwrap_or(&empty);
            image_gts.iter().filter(|g| regs.iter().any(|r| contains(r, g))).count()
        })
        .sum::<usize>();
    Some(hit as f64 / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, precision, recall, f1 }
    }
}

/// Quad precision/recall/F1 over detections with confidence at least
/// `conf_threshold`. Each detection claims the unclaimed ground truth of
/// highest quad IOU, counting as a true positive if that reaches
/// `iou_threshold`. Invalid quads overlap nothing.
pub fn prf_quad(dets: &[ScoredQuad], gts: &[Vec<Quad>], iou_threshold: f64, conf_threshold: f64) -> Prf {
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0, 0);
    for i in ranked(dets, |d| d.score) {
        let d = &dets[i];
        if d.score < conf_threshold {
            continue;
        }
        let best = gts.get(d.image).and_then(|image_gts| {
            image_gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !claimed[d.image][*j])
                .map(|(j, g)| (j, quad_iou(&d.quad, g).unwrap_or(0.0)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                })
        });
        match best {
            Some((j, v)) if v >= iou_threshold => {
                claimed[d.image][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let m: usize = gts.iter().map(Vec::len).sum();
    Prf::from_counts(tp, fp, m - tp)
}

/// Everything `eval` reports for one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Ground-truth plates (`M`).
    pub plates: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub c_recall: Option<f64>,
    pub quad50: Prf,
    pub quad75: Prf,
    pub vehicle_ap50: f64,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let mut s = String::new();
        s.push_str(&format!("images            {}\n", self.images));
        s.push_str(&format!("plates (M)        {}\n", self.plates));
        s.push_str(&format!("vehicle AP@0.5    {}\n", pct(self.vehicle_ap50)));
        s.push_str(&format!("plate AP@0.5      {}\n", pct(self.ap50)));
        s.push_str(&format!("plate AP@0.75     {}\n", pct(self.ap75)));
        s.push_str(&format!(
            "C_recall          {}\n",
            self.c_recall.map_or_else(|| "   n/a".to_string(), pct)
        ));
        s.push_str("quad     P      R      F     TP   FP   FN\n");
        for (name, q) in [("@0.5 ", &self.quad50), ("@0.75", &self.quad75)] {
            s.push_str(&format!(
                "{name}  {} {} {} {:4} {:4} {:4}\n",
                pct(q.precision),
                pct(q.recall),
                pct(q.f1),
                q.tp,
                q.fp,
                q.fn_
            ));
        }
        s
    }
}
