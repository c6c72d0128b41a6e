//! Classification precision/recall/F1 and COCO-style detection AP.
//!
//! AP follows the COCO evaluation conventions: per class and IoU threshold,
//! detections are matched greedily in descending score order to the
//! best still-unmatched ground truth; precision is made monotone and sampled
//! at 101 recall points. Crowd regions are not supported.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{assign_image_labels, CategoryMap, DetectionMap, GroundTruth, MAX_DETECTIONS};
use crate::error::EvalError;
use crate::geometry::{iou, BoundingBox};

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of truth labels of this class.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// One-vs-rest metrics for each label in `0..num_classes`, and their
/// unweighted mean. Classes that never occur score 0 and still count in the
/// mean.
pub fn classification_report(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<ClassificationReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut tp = vec![0usize; num_classes];
    let mut n_pred = vec![0usize; num_classes];
    let mut n_true = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(EvalError::Label { label, num_classes });
            }
        }
        n_pred[p] += 1;
        n_true[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let precision = ratio(tp[c], n_pred[c]);
            let recall = ratio(tp[c], n_true[c]);
            ClassMetrics {
                label: c,
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: n_true[c],
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if num_classes == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / num_classes as f64
        }
    };
    Ok(ClassificationReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    })
}

/// Predicted detection labels paired with their IoU-matched truth labels
/// (background when unmatched), image by image.
pub fn detection_label_pairs(detections: &DetectionMap, gt: &GroundTruth) -> (Vec<usize>, Vec<usize>) {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (&id, dets) in detections {
        pred.extend(dets.iter().map(|d| d.label));
        truth.extend(assign_image_labels(dets, gt.annotations(id)));
    }
    (pred, truth)
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// A box to evaluate: either a detection (with score) or a ground truth
/// (score ignored).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBox {
    pub image_id: u64,
    pub label: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

pub const RECALL_POINTS: usize = 101;

/// The ten thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn bounds(self) -> (f64, f64) {
        const S: f64 = 32.0 * 32.0;
        const M: f64 = 96.0 * 96.0;
        const MAX: f64 = 1e10;
        match self {
            Self::All => (0.0, MAX),
            Self::Small => (0.0, S),
            Self::Medium => (S, M),
            Self::Large => (M, MAX),
        }
    }

    fn excludes(self, area: f64) -> bool {
        let (lo, hi) = self.bounds();
        area < lo || area > hi
    }
}

/// The six headline detection metrics, each in `[0, 1]`; `None` when no
/// class has ground truth in the relevant size range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    #[serde(rename = "APs")]
    pub ap_small: Option<f64>,
    #[serde(rename = "APm")]
    pub ap_medium: Option<f64>,
    #[serde(rename = "APl")]
    pub ap_large: Option<f64>,
}

/// Area under the 101-point interpolated precision/recall curve.
///
/// `hits` holds the match outcome of every scored (non-ignored) detection in
/// descending score order; `n_gt` is the number of non-ignored ground truths.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    assert!(n_gt > 0);
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &h in hits {
        if h {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let threshold = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&rc| rc < threshold);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per (image, class) matching input: boxes and their pairwise IoUs.
struct Cell<'a> {
    dets: Vec<&'a EvalBox>,
    gts: Vec<&'a EvalBox>,
    /// `ious[d][g]`
    ious: Vec<Vec<f64>>,
}

/// Evaluation of one (image, class) cell at one threshold and area range:
/// the scores and outcomes of non-ignored detections, and the number of
/// non-ignored ground truths.
fn match_cell(cell: &Cell, threshold: f64, area: AreaRange) -> (Vec<(f64, bool)>, usize) {
    let gt_ignore: Vec<bool> = cell.gts.iter().map(|g| area.excludes(g.bbox.area())).collect();
    // non-ignored ground truths first, stable
    let mut gt_order: Vec<usize> = (0..cell.gts.len()).collect();
    gt_order.sort_by_key(|&g| gt_ignore[g]);
    let mut gt_taken = vec![false; cell.gts.len()];

    let mut scored = Vec::new();
    for (d, det) in cell.dets.iter().enumerate() {
        let mut best_iou = threshold.min(1.0 - 1e-10);
        let mut matched: Option<usize> = None;
        for &g in &gt_order {
            if gt_taken[g] {
                continue;
            }
            if let Some(m) = matched {
                if !gt_ignore[m] && gt_ignore[g] {
                    break;
                }
            }
            if cell.ious[d][g] < best_iou {
                continue;
            }
            best_iou = cell.ious[d][g];
            matched = Some(g);
        }
        let ignored = match matched {
            Some(g) => {
                gt_taken[g] = true;
                gt_ignore[g]
            }
            None => area.excludes(det.bbox.area()),
        };
        if !ignored {
            scored.push((det.score, matched.is_some()));
        }
    }
    let n_gt = gt_ignore.iter().filter(|&&i| !i).count();
    (scored, n_gt)
}

/// Precomputed matching cells, keyed by class then image.
pub struct ApEvaluator<'a> {
    cells: BTreeMap<usize, Vec<Cell<'a>>>,
}

impl<'a> ApEvaluator<'a> {
    pub fn new(results: &'a [EvalBox], gts: &'a [EvalBox]) -> Self {
        type Boxes<'b> = Vec<&'b EvalBox>;
        let mut grouped: BTreeMap<(usize, u64), (Boxes, Boxes)> = BTreeMap::new();
        for d in results {
            grouped.entry((d.label, d.image_id)).or_default().0.push(d);
        }
        for g in gts {
            grouped.entry((g.label, g.image_id)).or_default().1.push(g);
        }
        let mut cells: BTreeMap<usize, Vec<Cell>> = BTreeMap::new();
        for ((label, _), (mut dets, gts)) in grouped {
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(MAX_DETECTIONS);
            let ious = dets
                .iter()
                .map(|d| gts.iter().map(|g| iou(&d.bbox, &g.bbox)).collect())
                .collect();
            cells.entry(label).or_default().push(Cell { dets, gts, ious });
        }
        Self { cells }
    }

    /// AP of one class; `None` without ground truth in range.
    pub fn class_ap(&self, label: usize, threshold: f64, area: AreaRange) -> Option<f64> {
        let cells = self.cells.get(&label)?;
        let mut scored = Vec::new();
        let mut n_gt = 0;
        for cell in cells {
            let (s, n) = match_cell(cell, threshold, area);
            scored.extend(s);
            n_gt += n;
        }
        if n_gt == 0 {
            return None;
        }
        // stable: equal scores keep image order
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let hits: Vec<bool> = scored.into_iter().map(|(_, h)| h).collect();
        Some(interpolated_ap(&hits, n_gt))
    }

    /// Mean AP over classes with ground truth, at one threshold.
    pub fn mean_ap(&self, threshold: f64, area: AreaRange) -> Option<f64> {
        let aps: Vec<f64> = self
            .cells
            .keys()
            .filter_map(|&c| self.class_ap(c, threshold, area))
            .collect();
        if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }

    /// Mean AP at each of the ten IoU thresholds.
    pub fn ap_by_threshold(&self, area: AreaRange) -> [Option<f64>; 10] {
        iou_thresholds().map(|t| self.mean_ap(t, area))
    }

    fn averaged(&self, area: AreaRange) -> Option<f64> {
        let per: Vec<f64> = self.ap_by_threshold(area).into_iter().flatten().collect();
        if per.is_empty() {
            None
        } else {
            Some(per.iter().sum::<f64>() / per.len() as f64)
        }
    }

    pub fn metrics(&self) -> ApMetrics {
        ApMetrics {
            ap: self.averaged(AreaRange::All),
            ap50: self.mean_ap(0.5, AreaRange::All),
            ap75: self.mean_ap(0.75, AreaRange::All),
            ap_small: self.averaged(AreaRange::Small),
            ap_medium: self.averaged(AreaRange::Medium),
            ap_large: self.averaged(AreaRange::Large),
        }
    }
}

pub fn coco_ap(results: &[EvalBox], gts: &[EvalBox]) -> ApMetrics {
    ApEvaluator::new(results, gts).metrics()
}

pub fn detection_boxes(detections: &DetectionMap) -> Vec<EvalBox> {
    detections
        .values()
        .flatten()
        .map(|d| EvalBox {
            image_id: d.image_id,
            label: d.label,
            bbox: d.bbox,
            score: d.score,
        })
        .collect()
}

pub fn ground_truth_boxes(gt: &GroundTruth) -> Vec<EvalBox> {
    gt.images
        .values()
        .flat_map(|img| &img.annotations)
        .map(|a| EvalBox {
            image_id: a.image_id,
            label: a.label,
            bbox: a.bbox,
            score: 1.0,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Serialized inline, so a report without classification has exactly
    /// the six AP keys.
    #[serde(flatten)]
    pub detection: ApMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
}

pub fn evaluate(detections: &DetectionMap, gt: &GroundTruth, with_classification: bool) -> EvalReport {
    let results = detection_boxes(detections);
    let gts = ground_truth_boxes(gt);
    let classification = with_classification.then(|| {
        let (pred, truth) = detection_label_pairs(detections, gt);
        classification_report(&pred, &truth, gt.categories.num_labels()).expect("labels come from the category map")
    });
    EvalReport {
        detection: coco_ap(&results, &gts),
        classification,
    }
}

impl EvalReport {
    /// Plain-text rendering: the AP row (×100), then per-class P/R/F1.
    pub fn to_table(&self, categories: Option<&CategoryMap>) -> String {
        let mut out = String::new();
        let d = &self.detection;
        let cells = [d.ap, d.ap50, d.ap75, d.ap_small, d.ap_medium, d.ap_large];
        let _ = writeln!(
            out,
            "{:>8}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "AP", "AP50", "AP75", "APs", "APm", "APl"
        );
        for v in cells {
            match v {
                Some(v) => {
                    let _ = write!(out, "{:>8.1}", 100.0 * v);
                }
                None => {
                    let _ = write!(out, "{:>8}", "-");
                }
            }
        }
        out.push('\n');
        if let Some(c) = &self.classification {
            out.push('\n');
            let _ = writeln!(
                out,
                "{:<20}{:>10}{:>10}{:>10}{:>9}",
                "class", "precision", "recall", "f1-score", "support"
            );
            for m in &c.per_class {
                let name = categories
                    .and_then(|cm| cm.name_of(m.label))
                    .map(str::to_string)
                    .unwrap_or_else(|| m.label.to_string());
                let _ = writeln!(
                    out,
                    "{:<20}{:>10.2}{:>10.2}{:>10.2}{:>9}",
                    name, m.precision, m.recall, m.f1, m.support
                );
            }
            let _ = writeln!(
                out,
                "{:<20}{:>10.2}{:>10.2}{:>10.2}",
                "macro avg", c.macro_precision, c.macro_recall, c.macro_f1
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::from_xywh(x, y, w, h).unwrap()
    }

    fn eb(image_id: u64, label: usize, bbox: BoundingBox, score: f64) -> EvalBox {
        EvalBox {
            image_id,
            label,
            bbox,
            score,
        }
    }

    #[test]
    fn classification_examples() {
        let r = classification_report(&[1, 2, 0], &[1, 2, 0], 3).unwrap();
        assert!(r
            .per_class
            .iter()
            .all(|m| (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)));

        let r = classification_report(&[1, 2, 2], &[1, 1, 2], 4).unwrap();
        let (c1, c2) = (r.per_class[1], r.per_class[2]);
        assert_eq!((c1.precision, c1.recall), (1.0, 0.5));
        assert_eq!((c2.precision, c2.recall), (0.5, 1.0));
        assert!((c1.f1 - 2.0 / 3.0).abs() < 1e-15 && (c2.f1 - 2.0 / 3.0).abs() < 1e-15);
        // classes 0 and 3 never occur: counted as zero in the mean
        assert_eq!(r.per_class[0].f1, 0.0);
        assert!((r.macro_f1 - (4.0 / 3.0) / 4.0).abs() < 1e-15);

        assert!(matches!(
            classification_report(&[1], &[1, 2], 3),
            Err(EvalError::LengthMismatch { pred: 1, truth: 2 })
        ));
        assert!(matches!(
            classification_report(&[5], &[1], 3),
            Err(EvalError::Label { label: 5, .. })
        ));
    }

    #[test]
    fn perfect_detection() {
        let g = b(10.0, 10.0, 50.0, 50.0);
        let m = coco_ap(&[eb(1, 1, g, 0.9)], &[eb(1, 1, g, 1.0)]);
        assert_eq!(m.ap, Some(1.0));
        assert_eq!(m.ap50, Some(1.0));
        assert_eq!(m.ap75, Some(1.0));
        assert_eq!(m.ap_medium, Some(1.0));
        assert_eq!(m.ap_small, None);
        assert_eq!(m.ap_large, None);
    }

    #[test]
    fn threshold_straddling_detection() {
        // IoU = 60 / 100 = 0.6
        let g = b(0.0, 0.0, 10.0, 10.0);
        let d = b(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&g, &d) - 0.6).abs() < 1e-12);
        let ev_r = [eb(1, 1, d, 0.9)];
        let ev_g = [eb(1, 1, g, 1.0)];
        let ev = ApEvaluator::new(&ev_r, &ev_g);
        assert_eq!(ev.mean_ap(0.5, AreaRange::All), Some(1.0));
        assert_eq!(ev.mean_ap(0.75, AreaRange::All), Some(0.0));
        // matches at 0.50, 0.55 and 0.60 (inclusive)
        let m = ev.metrics();
        assert!((m.ap.unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn duplicates_count_once() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let res = [eb(1, 1, g, 0.9), eb(1, 1, g, 0.8), eb(1, 1, g, 0.7)];
        let gts = [eb(1, 1, g, 1.0)];
        let ev = ApEvaluator::new(&res, &gts);
        let cell = &ev.cells[&1][0];
        let (scored, n) = match_cell(cell, 0.5, AreaRange::All);
        assert_eq!(n, 1);
        assert_eq!(scored.iter().filter(|(_, h)| *h).count(), 1);
        assert_eq!(scored.len(), 3);
        // the top-scored duplicate is the hit, so AP stays 1
        assert_eq!(ev.mean_ap(0.5, AreaRange::All), Some(1.0));
    }

    #[test]
    fn interpolation_hand_case() {
        // TP, FP, TP over 3 ground truths: precision envelope 1 up to recall
        // 1/3 (34 points), 2/3 up to recall 2/3 (33 points), then 0.
        let ap = interpolated_ap(&[true, false, true], 3);
        assert!((ap - 56.0 / 101.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[], 2), 0.0);
    }

    #[test]
    fn class_with_no_ground_truth_is_skipped() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let res = [eb(1, 1, g, 0.9), eb(1, 2, g, 0.9)];
        let gts = [eb(1, 1, g, 1.0)];
        assert_eq!(coco_ap(&res, &gts).ap50, Some(1.0));
        assert_eq!(coco_ap(&res, &[]).ap, None);
    }

    #[test]
    fn size_bucket_ignores_out_of_range_boxes() {
        let small_g = b(0.0, 0.0, 10.0, 10.0);
        let large_g = b(100.0, 100.0, 200.0, 200.0);
        // an unmatched large false positive is ignored for the small bucket
        let fp = b(400.0, 400.0, 150.0, 150.0);
        let res = [eb(1, 1, fp, 0.95), eb(1, 1, small_g, 0.9), eb(1, 1, large_g, 0.8)];
        let gts = [eb(1, 1, small_g, 1.0), eb(1, 1, large_g, 1.0)];
        let ev = ApEvaluator::new(&res, &gts);
        assert_eq!(ev.mean_ap(0.5, AreaRange::Small), Some(1.0));
        assert!(ev.mean_ap(0.5, AreaRange::Large).unwrap() < 1.0);
        assert!(ev.mean_ap(0.5, AreaRange::All).unwrap() < 1.0);
    }

    #[test]
    fn report_json_fields() {
        let g = b(10.0, 10.0, 50.0, 50.0);
        let m = coco_ap(&[eb(1, 1, g, 0.9)], &[eb(1, 1, g, 1.0)]);
        let v = serde_json::to_value(m).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["AP", "AP50", "AP75", "APl", "APm", "APs"]);
        let report = EvalReport {
            detection: m,
            classification: None,
        };
        let v = serde_json::to_value(&report).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 6);
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, report);
        assert!(report.to_table(None).contains("100.0"));
    }
}
