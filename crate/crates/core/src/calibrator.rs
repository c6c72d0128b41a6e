//! Iterative label and score update of a whole image's detections.
//!
//! Three passes run over the image. Passes 0 and 2 rescore every detection
//! as `p(best object class) × (1 − original background score)`, with
//! background left out of the max; pass 1 swaps a detection's label to that
//! best object class when its probability exceeds the threshold, and
//! restores the original label otherwise. Each pass rebuilds the features from the labels and scores
//! left by the previous one.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryMap, Detection, DetectionMap, DetectionRecord, GroundTruth, BACKGROUND, NUM_CLASSES};
use crate::error::{CalibrationError, DatasetError, NetworkError};
use crate::features::{build_matrix, EmbeddingStore, FeatureMatrix, ImageEmbedding};
use crate::geometry::ImageMeta;
use crate::network::{forward, ModelParameters};
use crate::persistence;

pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.98;
pub const CALIBRATION_PASSES: usize = 3;

/// Anything that maps a feature matrix to class probabilities.
pub trait ClassScorer: Sync {
    fn probabilities(
        &self,
        matrix: &FeatureMatrix,
        embedding: Option<&ImageEmbedding>,
    ) -> Result<Vec<f64>, NetworkError>;

    fn uses_embeddings(&self) -> bool {
        false
    }
}

impl ClassScorer for ModelParameters {
    fn probabilities(
        &self,
        matrix: &FeatureMatrix,
        embedding: Option<&ImageEmbedding>,
    ) -> Result<Vec<f64>, NetworkError> {
        forward(self, matrix, embedding).map(|o| o.probs)
    }

    fn uses_embeddings(&self) -> bool {
        self.architecture().embedding_dim > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub threshold: f64,
    /// Labels `>= num_labels` are never assigned (classes missing from the
    /// category map).
    pub num_labels: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_LABEL_THRESHOLD,
            num_labels: NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub detection_id: u64,
    pub label_pred: usize,
    pub score_pred: f64,
    pub label_swapped: bool,
    pub iterations_run: usize,
}

/// Damped score: the calibrated class probability scaled by the detector's
/// own non-background probability.
pub fn updated_score(class_probability: f64, original_bkg_score: f64) -> f64 {
    (class_probability * (1.0 - original_bkg_score)).clamp(0.0, 1.0)
}

/// Highest-probability class other than background; the lowest index wins
/// ties.
pub fn best_object_class(probs: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (c, &p) in probs.iter().enumerate().skip(BACKGROUND + 1) {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((c, p));
        }
    }
    best
}

/// The best object class if its probability strictly exceeds `threshold`,
/// otherwise `original`. Background is never chosen.
pub fn updated_label(probs: &[f64], original: usize, threshold: f64) -> usize {
    match best_object_class(probs) {
        Some((c, p)) if p > threshold => c,
        _ => original,
    }
}

fn image_probabilities<S: ClassScorer + ?Sized>(
    scorer: &S,
    current: &[Detection],
    img: &ImageMeta,
    embeddings: &[Option<ImageEmbedding>],
) -> Result<Vec<Vec<f64>>, CalibrationError> {
    (0..current.len())
        .map(|t| {
            let m = build_matrix(current, t, img)?;
            Ok(scorer.probabilities(&m, embeddings[t].as_ref())?)
        })
        .collect()
}

pub fn calibrate_image<S: ClassScorer + ?Sized>(
    scorer: &S,
    detections: &[Detection],
    img: &ImageMeta,
    embeddings: Option<&EmbeddingStore>,
    config: &CalibrationConfig,
) -> Result<Vec<CalibrationOutput>, CalibrationError> {
    let per_target: Vec<Option<ImageEmbedding>> = if scorer.uses_embeddings() {
        detections
            .iter()
            .map(|d| {
                embeddings
                    .and_then(|s| s.get(d.image_id, d.detection_id))
                    .map(Some)
                    .ok_or(CalibrationError::MissingEmbedding {
                        image_id: d.image_id,
                        detection_id: d.detection_id,
                    })
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![None; detections.len()]
    };

    let mut current = detections.to_vec();
    for pass in 0..CALIBRATION_PASSES {
        let probs = image_probabilities(scorer, &current, img, &per_target)?;
        for ((cur, orig), p) in current.iter_mut().zip(detections).zip(&probs) {
            let candidates = &p[..config.num_labels.min(p.len())];
            if pass == 1 {
                cur.label = updated_label(candidates, orig.label, config.threshold);
            } else {
                let best = best_object_class(candidates).map_or(0.0, |(_, q)| q);
                cur.score = updated_score(best, orig.bkg_score);
            }
        }
    }
    Ok(current
        .iter()
        .zip(detections)
        .map(|(cur, orig)| CalibrationOutput {
            detection_id: orig.detection_id,
            label_pred: cur.label,
            score_pred: cur.score,
            label_swapped: cur.label != orig.label,
            iterations_run: CALIBRATION_PASSES,
        })
        .collect())
}

pub type CalibrationMap = BTreeMap<u64, Vec<CalibrationOutput>>;

/// Calibrates every image independently (in parallel); output is keyed and
/// ordered like the input.
pub fn calibrate_dataset<S: ClassScorer + ?Sized>(
    scorer: &S,
    detections: &DetectionMap,
    gt: &GroundTruth,
    embeddings: Option<&EmbeddingStore>,
    config: &CalibrationConfig,
) -> Result<CalibrationMap, CalibrationError> {
    let config = &CalibrationConfig {
        num_labels: config.num_labels.min(gt.categories.num_labels()),
        ..*config
    };
    let entries: Vec<(&u64, &Vec<Detection>)> = detections.iter().collect();
    let results: Vec<Result<(u64, Vec<CalibrationOutput>), CalibrationError>> = entries
        .par_iter()
        .map(|&(&image_id, dets)| {
            if dets.is_empty() {
                return Ok((image_id, Vec::new()));
            }
            let img = gt.meta(image_id).ok_or(CalibrationError::UnknownImage(image_id))?;
            Ok((image_id, calibrate_image(scorer, dets, img, embeddings, config)?))
        })
        .collect();
    results.into_iter().collect()
}

/// Detections with calibrated labels and scores; geometry untouched.
pub fn apply_calibration(detections: &DetectionMap, calibrated: &CalibrationMap) -> DetectionMap {
    detections
        .iter()
        .map(|(&id, dets)| {
            let outs = &calibrated[&id];
            let updated = dets
                .iter()
                .zip(outs)
                .map(|(d, o)| Detection {
                    label: o.label_pred,
                    score: o.score_pred,
                    ..d.clone()
                })
                .collect();
            (id, updated)
        })
        .collect()
}

/// COCO results records of the calibrated detections.
pub fn calibrated_records(
    detections: &DetectionMap,
    calibrated: &CalibrationMap,
    categories: &CategoryMap,
) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for (id, dets) in detections {
        for (d, o) in dets.iter().zip(&calibrated[id]) {
            out.push(DetectionRecord {
                image_id: d.image_id,
                category_id: categories
                    .coco_id_of(o.label_pred)
                    .expect("calibrated labels are object classes"),
                bbox: d.xywh,
                score: o.score_pred,
                bkg_score: None,
                id: Some(d.detection_id),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub image_id: u64,
    pub detection_id: u64,
    pub original_category_id: u64,
    pub category_id: u64,
    pub original_score: f64,
    pub score: f64,
    pub label_swapped: bool,
    pub iterations_run: usize,
}

pub fn write_provenance(
    path: &Path,
    detections: &DetectionMap,
    calibrated: &CalibrationMap,
    categories: &CategoryMap,
) -> Result<(), DatasetError> {
    let mut text = String::new();
    for (id, dets) in detections {
        for (d, o) in dets.iter().zip(&calibrated[id]) {
            let rec = ProvenanceRecord {
                image_id: d.image_id,
                detection_id: d.detection_id,
                original_category_id: categories.coco_id_of(d.label).unwrap_or(0),
                category_id: categories.coco_id_of(o.label_pred).unwrap_or(0),
                original_score: d.score,
                score: o.score_pred,
                label_swapped: o.label_swapped,
                iterations_run: o.iterations_run,
            };
            text.push_str(&serde_json::to_string(&rec).expect("plain struct serializes"));
            text.push('\n');
        }
    }
    persistence::write_bytes_atomic(path, text.as_bytes()).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}
