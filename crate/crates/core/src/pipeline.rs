//! Glue between loaded datasets, training and evaluation.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrator::{apply_calibration, calibrate_dataset, CalibrationConfig, CalibrationMap, ClassScorer};
use crate::dataset::{assign_truth_labels, downsample_background, DetectionMap, GroundTruth, LabeledExample};
use crate::error::{CalibrationError, DatasetError, FeatureError, NetworkError};
use crate::evaluator::{classification_report, evaluate, EvalReport};
use crate::features::{build_matrix, EmbeddingStore, SUPPORT_ROWS};
use crate::network::{predict_all, train, Architecture, ModelParameters, TrainConfig, TrainExample, TrainingSet};

/// Truth-labeled examples with background downsampled.
pub fn training_examples(
    detections: &DetectionMap,
    gt: &GroundTruth,
    downsample_factor: u32,
    seed: u64,
) -> Result<Vec<LabeledExample>, DatasetError> {
    downsample_background(&assign_truth_labels(detections, gt), downsample_factor, seed)
}

/// Training examples whose feature matrices are built when requested.
pub struct SceneTrainingSet<'a> {
    detections: &'a DetectionMap,
    gt: &'a GroundTruth,
    embeddings: Option<&'a EmbeddingStore>,
    examples: Vec<LabeledExample>,
}

impl<'a> SceneTrainingSet<'a> {
    /// Checks up front that every example can be built, so later lookups
    /// cannot fail.
    pub fn new(
        detections: &'a DetectionMap,
        gt: &'a GroundTruth,
        embeddings: Option<&'a EmbeddingStore>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self, CalibrationError> {
        for e in &examples {
            gt.meta(e.image_id).ok_or(CalibrationError::UnknownImage(e.image_id))?;
            let dets = detections
                .get(&e.image_id)
                .ok_or(CalibrationError::UnknownImage(e.image_id))?;
            if e.target_index >= dets.len() {
                return Err(FeatureError::TargetOutOfRange {
                    index: e.target_index,
                    len: dets.len(),
                }
                .into());
            }
            if dets.len() > SUPPORT_ROWS + 1 {
                return Err(FeatureError::TooManyDetections(dets.len()).into());
            }
            if let Some(store) = embeddings {
                let id = dets[e.target_index].detection_id;
                store.get(e.image_id, id).ok_or(CalibrationError::MissingEmbedding {
                    image_id: e.image_id,
                    detection_id: id,
                })?;
            }
        }
        Ok(Self {
            detections,
            gt,
            embeddings,
            examples,
        })
    }

    pub fn labeled(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.truth_label).collect()
    }
}

impl TrainingSet for SceneTrainingSet<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn example(&self, index: usize) -> Cow<'_, TrainExample> {
        let e = &self.examples[index];
        let dets = &self.detections[&e.image_id];
        let img = self.gt.meta(e.image_id).expect("checked in new");
        let matrix = build_matrix(dets, e.target_index, img).expect("checked in new");
        let embedding = self
            .embeddings
            .and_then(|s| s.get(e.image_id, dets[e.target_index].detection_id));
        Cow::Owned(TrainExample {
            matrix,
            embedding,
            label: e.truth_label,
        })
    }
}

/// Per-example macro F1 of the network's argmax against truth labels.
pub fn example_f1<T: TrainingSet + ?Sized>(
    params: &ModelParameters,
    data: &T,
    truth: &[usize],
    num_labels: usize,
) -> Result<f64, NetworkError> {
    let pred: Vec<usize> = predict_all(params, data)?
        .into_iter()
        .map(|p| p.min(num_labels.saturating_sub(1)))
        .collect();
    Ok(classification_report(&pred, truth, num_labels)
        .map_err(|e| NetworkError::Shape(e.to_string()))?
        .macro_f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub architecture: Architecture,
    pub config: TrainConfig,
    pub examples: usize,
    pub epoch_losses: Vec<f64>,
    pub train_f1: f64,
    pub val_f1: Option<f64>,
}

/// Initializes from `config.seed`, trains, and scores the result.
pub fn fit<T: TrainingSet + ?Sized, V: TrainingSet + ?Sized>(
    arch: Architecture,
    config: &TrainConfig,
    train_set: &T,
    train_truth: &[usize],
    val: Option<(&V, &[usize])>,
    num_labels: usize,
) -> Result<(ModelParameters, TrainingLog), NetworkError> {
    let init = ModelParameters::init(arch.clone(), config.seed)?;
    let outcome = train(init, train_set, config)?;
    let train_f1 = example_f1(&outcome.params, train_set, train_truth, num_labels)?;
    let val_f1 = val
        .map(|(v, truth)| example_f1(&outcome.params, v, truth, num_labels))
        .transpose()?;
    let log = TrainingLog {
        architecture: arch,
        config: config.clone(),
        examples: train_set.len(),
        epoch_losses: outcome.epoch_losses,
        train_f1,
        val_f1,
    };
    Ok((outcome.params, log))
}

/// Detection-level reports before and after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: EvalReport,
    pub calibrated: EvalReport,
    pub labels_swapped: usize,
}

pub fn compare<S: ClassScorer + ?Sized>(
    scorer: &S,
    detections: &DetectionMap,
    gt: &GroundTruth,
    embeddings: Option<&EmbeddingStore>,
    config: &CalibrationConfig,
) -> Result<(Comparison, CalibrationMap), CalibrationError> {
    let calibration = calibrate_dataset(scorer, detections, gt, embeddings, config)?;
    let calibrated = apply_calibration(detections, &calibration);
    let labels_swapped = calibration.values().flatten().filter(|c| c.label_swapped).count();
    Ok((
        Comparison {
            baseline: evaluate(detections, gt, true),
            calibrated: evaluate(&calibrated, gt, true),
            labels_swapped,
        },
        calibration,
    ))
}

/// Splits images by id: the first `n_train` ids (in ascending order) train,
/// the rest validate.
pub fn split_by_image(
    gt: &GroundTruth,
    detections: &DetectionMap,
    n_train: usize,
) -> ((GroundTruth, DetectionMap), (GroundTruth, DetectionMap)) {
    let part = |range: &mut dyn Iterator<Item = &u64>| {
        let ids: Vec<u64> = range.copied().collect();
        let mut sub = GroundTruth {
            categories: gt.categories.clone(),
            images: BTreeMap::new(),
            warnings: Vec::new(),
        };
        let mut dets = DetectionMap::new();
        for id in ids {
            sub.images.insert(id, gt.images[&id].clone());
            if let Some(d) = detections.get(&id) {
                dets.insert(id, d.clone());
            }
        }
        (sub, dets)
    };
    let train = part(&mut gt.images.keys().take(n_train));
    let val = part(&mut gt.images.keys().skip(n_train));
    (train, val)
}
