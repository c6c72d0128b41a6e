//! Contextual re-scoring and relabeling of object detections.
//!
//! A detector's output for one image is turned into a set of pairwise
//! feature rows (one target against every other detection), a set network
//! maps that set to class probabilities, and an iterative update rewrites
//! each detection's label and score. COCO-style evaluation and a synthetic
//! scene generator are included for measuring the effect.

pub mod calibrator;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod geometry;
pub mod network;
pub mod persistence;
pub mod pipeline;
pub mod synth;

pub use calibrator::{
    calibrate_dataset, calibrate_image, CalibrationConfig, CalibrationMap, CalibrationOutput, ClassScorer,
};
pub use dataset::{
    CategoryMap, Detection, DetectionMap, GroundTruth, GroundTruthAnnotation, LabeledExample, BACKGROUND, NUM_CLASSES,
};
pub use error::*;
pub use evaluator::{classification_report, coco_ap, ApMetrics, ClassificationReport, EvalBox, EvalReport};
pub use features::{build_matrix, EmbeddingStore, FeatureMatrix, FEATURE_WIDTH, SUPPORT_ROWS};
pub use geometry::{BoundingBox, ImageMeta};
pub use network::{Architecture, ModelParameters, PoolMode, TrainConfig, TrainingSet, Variant};
