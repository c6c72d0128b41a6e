use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-finite coordinates {0:?}")]
    NonFinite([f64; 4]),
    #[error("box corners are inverted {0:?}")]
    Inverted([f64; 4]),
    #[error("box has negative width or height {0:?}")]
    NegativeExtent([f64; 4]),
    #[error("image size must be positive, got {width}x{height}")]
    InvalidImageSize { width: f64, height: f64 },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("annotation {annotation_id} refers to unknown category {category_id}")]
    UnknownCategory { annotation_id: u64, category_id: u64 },
    #[error("detection record {record} refers to unknown category {category_id}")]
    UnknownDetectionCategory { record: usize, category_id: u64 },
    #[error("image {image_id} has nonpositive size {width}x{height}")]
    InvalidImageSize { image_id: u64, width: f64, height: f64 },
    #[error("image {0} is listed more than once")]
    DuplicateImage(u64),
    #[error("category {0} is listed more than once")]
    DuplicateCategory(u64),
    #[error("{count} categories exceed the {max} object slots of the label space")]
    TooManyCategories { count: usize, max: usize },
    #[error("annotation {annotation_id} refers to unknown image {image_id}")]
    UnknownAnnotationImage { annotation_id: u64, image_id: u64 },
    #[error("{record}: invalid box: {source}")]
    InvalidBox {
        record: String,
        #[source]
        source: GeometryError,
    },
    #[error("detection record {record}: score {score} outside [0, 1]")]
    InvalidScore { record: usize, score: f64 },
    #[error("detections refer to unknown image ids {0:?}")]
    UnknownImages(Vec<u64>),
    #[error("downsampling factor must be at least 1")]
    InvalidFactor,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("target index {index} out of range for {len} detections")]
    TargetOutOfRange { index: usize, len: usize },
    #[error("{0} detections exceed the per-image cap")]
    TooManyDetections(usize),
    #[error("image has no detections")]
    Empty,
}

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: vector has length {found}, expected {expected}")]
    Length { line: usize, found: usize, expected: usize },
    #[error("line {line}: vector contains non-finite values")]
    NonFinite { line: usize },
    #[error("line {line}: detection_id must be an integer or \"global\"")]
    BadDetectionId { line: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint format version {found} is not supported (this build reads {supported})")]
    Version { found: u64, supported: u64 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint payload does not match its architecture: {0}")]
    Shape(String),
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("model expects image embeddings but none were found for image {image_id}, detection {detection_id}")]
    MissingEmbedding { image_id: u64, detection_id: u64 },
    #[error("no image metadata for image {0}")]
    UnknownImage(u64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction and truth sequences differ in length ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene model: {0}")]
    InvalidModel(String),
}
