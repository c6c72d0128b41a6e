//! Per-pair contextual features between a target detection and each of its
//! support detections, stacked into a fixed-height matrix.
//!
//! Every value of a valid row is normalized into `[0, 1]`:
//! coordinates by the image width/height, areas by the image area, distance
//! by the image diagonal, the angle affinely from `(-π, π]` to `(0, 1]` and
//! class counts by the per-image detection cap.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, MAX_DETECTIONS, NUM_CLASSES};
use crate::error::{EmbeddingError, FeatureError};
use crate::geometry::{distance_angle, edge_flags, overlap_ratios, ImageMeta, DEFAULT_EDGE_TOLERANCE};

/// Rows of the matrix: every detection except the target.
pub const SUPPORT_ROWS: usize = MAX_DETECTIONS - 1;
/// Features per (target, support) pair.
pub const FEATURE_WIDTH: usize = 357;

const GROUPS: [(&str, usize, &str); 9] = [
    (
        "positions",
        12,
        "x/y of min, max and center corners of target then support, over image width/height",
    ),
    (
        "areas",
        3,
        "target and support area over image area, then area_t / (area_t + area_s)",
    ),
    (
        "distance_angle",
        2,
        "center distance over image diagonal, (angle + pi) / (2 pi)",
    ),
    (
        "overlaps",
        3,
        "iou, intersection over target area, intersection over support area",
    ),
    (
        "class_counts",
        2 * NUM_CLASSES,
        "per-class support count then per-class overlapping support count, over 100",
    ),
    ("scores", 2, "target then support confidence"),
    (
        "labels",
        2 * NUM_CLASSES,
        "one-hot target label then one-hot support label",
    ),
    ("aspects", 3, "w / (w + h) of target, support and image"),
    (
        "edges",
        8,
        "left, right, top, bottom border flags of target then support",
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub offset: usize,
    pub width: usize,
    pub source: String,
}

/// Column layout of a feature row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub version: u32,
    pub total_width: usize,
    pub groups: Vec<FeatureGroup>,
}

pub fn feature_layout() -> FeatureLayout {
    let mut offset = 0;
    let groups = GROUPS
        .iter()
        .map(|&(name, width, source)| {
            let g = FeatureGroup {
                name: name.to_string(),
                offset,
                width,
                source: source.to_string(),
            };
            offset += width;
            g
        })
        .collect();
    FeatureLayout {
        version: 1,
        total_width: offset,
        groups,
    }
}

/// A target's support rows. Only the valid rows are stored; rows
/// `valid_rows..rows` are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    width: usize,
    valid_rows: usize,
    target_index: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    /// Assembles a matrix from row-major valid-row data.
    pub fn from_valid_rows(
        rows: usize,
        width: usize,
        target_index: usize,
        values: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        assert!(width > 0, "feature width must be positive");
        assert_eq!(values.len() % width, 0, "row data is not a whole number of rows");
        let valid_rows = values.len() / width;
        if valid_rows > rows {
            return Err(FeatureError::TooManyDetections(valid_rows + 1));
        }
        Ok(Self {
            rows,
            width,
            valid_rows,
            target_index,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    /// Row-major data of the valid rows.
    pub fn valid_data(&self) -> &[f64] {
        &self.values
    }

    /// One valid row. Panics for padding rows.
    pub fn row(&self, r: usize) -> &[f64] {
        assert!(r < self.valid_rows, "row {r} is padding");
        &self.values[r * self.width..(r + 1) * self.width]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.width);
        if r < self.valid_rows {
            self.values[r * self.width + c]
        } else {
            0.0
        }
    }

    /// The full `rows × width` matrix, padding included.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = self.values.clone();
        out.resize(self.rows * self.width, 0.0);
        out
    }

    /// Same valid rows, different number of padding rows.
    pub fn with_rows(&self, rows: usize) -> Result<Self, FeatureError> {
        Self::from_valid_rows(rows, self.width, self.target_index, self.values.clone())
    }

    /// Reorders the valid rows: new row `i` is old row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.valid_rows);
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(self.row(p));
        }
        Self { values, ..self.clone() }
    }
}

/// Per-class counts of support boxes, and of support boxes that overlap the
/// target with positive intersection area.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts {
    pub support: [u32; NUM_CLASSES],
    pub overlap: [u32; NUM_CLASSES],
}

pub fn per_image_counts(detections: &[Detection], target_index: usize) -> ClassCounts {
    let target = &detections[target_index];
    let mut counts = ClassCounts {
        support: [0; NUM_CLASSES],
        overlap: [0; NUM_CLASSES],
    };
    for (i, d) in detections.iter().enumerate() {
        if i == target_index {
            continue;
        }
        counts.support[d.label] += 1;
        if target.bbox.intersection_area(&d.bbox) > 0.0 {
            counts.overlap[d.label] += 1;
        }
    }
    counts
}

fn unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Writes the [`FEATURE_WIDTH`] features of one (target, support) pair.
pub fn write_pair_features(
    target: &Detection,
    support: &Detection,
    img: &ImageMeta,
    counts: &ClassCounts,
    out: &mut [f64],
) {
    assert_eq!(out.len(), FEATURE_WIDTH);
    let mut k = 0;
    let mut push = |v: f64| {
        out[k] = v;
        k += 1;
    };

    for d in [target, support] {
        let b = &d.bbox;
        let (cx, cy) = b.center();
        push(unit(b.x_min / img.width));
        push(unit(b.y_min / img.height));
        push(unit(b.x_max / img.width));
        push(unit(b.y_max / img.height));
        push(unit(cx / img.width));
        push(unit(cy / img.height));
    }

    let (at, asup) = (target.bbox.area(), support.bbox.area());
    push(unit(at / img.area()));
    push(unit(asup / img.area()));
    push(if at + asup > 0.0 { at / (at + asup) } else { 0.5 });

    let (dist, angle) = distance_angle(&target.bbox, &support.bbox);
    push(unit(dist / img.diagonal()));
    push(unit((angle + PI) / (2.0 * PI)));

    let ov = overlap_ratios(&target.bbox, &support.bbox);
    push(ov.iou);
    push(ov.inter_over_a);
    push(ov.inter_over_b);

    let cap = MAX_DETECTIONS as f64;
    for &n in counts.support.iter().chain(counts.overlap.iter()) {
        push(unit(f64::from(n) / cap));
    }

    push(unit(target.score));
    push(unit(support.score));

    for d in [target, support] {
        for c in 0..NUM_CLASSES {
            push(if c == d.label { 1.0 } else { 0.0 });
        }
    }

    push(target.bbox.aspect());
    push(support.bbox.aspect());
    push(img.aspect());

    for d in [target, support] {
        for flag in edge_flags(&d.bbox, img, DEFAULT_EDGE_TOLERANCE).as_array() {
            push(if flag { 1.0 } else { 0.0 });
        }
    }
    debug_assert_eq!(k, FEATURE_WIDTH);
}

pub fn pair_features(target: &Detection, support: &Detection, img: &ImageMeta, counts: &ClassCounts) -> Vec<f64> {
    let mut out = vec![0.0; FEATURE_WIDTH];
    write_pair_features(target, support, img, counts, &mut out);
    out
}

/// Builds the matrix for `detections[target_index]`: one row per other
/// detection in list order, zero-padded to [`SUPPORT_ROWS`].
pub fn build_matrix(
    detections: &[Detection],
    target_index: usize,
    img: &ImageMeta,
) -> Result<FeatureMatrix, FeatureError> {
    if detections.is_empty() {
        return Err(FeatureError::Empty);
    }
    if detections.len() > MAX_DETECTIONS {
        return Err(FeatureError::TooManyDetections(detections.len()));
    }
    if target_index >= detections.len() {
        return Err(FeatureError::TargetOutOfRange {
            index: target_index,
            len: detections.len(),
        });
    }
    let target = &detections[target_index];
    let counts = per_image_counts(detections, target_index);
    let mut values = vec![0.0; (detections.len() - 1) * FEATURE_WIDTH];
    let supports = detections
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_index)
        .map(|(_, d)| d);
    for (row, support) in values.chunks_exact_mut(FEATURE_WIDTH).zip(supports) {
        write_pair_features(target, support, img, &counts, row);
    }
    FeatureMatrix::from_valid_rows(SUPPORT_ROWS, FEATURE_WIDTH, target_index, values)
}

// ---------------------------------------------------------------------------
// Externally supplied image embeddings
// ---------------------------------------------------------------------------

pub const DEFAULT_EMBEDDING_DIM: usize = 2048;

/// Global-image and cropped-target vectors that bypass the feature stage and
/// join the pooled features at the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub global_vec: Vec<f64>,
    pub target_vec: Vec<f64>,
}

impl ImageEmbedding {
    pub fn dim(&self) -> usize {
        self.global_vec.len()
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingLine {
    image_id: u64,
    detection_id: serde_json::Value,
    vector: Vec<f64>,
}

/// Embeddings keyed by image (global) and by (image, detection id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    global: HashMap<u64, Vec<f64>>,
    targets: HashMap<(u64, u64), Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert_global(&mut self, image_id: u64, v: Vec<f64>) {
        assert_eq!(v.len(), self.dim);
        self.global.insert(image_id, v);
    }

    pub fn insert_target(&mut self, image_id: u64, detection_id: u64, v: Vec<f64>) {
        assert_eq!(v.len(), self.dim);
        self.targets.insert((image_id, detection_id), v);
    }

    pub fn get(&self, image_id: u64, detection_id: u64) -> Option<ImageEmbedding> {
        Some(ImageEmbedding {
            global_vec: self.global.get(&image_id)?.clone(),
            target_vec: self.targets.get(&(image_id, detection_id))?.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let text = std::fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// JSON lines accepted by [`EmbeddingStore::parse`]: global vectors then
    /// target vectors, each sorted by key.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut globals: Vec<_> = self.global.iter().collect();
        globals.sort_by_key(|(k, _)| **k);
        for (id, v) in globals {
            let line = serde_json::json!({"image_id": id, "detection_id": "global", "vector": v});
            out.push_str(&line.to_string());
            out.push('\n');
        }
        let mut targets: Vec<_> = self.targets.iter().collect();
        targets.sort_by_key(|(k, _)| **k);
        for ((image_id, det), v) in targets {
            let line = serde_json::json!({"image_id": image_id, "detection_id": det, "vector": v});
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses JSON lines of `{image_id, detection_id | "global", vector}`.
    /// The first vector fixes the dimension.
    pub fn parse(text: &str) -> Result<Self, EmbeddingError> {
        let mut store = Self::default();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine =
                serde_json::from_str(line).map_err(|source| EmbeddingError::Parse { line: line_no, source })?;
            let expected = *dim.get_or_insert(rec.vector.len());
            if rec.vector.len() != expected {
                return Err(EmbeddingError::Length {
                    line: line_no,
                    found: rec.vector.len(),
                    expected,
                });
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { line: line_no });
            }
            match &rec.detection_id {
                serde_json::Value::String(s) if s == "global" => {
                    store.global.insert(rec.image_id, rec.vector);
                }
                v => {
                    let id = v.as_u64().ok_or(EmbeddingError::BadDetectionId { line: line_no })?;
                    store.targets.insert((rec.image_id, id), rec.vector);
                }
            }
        }
        store.dim = dim.unwrap_or(0);
        Ok(store)
    }
}
