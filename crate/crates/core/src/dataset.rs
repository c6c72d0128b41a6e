//! COCO-style ground truth and detection results: loading, truth labeling by
//! IoU matching, and background downsampling for training.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::geometry::{iou, BoundingBox, ImageMeta};
use crate::persistence;

/// Size of the label space, background included.
pub const NUM_CLASSES: usize = 81;
/// Label index reserved for "no object".
pub const BACKGROUND: usize = 0;
/// Detections scoring below this are discarded at load time.
pub const SCORE_FLOOR: f64 = 0.05;
/// Maximum detections retained per image.
pub const MAX_DETECTIONS: usize = 100;
/// A detection takes a ground-truth label only when IoU exceeds this.
pub const TRUTH_IOU_THRESHOLD: f64 = 0.5;
/// Background training examples are thinned by this factor by default.
pub const DEFAULT_DOWNSAMPLE_FACTOR: u32 = 10;

// ---------------------------------------------------------------------------
// On-disk records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

/// The COCO annotation file: `images`, `annotations` and `categories`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoGroundTruthFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results file, with an optional detector background
/// probability and an optional stable record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bkg_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
}

// ---------------------------------------------------------------------------
// Category remapping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub label: usize,
    pub coco_id: u64,
    pub name: String,
}

/// Mapping between sparse COCO category ids and contiguous labels `1..=K`.
///
/// Labels are assigned by sorting category ids ascending, so the mapping is a
/// pure function of the category list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub version: u32,
    pub categories: Vec<CategoryEntry>,
}

impl CategoryMap {
    pub fn from_categories(cats: &[CocoCategory]) -> Result<Self, DatasetError> {
        let mut sorted: Vec<&CocoCategory> = cats.iter().collect();
        sorted.sort_by_key(|c| c.id);
        for pair in sorted.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DatasetError::DuplicateCategory(pair[0].id));
            }
        }
        if sorted.len() > NUM_CLASSES - 1 {
            return Err(DatasetError::TooManyCategories {
                count: sorted.len(),
                max: NUM_CLASSES - 1,
            });
        }
        let categories = sorted
            .into_iter()
            .enumerate()
            .map(|(i, c)| CategoryEntry {
                label: i + 1,
                coco_id: c.id,
                name: c.name.clone(),
            })
            .collect();
        Ok(Self { version: 1, categories })
    }

    pub fn label_of(&self, coco_id: u64) -> Option<usize> {
        self.categories
            .binary_search_by_key(&coco_id, |c| c.coco_id)
            .ok()
            .map(|i| i + 1)
    }

    pub fn coco_id_of(&self, label: usize) -> Option<u64> {
        label
            .checked_sub(1)
            .and_then(|i| self.categories.get(i))
            .map(|c| c.coco_id)
    }

    pub fn name_of(&self, label: usize) -> Option<&str> {
        if label == BACKGROUND {
            return Some("background");
        }
        self.categories.get(label - 1).map(|c| c.name.as_str())
    }

    /// Number of labels in use, background included.
    pub fn num_labels(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn to_coco(&self) -> Vec<CocoCategory> {
        self.categories
            .iter()
            .map(|c| CocoCategory {
                id: c.coco_id,
                name: c.name.clone(),
                supercategory: None,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        persistence::write_json_atomic(path, self).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
            what: path.display().to_string(),
            source,
        })
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A box emitted by the baseline detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub detection_id: u64,
    pub bbox: BoundingBox,
    /// The box exactly as read, so results can be written back unchanged.
    pub xywh: [f64; 4],
    pub label: usize,
    pub score: f64,
    pub bkg_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub image_id: u64,
    pub annotation_id: u64,
    pub bbox: BoundingBox,
    pub xywh: [f64; 4],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroundTruth {
    pub meta: ImageMeta,
    pub file_name: Option<String>,
    pub annotations: Vec<GroundTruthAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub categories: CategoryMap,
    pub images: BTreeMap<u64, ImageGroundTruth>,
    /// Non-fatal oddities found while loading (degenerate boxes, ...).
    pub warnings: Vec<String>,
}

pub type DetectionMap = BTreeMap<u64, Vec<Detection>>;

/// A training target: one detection of one image and its assigned class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image_id: u64,
    pub target_index: usize,
    pub truth_label: usize,
}

impl LabeledExample {
    pub fn is_background(&self) -> bool {
        self.truth_label == BACKGROUND
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, DatasetError> {
    let text = read_text(path)?;
    let file: CocoGroundTruthFile = serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
        what: path.display().to_string(),
        source,
    })?;
    GroundTruth::from_coco(&file)
}

impl GroundTruth {
    pub fn from_coco(file: &CocoGroundTruthFile) -> Result<Self, DatasetError> {
        let categories = CategoryMap::from_categories(&file.categories)?;
        let mut images = BTreeMap::new();
        for img in &file.images {
            let meta = ImageMeta::new(img.id, img.width, img.height).map_err(|_| DatasetError::InvalidImageSize {
                image_id: img.id,
                width: img.width,
                height: img.height,
            })?;
            let entry = ImageGroundTruth {
                meta,
                file_name: img.file_name.clone(),
                annotations: Vec::new(),
            };
            if images.insert(img.id, entry).is_some() {
                return Err(DatasetError::DuplicateImage(img.id));
            }
        }

        let mut warnings = Vec::new();
        for ann in &file.annotations {
            let label = categories
                .label_of(ann.category_id)
                .ok_or(DatasetError::UnknownCategory {
                    annotation_id: ann.id,
                    category_id: ann.category_id,
                })?;
            let [x, y, w, h] = ann.bbox;
            let bbox = BoundingBox::from_xywh(x, y, w, h).map_err(|source| DatasetError::InvalidBox {
                record: format!("annotation {}", ann.id),
                source,
            })?;
            if w == 0.0 || h == 0.0 {
                let msg = format!("annotation {} has a degenerate box {:?}", ann.id, ann.bbox);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            let image = images
                .get_mut(&ann.image_id)
                .ok_or(DatasetError::UnknownAnnotationImage {
                    annotation_id: ann.id,
                    image_id: ann.image_id,
                })?;
            image.annotations.push(GroundTruthAnnotation {
                image_id: ann.image_id,
                annotation_id: ann.id,
                bbox,
                xywh: ann.bbox,
                label,
            });
        }
        Ok(Self {
            categories,
            images,
            warnings,
        })
    }

    /// Serializes back to the COCO layout, images in id order.
    pub fn to_coco(&self) -> CocoGroundTruthFile {
        let mut out = CocoGroundTruthFile {
            categories: self.categories.to_coco(),
            ..Default::default()
        };
        for img in self.images.values() {
            out.images.push(CocoImage {
                id: img.meta.image_id,
                width: img.meta.width,
                height: img.meta.height,
                file_name: img.file_name.clone(),
            });
            for ann in &img.annotations {
                out.annotations.push(CocoAnnotation {
                    id: ann.annotation_id,
                    image_id: ann.image_id,
                    category_id: self
                        .categories
                        .coco_id_of(ann.label)
                        .expect("annotation label comes from the category map"),
                    bbox: ann.xywh,
                    area: Some(ann.bbox.area()),
                    iscrowd: Some(0),
                });
            }
        }
        out
    }

    pub fn meta(&self, image_id: u64) -> Option<&ImageMeta> {
        self.images.get(&image_id).map(|i| &i.meta)
    }

    pub fn annotations(&self, image_id: u64) -> &[GroundTruthAnnotation] {
        self.images
            .get(&image_id)
            .map(|i| i.annotations.as_slice())
            .unwrap_or(&[])
    }
}

pub fn load_detections(path: &Path, gt: &GroundTruth) -> Result<DetectionMap, DatasetError> {
    detections_from_records(&read_detection_records(path)?, gt)
}

pub fn read_detection_records(path: &Path) -> Result<Vec<DetectionRecord>, DatasetError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
        what: path.display().to_string(),
        source,
    })
}

/// Validates and groups detection records by image.
///
/// Records below [`SCORE_FLOOR`] are dropped first, then each image keeps its
/// [`MAX_DETECTIONS`] highest-scoring boxes (stable with respect to file
/// order). Every ground-truth image gets an entry, possibly empty.
pub fn detections_from_records(records: &[DetectionRecord], gt: &GroundTruth) -> Result<DetectionMap, DatasetError> {
    detections_with_floor(records, gt, SCORE_FLOOR)
}

/// As [`detections_from_records`] with a custom score floor.
pub fn detections_with_floor(
    records: &[DetectionRecord],
    gt: &GroundTruth,
    score_floor: f64,
) -> Result<DetectionMap, DatasetError> {
    let unknown: BTreeSet<u64> = records
        .iter()
        .map(|r| r.image_id)
        .filter(|id| !gt.images.contains_key(id))
        .collect();
    if !unknown.is_empty() {
        return Err(DatasetError::UnknownImages(unknown.into_iter().collect()));
    }

    let mut map: DetectionMap = gt.images.keys().map(|&id| (id, Vec::new())).collect();
    for (i, rec) in records.iter().enumerate() {
        let label = gt
            .categories
            .label_of(rec.category_id)
            .ok_or(DatasetError::UnknownDetectionCategory {
                record: i,
                category_id: rec.category_id,
            })?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(DatasetError::InvalidScore {
                record: i,
                score: rec.score,
            });
        }
        let bkg_score = match rec.bkg_score {
            Some(b) if !(0.0..=1.0).contains(&b) => return Err(DatasetError::InvalidScore { record: i, score: b }),
            Some(b) => b,
            None => 1.0 - rec.score,
        };
        let [x, y, w, h] = rec.bbox;
        let bbox = BoundingBox::from_xywh(x, y, w, h).map_err(|source| DatasetError::InvalidBox {
            record: format!("detection record {i}"),
            source,
        })?;
        if rec.score < score_floor {
            continue;
        }
        map.get_mut(&rec.image_id)
            .expect("image ids validated above")
            .push(Detection {
                image_id: rec.image_id,
                detection_id: rec.id.unwrap_or(i as u64),
                bbox,
                xywh: rec.bbox,
                label,
                score: rec.score,
                bkg_score,
            });
    }
    for dets in map.values_mut() {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(MAX_DETECTIONS);
    }
    Ok(map)
}

/// Flattens a detection map back into results records, images in id order.
pub fn detections_to_records(map: &DetectionMap, categories: &CategoryMap) -> Vec<DetectionRecord> {
    map.values()
        .flatten()
        .map(|d| DetectionRecord {
            image_id: d.image_id,
            category_id: categories
                .coco_id_of(d.label)
                .expect("detection label comes from the category map"),
            bbox: d.xywh,
            score: d.score,
            bkg_score: Some(d.bkg_score),
            id: Some(d.detection_id),
        })
        .collect()
}

pub fn write_detection_records(path: &Path, records: &[DetectionRecord]) -> Result<(), DatasetError> {
    persistence::write_json_atomic(path, &records).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_ground_truth(path: &Path, file: &CocoGroundTruthFile) -> Result<(), DatasetError> {
    persistence::write_json_atomic(path, file).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Truth labeling
// ---------------------------------------------------------------------------

/// Label of the ground-truth box with the highest IoU above
/// [`TRUTH_IOU_THRESHOLD`], or background. Ties go to the earlier record.
pub fn match_label(det: &BoundingBox, gts: &[GroundTruthAnnotation]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for gt in gts {
        let v = iou(det, &gt.bbox);
        if v > TRUTH_IOU_THRESHOLD && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, gt.label));
        }
    }
    best.map_or(BACKGROUND, |(_, label)| label)
}

pub fn assign_image_labels(dets: &[Detection], gts: &[GroundTruthAnnotation]) -> Vec<usize> {
    dets.iter().map(|d| match_label(&d.bbox, gts)).collect()
}

/// One example per detection, in image-id then detection order.
pub fn assign_truth_labels(dets: &DetectionMap, gt: &GroundTruth) -> Vec<LabeledExample> {
    let per_image: Vec<Vec<LabeledExample>> = dets
        .par_iter()
        .map(|(&image_id, list)| {
            assign_image_labels(list, gt.annotations(image_id))
                .into_iter()
                .enumerate()
                .map(|(target_index, truth_label)| LabeledExample {
                    image_id,
                    target_index,
                    truth_label,
                })
                .collect()
        })
        .collect();
    per_image.into_iter().flatten().collect()
}

/// Keeps every object example and each background example with probability
/// `1 / factor`, drawing from a generator seeded with `seed`.
pub fn downsample_background(
    examples: &[LabeledExample],
    factor: u32,
    seed: u64,
) -> Result<Vec<LabeledExample>, DatasetError> {
    if factor == 0 {
        return Err(DatasetError::InvalidFactor);
    }
    if factor == 1 {
        return Ok(examples.to_vec());
    }
    let keep = 1.0 / f64::from(factor);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(examples
        .iter()
        .filter(|e| !e.is_background() || rng.random_bool(keep))
        .copied()
        .collect())
}

pub fn write_labeled_examples(path: &Path, examples: &[LabeledExample]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for e in examples {
        text.push_str(&serde_json::to_string(e).expect("plain struct serializes"));
        text.push('\n');
    }
    persistence::write_bytes_atomic(path, text.as_bytes()).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_labeled_examples(path: &Path) -> Result<Vec<LabeledExample>, DatasetError> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| DatasetError::Parse {
                what: format!("{} line {}", path.display(), i + 1),
                source,
            })
        })
        .collect()
}
