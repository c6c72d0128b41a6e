//! Synthetic contextual scenes with simulated detector output.
//!
//! Each scene is anchored by one class; every other class joins with the
//! probability given by the co-occurrence matrix. Box areas follow per-class
//! priors. Detections are jittered ground-truth boxes whose labels pass
//! through a confusion matrix, plus spurious low-score boxes.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, CocoAnnotation, CocoCategory, CocoGroundTruthFile, CocoImage, DetectionRecord, MAX_DETECTIONS,
};
use crate::error::{DatasetError, SynthError};
use crate::features::EmbeddingStore;
use crate::persistence::write_json_atomic;

pub const SCENE_MODEL_VERSION: u32 = 1;
pub const DEFAULT_SYNTH_CLASSES: usize = 10;

/// Area of a class's boxes as a fraction of the image area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePrior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNoise {
    /// Relative edge jitter: each edge moves by up to this fraction of the
    /// box side.
    pub jitter: f64,
    pub true_score_min: f64,
    pub true_score_max: f64,
    pub max_spurious: u32,
    pub spurious_score_min: f64,
    pub spurious_score_max: f64,
}

/// Generator parameters. Class indices in the matrices are `0..num_classes`
/// and map to labels `1..=num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub version: u32,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Probability of each class anchoring a scene.
    pub anchor_weights: Vec<f64>,
    /// `cooccurrence[i][j]`: probability that class `j` appears when `i`
    /// anchors. The diagonal is unused; the anchor is always present.
    pub cooccurrence: Vec<Vec<f64>>,
    pub max_instances: u32,
    pub size_priors: Vec<SizePrior>,
    /// `confusion[t][l]`: probability that an object of class `t` is
    /// reported as `l`.
    pub confusion: Vec<Vec<f64>>,
    pub noise: ScoreNoise,
    pub image_width: [f64; 2],
    pub image_height: [f64; 2],
    pub seed: u64,
}

fn partner(class: usize, num_classes: usize) -> Option<usize> {
    let p = class ^ 1;
    (p < num_classes).then_some(p)
}

impl SceneModel {
    /// Two interleaved contexts (even and odd class indices). With three or
    /// more classes the last two are context indicators: they alone anchor
    /// scenes, one per context, and are never confused. The remaining
    /// classes `2k` and `2k+1` form confusable pairs that straddle the
    /// contexts, so the indicator resolves the confusion. Pairs share a size
    /// prior; priors grow across pairs.
    pub fn contextual(num_classes: usize, seed: u64) -> Self {
        let k = num_classes;
        let pairs = k.div_ceil(2).max(1);
        let same_context = 0.8;
        let confusion_rate = 0.2;
        let indicators = if k >= 3 { k - 2..k } else { 0..0 };
        let anchor_weights = if indicators.is_empty() {
            vec![1.0 / k.max(1) as f64; k]
        } else {
            (0..k)
                .map(|c| if indicators.contains(&c) { 0.5 } else { 0.0 })
                .collect()
        };
        let cooccurrence = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| match (i == j, i % 2 == j % 2) {
                        (true, _) => 1.0,
                        (false, true) if !indicators.contains(&j) => same_context,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        let confusion = (0..k)
            .map(|t| {
                let mut row = vec![0.0; k];
                match partner(t, k).filter(|p| !indicators.contains(p) && !indicators.contains(&t)) {
                    Some(p) => {
                        row[t] = 1.0 - confusion_rate;
                        row[p] = confusion_rate;
                    }
                    None => row[t] = 1.0,
                }
                row
            })
            .collect();
        let (small, large): (f64, f64) = (0.005, 0.15);
        let size_priors = (0..k)
            .map(|c| {
                let step = if pairs > 1 {
                    (c / 2) as f64 / (pairs - 1) as f64
                } else {
                    0.0
                };
                let mean = small * (large / small).powf(step);
                SizePrior { mean, std: 0.3 * mean }
            })
            .collect();
        Self {
            version: SCENE_MODEL_VERSION,
            num_classes: k,
            class_names: (1..=k).map(|c| format!("class_{c:02}")).collect(),
            anchor_weights,
            cooccurrence,
            max_instances: 3,
            size_priors,
            confusion,
            noise: ScoreNoise {
                jitter: 0.05,
                true_score_min: 0.3,
                true_score_max: 1.0,
                max_spurious: 8,
                spurious_score_min: 0.05,
                spurious_score_max: 0.4,
            },
            image_width: [320.0, 640.0],
            image_height: [240.0, 480.0],
            seed,
        }
    }

    /// Identity confusion, no jitter and no spurious boxes.
    pub fn noiseless(mut self) -> Self {
        let k = self.num_classes;
        self.confusion = (0..k)
            .map(|t| (0..k).map(|l| f64::from(u8::from(t == l))).collect())
            .collect();
        self.noise.jitter = 0.0;
        self.noise.max_spurious = 0;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidModel(m));
        let k = self.num_classes;
        if k == 0 || k > dataset::NUM_CLASSES - 1 {
            return bad(format!("class count {k} outside 1..={}", dataset::NUM_CLASSES - 1));
        }
        let prob = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        let square = |m: &[Vec<f64>]| m.len() == k && m.iter().all(|r| r.len() == k);
        if self.class_names.len() != k || self.anchor_weights.len() != k || self.size_priors.len() != k {
            return bad("per-class vectors must have one entry per class".into());
        }
        if !square(&self.cooccurrence) || !square(&self.confusion) {
            return bad(format!("probability matrices must be {k}x{k}"));
        }
        if !self.anchor_weights.iter().all(|&w| prob(w)) || (self.anchor_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("anchor weights must be probabilities summing to 1".into());
        }
        if !self.cooccurrence.iter().flatten().all(|&p| prob(p)) {
            return bad("co-occurrence entries must lie in [0, 1]".into());
        }
        for (t, row) in self.confusion.iter().enumerate() {
            if !row.iter().all(|&p| prob(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("confusion row {t} is not a probability distribution"));
            }
        }
        for (c, s) in self.size_priors.iter().enumerate() {
            if !(s.mean > 0.0 && s.mean < 1.0 && s.std.is_finite() && s.std >= 0.0) {
                return bad(format!("size prior {c} needs mean in (0, 1) and std >= 0"));
            }
        }
        if self.max_instances == 0 {
            return bad("max_instances must be at least 1".into());
        }
        let n = &self.noise;
        if !(n.jitter.is_finite() && (0.0..0.25).contains(&n.jitter)) {
            return bad("jitter must lie in [0, 0.25)".into());
        }
        for (lo, hi, what) in [
            (n.true_score_min, n.true_score_max, "true score"),
            (n.spurious_score_min, n.spurious_score_max, "spurious score"),
        ] {
            if !(prob(lo) && prob(hi) && lo <= hi) {
                return bad(format!("{what} range must be ordered within [0, 1]"));
            }
        }
        for (r, what) in [(self.image_width, "width"), (self.image_height, "height")] {
            if !(r[0].is_finite() && r[0] >= 1.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("image {what} range must be ordered and at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    /// Class index (label − 1).
    pub class: usize,
    pub xywh: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDetection {
    pub class: usize,
    pub xywh: [f64; 4],
    pub score: f64,
    /// Index of the object this box was derived from; `None` for spurious.
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: f64,
    pub height: f64,
    pub anchor: usize,
    pub objects: Vec<SceneObject>,
    /// Sorted by descending score, at most the per-image cap.
    pub detections: Vec<SceneDetection>,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn sample_box(rng: &mut ChaCha8Rng, prior: SizePrior, width: f64, height: f64) -> [f64; 4] {
    let frac = Normal::new(prior.mean, prior.std)
        .expect("validated prior")
        .sample(rng)
        .clamp(prior.mean / 4.0, (prior.mean * 4.0).min(0.9));
    let log_aspect = rng.random_range(-1.5f64.ln()..=1.5f64.ln());
    let area = frac * width * height;
    let w = (area * log_aspect.exp()).sqrt().min(width);
    let h = (area / w).min(height);
    let x = round2(rng.random_range(0.0..=width - w));
    let y = round2(rng.random_range(0.0..=height - h));
    let w = round2(w).min(width - x).max(0.01);
    let h = round2(h).min(height - y).max(0.01);
    [x, y, w, h]
}

fn jitter_box(rng: &mut ChaCha8Rng, b: [f64; 4], jitter: f64, width: f64, height: f64) -> [f64; 4] {
    if jitter == 0.0 {
        return b;
    }
    let [x, y, w, h] = b;
    let mut d = || rng.random_range(-jitter..=jitter);
    let x0 = round2((x + d() * w).clamp(0.0, width));
    let x1 = round2((x + w + d() * w).clamp(0.0, width));
    let y0 = round2((y + d() * h).clamp(0.0, height));
    let y1 = round2((y + h + d() * h).clamp(0.0, height));
    [x0, y0, (x1 - x0).max(0.01), (y1 - y0).max(0.01)]
}

/// Generates scene `index`; its randomness derives from `model.seed + index`.
pub fn generate_scene(model: &SceneModel, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed.wrapping_add(index));
    let k = model.num_classes;
    let width = rng.random_range(model.image_width[0]..=model.image_width[1]).round();
    let height = rng.random_range(model.image_height[0]..=model.image_height[1]).round();
    let anchor = WeightedIndex::new(&model.anchor_weights)
        .expect("validated weights")
        .sample(&mut rng);

    let mut objects = Vec::new();
    for class in 0..k {
        if class != anchor && !rng.random_bool(model.cooccurrence[anchor][class]) {
            continue;
        }
        for _ in 0..rng.random_range(1..=model.max_instances) {
            let xywh = sample_box(&mut rng, model.size_priors[class], width, height);
            objects.push(SceneObject { class, xywh });
        }
    }

    let noise = &model.noise;
    let mut detections = Vec::with_capacity(objects.len());
    for (i, obj) in objects.iter().enumerate() {
        let class = WeightedIndex::new(&model.confusion[obj.class])
            .expect("validated confusion")
            .sample(&mut rng);
        detections.push(SceneDetection {
            class,
            xywh: jitter_box(&mut rng, obj.xywh, noise.jitter, width, height),
            score: rng.random_range(noise.true_score_min..=noise.true_score_max),
            source: Some(i),
        });
    }
    for _ in 0..rng.random_range(0..=noise.max_spurious) {
        let class = rng.random_range(0..k);
        let shape_class = rng.random_range(0..k);
        detections.push(SceneDetection {
            class,
            xywh: sample_box(&mut rng, model.size_priors[shape_class], width, height),
            score: rng.random_range(noise.spurious_score_min..=noise.spurious_score_max),
            source: None,
        });
    }
    detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    detections.truncate(MAX_DETECTIONS);
    Scene {
        width,
        height,
        anchor,
        objects,
        detections,
    }
}

/// A generated dataset in the on-disk record formats.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub ground_truth: CocoGroundTruthFile,
    pub detections: Vec<DetectionRecord>,
}

/// Image ids are `1..=n_images`; annotation and detection ids count from 1
/// in image order.
pub fn generate(model: &SceneModel, n_images: usize) -> Result<SyntheticDataset, SynthError> {
    model.validate()?;
    let scenes: Vec<Scene> = (0..n_images as u64)
        .into_par_iter()
        .map(|i| generate_scene(model, i))
        .collect();
    let categories = model
        .class_names
        .iter()
        .enumerate()
        .map(|(c, name)| CocoCategory {
            id: c as u64 + 1,
            name: name.clone(),
            supercategory: None,
        })
        .collect();
    let mut gt = CocoGroundTruthFile {
        categories,
        ..Default::default()
    };
    let mut detections = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let image_id = i as u64 + 1;
        gt.images.push(CocoImage {
            id: image_id,
            width: scene.width,
            height: scene.height,
            file_name: Some(format!("synth_{image_id:06}.jpg")),
        });
        for obj in &scene.objects {
            let id = gt.annotations.len() as u64 + 1;
            gt.annotations.push(CocoAnnotation {
                id,
                image_id,
                category_id: obj.class as u64 + 1,
                bbox: obj.xywh,
                area: Some(obj.xywh[2] * obj.xywh[3]),
                iscrowd: Some(0),
            });
        }
        for det in &scene.detections {
            let id = detections.len() as u64 + 1;
            detections.push(DetectionRecord {
                image_id,
                category_id: det.class as u64 + 1,
                bbox: det.xywh,
                score: det.score,
                bkg_score: Some(1.0 - det.score),
                id: Some(id),
            });
        }
    }
    Ok(SyntheticDataset {
        ground_truth: gt,
        detections,
    })
}

/// Deterministic per-image and per-detection vectors in `[0, 1)`.
pub fn synthetic_embeddings(detections: &[DetectionRecord], dim: usize, seed: u64) -> EmbeddingStore {
    let mut store = EmbeddingStore::new(dim);
    let vector = |a: u64, b: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
        (0..dim).map(|_| rng.random::<f64>()).collect::<Vec<f64>>()
    };
    for d in detections {
        let det_id = d.id.expect("synthetic detections carry ids");
        store.insert_target(d.image_id, det_id, vector(d.image_id, det_id.wrapping_add(1)));
        store.insert_global(d.image_id, vector(d.image_id, 0));
    }
    store
}

pub const GT_FILE: &str = "gt.json";
pub const DETS_FILE: &str = "dets.json";
pub const MODEL_FILE: &str = "scene_model.json";

/// Writes `gt.json`, `dets.json` and `scene_model.json` into `dir`.
pub fn write_dataset(dir: &Path, model: &SceneModel, data: &SyntheticDataset) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    dataset::write_ground_truth(&dir.join(GT_FILE), &data.ground_truth)?;
    dataset::write_detection_records(&dir.join(DETS_FILE), &data.detections)?;
    let path = dir.join(MODEL_FILE);
    write_json_atomic(&path, model).map_err(|source| DatasetError::Io { path, source })
}
