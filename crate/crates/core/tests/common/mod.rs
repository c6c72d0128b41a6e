//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use detcal_core::evaluator::EvalBox;
use detcal_core::network::{backward, loss};
use detcal_core::{Architecture, BoundingBox, Detection, FeatureMatrix, ImageMeta, ModelParameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Grid cells per unit length for snapped boxes.
pub const GRID: u32 = 16;

/// A box whose corners are multiples of `1 / GRID`, inside `[0, extent]²`.
pub fn grid_box(rng: &mut impl Rng, extent: u32) -> BoundingBox {
    let cells = extent * GRID;
    let x0 = rng.random_range(0..cells);
    let y0 = rng.random_range(0..cells);
    let x1 = rng.random_range(x0 + 1..=cells);
    let y1 = rng.random_range(y0 + 1..=cells);
    let s = GRID as f64;
    BoundingBox::new(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s).unwrap()
}

/// IoU by counting grid cells covered by each box.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let s = GRID as f64;
    let cell = |v: f64| (v * s).round() as i64;
    let x_lo = cell(a.x_min.min(b.x_min));
    let x_hi = cell(a.x_max.max(b.x_max));
    let y_lo = cell(a.y_min.min(b.y_min));
    let y_hi = cell(a.y_max.max(b.y_max));
    let inside = |bx: &BoundingBox, x: i64, y: i64| {
        x >= cell(bx.x_min) && x < cell(bx.x_max) && y >= cell(bx.y_min) && y < cell(bx.y_max)
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU from the closed-form overlap of two axis-aligned intervals.
pub fn symbolic_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let w = overlap(a.x_min, a.x_max, b.x_min, b.x_max);
    let h = overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let inter = w * h;
    let area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    let area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// A random detector output for one image: mixed sizes, boxes touching the
/// border, duplicates and labels drawn from `1..=max_label`.
pub fn random_scene(rng: &mut impl Rng, n: usize, max_label: usize) -> (ImageMeta, Vec<Detection>) {
    let width = rng.random_range(50.0..1200.0_f64).round();
    let height = rng.random_range(50.0..1200.0_f64).round();
    let img = ImageMeta::new(rng.random_range(1..1_000_000), width, height).unwrap();
    let mut dets: Vec<Detection> = Vec::with_capacity(n);
    for i in 0..n {
        let xywh = if i > 0 && rng.random_bool(0.1) {
            dets[rng.random_range(0..i)].xywh
        } else {
            let w = rng.random_range(0.5..width);
            let h = rng.random_range(0.5..height);
            let x = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(0.0..width - w)
            };
            let y = if rng.random_bool(0.1) {
                height - h
            } else {
                rng.random_range(0.0..height - h)
            };
            [x, y, w, h]
        };
        let score = rng.random_range(0.05..=1.0);
        dets.push(Detection {
            image_id: img.image_id,
            detection_id: i as u64 + 1,
            bbox: BoundingBox::from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]).unwrap(),
            xywh,
            label: rng.random_range(1..=max_label),
            score,
            bkg_score: rng.random_range(0.0..=1.0 - score),
        });
    }
    (img, dets)
}

/// A random permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Parameters drawn uniformly from `[-scale, scale]`, biases included, so no
/// unit sits exactly on a ReLU kink.
pub fn random_params(rng: &mut impl Rng, arch: Architecture, scale: f64) -> ModelParameters {
    let values = (0..arch.param_count())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    ModelParameters::from_values(arch, values).unwrap()
}

/// Worst elementwise relative error between the analytic gradient and
/// central differences with step `h`. Entries where both are below `floor`
/// are compared against `floor` so roundoff near zero does not dominate.
pub fn gradient_error(params: &ModelParameters, matrix: &FeatureMatrix, label: usize, h: f64, floor: f64) -> f64 {
    let (analytic, _) = backward(params, matrix, None, label).unwrap();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let base = params.values()[i];
        probe.values_mut()[i] = base + h;
        let up = loss(&probe, matrix, None, label).unwrap();
        probe.values_mut()[i] = base - h;
        let down = loss(&probe, matrix, None, label).unwrap();
        probe.values_mut()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let scale = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Greedy matching found by brute force: every partial injective assignment
/// of detections to ground truths is enumerated, and the single one that
/// agrees with the greedy rule (each detection, in descending score order,
/// takes the unmatched ground truth of highest IoU ≥ t, if any) is returned.
fn enumerate_greedy(dets: &[&EvalBox], gts: &[&EvalBox], t: f64) -> Vec<Option<usize>> {
    let iou = |d: usize, g: usize| symbolic_iou(&dets[d].bbox, &gts[g].bbox);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let consistent = |assign: &[Option<usize>]| {
        let mut taken = vec![false; gts.len()];
        for &d in &order {
            let available: Vec<usize> = (0..gts.len()).filter(|&g| !taken[g] && iou(d, g) >= t).collect();
            match assign[d] {
                None => {
                    if !available.is_empty() {
                        return false;
                    }
                }
                Some(g) => {
                    if !available.contains(&g) || available.iter().any(|&o| iou(d, o) > iou(d, g)) {
                        return false;
                    }
                    taken[g] = true;
                }
            }
        }
        true
    };

    let mut found = Vec::new();
    let mut assign = vec![None; dets.len()];
    fn walk(
        d: usize,
        n_gt: usize,
        assign: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        visit: &mut dyn FnMut(&[Option<usize>]),
    ) {
        if d == assign.len() {
            visit(assign);
            return;
        }
        assign[d] = None;
        walk(d + 1, n_gt, assign, used, visit);
        for g in 0..n_gt {
            if !used[g] {
                used[g] = true;
                assign[d] = Some(g);
                walk(d + 1, n_gt, assign, used, visit);
                used[g] = false;
                assign[d] = None;
            }
        }
    }
    let mut used = vec![false; gts.len()];
    walk(0, gts.len(), &mut assign, &mut used, &mut |a| {
        if consistent(a) {
            found.push(a.to_vec());
        }
    });
    assert_eq!(found.len(), 1, "greedy matching must be unique");
    found.pop().unwrap()
}

/// 101-point interpolated AP straight from its definition: at each recall
/// level r, the best precision among ranks whose recall reaches r. Recall
/// comparisons are exact in integers.
pub fn ap_by_definition(hits: &[bool], n_gt: usize) -> f64 {
    let mut sum = 0.0;
    for r in 0..=100usize {
        let mut best: f64 = 0.0;
        let mut tp = 0usize;
        for (k, &hit) in hits.iter().enumerate() {
            tp += usize::from(hit);
            if tp * 100 >= r * n_gt {
                best = best.max(tp as f64 / (k + 1) as f64);
            }
        }
        sum += best;
    }
    sum / 101.0
}

/// Mean over classes with ground truth of the per-class AP at threshold `t`,
/// over all areas. `None` when no class has ground truth.
pub fn oracle_mean_ap(results: &[EvalBox], gts: &[EvalBox], t: f64) -> Option<f64> {
    let mut classes: BTreeMap<usize, ()> = BTreeMap::new();
    for g in gts {
        classes.insert(g.label, ());
    }
    let mut aps = Vec::new();
    for &c in classes.keys() {
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0;
        let mut images: Vec<u64> = results.iter().chain(gts).map(|b| b.image_id).collect();
        images.sort_unstable();
        images.dedup();
        for img in images {
            let d: Vec<&EvalBox> = results.iter().filter(|b| b.label == c && b.image_id == img).collect();
            let g: Vec<&EvalBox> = gts.iter().filter(|b| b.label == c && b.image_id == img).collect();
            n_gt += g.len();
            let assign = enumerate_greedy(&d, &g, t);
            scored.extend(d.iter().zip(&assign).map(|(b, a)| (b.score, a.is_some())));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let hits: Vec<bool> = scored.iter().map(|s| s.1).collect();
        aps.push(ap_by_definition(&hits, n_gt));
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// A scene of at most five boxes over one or two images and classes.
/// Detections are mostly jittered copies of ground truths so IoUs spread
/// across the threshold range.
pub fn micro_scene(seed: u64) -> (Vec<EvalBox>, Vec<EvalBox>) {
    let mut rng = rng(seed);
    let images = rng.random_range(1..=2u64);
    let classes = rng.random_range(1..=2usize);
    let n_gt = rng.random_range(1..=3);
    let n_det = rng.random_range(0..=5 - n_gt);
    let mut gts = Vec::new();
    for _ in 0..n_gt {
        let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
        let (w, h) = (rng.random_range(5.0..30.0), rng.random_range(5.0..30.0));
        gts.push(EvalBox {
            image_id: rng.random_range(1..=images),
            label: rng.random_range(1..=classes),
            bbox: BoundingBox::from_xywh(x, y, w, h).unwrap(),
            score: 1.0,
        });
    }
    let mut dets = Vec::new();
    for _ in 0..n_det {
        let d = if rng.random_bool(0.75) {
            let g: &EvalBox = &gts[rng.random_range(0..gts.len())];
            let [x, y, w, h] = g.bbox.to_xywh();
            let j = |rng: &mut ChaCha8Rng, v: f64| v * rng.random_range(-0.25..0.25);
            let bbox = BoundingBox::from_xywh(
                x + j(&mut rng, w),
                y + j(&mut rng, h),
                w * rng.random_range(0.7..1.3),
                h * rng.random_range(0.7..1.3),
            )
            .unwrap();
            let label = if rng.random_bool(0.8) {
                g.label
            } else {
                rng.random_range(1..=classes)
            };
            EvalBox {
                image_id: g.image_id,
                label,
                bbox,
                score: 0.0,
            }
        } else {
            let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            EvalBox {
                image_id: rng.random_range(1..=images),
                label: rng.random_range(1..=classes),
                bbox: BoundingBox::from_xywh(x, y, rng.random_range(5.0..30.0), rng.random_range(5.0..30.0)).unwrap(),
                score: 0.0,
            }
        };
        dets.push(EvalBox {
            score: rng.random_range(0.05..1.0),
            ..d
        });
    }
    (dets, gts)
}
