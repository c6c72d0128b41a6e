use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use detcal_core::dataset::detections_from_records;
use detcal_core::evaluator::{detection_boxes, ground_truth_boxes};
use detcal_core::network::{forward, train, TrainExample};
use detcal_core::synth::{generate, SceneModel};
use detcal_core::{
    build_matrix, calibrate_dataset, coco_ap, Architecture, CalibrationConfig, DetectionMap, GroundTruth,
    ModelParameters, TrainConfig,
};

fn dataset(images: usize) -> (GroundTruth, DetectionMap) {
    let data = generate(&SceneModel::contextual(10, 1), images).unwrap();
    let gt = GroundTruth::from_coco(&data.ground_truth).unwrap();
    let dets = detections_from_records(&data.detections, &gt).unwrap();
    (gt, dets)
}

fn small_arch() -> Architecture {
    Architecture {
        feature_widths: vec![32, 32],
        head_hidden: vec![32],
        num_classes: 11,
        ..Architecture::set_cnn()
    }
}

fn bench_features(c: &mut Criterion) {
    let (gt, dets) = dataset(50);
    let (&id, busiest) = dets.iter().max_by_key(|(_, d)| d.len()).unwrap();
    let img = gt.meta(id).unwrap();
    c.bench_function(&format!("build_matrix/{}_detections", busiest.len()), |b| {
        b.iter(|| build_matrix(black_box(busiest), 0, img).unwrap())
    });
}

fn bench_network(c: &mut Criterion) {
    let (gt, dets) = dataset(50);
    let (&id, busiest) = dets.iter().max_by_key(|(_, d)| d.len()).unwrap();
    let matrix = build_matrix(busiest, 0, gt.meta(id).unwrap()).unwrap();

    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, arch) in [
        ("set_cnn_default", Architecture::set_cnn()),
        ("set_cnn_small", small_arch()),
    ] {
        let params = ModelParameters::init(arch, 0).unwrap();
        group.bench_function(name, |b| b.iter(|| forward(&params, black_box(&matrix), None).unwrap()));
    }
    group.finish();

    let examples: Vec<TrainExample> = dets
        .iter()
        .flat_map(|(id, d)| {
            let img = gt.meta(*id).unwrap();
            (0..d.len()).map(move |t| TrainExample {
                matrix: build_matrix(d, t, img).unwrap(),
                embedding: None,
                label: d[t].label,
            })
        })
        .take(256)
        .collect();
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let init = ModelParameters::init(small_arch(), 0).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch_256_examples", |b| {
        b.iter(|| train(init.clone(), &examples, &config).unwrap())
    });
    group.finish();

    let params = ModelParameters::init(small_arch(), 0).unwrap();
    let config = CalibrationConfig {
        num_labels: gt.categories.num_labels(),
        ..CalibrationConfig::default()
    };
    let mut group = c.benchmark_group("calibrate");
    group.sample_size(10);
    group.bench_function("dataset_50_images", |b| {
        b.iter(|| calibrate_dataset(&params, &dets, &gt, None, &config).unwrap())
    });
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let (gt, dets) = dataset(200);
    let results = detection_boxes(&dets);
    let gts = ground_truth_boxes(&gt);
    c.bench_function(&format!("coco_ap/{}_results", results.len()), |b| {
        b.iter(|| coco_ap(black_box(&results), &gts))
    });
}

criterion_group!(benches, bench_features, bench_network, bench_eval);
criterion_main!(benches);
