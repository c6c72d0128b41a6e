mod common;

use detcal_core::features::{build_matrix, feature_layout, per_image_counts, FEATURE_WIDTH, SUPPORT_ROWS};
use detcal_core::NUM_CLASSES;
use proptest::prelude::*;

fn group(name: &str) -> (usize, usize) {
    let g = feature_layout().groups.into_iter().find(|g| g.name == name).unwrap();
    (g.offset, g.width)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn valid_rows_are_unit_bounded_and_padding_is_zero(seed in any::<u64>(), n in 1usize..=100) {
        let mut rng = common::rng(seed);
        let (img, dets) = common::random_scene(&mut rng, n, 80);
        let target = (seed as usize) % n;
        let m = build_matrix(&dets, target, &img).unwrap();
        prop_assert_eq!(m.rows(), SUPPORT_ROWS);
        prop_assert_eq!(m.width(), FEATURE_WIDTH);
        prop_assert_eq!(m.valid_rows(), n - 1);
        for r in 0..m.valid_rows() {
            prop_assert!(m.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for r in m.valid_rows()..m.rows() {
            for c in 0..m.width() {
                prop_assert_eq!(m.get(r, c).to_bits(), 0u64);
            }
        }
    }

    #[test]
    fn counts_are_shared_by_every_row(seed in any::<u64>(), n in 2usize..=40) {
        let mut rng = common::rng(seed);
        let (img, dets) = common::random_scene(&mut rng, n, 5);
        let m = build_matrix(&dets, 0, &img).unwrap();
        let (off, width) = group("class_counts");
        let first = &m.row(0)[off..off + width];
        for r in 1..m.valid_rows() {
            prop_assert_eq!(&m.row(r)[off..off + width], first);
        }
        let counts = per_image_counts(&dets, 0);
        prop_assert_eq!(counts.support.iter().sum::<u32>() as usize, n - 1);
        for (c, &v) in first.iter().enumerate().take(NUM_CLASSES) {
            prop_assert_eq!(v, counts.support[c] as f64 / 100.0);
            prop_assert!(counts.overlap[c] <= counts.support[c]);
        }
    }

    #[test]
    fn reordering_supports_permutes_rows(seed in any::<u64>(), n in 2usize..=30) {
        let mut rng = common::rng(seed);
        let (img, dets) = common::random_scene(&mut rng, n, 80);
        let base = build_matrix(&dets, 0, &img).unwrap();
        let perm = common::permutation(&mut rng, n - 1);
        let mut reordered = vec![dets[0].clone()];
        reordered.extend(perm.iter().map(|&p| dets[p + 1].clone()));
        let m = build_matrix(&reordered, 0, &img).unwrap();
        prop_assert_eq!(m, base.permute_rows(&perm));
    }

    #[test]
    fn one_hot_labels_match_detections(seed in any::<u64>(), n in 2usize..=30) {
        let mut rng = common::rng(seed);
        let (img, dets) = common::random_scene(&mut rng, n, 80);
        let target = n - 1;
        let m = build_matrix(&dets, target, &img).unwrap();
        let (off, width) = group("labels");
        prop_assert_eq!(width, 2 * NUM_CLASSES);
        let supports: Vec<_> = dets.iter().take(target).collect();
        for (r, s) in supports.iter().enumerate() {
            let row = &m.row(r)[off..off + width];
            prop_assert_eq!(row.iter().sum::<f64>(), 2.0);
            prop_assert_eq!(row[dets[target].label], 1.0);
            prop_assert_eq!(row[NUM_CLASSES + s.label], 1.0);
        }
    }
}

#[test]
fn groups_tile_the_row() {
    let layout = feature_layout();
    let mut next = 0;
    for g in &layout.groups {
        assert_eq!(g.offset, next);
        next += g.width;
    }
    assert_eq!(next, FEATURE_WIDTH);
    assert_eq!(layout.total_width, 357);
}
