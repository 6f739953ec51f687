mod common;

use common::{flood_fill_components, random_dims, random_label_map, random_mask, rng};
use proptest::prelude::*;
use rand::Rng;
use unetdr::metrics::{dice_score, evaluate_volume, hausdorff_distance, MetricsReport};
use unetdr::postprocess::{connected_components, largest_component_filter};
use unetdr::volume::Spacing;

fn spacing() -> impl Strategy<Value = Spacing> {
    (0.3f64..3.0, 0.3f64..3.0, 0.5f64..5.0).prop_map(|(x, y, z)| Spacing::new(x, y, z).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn dice_is_symmetric_and_bounded(seed: u64) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 7);
        let (da, db) = (r.random_range(0.0..0.6), r.random_range(0.0..0.6));
        let (a, b) = (random_mask(&mut r, dims, da), random_mask(&mut r, dims, db));
        let ab = dice_score(&a, &b).unwrap();
        prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(ab == 1.0, a == b);
    }

    #[test]
    fn hausdorff_is_symmetric_and_scales_with_spacing(seed: u64, s in spacing(), factor in 0.25f64..4.0) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 7);
        let (a, b) = (random_mask(&mut r, dims, 0.3), random_mask(&mut r, dims, 0.3));
        let ab = hausdorff_distance(&a, &b, s).unwrap();
        prop_assert_eq!(ab, hausdorff_distance(&b, &a, s).unwrap());
        if !a.is_empty() {
            prop_assert_eq!(hausdorff_distance(&a, &a, s).unwrap(), Some(0.0));
        }
        let scaled = hausdorff_distance(&a, &b, s.scaled(factor)).unwrap();
        match (ab, scaled) {
            (Some(x), Some(y)) => prop_assert!((x * factor - y).abs() <= 1e-9 * y.max(1.0)),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn components_match_flood_fill(seed: u64, density in 0.1f64..0.7) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 8);
        let m = random_mask(&mut r, dims, density);
        let cc = connected_components(&m);
        prop_assert_eq!(&cc.ids, &flood_fill_components(&m));
        prop_assert_eq!(cc.sizes.iter().sum::<usize>(), m.count());
    }

    #[test]
    fn largest_component_filter_properties(seed: u64) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 8);
        let labels = random_label_map(&mut r, dims, 5);
        let filtered = largest_component_filter(&labels, 5).unwrap();
        prop_assert_eq!(&largest_component_filter(&filtered, 5).unwrap(), &filtered);
        for c in 1..5u8 {
            let (before, after) = (labels.mask(c), filtered.mask(c));
            prop_assert!(after.is_subset_of(&before));
            let comps = connected_components(&before);
            prop_assert_eq!(after.count(), comps.sizes.iter().copied().max().unwrap_or(0));
            prop_assert!(connected_components(&after).count() <= 1);
        }
        // Removed voxels become background; nothing else changes.
        for (a, b) in labels.data().iter().zip(filtered.data()) {
            prop_assert!(a == b || *b == 0);
        }
    }

    #[test]
    fn report_text_round_trips(seed: u64, s in spacing()) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 6);
        let gt = random_label_map(&mut r, dims, 5);
        let pred = random_label_map(&mut r, dims, 5);
        let report = evaluate_volume(&gt, &pred, s, 5).unwrap();
        let text = report.to_text();
        prop_assert_eq!(MetricsReport::from_text(&text).unwrap().to_text(), text);
        let same = evaluate_volume(&gt, &gt, s, 5).unwrap();
        prop_assert_eq!(same.mean_dsc, 1.0);
    }
}
