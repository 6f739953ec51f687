mod common;

use common::{random_dims, random_label_map, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use unetdr::preprocess::{
    center_crop, clahe_slice, crop_offset, flip_volume, mean_std, normalize_volume, random_augment, read_labels, read_volume, uncrop_labels,
    window_and_scale, write_labels, write_volume, AugmentParams, AugmentRanges, ClaheConfig, FlipAxis,
};
use unetdr::volume::{Dims, Spacing, Volume};

fn labelled_volume(r: &mut ChaCha8Rng, dims: Dims) -> Volume {
    let n = dims.iter().product();
    let data = (0..n).map(|_| r.random_range(-1200.0..1200.0)).collect();
    let labels = random_label_map(r, dims, 5);
    Volume::new(dims, Spacing::new(0.8, 0.8, 2.5).unwrap(), data).unwrap().with_labels(labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_ignores_positive_affine_maps(seed: u64, scale in 0.01f64..100.0, offset in -1000.0f64..1000.0) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 6);
        let v = labelled_volume(&mut r, dims);
        let (_, std) = mean_std(v.data());
        prop_assume!(std > 0.0);
        let a = normalize_volume(&v).unwrap();
        let b = normalize_volume(&v.map_data(|x| scale * x + offset)).unwrap();
        let (m, s) = mean_std(a.data());
        prop_assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn window_maps_into_unit_interval_monotonically(seed: u64, lo in -1500.0f64..0.0, width in 1.0f64..3000.0) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 6);
        let v = labelled_volume(&mut r, dims);
        let out = window_and_scale(&v, lo, lo + width).unwrap();
        prop_assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let mut order: Vec<usize> = (0..v.data().len()).collect();
        order.sort_by(|&i, &j| v.data()[i].total_cmp(&v.data()[j]));
        for pair in order.windows(2) {
            prop_assert!(out.data()[pair[0]] <= out.data()[pair[1]]);
        }
    }

    #[test]
    fn crop_and_uncrop_keep_labels_aligned(seed: u64) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 9);
        let v = labelled_volume(&mut r, dims);
        let (ch, cw) = (r.random_range(1..=dims[1]), r.random_range(1..=dims[2]));
        let cropped = center_crop(&v, ch, cw).unwrap();
        let (oy, ox) = crop_offset(dims[1], dims[2], ch, cw).unwrap();
        let labels = v.labels().unwrap();
        let back = uncrop_labels(cropped.labels().unwrap(), dims[1], dims[2]).unwrap();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let inside = (oy..oy + ch).contains(&y) && (ox..ox + cw).contains(&x);
                    let expected = if inside { labels.get(z, y, x) } else { 0 };
                    prop_assert_eq!(back.get(z, y, x), expected);
                    if inside {
                        prop_assert_eq!(cropped.get(z, y - oy, x - ox), v.get(z, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions(seed: u64) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 7);
        let v = labelled_volume(&mut r, dims);
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            let once = flip_volume(&v, axis);
            prop_assert_eq!(&flip_volume(&once, axis), &v);
            prop_assert_eq!(once.labels().unwrap().counts(5), v.labels().unwrap().counts(5));
        }
        let [_, h, w] = v.dims();
        let hf = flip_volume(&v, FlipAxis::Horizontal);
        prop_assert_eq!(hf.get(0, 0, 0), v.get(0, 0, w - 1));
        let vf = flip_volume(&v, FlipAxis::Vertical);
        prop_assert_eq!(vf.get(0, 0, 0), v.get(0, h - 1, 0));
    }

    #[test]
    fn augmentation_only_produces_existing_labels(seed: u64, aug_seed: u64) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(4..20), r.random_range(4..20));
        let image: Vec<f64> = (0..h * w).map(|_| r.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(1..5)).collect();
        let ranges = AugmentRanges { flip_prob: 0.5, ..AugmentRanges::default() };
        let params = AugmentParams::from_seed(aug_seed, &ranges);
        let (img, lab) = random_augment(&image, &labels, h, w, &params).unwrap();
        prop_assert_eq!(lab.len(), h * w);
        prop_assert!(lab.iter().all(|l| *l == 0 || labels.contains(l)));
        let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(img.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        let (same_img, same_lab) = random_augment(&image, &labels, h, w, &AugmentParams::identity()).unwrap();
        prop_assert_eq!(same_img, image);
        prop_assert_eq!(same_lab, labels);
    }

    #[test]
    fn clahe_stays_in_unit_range(seed: u64, tiles in 1usize..5, clip in 1.0f64..4.0) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(tiles..24), r.random_range(tiles..24));
        let slice: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let out = clahe_slice(&slice, h, w, &ClaheConfig { clip_limit: clip, tiles: (tiles, tiles) }).unwrap();
        prop_assert_eq!(out.len(), h * w);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn nifti_round_trips(seed: u64) {
        let mut r = rng(seed);
        let dims = random_dims(&mut r, 8);
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.random_range(-1000.0f32..1000.0) as f64).collect();
        let spacing = Spacing::new(r.random_range(0.5f32..2.0) as f64, r.random_range(0.5f32..2.0) as f64, r.random_range(1.0f32..5.0) as f64).unwrap();
        let image = Volume::new(dims, spacing, data).unwrap();
        let labels = random_label_map(&mut r, dims, 5);
        let tmp = TempDir::new().unwrap();
        let (ip, lp) = (tmp.path().join("i.nii"), tmp.path().join("l.nii"));
        write_volume(&image, &ip).unwrap();
        write_labels(&labels, spacing, &lp).unwrap();
        let back = read_volume(&ip).unwrap();
        prop_assert_eq!(back.dims(), dims);
        prop_assert_eq!(back.spacing, spacing);
        prop_assert_eq!(back.data(), image.data());
        prop_assert_eq!(read_labels(&lp).unwrap(), labels);
    }
}
