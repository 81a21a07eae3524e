mod common;

use chansel_core::data::{augment, make_synthetic, two_views, AugmentationConfig, LabeledImage};
use chansel_core::rng;
use chansel_core::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn augmentation_preserves_shape_and_range(seed in any::<u64>(), side in 4usize..40, blur in any::<bool>()) {
        let im = &make_synthetic(2, 1, side, seed).unwrap()[0];
        let mut cfg = AugmentationConfig::for_side(side);
        if blur {
            cfg.blur_p = 1.0;
        }
        let out = augment(&im.pixels, &cfg, &mut rng::stream(seed, &[1]));
        prop_assert_eq!(out.shape(), im.pixels.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn views_of_the_same_anchor_differ() {
    let im = &make_synthetic(1, 1, 32, 0).unwrap()[0];
    let cfg = AugmentationConfig::for_side(32);
    let mut r = rng::stream(1, &[]);
    let same = (0..1000).filter(|_| {
        let (a, b) = two_views(im, &cfg, &mut r);
        a == b
    }).count();
    assert_eq!(same, 0);
}

#[test]
fn identity_config_is_identity() {
    let im = &make_synthetic(1, 1, 16, 2).unwrap()[0];
    let (a, b) = two_views(im, &AugmentationConfig::identity(), &mut rng::stream(0, &[]));
    assert!(a.max_abs_diff(&im.pixels).unwrap() < 1e-6);
    assert!(b.max_abs_diff(&im.pixels).unwrap() < 1e-6);
}

#[test]
fn same_stream_gives_same_views() {
    let im = &make_synthetic(1, 1, 16, 3).unwrap()[0];
    let cfg = AugmentationConfig::for_side(16);
    let a = two_views(im, &cfg, &mut rng::stream(9, &[4]));
    let b = two_views(im, &cfg, &mut rng::stream(9, &[4]));
    assert_eq!(a, b);
}

#[test]
fn labeled_image_validates() {
    assert!(LabeledImage::new(Tensor::full(&[3, 4, 4], 1.5f32), 0).is_err());
    assert!(LabeledImage::new(Tensor::full(&[3, 4, 5], 0.5f32), 0).is_err());
    assert!(LabeledImage::new(Tensor::full(&[3, 4, 4], 0.5f32), 0).is_ok());
}

#[test]
fn synthetic_set_is_balanced_and_in_range() {
    let set = make_synthetic(10, 7, 8, 5).unwrap();
    assert_eq!(set.len(), 70);
    for c in 0..10 {
        assert_eq!(set.iter().filter(|im| im.label == c).count(), 7);
    }
    assert!(set.iter().all(|im| im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn synthetic_classes_are_separable_by_raw_pixel_nearest_neighbour() {
    let train = make_synthetic(10, 20, 16, 11).unwrap();
    let test: Vec<_> = make_synthetic(10, 30, 16, 11).unwrap().into_iter().skip(200).collect();
    let hits = test
        .iter()
        .filter(|q| {
            let best = train
                .iter()
                .min_by(|a, b| {
                    let d = |x: &LabeledImage| x.pixels.data().iter().zip(q.pixels.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f32>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            best.label == q.label
        })
        .count();
    assert!(hits as f64 / test.len() as f64 > 0.9, "{hits}/{}", test.len());
}

#[test]
fn synthetic_generation_is_seeded() {
    assert_eq!(make_synthetic(2, 5, 8, 4).unwrap(), make_synthetic(2, 5, 8, 4).unwrap());
    assert_ne!(make_synthetic(2, 5, 8, 4).unwrap(), make_synthetic(2, 5, 8, 5).unwrap());
}
