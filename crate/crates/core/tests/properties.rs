//! Property tests over the public API.

use approx::assert_abs_diff_eq;
use patchnet_core::analysis::{converged_probs, loss_landscape, FeatureCounts};
use patchnet_core::imaging::{augment, color_constancy, gamma_correct, resize, zoom, AugmentOp, ZoomAnchor};
use patchnet_core::metrics::{auroc_scores, exact_match_at, recall_at, BinaryMask};
use patchnet_core::nn::{kaiming_init, subnet_forward};
use patchnet_core::patchcore::global_forward;
use patchnet_core::tensor::{dot, elementwise, uniform_sample, ElementwiseOp, Operand};
use patchnet_core::{Heatmap, Image, PatchConfig, PatchDims, RngState, SubnetParams, Tensor};
use proptest::prelude::*;

fn image_strategy(max_side: usize, channels: usize) -> impl Strategy<Value = Image> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(h, w)| {
        proptest::collection::vec(any::<u8>(), h * w * channels)
            .prop_map(move |data| Image::new(h, w, channels, data).unwrap())
    })
}

fn scored_mask(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            Just(h),
            Just(w),
            proptest::collection::vec((0u32..=8).prop_map(|v| v as f64 / 8.0), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

fn heat(h: usize, w: usize, v: Vec<f64>) -> Heatmap<f64> {
    Heatmap::new(Tensor::new(vec![h, w], v).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn add_commutes_and_dot_is_symmetric(v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let a = Tensor::from_vec(v.clone());
        let b = Tensor::from_vec(v.iter().rev().copied().collect());
        let ab = elementwise(ElementwiseOp::Add, &a, Operand::Tensor(&b)).unwrap();
        let ba = elementwise(ElementwiseOp::Add, &b, Operand::Tensor(&a)).unwrap();
        prop_assert_eq!(ab, ba);
        assert_abs_diff_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn rotations_and_flips_are_involutions(img in image_strategy(9, 3)) {
        for op in [AugmentOp::Rotate180, AugmentOp::HFlip, AugmentOp::VFlip] {
            let twice = augment(&augment(&img, op).unwrap(), op).unwrap();
            prop_assert_eq!(&twice, &img);
        }
        let both = augment(&augment(&img, AugmentOp::HFlip).unwrap(), AugmentOp::VFlip).unwrap();
        prop_assert_eq!(both, augment(&img, AugmentOp::Rotate180).unwrap());
    }

    #[test]
    fn gamma_identity_and_fixed_points(img in image_strategy(8, 1), g in 0.2f64..5.0) {
        prop_assert_eq!(gamma_correct(&img, 1.0).unwrap(), img.clone());
        let out = gamma_correct(&img, g).unwrap();
        for (&a, &b) in img.data().iter().zip(out.data()) {
            if a == 0 || a == 255 {
                prop_assert_eq!(a, b);
            }
        }
        let ends = Image::new(1, 2, 1, vec![0, 255]).unwrap();
        prop_assert_eq!(gamma_correct(&ends, g).unwrap(), ends);
    }

    #[test]
    fn gamma_is_monotone(g in 0.2f64..5.0) {
        let ramp = Image::new(1, 256, 1, (0..=255).collect()).unwrap();
        let out = gamma_correct(&ramp, g).unwrap();
        prop_assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn achromatic_images_survive_color_constancy(gray in image_strategy(7, 1), p in 1.0f64..8.0) {
        let data = gray.data().iter().flat_map(|&v| [v, v, v]).collect();
        let rgb = Image::new(gray.height(), gray.width(), 3, data).unwrap();
        prop_assert_eq!(color_constancy(&rgb, p).unwrap(), rgb);
    }

    #[test]
    fn zoom_and_resize_dims(img in image_strategy(12, 1), scale in 1.0f64..1.2, h in 1usize..20, w in 1usize..20) {
        let z = zoom(&img, scale, ZoomAnchor::Center, None).unwrap();
        prop_assert_eq!((z.height(), z.width(), z.channels()), (img.height(), img.width(), 1));
        let r = resize(&img, h, w).unwrap();
        prop_assert_eq!((r.height(), r.width()), (h, w));
        prop_assert_eq!(resize(&img, img.height(), img.width()).unwrap(), img);
    }

    #[test]
    fn auroc_is_rank_based((h, w, s, m) in scored_mask(6)) {
        let pos = m.iter().filter(|&&b| b).count();
        prop_assume!(pos > 0 && pos < m.len());
        let a = auroc_scores(&s, &m).unwrap();
        // strictly increasing transform keeps every comparison
        let squashed: Vec<f64> = s.iter().map(|v| v * v * v + 0.25).collect();
        prop_assert_eq!(auroc_scores(&squashed, &m).unwrap(), a);
        // swapping the classes complements it
        let flipped: Vec<bool> = m.iter().map(|b| !b).collect();
        assert_abs_diff_eq!(a + auroc_scores(&s, &flipped).unwrap(), 1.0, epsilon = 1e-12);
        // reversing the scores does the same
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(a + auroc_scores(&neg, &m).unwrap(), 1.0, epsilon = 1e-12);
        let _ = (h, w);
    }

    #[test]
    fn threshold_metrics((h, w, s, m) in scored_mask(6), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let hm = heat(h, w, s);
        let mask = BinaryMask::new(h, w, m.clone()).unwrap();
        let inverse = BinaryMask::new(h, w, m.iter().map(|b| !b).collect()).unwrap();
        let e = exact_match_at(&hm, &mask, lo).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        assert_abs_diff_eq!(e + exact_match_at(&hm, &inverse, lo).unwrap(), 1.0, epsilon = 1e-12);
        if m.iter().any(|&b| b) {
            prop_assert!(recall_at(&hm, &mask, lo).unwrap() >= recall_at(&hm, &mask, hi).unwrap());
        }
    }

    #[test]
    fn closed_form_shape(a in 1u64..10_000, b in 1u64..10_000) {
        let p = converged_probs(FeatureCounts::new(a, b).unwrap()).unwrap();
        prop_assert_eq!(p.p1, 1.0);
        prop_assert!((0.0..0.5).contains(&p.p0));
        if a > b {
            // the loss is stationary in p0 there, approached from p1 -> 1
            let l = loss_landscape(FeatureCounts::new(a, b).unwrap(), p.p0, 1.0 - 1e-9).unwrap();
            prop_assert!(l.d_p0.abs() < 1e-6, "{}", l.d_p0);
            let bigger_b = converged_probs(FeatureCounts::new(a, b + 1).unwrap()).unwrap();
            prop_assert!(bigger_b.p0 < p.p0 || bigger_b.p0 == 0.0);
        } else {
            prop_assert_eq!(p.p0, 0.0);
        }
    }
}

fn small_params(seed: u64) -> SubnetParams<f32> {
    kaiming_init(&mut RngState::new(seed), PatchDims::new(3, 3, 1).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weight_sharing(seed in any::<u64>(), batch in 1usize..6, rot in 0usize..6) {
        let params = small_params(seed);
        let mut rng = RngState::new(seed ^ 1);
        let x: Tensor<f32> = uniform_sample(&mut rng, 0.0, 1.0, &[batch, 1, 3, 3]).unwrap();
        let q = subnet_forward(&params, &x).unwrap();
        prop_assert!(q.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let k = rot % batch;
        let mut rotated = x.data().to_vec();
        rotated.rotate_left(k * 9);
        let qr = subnet_forward(&params, &Tensor::new(vec![batch, 1, 3, 3], rotated).unwrap()).unwrap();
        let mut expected = q.data().to_vec();
        expected.rotate_left(k);
        prop_assert_eq!(qr.data(), &expected[..]);
    }

    #[test]
    fn global_is_patch_mean(seed in any::<u64>(), img in image_strategy(8, 1).prop_filter("fits", |i| i.height() >= 3 && i.width() >= 3)) {
        let params = small_params(seed);
        let pred = global_forward(&params, &img, &PatchConfig::square(3, 2)).unwrap();
        let probs = pred.patch_probs.data();
        let mean = probs.iter().map(|&v| v as f64).sum::<f64>() / probs.len() as f64;
        assert_abs_diff_eq!(pred.p_global as f64, mean, epsilon = 1e-6);
    }
}
