mod common;

use modvqa::pyramid::{bicubic_resample, build_pyramid, compute_rho, level_sizes, upsample_subbands, RhoMode};
use modvqa::Image;
use proptest::prelude::*;
use rand::Rng;

use common::{naive_bicubic, random_image, rng};

#[test]
fn resampler_matches_per_pixel_oracle() {
    let mut r = rng(7);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(1..=64), r.gen_range(1..=64));
        let (oh, ow) = (r.gen_range(1..=64), r.gen_range(1..=64));
        let img = random_image(&mut r, 3, h, w);
        let fast = bicubic_resample(&img, oh, ow).unwrap();
        let slow = naive_bicubic(&img, oh, ow);
        let err = fast.data().iter().zip(&slow).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{h}x{w} -> {oh}x{ow}: {err}");
    }
}

#[test]
fn reconstruction_over_ratios_and_depths() {
    let mut r = rng(8);
    for _ in 0..10 {
        let (h, w) = (r.gen_range(32..=128), r.gen_range(32..=128));
        let img = random_image(&mut r, 3, h, w);
        for rho in [1.0, 1.2054, 2.0, 3.7] {
            for k in 1..=5 {
                let p = build_pyramid(&img, rho, k).unwrap();
                assert_eq!(p.levels(), k);
                let err = p.reconstruct().unwrap().max_abs_diff(&img);
                assert!(err < 1e-5, "rho {rho} k {k}: {err}");
            }
        }
    }
}

#[test]
fn constant_frames_have_empty_subbands() {
    let img = Image::filled(3, 45, 70, 0.37f32);
    let p = build_pyramid(&img, 1.7, 4).unwrap();
    for z in &p.subbands {
        assert!(z.data().iter().all(|v| v.abs() < 1e-6));
    }
    for z in upsample_subbands(&p, 45, 70).unwrap() {
        assert_eq!((z.height(), z.width()), (45, 70));
    }
}

#[test]
fn rho_modes() {
    // 960/(224*4) for the linear rule; the geometric rule lands exactly on the base size.
    let lin = compute_rho(960, 1280, 224, 224, 4, RhoMode::Linear).unwrap();
    assert!((lin - 960.0 / 896.0).abs() < 1e-12);
    let geo = compute_rho(960, 1280, 224, 224, 4, RhoMode::Geometric).unwrap();
    assert!((geo.powi(4) - 960.0 / 224.0).abs() < 1e-9);
    assert_eq!(compute_rho(100, 100, 224, 224, 4, RhoMode::Linear).unwrap(), 1.0);
    assert!(compute_rho(0, 100, 224, 224, 4, RhoMode::Linear).is_err());
}

#[test]
fn rejects_bad_arguments() {
    let img = Image::<f32>::zeros(3, 8, 8);
    assert!(build_pyramid(&img, 2.0, 0).is_err());
    assert!(build_pyramid(&img, f64::NAN, 2).is_err());
    assert!(bicubic_resample(&img, 0, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn level_sizes_shrink_monotonically(h in 1usize..300, w in 1usize..300, rho in 1.0f64..4.0, k in 1usize..6) {
        let sizes = level_sizes(h, w, rho, k);
        prop_assert_eq!(sizes.len(), k + 1);
        prop_assert_eq!(sizes[0], (h, w));
        for pair in sizes.windows(2) {
            prop_assert!(pair[1].0 <= pair[0].0 && pair[1].1 <= pair[0].1);
            prop_assert!(pair[1].0 >= 1 && pair[1].1 >= 1);
        }
    }

    #[test]
    fn resampling_preserves_constants(c in 0.0f32..1.0, h in 1usize..20, w in 1usize..20, oh in 1usize..20, ow in 1usize..20) {
        let img = Image::filled(1, h, w, c);
        let out = bicubic_resample(&img, oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|v| (v - c).abs() < 1e-6));
    }

    #[test]
    fn reconstruction_is_exact_for_any_ratio(seed in 0u64..1000, rho in 1.0f64..4.0, k in 1usize..5) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(8..40), r.gen_range(8..40));
        let img = random_image(&mut r, 1, h, w);
        let p = build_pyramid(&img, rho, k).unwrap();
        prop_assert!(p.reconstruct().unwrap().max_abs_diff(&img) < 1e-5);
    }
}
