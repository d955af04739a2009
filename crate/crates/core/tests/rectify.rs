mod common;

use modvqa::media::{sample_chunks, sample_key_frames, ChunkSet, CropMode, KeyFrameSet, VideoTensor};
use modvqa::nn::{Graph, Tensor};
use modvqa::rectify::{combine, combine_nodes, Architecture, DropoutDraw, ModelConfig, RectifierNodes, RectifierOutput, VqaModel};
use proptest::prelude::*;
use rayon::prelude::*;

use common::cases::{tiny_model_config, tiny_video};
use common::{randomize, rng};

fn trained_like(config: &ModelConfig, seed: u64) -> VqaModel<f32> {
    // Random weights everywhere, so the rectifiers are far from identity.
    let m = VqaModel::<f64>::new(config.clone(), &mut rng(seed)).unwrap();
    let mut p = m.params.clone();
    randomize(&mut p, &mut rng(seed + 1));
    VqaModel { params: p, ..m }.cast()
}

#[test]
fn fresh_rectifiers_are_identity() {
    let config = tiny_model_config();
    let model = VqaModel::<f32>::new(config.clone(), &mut rng(1)).unwrap();
    let video = tiny_video(2);
    let keys = sample_key_frames(&video, config.m_keyframes).unwrap();
    let chunks = sample_chunks(&video, &keys, config.chunk_len, config.hv, config.wv).unwrap();
    for r in [model.spatial_rectifier(&keys).unwrap(), model.temporal_rectifier(&chunks).unwrap()] {
        assert!((r.alpha - 1.0).abs() < 1e-6 && r.beta.abs() < 1e-6, "{r:?}");
    }
    let q = model.predict(&video).unwrap();
    assert!((q.q_s - q.q_b).abs() < 1e-6 && (q.q_t - q.q_b).abs() < 1e-6 && (q.q_st - q.q_b).abs() < 1e-6);
}

#[test]
fn base_quality_is_the_mean_of_frame_scores() {
    let config = tiny_model_config();
    let model = trained_like(&config, 3);
    let video = tiny_video(4);
    let keys = sample_key_frames(&video, 3).unwrap();
    let mut r = rng(0);
    let all = model.base_quality(&keys, CropMode::Center, &mut r).unwrap();
    let singles: Vec<f64> = (0..3)
        .map(|i| {
            let one = KeyFrameSet {
                frames: vec![keys.frames[i].clone()],
                indices: vec![keys.indices[i]],
            };
            model.base_quality(&one, CropMode::Center, &mut r).unwrap()
        })
        .collect();
    assert!((all - singles.iter().sum::<f64>() / 3.0).abs() < 1e-6);

    let same = KeyFrameSet {
        frames: vec![keys.frames[0].clone(); 4],
        indices: vec![0; 4],
    };
    assert!((model.base_quality(&same, CropMode::Center, &mut r).unwrap() - singles[0]).abs() < 1e-6);
    let empty = KeyFrameSet {
        frames: vec![],
        indices: vec![],
    };
    assert!(model.base_quality(&empty, CropMode::Center, &mut r).is_err());
}

#[test]
fn temporal_rectifier_ignores_chunk_duplication() {
    let config = tiny_model_config();
    let model = trained_like(&config, 5);
    let video = tiny_video(6);
    let keys = sample_key_frames(&video, 2).unwrap();
    let chunks = sample_chunks(&video, &keys, config.chunk_len, config.hv, config.wv).unwrap();
    let doubled = ChunkSet {
        chunks: chunks.chunks.iter().chain(&chunks.chunks).cloned().collect(),
        center_indices: chunks.center_indices.iter().chain(&chunks.center_indices).copied().collect(),
    };
    let a = model.temporal_rectifier(&chunks).unwrap();
    let b = model.temporal_rectifier(&doubled).unwrap();
    assert!((a.alpha - b.alpha).abs() < 1e-6 && (a.beta - b.beta).abs() < 1e-6);
    assert!((a.alpha - 1.0).abs() > 1e-3, "randomized head should move alpha");
}

#[test]
fn head_widths_follow_the_concatenation_rule() {
    let config = ModelConfig {
        m_keyframes: 5,
        k_levels: 4,
        subband_channels: vec![3, 16, 32],
        ..ModelConfig::default()
    };
    let arch = Architecture::new(&config).unwrap();
    assert_eq!(arch.spatial_head.in_dim, 5 * 4 * 2 * 32);
    assert_eq!(arch.temporal_head.in_dim, 16);
    assert_eq!(arch.base_head.in_dim, 64);
}

#[test]
fn degenerate_single_frame_video() {
    let config = ModelConfig {
        m_keyframes: 1,
        ..tiny_model_config()
    };
    let model = trained_like(&config, 7);
    let v = tiny_video(8);
    let one = VideoTensor::new(vec![v.frames()[0].clone()], 30.0, "one", "s").unwrap();
    let q = model.predict(&one).unwrap();
    assert!(q.as_array().iter().all(|x| x.is_finite()));
    let too_few = ModelConfig {
        m_keyframes: 2,
        ..config
    };
    assert!(VqaModel::<f32>::new(too_few, &mut rng(0)).unwrap().predict(&one).is_err());
}

#[test]
fn quad_is_consistent_with_the_combiner() {
    let config = tiny_model_config();
    let model = trained_like(&config, 9);
    let video = tiny_video(10);
    let q = model.predict(&video).unwrap();
    let keys = sample_key_frames(&video, config.m_keyframes).unwrap();
    let chunks = sample_chunks(&video, &keys, config.chunk_len, config.hv, config.wv).unwrap();
    let s = model.spatial_rectifier(&keys).unwrap();
    let t = model.temporal_rectifier(&chunks).unwrap();
    let q_b = model.base_quality(&keys, CropMode::Center, &mut rng(0)).unwrap();
    assert!((q.q_b - q_b).abs() < 1e-5);
    assert!((q.q_s - s.apply(q_b)).abs() < 1e-5);
    assert!((q.q_t - t.apply(q_b)).abs() < 1e-5);
    let st = combine(q_b, Some(s), Some(t), &DropoutDraw::all_active()).unwrap().q;
    assert!((q.q_st - st).abs() < 1e-5);
}

#[test]
fn parallel_prediction_matches_serial() {
    let config = tiny_model_config();
    let model = trained_like(&config, 11);
    let videos: Vec<_> = (0..6).map(tiny_video).collect();
    let serial: Vec<_> = videos.iter().map(|v| model.predict(v).unwrap()).collect();
    let parallel: Vec<_> = videos.par_iter().map(|v| model.predict(v).unwrap()).collect();
    assert_eq!(serial, parallel);
}

#[test]
fn gradient_of_q_st_in_alpha_s() {
    for (q_b, a_s, a_t) in [(0.7, 2.0, 0.5), (-0.3, 0.1, 4.0), (1.2, 1.0, 1.0)] {
        let mut g = Graph::<f64>::new();
        let q = g.leaf(Tensor::scalar(q_b), false);
        let alpha_s = g.leaf(Tensor::scalar(a_s), true);
        let alpha_t = g.leaf(Tensor::scalar(a_t), true);
        let b_s = g.leaf(Tensor::scalar(0.1), true);
        let b_t = g.leaf(Tensor::scalar(-0.2), true);
        let s = RectifierNodes { alpha: alpha_s, beta: b_s };
        let t = RectifierNodes { alpha: alpha_t, beta: b_t };
        let out = combine_nodes(&mut g, q, Some(s), Some(t)).unwrap();
        g.backward(out).unwrap();
        let want = q_b * a_t.sqrt() / (2.0 * a_s.sqrt());
        assert!((g.grad(alpha_s).unwrap().item() - want).abs() < 1e-12);
        assert!((g.grad(b_s).unwrap().item() - 0.5).abs() < 1e-15);
    }
}

fn ro(alpha: f64, beta: f64) -> Option<RectifierOutput> {
    Some(RectifierOutput { alpha, beta })
}

proptest! {
    #[test]
    fn combined_parameters_lie_between_the_inputs(
        a_s in 1e-3f64..10.0, a_t in 1e-3f64..10.0, b_s in -1.0f64..1.0, b_t in -1.0f64..1.0, q_b in -1.0f64..1.0,
        u_s in 0.0f64..1.0, u_t in 0.0f64..1.0,
    ) {
        let both = combine(q_b, ro(a_s, b_s), ro(a_t, b_t), &DropoutDraw::all_active()).unwrap();
        prop_assert!(both.alpha >= a_s.min(a_t) * (1.0 - 1e-12) && both.alpha <= a_s.max(a_t) * (1.0 + 1e-12));
        prop_assert!(both.beta >= b_s.min(b_t) - 1e-15 && both.beta <= b_s.max(b_t) + 1e-15);

        // Swapping the two rectifiers together with their flags changes nothing.
        let d = DropoutDraw::new(u_s, u_t, 0.2, 0.2);
        let swapped = DropoutDraw::new(u_t, u_s, 0.2, 0.2);
        let x = combine(q_b, ro(a_s, b_s), ro(a_t, b_t), &d).unwrap();
        let y = combine(q_b, ro(a_t, b_t), ro(a_s, b_s), &swapped).unwrap();
        prop_assert!((x.q - y.q).abs() < 1e-12);
        prop_assert_eq!(d.active_s, u_s >= 0.2);
    }
}
