mod common;

use adaptformer::tuning::KaimingInit;
use adaptformer::{AdapterConfig, Insertion, PromptConfig, PromptDepth, TuningMode, VitConfig, VitModel};
use common::{logits, random_images, randomize, refs};

fn small() -> VitConfig {
    VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 12,
        depth: 2,
        num_heads: 3,
        mlp_ratio: 2,
        num_classes: 5,
        ..VitConfig::default()
    }
}

fn assert_matches_reference(m: &VitModel, n: usize) {
    let images = random_images(m, n, 7);
    let got = m.predict(&refs(&images)).unwrap();
    let c = m.config().num_classes;
    for (i, im) in images.iter().enumerate() {
        let want = logits(m, im);
        for (j, (&a, &b)) in got.data()[i * c..(i + 1) * c].iter().zip(&want).enumerate() {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "sample {i} class {j}: {a} vs {b}");
        }
    }
}

fn with_stats(mut m: VitModel) -> VitModel {
    let d = m.config().embed_dim;
    m.set_running_stats((0..d).map(|j| 0.01 * j as f64).collect(), (0..d).map(|j| 0.5 + 0.1 * j as f64).collect()).unwrap();
    m
}

#[test]
fn plain_backbone() {
    assert_matches_reference(&with_stats(VitModel::new(small(), 1).unwrap()), 3);
}

#[test]
fn without_head_norm() {
    let m = VitModel::new(VitConfig { head_norm: false, ..small() }, 2).unwrap();
    assert_matches_reference(&m, 2);
}

#[test]
fn extra_tokens_and_frames() {
    let m = VitModel::new(VitConfig { seq_extra: 3, num_frames: 2, ..small() }, 3).unwrap();
    assert_matches_reference(&with_stats(m), 2);
}

#[test]
fn parallel_adapter_with_live_branch() {
    for scale in [0.1, 1.0, 0.0] {
        let mode = TuningMode::AdaptFormer(AdapterConfig { mid_dim: 4, scale, ..Default::default() });
        let mut m = VitModel::new(small(), 4).unwrap().with_tuning(mode, 4).unwrap();
        randomize(&mut m, "adapter.up", 0.3, 5);
        assert_matches_reference(&with_stats(m), 2);
    }
}

#[test]
fn sequential_adapter_on_subset_of_layers() {
    let mode = TuningMode::AdaptFormer(AdapterConfig {
        mid_dim: 3,
        scale: 0.5,
        insertion: Insertion::Sequential,
        layer_range: Some((2, 2)),
        init: KaimingInit::Normal,
        ..Default::default()
    });
    let mut m = VitModel::new(small(), 6).unwrap().with_tuning(mode, 6).unwrap();
    randomize(&mut m, "adapter.up", 0.3, 7);
    assert!(m.param("blocks.0.adapter.up.weight").is_none());
    assert_matches_reference(&with_stats(m), 2);
}

#[test]
fn deep_and_shallow_prompts() {
    for depth in [PromptDepth::Deep, PromptDepth::Shallow] {
        let mode = TuningMode::Prompt(PromptConfig { num_tokens: 3, depth });
        let m = VitModel::new(small(), 8).unwrap().with_tuning(mode, 8).unwrap();
        assert_matches_reference(&with_stats(m), 2);
    }
}

#[test]
fn batching_does_not_change_eval_logits() {
    let mode = TuningMode::AdaptFormer(AdapterConfig { mid_dim: 2, ..Default::default() });
    let mut m = VitModel::new(small(), 9).unwrap().with_tuning(mode, 9).unwrap();
    randomize(&mut m, "adapter.up", 0.3, 9);
    let m = with_stats(m);
    let images = random_images(&m, 4, 3);
    let batched = m.predict(&refs(&images)).unwrap();
    for (i, im) in images.iter().enumerate() {
        let single = m.predict(&[im.as_slice()]).unwrap();
        assert_eq!(single.data(), &batched.data()[i * 5..(i + 1) * 5]);
    }
}
