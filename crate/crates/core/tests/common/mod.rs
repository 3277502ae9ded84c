#![allow(dead_code)]

use mmtlab::mbt::{FusionMode, HeadSpec, ModelConfig};
use mmtlab::pipeline::Prepared;
use mmtlab::rng::SplitMix64;
use mmtlab::tokenizer::{Modality, TokenizerConfig};
use mmtlab::Tensor;

/// 4 audio tokens of volume 4, 4 video tubes of volume 8.
pub fn small_tok(dim: usize) -> TokenizerConfig {
    TokenizerConfig {
        audio_bins: 4,
        audio_frames_per_second: 4,
        audio_seconds: 1.0,
        audio_patch: [2, 2],
        video_frames: 2,
        video_hw: [4, 4],
        video_patch: [2, 2, 2],
        embed_dim: dim,
    }
}

pub fn small_model(dim: usize, depth: usize, fusion_layer: usize) -> ModelConfig {
    ModelConfig {
        depth,
        heads: 2,
        embed_dim: dim,
        fusion_layer,
        bottleneck_count: 2,
        fusion_mode: FusionMode::Bottleneck,
        heads_spec: vec![HeadSpec::new("A", 3), HeadSpec::new("B", 2)],
        mlp_ratio: 2,
        attention_dropout: 0.0,
    }
}

pub fn random_samples(tok: &TokenizerConfig, n: usize, seed: u64) -> Vec<Prepared> {
    let mut r = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let patches = Modality::ALL.map(|m| {
                let rows = tok.token_count(m).unwrap();
                Tensor::from_fn(vec![rows, tok.patch_volume(m)], |_| r.normal())
            });
            Prepared {
                patches,
                labels: vec![r.below(3) as usize, r.below(2) as usize],
                present: [true, true],
            }
        })
        .collect()
}
