use mmtlab::tokenizer::*;
use mmtlab::Tensor;
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = TokenizerConfig> {
    (1usize..4, 1usize..4, 1usize..3, 1usize..3, 1usize..3, 1usize..3, 1usize..4, 1usize..3, 1usize..3, 1usize..3)
        .prop_map(|(ga, gt, ph, pw, vh, vw, vt, gh, gw, gf)| {
            let frames = gt * pw;
            TokenizerConfig {
                audio_bins: ga * ph,
                audio_frames_per_second: frames,
                audio_seconds: 1.0,
                audio_patch: [ph, pw],
                video_frames: gf * vt,
                video_hw: [gh * vh, gw * vw],
                video_patch: [vh, vw, vt],
                embed_dim: 4,
            }
        })
}

fn raw(shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |k| k as f64 * 0.5 - 3.0)
}

proptest! {
    #[test]
    fn patchify_round_trips_and_counts_tokens(cfg in geometry()) {
        for m in Modality::ALL {
            let shape = match m {
                Modality::Audio => cfg.audio_shape().unwrap().to_vec(),
                Modality::Video => cfg.video_shape().to_vec(),
            };
            let x = raw(shape);
            let p = patchify(m, &x, &cfg).unwrap();
            prop_assert_eq!(p.shape(), &[cfg.token_count(m).unwrap(), cfg.patch_volume(m)]);
            prop_assert_eq!(unpatchify(m, &p, &cfg).unwrap(), x);
        }
    }

    #[test]
    fn every_raw_value_lands_in_exactly_one_patch(cfg in geometry()) {
        let x = raw(cfg.video_shape().to_vec());
        let p = patchify(Modality::Video, &x, &cfg).unwrap();
        let mut seen: Vec<f64> = p.data().to_vec();
        seen.sort_by(f64::total_cmp);
        let mut want = x.data().to_vec();
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn audio_count_is_the_product_of_grid_sides(bins in 1usize..6, frames in 1usize..6, ph in 1usize..5, pw in 1usize..5) {
        let cfg = TokenizerConfig {
            audio_bins: bins * ph,
            audio_frames_per_second: frames * pw,
            audio_seconds: 1.0,
            audio_patch: [ph, pw],
            ..TokenizerConfig::default()
        };
        prop_assert_eq!(audio_token_count(&cfg).unwrap(), bins * frames);
    }
}

#[test]
fn reference_token_counts() {
    assert_eq!(audio_token_count(&TokenizerConfig::full_scale()).unwrap(), 400);
    assert_eq!(video_token_count(&TokenizerConfig::full_scale()).unwrap(), 1568);
    let tubes = TokenizerConfig {
        video_frames: 4,
        video_hw: [32, 32],
        video_patch: [16, 16, 2],
        ..TokenizerConfig::full_scale()
    };
    assert_eq!(video_token_count(&tubes).unwrap(), 8);
    let two = TokenizerConfig {
        audio_bins: 32,
        audio_frames_per_second: 20,
        audio_seconds: 0.8,
        ..TokenizerConfig::full_scale()
    };
    assert_eq!(audio_token_count(&two).unwrap(), 2);
}

#[test]
fn nested_loop_patcher_on_a_32_by_32_array() {
    let cfg = TokenizerConfig {
        audio_bins: 32,
        audio_frames_per_second: 32,
        audio_seconds: 1.0,
        audio_patch: [16, 16],
        ..TokenizerConfig::full_scale()
    };
    let x = raw(vec![32, 32]);
    let p = patchify(Modality::Audio, &x, &cfg).unwrap();
    let mut k = 0;
    for bi in 0..2 {
        for fi in 0..2 {
            let mut want = vec![];
            for b in 0..16 {
                for f in 0..16 {
                    want.push(x.data()[(bi * 16 + b) * 32 + fi * 16 + f]);
                }
            }
            assert_eq!(p.row(k), want.as_slice(), "patch {k}");
            k += 1;
        }
    }
}
