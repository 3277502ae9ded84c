mod common;

use common::{random_samples, small_model, small_tok};
use mmtlab::mbt::*;
use mmtlab::missing::TokenSource;
use mmtlab::nn::{Graph, ParamStore};
use mmtlab::pipeline::{batch_logits, ModelKind};
use mmtlab::rng::SplitMix64;
use mmtlab::tokenizer::{Modality, TokenSequence, TokenizerConfig};
use mmtlab::Tensor;

type Rows = Vec<Vec<f64>>;

fn get(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

fn linear(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let w = get(store, &format!("{prefix}.w"));
    let b = get(store, &format!("{prefix}.b"));
    let (fan_in, fan_out) = (w.rows(), w.cols());
    x.iter()
        .map(|r| {
            (0..fan_out)
                .map(|j| b.data()[j] + (0..fan_in).map(|i| r[i] * w.row(i)[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let g = get(store, &format!("{prefix}.gain"));
    let b = get(store, &format!("{prefix}.bias"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn block(store: &ParamStore, prefix: &str, heads: usize, x: &Rows) -> Rows {
    let h = layer_norm(store, &format!("{prefix}.norm1"), x);
    let q = linear(store, &format!("{prefix}.attn.q"), &h);
    let k = linear(store, &format!("{prefix}.attn.k"), &h);
    let v = linear(store, &format!("{prefix}.attn.v"), &h);
    let d = x[0].len();
    let dh = d / heads;
    let n = x.len();
    let mut att = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                att[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let x = add(x, &linear(store, &format!("{prefix}.attn.o"), &att));
    let h = layer_norm(store, &format!("{prefix}.norm2"), &x);
    let h: Rows = linear(store, &format!("{prefix}.fc1"), &h)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&x, &linear(store, &format!("{prefix}.fc2"), &h))
}

/// Loop-by-loop bottleneck forward for one sample.
fn trace(params: &MbtParameters, tokens: [&Tensor; 2]) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let s = &params.store;
    let rows = |t: &Tensor| -> Rows { (0..t.rows()).map(|i| t.row(i).to_vec()).collect() };
    let mut x: Vec<Rows> = Modality::ALL
        .iter()
        .map(|m| {
            let mut r = rows(&get(s, &format!("{m}.cls")));
            r.extend(rows(tokens[m.index()]));
            r
        })
        .collect();
    let mut z = rows(&get(s, "bottleneck"));
    for l in 0..cfg.depth {
        let mut zhat = vec![vec![0.0; cfg.embed_dim]; cfg.bottleneck_count];
        for m in Modality::ALL {
            let i = m.index();
            let prefix = format!("{m}.blocks.{l}");
            if l < cfg.fusion_layer {
                x[i] = block(s, &prefix, cfg.heads, &x[i]);
            } else {
                let len = x[i].len();
                let mut inp = x[i].clone();
                inp.extend(z.iter().cloned());
                let out = block(s, &prefix, cfg.heads, &inp);
                x[i] = out[..len].to_vec();
                for (acc, r) in zhat.iter_mut().zip(&out[len..]) {
                    for (a, v) in acc.iter_mut().zip(r) {
                        *a += v / 2.0;
                    }
                }
            }
        }
        if l >= cfg.fusion_layer {
            z = zhat;
        }
    }
    cfg.heads_spec
        .iter()
        .map(|h| {
            let mut avg = vec![0.0; h.classes];
            for m in Modality::ALL {
                let cls = layer_norm(s, &format!("{m}.norm"), &vec![x[m.index()][0].clone()]);
                let logits = linear(s, &format!("{m}.head.{}", h.name), &cls);
                for (a, v) in avg.iter_mut().zip(&logits[0]) {
                    *a += v / 2.0;
                }
            }
            avg
        })
        .collect()
}

fn seq(m: Modality, n: usize, d: usize, seed: u64) -> TokenSequence {
    let mut r = SplitMix64::new(seed);
    TokenSequence {
        tokens: Tensor::from_fn(vec![n, d], |_| r.normal()),
        positions: (0..n).collect(),
        modality: m,
        present: true,
        substituted: false,
    }
}

fn one_token_tok() -> TokenizerConfig {
    TokenizerConfig {
        audio_bins: 2,
        audio_frames_per_second: 2,
        audio_seconds: 1.0,
        audio_patch: [2, 2],
        video_frames: 2,
        video_hw: [2, 2],
        video_patch: [2, 2, 2],
        embed_dim: 2,
    }
}

#[test]
fn tiny_model_matches_hand_trace() {
    let tok = one_token_tok();
    let cfg = ModelConfig {
        depth: 1,
        heads: 1,
        embed_dim: 2,
        fusion_layer: 0,
        bottleneck_count: 1,
        fusion_mode: FusionMode::Bottleneck,
        heads_spec: vec![HeadSpec::new("A", 3)],
        mlp_ratio: 4,
        attention_dropout: 0.0,
    };
    for seed in 0..5 {
        let p = MbtParameters::new(&cfg, &tok, seed).unwrap();
        let a = seq(Modality::Audio, 1, 2, 100 + seed);
        let v = seq(Modality::Video, 1, 2, 200 + seed);
        let got = forward(&a, &v, &p).unwrap();
        let want = trace(&p, [&a.tokens, &v.tokens]);
        for (g, w) in got[0].iter().zip(&want[0]) {
            assert!((g - w).abs() < 1e-12, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn deeper_model_matches_trace_including_bottleneck_averaging() {
    let tok = small_tok(8);
    for fusion_layer in [0, 1, 2, 3] {
        let cfg = small_model(8, 3, fusion_layer);
        let p = MbtParameters::new(&cfg, &tok, 3).unwrap();
        let a = seq(Modality::Audio, 4, 8, 1);
        let v = seq(Modality::Video, 4, 8, 2);
        let got = forward(&a, &v, &p).unwrap();
        let want = trace(&p, [&a.tokens, &v.tokens]);
        for (gh, wh) in got.iter().zip(&want) {
            for (g, w) in gh.iter().zip(wh) {
                assert!((g - w).abs() < 1e-11, "L_f={fusion_layer}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn unimodal_forward_is_deterministic_and_weight_shared() {
    let tok = small_tok(8);
    let cfg = small_model(8, 3, 3);
    let p1 = MbtParameters::new(&cfg, &tok, 11).unwrap();
    let p2 = MbtParameters::new(&cfg, &tok, 11).unwrap();
    let a = seq(Modality::Audio, 4, 8, 1);
    let v = seq(Modality::Video, 4, 8, 2);
    let ua = unimodal_forward(&a, &p1).unwrap();
    assert_eq!(ua, unimodal_forward(&a, &p2).unwrap());
    // with no fusion layer, the joint logits are the branch average
    let uv = unimodal_forward(&v, &p1).unwrap();
    let joint = forward(&a, &v, &p1).unwrap();
    for h in 0..2 {
        for c in 0..joint[h].len() {
            assert!((joint[h][c] - (ua[h][c] + uv[h][c]) / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn absent_modality_parameters_get_exactly_zero_gradient() {
    let tok = small_tok(8);
    let cfg = small_model(8, 2, 1);
    let p = MbtParameters::new(&cfg, &tok, 4).unwrap();
    let samples = random_samples(&tok, 3, 9);
    let batch: Vec<_> = samples.iter().collect();
    for m in Modality::ALL {
        let mut g = Graph::new(&p.store);
        let plans = vec![[TokenSource::Raw; 2]; 3];
        let logits = batch_logits(&mut g, &p, &batch, &plans, ModelKind::Unimodal(m), None).unwrap();
        let labels: Vec<usize> = batch.iter().map(|s| s.labels[0]).collect();
        let loss = g.tape.weighted_cross_entropy(logits[0], &labels, &[1.0; 3]).unwrap();
        let mut grads = g.tape.backward(loss).unwrap();
        let pg = g.param_grads(&mut grads);
        let other = m.other().name();
        let mut own_nonzero = false;
        for (i, name) in p.store.names().iter().enumerate() {
            let norm = pg[i].as_ref().map(|t| t.data().iter().map(|x| x.abs()).sum::<f64>()).unwrap_or(0.0);
            if name.starts_with(other) || name.starts_with("mmt") || name == "bottleneck" {
                assert_eq!(norm, 0.0, "{name} under {m}-only training");
            } else if name.starts_with(m.name()) && norm > 0.0 {
                own_nonzero = true;
            }
        }
        assert!(own_nonzero);
    }
}

#[test]
fn full_sa_attends_over_both_sequences_and_cls_tokens() {
    let tok = small_tok(8);
    let mut cfg = small_model(8, 2, 0);
    cfg.fusion_mode = FusionMode::FullSelfAttention;
    let p = MbtParameters::new(&cfg, &tok, 1).unwrap();
    let a = seq(Modality::Audio, 4, 8, 1);
    let v = seq(Modality::Video, 4, 8, 2);
    let (_, tr) = forward_full_sa(&a, &v, &p).unwrap();
    assert_eq!(tr.layers, vec![vec![10], vec![10]]);
    assert_eq!(tr.attention_flops(8), 2 * 4 * 100 * 8);
    // the bottleneck model at L_f = 0 attends over two shorter sequences
    let pb = MbtParameters::new(&small_model(8, 2, 0), &tok, 1).unwrap();
    let (_, tb) = forward_with_trace(&a, &v, &pb).unwrap();
    assert_eq!(tb.layers, vec![vec![7, 7], vec![7, 7]]);
    assert!(tb.attention_flops(8) < tr.attention_flops(8));
}
