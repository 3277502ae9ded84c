use mmtlab::config::RunConfig;
use mmtlab::rng::SplitMix64;
use mmtlab::synthdata::*;
use mmtlab::tokenizer::{Modality, TokenizerConfig};

fn acceptance() -> (SynthConfig, TokenizerConfig) {
    let cfg = RunConfig::epic_kitchens_like();
    (cfg.data, cfg.tokenizer)
}

/// Plug-in mutual information (nats) of a discrete joint histogram.
fn mutual_information(pairs: &[(usize, usize)], kx: usize, ky: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = vec![vec![0.0; ky]; kx];
    for &(x, y) in pairs {
        joint[x][y] += 1.0 / n;
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..ky).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
    let mut mi = 0.0;
    for x in 0..kx {
        for y in 0..ky {
            if joint[x][y] > 0.0 {
                mi += joint[x][y] * (joint[x][y] / (px[x] * py[y])).ln();
            }
        }
    }
    mi
}

#[test]
fn noiseless_data_is_perfectly_matched_from_either_modality() {
    let (mut cfg, tok) = acceptance();
    cfg.noise_std = 0.0;
    cfg.n_train = 60;
    cfg.n_test = 1;
    let d = generate(&cfg, &tok).unwrap();
    for s in &d.train {
        for m in Modality::ALL {
            assert_eq!(template_match(s, &cfg, &tok, &[m]).unwrap(), s.labels);
        }
    }
    assert_eq!(bayes_accuracy_bound(&cfg, &[Modality::Audio]), vec![1.0, 1.0]);
}

#[test]
fn silent_code_carries_no_information() {
    let (mut cfg, tok) = acceptance();
    cfg.snr_v_for_code_b = 0.0;
    cfg.n_train = 10_000;
    cfg.n_test = 1;
    let d = generate(&cfg, &tok).unwrap();
    // decode head B from video with the templates of a config where it is audible
    let mut loud = cfg.clone();
    loud.snr_v_for_code_b = 1.0;
    let kb = cfg.classes_head_b;
    let pairs: Vec<(usize, usize)> = d
        .train
        .iter()
        .map(|s| (template_match(s, &loud, &tok, &[Modality::Video]).unwrap()[1], s.labels[1]))
        .collect();
    let mi = mutual_information(&pairs, kb, kb);
    assert!(mi < 0.01, "{mi}");

    let d = generate(&loud, &tok).unwrap();
    let pairs: Vec<(usize, usize)> = d
        .train
        .iter()
        .take(2000)
        .map(|s| (template_match(s, &loud, &tok, &[Modality::Video]).unwrap()[1], s.labels[1]))
        .collect();
    assert!(mutual_information(&pairs, kb, kb) > 0.05);
}

#[test]
fn label_marginals_are_uniform() {
    let (mut cfg, tok) = acceptance();
    cfg.n_train = 6000;
    cfg.n_test = 1;
    let d = generate(&cfg, &tok).unwrap();
    let n = d.train.len() as f64;
    for (h, counts) in label_histogram(&d.train, &cfg.head_classes()).iter().enumerate() {
        let p = 1.0 / counts.len() as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        for &c in counts {
            assert!((c as f64 - n * p).abs() <= 3.0 * sd, "head {h}: {counts:?}");
        }
    }
}

#[test]
fn bound_limits() {
    let (mut cfg, _) = acceptance();
    cfg.snr_a_for_code_a = f64::INFINITY;
    assert_eq!(bayes_accuracy_bound(&cfg, &[Modality::Audio])[0], 1.0);
    cfg.snr_a_for_code_a = 0.0;
    assert_eq!(bayes_accuracy_bound(&cfg, &[Modality::Audio])[0], 0.25);
    assert_eq!(bayes_accuracy_bound(&cfg, &[])[1], 1.0 / 3.0);
}

/// Matched-filter accuracy per head at 50k samples, computed from raw
/// correlations against the unit templates.
fn monte_carlo(cfg: &SynthConfig, tok: &TokenizerConfig, subset: &[Modality], n: usize) -> Vec<f64> {
    let classes = cfg.head_classes();
    let templates: Vec<Vec<Vec<Vec<f64>>>> = Modality::ALL
        .iter()
        .map(|&m| {
            (0..classes.len())
                .map(|h| {
                    (0..classes[h])
                        .map(|c| template(tok, m, template_row(cfg, h, c)).unwrap().into_data())
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut rng = SplitMix64::new(77);
    let mut correct = vec![0usize; classes.len()];
    for _ in 0..n {
        for (h, &k) in classes.iter().enumerate() {
            let y = rng.below(k as u64) as usize;
            // correlations with orthonormal templates: amplitude on the true class plus unit noise
            let mut best = (f64::NEG_INFINITY, 0);
            let noise: Vec<Vec<f64>> = subset.iter().map(|_| (0..k).map(|_| cfg.noise_std * rng.normal()).collect()).collect();
            for c in 0..k {
                let mut score = 0.0;
                for (si, &m) in subset.iter().enumerate() {
                    let a = cfg.amplitude(m, h);
                    let corr = if c == y { a } else { 0.0 } + noise[si][c];
                    score += a * corr;
                }
                if score > best.0 {
                    best = (score, c);
                }
            }
            correct[h] += usize::from(best.1 == y);
        }
    }
    // the shortcut above assumes orthonormal templates; check that it holds
    for m in Modality::ALL {
        let t = &templates[m.index()];
        let flat: Vec<&Vec<f64>> = t.iter().flatten().collect();
        for (i, a) in flat.iter().enumerate() {
            for (j, b) in flat.iter().enumerate() {
                let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }
    correct.iter().map(|&c| c as f64 / n as f64).collect()
}

#[test]
fn monte_carlo_agrees_with_the_bound_and_fusion_dominates() {
    let (cfg, tok) = acceptance();
    let subsets: [&[Modality]; 3] = [&[Modality::Audio], &[Modality::Video], &Modality::ALL];
    let mut joint = vec![];
    for subset in subsets {
        let bound = bayes_accuracy_bound(&cfg, subset);
        let mc = monte_carlo(&cfg, &tok, subset, 50_000);
        for (b, m) in bound.iter().zip(&mc) {
            assert!((b - m).abs() <= 0.01, "{subset:?}: bound {b} vs MC {m}");
        }
        joint.push(bound[0]);
    }
    assert!(joint[2] - joint[0] >= 0.10, "{joint:?}");
    assert!(joint[2] - joint[1] >= 0.10, "{joint:?}");
    assert_eq!(dominant_modality(&cfg), Modality::Video);
}

#[test]
fn empirical_matched_filter_agrees_with_the_bound() {
    let (mut cfg, tok) = acceptance();
    cfg.n_train = 4000;
    cfg.n_test = 1;
    let d = generate(&cfg, &tok).unwrap();
    for subset in [&[Modality::Audio][..], &[Modality::Video], &Modality::ALL] {
        let bound = bayes_accuracy_bound(&cfg, subset);
        let mut correct = vec![0usize; 2];
        for s in &d.train {
            for (h, &p) in template_match(s, &cfg, &tok, subset).unwrap().iter().enumerate() {
                correct[h] += usize::from(p == s.labels[h]);
            }
        }
        for h in 0..2 {
            let acc = correct[h] as f64 / d.train.len() as f64;
            let sd = (bound[h] * (1.0 - bound[h]) / d.train.len() as f64).sqrt();
            assert!((acc - bound[h]).abs() < 4.0 * sd, "{subset:?} head {h}: {acc} vs {}", bound[h]);
        }
    }
}
