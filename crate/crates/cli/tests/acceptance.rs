//! End-to-end acceptance run on the epic-kitchens-like preset, seeds 1, 2, 3.
//!
//! Prints one PASS/FAIL line per criterion and exits nonzero if any fails.
//! Criteria phrased "on all seeds" are checked per seed; the others on the
//! mean over seeds. Accuracies are head A (4 classes). Seeds run in parallel
//! up to `MMTLAB_THREADS`.

use std::collections::BTreeMap;
use std::time::Instant;

use mmtlab::config::{MissingConfig, RunConfig};
use mmtlab::experiment::RunContext;
use mmtlab::gradcheck::op_suite;
use mmtlab::mae::{draw_batch_masks, mae_forward, MaeModel};
use mmtlab::mbt::{forward_with_trace, FusionMode, MbtParameters, ModelConfig};
use mmtlab::missing::{Designation, SubstitutionMethod, TokenSource};
use mmtlab::nn::Graph;
use mmtlab::pipeline::{batch_logits, ModelKind, Prepared};
use mmtlab::protocol::{make_test_variants, ClassWeights};
use mmtlab::rng::SplitMix64;
use mmtlab::synthdata::bayes_accuracy_bound;
use mmtlab::tokenizer::{audio_token_count, embed_audio, embed_video, video_token_count, Modality, TokenizerConfig};
use mmtlab::Tensor;
use mmtlab::train::{epoch_plans, TrainingSet};
use mmtlab_cli::{cmd_eval, cmd_train, thread_cap};

const SEEDS: [u64; 3] = [1, 2, 3];
const HEAD: &str = "A";
const CHANCE: f64 = 0.25;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

/// Head-A accuracy by method name then r_test percent.
type Curves = BTreeMap<String, BTreeMap<i64, f64>>;

struct SeedRun {
    seed: u64,
    curves: Curves,
    secs: f64,
}

impl SeedRun {
    fn at(&self, method: &str, r: i64) -> f64 {
        *self
            .curves
            .get(method)
            .and_then(|c| c.get(&r))
            .unwrap_or_else(|| panic!("seed {}: no {method} at r_test {r}", self.seed))
    }
}

fn mean(runs: &[SeedRun], method: &str, r: i64) -> f64 {
    runs.iter().map(|s| s.at(method, r)).sum::<f64>() / runs.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn missing(p: f64, designated: Designation, r_train: f64, filter: bool) -> MissingConfig {
    MissingConfig {
        p,
        designated,
        r_train,
        r_train_per_modality: None,
        filter_incomplete: filter,
    }
}

fn run_seed(cfg: &RunConfig, seed: u64) -> SeedRun {
    let t = Instant::now();
    let mut cfg = cfg.clone();
    cfg.data.seed = seed;
    let ctx = RunContext::new(&cfg, seed).expect("run context");
    let mut curves = Curves::new();
    let video = [Modality::Video];
    let mut fit_eval = |label: &str, model: &ModelConfig, kind: ModelKind, miss: &MissingConfig, tm: &[Modality]| {
        let (params, _) = ctx.fit(model, kind, miss, None).expect("training");
        let table = ctx
            .evaluate_grid(&params, kind, tm, &SubstitutionMethod::ALL, label)
            .expect("evaluation");
        for r in table.records.iter().filter(|r| r.head == HEAD) {
            curves
                .entry(r.method.clone())
                .or_default()
                .insert(r.r_test.round() as i64, r.accuracy);
        }
    };
    let m = cfg.model.clone();
    let base = missing(0.0, Designation::Video, 0.0, true);
    let preset_p = cfg.missing.p;
    let with_mmt = missing(preset_p, Designation::Video, 0.0, false);
    fit_eval("base", &m, ModelKind::Multimodal, &base, &video);
    fit_eval("uni_audio", &m, ModelKind::Unimodal(Modality::Audio), &base, &video);
    fit_eval("uni_video", &m, ModelKind::Unimodal(Modality::Video), &base, &video);
    fit_eval("mmt", &m, ModelKind::Multimodal, &with_mmt, &video);
    fit_eval("mmt_p90", &m, ModelKind::Multimodal, &missing(0.9, Designation::Video, 0.0, false), &video);
    fit_eval("r50_mmt", &m, ModelKind::Multimodal, &missing(0.6, Designation::Video, 0.5, false), &video);

    // The r_train = 50% filter baseline and the two-MMT intersection baseline
    // train on the same complete half; share the model when the ids agree.
    let filter50 = missing(0.0, Designation::Video, 0.5, true);
    let dual = MissingConfig {
        p: 0.0,
        designated: Designation::Both,
        r_train: 0.0,
        r_train_per_modality: Some([0.25, 0.25]),
        filter_incomplete: false,
    };
    let dual_filter = MissingConfig {
        filter_incomplete: true,
        ..dual.clone()
    };
    let same = ctx.training_set(&filter50, ModelKind::Multimodal).expect("set").ids
        == ctx.training_set(&dual_filter, ModelKind::Multimodal).expect("set").ids;
    if same {
        fit_eval("filter", &m, ModelKind::Multimodal, &filter50, &Modality::ALL);
    } else {
        fit_eval("filter", &m, ModelKind::Multimodal, &dual_filter, &Modality::ALL);
        fit_eval("r50_filter", &m, ModelKind::Multimodal, &filter50, &video);
    }
    fit_eval("dual", &m, ModelKind::Multimodal, &dual, &Modality::ALL);

    for lf in [0, m.depth - 1] {
        let mm = ModelConfig {
            fusion_layer: lf,
            ..m.clone()
        };
        fit_eval(&format!("lf{lf}_base"), &mm, ModelKind::Multimodal, &base, &video);
        fit_eval(&format!("lf{lf}_mmt"), &mm, ModelKind::Multimodal, &with_mmt, &video);
    }
    let fsa = ModelConfig {
        fusion_layer: 0,
        fusion_mode: FusionMode::FullSelfAttention,
        ..m.clone()
    };
    fit_eval("fsa0", &fsa, ModelKind::Multimodal, &base, &video);
    if !same {
        // Keep the method names used below independent of the branch above.
        let alias: Vec<(String, BTreeMap<i64, f64>)> = curves
            .iter()
            .filter(|(k, _)| k.starts_with("r50_filter:"))
            .map(|(k, v)| (k.replace("r50_filter:", "filter50:"), v.clone()))
            .collect();
        curves.extend(alias);
    } else {
        let alias: Vec<(String, BTreeMap<i64, f64>)> = curves
            .iter()
            .filter(|(k, _)| k.starts_with("filter:") && k.ends_with(":video"))
            .map(|(k, v)| (k.replace("filter:", "filter50:").replace(":video", ""), v.clone()))
            .collect();
        curves.extend(alias);
    }
    SeedRun {
        seed,
        curves,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let reports = op_suite(20).expect("gradient suite");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).expect("ops");
    outcome(
        1,
        "gradient suite",
        worst.worst < 1e-5 && secs < 30.0 && reports.iter().all(|r| r.shapes == 20),
        format!(
            "{} ops x 20 shapes, worst {:.2e} ({}), {secs:.1}s",
            reports.len(),
            worst.worst,
            worst.op
        ),
    )
}

fn criterion_2() -> Outcome {
    let full = TokenizerConfig::full_scale();
    let a = audio_token_count(&full).expect("audio tokens");
    let v = video_token_count(&full).expect("video tokens");
    outcome(2, "token arithmetic", a == 400 && v == 1568, format!("audio {a}, video {v}"))
}

fn criterion_3(cfg: &RunConfig, runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut detail = vec![];
    for s in runs {
        let av = s.at("base:mmt", 0);
        let ua = s.at("uni_audio:mmt", 0);
        let uv = s.at("uni_video:mmt", 0);
        pass &= av - ua >= 0.05 && av - uv >= 0.05;
        detail.push(format!("s{} AV {} A {} V {}", s.seed, pct(av), pct(ua), pct(uv)));
    }
    let bound = |m: &[Modality]| bayes_accuracy_bound(&cfg.data, m)[0];
    let bayes_gap = bound(&Modality::ALL) - bound(&[Modality::Audio]).max(bound(&[Modality::Video]));
    let emp_gap = mean(runs, "base:mmt", 0) - mean(runs, "uni_audio:mmt", 0).max(mean(runs, "uni_video:mmt", 0));
    pass &= bayes_gap.signum() == emp_gap.signum();
    detail.push(format!("Bayes gap {} vs measured {}", pct(bayes_gap), pct(emp_gap)));
    outcome(3, "multimodal advantage", pass, detail.join("; "))
}

fn criterion_4(runs: &[SeedRun]) -> Outcome {
    let grid = [0, 25, 50, 75, 100];
    let mut pass = true;
    let mut detail = vec![];
    for s in runs {
        let c: Vec<f64> = grid.iter().map(|&r| s.at("base:zeros", r)).collect();
        let drop = c[0] - c[4];
        let monotone = c.windows(2).all(|w| w[1] <= w[0] + 0.02);
        pass &= drop >= 0.15 && monotone;
        let shown: Vec<String> = c.iter().map(|&x| pct(x)).collect();
        detail.push(format!("s{} [{}]", s.seed, shown.join(" ")));
    }
    outcome(4, "baseline degradation", pass, detail.join("; "))
}

fn criterion_5(runs: &[SeedRun]) -> Outcome {
    let g50 = mean(runs, "mmt:mmt", 50) - mean(runs, "base:zeros", 50);
    let g100 = mean(runs, "mmt:mmt", 100) - mean(runs, "base:zeros", 100);
    let to_uni = mean(runs, "mmt:mmt", 100) - mean(runs, "uni_audio:mmt", 0);
    outcome(
        5,
        "MMT recovery",
        g50 >= 0.08 && g100 >= 0.12 && to_uni >= -0.03,
        format!(
            "over zeros +{} at 50%, +{} at 100%; vs audio-only {}",
            pct(g50),
            pct(g100),
            pct(to_uni)
        ),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut detail = vec![];
    for s in runs {
        let d = s.at("mmt:mmt", 0) - s.at("base:mmt", 0);
        pass &= d.abs() <= 0.03;
        detail.push(format!("s{} {}", s.seed, pct(d)));
    }
    outcome(6, "no harm at r_test=0", pass, detail.join("; "))
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let untrained = mean(runs, "base:mmt", 100);
    let p90 = mean(runs, "mmt_p90:mmt", 0);
    let preset = mean(runs, "mmt:mmt", 0);
    let per_seed: Vec<String> = runs.iter().map(|s| pct(s.at("base:mmt", 100))).collect();
    outcome(
        7,
        "p extremes",
        untrained <= CHANCE + 0.05 && p90 <= preset - 0.02,
        format!(
            "p=0 MMT at 100%: {} (seeds {}), limit {}; p=0.9 at 0%: {} vs preset {}",
            pct(untrained),
            per_seed.join("/"),
            pct(CHANCE + 0.05),
            pct(p90),
            pct(preset)
        ),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let ours = mean(runs, "r50_mmt:mmt", 100);
    let filt = mean(runs, "filter50:zeros", 100);
    outcome(
        8,
        "modal-incomplete training",
        ours - filt >= 0.10,
        format!("MMT p=0.6 {} vs filter-and-train {}", pct(ours), pct(filt)),
    )
}

fn criterion_9(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut detail = vec![];
    for m in ["audio", "video"] {
        let ours = mean(runs, &format!("dual:mmt:{m}"), 100);
        let filt = mean(runs, &format!("filter:zeros:{m}"), 100);
        pass &= ours - filt >= 0.08;
        detail.push(format!("{m} missing: {} vs {}", pct(ours), pct(filt)));
    }
    outcome(9, "two MMTs", pass, detail.join("; "))
}

fn criterion_10(cfg: &RunConfig, runs: &[SeedRun]) -> Outcome {
    let last = cfg.model.depth - 1;
    let spread = |names: &[String]| {
        let v: Vec<f64> = names.iter().map(|n| mean(runs, n, 100)).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    // The preset's own fusion layer is the middle one.
    let mmt = [format!("lf0_mmt:mmt"), "mmt:mmt".to_string(), format!("lf{last}_mmt:mmt")];
    let base = [format!("lf0_base:zeros"), "base:zeros".to_string(), format!("lf{last}_base:zeros")];
    let (sm, sb) = (spread(&mmt), spread(&base));
    outcome(
        10,
        "fusion-layer robustness",
        cfg.model.fusion_layer == cfg.model.depth / 2 && sm <= 0.5 * sb,
        format!("spread at 100% over L_f {{0,{},{last}}}: MMT {} vs baseline {}", cfg.model.fusion_layer, pct(sm), pct(sb)),
    )
}

fn criterion_11(cfg: &RunConfig, runs: &[SeedRun]) -> Outcome {
    let bn = mean(runs, "lf0_base:mmt", 0);
    let fsa = mean(runs, "fsa0:mmt", 0);
    let flops = |mode: FusionMode| {
        let mc = ModelConfig {
            fusion_layer: 0,
            fusion_mode: mode,
            ..cfg.model.clone()
        };
        let params = MbtParameters::new(&mc, &cfg.tokenizer, 0).expect("params");
        let tok = &cfg.tokenizer;
        let store = &params.store;
        let raw_a = Tensor::zeros(tok.audio_shape().expect("audio shape").to_vec());
        let raw_v = Tensor::zeros(tok.video_shape().to_vec());
        let a = embed_audio(&raw_a, tok, &params.branch(Modality::Audio).embed, store).expect("audio");
        let v = embed_video(&raw_v, tok, &params.branch(Modality::Video).embed, store).expect("video");
        forward_with_trace(&a, &v, &params).expect("forward").1.attention_flops(mc.embed_dim)
    };
    let (fb, ff) = (flops(FusionMode::Bottleneck), flops(FusionMode::FullSelfAttention));
    outcome(
        11,
        "bottleneck vs full self-attention",
        bn >= fsa && fb < ff,
        format!("accuracy {} vs {}; attention FLOPs {fb} vs {ff}", pct(bn), pct(fsa)),
    )
}

fn criterion_12(cfg: &RunConfig) -> Outcome {
    let mut checks = vec![];
    let ctx = RunContext::new(cfg, 1).expect("context");

    // Nesting of the training schedule and of the test variants.
    let rates: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let masks: Vec<Vec<bool>> = rates.iter().map(|&r| ctx.schedule.mask(r).expect("mask")).collect();
    let nested = masks.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| !a || *b));
    let strict = masks[5] != masks[10];
    let variants = make_test_variants(&ctx.test, &rates, Modality::Video, 1).expect("variants");
    let test_nested = variants
        .windows(2)
        .all(|w| w[0].present.iter().zip(&w[1].present).all(|(a, b)| a[1] || !b[1]));
    checks.push(("nesting", nested && strict && test_nested));

    // Replacement fraction at p = 0.25 over 10 000 modal-complete draws.
    let n = 10_000;
    let set = TrainingSet {
        samples: &[],
        ids: (0..n).collect(),
        present: vec![[true, true]; n],
    };
    let policy = missing(0.25, Designation::Video, 0.0, false).policy();
    let plans = epoch_plans(&set, Some(&policy), 1, 0).expect("plans");
    let frac = plans.iter().filter(|p| p[1] == TokenSource::Mmt).count() as f64 / n as f64;
    checks.push(("binomial", (0.2367..=0.2633).contains(&frac)));

    // Class-weight identity.
    let labels: Vec<&[usize]> = ctx.train.iter().map(|s| s.labels.as_slice()).collect();
    let cw = ClassWeights::from_labels(&labels, &cfg.data.head_classes()).expect("weights");
    let identity = cw.weights.iter().zip(&cw.counts).all(|(w, c)| {
        w.iter()
            .zip(c)
            .all(|(wi, &ci)| (wi + ci as f64 / cw.total as f64 - 1.0).abs() <= 1e-15)
    });
    checks.push(("class weights", identity));

    // The video MMT receives gradient only from samples that use it.
    let params = MbtParameters::new(&cfg.model, &cfg.tokenizer, 1).expect("params");
    let batch: Vec<&Prepared> = ctx.train.iter().take(4).collect();
    let mmt_grad = |plans: &[[TokenSource; 2]]| {
        let mut g = Graph::new(&params.store);
        let logits = batch_logits(&mut g, &params, &batch, plans, ModelKind::Multimodal, None).expect("logits");
        let labels: Vec<usize> = batch.iter().map(|s| s.labels[0]).collect();
        let loss = g.tape.weighted_cross_entropy(logits[0], &labels, &[1.0; 4]).expect("loss");
        let mut grads = g.tape.backward(loss).expect("backward");
        let pg = g.param_grads(&mut grads);
        let norm = |id: mmtlab::nn::ParamId| {
            pg[id.index()]
                .as_ref()
                .map(|t| t.data().iter().map(|x| x.abs()).sum::<f64>())
                .unwrap_or(0.0)
        };
        (norm(params.mmt[0]), norm(params.mmt[1]))
    };
    let raw = [TokenSource::Raw, TokenSource::Raw];
    let replaced = [TokenSource::Raw, TokenSource::Mmt];
    let (a0, v0) = mmt_grad(&[raw; 4]);
    let (a1, v1) = mmt_grad(&[raw, replaced, raw, raw]);
    checks.push(("MMT gradient masking", a0 == 0.0 && v0 == 0.0 && a1 == 0.0 && v1 > 0.0));

    // MAE loss has exactly zero gradient at visible positions.
    let mae = MaeModel::new(&cfg.model, &cfg.tokenizer, &cfg.mae, 1).expect("mae");
    let mut rng = SplitMix64::new(1);
    let masks = draw_batch_masks(&cfg.tokenizer, &cfg.mae, 2, &mut rng).expect("masks");
    let pair: Vec<&Prepared> = ctx.train.iter().take(2).collect();
    let mut g = Graph::new(&mae.params.store);
    let out = mae_forward(&mut g, &mae, &pair, &masks).expect("mae forward");
    let grads = g.tape.backward(out.loss).expect("backward");
    let masked_only = Modality::ALL.iter().all(|&m| {
        let gp = grads.get(out.preds[m.index()]).expect("pred gradient");
        let masked = &out.masked_rows[m.index()];
        (0..gp.rows()).all(|r| {
            let zero = gp.row(r).iter().all(|&x| x == 0.0);
            if masked.contains(&r) {
                !zero
            } else {
                zero
            }
        })
    });
    checks.push(("MAE masked-only loss", masked_only));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        12,
        "protocol properties",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks, replaced fraction {frac:.4}", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn criterion_13(cfg: &RunConfig) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut small = cfg.clone();
    small.data.n_train = 160;
    small.data.n_test = 80;
    small.train.epochs = 2;
    small.seeds = vec![5];
    let run = |name: &str| {
        let mut c = small.clone();
        c.out = dir.path().join(name);
        let ckpt = cmd_train(&c, None).expect("train");
        let metrics = cmd_eval(&ckpt, &SubstitutionMethod::ALL, None, None).expect("eval");
        std::fs::read(metrics).expect("metrics")
    };
    let (a, b) = (run("first"), run("second"));
    outcome(
        13,
        "determinism",
        a == b && !a.is_empty(),
        format!("two train+eval runs, {} metric bytes each, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let cfg = RunConfig::epic_kitchens_like();
    let mut results = vec![criterion_1(), criterion_2(), criterion_12(&cfg), criterion_13(&cfg)];

    let t = Instant::now();
    let threads = thread_cap().min(SEEDS.len());
    let mut runs: Vec<SeedRun> = std::thread::scope(|s| {
        let cfg = &cfg;
        let mut out = vec![];
        for chunk in SEEDS.chunks(SEEDS.len().div_ceil(threads)) {
            out.push(s.spawn(move || chunk.iter().map(|&seed| run_seed(cfg, seed)).collect::<Vec<_>>()));
        }
        out.into_iter().flat_map(|h| h.join().expect("seed run")).collect()
    });
    runs.sort_by_key(|r| r.seed);
    for r in &runs {
        println!("seed {} trained and evaluated in {:.0}s", r.seed, r.secs);
    }
    println!("model runs took {:.0}s", t.elapsed().as_secs_f64());

    results.extend([
        criterion_3(&cfg, &runs),
        criterion_4(&runs),
        criterion_5(&runs),
        criterion_6(&runs),
        criterion_7(&runs),
        criterion_8(&runs),
        criterion_9(&runs),
        criterion_10(&cfg, &runs),
        criterion_11(&cfg, &runs),
    ]);
    results.sort_by_key(|o| o.id);
    for o in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {}: {}", o.id, o.name, o.detail);
    }
    let failed = results.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
