//! Paired two-modality synthetic classification data.
//!
//! Each sample carries a head-A class and a head-B class. Every class code
//! owns one row of a Sylvester–Hadamard matrix of size `patch_volume`; the
//! row is tiled over all patches of a modality and normalized, giving a
//! unit-norm template `T`. Distinct codes get distinct rows, so templates are
//! orthonormal, and row 0 (constant) is kept for a background offset:
//!
//! ```text
//! raw_m = background_m * 1 + amp_m,A * T_m[A = y_A] + amp_m,B * T_m[B = y_B] + noise_std * N(0, I)
//! ```
//!
//! Projections onto the templates are sufficient statistics, so the optimal
//! accuracy is available in closed form ([`bayes_accuracy_bound`]).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::tokenizer::{unpatchify, Modality, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes_head_a: usize,
    /// 0 gives a single-head dataset.
    pub classes_head_b: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub snr_a_for_code_a: f64,
    pub snr_a_for_code_b: f64,
    pub snr_v_for_code_a: f64,
    pub snr_v_for_code_b: f64,
    pub noise_std: f64,
    /// Constant offset added to every raw value, `[audio, video]`. A large
    /// offset dominates the patch embeddings and slows learning markedly.
    #[serde(default)]
    pub background: [f64; 2],
    pub natural_missing_rate: f64,
    /// Modality lost by naturally incomplete samples.
    pub missing_modality: Modality,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Video-dominant, two heads (4 x 3 classes), 2000/500 samples.
    fn default() -> Self {
        Self {
            classes_head_a: 4,
            classes_head_b: 3,
            n_train: 2000,
            n_test: 500,
            snr_a_for_code_a: 1.25,
            snr_a_for_code_b: 1.2,
            snr_v_for_code_a: 1.5,
            snr_v_for_code_b: 1.2,
            noise_std: 1.0,
            background: [0.0, 0.0],
            natural_missing_rate: 0.0,
            missing_modality: Modality::Video,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn head_classes(&self) -> Vec<usize> {
        if self.classes_head_b == 0 {
            vec![self.classes_head_a]
        } else {
            vec![self.classes_head_a, self.classes_head_b]
        }
    }

    /// Template amplitude of `m` for head `h`.
    pub fn amplitude(&self, m: Modality, head: usize) -> f64 {
        match (m, head) {
            (Modality::Audio, 0) => self.snr_a_for_code_a,
            (Modality::Audio, _) => self.snr_a_for_code_b,
            (Modality::Video, 0) => self.snr_v_for_code_a,
            (Modality::Video, _) => self.snr_v_for_code_b,
        }
    }

    pub fn validate(&self, tok: &TokenizerConfig) -> Result<()> {
        if self.classes_head_a < 2 || self.classes_head_b == 1 {
            return Err(Error::Config("class counts must be at least 2".into()));
        }
        let amps = [
            self.snr_a_for_code_a,
            self.snr_a_for_code_b,
            self.snr_v_for_code_a,
            self.snr_v_for_code_b,
        ];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config("signal amplitudes must be finite and nonnegative".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.natural_missing_rate) {
            return Err(Error::Config("natural_missing_rate must be in [0, 1]".into()));
        }
        let needed = 1 + self.classes_head_a + self.classes_head_b;
        for m in Modality::ALL {
            let vol = tok.patch_volume(m);
            if !vol.is_power_of_two() {
                return Err(Error::Config(format!("{m} patch volume {vol} is not a power of two")));
            }
            if vol < needed {
                return Err(Error::Config(format!(
                    "{m} patch volume {vol} holds fewer than {needed} orthogonal patterns"
                )));
            }
        }
        tok.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `(bins, frames)`
    pub raw_a: Tensor,
    /// `(frames, H, W)`
    pub raw_v: Tensor,
    /// One class per head.
    pub labels: Vec<usize>,
    pub audio_present: bool,
    pub video_present: bool,
}

impl SyntheticSample {
    pub fn raw(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Audio => &self.raw_a,
            Modality::Video => &self.raw_v,
        }
    }

    pub fn present(&self, m: Modality) -> bool {
        match m {
            Modality::Audio => self.audio_present,
            Modality::Video => self.video_present,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.audio_present && self.video_present
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub tokenizer: TokenizerConfig,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Entry `(i, j)` of the Sylvester–Hadamard matrix.
pub fn hadamard(i: usize, j: usize) -> f64 {
    if (i & j).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Hadamard row used by class `class` of head `head`.
pub fn template_row(cfg: &SynthConfig, head: usize, class: usize) -> usize {
    if head == 0 {
        1 + class
    } else {
        1 + cfg.classes_head_a + class
    }
}

/// Unit-norm raw-space template of a Hadamard row for modality `m`.
pub fn template(tok: &TokenizerConfig, m: Modality, row: usize) -> Result<Tensor> {
    let vol = tok.patch_volume(m);
    let n = tok.token_count(m)?;
    let scale = 1.0 / ((n * vol) as f64).sqrt();
    let patches = Tensor::from_fn(vec![n, vol], |k| scale * hadamard(row, k % vol));
    unpatchify(m, &patches, tok)
}

struct Templates {
    /// `[modality][head][class]`
    t: [Vec<Vec<Tensor>>; 2],
}

impl Templates {
    fn new(cfg: &SynthConfig, tok: &TokenizerConfig) -> Result<Self> {
        let build = |m: Modality| -> Result<Vec<Vec<Tensor>>> {
            cfg.head_classes()
                .iter()
                .enumerate()
                .map(|(h, &k)| (0..k).map(|c| template(tok, m, template_row(cfg, h, c))).collect())
                .collect()
        };
        Ok(Self {
            t: [build(Modality::Audio)?, build(Modality::Video)?],
        })
    }
}

fn draw_sample(
    cfg: &SynthConfig,
    tok: &TokenizerConfig,
    templates: &Templates,
    rng: &mut SplitMix64,
) -> Result<SyntheticSample> {
    let labels: Vec<usize> = cfg.head_classes().iter().map(|&k| rng.below(k as u64) as usize).collect();
    let mut raw = |m: Modality, shape: Vec<usize>| {
        let bg = cfg.background[m.index()];
        let mut t = Tensor::from_fn(shape, |_| bg + cfg.noise_std * rng.normal());
        for (h, &y) in labels.iter().enumerate() {
            let a = cfg.amplitude(m, h);
            for (x, s) in t.data_mut().iter_mut().zip(templates.t[m.index()][h][y].data()) {
                *x += a * s;
            }
        }
        t
    };
    let raw_a = raw(Modality::Audio, tok.audio_shape()?.to_vec());
    let raw_v = raw(Modality::Video, tok.video_shape().to_vec());
    Ok(SyntheticSample {
        raw_a,
        raw_v,
        labels,
        audio_present: true,
        video_present: true,
    })
}

fn generate_split(
    cfg: &SynthConfig,
    tok: &TokenizerConfig,
    templates: &Templates,
    name: &str,
    n: usize,
) -> Result<Vec<SyntheticSample>> {
    let base = SplitMix64::stream(cfg.seed, name);
    let mut samples = (0..n)
        .map(|i| draw_sample(cfg, tok, templates, &mut base.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let k = (cfg.natural_missing_rate * n as f64 + 1e-9).floor() as usize;
    let mut rng = SplitMix64::stream(cfg.seed, &format!("{name}-natural-missing"));
    for i in rng.sample_without_replacement(n, k) {
        let s = &mut samples[i];
        match cfg.missing_modality {
            Modality::Audio => {
                s.audio_present = false;
                s.raw_a.data_mut().fill(0.0);
            }
            Modality::Video => {
                s.video_present = false;
                s.raw_v.data_mut().fill(0.0);
            }
        }
    }
    Ok(samples)
}

/// Deterministic in `cfg.seed`; samples are derived from per-index child streams.
pub fn generate(cfg: &SynthConfig, tok: &TokenizerConfig) -> Result<Dataset> {
    cfg.validate(tok)?;
    let templates = Templates::new(cfg, tok)?;
    Ok(Dataset {
        config: cfg.clone(),
        tokenizer: tok.clone(),
        train: generate_split(cfg, tok, &templates, "synth-train", cfg.n_train)?,
        test: generate_split(cfg, tok, &templates, "synth-test", cfg.n_test)?,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that the correct one of `k` orthogonal unit templates wins
/// under white noise: `∫ φ(z) Φ(z + snr)^(k-1) dz`.
pub fn orthogonal_template_accuracy(snr: f64, k: usize) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    if snr.is_infinite() {
        return 1.0;
    }
    // composite Simpson on [-12, 12]; the integrand is smooth and negligible outside
    let n = 4000;
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / n as f64;
    let f = |z: f64| {
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi * normal_cdf(z + snr).powi(k as i32 - 1)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let z = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
    }
    (s * h / 3.0).min(1.0)
}

/// Per-head optimal accuracy when only `subset` is observed. Combining
/// modalities adds squared amplitudes.
pub fn bayes_accuracy_bound(cfg: &SynthConfig, subset: &[Modality]) -> Vec<f64> {
    cfg.head_classes()
        .iter()
        .enumerate()
        .map(|(h, &k)| {
            let energy: f64 = subset.iter().map(|&m| cfg.amplitude(m, h).powi(2)).sum();
            if energy == 0.0 {
                return 1.0 / k as f64;
            }
            if cfg.noise_std == 0.0 {
                return 1.0;
            }
            orthogonal_template_accuracy(energy.sqrt() / cfg.noise_std, k)
        })
        .collect()
}

/// Probability that every head is right.
pub fn joint_bayes_bound(cfg: &SynthConfig, subset: &[Modality]) -> f64 {
    bayes_accuracy_bound(cfg, subset).iter().product()
}

/// Modality with the higher joint-head bound.
pub fn dominant_modality(cfg: &SynthConfig) -> Modality {
    if joint_bayes_bound(cfg, &[Modality::Video]) >= joint_bayes_bound(cfg, &[Modality::Audio]) {
        Modality::Video
    } else {
        Modality::Audio
    }
}

/// Template-matching classifier: for each head, the class whose template has
/// the largest amplitude-weighted correlation summed over the observed modalities.
pub fn template_match(
    sample: &SyntheticSample,
    cfg: &SynthConfig,
    tok: &TokenizerConfig,
    subset: &[Modality],
) -> Result<Vec<usize>> {
    let templates = Templates::new(cfg, tok)?;
    let mut out = vec![];
    for (h, &k) in cfg.head_classes().iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..k {
            let mut score = 0.0;
            for &m in subset {
                let t = &templates.t[m.index()][h][c];
                let corr: f64 = t.data().iter().zip(sample.raw(m).data()).map(|(a, b)| a * b).sum();
                score += cfg.amplitude(m, h) * corr;
            }
            if score > best.0 {
                best = (score, c);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// Per-head class counts.
pub fn label_histogram(samples: &[SyntheticSample], head_classes: &[usize]) -> Vec<Vec<usize>> {
    let mut hist: Vec<Vec<usize>> = head_classes.iter().map(|&k| vec![0; k]).collect();
    for s in samples {
        for (h, &y) in s.labels.iter().enumerate() {
            hist[h][y] += 1;
        }
    }
    hist
}

const MAGIC: &[u8; 4] = b"MMTD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: SynthConfig,
    tokenizer: TokenizerConfig,
    n_train: usize,
    n_test: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    train: BTreeMap<String, Vec<usize>>,
    test: BTreeMap<String, Vec<usize>>,
    natural_missing: BTreeMap<String, usize>,
}

fn head_names(n: usize) -> Vec<String> {
    ["A", "B"].iter().take(n).map(|s| s.to_string()).collect()
}

impl Dataset {
    /// Binary layout, little-endian:
    ///
    /// ```text
    /// "MMTD" | u32 version | u64 header_len | header JSON (config, tokenizer, split sizes)
    /// per sample, train then test:
    ///   u8 audio_present | u8 video_present | u32 label per head
    ///   f64 raw_a[bins * frames] | f64 raw_v[frames * H * W]
    /// ```
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            n_train: self.train.len(),
            n_test: self.test.len(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for s in self.train.iter().chain(&self.test) {
            buf.clear();
            buf.push(s.audio_present as u8);
            buf.push(s.video_present as u8);
            for &y in &s.labels {
                buf.extend_from_slice(&(y as u32).to_le_bytes());
            }
            for x in s.raw_a.data().iter().chain(s.raw_v.data()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a dataset file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported dataset version {version}")));
        }
        let len = read_u64(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let cfg = header.config;
        let tok = header.tokenizer;
        let heads = cfg.head_classes();
        let a_shape = tok.audio_shape()?.to_vec();
        let v_shape = tok.video_shape().to_vec();
        let mut read_split = |n: usize| -> Result<Vec<SyntheticSample>> {
            (0..n)
                .map(|_| {
                    let mut flags = [0u8; 2];
                    r.read_exact(&mut flags)?;
                    let mut labels = vec![];
                    for &k in &heads {
                        let y = read_u32(r)? as usize;
                        if y >= k {
                            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
                        }
                        labels.push(y);
                    }
                    let raw_a = read_tensor(r, a_shape.clone())?;
                    let raw_v = read_tensor(r, v_shape.clone())?;
                    Ok(SyntheticSample {
                        raw_a,
                        raw_v,
                        labels,
                        audio_present: flags[0] != 0,
                        video_present: flags[1] != 0,
                    })
                })
                .collect()
        };
        let train = read_split(header.n_train)?;
        let test = read_split(header.n_test)?;
        Ok(Self {
            config: cfg,
            tokenizer: tok,
            train,
            test,
        })
    }

    /// Writes `path` and a `<path>.json` sidecar with label histograms.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }

    fn sidecar(&self) -> Sidecar {
        let heads = self.config.head_classes();
        let names = head_names(heads.len());
        let hist = |s: &[SyntheticSample]| -> BTreeMap<String, Vec<usize>> {
            names.iter().cloned().zip(label_histogram(s, &heads)).collect()
        };
        let missing = |s: &[SyntheticSample]| s.iter().filter(|x| !x.is_complete()).count();
        Sidecar {
            train: hist(&self.train),
            test: hist(&self.test),
            natural_missing: [
                ("train".to_string(), missing(&self.train)),
                ("test".to_string(), missing(&self.test)),
            ]
            .into_iter()
            .collect(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_tok() -> TokenizerConfig {
        TokenizerConfig {
            audio_bins: 8,
            audio_frames_per_second: 16,
            audio_seconds: 1.0,
            audio_patch: [4, 4],
            video_frames: 2,
            video_hw: [8, 8],
            video_patch: [4, 4, 2],
            embed_dim: 8,
        }
    }

    #[test]
    fn templates_are_orthonormal() {
        let tok = TokenizerConfig::default();
        for m in Modality::ALL {
            let ts: Vec<Tensor> = (0..8).map(|r| template(&tok, m, r).unwrap()).collect();
            for i in 0..8 {
                for j in 0..8 {
                    let d: f64 = ts[i].data().iter().zip(ts[j].data()).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12, "{m} {i} {j} {d}");
                }
            }
        }
    }

    #[test]
    fn bound_reference_values() {
        // scipy.integrate.quad of phi(z) * Phi(z + s)^(k - 1)
        let cases = [
            (1.0, 4, 0.5520),
            (1.5, 4, 0.7020),
            (2.0, 4, 0.8230),
            (1.0, 3, 0.6340),
            (1.5, 3, 0.7660),
        ];
        for (snr, k, want) in cases {
            let got = orthogonal_template_accuracy(snr, k);
            assert!((got - want).abs() < 2e-3, "snr {snr} k {k}: {got}");
        }
        assert!((orthogonal_template_accuracy(0.0, 4) - 0.25).abs() < 1e-9);
        assert!((orthogonal_template_accuracy(0.0, 3) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let tok = small_tok();
        let cfg = SynthConfig {
            n_train: 20,
            n_test: 10,
            natural_missing_rate: 0.3,
            ..SynthConfig::default()
        };
        let d1 = generate(&cfg, &tok).unwrap();
        let d2 = generate(&cfg, &tok).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.train.iter().filter(|s| !s.video_present).count(), 6);
        assert_eq!(d1.test.iter().filter(|s| !s.video_present).count(), 3);
        for s in d1.train.iter().filter(|s| !s.video_present) {
            assert!(s.raw_v.data().iter().all(|&x| x == 0.0));
        }
        let mut buf = vec![];
        d1.write(&mut buf).unwrap();
        let back = Dataset::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, d1);
    }
}
