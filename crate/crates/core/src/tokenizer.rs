//! Patch tokenization of spectrogram-like (2-D) and clip-like (3-D) arrays.
//!
//! Audio arrays are `(bins, frames)` with `frames = frames_per_second * seconds`
//! and are cut into non-overlapping `(h, w)` patches. Video arrays are
//! `(frames, H, W)` and are cut into non-overlapping `(h, w, t)` spacetime
//! tubes, which is what a 3-D convolution with stride equal to its kernel
//! computes before the channel projection.
//!
//! Token order is row-major over the patch grid; the values inside a patch are
//! flattened row-major as well (`(di, dj)` for audio, `(dt, dy, dx)` for video).

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Audio, Modality::Video];

    pub fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Video => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Audio => Modality::Video,
            Modality::Video => Modality::Audio,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" | "a" | "A" => Ok(Modality::Audio),
            "video" | "v" | "V" => Ok(Modality::Video),
            _ => Err(Error::Config(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub audio_bins: usize,
    pub audio_frames_per_second: usize,
    pub audio_seconds: f64,
    /// `(h, w)` over `(bins, frames)`.
    pub audio_patch: [usize; 2],
    pub video_frames: usize,
    pub video_hw: [usize; 2],
    /// `(h, w, t)`.
    pub video_patch: [usize; 3],
    pub embed_dim: usize,
}

impl Default for TokenizerConfig {
    /// Desk-scale geometry: 16 audio tokens, 32 video tokens.
    fn default() -> Self {
        Self {
            audio_bins: 16,
            audio_frames_per_second: 64,
            audio_seconds: 1.0,
            audio_patch: [8, 8],
            video_frames: 4,
            video_hw: [32, 32],
            video_patch: [8, 8, 2],
            embed_dim: 32,
        }
    }
}

fn check_div(axis: &str, extent: usize, patch: usize) -> Result<usize> {
    if patch == 0 || extent == 0 || extent % patch != 0 {
        return Err(Error::Config(format!(
            "{axis}: extent {extent} is not divisible by patch size {patch}"
        )));
    }
    Ok(extent / patch)
}

impl TokenizerConfig {
    /// Full-scale geometry: 128 mel bins at 100 frames/s for 8 s, 16x16
    /// patches; 16 frames of 224x224 with 16x16x2 tubes; ViT-Base width.
    pub fn full_scale() -> Self {
        Self {
            audio_bins: 128,
            audio_frames_per_second: 100,
            audio_seconds: 8.0,
            audio_patch: [16, 16],
            video_frames: 16,
            video_hw: [224, 224],
            video_patch: [16, 16, 2],
            embed_dim: 768,
        }
    }

    pub fn audio_frames(&self) -> Result<usize> {
        let f = self.audio_frames_per_second as f64 * self.audio_seconds;
        let r = f.round();
        if !(f.is_finite() && r >= 1.0 && (f - r).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "audio frames: {} frames/s x {} s is not a whole number of frames",
                self.audio_frames_per_second, self.audio_seconds
            )));
        }
        Ok(r as usize)
    }

    pub fn audio_shape(&self) -> Result<[usize; 2]> {
        Ok([self.audio_bins, self.audio_frames()?])
    }

    pub fn video_shape(&self) -> [usize; 3] {
        [self.video_frames, self.video_hw[0], self.video_hw[1]]
    }

    pub fn audio_grid(&self) -> Result<[usize; 2]> {
        Ok([
            check_div("audio bins", self.audio_bins, self.audio_patch[0])?,
            check_div("audio frames", self.audio_frames()?, self.audio_patch[1])?,
        ])
    }

    pub fn video_grid(&self) -> Result<[usize; 3]> {
        Ok([
            check_div("video frames", self.video_frames, self.video_patch[2])?,
            check_div("video height", self.video_hw[0], self.video_patch[0])?,
            check_div("video width", self.video_hw[1], self.video_patch[1])?,
        ])
    }

    pub fn token_count(&self, m: Modality) -> Result<usize> {
        match m {
            Modality::Audio => audio_token_count(self),
            Modality::Video => video_token_count(self),
        }
    }

    pub fn patch_volume(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio_patch[0] * self.audio_patch[1],
            Modality::Video => self.video_patch[0] * self.video_patch[1] * self.video_patch[2],
        }
    }

    pub fn raw_len(&self, m: Modality) -> Result<usize> {
        Ok(match m {
            Modality::Audio => self.audio_bins * self.audio_frames()?,
            Modality::Video => self.video_shape().iter().product(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.audio_grid()?;
        self.video_grid()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// `(bins * frames_per_second * seconds) / (patch_h * patch_w)`
pub fn audio_token_count(cfg: &TokenizerConfig) -> Result<usize> {
    let [a, b] = cfg.audio_grid()?;
    Ok(a * b)
}

/// `(frames * H * W) / (patch_h * patch_w * patch_t)`
pub fn video_token_count(cfg: &TokenizerConfig) -> Result<usize> {
    let [a, b, c] = cfg.video_grid()?;
    Ok(a * b * c)
}

fn shape_err(op: &'static str, expected: &[usize], got: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: expected.to_vec(),
        rhs: got.shape().to_vec(),
    }
}

/// `(n_tokens, patch_h * patch_w)` patches of a `(bins, frames)` array.
pub fn patchify_audio(raw: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    let shape = cfg.audio_shape()?;
    if raw.shape() != shape {
        return Err(shape_err("embed_audio", &shape, raw));
    }
    let [gb, gf] = cfg.audio_grid()?;
    let [ph, pw] = cfg.audio_patch;
    let frames = shape[1];
    let vol = ph * pw;
    let mut out = Vec::with_capacity(gb * gf * vol);
    for pb in 0..gb {
        for pf in 0..gf {
            for di in 0..ph {
                let row = (pb * ph + di) * frames + pf * pw;
                out.extend_from_slice(&raw.data()[row..row + pw]);
            }
        }
    }
    Tensor::new(vec![gb * gf, vol], out)
}

pub fn unpatchify_audio(patches: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    let shape = cfg.audio_shape()?;
    let [gb, gf] = cfg.audio_grid()?;
    let [ph, pw] = cfg.audio_patch;
    let expect = [gb * gf, ph * pw];
    if patches.shape() != expect {
        return Err(shape_err("unpatchify_audio", &expect, patches));
    }
    let frames = shape[1];
    let mut out = Tensor::zeros(shape.to_vec());
    let mut src = patches.data().iter();
    for pb in 0..gb {
        for pf in 0..gf {
            for di in 0..ph {
                let row = (pb * ph + di) * frames + pf * pw;
                for x in &mut out.data_mut()[row..row + pw] {
                    *x = *src.next().expect("sized above");
                }
            }
        }
    }
    Ok(out)
}

/// `(n_tokens, h * w * t)` tubes of a `(frames, H, W)` array.
pub fn patchify_video(raw: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    let shape = cfg.video_shape();
    if raw.shape() != shape {
        return Err(shape_err("embed_video", &shape, raw));
    }
    let [gt, gh, gw] = cfg.video_grid()?;
    let [ph, pw, pt] = cfg.video_patch;
    let [_, hh, ww] = shape;
    let vol = ph * pw * pt;
    let mut out = Vec::with_capacity(gt * gh * gw * vol);
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        let start = ((it * pt + dt) * hh + ih * ph + dy) * ww + iw * pw;
                        out.extend_from_slice(&raw.data()[start..start + pw]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gt * gh * gw, vol], out)
}

pub fn unpatchify_video(patches: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    let shape = cfg.video_shape();
    let [gt, gh, gw] = cfg.video_grid()?;
    let [ph, pw, pt] = cfg.video_patch;
    let expect = [gt * gh * gw, ph * pw * pt];
    if patches.shape() != expect {
        return Err(shape_err("unpatchify_video", &expect, patches));
    }
    let [_, hh, ww] = shape;
    let mut out = Tensor::zeros(shape.to_vec());
    let mut src = patches.data().iter();
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        let start = ((it * pt + dt) * hh + ih * ph + dy) * ww + iw * pw;
                        for x in &mut out.data_mut()[start..start + pw] {
                            *x = *src.next().expect("sized above");
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn patchify(m: Modality, raw: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    match m {
        Modality::Audio => patchify_audio(raw, cfg),
        Modality::Video => patchify_video(raw, cfg),
    }
}

pub fn unpatchify(m: Modality, patches: &Tensor, cfg: &TokenizerConfig) -> Result<Tensor> {
    match m {
        Modality::Audio => unpatchify_audio(patches, cfg),
        Modality::Video => unpatchify_video(patches, cfg),
    }
}

/// Learned patch projection and positional-embedding table of one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityEmbedding {
    pub proj: Linear,
    pub pos: ParamId,
}

impl ModalityEmbedding {
    pub fn init(init: &mut Init, prefix: &str, patch_volume: usize, n_tokens: usize, dim: usize) -> Self {
        Self {
            proj: init.linear(&format!("{prefix}.patch_proj"), patch_volume, dim),
            pos: init.normal(format!("{prefix}.pos"), vec![n_tokens, dim], 0.02),
        }
    }
}

/// Embedded tokens of one modality for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `(n_tokens, embed_dim)`
    pub tokens: Tensor,
    pub positions: Vec<usize>,
    pub modality: Modality,
    pub present: bool,
    /// Tokens were synthesized (MMT) rather than computed from raw input.
    pub substituted: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `patches · W + b`, one row per patch.
pub fn project_patches(g: &mut Graph, emb: &ModalityEmbedding, patches: Tensor) -> Result<Var> {
    let x = g.constant(patches);
    emb.proj.apply(g, x)
}

/// Adds `pos[positions[r]]` to row `r` of `content`.
pub fn add_positions(g: &mut Graph, emb: &ModalityEmbedding, content: Var, positions: &[usize]) -> Result<Var> {
    let table = g.param(emb.pos);
    let n = g.value(table).rows();
    if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidInput(format!(
            "position {bad} outside the {n}-row positional table"
        )));
    }
    let pos = g.tape.gather_rows(table, positions)?;
    g.tape.add(content, pos)
}

/// Tokenizes a stack of `batch` samples' patches (`batch * n` rows).
pub fn embed_patches(g: &mut Graph, emb: &ModalityEmbedding, patches: Tensor, n_tokens: usize) -> Result<Var> {
    let rows = patches.rows();
    let content = project_patches(g, emb, patches)?;
    let positions: Vec<usize> = (0..rows).map(|r| r % n_tokens.max(1)).collect();
    add_positions(g, emb, content, &positions)
}

fn embed(m: Modality, raw: &Tensor, cfg: &TokenizerConfig, emb: &ModalityEmbedding, store: &ParamStore) -> Result<TokenSequence> {
    let patches = patchify(m, raw, cfg)?;
    let n = patches.rows();
    let mut g = Graph::new(store);
    let v = embed_patches(&mut g, emb, patches, n)?;
    Ok(TokenSequence {
        tokens: g.value(v).clone(),
        positions: (0..n).collect(),
        modality: m,
        present: true,
        substituted: false,
    })
}

/// Patch-flatten, project and add positional embeddings to a `(bins, frames)` array.
pub fn embed_audio(raw: &Tensor, cfg: &TokenizerConfig, emb: &ModalityEmbedding, store: &ParamStore) -> Result<TokenSequence> {
    embed(Modality::Audio, raw, cfg, emb, store)
}

/// Tube-flatten, project and add positional embeddings to a `(frames, H, W)` array.
pub fn embed_video(raw: &Tensor, cfg: &TokenizerConfig, emb: &ModalityEmbedding, store: &ParamStore) -> Result<TokenSequence> {
    embed(Modality::Video, raw, cfg, emb, store)
}
