//! Run configuration: one JSON document for every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::MaeConfig;
use crate::mbt::{HeadSpec, ModelConfig};
use crate::missing::{Designation, TrainMissingPolicy};
use crate::pipeline::ModelKind;
use crate::synthdata::SynthConfig;
use crate::tokenizer::{Modality, TokenizerConfig};
use crate::train::TrainConfig;

pub const PRESETS: [&str; 3] = ["epic-kitchens-like", "epic-sounds-like", "ego4d-ar-like"];

/// How missing modalities are handled while training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingConfig {
    /// Random-replace probability; 0 learns the MMT from incomplete samples only.
    pub p: f64,
    /// Modality that owns the MMT and goes missing at test time (`both` for two MMTs).
    pub designated: Designation,
    /// Fraction of training samples missing the designated modality (single MMT).
    #[serde(default)]
    pub r_train: f64,
    /// `[r^A, r^V]` for two MMTs; replaces `r_train`.
    #[serde(default)]
    pub r_train_per_modality: Option<[f64; 2]>,
    /// Train on modal-complete samples only (the filter-and-train baseline).
    #[serde(default)]
    pub filter_incomplete: bool,
}

impl MissingConfig {
    pub fn policy(&self) -> TrainMissingPolicy {
        TrainMissingPolicy::new(self.p, self.designated)
    }

    /// Modalities removed when building test variants.
    pub fn test_modalities(&self) -> Vec<Modality> {
        match self.designated {
            Designation::Audio => vec![Modality::Audio],
            Designation::Video => vec![Modality::Video],
            Designation::Both => Modality::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    #[serde(default = "multimodal")]
    pub kind: ModelKind,
    pub data: SynthConfig,
    /// Dataset file written by `gen-data`; generated in memory when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub train: TrainConfig,
    pub missing: MissingConfig,
    #[serde(default)]
    pub mae: MaeConfig,
    /// Test missing rates as fractions, ascending.
    pub r_test: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

fn multimodal() -> ModelKind {
    ModelKind::Multimodal
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate(&self.tokenizer)?;
        self.missing.policy().validate()?;
        if self.model.embed_dim != self.tokenizer.embed_dim {
            return Err(Error::Config(format!(
                "model.embed_dim {} differs from tokenizer.embed_dim {}",
                self.model.embed_dim, self.tokenizer.embed_dim
            )));
        }
        let data_heads = self.data.head_classes();
        let model_heads: Vec<usize> = self.model.heads_spec.iter().map(|h| h.classes).collect();
        if data_heads != model_heads {
            return Err(Error::Config(format!(
                "model heads {model_heads:?} do not match data classes {data_heads:?}"
            )));
        }
        let rate_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rate_ok(self.missing.r_train) {
            return Err(Error::Config(format!("r_train {} outside [0, 1]", self.missing.r_train)));
        }
        if let Some([ra, rv]) = self.missing.r_train_per_modality {
            if self.missing.designated != Designation::Both {
                return Err(Error::Config("r_train_per_modality needs designated = both".into()));
            }
            if !rate_ok(ra) || !rate_ok(rv) || ra + rv > 1.0 {
                return Err(Error::Config(format!("per-modality rates {ra} + {rv} are not feasible")));
            }
        }
        if self.r_test.is_empty() || !self.r_test.iter().all(|&r| rate_ok(r)) || self.r_test.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("r_test must be a non-empty ascending list of fractions".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    /// Video-dominant, two heads (verb-like A with 4 classes, noun-like B with 3), p = 0.25.
    pub fn epic_kitchens_like() -> Self {
        let dim = 16;
        Self {
            name: "epic-kitchens-like".into(),
            tokenizer: TokenizerConfig {
                embed_dim: dim,
                ..TokenizerConfig::default()
            },
            model: ModelConfig {
                embed_dim: dim,
                ..ModelConfig::default()
            },
            kind: ModelKind::Multimodal,
            data: SynthConfig::default(),
            dataset: None,
            train: TrainConfig {
                epochs: 10,
                batch_size: 8,
                lr: 4e-3,
                weight_decay: 0.05,
                warmup_epochs: 1,
                class_weighted: false,
            },
            missing: MissingConfig {
                p: 0.25,
                designated: Designation::Video,
                r_train: 0.0,
                r_train_per_modality: None,
                filter_incomplete: false,
            },
            mae: MaeConfig::default(),
            r_test: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: vec![1, 2, 3],
            out: PathBuf::from("runs/epic-kitchens-like"),
        }
    }

    /// Audio-dominant, one head, p = 0.6.
    pub fn epic_sounds_like() -> Self {
        let mut cfg = Self::epic_kitchens_like();
        cfg.name = "epic-sounds-like".into();
        cfg.data.classes_head_b = 0;
        cfg.data.snr_a_for_code_a = 1.5;
        cfg.data.snr_v_for_code_a = 1.25;
        cfg.data.snr_a_for_code_b = 0.0;
        cfg.data.snr_v_for_code_b = 0.0;
        cfg.model.heads_spec = vec![HeadSpec::new("class", 4)];
        cfg.missing.p = 0.6;
        cfg.missing.designated = Designation::Audio;
        cfg.out = PathBuf::from("runs/epic-sounds-like");
        cfg
    }

    /// 29% of clips naturally lack audio in both splits; class-weighted loss, p = 0.25.
    pub fn ego4d_ar_like() -> Self {
        let mut cfg = Self::epic_kitchens_like();
        cfg.name = "ego4d-ar-like".into();
        cfg.data.natural_missing_rate = 0.29;
        cfg.data.missing_modality = Modality::Audio;
        cfg.train.class_weighted = true;
        cfg.missing.designated = Designation::Audio;
        cfg.missing.r_train = 0.29;
        cfg.r_test = vec![0.29, 0.5, 0.75, 1.0];
        cfg.out = PathBuf::from("runs/ego4d-ar-like");
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "epic-kitchens-like" => Ok(Self::epic_kitchens_like()),
            "epic-sounds-like" => Ok(Self::epic_sounds_like()),
            "ego4d-ar-like" => Ok(Self::ego4d_ar_like()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }
}
