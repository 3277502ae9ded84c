//! Binary checkpoints for pretraining and fine-tuning.
//!
//! Layout, little-endian: magic `MMTC`, `u32` version, `u64` header length,
//! the JSON header, then every tensor's `f64` values in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mae::{is_transferred, MaeModel};
use crate::mbt::MbtParameters;
use crate::nn::ParamStore;
use crate::pipeline::ModelKind;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMTC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub config: RunConfig,
    pub kind: ModelKind,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(stage: Stage, config: &RunConfig, kind: ModelKind, seed: u64, store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                stage,
                config: config.clone(),
                kind,
                seed,
                tensors,
            },
            values: store.values().to_vec(),
        }
    }

    /// A fine-tuned model; its architecture comes from `config.model`.
    pub fn finetune(config: &RunConfig, kind: ModelKind, seed: u64, params: &MbtParameters) -> Self {
        let mut config = config.clone();
        config.model = params.config.clone();
        Self::from_store(Stage::Finetune, &config, kind, seed, &params.store)
    }

    pub fn pretrain(config: &RunConfig, seed: u64, mae: &MaeModel) -> Self {
        let mut config = config.clone();
        config.model = mae.params.config.clone();
        config.mae = mae.config.clone();
        Self::from_store(Stage::Pretrain, &config, ModelKind::Multimodal, seed, &mae.params.store)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header.tensors.iter().position(|e| e.name == name).map(|i| &self.values[i])
    }

    /// Fills `store` by name. Every parameter of `store` must be present;
    /// extra tensors are rejected unless `allow_extra` accepts their name.
    fn fill(&self, store: &mut ParamStore, allow_extra: impl Fn(&str) -> bool) -> Result<()> {
        for e in &self.header.tensors {
            if store.id(&e.name).is_none() && !allow_extra(&e.name) {
                return Err(Error::Checkpoint(format!("unexpected tensor {} in checkpoint", e.name)));
            }
        }
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    /// Model parameters. A pretraining checkpoint yields its encoder with the
    /// (untrained) heads and MMTs it was created with; decoders are dropped.
    pub fn to_params(&self) -> Result<MbtParameters> {
        let cfg = &self.header.config;
        let mut params = MbtParameters::new(&cfg.model, &cfg.tokenizer, self.header.seed)?;
        match self.header.stage {
            Stage::Finetune => self.fill(&mut params.store, |_| false)?,
            Stage::Pretrain => self.fill(&mut params.store, |n| n.starts_with("decoder."))?,
        }
        Ok(params)
    }

    pub fn to_mae(&self) -> Result<MaeModel> {
        if self.header.stage != Stage::Pretrain {
            return Err(Error::Checkpoint("not a pretraining checkpoint".into()));
        }
        let cfg = &self.header.config;
        let mut mae = MaeModel::new(&cfg.model, &cfg.tokenizer, &cfg.mae, self.header.seed)?;
        self.fill(&mut mae.params.store, |_| false)?;
        Ok(mae)
    }

    /// Names of tensors carried into fine-tuning.
    pub fn encoder_names(&self) -> Vec<&str> {
        self.header
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| is_transferred(n))
            .collect()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.values {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for x in t.data() {
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
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        let mut values = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Checkpoint(format!("checkpoint truncated in {}", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            values.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read(&mut std::io::BufReader::new(f))
    }
}
