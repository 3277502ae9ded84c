//! One seed of a run: data, training sets, fitting and evaluation grids.

use crate::config::{MissingConfig, RunConfig};
use crate::error::{Error, Result};
use crate::mae::{pretrain, MaeModel};
use crate::mbt::{MbtParameters, ModelConfig};
use crate::missing::{Designation, SubstitutionMethod};
use crate::pipeline::{prepare, ModelKind, Prepared};
use crate::protocol::{apply_mask, dual_presence, evaluate, make_test_variants, MetricsTable, MissingnessSchedule, TEST_STREAM, TRAIN_STREAM};
use crate::synthdata::{generate, Dataset};
use crate::tokenizer::Modality;
use crate::train::{train, TrainLog, TrainingSet};

/// Prepared splits plus the training missingness schedule for one seed.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: RunConfig,
    pub seed: u64,
    pub train: Vec<Prepared>,
    pub test: Vec<Prepared>,
    pub schedule: MissingnessSchedule,
}

impl RunContext {
    /// Loads `config.dataset` when set, otherwise generates the data in memory.
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        let dataset = match &config.dataset {
            Some(path) => Dataset::load(path)?,
            None => generate(&config.data, &config.tokenizer)?,
        };
        Self::from_dataset(config, seed, &dataset)
    }

    pub fn from_dataset(config: &RunConfig, seed: u64, dataset: &Dataset) -> Result<Self> {
        if dataset.tokenizer != config.tokenizer {
            return Err(Error::Data("dataset geometry differs from the configured tokenizer".into()));
        }
        let train = prepare(&dataset.train, &config.tokenizer)?;
        let test = prepare(&dataset.test, &config.tokenizer)?;
        let complete: Vec<bool> = train.iter().map(|s| s.present == [true, true]).collect();
        let schedule = MissingnessSchedule::new(&complete, seed, TRAIN_STREAM);
        Ok(Self {
            config: config.clone(),
            seed,
            train,
            test,
            schedule,
        })
    }

    /// The schedule behind every test variant of this seed.
    pub fn test_schedule(&self) -> MissingnessSchedule {
        let complete: Vec<bool> = self.test.iter().map(|s| s.present == [true, true]).collect();
        MissingnessSchedule::new(&complete, self.seed, TEST_STREAM)
    }

    /// Training presence after applying `r_train` (or `[r^A, r^V]`).
    pub fn train_presence(&self, missing: &MissingConfig) -> Result<Vec<[bool; 2]>> {
        let natural: Vec<[bool; 2]> = self.train.iter().map(|s| s.present).collect();
        if let Some([ra, rv]) = missing.r_train_per_modality {
            return dual_presence(&self.schedule, ra, rv);
        }
        if missing.r_train == 0.0 {
            return Ok(natural);
        }
        let m = match missing.designated {
            Designation::Audio => Modality::Audio,
            Designation::Video => Modality::Video,
            Designation::Both => {
                return Err(Error::Config("with two MMTs use r_train_per_modality".into()));
            }
        };
        Ok(apply_mask(&natural, &self.schedule.mask(missing.r_train)?, m))
    }

    pub fn training_set(&self, missing: &MissingConfig, kind: ModelKind) -> Result<TrainingSet<'_>> {
        let present = self.train_presence(missing)?;
        let keep: Vec<usize> = (0..present.len())
            .filter(|&i| match kind {
                _ if missing.filter_incomplete => present[i] == [true, true],
                ModelKind::Unimodal(m) => present[i][m.index()],
                ModelKind::Multimodal => true,
            })
            .collect();
        Ok(TrainingSet {
            samples: &self.train,
            present: keep.iter().map(|&i| present[i]).collect(),
            ids: keep,
        })
    }

    /// Trains a fresh model (or continues from `init`) under `missing`.
    pub fn fit(
        &self,
        model: &ModelConfig,
        kind: ModelKind,
        missing: &MissingConfig,
        init: Option<MbtParameters>,
    ) -> Result<(MbtParameters, TrainLog)> {
        let mut params = match init {
            Some(p) => p,
            None => MbtParameters::new(model, &self.config.tokenizer, self.seed)?,
        };
        let set = self.training_set(missing, kind)?;
        let policy = missing.policy();
        let log = train(&mut params, &set, kind, Some(&policy), &self.config.train, self.seed)?;
        Ok((params, log))
    }

    /// MAE pretraining on the modal-complete training samples.
    pub fn pretrain(&self, model: &ModelConfig) -> Result<(MaeModel, Vec<f64>)> {
        let mut mae = MaeModel::new(model, &self.config.tokenizer, &self.config.mae, self.seed)?;
        let history = pretrain(&mut mae, &self.train, self.seed)?;
        Ok((mae, history))
    }

    /// Accuracy over the `r_test` grid for each method, one grid per test modality.
    /// Records are labelled `label:method`, with `:audio`/`:video` appended
    /// when both modalities are evaluated.
    pub fn evaluate_grid(
        &self,
        params: &MbtParameters,
        kind: ModelKind,
        test_modalities: &[Modality],
        methods: &[SubstitutionMethod],
        label: &str,
    ) -> Result<MetricsTable> {
        let heads: Vec<String> = params.config.heads_spec.iter().map(|h| h.name.clone()).collect();
        let mut table = MetricsTable::default();
        for &m in test_modalities {
            let variants = make_test_variants(&self.test, &self.config.r_test, m, self.seed)?;
            for v in &variants {
                for &method in methods {
                    let eval = evaluate(params, kind, &self.test, &v.present, method)?;
                    let mut name = if label.is_empty() {
                        method.name().to_string()
                    } else {
                        format!("{label}:{method}")
                    };
                    if test_modalities.len() > 1 {
                        name = format!("{name}:{m}");
                    }
                    table.add_evaluation(&name, percent(v.rate), &heads, self.seed, &eval);
                }
            }
        }
        Ok(table)
    }
}

/// Fraction to percent, rounded so that e.g. 0.29 prints as 29.
pub fn percent(rate: f64) -> f64 {
    (rate * 1e8).round() / 1e6
}
