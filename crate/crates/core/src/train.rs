//! Supervised fine-tuning loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{AdamWConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::mbt::MbtParameters;
use crate::missing::{presence_plan, random_replace, substitute, Plan, SubstitutionMethod, TrainMissingPolicy};
use crate::nn::Graph;
use crate::pipeline::{batch_logits, ModelKind, Prepared};
use crate::protocol::ClassWeights;
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Scale each sample's loss by `1 - |S_y| / |S|` of its class, per head.
    #[serde(default)]
    pub class_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 2,
            class_weighted: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs exceeds epochs".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self, steps_per_epoch: usize) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: (self.warmup_epochs * steps_per_epoch) as u64,
            total_steps: (self.epochs * steps_per_epoch).max(1) as u64,
            ..AdamWConfig::default()
        }
    }
}

/// Training ids into a sample pool together with their presence under the
/// missingness schedule.
#[derive(Clone, Debug)]
pub struct TrainingSet<'a> {
    pub samples: &'a [Prepared],
    pub ids: Vec<usize>,
    pub present: Vec<[bool; 2]>,
}

impl<'a> TrainingSet<'a> {
    /// Every sample with its natural presence.
    pub fn all(samples: &'a [Prepared]) -> Self {
        Self {
            samples,
            ids: (0..samples.len()).collect(),
            present: samples.iter().map(|s| s.present).collect(),
        }
    }

    /// Only samples with both modalities.
    pub fn complete_only(self) -> Self {
        let keep: Vec<usize> = (0..self.ids.len()).filter(|&i| self.present[i] == [true, true]).collect();
        Self {
            samples: self.samples,
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            present: keep.iter().map(|&i| self.present[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Modal-complete samples that were randomly replaced, per epoch.
    pub substituted: Vec<usize>,
    pub steps: u64,
}

/// Plans for one epoch; one draw per modal-complete sample, in id order.
pub fn epoch_plans(set: &TrainingSet, policy: Option<&TrainMissingPolicy>, seed: u64, epoch: usize) -> Result<Vec<Plan>> {
    match policy {
        None => Ok(set
            .present
            .iter()
            .map(|&p| substitute(presence_plan(p), SubstitutionMethod::Mmt))
            .collect()),
        Some(policy) => {
            let mut rng = SplitMix64::stream(seed, &policy.rng_stream).child(epoch as u64);
            set.present
                .iter()
                .map(|&p| {
                    let draw = if p == [true, true] { rng.uniform() } else { 1.0 };
                    random_replace(p, policy, draw)
                })
                .collect()
        }
    }
}

/// Fine-tunes `params` in place. Missing modalities always become MMTs;
/// `policy` adds random replacement of modal-complete samples.
pub fn train(
    params: &mut MbtParameters,
    set: &TrainingSet,
    kind: ModelKind,
    policy: Option<&TrainMissingPolicy>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if let Some(p) = policy {
        p.validate()?;
    }
    let heads: Vec<usize> = params.config.heads_spec.iter().map(|h| h.classes).collect();
    let weights = if cfg.class_weighted {
        let labels: Vec<&[usize]> = set.ids.iter().map(|&i| set.samples[i].labels.as_slice()).collect();
        Some(ClassWeights::from_labels(&labels, &heads)?)
    } else {
        None
    };
    let steps_per_epoch = set.len().div_ceil(cfg.batch_size);
    let mut opt = OptimizerState::new(cfg.optimizer(steps_per_epoch), params.store.values());
    let decay = params.store.decay_flags().to_vec();
    let mut dropout_rng = SplitMix64::stream(seed, "dropout");
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let plans = epoch_plans(set, policy, seed, epoch)?;
        let replaced = plans
            .iter()
            .zip(&set.present)
            .filter(|(p, pr)| **pr == [true, true] && p.iter().any(|s| s.is_substituted()))
            .count();
        log.substituted.push(replaced);
        let mut order: Vec<usize> = (0..set.len()).collect();
        SplitMix64::stream(seed, "train-order").child(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Prepared> = chunk.iter().map(|&i| &set.samples[set.ids[i]]).collect();
            let batch_plans: Vec<Plan> = chunk.iter().map(|&i| plans[i]).collect();
            let mut g = Graph::new(&params.store);
            let drop = (params.config.attention_dropout > 0.0).then_some(&mut dropout_rng);
            let logits = batch_logits(&mut g, params, &samples, &batch_plans, kind, drop)?;
            let mut loss = None;
            for (h, &lv) in logits.iter().enumerate() {
                let labels: Vec<usize> = samples.iter().map(|s| s.labels[h]).collect();
                let w: Vec<f64> = match &weights {
                    Some(cw) => labels.iter().map(|&y| cw.weights[h][y]).collect(),
                    None => vec![1.0; labels.len()],
                };
                let l = g.tape.weighted_cross_entropy(lv, &labels, &w)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => g.tape.add(acc, l)?,
                });
            }
            let loss = loss.expect("at least one head");
            total += g.value(loss).data()[0] * chunk.len() as f64;
            let mut grads = g.tape.backward(loss)?;
            let pg = g.param_grads(&mut grads);
            opt.step(params.store.values_mut(), &pg, &decay)?;
            log.steps += 1;
        }
        let mean = total / set.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}
