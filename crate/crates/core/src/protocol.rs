//! Missingness schedules, test variants, class weights and accuracy tables.
//!
//! A schedule orders the sample ids of a split: naturally incomplete ids first
//! (ascending), then the modal-complete ids in a seeded Fisher–Yates order.
//! The missing set at rate `r` is the first `⌊r·N⌋` ids, so sets for
//! increasing rates are nested.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mbt::MbtParameters;
use crate::missing::{presence_plan, substitute, Plan, SubstitutionMethod, TokenSource};
use crate::nn::Graph;
use crate::pipeline::{argmax_rows, batch_logits, group_by_absence, ModelKind, Prepared};
use crate::rng::SplitMix64;
use crate::tokenizer::Modality;

pub const TRAIN_STREAM: &str = "train-missing";
pub const TEST_STREAM: &str = "test-missing";

/// `⌊r·n⌋`, robust to rates such as 0.29 that are not exact in binary.
pub fn missing_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingnessSchedule {
    /// Sample ids in the order they become missing.
    pub order: Vec<usize>,
    /// Number of naturally incomplete ids at the head of `order`.
    pub natural: usize,
}

impl MissingnessSchedule {
    /// `complete[i]` tells whether sample `i` has both modalities.
    pub fn new(complete: &[bool], seed: u64, stream: &str) -> Self {
        let mut order: Vec<usize> = (0..complete.len()).filter(|&i| !complete[i]).collect();
        let natural = order.len();
        let mut rest: Vec<usize> = (0..complete.len()).filter(|&i| complete[i]).collect();
        SplitMix64::stream(seed, stream).shuffle(&mut rest);
        order.extend(rest);
        Self { order, natural }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn natural_rate(&self) -> f64 {
        if self.order.is_empty() {
            0.0
        } else {
            self.natural as f64 / self.order.len() as f64
        }
    }

    /// Ids missing at rate `r`, in schedule order.
    pub fn missing_ids(&self, rate: f64) -> Result<&[usize]> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("missing rate {rate} outside [0, 1]")));
        }
        let k = missing_count(rate, self.len());
        if k < self.natural {
            return Err(Error::Infeasible {
                requested: rate,
                natural: self.natural_rate(),
            });
        }
        Ok(&self.order[..k])
    }

    /// Per-id flag: missing at rate `r`.
    pub fn mask(&self, rate: f64) -> Result<Vec<bool>> {
        let mut m = vec![false; self.len()];
        for &i in self.missing_ids(rate)? {
            m[i] = true;
        }
        Ok(m)
    }

    /// Order-sensitive content hash of the schedule.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for id in &self.order {
            let _ = write!(s, "{id},");
        }
        crate::manifest::sha256_hex(s.as_bytes())
    }
}

/// Presence of every sample when the ids in `mask` lose `modality`.
pub fn apply_mask(natural: &[[bool; 2]], mask: &[bool], modality: Modality) -> Vec<[bool; 2]> {
    natural
        .iter()
        .zip(mask)
        .map(|(&p, &gone)| {
            let mut p = p;
            if gone {
                p[modality.index()] = false;
            }
            p
        })
        .collect()
}

/// Presence for two MMTs: the first `⌊r_a·N⌋` ids of the schedule lose audio,
/// the next `⌊r_v·N⌋` lose video. Needs a naturally complete split.
pub fn dual_presence(schedule: &MissingnessSchedule, rate_audio: f64, rate_video: f64) -> Result<Vec<[bool; 2]>> {
    if schedule.natural > 0 {
        return Err(Error::Config("per-modality missing rates need a naturally complete split".into()));
    }
    let n = schedule.len();
    let ka = missing_count(rate_audio, n);
    let kv = missing_count(rate_video, n);
    if ka + kv > n {
        return Err(Error::Config(format!(
            "missing rates {rate_audio} + {rate_video} exceed the split"
        )));
    }
    let mut present = vec![[true, true]; n];
    for &i in &schedule.order[..ka] {
        present[i][Modality::Audio.index()] = false;
    }
    for &i in &schedule.order[ka..ka + kv] {
        present[i][Modality::Video.index()] = false;
    }
    Ok(present)
}

/// A test split seen at one missing rate: a view over ids, never a copy of data.
#[derive(Clone, Debug, PartialEq)]
pub struct TestVariant {
    pub rate: f64,
    pub modality: Modality,
    pub present: Vec<[bool; 2]>,
}

impl TestVariant {
    pub fn missing(&self) -> usize {
        self.present.iter().filter(|p| **p != [true, true]).count()
    }
}

/// One nested variant per rate, all drawn from a single `"test-missing"` schedule.
pub fn make_test_variants(test: &[Prepared], rates: &[f64], modality: Modality, seed: u64) -> Result<Vec<TestVariant>> {
    if rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("test rates must be sorted".into()));
    }
    let natural: Vec<[bool; 2]> = test.iter().map(|s| s.present).collect();
    let complete: Vec<bool> = natural.iter().map(|p| *p == [true, true]).collect();
    let schedule = MissingnessSchedule::new(&complete, seed, TEST_STREAM);
    rates
        .iter()
        .map(|&rate| {
            let mask = schedule.mask(rate)?;
            Ok(TestVariant {
                rate,
                modality,
                present: apply_mask(&natural, &mask, modality),
            })
        })
        .collect()
}

/// Per-head class weights `w_i = 1 - |S_i| / |S|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
    pub weights: Vec<Vec<f64>>,
}

impl ClassWeights {
    pub fn from_histogram(counts: Vec<Vec<usize>>) -> Result<Self> {
        let totals: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
        let total = totals.first().copied().unwrap_or(0);
        if total == 0 || totals.iter().any(|&t| t != total) {
            return Err(Error::Data("class histogram is empty or inconsistent across heads".into()));
        }
        let weights = counts
            .iter()
            .map(|c| c.iter().map(|&k| 1.0 - k as f64 / total as f64).collect())
            .collect();
        Ok(Self { counts, total, weights })
    }

    pub fn from_labels(labels: &[&[usize]], head_classes: &[usize]) -> Result<Self> {
        let mut counts: Vec<Vec<usize>> = head_classes.iter().map(|&k| vec![0; k]).collect();
        for l in labels {
            for (h, &y) in l.iter().enumerate().take(head_classes.len()) {
                if y >= head_classes[h] {
                    return Err(Error::Data(format!("label {y} out of range for {} classes", head_classes[h])));
                }
                counts[h][y] += 1;
            }
        }
        Self::from_histogram(counts)
    }
}

/// `w_label * (logsumexp(logits) - logits[label])`.
pub fn weighted_cross_entropy(logits: &[f64], label: usize, weights: &[f64]) -> Result<f64> {
    if label >= logits.len() || weights.len() != logits.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(weights[label] * (lse - logits[label]))
}

/// Correct predictions per head over `presence`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: Vec<usize>,
    pub n: usize,
    /// Samples without any usable modality under the method.
    pub unanswerable: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> Vec<f64> {
        self.correct.iter().map(|&c| c as f64 / self.n.max(1) as f64).collect()
    }
}

const EVAL_BATCH: usize = 64;

/// Top-1 accuracy per head with missing modalities handled by `method`.
/// A sample left with no modality counts as wrong.
pub fn evaluate(
    params: &MbtParameters,
    kind: ModelKind,
    samples: &[Prepared],
    presence: &[[bool; 2]],
    method: SubstitutionMethod,
) -> Result<Evaluation> {
    if samples.len() != presence.len() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: vec![samples.len()],
            rhs: vec![presence.len()],
        });
    }
    let heads = params.config.heads_spec.len();
    let plans: Vec<Plan> = presence
        .iter()
        .map(|&p| kind.restrict(substitute(presence_plan(p), method)))
        .collect();
    let mut correct = vec![0; heads];
    let mut unanswerable = 0;
    for group in group_by_absence(&plans) {
        if plans[group[0]] == [TokenSource::Absent; 2] {
            unanswerable += group.len();
            log::warn!("{} samples have no modality left under {method}; counted as wrong", group.len());
            continue;
        }
        for chunk in group.chunks(EVAL_BATCH) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &samples[i]).collect();
            let bp: Vec<Plan> = chunk.iter().map(|&i| plans[i]).collect();
            let mut g = Graph::new(&params.store);
            let logits = batch_logits(&mut g, params, &batch, &bp, kind, None)?;
            for (h, &lv) in logits.iter().enumerate() {
                let pred = argmax_rows(g.value(lv));
                correct[h] += pred.iter().zip(&batch).filter(|(p, s)| **p == s.labels[h]).count();
            }
        }
    }
    Ok(Evaluation {
        correct,
        n: samples.len(),
        unanswerable,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    /// Percent.
    pub r_test: f64,
    pub head: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n: usize,
}

pub const CSV_HEADER: &str = "method,r_test,head,seed,accuracy,n";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub records: Vec<MetricsRecord>,
}

impl MetricsTable {
    pub fn push(&mut self, r: MetricsRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.records.extend(other.records);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records from one evaluation, one per head.
    pub fn add_evaluation(&mut self, method: &str, r_test: f64, heads: &[String], seed: u64, eval: &Evaluation) {
        for (h, acc) in eval.accuracy().into_iter().enumerate() {
            self.push(MetricsRecord {
                method: method.to_string(),
                r_test,
                head: heads[h].clone(),
                seed,
                accuracy: acc,
                n: eval.n,
            });
        }
    }

    /// Accuracy of the record matching every key, if any.
    pub fn get(&self, method: &str, r_test: f64, head: &str, seed: u64) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.method == method && r.r_test == r_test && r.head == head && r.seed == seed)
            .map(|r| r.accuracy)
    }

    /// Deterministic order: method, head, seed, r_test.
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            (&a.method, &a.head, a.seed)
                .cmp(&(&b.method, &b.head, b.seed))
                .then(a.r_test.total_cmp(&b.r_test))
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{:.6},{}", r.method, r.r_test, r.head, r.seed, r.accuracy, r.n);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Data(format!("metrics CSV must start with {CSV_HEADER:?}")));
        }
        let mut table = Self::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("metrics CSV line {}: {line:?}", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            table.push(MetricsRecord {
                method: f[0].to_string(),
                r_test: f[1].parse().map_err(|_| bad())?,
                head: f[2].to_string(),
                seed: f[3].parse().map_err(|_| bad())?,
                accuracy: f[4].parse().map_err(|_| bad())?,
                n: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Mean accuracy over seeds, keyed by `(method, head)` then `r_test`.
    pub fn mean_over_seeds(&self) -> BTreeMap<(String, String), Vec<(f64, f64)>> {
        let mut acc: BTreeMap<(String, String), Vec<(f64, f64, usize)>> = BTreeMap::new();
        for r in &self.records {
            let rows = acc.entry((r.method.clone(), r.head.clone())).or_default();
            match rows.iter_mut().find(|x| x.0 == r.r_test) {
                Some(x) => {
                    x.1 += r.accuracy;
                    x.2 += 1;
                }
                None => rows.push((r.r_test, r.accuracy, 1)),
            }
        }
        acc.into_iter()
            .map(|(k, mut v)| {
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                (k, v.into_iter().map(|(r, s, c)| (r, s / c as f64)).collect())
            })
            .collect()
    }
}
