//! Batched forward passes over prepared samples with per-sample token sources.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mbt::{encode, readout, BranchTokens, Exchange, MbtParameters};
use crate::missing::{Plan, TokenSource};
use crate::nn::Graph;
use crate::rng::SplitMix64;
use crate::synthdata::SyntheticSample;
use crate::tensor::Tensor;
use crate::tokenizer::{add_positions, patchify, Modality, TokenizerConfig};

/// A sample with both modalities already patch-flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `(n_tokens, patch_volume)` per modality.
    pub patches: [Tensor; 2],
    pub labels: Vec<usize>,
    /// Natural presence.
    pub present: [bool; 2],
}

pub fn prepare(samples: &[SyntheticSample], tok: &TokenizerConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                patches: [patchify(Modality::Audio, &s.raw_a, tok)?, patchify(Modality::Video, &s.raw_v, tok)?],
                labels: s.labels.clone(),
                present: [s.audio_present, s.video_present],
            })
        })
        .collect()
}

/// Which encoder path a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "modality")]
pub enum ModelKind {
    Multimodal,
    /// One modality's stack alone; the other branch is never used.
    Unimodal(Modality),
}

impl ModelKind {
    pub fn exchange(self) -> Exchange {
        match self {
            ModelKind::Multimodal => Exchange::Fused,
            ModelKind::Unimodal(_) => Exchange::Unimodal,
        }
    }

    /// Forces the unused modality of a unimodal model to `Absent`.
    pub fn restrict(self, plan: Plan) -> Plan {
        match self {
            ModelKind::Multimodal => plan,
            ModelKind::Unimodal(m) => {
                let mut p = [TokenSource::Absent; 2];
                p[m.index()] = plan[m.index()];
                p
            }
        }
    }
}

/// Embedded tokens of modality `m` for every sample, `batch * n` rows.
/// No sample may have `m` absent or unresolved.
pub fn embed_modality(
    g: &mut Graph,
    params: &MbtParameters,
    m: Modality,
    samples: &[&Prepared],
    sources: &[TokenSource],
) -> Result<BranchTokens> {
    let n = params.tokenizer.token_count(m)?;
    let vol = params.tokenizer.patch_volume(m);
    let emb = params.branch(m).embed;
    let mut stacked = Vec::new();
    let mut proj_rows = 0;
    let mut index = Vec::with_capacity(samples.len() * n);
    let mut any_mmt = false;
    for (s, &src) in samples.iter().zip(sources) {
        match src {
            TokenSource::Raw => {
                let p = &s.patches[m.index()];
                if p.shape() != [n, vol] {
                    return Err(Error::Dimension {
                        op: "embed_modality",
                        lhs: vec![n, vol],
                        rhs: p.shape().to_vec(),
                    });
                }
                stacked.extend_from_slice(p.data());
                index.extend(proj_rows..proj_rows + n);
                proj_rows += n;
            }
            TokenSource::Zeros => {
                stacked.resize(stacked.len() + n * vol, 0.0);
                index.extend(proj_rows..proj_rows + n);
                proj_rows += n;
            }
            TokenSource::Mmt => {
                any_mmt = true;
                index.extend(std::iter::repeat(usize::MAX).take(n));
            }
            TokenSource::Missing | TokenSource::Absent => {
                return Err(Error::InvalidInput(format!("{m} tokens requested for a sample without them ({src:?})")));
            }
        }
    }
    let mut parts = vec![];
    if proj_rows > 0 {
        let x = g.constant(Tensor::new(vec![proj_rows, vol], stacked)?);
        parts.push(emb.proj.apply(g, x)?);
    }
    if any_mmt {
        parts.push(g.param(params.mmt[m.index()]));
        for i in index.iter_mut().filter(|i| **i == usize::MAX) {
            *i = proj_rows;
        }
    }
    let content = if parts.len() == 1 && proj_rows == index.len() {
        parts[0]
    } else {
        let joined = g.tape.concat_rows(&parts)?;
        g.tape.gather_rows(joined, &index)?
    };
    let positions: Vec<usize> = (0..samples.len() * n).map(|r| r % n).collect();
    let tokens = add_positions(g, &emb, content, &positions)?;
    Ok(BranchTokens { tokens, n })
}

/// Per-head logits (`batch x classes`) for samples sharing one pattern of absent modalities.
pub fn batch_logits(
    g: &mut Graph,
    params: &MbtParameters,
    samples: &[&Prepared],
    plans: &[Plan],
    kind: ModelKind,
    dropout_rng: Option<&mut SplitMix64>,
) -> Result<Vec<crate::autodiff::Var>> {
    if samples.is_empty() || samples.len() != plans.len() {
        return Err(Error::InvalidInput(format!(
            "batch of {} samples with {} plans",
            samples.len(),
            plans.len()
        )));
    }
    let plans: Vec<Plan> = plans.iter().map(|&p| kind.restrict(p)).collect();
    let absent = |p: &Plan| p.map(|s| s == TokenSource::Absent);
    let pattern = absent(&plans[0]);
    if plans.iter().any(|p| absent(p) != pattern) {
        return Err(Error::InvalidInput("samples in one batch must share which modalities are absent".into()));
    }
    let mut inputs = [None, None];
    for m in Modality::ALL {
        if pattern[m.index()] {
            continue;
        }
        let sources: Vec<TokenSource> = plans.iter().map(|p| p[m.index()]).collect();
        inputs[m.index()] = Some(embed_modality(g, params, m, samples, &sources)?);
    }
    let enc = encode(g, params, inputs, samples.len(), kind.exchange(), dropout_rng)?;
    readout(g, params, &enc)
}

/// Logits for one sample under `plan`.
pub fn sample_logits(params: &MbtParameters, sample: &Prepared, plan: Plan, kind: ModelKind) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(&params.store);
    let vars = batch_logits(&mut g, params, &[sample], &[plan], kind, None)?;
    Ok(vars.iter().map(|&v| g.value(v).data().to_vec()).collect())
}

/// Splits sample indices into groups that share their absent modalities,
/// keeping the input order inside each group.
pub fn group_by_absence(plans: &[Plan]) -> Vec<Vec<usize>> {
    let mut groups: Vec<([bool; 2], Vec<usize>)> = vec![];
    for (i, p) in plans.iter().enumerate() {
        let key = p.map(|s| s == TokenSource::Absent);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.into_iter().map(|(_, v)| v).collect()
}

/// Arg-max per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
