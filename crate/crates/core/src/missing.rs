//! Presence handling: the Missing Modality Token, random-replace training,
//! and the zeros and skip substitutions used at inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::SyntheticSample;
use crate::tensor::Tensor;
use crate::tokenizer::{Modality, TokenSequence};

/// Where a modality's tokens come from for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenSource {
    /// Tokenized raw input.
    Raw,
    /// Missing and not yet resolved by a substitution method.
    Missing,
    /// Raw input replaced by zeros, then tokenized.
    Zeros,
    /// The modality's MMT repeated over all positions.
    Mmt,
    /// Not fed to the model at all.
    Absent,
}

impl TokenSource {
    pub fn is_substituted(self) -> bool {
        !matches!(self, TokenSource::Raw)
    }
}

/// Sources of `[audio, video]` for one sample.
pub type Plan = [TokenSource; 2];

/// Raw where present, `Missing` elsewhere.
pub fn presence_plan(present: [bool; 2]) -> Plan {
    present.map(|p| if p { TokenSource::Raw } else { TokenSource::Missing })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubstitutionMethod {
    Mmt,
    Zeros,
    Skip,
}

impl SubstitutionMethod {
    pub const ALL: [SubstitutionMethod; 3] = [SubstitutionMethod::Mmt, SubstitutionMethod::Zeros, SubstitutionMethod::Skip];

    pub fn name(self) -> &'static str {
        match self {
            SubstitutionMethod::Mmt => "mmt",
            SubstitutionMethod::Zeros => "zeros",
            SubstitutionMethod::Skip => "skip",
        }
    }

    fn source(self) -> TokenSource {
        match self {
            SubstitutionMethod::Mmt => TokenSource::Mmt,
            SubstitutionMethod::Zeros => TokenSource::Zeros,
            SubstitutionMethod::Skip => TokenSource::Absent,
        }
    }
}

impl std::fmt::Display for SubstitutionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SubstitutionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmt" => Ok(SubstitutionMethod::Mmt),
            "zeros" => Ok(SubstitutionMethod::Zeros),
            "skip" => Ok(SubstitutionMethod::Skip),
            _ => Err(Error::Config(format!("unknown method {s:?} (expected mmt, zeros or skip)"))),
        }
    }
}

/// Resolves every `Missing` entry of `plan` with `method`; other entries are kept.
pub fn substitute(plan: Plan, method: SubstitutionMethod) -> Plan {
    plan.map(|s| if s == TokenSource::Missing { method.source() } else { s })
}

/// Which modalities own a trainable MMT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Designation {
    Audio,
    Video,
    Both,
}

impl Designation {
    pub fn includes(self, m: Modality) -> bool {
        match self {
            Designation::Both => true,
            Designation::Audio => m == Modality::Audio,
            Designation::Video => m == Modality::Video,
        }
    }
}

impl From<Modality> for Designation {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Audio => Designation::Audio,
            Modality::Video => Designation::Video,
        }
    }
}

/// The set of MMTs in use: one for the designated missing modality, or one per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmtBank {
    pub designation: Designation,
}

impl MmtBank {
    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.designation.includes(m)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    LearnFromIncompleteOnly,
    RandomReplace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMissingPolicy {
    pub mode: MissingMode,
    pub p: f64,
    pub designated: Designation,
    #[serde(default = "default_stream")]
    pub rng_stream: String,
}

fn default_stream() -> String {
    "random-replace".into()
}

impl TrainMissingPolicy {
    pub fn new(p: f64, designated: Designation) -> Self {
        Self {
            mode: if p == 0.0 {
                MissingMode::LearnFromIncompleteOnly
            } else {
                MissingMode::RandomReplace
            },
            p,
            designated,
            rng_stream: default_stream(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("replace probability {} outside [0, 1]", self.p)));
        }
        if (self.mode == MissingMode::LearnFromIncompleteOnly) != (self.p == 0.0) {
            return Err(Error::Config(
                "mode learn_from_incomplete_only requires p = 0 and random_replace requires p > 0".into(),
            ));
        }
        if self.designated == Designation::Both && self.p > 0.5 {
            return Err(Error::Config(format!(
                "with two MMTs the draws are mutually exclusive, so p = {} must not exceed 0.5",
                self.p
            )));
        }
        Ok(())
    }
}

/// Token `i` becomes `mmt + pos_table[i]`.
pub fn replace_with_mmt(seq: &TokenSequence, mmt: &[f64], pos_table: &Tensor) -> Result<TokenSequence> {
    let n = seq.len();
    let d = mmt.len();
    if pos_table.rows() < n || pos_table.cols() != d {
        return Err(Error::Dimension {
            op: "replace_with_mmt",
            lhs: vec![n, d],
            rhs: pos_table.shape().to_vec(),
        });
    }
    let tokens = Tensor::from_fn(vec![n, d], |k| mmt[k % d] + pos_table.row(seq.positions[k / d])[k % d]);
    Ok(TokenSequence {
        tokens,
        positions: seq.positions.clone(),
        modality: seq.modality,
        present: true,
        substituted: true,
    })
}

/// Training-time plan for one sample given one uniform draw in `[0, 1)`.
///
/// Missing modalities always become MMTs. A modal-complete sample has its
/// designated modality replaced when `draw < p`; with two MMTs, audio when
/// `draw < p` and video when `p <= draw < 2p`.
pub fn random_replace(present: [bool; 2], policy: &TrainMissingPolicy, draw: f64) -> Result<Plan> {
    policy.validate()?;
    let plan = presence_plan(present);
    if plan.contains(&TokenSource::Missing) {
        return Ok(substitute(plan, SubstitutionMethod::Mmt));
    }
    let target = match policy.designated {
        Designation::Audio if draw < policy.p => Some(Modality::Audio),
        Designation::Video if draw < policy.p => Some(Modality::Video),
        Designation::Both if draw < policy.p => Some(Modality::Audio),
        Designation::Both if draw < 2.0 * policy.p => Some(Modality::Video),
        _ => None,
    };
    let mut plan = plan;
    if let Some(m) = target {
        plan[m.index()] = TokenSource::Mmt;
    }
    Ok(plan)
}

/// Zeros the raw arrays of the modalities a sample lacks.
pub fn substitute_zeros(sample: &SyntheticSample) -> SyntheticSample {
    let mut s = sample.clone();
    if !s.audio_present {
        s.raw_a.data_mut().fill(0.0);
    }
    if !s.video_present {
        s.raw_v.data_mut().fill(0.0);
    }
    s
}

/// Plan that omits the modalities a sample lacks. Fails when nothing is left.
pub fn substitute_skip(present: [bool; 2]) -> Result<Plan> {
    let plan = substitute(presence_plan(present), SubstitutionMethod::Skip);
    if plan.iter().all(|&s| s == TokenSource::Absent) {
        return Err(Error::InvalidInput("skip: both modalities are missing".into()));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_is_idempotent() {
        for present in [[true, true], [true, false], [false, true], [false, false]] {
            for m in SubstitutionMethod::ALL {
                let once = substitute(presence_plan(present), m);
                assert_eq!(substitute(once, m), once);
            }
        }
    }

    #[test]
    fn policy_mode_matches_probability() {
        assert!(TrainMissingPolicy::new(0.0, Designation::Video).validate().is_ok());
        let mut p = TrainMissingPolicy::new(0.25, Designation::Video);
        p.mode = MissingMode::LearnFromIncompleteOnly;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = TrainMissingPolicy::new(0.25, Designation::Video);
        p.p = 1.5;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn dual_draws_are_exclusive() {
        let p = TrainMissingPolicy::new(0.25, Designation::Both);
        let plan = |u| random_replace([true, true], &p, u).unwrap();
        assert_eq!(plan(0.1), [TokenSource::Mmt, TokenSource::Raw]);
        assert_eq!(plan(0.3), [TokenSource::Raw, TokenSource::Mmt]);
        assert_eq!(plan(0.6), [TokenSource::Raw, TokenSource::Raw]);
    }

    #[test]
    fn skip_with_nothing_left_is_an_error() {
        assert!(matches!(substitute_skip([false, false]), Err(Error::InvalidInput(_))));
        assert_eq!(substitute_skip([true, true]).unwrap(), [TokenSource::Raw; 2]);
    }
}
