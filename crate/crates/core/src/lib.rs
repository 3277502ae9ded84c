//! Missing-modality-robust multimodal bottleneck transformers at desk scale.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod mae;
pub mod manifest;
pub mod mbt;
pub mod missing;
pub mod nn;
pub mod pipeline;
pub mod protocol;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tokenization.md")]
    struct Tokenization;
    #[doc = include_str!("../../../book/src/bottleneck-fusion.md")]
    struct BottleneckFusion;
    #[doc = include_str!("../../../book/src/missing-modality-tokens.md")]
    struct MissingModalityTokens;
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    struct SyntheticData;
    #[doc = include_str!("../../../book/src/test-protocol.md")]
    struct TestProtocol;
    #[doc = include_str!("../../../book/src/pretraining.md")]
    struct Pretraining;
}
