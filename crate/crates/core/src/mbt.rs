//! Multimodal bottleneck transformer.
//!
//! Each modality has its own encoder stack. Layers `0..fusion_layer` run the
//! modalities independently with a CLS token prepended. From `fusion_layer`
//! on, each modality's layer sees its own tokens concatenated with `B` shared
//! bottleneck tokens `z`; the layer outputs `[x_m', ẑ_m]`, and the next `z` is
//! the mean of `ẑ_m` over the modalities taking part. Cross-modal information
//! therefore flows only through `z`.
//!
//! Readout: each modality's CLS goes through its final norm and its own linear
//! head per task head; logits are averaged over the participating modalities.
//!
//! In [`FusionMode::FullSelfAttention`] the two token sequences are instead
//! concatenated at `fusion_layer` and processed by one shared stack.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Var};
use crate::error::{Error, Result};
use crate::nn::{attention_flops, Block, Graph, Init, Linear, Norm, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::tokenizer::{Modality, ModalityEmbedding, TokenSequence, TokenizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Bottleneck,
    FullSelfAttention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

impl HeadSpec {
    pub fn new(name: &str, classes: usize) -> Self {
        Self {
            name: name.to_string(),
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// First layer with cross-modal exchange; `depth` disables fusion.
    pub fusion_layer: usize,
    pub bottleneck_count: usize,
    pub fusion_mode: FusionMode,
    pub heads_spec: Vec<HeadSpec>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Dropout on attention-block outputs during training.
    #[serde(default)]
    pub attention_dropout: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 2,
            embed_dim: 32,
            fusion_layer: 2,
            bottleneck_count: 4,
            fusion_mode: FusionMode::Bottleneck,
            heads_spec: vec![HeadSpec::new("A", 4), HeadSpec::new("B", 3)],
            mlp_ratio: 4,
            attention_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// ViT-Base encoders with 4 bottlenecks fused from layer 8.
    pub fn full_scale(heads_spec: Vec<HeadSpec>) -> Self {
        Self {
            depth: 12,
            heads: 12,
            embed_dim: 768,
            fusion_layer: 8,
            bottleneck_count: 4,
            fusion_mode: FusionMode::Bottleneck,
            heads_spec,
            mlp_ratio: 4,
            attention_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        if self.fusion_layer > self.depth {
            return Err(Error::Config(format!(
                "fusion_layer {} exceeds depth {}",
                self.fusion_layer, self.depth
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.fusion_mode == FusionMode::Bottleneck && self.bottleneck_count == 0 {
            return Err(Error::Config("bottleneck mode needs at least one bottleneck token".into()));
        }
        if self.heads_spec.is_empty() || self.heads_spec.iter().any(|h| h.classes < 2) {
            return Err(Error::Config("every head needs at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config("attention_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Layers each modality runs on its own.
    pub fn branch_depth(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Bottleneck => self.depth,
            FusionMode::FullSelfAttention => self.fusion_layer,
        }
    }
}

/// Encoder, CLS, final norm and heads of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub embed: ModalityEmbedding,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub heads: Vec<Linear>,
}

/// All learnable state of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct MbtParameters {
    pub config: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub store: ParamStore,
    pub branches: [BranchParams; 2],
    /// `(B, d)`; absent in full-self-attention mode.
    pub bottleneck: Option<ParamId>,
    /// Shared stack for layers `fusion_layer..depth` in full-self-attention mode.
    pub fused_blocks: Vec<Block>,
    /// Missing-modality tokens, one per modality.
    pub mmt: [ParamId; 2],
}

impl MbtParameters {
    pub fn new(config: &ModelConfig, tokenizer: &TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        tokenizer.validate()?;
        if config.embed_dim != tokenizer.embed_dim {
            return Err(Error::Config(format!(
                "model embed_dim {} differs from tokenizer embed_dim {}",
                config.embed_dim, tokenizer.embed_dim
            )));
        }
        let d = config.embed_dim;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::stream(seed, "init");
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let branch = |init: &mut Init, m: Modality| -> Result<BranchParams> {
            let p = m.name();
            let embed = ModalityEmbedding::init(init, &format!("{p}.embed"), tokenizer.patch_volume(m), tokenizer.token_count(m)?, d);
            let cls = init.normal(format!("{p}.cls"), vec![1, d], 0.02);
            let blocks = (0..config.branch_depth())
                .map(|l| init.block(&format!("{p}.blocks.{l}"), d, config.mlp_ratio))
                .collect();
            let norm = init.norm(&format!("{p}.norm"), d);
            let heads = config
                .heads_spec
                .iter()
                .map(|h| init.linear(&format!("{p}.head.{}", h.name), d, h.classes))
                .collect();
            Ok(BranchParams {
                embed,
                cls,
                blocks,
                norm,
                heads,
            })
        };
        let audio = branch(&mut init, Modality::Audio)?;
        let video = branch(&mut init, Modality::Video)?;
        let (bottleneck, fused_blocks) = match config.fusion_mode {
            FusionMode::Bottleneck => (
                Some(init.normal("bottleneck".into(), vec![config.bottleneck_count, d], 0.02)),
                vec![],
            ),
            FusionMode::FullSelfAttention => (
                None,
                (config.fusion_layer..config.depth)
                    .map(|l| init.block(&format!("fused.blocks.{l}"), d, config.mlp_ratio))
                    .collect(),
            ),
        };
        let mmt = [
            init.normal("mmt.audio".into(), vec![1, d], 0.02),
            init.normal("mmt.video".into(), vec![1, d], 0.02),
        ];
        Ok(Self {
            config: config.clone(),
            tokenizer: tokenizer.clone(),
            store,
            branches: [audio, video],
            bottleneck,
            fused_blocks,
            mmt,
        })
    }

    pub fn branch(&self, m: Modality) -> &BranchParams {
        &self.branches[m.index()]
    }

    /// Closed-form parameter count for a configuration.
    pub fn expected_numel(config: &ModelConfig, tokenizer: &TokenizerConfig) -> Result<usize> {
        let d = config.embed_dim;
        let block = Block::numel(d, config.mlp_ratio);
        let heads: usize = config.heads_spec.iter().map(|h| Linear::numel(d, h.classes)).sum();
        let mut total = 0;
        for m in Modality::ALL {
            total += Linear::numel(tokenizer.patch_volume(m), d) + tokenizer.token_count(m)? * d;
            total += d + config.branch_depth() * block + 2 * d + heads;
        }
        total += match config.fusion_mode {
            FusionMode::Bottleneck => config.bottleneck_count * d,
            FusionMode::FullSelfAttention => (config.depth - config.fusion_layer) * block,
        };
        Ok(total + 2 * d)
    }
}

/// Attention workload of one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// Per layer, the sequence length of every attention call made for one sample.
    pub layers: Vec<Vec<usize>>,
}

impl ForwardTrace {
    pub fn attention_flops(&self, dim: usize) -> u64 {
        self.layers.iter().map(|l| attention_flops(l, dim)).sum()
    }
}

/// Embedded tokens of one modality for a batch: `batch * n` rows, positional
/// embeddings already added.
#[derive(Clone, Copy, Debug)]
pub struct BranchTokens {
    pub tokens: Var,
    pub n: usize,
}

/// Whether the encoder may use cross-modal layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exchange {
    /// Fusion from `fusion_layer` on, among the branches present.
    Fused,
    /// Branch stacks only; bottleneck and fused layers are never touched.
    Unimodal,
}

pub struct Encoded {
    /// Final token rows per branch, `batch * (n + 1)` with CLS first per sample.
    pub x: [Option<Var>; 2],
    pub n: [usize; 2],
    pub batch: usize,
    pub trace: ForwardTrace,
}

impl Encoded {
    pub fn cls(&self, g: &mut Graph, m: Modality) -> Result<Option<Var>> {
        let Some(x) = self.x[m.index()] else { return Ok(None) };
        let stride = self.n[m.index()] + 1;
        let idx: Vec<usize> = (0..self.batch).map(|s| s * stride).collect();
        g.tape.gather_rows(x, &idx).map(Some)
    }

    /// Token rows without CLS, `batch * n`.
    pub fn tokens(&self, g: &mut Graph, m: Modality) -> Result<Option<Var>> {
        let Some(x) = self.x[m.index()] else { return Ok(None) };
        let n = self.n[m.index()];
        let idx: Vec<usize> = (0..self.batch)
            .flat_map(|s| (0..n).map(move |i| s * (n + 1) + 1 + i))
            .collect();
        g.tape.gather_rows(x, &idx).map(Some)
    }
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut SplitMix64>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(shape, |_| if rng.uniform() < p { 0.0 } else { keep });
    let m = g.constant(mask);
    g.tape.mul(x, m)
}

/// Per-sample row indices interleaving two stacked batches: sample `s`
/// contributes `a_len` rows of `a` then `b_len` rows of `b`, where `b` rows
/// start after all of `a` in the concatenation.
fn interleave(batch: usize, a_len: usize, b_len: usize) -> Vec<usize> {
    let b_off = batch * a_len;
    let mut idx = Vec::with_capacity(batch * (a_len + b_len));
    for s in 0..batch {
        idx.extend(s * a_len..(s + 1) * a_len);
        idx.extend(b_off + s * b_len..b_off + (s + 1) * b_len);
    }
    idx
}

/// Inverse of [`interleave`]: row indices of the `a` part and the `b` part.
fn deinterleave(batch: usize, a_len: usize, b_len: usize) -> (Vec<usize>, Vec<usize>) {
    let stride = a_len + b_len;
    let a = (0..batch).flat_map(|s| (0..a_len).map(move |i| s * stride + i)).collect();
    let b = (0..batch)
        .flat_map(|s| (0..b_len).map(move |i| s * stride + a_len + i))
        .collect();
    (a, b)
}

struct BlockRunner<'r> {
    heads: usize,
    dropout: f64,
    rng: Option<&'r mut SplitMix64>,
}

impl BlockRunner<'_> {
    fn run(&mut self, g: &mut Graph, block: &Block, x: Var, segments: &[Segment]) -> Result<Var> {
        let h = block.norm1.apply(g, x)?;
        let h = block.attn.apply(g, h, self.heads, segments)?;
        let h = dropout(g, h, self.dropout, self.rng.as_deref_mut())?;
        let x = g.tape.add(x, h)?;
        let h = block.norm2.apply(g, x)?;
        let h = block.fc1.apply(g, h)?;
        let h = g.tape.gelu(h)?;
        let h = block.fc2.apply(g, h)?;
        g.tape.add(x, h)
    }
}

/// Runs the encoder over a batch. `inputs[m]` is `None` when modality `m`
/// does not take part (skip baseline, unimodal models).
pub fn encode(
    g: &mut Graph,
    params: &MbtParameters,
    inputs: [Option<BranchTokens>; 2],
    batch: usize,
    exchange: Exchange,
    dropout_rng: Option<&mut SplitMix64>,
) -> Result<Encoded> {
    let cfg = &params.config;
    if inputs.iter().all(Option::is_none) {
        return Err(Error::InvalidInput("no modality present: nothing to encode".into()));
    }
    let mut runner = BlockRunner {
        heads: cfg.heads,
        dropout: cfg.attention_dropout,
        rng: dropout_rng,
    };
    let mut trace = ForwardTrace::default();
    let mut x: [Option<Var>; 2] = [None, None];
    let mut n = [0usize; 2];
    for m in Modality::ALL {
        let Some(bt) = inputs[m.index()] else { continue };
        let rows = g.value(bt.tokens).rows();
        if rows != batch * bt.n {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![batch, bt.n],
                rhs: vec![rows],
            });
        }
        let cls = g.param(params.branch(m).cls);
        let content = g.tape.concat_rows(&[cls, bt.tokens])?;
        let idx: Vec<usize> = (0..batch)
            .flat_map(|s| std::iter::once(0).chain((0..bt.n).map(move |i| 1 + s * bt.n + i)))
            .collect();
        x[m.index()] = Some(g.tape.gather_rows(content, &idx)?);
        n[m.index()] = bt.n;
    }
    let present: Vec<Modality> = Modality::ALL.into_iter().filter(|m| x[m.index()].is_some()).collect();

    let fusion_start = match exchange {
        Exchange::Fused => cfg.fusion_layer,
        Exchange::Unimodal => cfg.depth,
    };
    let own_layers = match (exchange, cfg.fusion_mode) {
        (Exchange::Unimodal, FusionMode::FullSelfAttention) => cfg.fusion_layer,
        _ => fusion_start,
    };
    for l in 0..own_layers {
        let mut lens = vec![];
        for &m in &present {
            let i = m.index();
            let seg = Segment::uniform(batch, n[i] + 1);
            let block = params.branch(m).blocks[l];
            x[i] = Some(runner.run(g, &block, x[i].expect("present"), &seg)?);
            lens.push(n[i] + 1);
        }
        trace.layers.push(lens);
    }
    if exchange == Exchange::Unimodal {
        return Ok(Encoded { x, n, batch, trace });
    }

    match cfg.fusion_mode {
        FusionMode::Bottleneck => {
            let b = cfg.bottleneck_count;
            let bp = params
                .bottleneck
                .ok_or_else(|| Error::Config("bottleneck parameters missing".into()))?;
            let zp = g.param(bp);
            let zidx: Vec<usize> = (0..batch).flat_map(|_| 0..b).collect();
            let mut z = g.tape.gather_rows(zp, &zidx)?;
            for l in fusion_start..cfg.depth {
                let mut lens = vec![];
                let mut zhat = vec![];
                for &m in &present {
                    let i = m.index();
                    let len = n[i] + 1;
                    let joined = g.tape.concat_rows(&[x[i].expect("present"), z])?;
                    let inp = g.tape.gather_rows(joined, &interleave(batch, len, b))?;
                    let block = params.branch(m).blocks[l];
                    let out = runner.run(g, &block, inp, &Segment::uniform(batch, len + b))?;
                    let (xi, zi) = deinterleave(batch, len, b);
                    x[i] = Some(g.tape.gather_rows(out, &xi)?);
                    zhat.push(g.tape.gather_rows(out, &zi)?);
                    lens.push(len + b);
                }
                z = zhat[0];
                for &zh in &zhat[1..] {
                    z = g.tape.add(z, zh)?;
                }
                if zhat.len() > 1 {
                    z = g.tape.scale(z, 1.0 / zhat.len() as f64)?;
                }
                trace.layers.push(lens);
            }
        }
        FusionMode::FullSelfAttention => {
            if fusion_start < cfg.depth {
                let lens: Vec<usize> = present.iter().map(|m| n[m.index()] + 1).collect();
                let total: usize = lens.iter().sum();
                let parts: Vec<Var> = present.iter().map(|m| x[m.index()].expect("present")).collect();
                let joined = g.tape.concat_rows(&parts)?;
                // sample s: rows of each present modality in order
                let mut offsets = vec![0; present.len()];
                for k in 1..present.len() {
                    offsets[k] = offsets[k - 1] + batch * lens[k - 1];
                }
                let idx: Vec<usize> = (0..batch)
                    .flat_map(|s| {
                        let (offsets, lens) = (&offsets, &lens);
                        (0..lens.len()).flat_map(move |k| (0..lens[k]).map(move |r| offsets[k] + s * lens[k] + r))
                    })
                    .collect();
                let mut h = g.tape.gather_rows(joined, &idx)?;
                for l in fusion_start..cfg.depth {
                    let block = params.fused_blocks[l - cfg.fusion_layer];
                    h = runner.run(g, &block, h, &Segment::uniform(batch, total))?;
                    trace.layers.push(vec![total]);
                }
                let mut start = 0;
                for (k, m) in present.iter().enumerate() {
                    let idx: Vec<usize> = (0..batch)
                        .flat_map(|s| (0..lens[k]).map(move |r| s * total + start + r))
                        .collect();
                    x[m.index()] = Some(g.tape.gather_rows(h, &idx)?);
                    start += lens[k];
                }
            }
        }
    }
    Ok(Encoded { x, n, batch, trace })
}

/// Per-head logits (`batch x classes`) averaged over the branches in `encoded`.
pub fn readout(g: &mut Graph, params: &MbtParameters, encoded: &Encoded) -> Result<Vec<Var>> {
    let mut per_branch = vec![];
    for m in Modality::ALL {
        let Some(cls) = encoded.cls(g, m)? else { continue };
        let br = params.branch(m);
        let h = br.norm.apply(g, cls)?;
        let logits: Vec<Var> = br.heads.iter().map(|head| head.apply(g, h)).collect::<Result<_>>()?;
        per_branch.push(logits);
    }
    let count = per_branch.len();
    let mut out = per_branch[0].clone();
    for other in &per_branch[1..] {
        for (o, &l) in out.iter_mut().zip(other) {
            *o = g.tape.add(*o, l)?;
        }
    }
    if count > 1 {
        for o in out.iter_mut() {
            *o = g.tape.scale(*o, 1.0 / count as f64)?;
        }
    }
    Ok(out)
}

fn check_sequence(params: &MbtParameters, seq: &TokenSequence) -> Result<()> {
    let expect = params.tokenizer.token_count(seq.modality)?;
    if seq.len() != expect || seq.tokens.rows() != seq.len() || seq.tokens.cols() != params.config.embed_dim {
        return Err(Error::Dimension {
            op: "forward",
            lhs: vec![expect, params.config.embed_dim],
            rhs: seq.tokens.shape().to_vec(),
        });
    }
    Ok(())
}

fn logits_of(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| g.value(v).data().to_vec()).collect()
}

fn forward_sequences(
    params: &MbtParameters,
    seqs: [Option<&TokenSequence>; 2],
    exchange: Exchange,
) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
    let mut g = Graph::new(&params.store);
    let mut inputs = [None, None];
    for m in Modality::ALL {
        if let Some(seq) = seqs[m.index()] {
            if seq.modality != m {
                return Err(Error::InvalidInput(format!("expected {m} tokens, got {}", seq.modality)));
            }
            let t = g.constant(seq.tokens.clone());
            inputs[m.index()] = Some(BranchTokens { tokens: t, n: seq.len() });
        }
    }
    let enc = encode(&mut g, params, inputs, 1, exchange, None)?;
    let logits = readout(&mut g, params, &enc)?;
    Ok((logits_of(&g, &logits), enc.trace))
}

/// Logits per head for one sample given both embedded sequences.
pub fn forward(tokens_a: &TokenSequence, tokens_v: &TokenSequence, params: &MbtParameters) -> Result<Vec<Vec<f64>>> {
    forward_with_trace(tokens_a, tokens_v, params).map(|(l, _)| l)
}

pub fn forward_with_trace(
    tokens_a: &TokenSequence,
    tokens_v: &TokenSequence,
    params: &MbtParameters,
) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
    check_sequence(params, tokens_a)?;
    check_sequence(params, tokens_v)?;
    forward_sequences(params, [Some(tokens_a), Some(tokens_v)], Exchange::Fused)
}

/// Same readout as [`forward`], with full self-attention over the joint sequence.
/// Token counts are taken from the sequences, so either may be empty.
pub fn forward_full_sa(
    tokens_a: &TokenSequence,
    tokens_v: &TokenSequence,
    params: &MbtParameters,
) -> Result<(Vec<Vec<f64>>, ForwardTrace)> {
    if params.config.fusion_mode != FusionMode::FullSelfAttention {
        return Err(Error::Config("forward_full_sa needs fusion_mode = full_self_attention".into()));
    }
    forward_sequences(params, [Some(tokens_a), Some(tokens_v)], Exchange::Fused)
}

/// One modality's stack end to end, its CLS and its heads; no bottleneck.
pub fn unimodal_forward(tokens: &TokenSequence, params: &MbtParameters) -> Result<Vec<Vec<f64>>> {
    check_sequence(params, tokens)?;
    let mut seqs = [None, None];
    seqs[tokens.modality.index()] = Some(tokens);
    forward_sequences(params, seqs, Exchange::Unimodal).map(|(l, _)| l)
}

/// Forward with only `tokens` present but cross-modal layers active:
/// the bottleneck is updated from this modality alone.
pub fn single_branch_fused_forward(tokens: &TokenSequence, params: &MbtParameters) -> Result<Vec<Vec<f64>>> {
    check_sequence(params, tokens)?;
    let mut seqs = [None, None];
    seqs[tokens.modality.index()] = Some(tokens);
    forward_sequences(params, seqs, Exchange::Fused).map(|(l, _)| l)
}
