//! Masked-autoencoder pretraining of the bottleneck encoder.
//!
//! Each modality is masked independently. Only visible tokens enter the
//! encoder (bottleneck exchange included); a per-modality decoder then sees
//! the encoded visible tokens plus a learnable mask token at every masked
//! position, and regresses raw patch values. The loss covers masked
//! positions only.

use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{AdamWConfig, OptimizerState};
use crate::autodiff::{Segment, Var};
use crate::error::{Error, Result};
use crate::mbt::{encode, BranchTokens, Exchange, FusionMode, MbtParameters, ModelConfig};
use crate::nn::{Block, Graph, Init, Linear, Norm, ParamId};
use crate::pipeline::Prepared;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::tokenizer::{add_positions, Modality, TokenSequence, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeConfig {
    pub mask_ratio_audio: f64,
    pub mask_ratio_video: f64,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            mask_ratio_audio: 0.7,
            mask_ratio_video: 0.9,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_dim: 16,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 1,
        }
    }
}

impl MaeConfig {
    /// 4-layer, 16-head, 512-wide decoders.
    pub fn full_scale() -> Self {
        Self {
            decoder_depth: 4,
            decoder_heads: 16,
            decoder_dim: 512,
            ..Self::default()
        }
    }

    pub fn ratio(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.mask_ratio_audio,
            Modality::Video => self.mask_ratio_video,
        }
    }

    pub fn validate(&self, tok: &TokenizerConfig) -> Result<()> {
        for m in Modality::ALL {
            mask_count(tok.token_count(m)?, self.ratio(m))?;
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder dimension {} is not divisible by {} heads",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if self.batch_size == 0 || self.warmup_epochs > self.epochs {
            return Err(Error::Config("invalid batch size or warmup".into()));
        }
        Ok(())
    }
}

/// `⌊ratio·n⌋`, rejecting ratios that leave nothing visible or nothing masked.
pub fn mask_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "mask ratio {ratio} on {n} tokens leaves {k} masked and {} visible",
            n - k.min(n)
        )));
    }
    Ok(k)
}

/// Masked indices of `n` tokens, ascending.
pub fn draw_mask(n: usize, ratio: f64, rng: &mut SplitMix64) -> Result<Vec<usize>> {
    let k = mask_count(n, ratio)?;
    let mut idx = rng.sample_without_replacement(n, k);
    idx.sort_unstable();
    Ok(idx)
}

/// Splits `seq` into its visible tokens (original positions kept) and the
/// masked index set.
pub fn mask_tokens(seq: &TokenSequence, ratio: f64, rng: &mut SplitMix64) -> Result<(TokenSequence, Vec<usize>)> {
    let n = seq.len();
    let masked = draw_mask(n, ratio, rng)?;
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
    let d = seq.tokens.cols();
    let mut data = Vec::with_capacity(keep.len() * d);
    for &i in &keep {
        data.extend_from_slice(seq.tokens.row(i));
    }
    let visible = TokenSequence {
        tokens: Tensor::new(vec![keep.len(), d], data)?,
        positions: keep.iter().map(|&i| seq.positions[i]).collect(),
        modality: seq.modality,
        present: seq.present,
        substituted: seq.substituted,
    };
    Ok((visible, masked))
}

/// Lightweight per-modality decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeDecoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub pred: Linear,
}

/// Encoder plus decoders; decoder parameters live in the same store under `decoder.`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeModel {
    pub params: MbtParameters,
    pub decoders: [MaeDecoder; 2],
    pub config: MaeConfig,
}

impl MaeModel {
    pub fn new(model: &ModelConfig, tok: &TokenizerConfig, cfg: &MaeConfig, seed: u64) -> Result<Self> {
        if model.fusion_mode != FusionMode::Bottleneck {
            return Err(Error::Config("MAE pretraining uses the bottleneck encoder".into()));
        }
        cfg.validate(tok)?;
        let mut params = MbtParameters::new(model, tok, seed)?;
        let mut rng = SplitMix64::stream(seed, "mae-decoder-init");
        let mut init = Init {
            store: &mut params.store,
            rng: &mut rng,
        };
        let (d, dd) = (model.embed_dim, cfg.decoder_dim);
        let mut decoder = |m: Modality| -> Result<MaeDecoder> {
            let p = format!("decoder.{}", m.name());
            Ok(MaeDecoder {
                embed: init.linear(&format!("{p}.embed"), d, dd),
                mask_token: init.normal(format!("{p}.mask_token"), vec![1, dd], 0.02),
                pos: init.normal(format!("{p}.pos"), vec![tok.token_count(m)?, dd], 0.02),
                blocks: (0..cfg.decoder_depth)
                    .map(|l| init.block(&format!("{p}.blocks.{l}"), dd, model.mlp_ratio))
                    .collect(),
                norm: init.norm(&format!("{p}.norm"), dd),
                pred: init.linear(&format!("{p}.pred"), dd, tok.patch_volume(m)),
            })
        };
        let decoders = [decoder(Modality::Audio)?, decoder(Modality::Video)?];
        Ok(Self {
            params,
            decoders,
            config: cfg.clone(),
        })
    }
}

/// Graph handles of one MAE forward.
pub struct MaeOutputs {
    pub loss: Var,
    /// Per modality, reconstructions `batch * n x patch_volume`.
    pub preds: [Var; 2],
    /// Per modality, masked rows of `preds`.
    pub masked_rows: [Vec<usize>; 2],
}

/// Reconstruction loss for a batch with given per-sample masks
/// (`masks[m][s]`, ascending, equal counts across samples).
pub fn mae_forward(g: &mut Graph, model: &MaeModel, samples: &[&Prepared], masks: &[Vec<Vec<usize>>; 2]) -> Result<MaeOutputs> {
    let params = &model.params;
    let b = samples.len();
    let mut inputs = [None, None];
    let mut visible_idx: [Vec<Vec<usize>>; 2] = [vec![], vec![]];
    for m in Modality::ALL {
        let n = params.tokenizer.token_count(m)?;
        let k = masks[m.index()].first().map(Vec::len).unwrap_or(0);
        if masks[m.index()].len() != b || masks[m.index()].iter().any(|x| x.len() != k) {
            return Err(Error::InvalidInput("every sample needs a mask with the same count".into()));
        }
        let vol = params.tokenizer.patch_volume(m);
        let mut stacked = Vec::with_capacity(b * (n - k) * vol);
        let mut positions = Vec::with_capacity(b * (n - k));
        for (s, mask) in samples.iter().zip(&masks[m.index()]) {
            let mut is_masked = vec![false; n];
            for &i in mask {
                is_masked[i] = true;
            }
            let vis: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
            for &i in &vis {
                stacked.extend_from_slice(s.patches[m.index()].row(i));
            }
            positions.extend(vis.iter().copied());
            visible_idx[m.index()].push(vis);
        }
        let emb = params.branch(m).embed;
        let x = g.constant(Tensor::new(vec![b * (n - k), vol], stacked)?);
        let content = emb.proj.apply(g, x)?;
        let tokens = add_positions(g, &emb, content, &positions)?;
        inputs[m.index()] = Some(BranchTokens { tokens, n: n - k });
    }
    let enc = encode(g, params, inputs, b, Exchange::Fused, None)?;

    let mut loss = None;
    let mut preds = vec![];
    let mut masked_rows: [Vec<usize>; 2] = [vec![], vec![]];
    for m in Modality::ALL {
        let dec = &model.decoders[m.index()];
        let n = params.tokenizer.token_count(m)?;
        let vis_tokens = enc.tokens(g, m)?.expect("both modalities encoded");
        let y = dec.embed.apply(g, vis_tokens)?;
        let vis_rows = g.value(y).rows();
        let mask_tok = g.param(dec.mask_token);
        let joined = g.tape.concat_rows(&[y, mask_tok])?;
        let mut index = vec![vis_rows; b * n];
        let mut r = 0;
        for (s, vis) in visible_idx[m.index()].iter().enumerate() {
            for &i in vis {
                index[s * n + i] = r;
                r += 1;
            }
        }
        let mut h = g.tape.gather_rows(joined, &index)?;
        let pos = g.param(dec.pos);
        let pidx: Vec<usize> = (0..b * n).map(|i| i % n).collect();
        let pos = g.tape.gather_rows(pos, &pidx)?;
        h = g.tape.add(h, pos)?;
        let segs = Segment::uniform(b, n);
        for blk in &dec.blocks {
            h = blk.apply(g, h, model.config.decoder_heads, &segs)?;
        }
        h = dec.norm.apply(g, h)?;
        let pred = dec.pred.apply(g, h)?;
        let mut target = Vec::with_capacity(b * n * params.tokenizer.patch_volume(m));
        for s in samples {
            target.extend_from_slice(s.patches[m.index()].data());
        }
        let target = Tensor::new(g.value(pred).shape().to_vec(), target)?;
        let rows: Vec<usize> = masks[m.index()]
            .iter()
            .enumerate()
            .flat_map(|(s, mask)| mask.iter().map(move |&i| s * n + i))
            .collect();
        let l = g.tape.masked_mse(pred, target, &rows)?;
        loss = Some(match loss {
            None => l,
            Some(acc) => g.tape.add(acc, l)?,
        });
        preds.push(pred);
        masked_rows[m.index()] = rows;
    }
    Ok(MaeOutputs {
        loss: loss.expect("two modalities"),
        preds: [preds[0], preds[1]],
        masked_rows,
    })
}

/// Draws masks for a batch from `rng`, audio then video per sample.
pub fn draw_batch_masks(tok: &TokenizerConfig, cfg: &MaeConfig, batch: usize, rng: &mut SplitMix64) -> Result<[Vec<Vec<usize>>; 2]> {
    let mut masks: [Vec<Vec<usize>>; 2] = [vec![], vec![]];
    for _ in 0..batch {
        for m in Modality::ALL {
            masks[m.index()].push(draw_mask(tok.token_count(m)?, cfg.ratio(m), rng)?);
        }
    }
    Ok(masks)
}

/// One loss evaluation for a batch with freshly drawn masks.
pub fn mae_step(model: &MaeModel, samples: &[&Prepared], rng: &mut SplitMix64) -> Result<f64> {
    let masks = draw_batch_masks(&model.params.tokenizer, &model.config, samples.len(), rng)?;
    let mut g = Graph::new(&model.params.store);
    let out = mae_forward(&mut g, model, samples, &masks)?;
    Ok(g.value(out.loss).data()[0])
}

/// Pretrains on modal-complete samples; returns the mean loss per epoch.
pub fn pretrain(model: &mut MaeModel, samples: &[Prepared], seed: u64) -> Result<Vec<f64>> {
    let cfg = model.config.clone();
    let pool: Vec<&Prepared> = samples.iter().filter(|s| s.present == [true, true]).collect();
    if pool.is_empty() {
        return Err(Error::Data("no modal-complete samples to pretrain on".into()));
    }
    let steps = pool.len().div_ceil(cfg.batch_size);
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_steps: (cfg.warmup_epochs * steps) as u64,
        total_steps: (cfg.epochs * steps).max(1) as u64,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(opt_cfg, model.params.store.values());
    let decay = model.params.store.decay_flags().to_vec();
    let mut history = vec![];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        SplitMix64::stream(seed, "mae-order").child(epoch as u64).shuffle(&mut order);
        let mut mask_rng = SplitMix64::stream(seed, "mae-mask").child(epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| pool[i]).collect();
            let masks = draw_batch_masks(&model.params.tokenizer, &cfg, batch.len(), &mut mask_rng)?;
            let mut g = Graph::new(&model.params.store);
            let out = mae_forward(&mut g, model, &batch, &masks)?;
            total += g.value(out.loss).data()[0] * batch.len() as f64;
            let mut grads = g.tape.backward(out.loss)?;
            let pg = g.param_grads(&mut grads);
            opt.step(model.params.store.values_mut(), &pg, &decay)?;
        }
        let mean = total / pool.len() as f64;
        log::debug!("mae epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    Ok(history)
}

/// True for encoder parameters carried from pretraining into fine-tuning.
pub fn is_transferred(name: &str) -> bool {
    !(name.starts_with("decoder.") || name.starts_with("mmt.") || name.contains(".head."))
}

/// A fine-tuning model whose encoder weights come from `pretrained`; heads and
/// MMTs are freshly initialized from `seed`, decoders are dropped.
pub fn transfer_encoder(pretrained: &MbtParameters, config: &ModelConfig, seed: u64) -> Result<MbtParameters> {
    let mut enc_cfg = pretrained.config.clone();
    enc_cfg.heads_spec = config.heads_spec.clone();
    enc_cfg.attention_dropout = config.attention_dropout;
    if &enc_cfg != config {
        return Err(Error::Checkpoint(
            "pretrained encoder architecture does not match the fine-tuning configuration".into(),
        ));
    }
    let mut fresh = MbtParameters::new(config, &pretrained.tokenizer, seed)?;
    let names: Vec<String> = fresh.store.names().to_vec();
    for name in names.iter().filter(|n| is_transferred(n)) {
        let id = pretrained
            .store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks {name}")))?;
        fresh.store.set(name, pretrained.store.get(id).clone())?;
    }
    Ok(fresh)
}
