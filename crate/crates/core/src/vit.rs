//! Vision Transformer forward pass with attention capture.
//!
//! Pre-LN blocks (LN → attention → residual, LN → MLP → residual), cls
//! token at index 0, learned positional embeddings. Every post-softmax
//! attention map is watched on the tape so a later backward pass can
//! materialize its gradient. Any layer's attention can be overridden
//! with free tensors, which detaches it from Q·K — the attention
//! transfer experiment and the attention-entry finite-difference oracle
//! both run through that path.

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::tape::{Tape, TensorId};
use crate::tensor::{quantize_f32, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers < 1 {
            return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens (excludes cls).
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length T = 1 + (image_size/patch_size)^2.
    pub fn tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ModelWeights {
    /// Zero-initialized container with config-consistent shapes.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let t = config.tokens();
        let h = config.hidden_dim();
        let block = || BlockWeights {
            ln1_gamma: Tensor::new(vec![d], vec![1.0; d]),
            ln1_beta: Tensor::zeros(vec![d]),
            wq: Tensor::zeros(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: Tensor::zeros(vec![d, d]),
            bk: Tensor::zeros(vec![d]),
            wv: Tensor::zeros(vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: Tensor::zeros(vec![d, d]),
            bo: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::new(vec![d], vec![1.0; d]),
            ln2_beta: Tensor::zeros(vec![d]),
            w1: Tensor::zeros(vec![d, h]),
            b1: Tensor::zeros(vec![h]),
            w2: Tensor::zeros(vec![h, d]),
            b2: Tensor::zeros(vec![d]),
        };
        Ok(ModelWeights {
            patch_weight: Tensor::zeros(vec![config.patch_dim(), d]),
            patch_bias: Tensor::zeros(vec![d]),
            cls_token: Tensor::zeros(vec![1, d]),
            pos_embed: Tensor::zeros(vec![t, d]),
            blocks: (0..config.num_layers).map(|_| block()).collect(),
            lnf_gamma: Tensor::new(vec![d], vec![1.0; d]),
            lnf_beta: Tensor::zeros(vec![d]),
            head_weight: Tensor::zeros(vec![d, config.num_classes]),
            head_bias: Tensor::zeros(vec![config.num_classes]),
            config,
        })
    }

    /// Seed-deterministic random weights (f32-quantized for container
    /// round-trips). Used by the gradient-oracle tests.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut w = ModelWeights::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = w.config.embed_dim as f64;
        let scale = 1.0 / d.sqrt();
        let mut fill = |t: &mut Tensor, s: f64| {
            for v in t.data.iter_mut() {
                *v = quantize_f32(rng.gen_range(-s..s));
            }
        };
        fill(&mut w.patch_weight, scale);
        fill(&mut w.patch_bias, 0.01);
        fill(&mut w.cls_token, scale);
        fill(&mut w.pos_embed, scale);
        for b in &mut w.blocks {
            fill(&mut b.wq, scale);
            fill(&mut b.wk, scale);
            fill(&mut b.wv, scale);
            fill(&mut b.wo, scale);
            fill(&mut b.bq, 0.01);
            fill(&mut b.bk, 0.01);
            fill(&mut b.bv, 0.01);
            fill(&mut b.bo, 0.01);
            fill(&mut b.w1, scale);
            fill(&mut b.b1, 0.01);
            fill(&mut b.w2, scale);
            fill(&mut b.b2, 0.01);
        }
        fill(&mut w.head_weight, scale);
        fill(&mut w.head_bias, 0.01);
        Ok(w)
    }

    /// All named tensors, for the weight container.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let pairs: [(&str, &Tensor); 16] = [
                ("ln1.gamma", &b.ln1_gamma),
                ("ln1.beta", &b.ln1_beta),
                ("attn.wq.weight", &b.wq),
                ("attn.wq.bias", &b.bq),
                ("attn.wk.weight", &b.wk),
                ("attn.wk.bias", &b.bk),
                ("attn.wv.weight", &b.wv),
                ("attn.wv.bias", &b.bv),
                ("attn.wo.weight", &b.wo),
                ("attn.wo.bias", &b.bo),
                ("ln2.gamma", &b.ln2_gamma),
                ("ln2.beta", &b.ln2_beta),
                ("mlp.w1.weight", &b.w1),
                ("mlp.w1.bias", &b.b1),
                ("mlp.w2.weight", &b.w2),
                ("mlp.w2.bias", &b.b2),
            ];
            for (name, t) in pairs {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("ln_final.gamma".to_string(), &self.lnf_gamma));
        out.push(("ln_final.beta".to_string(), &self.lnf_beta));
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }
}

/// Per-layer, per-head post-softmax attention maps, each T×T.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map(|l| l.len()).unwrap_or(0)
    }
}

/// Free attention tensors substituted for selected layers' softmax
/// outputs. Keys are layer indices; values are per-head T×T maps.
pub type AttentionOverride = HashMap<usize, Vec<Tensor>>;

pub struct ForwardTrace {
    pub tape: Tape,
    pub logits_id: TensorId,
    pub attn_ids: Vec<Vec<TensorId>>,
    pub image_id: TensorId,
    pub token_count: usize,
}

impl ForwardTrace {
    pub fn logits(&self) -> Vec<f64> {
        self.tape.value(self.logits_id).data.clone()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.logits())
    }

    pub fn attention(&self) -> AttentionStack {
        AttentionStack {
            layers: self
                .attn_ids
                .iter()
                .map(|layer| layer.iter().map(|&id| self.tape.value(id).clone()).collect())
                .collect(),
        }
    }
}

/// Lowest index wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Non-overlapping patch extraction, row-major grid order, HWC order
/// within each patch. Off-tape variant for callers that only need the
/// token matrix.
pub fn patchify(image: &ImageTensor, cfg: &ModelConfig) -> Result<Tensor> {
    check_image_dims(image, cfg)?;
    let mut tape = Tape::new();
    let id = tape.input(image.to_tensor());
    let tok = tape.patchify(
        id,
        cfg.image_size,
        cfg.image_size,
        cfg.channels,
        cfg.patch_size,
    )?;
    Ok(tape.value(tok).clone())
}

fn check_image_dims(image: &ImageTensor, cfg: &ModelConfig) -> Result<()> {
    if image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.channels
    {
        return Err(Error::ImageDimMismatch {
            got_h: image.height,
            got_w: image.width,
            got_c: image.channels,
            want_h: cfg.image_size,
            want_w: cfg.image_size,
            want_c: cfg.channels,
        });
    }
    Ok(())
}

pub fn forward(w: &ModelWeights, image: &ImageTensor) -> Result<ForwardTrace> {
    forward_with_override(w, image, &AttentionOverride::new())
}

pub fn forward_with_override(
    w: &ModelWeights,
    image: &ImageTensor,
    overrides: &AttentionOverride,
) -> Result<ForwardTrace> {
    let cfg = &w.config;
    check_image_dims(image, cfg)?;
    let t_count = cfg.tokens();
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut tape = Tape::new();
    let image_id = tape.input(image.to_tensor());
    tape.watch(image_id);

    let patches = tape.patchify(
        image_id,
        cfg.image_size,
        cfg.image_size,
        cfg.channels,
        cfg.patch_size,
    )?;
    let pw = tape.input(w.patch_weight.clone());
    let pb = tape.input(w.patch_bias.clone());
    let tok = tape.matmul(patches, pw)?;
    let tok = tape.add_row_broadcast(tok, pb)?;
    let cls = tape.input(w.cls_token.clone());
    let x = tape.concat_rows(cls, tok)?;
    let pos = tape.input(w.pos_embed.clone());
    let mut x = tape.add(x, pos)?;

    let mut attn_ids: Vec<Vec<TensorId>> = Vec::with_capacity(cfg.num_layers);
    for (l, blk) in w.blocks.iter().enumerate() {
        let g1 = tape.input(blk.ln1_gamma.clone());
        let b1 = tape.input(blk.ln1_beta.clone());
        let h_in = tape.layernorm(x, g1, b1, LN_EPS)?;

        let override_layer = overrides.get(&l);
        let (q, k) = if override_layer.is_some() {
            (None, None)
        } else {
            let wq = tape.input(blk.wq.clone());
            let bq = tape.input(blk.bq.clone());
            let q = tape.matmul(h_in, wq)?;
            let q = tape.add_row_broadcast(q, bq)?;
            let wk = tape.input(blk.wk.clone());
            let bk = tape.input(blk.bk.clone());
            let k = tape.matmul(h_in, wk)?;
            let k = tape.add_row_broadcast(k, bk)?;
            (Some(q), Some(k))
        };
        let wv = tape.input(blk.wv.clone());
        let bv = tape.input(blk.bv.clone());
        let v = tape.matmul(h_in, wv)?;
        let v = tape.add_row_broadcast(v, bv)?;

        let mut layer_ids = Vec::with_capacity(cfg.num_heads);
        let mut heads_out: Option<TensorId> = None;
        for h in 0..cfg.num_heads {
            let a_id = match override_layer {
                Some(maps) => {
                    let map = &maps[h];
                    if map.shape != vec![t_count, t_count] {
                        return Err(Error::ShapeMismatch {
                            op: "attention_override",
                            lhs: map.shape.clone(),
                            rhs: vec![t_count, t_count],
                        });
                    }
                    tape.input(map.clone())
                }
                None => {
                    let qh = tape.slice_cols(q.unwrap(), h * dh, dh);
                    let kh = tape.slice_cols(k.unwrap(), h * dh, dh);
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt)?;
                    let scores = tape.scale(scores, scale);
                    tape.softmax_lastdim(scores)
                }
            };
            tape.watch(a_id);
            layer_ids.push(a_id);

            let vh = tape.slice_cols(v, h * dh, dh);
            let oh = tape.matmul(a_id, vh)?;
            heads_out = Some(match heads_out {
                Some(prev) => tape.concat_cols(prev, oh)?,
                None => oh,
            });
        }
        attn_ids.push(layer_ids);

        let wo = tape.input(blk.wo.clone());
        let bo = tape.input(blk.bo.clone());
        let attn_out = tape.matmul(heads_out.unwrap(), wo)?;
        let attn_out = tape.add_row_broadcast(attn_out, bo)?;
        x = tape.add(x, attn_out)?;

        let g2 = tape.input(blk.ln2_gamma.clone());
        let b2 = tape.input(blk.ln2_beta.clone());
        let h2 = tape.layernorm(x, g2, b2, LN_EPS)?;
        let w1 = tape.input(blk.w1.clone());
        let b1m = tape.input(blk.b1.clone());
        let m = tape.matmul(h2, w1)?;
        let m = tape.add_row_broadcast(m, b1m)?;
        let m = tape.gelu(m);
        let w2 = tape.input(blk.w2.clone());
        let b2m = tape.input(blk.b2.clone());
        let m = tape.matmul(m, w2)?;
        let m = tape.add_row_broadcast(m, b2m)?;
        x = tape.add(x, m)?;
    }

    let gf = tape.input(w.lnf_gamma.clone());
    let bf = tape.input(w.lnf_beta.clone());
    let xf = tape.layernorm(x, gf, bf, LN_EPS)?;
    let cls_out = tape.slice_rows(xf, 0, 1);
    let hw = tape.input(w.head_weight.clone());
    let hb = tape.input(w.head_bias.clone());
    let logits = tape.matmul(cls_out, hw)?;
    let logits_id = tape.add_row_broadcast(logits, hb)?;

    Ok(ForwardTrace {
        tape,
        logits_id,
        attn_ids,
        image_id,
        token_count: t_count,
    })
}
