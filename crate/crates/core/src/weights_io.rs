//! Weight container: one file holding a JSON header and a raw f32 payload.
//!
//! Layout (documented byte-exact in FORMATS.md):
//!   bytes 0..8    header length N, little-endian u64
//!   bytes 8..8+N  UTF-8 JSON header
//!   bytes 8+N..   payload: little-endian IEEE-754 f32 values
//!
//! The header holds the model config and a map from tensor name to
//! {dtype, shape, offset}, offsets in bytes from the payload start.
//! Unknown tensors are ignored with a warning; missing or misshapen
//! tensors are distinct errors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ModelConfig, ModelWeights};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in w.named_tensors() {
        tensors.insert(
            name,
            TensorEntry {
                dtype: "f32".to_string(),
                shape: t.shape.clone(),
                offset: payload.len(),
            },
        );
        for &v in &t.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: w.config.clone(),
        tensors,
    })
    .expect("header serialization");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_weights_bytes(&bytes)
}

pub fn load_weights_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader("file shorter than 8 bytes".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::MalformedHeader(format!(
            "declared header length {hlen} exceeds file size"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[8 + hlen..];

    let mut w = ModelWeights::zeros(header.config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = w
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape.clone()))
        .collect();

    for name in header.tensors.keys() {
        if !expected.iter().any(|(n, _)| n == name) {
            log::warn!("ignoring unknown tensor `{name}` in weight file");
        }
    }

    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, want_shape) in &expected {
        let entry = header
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if entry.dtype != "f32" {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` has unsupported dtype `{}`",
                entry.dtype
            )));
        }
        if &entry.shape != want_shape {
            return Err(Error::WeightShapeMismatch {
                name: name.clone(),
                got: entry.shape.clone(),
                want: want_shape.clone(),
            });
        }
        let n: usize = entry.shape.iter().product();
        let need = n * 4;
        if entry.offset + need > payload.len() {
            return Err(Error::TruncatedPayload {
                name: name.clone(),
                offset: entry.offset,
                need,
                have: payload.len(),
            });
        }
        let data: Vec<f64> = payload[entry.offset..entry.offset + need]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        loaded.insert(name.clone(), Tensor::new(entry.shape.clone(), data));
    }

    let mut take = |name: &str| loaded.remove(name).unwrap();
    w.patch_weight = take("patch_embed.weight");
    w.patch_bias = take("patch_embed.bias");
    w.cls_token = take("cls_token");
    w.pos_embed = take("pos_embed");
    for i in 0..w.config.num_layers {
        let b = &mut w.blocks[i];
        b.ln1_gamma = take(&format!("block{i}.ln1.gamma"));
        b.ln1_beta = take(&format!("block{i}.ln1.beta"));
        b.wq = take(&format!("block{i}.attn.wq.weight"));
        b.bq = take(&format!("block{i}.attn.wq.bias"));
        b.wk = take(&format!("block{i}.attn.wk.weight"));
        b.bk = take(&format!("block{i}.attn.wk.bias"));
        b.wv = take(&format!("block{i}.attn.wv.weight"));
        b.bv = take(&format!("block{i}.attn.wv.bias"));
        b.wo = take(&format!("block{i}.attn.wo.weight"));
        b.bo = take(&format!("block{i}.attn.wo.bias"));
        b.ln2_gamma = take(&format!("block{i}.ln2.gamma"));
        b.ln2_beta = take(&format!("block{i}.ln2.beta"));
        b.w1 = take(&format!("block{i}.mlp.w1.weight"));
        b.b1 = take(&format!("block{i}.mlp.w1.bias"));
        b.w2 = take(&format!("block{i}.mlp.w2.weight"));
        b.b2 = take(&format!("block{i}.mlp.w2.bias"));
    }
    w.lnf_gamma = take("ln_final.gamma");
    w.lnf_beta = take("ln_final.beta");
    w.head_weight = take("head.weight");
    w.head_bias = take("head.bias");
    Ok(w)
}
