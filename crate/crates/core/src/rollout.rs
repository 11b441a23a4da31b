//! The interpretation core: gradient correction of attention maps,
//! rollout product, cls-row extraction, and signed normalization.
//!
//! Correction schemes, per layer l with post-softmax maps A and
//! gradients G, head mean E_H:
//!   positive:  I + E_H(max(G, 0) ⊙ A)
//!   complete:  I + E_H(G ⊙ A)
//!   absolute:  I + E_H(|G| ⊙ A)
//! The rollout is the left-multiplied chain with the last layer
//! leftmost. No row re-normalization after adding I, and no clamping
//! between layers: signed values propagate through the product.

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::loss::{attention_gradients_with_override, GradStack, LossSpec};
use crate::tensor::{identity, matmul2, Tensor};
use crate::vit::{AttentionOverride, ModelWeights};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionScheme {
    Positive,
    Complete,
    Absolute,
}

impl CorrectionScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(CorrectionScheme::Positive),
            "complete" => Ok(CorrectionScheme::Complete),
            "absolute" => Ok(CorrectionScheme::Absolute),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheme `{other}` (expected positive|complete|absolute)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CorrectionScheme::Positive => "positive",
            CorrectionScheme::Complete => "complete",
            CorrectionScheme::Absolute => "absolute",
        }
    }
}

/// Head-averaged, identity-added corrected maps, one T×T per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedStack {
    pub maps: Vec<Tensor>,
}

/// Signed per-token saliency extracted from the cls rollout row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SaliencyMap {
    pub grid: (usize, usize),
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
    pub degenerate: bool,
    pub scheme: Option<String>,
    pub loss: Option<String>,
}

impl SaliencyMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Mean of normalized scores over a set of patch indices.
    pub fn region_mean(&self, patches: &[usize]) -> f64 {
        if patches.is_empty() {
            return 0.0;
        }
        patches.iter().map(|&p| self.normalized[p]).sum::<f64>() / patches.len() as f64
    }

    pub fn region_mean_raw(&self, patches: &[usize]) -> f64 {
        if patches.is_empty() {
            return 0.0;
        }
        patches.iter().map(|&p| self.scores[p]).sum::<f64>() / patches.len() as f64
    }
}

/// One layer's correction: heads are averaged unweighted, then the
/// identity is added.
pub fn correct_layer(
    attn: &[Tensor],
    grad: &[Tensor],
    scheme: CorrectionScheme,
) -> Result<Tensor> {
    if attn.is_empty() || attn.len() != grad.len() {
        return Err(Error::InvalidArgument(format!(
            "correct_layer: {} attention maps vs {} gradient maps",
            attn.len(),
            grad.len()
        )));
    }
    let t = attn[0].shape[0];
    for (a, g) in attn.iter().zip(grad) {
        a.check_same_shape(g, "correct_layer")?;
        if a.shape != vec![t, t] {
            return Err(Error::ShapeMismatch {
                op: "correct_layer",
                lhs: a.shape.clone(),
                rhs: vec![t, t],
            });
        }
    }
    let h = attn.len() as f64;
    let mut out = identity(t);
    for (a, g) in attn.iter().zip(grad) {
        for i in 0..t * t {
            let gv = match scheme {
                CorrectionScheme::Positive => g.data[i].max(0.0),
                CorrectionScheme::Complete => g.data[i],
                CorrectionScheme::Absolute => g.data[i].abs(),
            };
            out.data[i] += gv * a.data[i] / h;
        }
    }
    Ok(out)
}

pub fn correct_stack(
    attn: &crate::vit::AttentionStack,
    grad: &GradStack,
    scheme: CorrectionScheme,
) -> Result<CorrectedStack> {
    let maps = attn
        .layers
        .iter()
        .zip(&grad.layers)
        .map(|(a, g)| correct_layer(a, g, scheme))
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrectedStack { maps })
}

/// Left-multiplied chain: layer L leftmost, layer 1 rightmost.
pub fn rollout(corrected: &CorrectedStack) -> Result<Tensor> {
    let mut iter = corrected.maps.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("rollout needs at least one layer".into()))?;
    let mut acc = first.clone();
    for layer in iter {
        acc = matmul2(layer, &acc)?;
    }
    Ok(acc)
}

/// Row 0, columns 1..T: the cls token's rollout over patch tokens.
pub fn cls_saliency(r: &Tensor, grid: (usize, usize)) -> SaliencyMap {
    let t = r.shape[0];
    let scores: Vec<f64> = (1..t).map(|j| r.at2(0, j)).collect();
    SaliencyMap {
        grid,
        scores,
        normalized: Vec::new(),
        degenerate: false,
        scheme: None,
        loss: None,
    }
}

/// Divide by max |score|, preserving sign. All-zero input stays zero
/// and is flagged degenerate.
pub fn normalize_signed(mut s: SaliencyMap) -> SaliencyMap {
    let max_abs = s.scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 0.0 {
        s.normalized = s.scores.iter().map(|v| v / max_abs).collect();
        s.degenerate = false;
    } else {
        s.normalized = vec![0.0; s.scores.len()];
        s.degenerate = true;
    }
    s
}

/// End-to-end interpretation: forward, attention gradients, per-layer
/// correction, rollout, cls extraction, signed normalization.
pub fn interpret(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
    scheme: CorrectionScheme,
) -> Result<SaliencyMap> {
    interpret_with_override(w, image, spec, scheme, &AttentionOverride::new())
}

/// Same pipeline with selected layers' attention replaced by free
/// tensors (used by the attention-transfer experiment).
pub fn interpret_with_override(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
    scheme: CorrectionScheme,
    overrides: &AttentionOverride,
) -> Result<SaliencyMap> {
    let (trace, grads) = attention_gradients_with_override(w, image, spec, overrides)?;
    let attn = trace.attention();
    let corrected = correct_stack(&attn, &grads, scheme)?;
    let r = rollout(&corrected)?;
    let g = w.config.grid();
    let mut s = normalize_signed(cls_saliency(&r, (g, g)));
    s.scheme = Some(scheme.label().to_string());
    s.loss = Some(spec.label());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(t: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        Tensor::new(
            vec![t, t],
            (0..t * t).map(|_| rng.gen_range(lo..hi)).collect(),
        )
    }

    #[test]
    fn zero_gradient_gives_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = vec![rand_map(3, &mut rng, 0.0, 1.0)];
        let g = vec![Tensor::zeros(vec![3, 3])];
        for scheme in [
            CorrectionScheme::Positive,
            CorrectionScheme::Complete,
            CorrectionScheme::Absolute,
        ] {
            let c = correct_layer(&a, &g, scheme).unwrap();
            assert_eq!(c, identity(3));
        }
    }

    #[test]
    fn hand_evaluated_schemes() {
        let a = vec![Tensor::new(vec![2, 2], vec![0.7, 0.3, 0.4, 0.6])];
        let g = vec![Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0])];
        let complete = correct_layer(&a, &g, CorrectionScheme::Complete).unwrap();
        assert_eq!(complete.data, vec![1.0 + 0.7, -0.3, -0.4, 1.0 + 0.6]);
        let positive = correct_layer(&a, &g, CorrectionScheme::Positive).unwrap();
        assert_eq!(positive.data, vec![1.0 + 0.7, 0.0, 0.0, 1.0 + 0.6]);
        let absolute = correct_layer(&a, &g, CorrectionScheme::Absolute).unwrap();
        assert_eq!(absolute.data, vec![1.0 + 0.7, 0.3, 0.4, 1.0 + 0.6]);
    }

    #[test]
    fn scheme_identities_on_random_pairs() {
        // With A >= 0 and a single (A, grad) pair per layer:
        // pos = I + max(0, comp - I), abs = I + |comp - I|.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = rng.gen_range(2..6);
            let a = vec![rand_map(t, &mut rng, 0.0, 1.0)];
            let g = vec![rand_map(t, &mut rng, -1.0, 1.0)];
            let comp = correct_layer(&a, &g, CorrectionScheme::Complete).unwrap();
            let pos = correct_layer(&a, &g, CorrectionScheme::Positive).unwrap();
            let abs = correct_layer(&a, &g, CorrectionScheme::Absolute).unwrap();
            let eye = identity(t);
            for i in 0..t * t {
                let delta = comp.data[i] - eye.data[i];
                assert!((pos.data[i] - (eye.data[i] + delta.max(0.0))).abs() <= 1e-12);
                assert!((abs.data[i] - (eye.data[i] + delta.abs())).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_scheme_ordering() {
        // Head averaging breaks the exact identities, but the
        // elementwise ordering abs >= pos >= comp and pos >= I survive.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let h = rng.gen_range(2..5);
            let t = rng.gen_range(2..6);
            let a: Vec<Tensor> = (0..h).map(|_| rand_map(t, &mut rng, 0.0, 1.0)).collect();
            let g: Vec<Tensor> = (0..h).map(|_| rand_map(t, &mut rng, -1.0, 1.0)).collect();
            let comp = correct_layer(&a, &g, CorrectionScheme::Complete).unwrap();
            let pos = correct_layer(&a, &g, CorrectionScheme::Positive).unwrap();
            let abs = correct_layer(&a, &g, CorrectionScheme::Absolute).unwrap();
            let eye = identity(t);
            for i in 0..t * t {
                assert!(abs.data[i] + 1e-12 >= pos.data[i]);
                assert!(pos.data[i] + 1e-12 >= comp.data[i]);
                assert!(pos.data[i] + 1e-12 >= eye.data[i]);
            }
        }
    }

    #[test]
    fn positive_and_absolute_have_no_negative_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Tensor> = (0..2).map(|_| rand_map(4, &mut rng, 0.0, 1.0)).collect();
        let g: Vec<Tensor> = (0..2).map(|_| rand_map(4, &mut rng, -2.0, 2.0)).collect();
        for scheme in [CorrectionScheme::Positive, CorrectionScheme::Absolute] {
            let c = correct_layer(&a, &g, scheme).unwrap();
            assert!(c.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rollout_single_layer_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = rand_map(3, &mut rng, -1.0, 1.0);
        let r = rollout(&CorrectedStack {
            maps: vec![m.clone()],
        })
        .unwrap();
        assert_eq!(r, m);
    }

    #[test]
    fn rollout_of_identities_is_identity() {
        let stack = CorrectedStack {
            maps: vec![identity(4); 3],
        };
        assert_eq!(rollout(&stack).unwrap(), identity(4));
    }

    #[test]
    fn rollout_matches_fold_left_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps: Vec<Tensor> = (0..3).map(|_| rand_map(4, &mut rng, -1.0, 1.0)).collect();
        let r = rollout(&CorrectedStack { maps: maps.clone() }).unwrap();
        // independent oracle: naive sequential product, last layer leftmost
        let t = 4;
        let mut oracle = maps[0].clone();
        for m in &maps[1..] {
            let mut next = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                for j in 0..t {
                    let mut s = 0.0;
                    for k in 0..t {
                        s += m.at2(i, k) * oracle.at2(k, j);
                    }
                    next.set2(i, j, s);
                }
            }
            oracle = next;
        }
        for (x, y) in r.data.iter().zip(&oracle.data) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn cls_saliency_identity_is_zero() {
        let s = cls_saliency(&identity(4), (1, 3));
        assert_eq!(s.scores, vec![0.0; 3]);
    }

    #[test]
    fn cls_saliency_slices_row_zero() {
        let mut r = identity(4);
        r.data[0..4].copy_from_slice(&[5.0, 1.0, -2.0, 3.0]);
        let s = cls_saliency(&r, (1, 3));
        assert_eq!(s.scores, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn normalize_direct_formula() {
        let s = SaliencyMap {
            grid: (1, 3),
            scores: vec![2.0, -4.0, 1.0],
            normalized: vec![],
            degenerate: false,
            scheme: None,
            loss: None,
        };
        let n = normalize_signed(s);
        assert_eq!(n.normalized, vec![0.5, -1.0, 0.25]);
        assert!(!n.degenerate);
    }

    #[test]
    fn normalize_all_zero_flags_degenerate() {
        let s = SaliencyMap {
            grid: (1, 3),
            scores: vec![0.0; 3],
            normalized: vec![],
            degenerate: false,
            scheme: None,
            loss: None,
        };
        let n = normalize_signed(s);
        assert_eq!(n.normalized, vec![0.0; 3]);
        assert!(n.degenerate);
    }
}
