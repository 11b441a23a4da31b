//! Declarative scalar losses over logits and gradients of a loss with
//! respect to the post-softmax attention maps and the input pixels.

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::tape::TensorId;
use crate::tensor::Tensor;
use crate::vit::{forward_with_override, AttentionOverride, ForwardTrace, ModelWeights};
use serde::{Deserialize, Serialize};

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    /// loss = logit_target
    SingleLogit { target: usize },
    /// loss = logit_c1 - logit_c2
    Diff { c1: usize, c2: usize },
    /// loss = logit_c1 / logit_c2
    Ratio { c1: usize, c2: usize },
    /// loss = (logit_c1 - logit_c2) / logit_c1
    NormalizedDiff { c1: usize, c2: usize },
}

impl LossSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let check = |i: usize| {
            if i >= num_classes {
                Err(Error::ClassOutOfRange {
                    index: i,
                    num_classes,
                })
            } else {
                Ok(())
            }
        };
        match *self {
            LossSpec::SingleLogit { target } => check(target),
            LossSpec::Diff { c1, c2 }
            | LossSpec::Ratio { c1, c2 }
            | LossSpec::NormalizedDiff { c1, c2 } => {
                check(c1)?;
                check(c2)?;
                if c1 == c2 {
                    return Err(Error::ClassesMustDiffer(c1));
                }
                Ok(())
            }
        }
    }

    /// Compact label for reports and file names.
    pub fn label(&self) -> String {
        match *self {
            LossSpec::SingleLogit { target } => format!("single:{target}"),
            LossSpec::Diff { c1, c2 } => format!("diff:{c1},{c2}"),
            LossSpec::Ratio { c1, c2 } => format!("ratio:{c1},{c2}"),
            LossSpec::NormalizedDiff { c1, c2 } => format!("ndiff:{c1},{c2}"),
        }
    }
}

/// Evaluate a loss over plain logit values. Degenerate denominators
/// (|logit_c1| or |logit_c2| below 1e-8 where they divide) error out
/// rather than clamp.
pub fn eval_loss(logits: &[f64], spec: &LossSpec) -> Result<f64> {
    spec.validate(logits.len())?;
    match *spec {
        LossSpec::SingleLogit { target } => Ok(logits[target]),
        LossSpec::Diff { c1, c2 } => Ok(logits[c1] - logits[c2]),
        LossSpec::Ratio { c1, c2 } => {
            check_denominator(logits, c2)?;
            Ok(logits[c1] / logits[c2])
        }
        LossSpec::NormalizedDiff { c1, c2 } => {
            check_denominator(logits, c1)?;
            Ok((logits[c1] - logits[c2]) / logits[c1])
        }
    }
}

fn check_denominator(logits: &[f64], class_index: usize) -> Result<()> {
    if logits[class_index].abs() < DENOM_FLOOR {
        return Err(Error::DegenerateDenominator {
            class_index,
            value: logits[class_index],
        });
    }
    Ok(())
}

/// Build the loss as a tape node over the trace's logits.
pub fn loss_node(trace: &mut ForwardTrace, spec: &LossSpec) -> Result<TensorId> {
    let logits = trace.logits();
    spec.validate(logits.len())?;
    let tape = &mut trace.tape;
    let id = trace.logits_id;
    match *spec {
        LossSpec::SingleLogit { target } => Ok(tape.pick_scalar(id, target)),
        LossSpec::Diff { c1, c2 } => {
            let a = tape.pick_scalar(id, c1);
            let b = tape.pick_scalar(id, c2);
            tape.sub(a, b)
        }
        LossSpec::Ratio { c1, c2 } => {
            check_denominator(&logits, c2)?;
            let a = tape.pick_scalar(id, c1);
            let b = tape.pick_scalar(id, c2);
            tape.div_scalar(a, b)
        }
        LossSpec::NormalizedDiff { c1, c2 } => {
            check_denominator(&logits, c1)?;
            let a = tape.pick_scalar(id, c1);
            let b = tape.pick_scalar(id, c2);
            let num = tape.sub(a, b)?;
            tape.div_scalar(num, a)
        }
    }
}

/// ∂loss/∂A^(l) for every layer and head, same layout as the
/// AttentionStack captured in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStack {
    pub layers: Vec<Vec<Tensor>>,
}

impl GradStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Forward pass plus gradients of the loss w.r.t. every post-softmax
/// attention map.
pub fn attention_gradients(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
) -> Result<(ForwardTrace, GradStack)> {
    attention_gradients_with_override(w, image, spec, &AttentionOverride::new())
}

pub fn attention_gradients_with_override(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
    overrides: &AttentionOverride,
) -> Result<(ForwardTrace, GradStack)> {
    let mut trace = forward_with_override(w, image, overrides)?;
    let loss = loss_node(&mut trace, spec)?;
    let grads = trace.tape.backward(loss)?;
    let stack = GradStack {
        layers: trace
            .attn_ids
            .iter()
            .map(|layer| layer.iter().map(|&id| grads.wrt(id)).collect())
            .collect(),
    };
    Ok((trace, stack))
}

/// ∂loss/∂pixel for every pixel of the model-space image.
pub fn pixel_gradients(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
) -> Result<Tensor> {
    let mut trace = forward_with_override(w, image, &AttentionOverride::new())?;
    let loss = loss_node(&mut trace, spec)?;
    let grads = trace.tape.backward(loss)?;
    Ok(grads.wrt(trace.image_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_logit() {
        assert_eq!(
            eval_loss(&[2.0, 5.0], &LossSpec::SingleLogit { target: 1 }).unwrap(),
            5.0
        );
    }

    #[test]
    fn diff() {
        assert_eq!(
            eval_loss(&[4.0, 1.0], &LossSpec::Diff { c1: 0, c2: 1 }).unwrap(),
            3.0
        );
    }

    #[test]
    fn normalized_diff() {
        assert_eq!(
            eval_loss(&[4.0, 1.0], &LossSpec::NormalizedDiff { c1: 0, c2: 1 }).unwrap(),
            0.75
        );
    }

    #[test]
    fn degenerate_denominator_is_error_not_clamp() {
        let err = eval_loss(&[1e-12, 1.0], &LossSpec::NormalizedDiff { c1: 0, c2: 1 }).unwrap_err();
        assert!(matches!(err, Error::DegenerateDenominator { .. }));
        let err = eval_loss(&[1.0, 0.0], &LossSpec::Ratio { c1: 0, c2: 1 }).unwrap_err();
        assert!(matches!(err, Error::DegenerateDenominator { .. }));
    }

    #[test]
    fn equal_classes_rejected() {
        let err = LossSpec::Diff { c1: 3, c2: 3 }.validate(10).unwrap_err();
        assert!(matches!(err, Error::ClassesMustDiffer(3)));
    }

    #[test]
    fn class_out_of_range() {
        let err = LossSpec::SingleLogit { target: 7 }.validate(5).unwrap_err();
        assert!(matches!(err, Error::ClassOutOfRange { .. }));
    }
}
