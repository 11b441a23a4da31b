//! Experiment drivers: attention-transfer optimization, pixel-level
//! class rewriting, and positive/negative perturbation AUC evaluation.

use crate::error::{Error, Result};
use crate::guidance::{composite_guide, CompositeLayout};
use crate::image_io::{decode_image, preprocess, ImageTensor};
use crate::loss::{attention_gradients_with_override, eval_loss, pixel_gradients, LossSpec};
use crate::rollout::{
    cls_saliency, correct_stack, normalize_signed, rollout, CorrectionScheme, SaliencyMap,
};
use crate::vit::{argmax, forward, softmax_probs, AttentionOverride, AttentionStack, ModelWeights};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

// ---------------------------------------------------------------------
// attention transfer
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TransferStep {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub saliency: SaliencyMap,
    #[serde(skip)]
    pub attention: Option<AttentionStack>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferRun {
    pub learning_rate: f64,
    pub steps: usize,
    /// steps + 1 records, the first being the unmodified initial state.
    pub records: Vec<TransferStep>,
}

/// Treat the post-softmax attention maps of every layer as the only
/// free parameters, initialized from the initial forward pass, and run
/// plain gradient descent on the loss. Rows are not re-normalized
/// between steps. Each step's model is interpreted with the given
/// scheme.
pub fn attention_transfer(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
    learning_rate: f64,
    steps: usize,
    scheme: CorrectionScheme,
    snapshot_every: Option<usize>,
) -> Result<TransferRun> {
    if learning_rate < 0.0 {
        return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
    }
    let initial = forward(w, image)?;
    let mut current = initial.attention().layers;

    let mut records = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut overrides = AttentionOverride::new();
        for (l, maps) in current.iter().enumerate() {
            overrides.insert(l, maps.clone());
        }
        let (trace, grads) = attention_gradients_with_override(w, image, spec, &overrides)?;
        let logits = trace.logits();
        let loss = eval_loss(&logits, spec)?;
        let attn = trace.attention();
        let corrected = correct_stack(&attn, &grads, scheme)?;
        let g = w.config.grid();
        let mut saliency = normalize_signed(cls_saliency(&rollout(&corrected)?, (g, g)));
        saliency.scheme = Some(scheme.label().to_string());
        saliency.loss = Some(spec.label());

        let snapshot = match snapshot_every {
            Some(n) if n > 0 && step % n == 0 => Some(attn),
            _ => None,
        };
        records.push(TransferStep {
            loss,
            logits,
            saliency,
            attention: snapshot,
        });

        if step < steps {
            for (layer, glayer) in current.iter_mut().zip(&grads.layers) {
                for (a, ga) in layer.iter_mut().zip(glayer) {
                    for (v, gv) in a.data.iter_mut().zip(&ga.data) {
                        *v -= learning_rate * gv;
                    }
                }
            }
        }
    }
    Ok(TransferRun {
        learning_rate,
        steps,
        records,
    })
}

// ---------------------------------------------------------------------
// pixel rewriting
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    ArgmaxFlip,
    Steps,
}

#[derive(Debug, Clone, Serialize)]
pub struct RewriteParams {
    pub step_size: f64,
    pub max_steps: usize,
    /// Optional L-infinity budget around the starting image, model-space units.
    pub epsilon: Option<f64>,
    /// Pixel value clamp, model-space units.
    pub clamp: (f64, f64),
    pub stop_when: StopRule,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub class: usize,
    pub probability: f64,
    pub logit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RewriteStep {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub argmax: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RewriteRun {
    pub params: RewriteParams,
    pub original: ClassReport,
    pub updated: ClassReport,
    pub steps: Vec<RewriteStep>,
    pub linf: f64,
    pub l2: f64,
    pub flipped: bool,
    #[serde(skip)]
    pub final_image: ImageTensor,
}

fn class_report(logits: &[f64]) -> ClassReport {
    let c = argmax(logits);
    ClassReport {
        class: c,
        probability: softmax_probs(logits)[c],
        logit: logits[c],
    }
}

/// Descend the image pixels along the loss gradient, clamped to the
/// pixel range and projected into the epsilon ball when one is set.
/// Non-convergence is a reported outcome, not an error.
pub fn rewrite_image(
    w: &ModelWeights,
    image: &ImageTensor,
    spec: &LossSpec,
    params: &RewriteParams,
) -> Result<RewriteRun> {
    if params.step_size < 0.0 {
        return Err(Error::InvalidArgument("step size must be >= 0".into()));
    }
    let original_logits = forward(w, image)?.logits();
    let original = class_report(&original_logits);
    let mut x = image.clone();
    let mut steps = Vec::new();
    let mut flipped = false;

    if params.step_size > 0.0 {
        for _ in 0..params.max_steps {
            let grad = pixel_gradients(w, &x, spec)?;
            for (v, (g, x0)) in x
                .data
                .iter_mut()
                .zip(grad.data.iter().zip(&image.data))
            {
                let mut nv = *v - params.step_size * g;
                nv = nv.clamp(params.clamp.0, params.clamp.1);
                if let Some(eps) = params.epsilon {
                    nv = nv.clamp(x0 - eps, x0 + eps);
                }
                *v = nv;
            }
            let logits = forward(w, &x)?.logits();
            let am = argmax(&logits);
            steps.push(RewriteStep {
                loss: eval_loss(&logits, spec)?,
                logits: logits.clone(),
                argmax: am,
            });
            if am != original.class {
                flipped = true;
                if params.stop_when == StopRule::ArgmaxFlip {
                    break;
                }
            }
        }
    }

    let updated_logits = if steps.is_empty() {
        original_logits
    } else {
        forward(w, &x)?.logits()
    };
    let linf = x
        .data
        .iter()
        .zip(&image.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let l2 = x
        .data
        .iter()
        .zip(&image.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(RewriteRun {
        params: params.clone(),
        original,
        updated: class_report(&updated_logits),
        steps,
        linf,
        l2,
        flipped,
        final_image: x,
    })
}

// ---------------------------------------------------------------------
// perturbation curves
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Mask from highest score to lowest.
    Positive,
    /// Mask from lowest score to highest.
    Negative,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbCurve {
    pub fractions: Vec<f64>,
    /// Target-class softmax probability at each masked fraction.
    pub values: Vec<f64>,
    pub direction: Direction,
    /// Token masking order (patch indices, first masked first).
    pub order: Vec<usize>,
}

/// Mask the first `round(j*N/K)` tokens of `order` at schedule point j
/// and record the target-class probability. Masking replaces the
/// patch's pixels with the preprocessing mean (model-space zero).
pub fn masking_curve(
    w: &ModelWeights,
    image: &ImageTensor,
    order: &[usize],
    k: usize,
    target: usize,
    direction: Direction,
) -> Result<PerturbCurve> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let cfg = &w.config;
    let n = cfg.num_patches();
    if order.len() != n {
        return Err(Error::SaliencyLengthMismatch {
            got: order.len(),
            want: n,
        });
    }
    if target >= cfg.num_classes {
        return Err(Error::ClassOutOfRange {
            index: target,
            num_classes: cfg.num_classes,
        });
    }
    let g = cfg.grid();
    let ps = cfg.patch_size;
    let mut fractions = Vec::with_capacity(k + 1);
    let mut values = Vec::with_capacity(k + 1);
    let mut masked = image.clone();
    let mut masked_count = 0usize;
    for j in 0..=k {
        let m = ((j * n) as f64 / k as f64).round() as usize;
        while masked_count < m {
            let patch = order[masked_count];
            let (pr, pc) = (patch / g, patch % g);
            for y in pr * ps..(pr + 1) * ps {
                for x in pc * ps..(pc + 1) * ps {
                    for c in 0..cfg.channels {
                        masked.set(y, x, c, 0.0);
                    }
                }
            }
            masked_count += 1;
        }
        let logits = forward(w, &masked)?.logits();
        fractions.push(j as f64 / k as f64);
        values.push(softmax_probs(&logits)[target]);
    }
    Ok(PerturbCurve {
        fractions,
        values,
        direction,
        order: order.to_vec(),
    })
}

/// Saliency-ordered masking schedule: descending scores for the
/// positive direction, ascending for negative. Ties break toward the
/// lowest patch index.
pub fn perturbation_curve(
    w: &ModelWeights,
    image: &ImageTensor,
    s: &SaliencyMap,
    direction: Direction,
    k: usize,
    target: usize,
) -> Result<PerturbCurve> {
    let n = w.config.num_patches();
    if s.len() != n {
        return Err(Error::SaliencyLengthMismatch {
            got: s.len(),
            want: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    match direction {
        Direction::Positive => {
            order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).unwrap().then(a.cmp(&b)))
        }
        Direction::Negative => {
            order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).unwrap().then(a.cmp(&b)))
        }
    }
    masking_curve(w, image, &order, k, target, direction)
}

/// Trapezoidal integral of the curve over masked fraction in [0,1].
pub fn auc(curve: &PerturbCurve) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.fractions.len() {
        let dx = curve.fractions[i] - curve.fractions[i - 1];
        area += 0.5 * (curve.values[i] + curve.values[i - 1]) * dx;
    }
    area
}

// ---------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scheme: CorrectionScheme,
    pub loss: Option<LossSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub path: String,
    pub label: usize,
    pub scheme: String,
    pub loss: String,
    pub pos_auc: f64,
    pub neg_auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub scheme: String,
    pub loss: String,
    pub mean_pos_auc: f64,
    pub mean_neg_auc: f64,
    pub images: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<BenchSummary>,
    pub skipped: Vec<(String, String)>,
    pub k: usize,
}

/// Positive/negative perturbation AUC over a directory-per-class
/// dataset. Sub-directory names are class indices. When a guide is
/// set, every image is composited with it first. Unreadable images are
/// skipped and recorded.
#[allow(clippy::too_many_arguments)]
pub fn perturb_benchmark(
    w: &ModelWeights,
    dataset_dir: &Path,
    configs: &[BenchConfig],
    guide: Option<(&ImageTensor, &CompositeLayout)>,
    k: usize,
    mean: &[f64],
    std: &[f64],
) -> Result<BenchReport> {
    let mut entries: Vec<(String, usize)> = Vec::new();
    let mut skipped: Vec<(String, String)> = Vec::new();
    let dir = std::fs::read_dir(dataset_dir)
        .map_err(|e| Error::io(dataset_dir.display().to_string(), e))?;
    for class_dir in dir.flatten() {
        if !class_dir.path().is_dir() {
            continue;
        }
        let name = class_dir.file_name().to_string_lossy().to_string();
        let label: usize = match name.parse() {
            Ok(l) => l,
            Err(_) => {
                skipped.push((
                    class_dir.path().display().to_string(),
                    "directory name is not a class index".to_string(),
                ));
                continue;
            }
        };
        let files = std::fs::read_dir(class_dir.path())
            .map_err(|e| Error::io(class_dir.path().display().to_string(), e))?;
        for f in files.flatten() {
            if f.path().is_file() {
                entries.push((f.path().display().to_string(), label));
            }
        }
    }
    entries.sort();
    if entries.is_empty() {
        return Err(Error::EmptyDataset(dataset_dir.display().to_string()));
    }

    let mut rows = Vec::new();
    let mut per_config: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (path, label) in &entries {
        let image = match decode_image(Path::new(path))
            .and_then(|raw| preprocess(&raw, &w.config, mean, std, path))
        {
            Ok(t) => t,
            Err(e) => {
                skipped.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let image = match guide {
            Some((g, layout)) => composite_guide(&image, g, layout, &w.config)?.0,
            None => image,
        };
        for (ci, config) in configs.iter().enumerate() {
            let spec = config
                .loss
                .unwrap_or(LossSpec::SingleLogit { target: *label });
            let s = crate::rollout::interpret(w, &image, &spec, config.scheme)?;
            let pos = auc(&perturbation_curve(
                w,
                &image,
                &s,
                Direction::Positive,
                k,
                *label,
            )?);
            let neg = auc(&perturbation_curve(
                w,
                &image,
                &s,
                Direction::Negative,
                k,
                *label,
            )?);
            rows.push(BenchRow {
                path: path.clone(),
                label: *label,
                scheme: config.scheme.label().to_string(),
                loss: spec.label(),
                pos_auc: pos,
                neg_auc: neg,
            });
            let e = per_config.entry(ci).or_insert((0.0, 0.0, 0));
            e.0 += pos;
            e.1 += neg;
            e.2 += 1;
        }
    }

    let summaries = configs
        .iter()
        .enumerate()
        .map(|(ci, config)| {
            let (p, n, count) = per_config.get(&ci).copied().unwrap_or((0.0, 0.0, 0));
            let images = count.max(1) as f64;
            BenchSummary {
                scheme: config.scheme.label().to_string(),
                loss: config
                    .loss
                    .map(|l| l.label())
                    .unwrap_or_else(|| "single:<label>".to_string()),
                mean_pos_auc: p / images,
                mean_neg_auc: n / images,
                images: count,
            }
        })
        .collect();

    Ok(BenchReport {
        rows,
        summaries,
        skipped,
        k,
    })
}

pub fn write_bench_csv(report: &BenchReport, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| {
        Error::io(
            path.display().to_string(),
            std::io::Error::other(e.to_string()),
        )
    })?;
    wtr.write_record(["path", "label", "scheme", "loss", "pos_auc", "neg_auc"])
        .and_then(|_| {
            for row in &report.rows {
                wtr.write_record([
                    row.path.as_str(),
                    &row.label.to_string(),
                    &row.scheme,
                    &row.loss,
                    &format!("{:.12}", row.pos_auc),
                    &format!("{:.12}", row.neg_auc),
                ])?;
            }
            wtr.flush()?;
            Ok(())
        })
        .map_err(|e| {
            Error::io(
                path.display().to_string(),
                std::io::Error::other(e.to_string()),
            )
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(fractions: Vec<f64>, values: Vec<f64>) -> PerturbCurve {
        PerturbCurve {
            fractions,
            values,
            direction: Direction::Positive,
            order: vec![],
        }
    }

    #[test]
    fn auc_constant_half() {
        let c = curve(vec![0.0, 0.5, 1.0], vec![0.5, 0.5, 0.5]);
        assert!((auc(&c) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn auc_linear_ramp() {
        let c = curve(vec![0.0, 1.0], vec![1.0, 0.0]);
        assert!((auc(&c) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn auc_hand_trapezoid() {
        let c = curve(vec![0.0, 0.5, 1.0], vec![1.0, 0.5, 0.0]);
        // hand: 0.5*(1+0.5)*0.5 + 0.5*(0.5+0)*0.5 = 0.375 + 0.125
        assert!((auc(&c) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn auc_within_value_bounds() {
        let c = curve(vec![0.0, 0.3, 1.0], vec![0.9, 0.1, 0.4]);
        let a = auc(&c);
        assert!((0.1..=0.9).contains(&a));
    }
}
