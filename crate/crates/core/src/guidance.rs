//! Attention-direction guidance: compositing a guide-class image next
//! to a single-class image, and detail interpretation via contrastive
//! losses.

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::loss::LossSpec;
use crate::rollout::{interpret, CorrectionScheme, SaliencyMap};
use crate::vit::{ModelConfig, ModelWeights};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Right,
    Bottom,
}

impl Placement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "right" => Ok(Placement::Right),
            "bottom" => Ok(Placement::Bottom),
            other => Err(Error::InvalidArgument(format!(
                "unknown placement `{other}` (expected right|bottom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLayout {
    pub placement: Placement,
    /// Fraction of the output occupied by the guide, in (0,1).
    pub guide_fraction: f64,
}

impl CompositeLayout {
    pub fn new(placement: Placement, guide_fraction: f64) -> Result<Self> {
        if !(guide_fraction > 0.0 && guide_fraction < 1.0) {
            return Err(Error::DegenerateLayout(format!(
                "guide fraction {guide_fraction} outside (0,1)"
            )));
        }
        Ok(CompositeLayout {
            placement,
            guide_fraction,
        })
    }
}

/// Patch-region masks for the two sub-images. Boundary patches that
/// straddle the split belong to neither mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeMasks {
    pub source: Vec<usize>,
    pub guide: Vec<usize>,
    pub boundary: Vec<usize>,
}

/// Bilinear resample of a model-space image into an arbitrary target
/// rectangle size.
fn resample(src: &ImageTensor, out_h: usize, out_w: usize) -> Vec<f64> {
    let sx = src.width as f64 / out_w as f64;
    let sy = src.height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_h * out_w * src.channels);
    for y in 0..out_h {
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, src.width as f64 - 1.0);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, src.height as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let y1 = (y0 + 1).min(src.height - 1);
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            for c in 0..src.channels {
                let top = src.at(y0, x0, c) * (1.0 - tx) + src.at(y0, x1, c) * tx;
                let bot = src.at(y1, x0, c) * (1.0 - tx) + src.at(y1, x1, c) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// Stitch `image` and `guide` into one model-resolution composite and
/// return the patch index sets each sub-image covers.
pub fn composite_guide(
    image: &ImageTensor,
    guide: &ImageTensor,
    layout: &CompositeLayout,
    cfg: &ModelConfig,
) -> Result<(ImageTensor, CompositeMasks)> {
    if image.channels != cfg.channels || guide.channels != cfg.channels {
        return Err(Error::InvalidArgument(
            "composite inputs must match the model channel count".into(),
        ));
    }
    let s = cfg.image_size;
    let ps = cfg.patch_size;
    let g = cfg.grid();

    // split position in pixels along the placement axis
    let guide_px = (s as f64 * layout.guide_fraction).round() as usize;
    let source_px = s - guide_px;
    if guide_px < ps || source_px < ps {
        return Err(Error::DegenerateLayout(format!(
            "sub-image smaller than one patch (source {source_px}px, guide {guide_px}px, patch {ps}px)"
        )));
    }

    let mut out = ImageTensor::zeros(s, s, cfg.channels);
    let (src_data, guide_data, split) = match layout.placement {
        Placement::Right => (
            resample(image, s, source_px),
            resample(guide, s, guide_px),
            source_px,
        ),
        Placement::Bottom => (
            resample(image, source_px, s),
            resample(guide, guide_px, s),
            source_px,
        ),
    };
    match layout.placement {
        Placement::Right => {
            for y in 0..s {
                for x in 0..s {
                    for c in 0..cfg.channels {
                        let v = if x < split {
                            src_data[(y * source_px + x) * cfg.channels + c]
                        } else {
                            guide_data[(y * guide_px + (x - split)) * cfg.channels + c]
                        };
                        out.set(y, x, c, v);
                    }
                }
            }
        }
        Placement::Bottom => {
            for y in 0..s {
                for x in 0..s {
                    for c in 0..cfg.channels {
                        let v = if y < split {
                            src_data[(y * s + x) * cfg.channels + c]
                        } else {
                            guide_data[((y - split) * s + x) * cfg.channels + c]
                        };
                        out.set(y, x, c, v);
                    }
                }
            }
        }
    }

    // classify patches by which side of the split they lie on
    let mut masks = CompositeMasks {
        source: Vec::new(),
        guide: Vec::new(),
        boundary: Vec::new(),
    };
    for row in 0..g {
        for col in 0..g {
            let patch = row * g + col;
            let (lo, hi) = match layout.placement {
                Placement::Right => (col * ps, (col + 1) * ps),
                Placement::Bottom => (row * ps, (row + 1) * ps),
            };
            if hi <= split {
                masks.source.push(patch);
            } else if lo >= split {
                masks.guide.push(patch);
            } else {
                masks.boundary.push(patch);
            }
        }
    }
    Ok((out, masks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastForm {
    NormalizedDiff,
    Diff,
    Ratio,
}

impl ContrastForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ndiff" | "normalized_diff" => Ok(ContrastForm::NormalizedDiff),
            "diff" => Ok(ContrastForm::Diff),
            "ratio" => Ok(ContrastForm::Ratio),
            other => Err(Error::InvalidArgument(format!(
                "unknown contrast form `{other}` (expected ndiff|diff|ratio)"
            ))),
        }
    }

    pub fn loss(&self, c1: usize, c2: usize) -> LossSpec {
        match self {
            ContrastForm::NormalizedDiff => LossSpec::NormalizedDiff { c1, c2 },
            ContrastForm::Diff => LossSpec::Diff { c1, c2 },
            ContrastForm::Ratio => LossSpec::Ratio { c1, c2 },
        }
    }
}

/// Contrastive detail interpretation within one feature region: red
/// regions predispose the model toward c1, blue regions toward c2.
pub fn detail_interpret(
    w: &ModelWeights,
    image: &ImageTensor,
    c1: usize,
    c2: usize,
    form: ContrastForm,
    scheme: CorrectionScheme,
) -> Result<SaliencyMap> {
    if c1 == c2 {
        return Err(Error::ClassesMustDiffer(c1));
    }
    interpret(w, image, &form.loss(c1, c2), scheme)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg224() -> ModelConfig {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 2,
            channels: 1,
        }
    }

    #[test]
    fn half_split_geometry_on_224() {
        let cfg = cfg224();
        let layout = CompositeLayout::new(Placement::Right, 0.5).unwrap();
        let img = ImageTensor::zeros(224, 224, 1);
        let (_, masks) = composite_guide(&img, &img, &layout, &cfg).unwrap();
        // guide mask = patch columns 7..13 of a 14x14 grid
        assert!(masks.boundary.is_empty());
        assert_eq!(masks.guide.len(), 14 * 7);
        for &p in &masks.guide {
            assert!(p % 14 >= 7);
        }
        for &p in &masks.source {
            assert!(p % 14 < 7);
        }
    }

    #[test]
    fn straddling_patch_goes_to_neither_mask() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            ..cfg224()
        };
        // fraction 0.4 of 16px: guide = round(6.4) = 6px, so the split
        // at 10px lands inside patch column 2
        let layout = CompositeLayout::new(Placement::Right, 0.4).unwrap();
        let img = ImageTensor::zeros(16, 16, 1);
        let (_, masks) = composite_guide(&img, &img, &layout, &cfg).unwrap();
        assert_eq!(masks.boundary.len(), 4);
        let union = masks.source.len() + masks.guide.len() + masks.boundary.len();
        assert_eq!(union, 16);
        for &p in &masks.boundary {
            assert_eq!(p % 4, 2);
        }
    }

    #[test]
    fn composite_with_self_equals_resized_self() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            ..cfg224()
        };
        // constant image composited with itself stays constant
        let img = ImageTensor::new(16, 16, 1, vec![0.7; 256]);
        let layout = CompositeLayout::new(Placement::Right, 0.5).unwrap();
        let (out, _) = composite_guide(&img, &img, &layout, &cfg).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn compositing_is_deterministic() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            ..cfg224()
        };
        let img = ImageTensor::new(16, 16, 1, (0..256).map(|i| i as f64 / 256.0).collect());
        let guide = ImageTensor::new(16, 16, 1, (0..256).map(|i| (255 - i) as f64 / 256.0).collect());
        let layout = CompositeLayout::new(Placement::Bottom, 0.25).unwrap();
        let (a, _) = composite_guide(&img, &guide, &layout, &cfg).unwrap();
        let (b, _) = composite_guide(&img, &guide, &layout, &cfg).unwrap();
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn degenerate_fraction_rejected() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 4,
            ..cfg224()
        };
        let img = ImageTensor::zeros(16, 16, 1);
        let layout = CompositeLayout::new(Placement::Right, 0.1).unwrap();
        let err = composite_guide(&img, &img, &layout, &cfg).unwrap_err();
        assert!(matches!(err, Error::DegenerateLayout(_)));
    }

    #[test]
    fn detail_interpret_rejects_equal_classes() {
        let cfg = cfg224();
        let w = crate::vit::ModelWeights::random(cfg, 1).unwrap();
        let img = ImageTensor::zeros(224, 224, 1);
        let err = detail_interpret(
            &w,
            &img,
            1,
            1,
            ContrastForm::Diff,
            CorrectionScheme::Complete,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ClassesMustDiffer(1)));
    }
}
