//! Synthetic planted-weight models.
//!
//! A planted model routes each designated patch region to one class
//! logit without any training. The construction:
//!   - the patch projection writes each patch's mean intensity into
//!     embedding coordinate 0;
//!   - positional embeddings tag each region's patch tokens in a
//!     dedicated coordinate;
//!   - in the first block, head p keys on region p's tag (plus an
//!     optional brightness term), reads intensity through the value
//!     projection, and the output projection routes head p into class
//!     coordinate 1+p of the cls token;
//!   - the classifier head reads the class coordinates, optionally with
//!     lateral inhibition from the other planted classes.
//!
//! The region→logit monotonicity is verified empirically by the test
//! suites, never assumed.
//!
//! The default parameters keep every class-asymmetric path noise-free
//! so that an all-zero image yields equal logits for equal-sized
//! regions.

use crate::error::{Error, Result};
use crate::image_io::ImageTensor;
use crate::tensor::quantize_f32;
use crate::vit::{ModelConfig, ModelWeights};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone)]
pub struct PlantParams {
    /// Positional tag magnitude on each region's patch tokens.
    pub tag: f64,
    /// Query gain read from the cls indicator coordinate.
    pub query_gain: f64,
    /// Key gain on the region tag (routes head p to region p).
    pub key_tag: f64,
    /// Key gain on patch intensity (heads also chase bright patches).
    pub key_intensity: f64,
    /// Value-projection read of the intensity coordinate.
    pub value_gain: f64,
    /// Output-projection gain from head p into class coordinate 1+p.
    pub out_gain: f64,
    /// Classifier gain on the own-class coordinate.
    pub head_gain: f64,
    /// Lateral inhibition: head row for class p gets -inhibition *
    /// head_gain on the other planted class coordinates.
    pub inhibition: f64,
    /// Scale of the generic noise on the patch projection columns.
    pub noise: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            tag: 3.0,
            query_gain: 1.5,
            key_tag: 1.5,
            key_intensity: 0.0,
            value_gain: 1.0,
            out_gain: 1.0,
            head_gain: 1.0,
            inhibition: 0.0,
            noise: 0.01,
        }
    }
}

pub type ClassRegions = BTreeMap<usize, BTreeSet<usize>>;

/// Planted model with default parameters.
pub fn plant_model(cfg: &ModelConfig, regions: &ClassRegions, seed: u64) -> Result<ModelWeights> {
    plant_model_with(cfg, regions, &PlantParams::default(), seed)
}

pub fn plant_model_with(
    cfg: &ModelConfig,
    regions: &ClassRegions,
    params: &PlantParams,
    seed: u64,
) -> Result<ModelWeights> {
    cfg.validate()?;
    validate_regions(cfg, regions)?;
    let planted: Vec<usize> = regions.keys().copied().collect();
    let p_count = planted.len();
    if cfg.num_heads < p_count {
        return Err(Error::InvalidConfig(format!(
            "planted model needs num_heads >= planted classes ({} < {})",
            cfg.num_heads, p_count
        )));
    }
    if cfg.embed_dim < p_count + 2 {
        return Err(Error::InvalidConfig(format!(
            "planted model needs embed_dim >= planted classes + 2 ({} < {})",
            cfg.embed_dim,
            p_count + 2
        )));
    }

    let mut w = ModelWeights::zeros(cfg.clone())?;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = quantize_f32;

    // intensity coordinate 0; noise on the remaining columns gives
    // generic nonzero gradients without touching any class-asymmetric
    // path (a zero image zeroes the whole patch projection output).
    let patch_dim = cfg.patch_dim();
    for r in 0..patch_dim {
        w.patch_weight.set2(r, 0, q(1.0 / patch_dim as f64));
        for c in 1..d {
            w.patch_weight
                .set2(r, c, q(params.noise * rng.gen_range(-1.0..1.0)));
        }
    }

    // cls indicator in the last coordinate
    w.cls_token.data[d - 1] = 1.0;

    // region tags; cls row (row 0) stays zero
    let grid = cfg.grid();
    for (pi, class) in planted.iter().enumerate() {
        for &patch in &regions[class] {
            let row = 1 + patch;
            w.pos_embed.set2(row, 1 + pi, q(params.tag));
        }
    }
    let _ = grid;

    // block 0 does the routing
    {
        let blk = &mut w.blocks[0];
        for pi in 0..p_count {
            let col = pi * dh;
            blk.wq.set2(d - 1, col, q(params.query_gain));
            blk.wk.set2(1 + pi, col, q(params.key_tag));
            blk.wk.set2(0, col, q(params.key_intensity));
            blk.wv.set2(0, col, q(params.value_gain));
            blk.wo.set2(col, 1 + pi, q(params.out_gain));
        }
    }
    // later blocks stay near-identity: uniform attention, zero value path

    // classifier head with optional lateral inhibition; non-planted
    // classes sit at a fixed negative bias so planted classes win argmax
    for (pi, class) in planted.iter().enumerate() {
        w.head_weight.set2(1 + pi, *class, q(params.head_gain));
        for (qi, _other) in planted.iter().enumerate() {
            if qi != pi {
                w.head_weight
                    .set2(1 + qi, *class, q(-params.inhibition * params.head_gain));
            }
        }
    }
    for c in 0..cfg.num_classes {
        if !planted.contains(&c) {
            w.head_bias.data[c] = -1.0;
        }
    }

    Ok(w)
}

fn validate_regions(cfg: &ModelConfig, regions: &ClassRegions) -> Result<()> {
    let n = cfg.num_patches();
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (&class, patches) in regions {
        if class >= cfg.num_classes {
            return Err(Error::ClassOutOfRange {
                index: class,
                num_classes: cfg.num_classes,
            });
        }
        if patches.is_empty() {
            return Err(Error::InvalidRegion {
                class,
                reason: "empty patch set".into(),
            });
        }
        for &p in patches {
            if p >= n {
                return Err(Error::InvalidRegion {
                    class,
                    reason: format!("patch {p} outside grid of {n}"),
                });
            }
            if let Some(&prev) = owner.get(&p) {
                return Err(Error::OverlappingRegions {
                    patch: p,
                    a: prev,
                    b: class,
                });
            }
            owner.insert(p, class);
        }
    }
    if regions.is_empty() {
        return Err(Error::InvalidArgument(
            "plant_model needs at least one class region".into(),
        ));
    }
    Ok(())
}

/// Patch indices of the left `cols` grid columns.
pub fn grid_columns(cfg: &ModelConfig, col_start: usize, col_end: usize) -> BTreeSet<usize> {
    let g = cfg.grid();
    let mut out = BTreeSet::new();
    for r in 0..g {
        for c in col_start..col_end {
            out.insert(r * g + c);
        }
    }
    out
}

pub fn left_half_region(cfg: &ModelConfig) -> BTreeSet<usize> {
    grid_columns(cfg, 0, cfg.grid() / 2)
}

pub fn right_half_region(cfg: &ModelConfig) -> BTreeSet<usize> {
    grid_columns(cfg, cfg.grid() / 2, cfg.grid())
}

/// Synthetic model-space image: every patch listed in `levels` is
/// filled with its level plus per-pixel jitter, everything else with
/// `background`.
pub fn synth_region_image(
    cfg: &ModelConfig,
    levels: &BTreeMap<usize, f64>,
    background: f64,
    jitter: f64,
    seed: u64,
) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let g = cfg.grid();
    let ps = cfg.patch_size;
    let mut img = ImageTensor::zeros(s, s, cfg.channels);
    for y in 0..s {
        for x in 0..s {
            let patch = (y / ps) * g + (x / ps);
            let base = levels.get(&patch).copied().unwrap_or(background);
            for c in 0..cfg.channels {
                let v = base + jitter * rng.gen_range(-1.0..1.0f64);
                img.set(y, x, c, v);
            }
        }
    }
    img
}

/// Uniform level over a set of patches.
pub fn levels_for(patches: &BTreeSet<usize>, level: f64) -> BTreeMap<usize, f64> {
    patches.iter().map(|&p| (p, level)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{argmax, forward};

    pub(crate) fn desk_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
            channels: 1,
        }
    }

    fn two_class_regions(cfg: &ModelConfig) -> ClassRegions {
        let mut r = ClassRegions::new();
        r.insert(0, left_half_region(cfg));
        r.insert(1, right_half_region(cfg));
        r
    }

    #[test]
    fn overlapping_regions_rejected() {
        let cfg = desk_cfg();
        let mut r = ClassRegions::new();
        r.insert(0, left_half_region(&cfg));
        let mut overlap = right_half_region(&cfg);
        overlap.insert(0); // patch 0 is in the left half
        r.insert(1, overlap);
        let err = plant_model(&cfg, &r, 0).unwrap_err();
        assert!(matches!(err, Error::OverlappingRegions { patch: 0, .. }));
    }

    #[test]
    fn bright_left_classifies_left_class() {
        let cfg = desk_cfg();
        let w = plant_model(&cfg, &two_class_regions(&cfg), 7).unwrap();
        let img = synth_region_image(
            &cfg,
            &levels_for(&left_half_region(&cfg), 1.0),
            0.0,
            0.05,
            11,
        );
        let trace = forward(&w, &img).unwrap();
        assert_eq!(argmax(&trace.logits()), 0, "logits {:?}", trace.logits());
    }

    #[test]
    fn brightening_region_strictly_increases_its_logit() {
        let cfg = desk_cfg();
        let w = plant_model(&cfg, &two_class_regions(&cfg), 3).unwrap();
        for &level in &[0.2, 0.5, 0.8] {
            let mut levels = levels_for(&left_half_region(&cfg), level);
            levels.extend(levels_for(&right_half_region(&cfg), 0.4));
            let base = forward(&w, &synth_region_image(&cfg, &levels, 0.0, 0.0, 1)).unwrap();
            let mut brighter = levels_for(&left_half_region(&cfg), level + 0.1);
            brighter.extend(levels_for(&right_half_region(&cfg), 0.4));
            let up = forward(&w, &synth_region_image(&cfg, &brighter, 0.0, 0.0, 1)).unwrap();
            assert!(
                up.logits()[0] > base.logits()[0],
                "level {level}: {} vs {}",
                up.logits()[0],
                base.logits()[0]
            );
        }
    }

    #[test]
    fn zero_image_equal_logits_for_equal_regions() {
        let cfg = desk_cfg();
        let w = plant_model(&cfg, &two_class_regions(&cfg), 5).unwrap();
        let img = ImageTensor::zeros(cfg.image_size, cfg.image_size, cfg.channels);
        let logits = forward(&w, &img).unwrap().logits();
        assert!(
            (logits[0] - logits[1]).abs() <= 1e-6,
            "logits {logits:?}"
        );
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = desk_cfg();
        let w = plant_model(&cfg, &two_class_regions(&cfg), 2).unwrap();
        let img = synth_region_image(
            &cfg,
            &levels_for(&left_half_region(&cfg), 0.8),
            0.1,
            0.02,
            4,
        );
        let trace = forward(&w, &img).unwrap();
        let t = trace.token_count;
        for layer in &trace.attention().layers {
            for head in layer {
                for row in head.data.chunks(t) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-6);
                    assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }
}
