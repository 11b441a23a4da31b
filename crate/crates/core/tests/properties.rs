//! Randomized invariants over the numeric core.

use proptest::prelude::*;
use vitinterp::experiments::{auc, Direction, PerturbCurve};
use vitinterp::rollout::{correct_layer, normalize_signed, CorrectionScheme, SaliencyMap};
use vitinterp::tensor::Tensor;

fn saliency(scores: Vec<f64>) -> SaliencyMap {
    SaliencyMap {
        grid: (1, scores.len()),
        scores: scores.clone(),
        normalized: vec![],
        degenerate: false,
        scheme: None,
        loss: None,
    }
}

proptest! {
    #[test]
    fn normalized_scores_stay_in_unit_interval(
        scores in proptest::collection::vec(-1e6f64..1e6, 1..64)
    ) {
        let n = normalize_signed(saliency(scores.clone()));
        for v in &n.normalized {
            prop_assert!((-1.0..=1.0).contains(v));
        }
        let max_abs = scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > 0.0 {
            prop_assert!(n.normalized.iter().any(|v| v.abs() == 1.0));
            prop_assert!(!n.degenerate);
            // sign is preserved entrywise
            for (s, v) in scores.iter().zip(&n.normalized) {
                prop_assert!(s.signum() == v.signum() || *s == 0.0);
            }
        } else {
            prop_assert!(n.degenerate);
        }
    }

    #[test]
    fn auc_within_value_bounds(
        values in proptest::collection::vec(0.0f64..1.0, 2..32)
    ) {
        let k = values.len() - 1;
        let curve = PerturbCurve {
            fractions: (0..=k).map(|i| i as f64 / k as f64).collect(),
            values: values.clone(),
            direction: Direction::Positive,
            order: vec![],
        };
        let a = auc(&curve);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn positive_and_absolute_corrections_are_nonnegative(
        seedable in proptest::collection::vec((0.0f64..1.0, -2.0f64..2.0), 4..36)
    ) {
        let t = (seedable.len() as f64).sqrt().floor() as usize;
        let n = t * t;
        let a = vec![Tensor::new(vec![t, t], seedable[..n].iter().map(|p| p.0).collect())];
        let g = vec![Tensor::new(vec![t, t], seedable[..n].iter().map(|p| p.1).collect())];
        for scheme in [CorrectionScheme::Positive, CorrectionScheme::Absolute] {
            let c = correct_layer(&a, &g, scheme).unwrap();
            prop_assert!(c.data.iter().all(|&v| v >= 0.0));
        }
    }
}
