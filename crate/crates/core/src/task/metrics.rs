use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Mean IoU over classes present in the ground truth or the prediction.
    pub miou: f64,
    /// Fraction of correctly labeled patches.
    pub pacc: f64,
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(dim_err!("{} predictions for {} labels", pred.len(), gt.len()));
    }
    if gt.is_empty() {
        return Err(Error::Data("no labels to score".into()));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let (mut tp, mut fp, mut fneg) = (vec![0u64; classes], vec![0u64; classes], vec![0u64; classes]);
    let mut correct = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    Ok(SegMetrics {
        miou: ious.iter().sum::<f64>() / ious.len() as f64,
        pacc: correct as f64 / gt.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 2, 2, 1];
        assert_eq!(seg_metrics(&gt, &gt, 3).unwrap(), SegMetrics { miou: 1.0, pacc: 1.0 });
    }

    #[test]
    fn hand_counted_confusion() {
        // class 0: TP 2, FP 1, FN 1 → 1/2; class 1: TP 1, FP 1, FN 1 → 1/3
        let m = seg_metrics(&[0, 0, 1, 1, 0], &[0, 0, 1, 0, 1], 2).unwrap();
        assert!((m.miou - 5.0 / 12.0).abs() < 1e-15, "{m:?}");
        assert!((m.pacc - 0.6).abs() < 1e-15);
    }

    #[test]
    fn constant_prediction_on_balanced_gt() {
        let m = seg_metrics(&[1, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(m.pacc, 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(seg_metrics(&[0], &[0, 1], 2), Err(Error::Dimension(_))));
        assert!(matches!(seg_metrics(&[2], &[0], 2), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn bounds_and_permutation_invariance(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle(),
        ) {
            let (pred, gt): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m = seg_metrics(&pred, &gt, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.pacc));
            prop_assert_eq!(m.miou == 1.0, pred == gt);
            let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
            let r = seg_metrics(&relabel(&pred), &relabel(&gt), 4).unwrap();
            prop_assert!((r.miou - m.miou).abs() < 1e-12);
            prop_assert_eq!(r.pacc, m.pacc);
        }
    }
}
