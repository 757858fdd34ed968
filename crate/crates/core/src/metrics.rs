//! Regression-as-sentiment metrics: binary accuracy, weighted F1, MAE and
//! Pearson correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metrics: predictions ({pred}) and labels ({label}) differ in length")]
    LengthMismatch { pred: usize, label: usize },
    #[error("metrics: no samples")]
    Empty,
    #[error("metrics: non-finite {which} at index {index}")]
    NonFinite { which: &'static str, index: usize },
    #[error("metrics: every label is exactly zero, binary accuracy and F1 are undefined")]
    AllZeroLabels,
    #[error("metrics: {which} is constant, Pearson correlation is undefined")]
    ConstantVector { which: &'static str },
}

/// How continuous labels and predictions are split into two classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acc2Convention {
    /// Negative (`< 0`) vs positive (`> 0`); samples whose label is exactly
    /// zero are dropped.
    #[default]
    ExcludeZero,
    /// Negative (`< 0`) vs non-negative (`>= 0`) over every sample.
    NonNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: f64,
    /// Samples that entered Acc-2 and F1.
    pub n_eval: usize,
}

pub fn compute_metrics(y_hat: &[f64], y: &[f64]) -> Result<MetricReport, MetricsError> {
    compute_metrics_with(y_hat, y, Acc2Convention::default())
}

pub fn compute_metrics_with(
    y_hat: &[f64],
    y: &[f64],
    convention: Acc2Convention,
) -> Result<MetricReport, MetricsError> {
    if y_hat.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            pred: y_hat.len(),
            label: y.len(),
        });
    }
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (which, v) in [("prediction", y_hat), ("label", y)] {
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite { which, index });
        }
    }

    let pairs: Vec<(bool, bool)> = match convention {
        Acc2Convention::ExcludeZero => y_hat
            .iter()
            .zip(y)
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| (p > 0.0, t > 0.0))
            .collect(),
        Acc2Convention::NonNegative => y_hat.iter().zip(y).map(|(&p, &t)| (p >= 0.0, t >= 0.0)).collect(),
    };
    if pairs.is_empty() {
        return Err(MetricsError::AllZeroLabels);
    }
    let (acc2, f1) = binary_scores(&pairs);

    let n = y.len() as f64;
    let mae = y_hat.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let corr = pearson(y_hat, y)?;
    Ok(MetricReport {
        acc2,
        f1,
        mae,
        corr,
        n_eval: pairs.len(),
    })
}

/// Accuracy and support-weighted F1 over `(predicted, actual)` pairs. A class
/// with no predictions has F1 0.
fn binary_scores(pairs: &[(bool, bool)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(p, t)| p == t).count() as f64;
    let f1_for = |class: bool| -> (f64, usize) {
        let tp = pairs.iter().filter(|&&(p, t)| p == class && t == class).count();
        let fp = pairs.iter().filter(|&&(p, t)| p == class && t != class).count();
        let fn_ = pairs.iter().filter(|&&(p, t)| p != class && t == class).count();
        let support = tp + fn_;
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        (f1, support)
    };
    let (f_pos, s_pos) = f1_for(true);
    let (f_neg, s_neg) = f1_for(false);
    let f1 = (f_pos * s_pos as f64 + f_neg * s_neg as f64) / n;
    (correct / n, f1)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(MetricsError::ConstantVector { which: "prediction" });
    }
    if syy == 0.0 {
        return Err(MetricsError::ConstantVector { which: "label" });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// MAE of always predicting the mean of `y`.
pub fn label_mean_baseline_mae(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|t| (t - m).abs()).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let y = [-1.5, 0.3, 2.0, -0.2];
        let r = compute_metrics(&y, &y).unwrap();
        assert_eq!((r.acc2, r.f1, r.mae), (1.0, 1.0, 0.0));
        assert!((r.corr - 1.0).abs() < 1e-12);
        assert_eq!(r.n_eval, 4);
    }

    #[test]
    fn hand_example() {
        let r = compute_metrics(&[-0.5, 1.0, -1.0], &[-1.0, 2.0, 3.0]).unwrap();
        assert!((r.acc2 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.mae - 5.5 / 3.0).abs() < 1e-15);
        // pos: tp 1, fn 1, fp 0 -> 2/3; neg: tp 1, fp 1 -> 2/3
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_labels() {
        let r = compute_metrics(&[1.0, -1.0, 0.5], &[0.0, -2.0, 1.0]).unwrap();
        assert_eq!(r.n_eval, 2);
        assert_eq!(r.acc2, 1.0);
        let r = compute_metrics_with(&[1.0, -1.0, 0.5], &[0.0, -2.0, 1.0], Acc2Convention::NonNegative).unwrap();
        assert_eq!(r.n_eval, 3);
        assert_eq!(r.acc2, 1.0);
        assert_eq!(
            compute_metrics(&[1.0, 2.0], &[0.0, 0.0]).unwrap_err(),
            MetricsError::AllZeroLabels
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_metrics(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert_eq!(compute_metrics(&[], &[]).unwrap_err(), MetricsError::Empty);
        assert_eq!(
            compute_metrics(&[1.0, 1.0], &[1.0, 2.0]).unwrap_err(),
            MetricsError::ConstantVector { which: "prediction" }
        );
        assert_eq!(
            compute_metrics(&[1.0, 2.0], &[1.0, 1.0]).unwrap_err(),
            MetricsError::ConstantVector { which: "label" }
        );
        assert!(matches!(
            compute_metrics(&[f64::NAN, 2.0], &[1.0, 1.0]),
            Err(MetricsError::NonFinite { which: "prediction", index: 0 })
        ));
    }

    #[test]
    fn missing_class_prediction_scores_zero_f1() {
        // everything predicted positive
        let (acc, f1) = binary_scores(&[(true, true), (true, false), (true, true), (true, true)]);
        assert_eq!(acc, 0.75);
        // pos F1 = 6/7 with support 3, neg F1 = 0 with support 1
        assert!((f1 - 0.75 * 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_baseline_is_about_one_and_a_half() {
        let y: Vec<f64> = (0..60_001).map(|i| -3.0 + 6.0 * i as f64 / 60_000.0).collect();
        assert!((label_mean_baseline_mae(&y) - 1.5).abs() < 1e-3);
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(-3.0f64..3.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn negation_symmetry((p, t) in vec_pair()) {
            let a = compute_metrics(&p, &t);
            let np: Vec<f64> = p.iter().map(|x| -x).collect();
            let nt: Vec<f64> = t.iter().map(|x| -x).collect();
            let b = compute_metrics(&np, &nt);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.acc2 - b.acc2).abs() < 1e-12);
                prop_assert!((a.f1 - b.f1).abs() < 1e-12);
                prop_assert!((a.mae - b.mae).abs() < 1e-12);
                prop_assert!((a.corr.abs() - b.corr.abs()).abs() < 1e-9);
            }
        }

        #[test]
        fn mae_triangle((p, t) in vec_pair()) {
            let n = p.len() as f64;
            let mae = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
            let zero = vec![0.0; p.len()];
            prop_assert!(mae(&p, &t) <= mae(&p, &zero) + mae(&zero, &t) + 1e-12);
        }

        #[test]
        fn pearson_affine_invariant((p, t) in vec_pair(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            if let Ok(r) = pearson(&p, &t) {
                let q: Vec<f64> = p.iter().map(|x| a * x + b).collect();
                let r2 = pearson(&q, &t).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn acc2_monotone_sign_preserving((p, t) in vec_pair()) {
            if let Ok(r) = compute_metrics(&p, &t) {
                let q: Vec<f64> = p.iter().map(|x| x * x * x + 2.0 * x).collect();
                if let Ok(r2) = compute_metrics(&q, &t) {
                    prop_assert_eq!(r.acc2, r2.acc2);
                    prop_assert_eq!(r.f1, r2.f1);
                }
            }
        }

        #[test]
        fn ranges((p, t) in vec_pair()) {
            if let Ok(r) = compute_metrics(&p, &t) {
                prop_assert!((0.0..=1.0).contains(&r.acc2));
                prop_assert!((0.0..=1.0).contains(&r.f1));
                prop_assert!(r.mae >= 0.0);
                prop_assert!((-1.0..=1.0).contains(&r.corr));
            }
        }
    }
}
