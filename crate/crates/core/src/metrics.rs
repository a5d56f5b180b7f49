//! Accuracy and fairness statistics over per-client accuracies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jain's fairness index `(sum x)^2 / (n * sum x^2)`.
pub fn jain_index(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("jain_index"));
    }
    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("jain_index needs finite nonnegative values".into()));
    }
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(Error::InvalidArgument("jain_index of an all-zero vector is undefined".into()));
    }
    Ok(sum * sum / (values.len() as f64 * sq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_accuracy: f64,
    /// Population standard deviation.
    pub std_deviation: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub accuracy_gap: f64,
    /// `None` when every accuracy is zero.
    pub jain_index: Option<f64>,
    /// Mean of the `ceil(n / 10)` lowest accuracies.
    pub bottom_decile_mean: f64,
    pub per_client: Vec<f64>,
}

pub fn build_report(per_client: &[f64]) -> Result<MetricsReport> {
    if per_client.is_empty() {
        return Err(Error::EmptyInput("build_report"));
    }
    let n = per_client.len() as f64;
    let mut sorted = per_client.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sums over the sorted copy keep every field permutation-invariant
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let k = per_client.len().div_ceil(10);
    let bottom = sorted[..k].iter().sum::<f64>() / k as f64;
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    Ok(MetricsReport {
        mean_accuracy: mean,
        std_deviation: var.sqrt(),
        min_accuracy: min,
        max_accuracy: max,
        accuracy_gap: max - min,
        jain_index: jain_index(&sorted).ok(),
        bottom_decile_mean: bottom,
        per_client: per_client.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn jain_examples() {
        assert!((jain_index(&[0.7; 5]).unwrap() - 1.0).abs() < 1e-15);
        assert!((jain_index(&[0.5, 1.0]).unwrap() - 0.9).abs() < 1e-15);
        assert!((jain_index(&[0.0, 0.0, 0.0, 3.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(jain_index(&[0.0, 0.0]).is_err());
        assert!(jain_index(&[]).is_err());
    }

    #[test]
    fn equal_values_report() {
        let r = build_report(&[0.9; 20]).unwrap();
        assert!((r.mean_accuracy - 0.9).abs() < 1e-12);
        assert_eq!(r.min_accuracy, 0.9);
        assert_eq!(r.accuracy_gap, 0.0);
        assert!((r.jain_index.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.bottom_decile_mean - 0.9).abs() < 1e-12);
    }

    #[test]
    fn reproduces_constructed_mean_and_std() {
        // half at m - s, half at m + s has mean m and population std s
        let (m, s) = (0.8873, 0.1251);
        let v: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { m - s } else { m + s }).collect();
        let r = build_report(&v).unwrap();
        assert!((r.mean_accuracy - m).abs() < 1e-12);
        assert!((r.std_deviation - s).abs() < 1e-12);
        assert!((r.bottom_decile_mean - (m - s)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut v in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = build_report(&v).unwrap();
            v.shuffle(&mut crate::rng::stream(seed, "perm", &[]));
            let b = build_report(&v).unwrap();
            prop_assert_eq!(a.mean_accuracy, b.mean_accuracy);
            prop_assert_eq!(a.std_deviation, b.std_deviation);
            prop_assert_eq!(a.min_accuracy, b.min_accuracy);
            prop_assert_eq!(a.accuracy_gap, b.accuracy_gap);
            prop_assert_eq!(a.jain_index, b.jain_index);
            prop_assert_eq!(a.bottom_decile_mean, b.bottom_decile_mean);
        }

        #[test]
        fn bounds_and_scale_invariance(v in prop::collection::vec(0.01f64..=1.0, 1..40), c in 0.01f64..=1.0) {
            let r = build_report(&v).unwrap();
            let n = v.len() as f64;
            let j = r.jain_index.unwrap();
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
            prop_assert!(r.min_accuracy <= r.mean_accuracy + 1e-12);
            prop_assert!(r.mean_accuracy <= r.max_accuracy + 1e-12);
            prop_assert!(r.accuracy_gap >= 0.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((jain_index(&scaled).unwrap() - j).abs() < 1e-9);
        }
    }
}
