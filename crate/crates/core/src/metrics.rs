//! Accuracy and stability statistics over repeated volume estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("true volume must be positive")]
    ZeroTrueVolume,
    #[error("mean estimate must be positive")]
    ZeroMean,
    #[error("no estimates")]
    Empty,
    #[error("estimate {0} is negative or not finite")]
    InvalidEstimate(f64),
    #[error("no ground truth for item {0}")]
    MissingTruth(String),
}

/// One volume estimate of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateRecord {
    /// `<pair>#<label>`.
    pub item: String,
    pub pair: usize,
    pub run: usize,
    pub estimate_ml: f64,
}

/// Ground-truth volume of one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub item: String,
    pub volume_ml: f64,
}

fn check(estimates: &[f64]) -> Result<(), MetricsError> {
    if estimates.is_empty() {
        return Err(MetricsError::Empty);
    }
    match estimates.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        Some(&e) => Err(MetricsError::InvalidEstimate(e)),
        None => Ok(()),
    }
}

/// Mean absolute percentage error of the estimates of one item.
pub fn mape_item(true_v: f64, estimates: &[f64]) -> Result<f64, MetricsError> {
    if !(true_v > 0.0 && true_v.is_finite()) {
        return Err(MetricsError::ZeroTrueVolume);
    }
    check(estimates)?;
    let sum: f64 = estimates.iter().map(|e| ((true_v - e) / true_v).abs()).sum();
    Ok(100.0 * sum / estimates.len() as f64)
}

/// Population standard deviation over the mean, in percent.
pub fn cv_item(estimates: &[f64]) -> Result<f64, MetricsError> {
    check(estimates)?;
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(MetricsError::ZeroMean);
    }
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(100.0 * var.sqrt() / mean)
}

/// Unweighted mean of per-item MAPEs.
pub fn mape_overall(items: &[f64]) -> Result<f64, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub item: String,
    pub true_ml: f64,
    pub estimates: usize,
    pub mean_ml: f64,
    pub mape: f64,
    pub cv: f64,
}

/// Order statistics of a sample (nearest-rank quantiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Some(Self {
            min: v[0],
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Ascending by item id.
    pub items: Vec<ItemMetrics>,
    pub mape_overall: f64,
    pub mape_summary: Summary,
    pub cv_summary: Summary,
}

/// Groups records by item and evaluates them against `truth` (item id to
/// true volume in mL).
pub fn compute_report(records: &[EstimateRecord], truth: &BTreeMap<String, f64>) -> Result<MetricsReport, MetricsError> {
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.item).or_default().push(r.estimate_ml);
    }
    let items = grouped
        .into_iter()
        .map(|(item, est)| {
            let true_ml = *truth.get(item).ok_or_else(|| MetricsError::MissingTruth(item.to_string()))?;
            Ok(ItemMetrics {
                item: item.to_string(),
                true_ml,
                estimates: est.len(),
                mean_ml: est.iter().sum::<f64>() / est.len() as f64,
                mape: mape_item(true_ml, &est)?,
                cv: cv_item(&est)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let mapes: Vec<f64> = items.iter().map(|i| i.mape).collect();
    let cvs: Vec<f64> = items.iter().map(|i| i.cv).collect();
    Ok(MetricsReport {
        mape_overall: mape_overall(&mapes)?,
        mape_summary: Summary::of(&mapes).ok_or(MetricsError::Empty)?,
        cv_summary: Summary::of(&cvs).ok_or(MetricsError::Empty)?,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mape_examples() {
        assert!((mape_item(100.0, &[90.0, 90.0, 90.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(mape_item(42.0, &[42.0, 42.0]).unwrap(), 0.0);
        assert!((mape_item(100.0, &[80.0, 120.0]).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(mape_item(0.0, &[1.0]), Err(MetricsError::ZeroTrueVolume));
        assert_eq!(mape_item(1.0, &[]), Err(MetricsError::Empty));
        assert_eq!(mape_item(1.0, &[-1.0]), Err(MetricsError::InvalidEstimate(-1.0)));
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cv_item(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!((cv_item(&[90.0, 110.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(cv_item(&[0.0, 0.0]), Err(MetricsError::ZeroMean));
    }

    #[test]
    fn overall_examples() {
        assert_eq!(mape_overall(&[8.0, 12.0]).unwrap(), 10.0);
        assert_eq!(mape_overall(&[7.5]).unwrap(), 7.5);
        assert_eq!(mape_overall(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn report_groups_by_item() {
        let rec = |item: &str, run, e| EstimateRecord { item: item.into(), pair: 0, run, estimate_ml: e };
        let records = [rec("b#2", 0, 90.0), rec("a#2", 0, 50.0), rec("b#2", 1, 110.0), rec("a#2", 1, 50.0)];
        let truth = BTreeMap::from([("a#2".to_string(), 40.0), ("b#2".to_string(), 100.0)]);
        let r = compute_report(&records, &truth).unwrap();
        assert_eq!(r.items[0].item, "a#2");
        assert!((r.items[0].mape - 25.0).abs() < 1e-12);
        assert_eq!(r.items[0].cv, 0.0);
        assert!((r.items[1].mape - 10.0).abs() < 1e-12);
        assert!((r.items[1].cv - 10.0).abs() < 1e-12);
        assert!((r.mape_overall - 17.5).abs() < 1e-12);
        let missing = compute_report(&records, &BTreeMap::new());
        assert!(matches!(missing, Err(MetricsError::MissingTruth(_))));
    }

    #[test]
    fn summary_quantiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.min, s.p25, s.median, s.p75, s.max, s.mean), (1.0, 1.0, 2.0, 3.0, 4.0, 2.5));
        assert!(Summary::of(&[]).is_none());
    }

    proptest! {
        #[test]
        fn cv_is_scale_invariant(est in prop::collection::vec(1.0f64..500.0, 1..30), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = est.iter().map(|e| e * c).collect();
            let (a, b) = (cv_item(&est).unwrap(), cv_item(&scaled).unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn overall_of_copies_is_idempotent(m in 0.0f64..200.0, k in 1usize..50) {
            let v = mape_overall(&vec![m; k]).unwrap();
            prop_assert!((v - m).abs() <= 1e-12 * m.max(1.0));
        }

        #[test]
        fn mape_and_cv_are_non_negative(t in 0.1f64..500.0, est in prop::collection::vec(0.0f64..500.0, 1..30)) {
            prop_assert!(mape_item(t, &est).unwrap() >= 0.0);
            if est.iter().any(|e| *e > 0.0) {
                prop_assert!(cv_item(&est).unwrap() >= 0.0);
            }
        }
    }
}
