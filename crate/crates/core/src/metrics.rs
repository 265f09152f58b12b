//! Evaluation metrics: CCC, UAR, MAE and the composite multitask score.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{LabelSet, PredictionSet};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {pred} predictions vs {gold} references")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("need at least {need} points, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("class {class} outside [0, {k})")]
    ClassRange { class: usize, k: usize },
    #[error("score undefined: {0}")]
    Undefined(String),
    #[error("prediction {0:?} has no reference label")]
    UnknownId(String),
    #[error("duplicate prediction id {0:?}")]
    DuplicateId(String),
    #[error("prediction {id:?} has {got} values, expected {expected}")]
    Arity { id: String, got: usize, expected: usize },
}

fn check_len(pred: usize, gold: usize) -> Result<(), MetricError> {
    if pred != gold {
        return Err(MetricError::LengthMismatch { pred, gold });
    }
    Ok(())
}

/// Concordance correlation coefficient with population moments; 0 when
/// both sequences are constant and equal.
pub fn ccc<T: Real>(pred: &[T], gold: &[T]) -> Result<T, MetricError> {
    check_len(pred.len(), gold.len())?;
    if pred.len() < 2 {
        return Err(MetricError::TooFew {
            need: 2,
            got: pred.len(),
        });
    }
    let n = T::from_usize_lossy(pred.len());
    let mx = pred.iter().copied().sum::<T>() / n;
    let my = gold.iter().copied().sum::<T>() / n;
    let (mut vx, mut vy, mut cov) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in pred.iter().zip(gold) {
        let (dx, dy) = (x - mx, y - my);
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::lit(2.0) * cov / denom)
}

/// Unweighted average recall over the classes present in `gold`.
pub fn uar(pred: &[usize], gold: &[usize], k: usize) -> Result<f64, MetricError> {
    check_len(pred.len(), gold.len())?;
    if gold.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &g) in pred.iter().zip(gold) {
        for c in [p, g] {
            if c >= k {
                return Err(MetricError::ClassRange { class: c, k });
            }
        }
        totals[g] += 1;
        if p == g {
            hits[g] += 1;
        }
    }
    let present: Vec<f64> = totals
        .iter()
        .zip(&hits)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn mae<T: Real>(pred: &[T], gold: &[T]) -> Result<T, MetricError> {
    check_len(pred.len(), gold.len())?;
    if pred.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let total: T = pred.iter().zip(gold).map(|(&p, &g)| (p - g).abs()).sum();
    Ok(total / T::from_usize_lossy(pred.len()))
}

/// Composite multitask score: harmonic mean of UAR, mean CCC and the
/// inverse age MAE, `3 / (1/uar + 1/ccc + mae)`.
pub fn s_mtl(uar: f64, mae: f64, ccc_mean: f64) -> Result<f64, MetricError> {
    for (name, v) in [("uar", uar), ("mae", mae), ("ccc", ccc_mean)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(MetricError::Undefined(format!("{name} = {v} is not positive")));
        }
    }
    Ok(3.0 / (1.0 / uar + 1.0 / ccc_mean + mae))
}

/// Metrics over one evaluation set. Fields are `None` for tasks absent
/// from the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub uar: Option<f64>,
    pub mae: Option<f64>,
    pub ccc_per_dim: Option<Vec<f64>>,
    pub ccc_mean: Option<f64>,
    /// Composite score, or why it is undefined.
    pub s_mtl: Result<f64, String>,
}

impl EvalReport {
    /// `key=value` lines; undefined scores print as `undefined`.
    pub fn to_key_values(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        let _ = writeln!(out, "n={}", self.n);
        let _ = writeln!(out, "uar={}", fmt(self.uar));
        let _ = writeln!(out, "mae={}", fmt(self.mae));
        let _ = writeln!(out, "ccc_mean={}", fmt(self.ccc_mean));
        match &self.s_mtl {
            Ok(v) => {
                let _ = writeln!(out, "s_mtl={v:.6}");
            }
            Err(why) => {
                let _ = writeln!(out, "s_mtl=undefined");
                let _ = writeln!(out, "s_mtl_reason={why}");
            }
        }
        if let Some(dims) = &self.ccc_per_dim {
            for (i, c) in dims.iter().enumerate() {
                let _ = writeln!(out, "ccc_{i}={c:.6}");
            }
        }
        out
    }

    /// Per-dimension CCC table with optional dimension names.
    pub fn ccc_table(&self, names: Option<&[String]>) -> String {
        let mut out = String::from("dimension,ccc\n");
        for (i, c) in self.ccc_per_dim.iter().flatten().enumerate() {
            let name = names
                .and_then(|n| n.get(i).cloned())
                .unwrap_or_else(|| format!("e_{i}"));
            let _ = writeln!(out, "{name},{c:.6}");
        }
        out
    }
}

/// Scores predictions against references joined by utterance id.
pub fn evaluate(
    predictions: &[PredictionSet],
    labels: &HashMap<String, LabelSet>,
    n_countries: usize,
) -> Result<EvalReport, MetricError> {
    if predictions.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let mut seen = HashSet::new();
    let mut rows: Vec<(&PredictionSet, &LabelSet)> = Vec::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.id.as_str()) {
            return Err(MetricError::DuplicateId(p.id.clone()));
        }
        let l = labels
            .get(&p.id)
            .ok_or_else(|| MetricError::UnknownId(p.id.clone()))?;
        rows.push((p, l));
    }
    // Order-independent: every reduction runs over id-sorted rows.
    rows.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let all = |f: fn(&PredictionSet) -> bool| rows.iter().all(|(p, _)| f(p));

    let uar_v = if all(|p| p.country_probs.is_some()) {
        let pred: Vec<usize> = rows.iter().map(|(p, _)| p.country_argmax().unwrap()).collect();
        let gold: Vec<usize> = rows.iter().map(|(_, l)| l.country).collect();
        Some(uar(&pred, &gold, n_countries)?)
    } else {
        None
    };

    let mae_v = if all(|p| p.age.is_some()) {
        let pred: Vec<f64> = rows.iter().map(|(p, _)| p.age.unwrap()).collect();
        let gold: Vec<f64> = rows.iter().map(|(_, l)| l.age).collect();
        Some(mae(&pred, &gold)?)
    } else {
        None
    };

    let ccc_dims = if all(|p| p.emotion.is_some()) {
        let e = rows[0].1.emotion.len();
        for (p, _) in &rows {
            let got = p.emotion.as_ref().unwrap().len();
            if got != e {
                return Err(MetricError::Arity {
                    id: p.id.clone(),
                    got,
                    expected: e,
                });
            }
        }
        let dims = (0..e)
            .map(|d| {
                let pred: Vec<f64> = rows.iter().map(|(p, _)| p.emotion.as_ref().unwrap()[d]).collect();
                let gold: Vec<f64> = rows.iter().map(|(_, l)| l.emotion[d]).collect();
                ccc(&pred, &gold)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(dims)
    } else {
        None
    };
    let ccc_mean = ccc_dims
        .as_ref()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64);

    let s = match (uar_v, mae_v, ccc_mean) {
        (Some(u), Some(m), Some(c)) => s_mtl(u, m, c).map_err(|e| e.to_string()),
        _ => Err("not every task is predicted".to_string()),
    };
    Ok(EvalReport {
        n: rows.len(),
        uar: uar_v,
        mae: mae_v,
        ccc_per_dim: ccc_dims,
        ccc_mean,
        s_mtl: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook CCC from Pearson correlation and standard deviations.
    fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
        let r = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n / (sx * sy);
        2.0 * r * sx * sy / (sx * sx + sy * sy + (mx - my).powi(2))
    }

    #[test]
    fn ccc_examples() {
        assert!((ccc::<f64>(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let v: f64 = ccc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((v - 8.0 / 22.0).abs() < 1e-12);
        assert!((v - ccc_oracle(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0])).abs() < 1e-12);
        assert_eq!(ccc(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(ccc(&[1.0], &[1.0]), Err(MetricError::TooFew { .. })));
        assert!(matches!(ccc(&[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch { .. })));
        assert!((ccc(&[1.0f32, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 8.0 / 22.0).abs() < 1e-6);
    }

    #[test]
    fn uar_examples() {
        assert_eq!(uar(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(uar(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.5);
        let v = uar(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1], 2).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // absent class 2 is not averaged in
        assert_eq!(uar(&[0, 2], &[0, 1], 3).unwrap(), 0.5);
        assert!(uar(&[], &[], 2).is_err());
        assert!(matches!(uar(&[5], &[0], 2), Err(MetricError::ClassRange { .. })));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[30.0], &[26.0]).unwrap(), 4.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(mae::<f64>(&[], &[]).is_err());
    }

    /// Reference (uar, mae, ccc, score) rows, scores rounded to 3 places.
    const REFERENCE_ROWS: [(f64, f64, f64, f64); 13] = [
        (0.416, 4.22, 0.506, 0.348),
        (0.443, 4.30, 0.510, 0.352),
        (0.514, 4.47, 0.433, 0.344),
        (0.515, 4.27, 0.449, 0.355),
        (0.467, 4.56, 0.391, 0.324),
        (0.641, 4.01, 0.552, 0.406),
        (0.648, 3.76, 0.546, 0.420),
        (0.650, 3.82, 0.559, 0.419),
        (0.504, 4.03, 0.507, 0.375),
        (0.496, 4.17, 0.523, 0.370),
        (0.659, 4.00, 0.559, 0.410),
        (0.518, 4.34, 0.475, 0.358),
        (0.650, 3.94, 0.556, 0.412),
    ];

    #[test]
    fn composite_reproduces_reference_rows() {
        for (u, m, c, want) in REFERENCE_ROWS {
            let got = s_mtl(u, m, c).unwrap();
            assert!((got - want).abs() <= 0.0015, "({u}, {m}, {c}) -> {got}, want {want}");
        }
    }

    #[test]
    fn composite_rejects_nonpositive() {
        assert!(s_mtl(0.0, 4.0, 0.5).is_err());
        assert!(s_mtl(0.5, 0.0, 0.5).is_err());
        assert!(s_mtl(0.5, 4.0, -0.1).is_err());
        assert!(s_mtl(f64::NAN, 4.0, 0.5).is_err());
    }

    fn pred(id: &str, age: f64, emo: Vec<f64>, probs: Vec<f64>) -> PredictionSet {
        PredictionSet::new(id, Some(age), Some(emo), Some(probs)).unwrap()
    }

    fn label(age: f64, emo: Vec<f64>, country: usize) -> LabelSet {
        LabelSet {
            emotion: emo,
            age,
            country,
        }
    }

    #[test]
    fn evaluate_perfect_predictions_flags_undefined_composite() {
        let labels: HashMap<_, _> = [
            ("a".to_string(), label(20.0, vec![0.1, 0.9], 0)),
            ("b".to_string(), label(40.0, vec![0.7, 0.2], 1)),
        ]
        .into();
        let preds = vec![
            pred("a", 20.0, vec![0.1, 0.9], vec![1.0, 0.0]),
            pred("b", 40.0, vec![0.7, 0.2], vec![0.0, 1.0]),
        ];
        let r = evaluate(&preds, &labels, 2).unwrap();
        assert_eq!((r.uar, r.mae, r.ccc_mean), (Some(1.0), Some(0.0), Some(1.0)));
        assert!(r.s_mtl.is_err());
        assert!(r.to_key_values().contains("s_mtl=undefined"));
    }

    #[test]
    fn evaluate_composes_base_metrics_and_ignores_order() {
        let labels: HashMap<_, _> = [
            ("a".to_string(), label(20.0, vec![0.1, 0.9], 0)),
            ("b".to_string(), label(40.0, vec![0.7, 0.2], 1)),
        ]
        .into();
        let pa = pred("a", 25.0, vec![0.2, 0.6], vec![0.7, 0.3]);
        let pb = pred("b", 37.0, vec![0.5, 0.3], vec![0.6, 0.4]);
        let r = evaluate(&[pa.clone(), pb.clone()], &labels, 2).unwrap();
        let r2 = evaluate(&[pb, pa], &labels, 2).unwrap();
        assert_eq!(r, r2);
        let c0 = ccc(&[0.2, 0.5], &[0.1, 0.7]).unwrap();
        let c1 = ccc(&[0.6, 0.3], &[0.9, 0.2]).unwrap();
        assert_eq!(r.uar, Some(0.5));
        assert_eq!(r.mae, Some(4.0));
        assert!((r.ccc_mean.unwrap() - (c0 + c1) / 2.0).abs() < 1e-15);
        let want = s_mtl(0.5, 4.0, (c0 + c1) / 2.0).unwrap();
        assert!((r.s_mtl.clone().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn evaluate_errors() {
        let labels: HashMap<_, _> = [("a".to_string(), label(20.0, vec![0.1], 0))].into();
        let p = pred("zz", 1.0, vec![0.1], vec![0.5, 0.5]);
        assert!(matches!(evaluate(&[p], &labels, 2), Err(MetricError::UnknownId(_))));
        assert!(evaluate(&[], &labels, 2).is_err());
        let a = pred("a", 1.0, vec![0.1], vec![0.5, 0.5]);
        assert!(matches!(evaluate(&[a.clone(), a], &labels, 2), Err(MetricError::DuplicateId(_))));
    }

    #[test]
    fn evaluate_partial_tasks() {
        let labels: HashMap<_, _> = [
            ("a".to_string(), label(20.0, vec![0.1], 0)),
            ("b".to_string(), label(30.0, vec![0.5], 1)),
        ]
        .into();
        let preds: Vec<_> = ["a", "b"]
            .iter()
            .map(|id| PredictionSet::new(id.to_string(), Some(22.0), None, None).unwrap())
            .collect();
        let r = evaluate(&preds, &labels, 2).unwrap();
        assert_eq!(r.mae, Some(5.0));
        assert_eq!((r.uar, r.ccc_mean), (None, None));
        assert!(r.s_mtl.is_err());
    }

    fn paired(min: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (min..40usize).prop_flat_map(|n| {
            (
                prop::collection::vec(-50.0..50.0f64, n),
                prop::collection::vec(-50.0..50.0f64, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn ccc_symmetric_bounded_translation_invariant((x, y) in paired(2), c in -20.0..20.0f64) {
            let a = ccc(&x, &y).unwrap();
            prop_assert!((a - ccc(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
            prop_assert!((a - ccc(&xs, &ys).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn mae_translation((x, _) in paired(1), c in 0.0..20.0f64) {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            prop_assert!((mae(&shifted, &x).unwrap() - c).abs() < 1e-9);
        }

        #[test]
        fn uar_in_unit_interval_and_relabel_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let v = uar(&p, &g, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let pp: Vec<_> = p.iter().map(|&c| perm[c]).collect();
            let gp: Vec<_> = g.iter().map(|&c| perm[c]).collect();
            prop_assert!((v - uar(&pp, &gp, 4).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn composite_bounded_and_monotone(
            u in 0.01..1.0f64, m in 0.1..20.0f64, c in 0.01..1.0f64, d in 0.001..0.1f64,
        ) {
            let s = s_mtl(u, m, c).unwrap();
            let lo = u.min(c).min(1.0 / m);
            let hi = u.max(c).max(1.0 / m);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
            prop_assert!(s <= 3.0 * lo + 1e-12);
            prop_assert!(s_mtl(u + d, m, c).unwrap() > s);
            prop_assert!(s_mtl(u, m, c + d).unwrap() > s);
            prop_assert!(s_mtl(u, m + d, c).unwrap() < s);
        }
    }
}
