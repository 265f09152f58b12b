use serde::{Deserialize, Serialize};

use super::layers::{log_sum_exp, sigmoid, softmax, softplus};
use super::ModelError;
use crate::data::{LabelSet, PredictionSet, TaskSet};
use crate::scalar::Real;

/// Per-task loss multipliers for age, emotion and country.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub age: f64,
    pub emotion: f64,
    pub country: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            age: 1.0,
            emotion: 80.0,
            country: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        if [self.age, self.emotion, self.country]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(ModelError::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted task losses and their weighted total. Disabled tasks are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown<T> {
    pub age: T,
    pub emotion: T,
    pub country: T,
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn zero() -> Self {
        Self {
            age: T::zero(),
            emotion: T::zero(),
            country: T::zero(),
            total: T::zero(),
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &Self, s: T) {
        self.age += other.age * s;
        self.emotion += other.emotion * s;
        self.country += other.country * s;
        self.total += other.total * s;
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Loss on final predictions: absolute age error, mean absolute emotion
/// error, and negative log-likelihood of the true country.
pub fn multitask_loss(
    pred: &PredictionSet,
    label: &LabelSet,
    tasks: TaskSet,
    weights: &LossWeights,
) -> Result<LossBreakdown<f64>, ModelError> {
    let missing = |task: &'static str| ModelError::MissingLabel {
        id: pred.id.clone(),
        task,
    };
    let mut out = LossBreakdown::zero();
    if tasks.age {
        let a = pred.age.ok_or_else(|| missing("age"))?;
        out.age = (a - label.age).abs();
    }
    if tasks.emotion {
        let e = pred.emotion.as_ref().ok_or_else(|| missing("emotion"))?;
        if e.len() != label.emotion.len() || e.is_empty() {
            return Err(missing("emotion"));
        }
        out.emotion = e.iter().zip(&label.emotion).map(|(p, g)| (p - g).abs()).sum::<f64>() / e.len() as f64;
    }
    if tasks.country {
        let p = pred.country_probs.as_ref().ok_or_else(|| missing("country"))?;
        let prob = *p.get(label.country).ok_or_else(|| missing("country"))?;
        out.country = -prob.max(f64::MIN_POSITIVE).ln();
    }
    out.total = weights.age * out.age + weights.emotion * out.emotion + weights.country * out.country;
    Ok(out)
}

/// Loss and its gradient with respect to the raw head outputs (before
/// softplus, logistic and softmax).
pub(crate) struct RawLoss<T> {
    pub loss: LossBreakdown<T>,
    pub d_age: Option<T>,
    pub d_emotion: Option<Vec<T>>,
    pub d_country: Option<Vec<T>>,
}

pub(crate) fn raw_loss<T: Real>(
    raw: &super::RawOutputs<T>,
    label: &LabelSet,
    weights: &LossWeights,
    scale: T,
) -> RawLoss<T> {
    let mut loss = LossBreakdown::zero();
    let mut out = RawLoss {
        loss,
        d_age: None,
        d_emotion: None,
        d_country: None,
    };
    if let Some(o) = raw.age {
        let diff = softplus(o) - T::lit(label.age);
        loss.age = diff.abs();
        out.d_age = Some(T::lit(weights.age) * scale * sign(diff) * sigmoid(o));
    }
    if let Some(logits) = &raw.emotion {
        let n = T::from_usize_lossy(logits.len());
        let mut total = T::zero();
        let mut grads = Vec::with_capacity(logits.len());
        for (&o, &g) in logits.iter().zip(&label.emotion) {
            let e = sigmoid(o);
            let diff = e - T::lit(g);
            total += diff.abs();
            grads.push(T::lit(weights.emotion) * scale * sign(diff) * e * (T::one() - e) / n);
        }
        loss.emotion = total / n;
        out.d_emotion = Some(grads);
    }
    if let Some(logits) = &raw.country {
        loss.country = log_sum_exp(logits) - logits[label.country];
        let mut p = softmax(logits);
        p[label.country] -= T::one();
        out.d_country = Some(p.into_iter().map(|v| v * T::lit(weights.country) * scale).collect());
    }
    loss.total = T::lit(weights.age) * loss.age
        + T::lit(weights.emotion) * loss.emotion
        + T::lit(weights.country) * loss.country;
    out.loss = loss;
    out
}
