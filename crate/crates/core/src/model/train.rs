use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{LossBreakdown, LossWeights};
use super::net::{Model, ModelConfig};
use super::ModelError;
use crate::data::LabelSet;
use crate::features::FeatureSequence;
use crate::metrics::{evaluate, EvalReport};
use crate::scalar::Real;

/// Stream reserved for batch shuffling, disjoint from parameter init.
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Start the age head at the mean training age.
    pub age_prior_from_data: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_weights: LossWeights::default(),
            seed: 0,
            age_prior_from_data: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.loss_weights.validate()?;
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ModelError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr: T::lit(cfg.lr),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            eps: T::lit(cfg.eps),
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One labeled utterance.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub features: FeatureSequence<T>,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub last_step: usize,
    pub mean_train_loss: f64,
    pub val: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl<T> TrainOutcome<T> {
    /// Delimited per-step log: `step,l_age,l_emo,l_country,total`.
    pub fn step_log_text(&self) -> String {
        let mut out = String::from("step,l_age,l_emo,l_country,total\n");
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(out, "{},{},{},{},{}", s.step, l.age, l.emotion, l.country, l.total);
        }
        out
    }

    /// Per-epoch summary with validation metrics when available.
    pub fn epoch_log_text(&self) -> String {
        let mut out = String::from("epoch,last_step,train_loss,val_uar,val_mae,val_ccc,val_s_mtl\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for e in &self.epochs {
            let (u, m, c, s) = match &e.val {
                Some(r) => (r.uar, r.mae, r.ccc_mean, r.s_mtl.clone().ok()),
                None => (None, None, None, None),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.last_step,
                e.mean_train_loss,
                f(u),
                f(m),
                f(c),
                f(s)
            );
        }
        out
    }
}

fn to_f64<T: Real>(l: &LossBreakdown<T>) -> LossBreakdown<f64> {
    LossBreakdown {
        age: l.age.as_f64(),
        emotion: l.emotion.as_f64(),
        country: l.country.as_f64(),
        total: l.total.as_f64(),
    }
}

pub fn validation_report<T: Real>(model: &Model<T>, val: &[Example<T>]) -> Result<Option<EvalReport>, ModelError> {
    if val.is_empty() {
        return Ok(None);
    }
    let preds = val
        .iter()
        .map(|e| model.predict(&e.id, &e.features))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: HashMap<String, LabelSet> = val.iter().map(|e| (e.id.clone(), e.labels.clone())).collect();
    Ok(evaluate(&preds, &labels, model.config.n_countries).ok())
}

/// Minibatch Adam training for `cfg.steps` updates over reshuffled epochs.
pub fn train<T: Real>(
    mut model_config: ModelConfig,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, ModelError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    if cfg.age_prior_from_data && model_config.tasks.age {
        let mean = train_set.iter().map(|e| e.labels.age).sum::<f64>() / train_set.len() as f64;
        model_config.age_prior = mean;
    }
    let mut model = Model::<T>::init(model_config)?;
    let mut adam = Adam::new(model.params.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut epochs = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.steps {
                break;
            }
            let batch: Vec<(&FeatureSequence<T>, &LabelSet)> =
                chunk.iter().map(|&i| (&train_set[i].features, &train_set[i].labels)).collect();
            let (loss, grad) = model.loss_and_grad(&batch, &cfg.loss_weights)?;
            if !loss.total.is_finite() {
                let tensor = model
                    .first_non_finite(&model.params, "parameter")
                    .or_else(|| model.first_non_finite(&grad, "gradient"))
                    .unwrap_or_else(|| format!("loss at step {}", step + 1));
                return Err(ModelError::NonFinite { tensor });
            }
            if let Some(tensor) = model.first_non_finite(&grad, "gradient") {
                return Err(ModelError::NonFinite { tensor });
            }
            adam.step(&mut model.params, &grad);
            step += 1;
            let l = to_f64(&loss);
            epoch_total += l.total;
            epoch_steps += 1;
            steps.push(StepLog { step, loss: l });
        }
        epoch += 1;
        epochs.push(EpochLog {
            epoch,
            last_step: step,
            mean_train_loss: epoch_total / epoch_steps.max(1) as f64,
            val: validation_report(&model, val_set)?,
        });
    }
    Ok(TrainOutcome { model, steps, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::<f64>::new(2, &cfg);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = TrainConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut adam = Adam::<f64>::new(1, &cfg);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn single_and_double_precision_agree() {
        use crate::data::TaskSet;
        use crate::features::{FeatureKind, FeatureSequence};
        let cfg = ModelConfig {
            input_dim: 6,
            conv_channels: 2,
            hidden_dim: 5,
            attn_dim: 3,
            head_hidden: 4,
            tasks: TaskSet::ALL,
            n_emotions: 2,
            n_countries: 2,
            ..Default::default()
        };
        let set: Vec<Example<f64>> = (0..4)
            .map(|i| Example {
                id: format!("u{i}"),
                features: FeatureSequence::new(
                    FeatureKind::LogMel,
                    1,
                    9,
                    6,
                    100.0,
                    (0..54).map(|j| ((i * 54 + j) as f64 * 0.61).sin()).collect(),
                )
                .unwrap(),
                labels: LabelSet {
                    emotion: vec![0.2 * i as f64, 0.5],
                    age: 25.0 + 5.0 * i as f64,
                    country: i % 2,
                },
            })
            .collect();
        let set32: Vec<Example<f32>> = set
            .iter()
            .map(|e| Example {
                id: e.id.clone(),
                features: e.features.cast(),
                labels: e.labels.clone(),
            })
            .collect();
        let tc = TrainConfig {
            steps: 10,
            batch_size: 2,
            ..Default::default()
        };
        let a = train(cfg.clone(), &set, &[], &tc).unwrap();
        let b = train(cfg, &set32, &[], &tc).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert!((x.loss.total - y.loss.total).abs() < 1e-3 * x.loss.total.max(1.0));
        }
    }
}
