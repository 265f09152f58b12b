//! Weighted late fusion of per-model predictions and validation grid
//! search over the fusion weights.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::data::{LabelSet, PredictionSet, Task};
use crate::metrics::{ccc, evaluate, mae, uar, EvalReport, MetricError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no models to fuse")]
    NoModels,
    #[error("{task} weights: expected {expected} models, got {got}")]
    WeightCount {
        task: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{task} weights must be finite, nonnegative and not all zero")]
    BadWeights { task: &'static str },
    #[error("model {model} does not cover the same utterance ids as model 0")]
    IdMismatch { model: usize },
    #[error("model {model} has positive {task} weight but no {task} predictions")]
    MissingTask { model: usize, task: &'static str },
    #[error("grid step {0} does not divide 1")]
    BadStep(f64),
    #[error("grid search supports at most 3 models, got {0}")]
    TooManyModels(usize),
    #[error("invalid fused prediction: {0}")]
    Prediction(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Scores within this relative distance count as tied during search.
const TIE_TOL: f64 = 1e-12;

/// Per-task convex weights over `M` models.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub age: Vec<f64>,
    pub emotion: Vec<f64>,
    pub country: Vec<f64>,
}

fn normalized(task: &'static str, w: Vec<f64>) -> Result<Vec<f64>, FusionError> {
    let total: f64 = w.iter().sum();
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || !(total > 0.0) {
        return Err(FusionError::BadWeights { task });
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

impl FusionWeights {
    /// Normalizes each task's weights to sum to one.
    pub fn new(age: Vec<f64>, emotion: Vec<f64>, country: Vec<f64>) -> Result<Self, FusionError> {
        Ok(Self {
            age: normalized("age", age)?,
            emotion: normalized("emotion", emotion)?,
            country: normalized("country", country)?,
        })
    }

    pub fn uniform(m: usize) -> Result<Self, FusionError> {
        if m == 0 {
            return Err(FusionError::NoModels);
        }
        let w = vec![1.0; m];
        Self::new(w.clone(), w.clone(), w)
    }

    pub fn for_task(&self, task: Task) -> &[f64] {
        match task {
            Task::Age => &self.age,
            Task::Emotion => &self.emotion,
            Task::Country => &self.country,
        }
    }

    fn for_task_mut(&mut self, task: Task) -> &mut Vec<f64> {
        match task {
            Task::Age => &mut self.age,
            Task::Emotion => &mut self.emotion,
            Task::Country => &mut self.country,
        }
    }
}

/// Rows of every model reordered to follow model 0's id order.
fn align<'a>(models: &'a [Vec<PredictionSet>]) -> Result<Vec<Vec<&'a PredictionSet>>, FusionError> {
    let first = models.first().ok_or(FusionError::NoModels)?;
    let order: Vec<&str> = first.iter().map(|p| p.id.as_str()).collect();
    let ids: HashSet<&str> = order.iter().copied().collect();
    let mut aligned = Vec::with_capacity(models.len());
    for (m, preds) in models.iter().enumerate() {
        let by_id: HashMap<&str, &PredictionSet> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
        if preds.len() != order.len() || by_id.len() != ids.len() || !by_id.keys().all(|k| ids.contains(k)) {
            return Err(FusionError::IdMismatch { model: m });
        }
        aligned.push(order.iter().map(|id| by_id[id]).collect());
    }
    Ok(aligned)
}

fn task_present(rows: &[&PredictionSet], task: Task) -> bool {
    rows.iter().all(|p| p.has(task))
}

/// Which tasks appear in the fused output; errors when a positively
/// weighted model lacks a task that others provide.
fn fused_tasks(aligned: &[Vec<&PredictionSet>], w: &FusionWeights) -> Result<[bool; 3], FusionError> {
    let mut out = [false; 3];
    for (slot, task) in Task::ALL.into_iter().enumerate() {
        let weights = w.for_task(task);
        let has: Vec<bool> = aligned.iter().map(|rows| task_present(rows, task)).collect();
        if !has.iter().any(|&h| h) {
            continue;
        }
        for (m, (&h, &wt)) in has.iter().zip(weights).enumerate() {
            if !h && wt > 0.0 {
                return Err(FusionError::MissingTask {
                    model: m,
                    task: task.as_str(),
                });
            }
        }
        out[slot] = true;
    }
    Ok(out)
}

/// Weighted combination per utterance. Emotion is clamped to [0, 1];
/// convex weights keep country probabilities on the simplex.
pub fn fuse(models: &[Vec<PredictionSet>], weights: &FusionWeights) -> Result<Vec<PredictionSet>, FusionError> {
    let m = models.len();
    for task in Task::ALL {
        let got = weights.for_task(task).len();
        if got != m {
            return Err(FusionError::WeightCount {
                task: task.as_str(),
                expected: m,
                got,
            });
        }
    }
    let aligned = align(models)?;
    let [has_age, has_emo, has_cty] = fused_tasks(&aligned, weights)?;
    let n = aligned[0].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let rows: Vec<&PredictionSet> = aligned.iter().map(|r| r[i]).collect();
        let age = has_age.then(|| {
            rows.iter()
                .zip(&weights.age)
                .filter(|(_, &w)| w > 0.0)
                .map(|(p, &w)| w * p.age.unwrap())
                .sum::<f64>()
        });
        let emotion = has_emo.then(|| weighted_vec(&rows, &weights.emotion, |p| p.emotion.as_deref()));
        let country = has_cty.then(|| weighted_vec(&rows, &weights.country, |p| p.country_probs.as_deref()));
        let fused = PredictionSet::new(rows[0].id.clone(), age, emotion, country)
            .map_err(|e| FusionError::Prediction(e.to_string()))?;
        out.push(fused);
    }
    Ok(out)
}

fn weighted_vec(
    rows: &[&PredictionSet],
    weights: &[f64],
    get: impl Fn(&PredictionSet) -> Option<&[f64]>,
) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for (p, &w) in rows.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let v = get(p).expect("presence checked");
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    acc
}

/// All weight vectors over `m` models on the simplex grid with `steps`
/// increments, as integer counts summing to `steps`.
fn simplex_grid(m: usize, steps: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if m == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=left).rev() {
            prefix.push(k);
            rec(m - 1, left - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, steps, &mut Vec::with_capacity(m), &mut out);
    out
}

/// Task metric oriented so larger is better.
fn task_score(
    task: Task,
    fused: &[PredictionSet],
    labels: &HashMap<String, LabelSet>,
    n_countries: usize,
) -> Result<f64, FusionError> {
    let gold = |p: &PredictionSet| -> Result<&LabelSet, FusionError> {
        labels
            .get(&p.id)
            .ok_or_else(|| MetricError::UnknownId(p.id.clone()).into())
    };
    Ok(match task {
        Task::Age => {
            let (mut p, mut g) = (Vec::new(), Vec::new());
            for f in fused {
                p.push(f.age.unwrap());
                g.push(gold(f)?.age);
            }
            -mae(&p, &g)?
        }
        Task::Country => {
            let (mut p, mut g) = (Vec::new(), Vec::new());
            for f in fused {
                p.push(f.country_argmax().unwrap());
                g.push(gold(f)?.country);
            }
            uar(&p, &g, n_countries)?
        }
        Task::Emotion => {
            let e = fused[0].emotion.as_ref().unwrap().len();
            let mut total = 0.0;
            for d in 0..e {
                let (mut p, mut g) = (Vec::new(), Vec::new());
                for f in fused {
                    p.push(f.emotion.as_ref().unwrap()[d]);
                    g.push(gold(f)?.emotion[d]);
                }
                total += ccc(&p, &g)?;
            }
            total / e as f64
        }
    })
}

/// Exhaustive per-task search over simplex grids of resolution `step`,
/// maximizing the validation composite score.
///
/// Each task metric depends only on that task's weights and the
/// composite is monotone in every metric, so optimizing tasks
/// separately finds the joint optimum. Ties prefer the more uniform
/// vector, then the lexicographically larger one.
pub fn grid_search_weights(
    models: &[Vec<PredictionSet>],
    labels: &HashMap<String, LabelSet>,
    n_countries: usize,
    step: f64,
) -> Result<(FusionWeights, EvalReport), FusionError> {
    let m = models.len();
    if m == 0 {
        return Err(FusionError::NoModels);
    }
    if m > 3 {
        return Err(FusionError::TooManyModels(m));
    }
    let steps = (1.0 / step).round();
    if !(step > 0.0) || steps < 1.0 || (steps * step - 1.0).abs() > 1e-9 {
        return Err(FusionError::BadStep(step));
    }
    let steps = steps as usize;
    if models[0].is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 }.into());
    }
    let aligned = align(models)?;
    let grid = simplex_grid(m, steps);
    let mut best = FusionWeights::uniform(m)?;

    for task in Task::ALL {
        let has: Vec<bool> = aligned.iter().map(|rows| task_present(rows, task)).collect();
        if !has.iter().any(|&h| h) {
            continue;
        }
        // (score, -sum of squared counts, counts)
        let mut winner: Option<(f64, i64, &Vec<usize>)> = None;
        for counts in &grid {
            if counts.iter().zip(&has).any(|(&c, &h)| c > 0 && !h) {
                continue;
            }
            let mut w = FusionWeights::uniform(m)?;
            *w.for_task_mut(task) = counts.iter().map(|&c| c as f64 / steps as f64).collect();
            let single = single_task_models(models, task);
            let fused = fuse(&single, &w)?;
            let score = task_score(task, &fused, labels, n_countries)?;
            let spread = -(counts.iter().map(|&c| (c * c) as i64).sum::<i64>());
            let better = match &winner {
                None => true,
                Some((s, u, c)) => {
                    let tie = (score - *s).abs() <= TIE_TOL * s.abs().max(1.0);
                    (!tie && score > *s) || (tie && (spread > *u || (spread == *u && counts > *c)))
                }
            };
            if better {
                winner = Some((score, spread, counts));
            }
        }
        let (_, _, counts) = winner.expect("a model provides the task");
        *best.for_task_mut(task) = counts.iter().map(|&c| c as f64 / steps as f64).collect();
    }

    let fused = fuse(models, &best)?;
    let report = evaluate(&fused, labels, n_countries)?;
    Ok((best, report))
}

/// Copies of the model predictions carrying only `task`.
fn single_task_models(models: &[Vec<PredictionSet>], task: Task) -> Vec<Vec<PredictionSet>> {
    models
        .iter()
        .map(|preds| {
            preds
                .iter()
                .map(|p| PredictionSet {
                    id: p.id.clone(),
                    age: if task == Task::Age { p.age } else { None },
                    emotion: if task == Task::Emotion { p.emotion.clone() } else { None },
                    country_probs: if task == Task::Country {
                        p.country_probs.clone()
                    } else {
                        None
                    },
                })
                .collect()
        })
        .collect()
}
