#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalburst::data::{LabelSet, Task, TaskSet};
use vocalburst::features::{FeatureKind, FeatureSequence};
use vocalburst::model::{LossWeights, Model, ModelConfig, StrfLayerConfig};

/// `||a - n|| / max(||a||, ||n||)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}

/// Central differences of `f` with respect to `params[idx]`.
pub fn central_diff(params: &[f64], idx: &[usize], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    idx.iter()
        .map(|&i| {
            let keep = p[i];
            p[i] = keep + eps;
            let up = f(&p);
            p[i] = keep - eps;
            let down = f(&p);
            p[i] = keep;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn random_seq(frames: usize, dim: usize, seed: u64) -> FeatureSequence<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    FeatureSequence::new(FeatureKind::LogMel, 1, frames, dim, 100.0, data).unwrap()
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn toy_config(strf: bool) -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        conv_channels: 3,
        hidden_dim: 6,
        attn_dim: 4,
        head_hidden: 5,
        tasks: TaskSet::ALL,
        n_emotions: 3,
        n_countries: 4,
        seed: 5,
        strf: strf.then_some(StrfLayerConfig {
            n_filters: 2,
            time_taps: 5,
            freq_taps: 3,
            hop_seconds: 0.01,
        }),
        ..ModelConfig::default()
    }
}

pub fn toy_labels() -> [LabelSet; 2] {
    [
        LabelSet {
            emotion: vec![0.15, 0.55, 0.8],
            age: 27.0,
            country: 1,
        },
        LabelSet {
            emotion: vec![0.6, 0.05, 0.35],
            age: 44.0,
            country: 3,
        },
    ]
}

/// Indices of every parameter whose slot name satisfies `pick`.
pub fn slot_indices(model: &Model<f64>, pick: impl Fn(&str) -> bool) -> Vec<usize> {
    model
        .registry
        .slots()
        .iter()
        .filter(|s| pick(&s.name))
        .flat_map(|s| s.range())
        .collect()
}

/// Relative error of the encoder gradient of a random linear probe of
/// the hidden sequence, over the encoder parameters selected by `pick`.
pub fn encoder_check(model: &Model<f64>, x: &FeatureSequence<f64>, pick: impl Fn(&str) -> bool) -> f64 {
    let (h, cache) = model.encoder_forward(x).unwrap();
    let probe = random_vec(h.len(), 77);
    let mut grad = vec![0.0; model.params.len()];
    model.encoder_backward(&cache, &probe, &mut grad).unwrap();
    let idx = slot_indices(model, pick);
    let numeric = central_diff(&model.params, &idx, 1e-6, |p| {
        let mut m = model.clone();
        m.params.copy_from_slice(p);
        m.encoder_forward(x).unwrap().0.iter().zip(&probe).map(|(a, b)| a * b).sum()
    });
    let analytic: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    rel_err(&analytic, &numeric)
}

/// Pooling block: linear probe of the pooled vector.
pub fn pooling_check(model: &Model<f64>, x: &FeatureSequence<f64>, task: Task) -> f64 {
    let (h, _) = model.encoder_forward(x).unwrap();
    let (z, cache) = model.pool_forward(task, &h);
    let probe = random_vec(z.len(), 78);
    let mut grad = vec![0.0; model.params.len()];
    let mut dh = vec![0.0; h.len()];
    model.pool_backward(task, &h, &cache, &probe, &mut grad, &mut dh);
    let prefix = format!("{}.attn", task.as_str());
    let idx = slot_indices(model, |n| n.starts_with(&prefix));
    let numeric = central_diff(&model.params, &idx, 1e-6, |p| {
        let mut m = model.clone();
        m.params.copy_from_slice(p);
        m.pool_forward(task, &h).0.iter().zip(&probe).map(|(a, b)| a * b).sum()
    });
    let analytic: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    rel_err(&analytic, &numeric)
}

/// Head block: linear probe of the raw head output.
pub fn head_check(model: &Model<f64>, task: Task) -> f64 {
    let z = random_vec(model.config.hidden_dim, 79);
    let (o, cache) = model.head_forward(task, &z);
    let probe = random_vec(o.len(), 80);
    let mut grad = vec![0.0; model.params.len()];
    model.head_backward(task, &z, &cache, &probe, &mut grad);
    let prefix = format!("{}.fc", task.as_str());
    let idx = slot_indices(model, |n| n.starts_with(&prefix));
    let numeric = central_diff(&model.params, &idx, 1e-6, |p| {
        let mut m = model.clone();
        m.params.copy_from_slice(p);
        m.head_forward(task, &z).0.iter().zip(&probe).map(|(a, b)| a * b).sum()
    });
    let analytic: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    rel_err(&analytic, &numeric)
}

/// Full weighted multitask loss on a two-utterance batch, every
/// parameter.
pub fn full_graph_check(model: &Model<f64>, xs: &[FeatureSequence<f64>; 2]) -> f64 {
    let labels = toy_labels();
    let batch: Vec<_> = xs.iter().zip(&labels).collect();
    let w = LossWeights::default();
    let (_, grad) = model.loss_and_grad(&batch, &w).unwrap();
    let idx: Vec<usize> = (0..model.params.len()).collect();
    let numeric = central_diff(&model.params, &idx, 1e-6, |p| {
        let mut m = model.clone();
        m.params.copy_from_slice(p);
        m.loss(&batch, &w).unwrap().total
    });
    rel_err(&grad, &numeric)
}
