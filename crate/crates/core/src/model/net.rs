use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    attn_pool_backward, attn_pool_forward, conv_backward, conv_forward, linear_backward, linear_forward,
    relu_inplace, relu_mask, sigmoid, softmax, softplus, softplus_inv, ConvGeom, PoolCache,
};
use super::layout::Registry;
use super::loss::{raw_loss, LossBreakdown, LossWeights};
use super::ModelError;
use crate::data::{LabelSet, PredictionSet, Task, TaskSet};
use crate::features::strf::{stmf, strf_param_grad, StrfBank};
use crate::features::{FeatureKind, FeatureSequence};
use crate::scalar::Real;

/// Learnable Gabor frontend attached in front of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrfLayerConfig {
    pub n_filters: usize,
    pub time_taps: usize,
    pub freq_taps: usize,
    pub hop_seconds: f64,
}

impl Default for StrfLayerConfig {
    fn default() -> Self {
        use crate::features::strf::*;
        Self {
            n_filters: DEFAULT_FILTERS,
            time_taps: DEFAULT_TIME_TAPS,
            freq_taps: DEFAULT_FREQ_TAPS,
            hop_seconds: DEFAULT_HOP_SECONDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension per frame (mel channels or embedding size).
    pub input_dim: usize,
    /// Channels of the stored features: 1 for log-mel or embeddings, 2N
    /// for precomputed modulation features.
    pub input_channels: usize,
    /// When set, single-channel log-mel input passes through a learnable
    /// STRF layer whose 2N outputs feed the encoder.
    pub strf: Option<StrfLayerConfig>,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub tasks: TaskSet,
    pub n_emotions: usize,
    pub n_countries: usize,
    /// Initial age prediction in years.
    pub age_prior: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            input_channels: 1,
            strf: None,
            conv_channels: 8,
            conv_kernel: 3,
            hidden_dim: 64,
            attn_dim: 32,
            head_hidden: 32,
            tasks: TaskSet::ALL,
            n_emotions: 10,
            n_countries: 4,
            age_prior: 30.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.tasks.is_empty() {
            return bad("at least one task must be enabled".into());
        }
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("input_channels", self.input_channels),
            ("conv_channels", self.conv_channels),
            ("hidden_dim", self.hidden_dim),
            ("attn_dim", self.attn_dim),
            ("head_hidden", self.head_hidden),
            ("n_emotions", self.n_emotions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_countries < 2 {
            return bad("n_countries must be at least 2".into());
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !(self.age_prior > 0.0 && self.age_prior.is_finite()) {
            return bad(format!("age_prior {} must be positive", self.age_prior));
        }
        if let Some(s) = &self.strf {
            if self.input_channels != 1 {
                return bad("the STRF layer takes single-channel log-mel input".into());
            }
            if s.n_filters == 0 || s.time_taps < 2 || s.freq_taps < 2 || !(s.hop_seconds > 0.0) {
                return bad(format!("invalid STRF layer {s:?}"));
            }
        }
        Ok(())
    }

    /// Channels seen by the first convolution.
    pub fn encoder_channels(&self) -> usize {
        self.strf.map_or(self.input_channels, |s| 2 * s.n_filters)
    }

    /// Feature width after both convolutions.
    pub fn reduced_dim(&self) -> usize {
        self.input_dim.div_ceil(4)
    }

    pub fn output_dim(&self, task: Task) -> usize {
        match task {
            Task::Age => 1,
            Task::Emotion => self.n_emotions,
            Task::Country => self.n_countries,
        }
    }

    pub fn frames_out(frames: usize) -> usize {
        frames.div_ceil(2).div_ceil(2)
    }
}

const ENCODER_BLOCKS: [&str; 8] = [
    "strf.rates",
    "strf.scales",
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "proj.weight",
    "proj.bias",
];
const HEAD_BLOCKS: [&str; 6] = ["attn.w", "attn.v", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

/// RNG stream for a block, fixed by its position in the full (all tasks,
/// STRF attached) layout so initial values never depend on which other
/// blocks exist.
fn stream_id(name: &str) -> u64 {
    if let Some(i) = ENCODER_BLOCKS.iter().position(|b| *b == name) {
        return i as u64;
    }
    let (task, block) = name.split_once('.').expect("qualified name");
    let t = Task::ALL.iter().position(|x| x.as_str() == task).expect("task prefix");
    let b = HEAD_BLOCKS.iter().position(|x| *x == block).expect("head block");
    (ENCODER_BLOCKS.len() + t * HEAD_BLOCKS.len() + b) as u64
}

fn build_registry(c: &ModelConfig) -> Registry {
    let mut r = Registry::default();
    if let Some(s) = &c.strf {
        r.push("strf.rates", vec![s.n_filters]);
        r.push("strf.scales", vec![s.n_filters]);
    }
    let (ch, k) = (c.conv_channels, c.conv_kernel);
    r.push("conv1.weight", vec![ch, c.encoder_channels(), k, k]);
    r.push("conv1.bias", vec![ch]);
    r.push("conv2.weight", vec![ch, ch, k, k]);
    r.push("conv2.bias", vec![ch]);
    r.push("proj.weight", vec![c.hidden_dim, ch * c.reduced_dim()]);
    r.push("proj.bias", vec![c.hidden_dim]);
    for task in c.tasks.iter() {
        let t = task.as_str();
        r.push(format!("{t}.attn.w"), vec![c.attn_dim, c.hidden_dim]);
        r.push(format!("{t}.attn.v"), vec![c.attn_dim]);
        r.push(format!("{t}.fc1.weight"), vec![c.head_hidden, c.hidden_dim]);
        r.push(format!("{t}.fc1.bias"), vec![c.head_hidden]);
        r.push(format!("{t}.fc2.weight"), vec![c.output_dim(task), c.head_hidden]);
        r.push(format!("{t}.fc2.bias"), vec![c.output_dim(task)]);
    }
    r
}

/// Raw head outputs before the output nonlinearities.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs<T> {
    pub age: Option<T>,
    pub emotion: Option<Vec<T>>,
    pub country: Option<Vec<T>>,
}

impl<T: Real> RawOutputs<T> {
    pub fn to_prediction(&self, id: &str) -> PredictionSet {
        PredictionSet {
            id: id.to_string(),
            age: self.age.map(|o| softplus(o).as_f64()),
            emotion: self
                .emotion
                .as_ref()
                .map(|v| v.iter().map(|&o| sigmoid(o).as_f64()).collect()),
            country_probs: self
                .country
                .as_ref()
                .map(|v| softmax(v).into_iter().map(|p| p.as_f64()).collect()),
        }
    }
}

/// Everything the encoder backward pass needs.
pub struct EncoderCache<T> {
    logmel: Option<FeatureSequence<T>>,
    bank: Option<StrfBank<T>>,
    conv_in: Vec<T>,
    g1: ConvGeom,
    g2: ConvGeom,
    a1: Vec<T>,
    a2: Vec<T>,
    /// Per-frame flattened conv2 output, frames_out x (channels * width).
    flat: Vec<T>,
}

pub struct HeadCache<T> {
    y1: Vec<T>,
}

/// Network definition plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub registry: Registry,
    pub params: Vec<T>,
}

impl<T: Real> Model<T> {
    /// Seeded initialization. Each block draws from its own stream.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let registry = build_registry(&config);
        let mut params = vec![T::zero(); registry.len()];
        for slot in registry.slots() {
            let dst = &mut params[slot.range()];
            let name = slot.name.as_str();
            if name == "strf.rates" || name == "strf.scales" {
                let s = config.strf.expect("strf slots imply config");
                let bank = StrfBank::<T>::log_spaced(s.n_filters, s.time_taps, s.freq_taps, s.hop_seconds)?;
                let src = if name == "strf.rates" { bank.rates } else { bank.scales };
                dst.copy_from_slice(&src);
                continue;
            }
            if name.ends_with("bias") {
                if name == "age.fc2.bias" {
                    dst[0] = T::lit(softplus_inv(config.age_prior));
                }
                continue;
            }
            let fan_in: usize = slot.shape[1..].iter().product();
            // He range ahead of ReLU, unit-variance range elsewhere
            let gain = if name.starts_with("conv") || name.ends_with("fc1.weight") { 6.0 } else { 3.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream_id(name));
            for v in dst.iter_mut() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(Self {
            config,
            registry,
            params,
        })
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.registry
            .range(name)
            .unwrap_or_else(|| panic!("no parameter slot {name}"))
    }

    fn p(&self, name: &str) -> &[T] {
        &self.params[self.range(name)]
    }

    fn head_name(task: Task, block: &str) -> String {
        format!("{}.{block}", task.as_str())
    }

    pub fn strf_bank(&self) -> Option<StrfBank<T>> {
        let s = self.config.strf?;
        Some(
            StrfBank::new(
                self.p("strf.rates").to_vec(),
                self.p("strf.scales").to_vec(),
                s.time_taps,
                s.freq_taps,
                s.hop_seconds,
            )
            .expect("finite parameters"),
        )
    }

    fn check_input(&self, x: &FeatureSequence<T>) -> Result<(), ModelError> {
        let c = &self.config;
        if x.channels != c.input_channels || x.dim != c.input_dim || x.frames == 0 {
            return Err(ModelError::Shape {
                expected: format!("{} x T x {}", c.input_channels, c.input_dim),
                got: format!("{} x {} x {} ({})", x.channels, x.frames, x.dim, x.kind.name()),
            });
        }
        if c.strf.is_some() && x.kind == FeatureKind::Stmf {
            return Err(ModelError::Shape {
                expected: "log-mel input for the STRF layer".into(),
                got: "precomputed modulation features".into(),
            });
        }
        Ok(())
    }

    /// Hidden sequence `ceil(T/4) x d`.
    pub fn encoder_forward(&self, x: &FeatureSequence<T>) -> Result<(Vec<T>, EncoderCache<T>), ModelError> {
        self.check_input(x)?;
        let c = &self.config;
        let (bank, conv_in, logmel) = match self.strf_bank() {
            Some(bank) => {
                let feats = stmf(x, &bank)?;
                (Some(bank), feats.data, Some(x.clone()))
            }
            None => (None, x.data.clone(), None),
        };
        let g1 = ConvGeom {
            c_in: c.encoder_channels(),
            c_out: c.conv_channels,
            k: c.conv_kernel,
            h: x.frames,
            w: x.dim,
        };
        let mut a1 = conv_forward(&g1, &conv_in, self.p("conv1.weight"), self.p("conv1.bias"));
        relu_inplace(&mut a1);
        let g2 = ConvGeom {
            c_in: c.conv_channels,
            c_out: c.conv_channels,
            k: c.conv_kernel,
            h: g1.out_h(),
            w: g1.out_w(),
        };
        let mut a2 = conv_forward(&g2, &a1, self.p("conv2.weight"), self.p("conv2.bias"));
        relu_inplace(&mut a2);
        let (frames, width) = (g2.out_h(), g2.out_w());
        let row = c.conv_channels * width;
        let mut flat = vec![T::zero(); frames * row];
        for ch in 0..c.conv_channels {
            for t in 0..frames {
                let src = &a2[(ch * frames + t) * width..(ch * frames + t + 1) * width];
                flat[t * row + ch * width..t * row + (ch + 1) * width].copy_from_slice(src);
            }
        }
        let (pw, pb) = (self.p("proj.weight"), self.p("proj.bias"));
        let hidden: Vec<T> = flat.chunks_exact(row).flat_map(|f| linear_forward(pw, pb, f)).collect();
        Ok((
            hidden,
            EncoderCache {
                logmel,
                bank,
                conv_in,
                g1,
                g2,
                a1,
                a2,
                flat,
            },
        ))
    }

    /// Accumulates encoder (and STRF) parameter gradients into `grad`.
    pub fn encoder_backward(&self, cache: &EncoderCache<T>, d_hidden: &[T], grad: &mut [T]) -> Result<(), ModelError> {
        let c = &self.config;
        let (frames, width) = (cache.g2.out_h(), cache.g2.out_w());
        let row = c.conv_channels * width;
        let d = c.hidden_dim;
        let mut d_flat = vec![T::zero(); frames * row];
        {
            let (rw, rb) = (self.range("proj.weight"), self.range("proj.bias"));
            let mut dw = vec![T::zero(); rw.len()];
            let mut db = vec![T::zero(); rb.len()];
            for ((f, dh), df) in cache
                .flat
                .chunks_exact(row)
                .zip(d_hidden.chunks_exact(d))
                .zip(d_flat.chunks_exact_mut(row))
            {
                linear_backward(self.p("proj.weight"), f, dh, &mut dw, &mut db, Some(df));
            }
            add_into(&mut grad[rw], &dw);
            add_into(&mut grad[rb], &db);
        }
        let mut d_a2 = vec![T::zero(); cache.a2.len()];
        for ch in 0..c.conv_channels {
            for t in 0..frames {
                d_a2[(ch * frames + t) * width..(ch * frames + t + 1) * width]
                    .copy_from_slice(&d_flat[t * row + ch * width..t * row + (ch + 1) * width]);
            }
        }
        relu_mask(&cache.a2, &mut d_a2);
        let mut d_a1 = vec![T::zero(); cache.a1.len()];
        self.conv_grad("conv2", &cache.g2, &cache.a1, &d_a2, grad, Some(&mut d_a1));
        relu_mask(&cache.a1, &mut d_a1);
        match (&cache.bank, &cache.logmel) {
            (Some(bank), Some(lm)) => {
                let mut d_in = vec![T::zero(); cache.conv_in.len()];
                self.conv_grad("conv1", &cache.g1, &cache.conv_in, &d_a1, grad, Some(&mut d_in));
                let (dr, ds) = strf_param_grad(lm, bank, &d_in)?;
                add_into(&mut grad[self.range("strf.rates")], &dr);
                add_into(&mut grad[self.range("strf.scales")], &ds);
            }
            _ => self.conv_grad("conv1", &cache.g1, &cache.conv_in, &d_a1, grad, None),
        }
        Ok(())
    }

    fn conv_grad(&self, layer: &str, g: &ConvGeom, x: &[T], d_out: &[T], grad: &mut [T], d_x: Option<&mut [T]>) {
        let rw = self.range(&format!("{layer}.weight"));
        let rb = self.range(&format!("{layer}.bias"));
        let mut dw = vec![T::zero(); rw.len()];
        let mut db = vec![T::zero(); rb.len()];
        conv_backward(g, x, &self.params[rw.clone()], d_out, &mut dw, &mut db, d_x);
        add_into(&mut grad[rw], &dw);
        add_into(&mut grad[rb], &db);
    }

    pub fn pool_forward(&self, task: Task, hidden: &[T]) -> (Vec<T>, PoolCache<T>) {
        attn_pool_forward(
            hidden,
            self.config.hidden_dim,
            self.p(&Self::head_name(task, "attn.w")),
            self.p(&Self::head_name(task, "attn.v")),
        )
    }

    /// Accumulates pooling gradients; adds the hidden-sequence gradient
    /// into `d_hidden`.
    pub fn pool_backward(
        &self,
        task: Task,
        hidden: &[T],
        cache: &PoolCache<T>,
        d_z: &[T],
        grad: &mut [T],
        d_hidden: &mut [T],
    ) {
        let (nw, nv) = (Self::head_name(task, "attn.w"), Self::head_name(task, "attn.v"));
        let (rw, rv) = (self.range(&nw), self.range(&nv));
        let mut dw = vec![T::zero(); rw.len()];
        let mut dv = vec![T::zero(); rv.len()];
        attn_pool_backward(
            hidden,
            self.config.hidden_dim,
            self.p(&nw),
            self.p(&nv),
            cache,
            d_z,
            &mut dw,
            &mut dv,
            d_hidden,
        );
        add_into(&mut grad[rw], &dw);
        add_into(&mut grad[rv], &dv);
    }

    /// Two-layer head: `fc2(relu(fc1(z)))`.
    pub fn head_forward(&self, task: Task, z: &[T]) -> (Vec<T>, HeadCache<T>) {
        let mut y1 = linear_forward(
            self.p(&Self::head_name(task, "fc1.weight")),
            self.p(&Self::head_name(task, "fc1.bias")),
            z,
        );
        relu_inplace(&mut y1);
        let out = linear_forward(
            self.p(&Self::head_name(task, "fc2.weight")),
            self.p(&Self::head_name(task, "fc2.bias")),
            &y1,
        );
        (out, HeadCache { y1 })
    }

    /// Accumulates head gradients and returns the pooled-vector gradient.
    pub fn head_backward(&self, task: Task, z: &[T], cache: &HeadCache<T>, d_out: &[T], grad: &mut [T]) -> Vec<T> {
        let mut d_y1 = vec![T::zero(); cache.y1.len()];
        self.linear_grad(task, "fc2", &cache.y1, d_out, grad, Some(&mut d_y1));
        relu_mask(&cache.y1, &mut d_y1);
        let mut d_z = vec![T::zero(); z.len()];
        self.linear_grad(task, "fc1", z, &d_y1, grad, Some(&mut d_z));
        d_z
    }

    fn linear_grad(&self, task: Task, layer: &str, x: &[T], d_y: &[T], grad: &mut [T], d_x: Option<&mut [T]>) {
        let rw = self.range(&Self::head_name(task, &format!("{layer}.weight")));
        let rb = self.range(&Self::head_name(task, &format!("{layer}.bias")));
        let mut dw = vec![T::zero(); rw.len()];
        let mut db = vec![T::zero(); rb.len()];
        linear_backward(&self.params[rw.clone()], x, d_y, &mut dw, &mut db, d_x);
        add_into(&mut grad[rw], &dw);
        add_into(&mut grad[rb], &db);
    }

    pub fn forward(&self, x: &FeatureSequence<T>) -> Result<RawOutputs<T>, ModelError> {
        let (hidden, _) = self.encoder_forward(x)?;
        let mut out = RawOutputs {
            age: None,
            emotion: None,
            country: None,
        };
        for task in self.config.tasks.iter() {
            let (z, _) = self.pool_forward(task, &hidden);
            let (o, _) = self.head_forward(task, &z);
            match task {
                Task::Age => out.age = Some(o[0]),
                Task::Emotion => out.emotion = Some(o),
                Task::Country => out.country = Some(o),
            }
        }
        Ok(out)
    }

    pub fn predict(&self, id: &str, x: &FeatureSequence<T>) -> Result<PredictionSet, ModelError> {
        Ok(self.forward(x)?.to_prediction(id))
    }

    /// Mean batch loss without gradients.
    pub fn loss(&self, batch: &[(&FeatureSequence<T>, &LabelSet)], weights: &LossWeights) -> Result<LossBreakdown<T>, ModelError> {
        let scale = T::one() / T::from_usize_lossy(batch.len().max(1));
        let mut total = LossBreakdown::zero();
        for (x, label) in batch {
            self.check_label(label)?;
            let raw = self.forward(x)?;
            total.add_scaled(&raw_loss(&raw, label, weights, scale).loss, scale);
        }
        Ok(total)
    }

    fn check_label(&self, label: &LabelSet) -> Result<(), ModelError> {
        let c = &self.config;
        if c.tasks.emotion && label.emotion.len() != c.n_emotions {
            return Err(ModelError::Shape {
                expected: format!("{} emotion labels", c.n_emotions),
                got: format!("{}", label.emotion.len()),
            });
        }
        if c.tasks.country && label.country >= c.n_countries {
            return Err(ModelError::Shape {
                expected: format!("country < {}", c.n_countries),
                got: label.country.to_string(),
            });
        }
        Ok(())
    }

    /// Mean batch loss and its gradient with respect to every registered
    /// parameter. Utterances are accumulated in batch order.
    pub fn loss_and_grad(
        &self,
        batch: &[(&FeatureSequence<T>, &LabelSet)],
        weights: &LossWeights,
    ) -> Result<(LossBreakdown<T>, Vec<T>), ModelError> {
        let scale = T::one() / T::from_usize_lossy(batch.len().max(1));
        let mut grad = vec![T::zero(); self.params.len()];
        let mut total = LossBreakdown::zero();
        for (x, label) in batch {
            self.check_label(label)?;
            let (hidden, enc) = self.encoder_forward(x)?;
            let mut raw = RawOutputs {
                age: None,
                emotion: None,
                country: None,
            };
            let mut caches = Vec::new();
            for task in self.config.tasks.iter() {
                let (z, pc) = self.pool_forward(task, &hidden);
                let (o, hc) = self.head_forward(task, &z);
                match task {
                    Task::Age => raw.age = Some(o[0]),
                    Task::Emotion => raw.emotion = Some(o),
                    Task::Country => raw.country = Some(o),
                }
                caches.push((task, z, pc, hc));
            }
            let rl = raw_loss(&raw, label, weights, scale);
            total.add_scaled(&rl.loss, scale);
            let mut d_hidden = vec![T::zero(); hidden.len()];
            for (task, z, pc, hc) in &caches {
                let d_out = match task {
                    Task::Age => vec![rl.d_age.unwrap()],
                    Task::Emotion => rl.d_emotion.clone().unwrap(),
                    Task::Country => rl.d_country.clone().unwrap(),
                };
                let d_z = self.head_backward(*task, z, hc, &d_out, &mut grad);
                self.pool_backward(*task, &hidden, pc, &d_z, &mut grad, &mut d_hidden);
            }
            self.encoder_backward(&enc, &d_hidden, &mut grad)?;
        }
        Ok((total, grad))
    }

    /// Name of the first registered tensor holding a non-finite value.
    pub fn first_non_finite(&self, values: &[T], what: &str) -> Option<String> {
        let i = values.iter().position(|v| !v.is_finite())?;
        let slot = self.registry.owner(i).map_or("?", |s| s.name.as_str());
        Some(format!("{what} {slot}"))
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
