//! Synthetic labeled corpus of burst-like clips whose acoustics depend on
//! the labels: chirp slope and start pitch follow two emotion latents,
//! envelope decay follows age, and a first-order spectral tilt encodes the
//! country class.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioBuffer, AudioError, BitDepth};
use crate::data::{
    serialize_manifest, write_predictions, CountryVocabulary, LabelSet, ManifestError, ManifestSchema,
    PredictionSet, Split, UtteranceRecord, DEFAULT_COUNTRIES, DEFAULT_EMOTIONS,
};
use crate::fsutil::atomic_write;

pub const MANIFEST_FILE: &str = "manifest.csv";
/// Held-out labels in prediction-file layout (one-hot country).
pub const TEST_KEY_FILE: &str = "test_key.csv";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{0} split count must be positive")]
    ZeroCount(&'static str),
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub n_emotions: usize,
    pub countries: Vec<String>,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 64,
            val: 32,
            test: 32,
            n_emotions: DEFAULT_EMOTIONS,
            countries: DEFAULT_COUNTRIES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            duration_s: 1.0,
            sample_rate: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.train == 0 {
            return Err(SynthError::ZeroCount("train"));
        }
        if self.val == 0 {
            return Err(SynthError::ZeroCount("val"));
        }
        if self.n_emotions == 0 {
            return Err(SynthError::Config("n_emotions must be positive".into()));
        }
        CountryVocabulary::new(&self.countries)?;
        if !(self.duration_s >= 0.5 && self.duration_s <= 30.0) {
            return Err(SynthError::Config(format!("duration {} s outside [0.5, 30]", self.duration_s)));
        }
        if self.sample_rate < 8000 {
            return Err(SynthError::Config(format!("sample rate {} below 8000", self.sample_rate)));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<ManifestSchema, SynthError> {
        Ok(ManifestSchema {
            vocabulary: CountryVocabulary::new(&self.countries)?,
            n_emotions: self.n_emotions,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub id: String,
    pub split: Split,
    pub labels: LabelSet,
    pub audio: AudioBuffer<f64>,
}

const AGE_RANGE: (f64, f64) = (18.0, 70.0);
const HARMONICS: usize = 6;
const NOISE_MIX: f64 = 0.3;
const BACKGROUND: f64 = 1e-3;
const PEAK: f64 = 0.9;

/// Tilt coefficient of class `k`: `y[n] = x[n] + b x[n-1]`.
fn tilt(k: usize, n_classes: usize) -> f64 {
    -0.9 + 1.8 * k as f64 / (n_classes - 1) as f64
}

/// Weight of the first latent in emotion dimension `e`.
fn mixing(e: usize, n: usize) -> f64 {
    if n == 1 {
        1.0
    } else {
        e as f64 / (n - 1) as f64
    }
}

fn render(labels: &LabelSet, z: (f64, f64), cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AudioBuffer<f64> {
    let fs = cfg.sample_rate as f64;
    let n = (cfg.duration_s * fs).round() as usize;
    let onset = 0.1 * cfg.duration_s;
    let length = 0.75 * cfg.duration_s;
    let attack = 0.02;
    let age_pos = (labels.age - AGE_RANGE.0) / (AGE_RANGE.1 - AGE_RANGE.0);
    let tau = 0.05 + 0.45 * age_pos;
    let f_start = 150.0 + 250.0 * z.1;
    let slope = -300.0 + 600.0 * z.0;
    let nyq = 0.45 * fs;

    let mut phase = 0.0;
    let mut x = vec![0.0; n];
    for (i, out) in x.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let local = t - onset;
        let noise: f64 = StandardNormal.sample(rng);
        if local < 0.0 || local > length {
            continue;
        }
        let env = (local / attack).min(1.0) * (-local / tau).exp();
        let f0 = (f_start + slope * local).max(60.0);
        phase += 2.0 * PI * f0 / fs;
        let mut s = 0.0;
        for h in 1..=HARMONICS {
            if f0 * h as f64 >= nyq {
                break;
            }
            s += (phase * h as f64).sin() / h as f64;
        }
        *out = env * (s + NOISE_MIX * noise);
    }

    let b = tilt(labels.country, cfg.countries.len());
    let mut prev = 0.0;
    for v in x.iter_mut() {
        let cur = *v;
        *v = cur + b * prev;
        prev = cur;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
    for v in x.iter_mut() {
        let bg: f64 = StandardNormal.sample(rng);
        *v = (*v * scale + BACKGROUND * bg).clamp(-1.0, 1.0);
    }
    AudioBuffer::new(x, cfg.sample_rate).expect("finite synthetic samples")
}

/// Generates the corpus in memory. Every clip draws from its own seeded
/// stream, so output depends only on the config.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<SynthClip>, SynthError> {
    cfg.validate()?;
    let k = cfg.countries.len();
    let e = cfg.n_emotions;
    let mut clips = Vec::with_capacity(cfg.train + cfg.val + cfg.test);
    let mut stream = 0u64;
    for (split, count) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        split_rng.set_stream(1_000_000 + split as u64);
        let mut countries: Vec<usize> = (0..count).map(|i| i % k).collect();
        countries.shuffle(&mut split_rng);
        for (i, &country) in countries.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            stream += 1;
            let z: (f64, f64) = (rng.random(), rng.random());
            let age = rng.random_range(AGE_RANGE.0..AGE_RANGE.1);
            let emotion = (0..e)
                .map(|d| {
                    let a = mixing(d, e);
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    (a * z.0 + (1.0 - a) * z.1 + 0.05 * jitter).clamp(0.0, 1.0)
                })
                .collect();
            let labels = LabelSet { emotion, age, country };
            let audio = render(&labels, z, cfg, &mut rng);
            clips.push(SynthClip {
                id: format!("{}_{i:04}", split.as_str()),
                split,
                labels,
                audio,
            });
        }
    }
    Ok(clips)
}

/// Manifest rows for `clips`, with audio under `wav/` relative to the
/// manifest directory. Test rows carry no labels.
pub fn manifest_records(clips: &[SynthClip]) -> Vec<UtteranceRecord> {
    clips
        .iter()
        .map(|c| UtteranceRecord {
            id: c.id.clone(),
            audio_path: PathBuf::from("wav").join(format!("{}.wav", c.id)),
            split: c.split,
            labels: (c.split != Split::Test).then(|| c.labels.clone()),
        })
        .collect()
}

/// Held-out labels as a prediction file: age, emotion and a one-hot
/// country distribution.
pub fn test_key(clips: &[SynthClip], n_emotions: usize, n_countries: usize) -> String {
    let rows: Vec<PredictionSet> = clips
        .iter()
        .filter(|c| c.split == Split::Test)
        .map(|c| {
            let mut onehot = vec![0.0; n_countries];
            onehot[c.labels.country] = 1.0;
            PredictionSet::new(
                c.id.as_str(),
                Some(c.labels.age),
                Some(c.labels.emotion.clone()),
                Some(onehot),
            )
            .expect("labels are a valid prediction")
        })
        .collect();
    write_predictions(&rows, n_emotions, n_countries)
}

/// Writes WAVs, the manifest and the test key under `dir`; returns the
/// manifest path.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<PathBuf, SynthError> {
    let clips = synth_corpus(cfg)?;
    let schema = cfg.schema()?;
    std::fs::create_dir_all(dir.join("wav"))?;
    let records = manifest_records(&clips);
    for (clip, rec) in clips.iter().zip(&records) {
        write_wav(&clip.audio, dir.join(&rec.audio_path), BitDepth::Pcm16)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    atomic_write(&manifest, serialize_manifest(&records, &schema).as_bytes())?;
    if cfg.test > 0 {
        let key = test_key(&clips, cfg.n_emotions, cfg.countries.len());
        atomic_write(&dir.join(TEST_KEY_FILE), key.as_bytes())?;
    }
    Ok(manifest)
}
