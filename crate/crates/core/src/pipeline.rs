//! File-to-file pipeline stages. Each stage reads the artifacts of the
//! previous one, writes its own outputs atomically and returns a summary.

use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{read_wav, resample_linear, write_wav, AudioError, BitDepth};
use crate::config::{ConfigError, FeatureSettings, Frontend, PipelineConfig, PreprocessSettings};
use crate::data::{
    label_map, parse_manifest, read_predictions, serialize_manifest, write_predictions, CountryVocabulary,
    LabelSet, ManifestError, ManifestSchema, PredictionSet, Split, TaskSet, UtteranceRecord,
};
use crate::embeddings::{embeddings_as_features, read_embeddings, PseudoEmbedder};
use crate::features::{
    apply_gmvn, fit_gmvn, log_mel, mel_filterbank, read_features, stft, write_features, ContainerError,
    FeatureError, FeatureSequence, GmvnStats,
};
use crate::fsutil::atomic_write;
use crate::fusion::{fuse, grid_search_weights, FusionError, FusionWeights};
use crate::metrics::{evaluate, EvalReport, MetricError};
use crate::model::{
    read_checkpoint, train, write_checkpoint, CheckpointMeta, Example, ModelError, TrainOutcome,
};
use crate::preprocess::{
    apply_fir, design_highpass_fir, energy_vad, gain_normalize, mmse_stsa_denoise, speed_perturb,
    trim_to_voiced, DspError,
};
use crate::synth::{write_corpus, SynthError};

pub const INDEX_FILE: &str = "features.json";
pub const GMVN_FILE: &str = "gmvn.vbft";
pub const CHECKPOINT_FILE: &str = "model.vbck";
pub const RUN_LOG_FILE: &str = "runs.log";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing input {0}")]
    Missing(PathBuf),
    #[error("{0}")]
    Mismatch(String),
    #[error("utterance `{id}`: {source}")]
    Utterance {
        id: String,
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(PipelineError::Missing(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn per_utterance<T>(id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| PipelineError::Utterance {
        id: id.to_string(),
        source: Box::new(e),
    })
}

/// Manifest records with audio paths resolved against the manifest's
/// directory.
pub fn load_manifest(path: &Path, schema: &ManifestSchema) -> Result<Vec<UtteranceRecord>> {
    let mut records = parse_manifest(&read_text(path)?, schema)?;
    let base = absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
    for r in &mut records {
        if r.audio_path.is_relative() {
            r.audio_path = base.join(&r.audio_path);
        }
    }
    Ok(records)
}

/// Appends one provenance line to `<root>/runs.log`.
pub fn append_run_log(
    root: &Path,
    stage: &str,
    cfg: &PipelineConfig,
    wall: Duration,
    status: &str,
) -> Result<()> {
    ensure_dir(root)?;
    let path = root.join(RUN_LOG_FILE);
    let line = format!(
        "stage={stage} seed={} config_sha256={} wall_s={:.3} status={status}\n",
        cfg.seed,
        cfg.hash(),
        wall.as_secs_f64()
    );
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
    f.write_all(line.as_bytes())
        .map_err(|source| PipelineError::Io { path, source })
}

/// Generates the synthetic corpus; returns the manifest path.
pub fn run_synth(cfg: &PipelineConfig, out_dir: &Path) -> Result<PathBuf> {
    let cfg = cfg.resolved();
    Ok(write_corpus(out_dir, &cfg.synth)?)
}

fn clean_clip(
    rec: &UtteranceRecord,
    settings: &PreprocessSettings,
) -> Result<crate::audio::AudioBuffer<f64>> {
    let mut audio = read_wav::<f64>(&rec.audio_path)?;
    if audio.sample_rate() != settings.sample_rate {
        audio = resample_linear(&audio, settings.sample_rate)?;
    }
    if settings.highpass {
        let fir = design_highpass_fir::<f64>(
            settings.stopband_hz,
            settings.sample_rate as f64,
            settings.highpass_taps,
        )?;
        audio = apply_fir(&fir, &audio);
    }
    if settings.denoise {
        audio = mmse_stsa_denoise(&audio, &settings.denoiser)?;
    }
    if settings.vad_trim {
        let segments = energy_vad(&audio, &settings.vad)?;
        audio = trim_to_voiced(&audio, &segments);
    }
    Ok(gain_normalize(&audio, settings.target_peak)?)
}

/// Cleans every clip of the manifest and writes float WAVs plus a new
/// manifest under `out_dir`. Speed-perturbed copies are added for
/// training rows only.
pub fn run_preprocess(cfg: &PipelineConfig, manifest: &Path, out_dir: &Path) -> Result<PathBuf> {
    let schema = cfg.schema()?;
    let settings = &cfg.preprocess;
    for &f in &settings.speed_factors {
        if !(crate::preprocess::SPEED_RANGE.0..=crate::preprocess::SPEED_RANGE.1).contains(&f) {
            return Err(DspError::SpeedOutOfRange(f).into());
        }
    }
    let records = load_manifest(manifest, &schema)?;
    ensure_dir(&out_dir.join("wav"))?;
    let mut out = Vec::with_capacity(records.len());
    let mut emit = |id: String, rec: &UtteranceRecord, audio: &crate::audio::AudioBuffer<f64>| -> Result<()> {
        let rel = PathBuf::from("wav").join(format!("{id}.wav"));
        write_wav(audio, out_dir.join(&rel), BitDepth::Float32)?;
        out.push(UtteranceRecord {
            id,
            audio_path: rel,
            split: rec.split,
            labels: rec.labels.clone(),
        });
        Ok(())
    };
    for rec in &records {
        let audio = per_utterance(&rec.id, clean_clip(rec, settings))?;
        emit(rec.id.clone(), rec, &audio)?;
        if rec.split == Split::Train {
            for &f in &settings.speed_factors {
                let fast = speed_perturb(&audio, f)?;
                emit(format!("{}_sp{f}", rec.id), rec, &fast)?;
            }
        }
    }
    let path = out_dir.join("manifest.csv");
    write_file(&path, serialize_manifest(&out, &schema).as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub split: Split,
    pub file: String,
}

/// Directory-level description of a featurized dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub frontend: Frontend,
    pub dim: usize,
    pub countries: Vec<String>,
    pub n_emotions: usize,
    /// Absolute path of the manifest the features were computed from.
    pub manifest: PathBuf,
    pub gmvn: Option<String>,
    pub entries: Vec<IndexEntry>,
}

impl FeatureIndex {
    pub fn schema(&self) -> Result<ManifestSchema> {
        Ok(ManifestSchema {
            vocabulary: CountryVocabulary::new(&self.countries)?,
            n_emotions: self.n_emotions,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(path)?)?)
    }
}

fn clip_log_mel(
    rec: &UtteranceRecord,
    settings: &FeatureSettings,
    banks: &mut HashMap<u32, crate::features::MelFilterbank<f64>>,
) -> Result<FeatureSequence<f64>> {
    let audio = read_wav::<f64>(&rec.audio_path)?;
    let fs = audio.sample_rate();
    if !banks.contains_key(&fs) {
        let fmax = settings.fmax_hz.unwrap_or(fs as f64 / 2.0);
        let bank = mel_filterbank(settings.n_mels, settings.dft, fs as f64, settings.fmin_hz, fmax)?;
        banks.insert(fs, bank);
    }
    let spec = stft(&audio, &settings.stft())?;
    Ok(log_mel(&spec, &banks[&fs])?)
}

/// Computes features for every manifest row and writes one container per
/// utterance plus `features.json`. Log-mel based frontends are normalized
/// with statistics fitted on the training rows.
pub fn run_featurize(cfg: &PipelineConfig, manifest: &Path, out_dir: &Path) -> Result<PathBuf> {
    let cfg = cfg.resolved();
    let schema = cfg.schema()?;
    let settings = &cfg.features;
    let records = load_manifest(manifest, &schema)?;
    ensure_dir(out_dir)?;

    let mut outputs: Vec<FeatureSequence<f64>> = Vec::with_capacity(records.len());
    let mut gmvn_file = None;
    if settings.frontend == Frontend::External {
        let dir = settings
            .external_dir
            .as_ref()
            .ok_or_else(|| PipelineError::Mismatch("external frontend needs features.external_dir".into()))?;
        for rec in &records {
            let path = dir.join(format!("{}.vbft", rec.id));
            if !path.exists() {
                return Err(PipelineError::Missing(path));
            }
            let emb = per_utterance(&rec.id, read_embeddings::<f64>(&path).map_err(Into::into))?;
            outputs.push(embeddings_as_features(&emb));
        }
    } else {
        let mut banks = HashMap::new();
        let raw = records
            .iter()
            .map(|r| per_utterance(&r.id, clip_log_mel(r, settings, &mut banks)))
            .collect::<Result<Vec<_>>>()?;
        let train_refs: Vec<&FeatureSequence<f64>> = records
            .iter()
            .zip(&raw)
            .filter(|(r, _)| r.split == Split::Train)
            .map(|(_, f)| f)
            .collect();
        let stats: GmvnStats<f64> = fit_gmvn(&train_refs)?;
        write_features(&out_dir.join(GMVN_FILE), &stats.to_features())?;
        gmvn_file = Some(GMVN_FILE.to_string());
        let embedder = match settings.frontend {
            Frontend::Embed => Some(PseudoEmbedder::<f64>::new(settings.n_mels, settings.embed_dim, cfg.seed)?),
            _ => None,
        };
        for (rec, lm) in records.iter().zip(&raw) {
            let normed = apply_gmvn(lm, &stats)?;
            outputs.push(match &embedder {
                Some(e) => embeddings_as_features(&e.embed(&rec.id, &normed)?),
                None => normed,
            });
        }
    }

    let dim = outputs.first().map_or(0, |f| f.dim);
    let mut entries = Vec::with_capacity(records.len());
    for (rec, seq) in records.iter().zip(&outputs) {
        if seq.dim != dim || seq.channels != 1 {
            return Err(PipelineError::Mismatch(format!(
                "utterance `{}` has {}x{} features, dataset uses 1x{dim}",
                rec.id, seq.channels, seq.dim
            )));
        }
        let file = format!("{}.vbft", rec.id);
        write_features(&out_dir.join(&file), seq)?;
        entries.push(IndexEntry {
            id: rec.id.clone(),
            split: rec.split,
            file,
        });
    }
    let index = FeatureIndex {
        frontend: settings.frontend,
        dim,
        countries: cfg.countries.clone(),
        n_emotions: cfg.n_emotions,
        manifest: absolute(manifest)?,
        gmvn: gmvn_file,
        entries,
    };
    let path = out_dir.join(INDEX_FILE);
    write_file(&path, serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(path)
}

fn index_dir(index_path: &Path) -> PathBuf {
    index_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_split(
    index_path: &Path,
    index: &FeatureIndex,
    split: Split,
) -> Result<Vec<(String, FeatureSequence<f64>)>> {
    let dir = index_dir(index_path);
    index
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let f = per_utterance(&e.id, read_features::<f64>(&dir.join(&e.file)).map_err(Into::into))?;
            Ok((e.id.clone(), f))
        })
        .collect()
}

fn examples(
    index_path: &Path,
    index: &FeatureIndex,
    labels: &HashMap<String, LabelSet>,
    split: Split,
) -> Result<Vec<Example<f64>>> {
    load_split(index_path, index, split)?
        .into_iter()
        .map(|(id, features)| {
            let l = labels.get(&id).cloned().ok_or_else(|| {
                PipelineError::Mismatch(format!("no labels for `{id}` in {}", index.manifest.display()))
            })?;
            Ok(Example {
                id,
                features,
                labels: l,
            })
        })
        .collect()
}

/// Labeled examples of one split, with labels joined from the index's
/// source manifest.
pub fn load_examples(index_path: &Path, split: Split) -> Result<Vec<Example<f64>>> {
    let index = FeatureIndex::load(index_path)?;
    let records = parse_manifest(&read_text(&index.manifest)?, &index.schema()?)?;
    examples(index_path, &index, &label_map(&records), split)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub outcome: TrainOutcome<f64>,
    pub val_report: Option<EvalReport>,
}

/// Trains on the index's training rows, validating on its validation
/// rows. Writes the checkpoint and step/epoch logs to `out_dir`.
pub fn run_train(cfg: &PipelineConfig, index_path: &Path, out_dir: &Path, tasks: TaskSet) -> Result<TrainSummary> {
    let cfg = cfg.resolved();
    let index = FeatureIndex::load(index_path)?;
    let schema = index.schema()?;
    let records = parse_manifest(&read_text(&index.manifest)?, &schema)?;
    let labels = label_map(&records);
    let train_set = examples(index_path, &index, &labels, Split::Train)?;
    let val_set = examples(index_path, &index, &labels, Split::Val)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = index.dim;
    model_cfg.input_channels = 1;
    model_cfg.n_emotions = index.n_emotions;
    model_cfg.n_countries = index.countries.len();
    model_cfg.tasks = tasks;
    model_cfg.strf = (index.frontend == Frontend::Strf).then_some(cfg.strf);

    let outcome = train(model_cfg, &train_set, &val_set, &cfg.train)?;
    ensure_dir(out_dir)?;
    let meta = CheckpointMeta {
        model: outcome.model.config.clone(),
        frontend: index.frontend.as_str().to_string(),
        gmvn: index.gmvn.clone(),
        loss_weights: cfg.train.loss_weights,
        train_steps: outcome.steps.len(),
    };
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, &outcome.model, &meta)?;
    write_file(&out_dir.join("train_steps.csv"), outcome.step_log_text().as_bytes())?;
    write_file(&out_dir.join("train_epochs.csv"), outcome.epoch_log_text().as_bytes())?;
    let val_report = outcome.epochs.last().and_then(|e| e.val.clone());
    if let Some(r) = &val_report {
        write_file(&out_dir.join("val_report.txt"), r.to_key_values().as_bytes())?;
    }
    Ok(TrainSummary {
        checkpoint,
        outcome,
        val_report,
    })
}

/// Predicts every row of `split` with a stored checkpoint and writes a
/// prediction file.
pub fn run_predict(checkpoint: &Path, index_path: &Path, split: Split, out_file: &Path) -> Result<Vec<PredictionSet>> {
    if !checkpoint.exists() {
        return Err(PipelineError::Missing(checkpoint.to_path_buf()));
    }
    let (model, meta) = read_checkpoint::<f64>(checkpoint)?;
    let index = FeatureIndex::load(index_path)?;
    if meta.frontend != index.frontend.as_str() {
        return Err(PipelineError::Mismatch(format!(
            "checkpoint was trained on `{}` features, index holds `{}`",
            meta.frontend, index.frontend
        )));
    }
    let preds = load_split(index_path, &index, split)?
        .iter()
        .map(|(id, f)| per_utterance(id, model.predict(id, f).map_err(Into::into)))
        .collect::<Result<Vec<_>>>()?;
    let text = write_predictions(&preds, index.n_emotions, index.countries.len());
    if let Some(dir) = out_file.parent() {
        ensure_dir(dir)?;
    }
    write_file(out_file, text.as_bytes())?;
    Ok(preds)
}

/// Gold labels from either a manifest or a prediction-layout key file
/// (country taken as the argmax of its distribution).
pub fn load_labels(path: &Path, schema: &ManifestSchema) -> Result<HashMap<String, LabelSet>> {
    let text = read_text(path)?;
    if let Ok((rows, _, _)) = read_predictions(&text) {
        return rows
            .into_iter()
            .map(|p| {
                let country = p.country_argmax();
                match (p.age, p.emotion, country) {
                    (Some(age), Some(emotion), Some(country)) => Ok((p.id, LabelSet { emotion, age, country })),
                    _ => Err(PipelineError::Mismatch(format!("key row `{}` lacks a task", p.id))),
                }
            })
            .collect();
    }
    Ok(label_map(&load_manifest(path, schema)?))
}

fn read_prediction_file(path: &Path) -> Result<(Vec<PredictionSet>, usize, usize)> {
    Ok(read_predictions(&read_text(path)?)?)
}

/// Scores a prediction file against gold labels and writes the report.
pub fn run_evaluate(cfg: &PipelineConfig, predictions: &Path, labels: &Path, out_file: &Path) -> Result<EvalReport> {
    let (preds, _, k) = read_prediction_file(predictions)?;
    let gold = load_labels(labels, &cfg.schema()?)?;
    let preds: Vec<PredictionSet> = preds.into_iter().filter(|p| gold.contains_key(&p.id)).collect();
    let report = evaluate(&preds, &gold, k.max(cfg.countries.len()))?;
    let mut text = report.to_key_values();
    if report.ccc_per_dim.is_some() {
        text.push('\n');
        text.push_str(&report.ccc_table(None));
    }
    if let Some(dir) = out_file.parent() {
        ensure_dir(dir)?;
    }
    write_file(out_file, text.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub age: Vec<f64>,
    pub emotion: Vec<f64>,
    pub country: Vec<f64>,
}

impl From<&FusionWeights> for WeightsFile {
    fn from(w: &FusionWeights) -> Self {
        Self {
            age: w.age.clone(),
            emotion: w.emotion.clone(),
            country: w.country.clone(),
        }
    }
}

impl WeightsFile {
    pub fn to_weights(&self) -> Result<FusionWeights> {
        Ok(FusionWeights::new(self.age.clone(), self.emotion.clone(), self.country.clone())?)
    }
}

/// How fusion weights are chosen.
#[derive(Debug, Clone)]
pub enum FuseMode {
    Fixed(FusionWeights),
    /// Per-task grid search against the labels at this path.
    Search { labels: PathBuf, step: f64 },
}

#[derive(Debug, Clone)]
pub struct FuseSummary {
    pub weights: FusionWeights,
    pub report: Option<EvalReport>,
    pub fused: Vec<PredictionSet>,
}

/// Fuses prediction files and writes the fused file plus a JSON weights
/// file next to it (`<out>.weights.json`).
pub fn run_fuse(cfg: &PipelineConfig, inputs: &[PathBuf], mode: &FuseMode, out_file: &Path) -> Result<FuseSummary> {
    let mut models = Vec::with_capacity(inputs.len());
    let mut geometry = None;
    for p in inputs {
        let (preds, e, k) = read_prediction_file(p)?;
        if *geometry.get_or_insert((e, k)) != (e, k) {
            return Err(PipelineError::Mismatch(format!(
                "{} has {e} emotions and {k} countries, earlier inputs differ",
                p.display()
            )));
        }
        models.push(preds);
    }
    let (e, k) = geometry.unwrap_or((cfg.n_emotions, cfg.countries.len()));
    let (weights, report) = match mode {
        FuseMode::Fixed(w) => (w.clone(), None),
        FuseMode::Search { labels, step } => {
            let gold = load_labels(labels, &cfg.schema()?)?;
            let ids: HashSet<&String> = gold.keys().collect();
            let scoped: Vec<Vec<PredictionSet>> = models
                .iter()
                .map(|m| m.iter().filter(|p| ids.contains(&p.id)).cloned().collect())
                .collect();
            let (w, r) = grid_search_weights(&scoped, &gold, k, *step)?;
            (w, Some(r))
        }
    };
    let fused = fuse(&models, &weights)?;
    if let Some(dir) = out_file.parent() {
        ensure_dir(dir)?;
    }
    write_file(out_file, write_predictions(&fused, e, k).as_bytes())?;
    let weights_json = serde_json::to_string_pretty(&WeightsFile::from(&weights))?;
    write_file(&weights_path(out_file), weights_json.as_bytes())?;
    Ok(FuseSummary { weights, report, fused })
}

pub fn weights_path(out_file: &Path) -> PathBuf {
    let mut name = out_file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".weights.json");
    out_file.with_file_name(name)
}
