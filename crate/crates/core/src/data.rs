//! Manifests, labels, splits and prediction records.
//!
//! A manifest is a comma-delimited UTF-8 table with a header row. Required
//! columns are `id`, `path`, `split`, `age`, `country` and `e_0..e_{E-1}`;
//! any additional columns are ignored. Empty label cells mean "no label",
//! which is only legal (and mandatory) on `test` rows.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of emotion dimensions.
pub const DEFAULT_EMOTIONS: usize = 10;

/// Default country tokens (`K = 4`).
pub const DEFAULT_COUNTRIES: [&str; 4] = ["US", "CN", "ZA", "VE"];

/// Tolerance on the country probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: field `{field}` has malformed value `{value}`")]
    Malformed {
        line: u64,
        field: String,
        value: String,
    },
    #[error("line {line}: field `{field}` value {value} is out of range")]
    OutOfRange { line: u64, field: String, value: f64 },
    #[error("line {line}: empty utterance id")]
    EmptyId { line: u64 },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: country token `{token}` is not in the vocabulary")]
    UnknownCountry { line: u64, token: String },
    #[error("line {line}: unknown split `{value}` (expected train, val or test)")]
    BadSplit { line: u64, value: String },
    #[error("line {line}: {split} row `{id}` must carry a complete label set")]
    MissingLabels { line: u64, id: String, split: Split },
    #[error("line {line}: test row `{id}` must not carry labels")]
    UnexpectedLabels { line: u64, id: String },
    #[error("line {line}: row has {got} cells, expected {expected}")]
    Width { line: u64, got: usize, expected: usize },
    #[error("prediction `{id}`: {reason}")]
    BadPrediction { id: String, reason: String },
    #[error("vocabulary needs at least two tokens, got {0}")]
    VocabularyTooSmall(usize),
    #[error("duplicate vocabulary token `{0}`")]
    DuplicateToken(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

/// The three prediction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Age,
    Emotion,
    Country,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Age, Task::Emotion, Task::Country];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Age => "age",
            Task::Emotion => "emotion",
            Task::Country => "country",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "age" => Ok(Task::Age),
            "emotion" | "emo" => Ok(Task::Emotion),
            "country" => Ok(Task::Country),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// Subset of enabled tasks. Joint multitask is all three; a single-task
/// model enables exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub age: bool,
    pub emotion: bool,
    pub country: bool,
}

impl TaskSet {
    pub const ALL: TaskSet = TaskSet {
        age: true,
        emotion: true,
        country: true,
    };

    pub fn only(task: Task) -> Self {
        let mut set = TaskSet {
            age: false,
            emotion: false,
            country: false,
        };
        set.set(task, true);
        set
    }

    pub fn contains(&self, task: Task) -> bool {
        match task {
            Task::Age => self.age,
            Task::Emotion => self.emotion,
            Task::Country => self.country,
        }
    }

    pub fn set(&mut self, task: Task, on: bool) {
        match task {
            Task::Age => self.age = on,
            Task::Emotion => self.emotion = on,
            Task::Country => self.country = on,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Task> + '_ {
        Task::ALL.into_iter().filter(|t| self.contains(*t))
    }

    pub fn is_empty(&self) -> bool {
        !(self.age || self.emotion || self.country)
    }
}

impl FromStr for TaskSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim() == "all" {
            return Ok(TaskSet::ALL);
        }
        let mut set = TaskSet {
            age: false,
            emotion: false,
            country: false,
        };
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            set.set(part.parse()?, true);
        }
        if set.is_empty() {
            return Err("at least one task must be enabled".into());
        }
        Ok(set)
    }
}

/// Ordered country tokens; token `i` is class index `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountryVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl CountryVocabulary {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self, ManifestError> {
        if tokens.len() < 2 {
            return Err(ManifestError::VocabularyTooSmall(tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut owned = Vec::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            let tok = tok.as_ref().to_string();
            if index.insert(tok.clone(), i).is_some() {
                return Err(ManifestError::DuplicateToken(tok));
            }
            owned.push(tok);
        }
        Ok(Self {
            tokens: owned,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Default for CountryVocabulary {
    fn default() -> Self {
        Self::new(&DEFAULT_COUNTRIES).expect("default vocabulary is valid")
    }
}

/// Manifest-level configuration: country vocabulary and emotion count.
#[derive(Debug, Clone)]
pub struct ManifestSchema {
    pub vocabulary: CountryVocabulary,
    pub n_emotions: usize,
}

impl Default for ManifestSchema {
    fn default() -> Self {
        Self {
            vocabulary: CountryVocabulary::default(),
            n_emotions: DEFAULT_EMOTIONS,
        }
    }
}

impl ManifestSchema {
    pub fn n_countries(&self) -> usize {
        self.vocabulary.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub emotion: Vec<f64>,
    pub age: f64,
    pub country: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub split: Split,
    pub labels: Option<LabelSet>,
}

const BASE_COLUMNS: [&str; 5] = ["id", "path", "split", "age", "country"];

fn emotion_column(i: usize) -> String {
    format!("e_{i}")
}

fn parse_f64(line: u64, field: &str, value: &str) -> Result<f64, ManifestError> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ManifestError::Malformed {
            line,
            field: field.to_string(),
            value: value.to_string(),
        })
}

/// Parses a manifest table. Row order is preserved.
pub fn parse_manifest(
    text: &str,
    schema: &ManifestSchema,
) -> Result<Vec<UtteranceRecord>, ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let lookup = |name: &str| -> Result<usize, ManifestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ManifestError::MissingColumn(name.to_string()))
    };
    let [c_id, c_path, c_split, c_age, c_country] = [
        lookup(BASE_COLUMNS[0])?,
        lookup(BASE_COLUMNS[1])?,
        lookup(BASE_COLUMNS[2])?,
        lookup(BASE_COLUMNS[3])?,
        lookup(BASE_COLUMNS[4])?,
    ];
    let c_emotion = (0..schema.n_emotions)
        .map(|i| lookup(&emotion_column(i)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            return Err(ManifestError::Width {
                line,
                got: row.len(),
                expected: headers.len(),
            });
        }
        let id = row[c_id].to_string();
        if id.is_empty() {
            return Err(ManifestError::EmptyId { line });
        }
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateId(id));
        }
        let split: Split = row[c_split]
            .parse()
            .map_err(|value| ManifestError::BadSplit { line, value })?;

        let label_cells = std::iter::once(c_age)
            .chain(std::iter::once(c_country))
            .chain(c_emotion.iter().copied());
        let filled = label_cells.clone().filter(|&c| !row[c].is_empty()).count();
        let total = 2 + c_emotion.len();

        let labels = if filled == 0 {
            None
        } else if filled == total {
            let age = parse_f64(line, "age", &row[c_age])?;
            if age <= 0.0 {
                return Err(ManifestError::OutOfRange {
                    line,
                    field: "age".into(),
                    value: age,
                });
            }
            let token = &row[c_country];
            let country =
                schema
                    .vocabulary
                    .index_of(token)
                    .ok_or_else(|| ManifestError::UnknownCountry {
                        line,
                        token: token.to_string(),
                    })?;
            let mut emotion = Vec::with_capacity(c_emotion.len());
            for (i, &c) in c_emotion.iter().enumerate() {
                let field = emotion_column(i);
                let v = parse_f64(line, &field, &row[c])?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(ManifestError::OutOfRange {
                        line,
                        field,
                        value: v,
                    });
                }
                emotion.push(v);
            }
            Some(LabelSet {
                emotion,
                age,
                country,
            })
        } else {
            return Err(ManifestError::MissingLabels { line, id, split });
        };

        match (split, &labels) {
            (Split::Test, Some(_)) => return Err(ManifestError::UnexpectedLabels { line, id }),
            (Split::Train | Split::Val, None) => {
                return Err(ManifestError::MissingLabels { line, id, split })
            }
            _ => {}
        }

        out.push(UtteranceRecord {
            id,
            audio_path: PathBuf::from(&row[c_path]),
            split,
            labels,
        });
    }
    Ok(out)
}

/// Writes records in manifest form; inverse of [`parse_manifest`].
pub fn serialize_manifest(records: &[UtteranceRecord], schema: &ManifestSchema) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..schema.n_emotions).map(emotion_column));
    writer.write_record(&header).expect("in-memory write");
    for rec in records {
        let mut row = vec![
            rec.id.clone(),
            rec.audio_path.to_string_lossy().into_owned(),
            rec.split.to_string(),
        ];
        match &rec.labels {
            Some(l) => {
                row.push(l.age.to_string());
                row.push(
                    schema
                        .vocabulary
                        .token(l.country)
                        .unwrap_or_default()
                        .to_string(),
                );
                row.extend(l.emotion.iter().map(f64::to_string));
            }
            None => row.extend(std::iter::repeat_n(String::new(), 2 + schema.n_emotions)),
        }
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

/// Per-utterance model outputs. A task the producing model does not
/// predict is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub id: String,
    pub age: Option<f64>,
    pub emotion: Option<Vec<f64>>,
    pub country_probs: Option<Vec<f64>>,
}

impl PredictionSet {
    /// Validates the simplex and clamps emotions into `[0, 1]`.
    pub fn new(
        id: impl Into<String>,
        age: Option<f64>,
        emotion: Option<Vec<f64>>,
        country_probs: Option<Vec<f64>>,
    ) -> Result<Self, ManifestError> {
        let id = id.into();
        let bad = |reason: String| ManifestError::BadPrediction {
            id: id.clone(),
            reason,
        };
        if let Some(a) = age {
            if !a.is_finite() {
                return Err(bad(format!("non-finite age {a}")));
            }
        }
        let emotion = match emotion {
            Some(e) => {
                if e.iter().any(|v| !v.is_finite()) {
                    return Err(bad("non-finite emotion value".into()));
                }
                Some(e.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
            }
            None => None,
        };
        if let Some(p) = &country_probs {
            if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(bad("country probabilities must be finite and nonnegative".into()));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(bad(format!("country probabilities sum to {sum}")));
            }
        }
        Ok(Self {
            id,
            age,
            emotion,
            country_probs,
        })
    }

    /// Most probable country (lowest index on ties).
    pub fn country_argmax(&self) -> Option<usize> {
        let probs = self.country_probs.as_ref()?;
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Some(best)
    }

    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::Age => self.age.is_some(),
            Task::Emotion => self.emotion.is_some(),
            Task::Country => self.country_probs.is_some(),
        }
    }
}

/// Prediction file: header `id,age,e_0..,p_0..` followed by one row per
/// utterance. Cells of tasks a model does not predict are left empty.
pub fn write_predictions(preds: &[PredictionSet], n_emotions: usize, n_countries: usize) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "age".to_string()];
    header.extend((0..n_emotions).map(emotion_column));
    header.extend((0..n_countries).map(|k| format!("p_{k}")));
    writer.write_record(&header).expect("in-memory write");
    for p in preds {
        let mut row = vec![p.id.clone(), p.age.map(|a| a.to_string()).unwrap_or_default()];
        match &p.emotion {
            Some(e) => row.extend(e.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), n_emotions)),
        }
        match &p.country_probs {
            Some(c) => row.extend(c.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), n_countries)),
        }
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

/// Parses a prediction file. Returns the predictions together with the
/// emotion and country counts declared by the header.
pub fn read_predictions(text: &str) -> Result<(Vec<PredictionSet>, usize, usize), ManifestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("id") {
        return Err(ManifestError::MissingColumn("id".into()));
    }
    if headers.get(1) != Some("age") {
        return Err(ManifestError::MissingColumn("age".into()));
    }
    let n_emotions = headers.iter().filter(|h| h.starts_with("e_")).count();
    let n_countries = headers.iter().filter(|h| h.starts_with("p_")).count();
    for i in 0..n_emotions {
        if headers.get(2 + i) != Some(emotion_column(i).as_str()) {
            return Err(ManifestError::MissingColumn(emotion_column(i)));
        }
    }
    for k in 0..n_countries {
        if headers.get(2 + n_emotions + k) != Some(format!("p_{k}").as_str()) {
            return Err(ManifestError::MissingColumn(format!("p_{k}")));
        }
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateId(id));
        }
        let block = |start: usize, len: usize, prefix: &str| -> Result<Option<Vec<f64>>, ManifestError> {
            let cells = &row.iter().collect::<Vec<_>>()[start..start + len];
            let filled = cells.iter().filter(|c| !c.is_empty()).count();
            if filled == 0 || len == 0 {
                return Ok(None);
            }
            if filled != len {
                return Err(ManifestError::Malformed {
                    line,
                    field: format!("{prefix}*"),
                    value: "partially empty block".into(),
                });
            }
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| parse_f64(line, &format!("{prefix}{i}"), c))
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
        };
        let age = if row[1].is_empty() {
            None
        } else {
            Some(parse_f64(line, "age", &row[1])?)
        };
        let emotion = block(2, n_emotions, "e_")?;
        let probs = block(2 + n_emotions, n_countries, "p_")?;
        out.push(PredictionSet::new(id, age, emotion, probs)?);
    }
    Ok((out, n_emotions, n_countries))
}

/// Id-indexed view of the labelled records of a manifest.
pub fn label_map(records: &[UtteranceRecord]) -> HashMap<String, LabelSet> {
    records
        .iter()
        .filter_map(|r| r.labels.clone().map(|l| (r.id.clone(), l)))
        .collect()
}
