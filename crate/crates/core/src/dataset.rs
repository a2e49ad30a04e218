//! Participants, eating episodes, images and their Likert responses.
//!
//! The manifest is a JSON document:
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "episodes": [
//!     {
//!       "participant_id": "P001",
//!       "episode_id": "E01",
//!       "start_time": 0.0,
//!       "end_time": 600.0,
//!       "responses": { "Q1": 4, "Q2": 3, "Q3": 2, "Q4": 5, "Q5": 1, "Q6": 3 },
//!       "images": [ { "image_id": "P001_E01_0000", "timestamp": 4.5 } ]
//!     }
//!   ]
//! }
//! ```
//!
//! Unknown fields are rejected. Loading only checks schema conformance;
//! [`validate_manifest`] checks the remaining invariants so that broken
//! fixtures can still be loaded.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest schema_version {found} (expected {expected})")]
    SchemaVersion { found: String, expected: u32 },
    #[error("episode {participant_id}/{episode_id}: {message}")]
    Schema {
        participant_id: String,
        episode_id: String,
        message: String,
    },
}

/// One of the six receptivity questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuestionId {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    Q6,
}

impl QuestionId {
    pub const ALL: [QuestionId; 6] = [
        QuestionId::Q1,
        QuestionId::Q2,
        QuestionId::Q3,
        QuestionId::Q4,
        QuestionId::Q5,
        QuestionId::Q6,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionId::Q1 => "Q1",
            QuestionId::Q2 => "Q2",
            QuestionId::Q3 => "Q3",
            QuestionId::Q4 => "Q4",
            QuestionId::Q5 => "Q5",
            QuestionId::Q6 => "Q6",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|q| q.as_str() == s)
    }
}

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A 5-point Likert rating, always within 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LikertValue(u8);

impl LikertValue {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn new(value: u8) -> Option<Self> {
        (Self::MIN..=Self::MAX)
            .contains(&value)
            .then_some(Self(value))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based class index for the 5-class setting.
    pub fn class_index(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        u8::try_from(i + 1).ok().and_then(Self::new)
    }

    pub fn all() -> impl Iterator<Item = LikertValue> {
        (Self::MIN..=Self::MAX).map(LikertValue)
    }
}

/// Merged agreement label: 0 = "not agree" (Likert 1-3), 1 = "agree" (Likert 4-5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BinaryLabel(u8);

impl BinaryLabel {
    pub const NOT_AGREE: BinaryLabel = BinaryLabel(0);
    pub const AGREE: BinaryLabel = BinaryLabel(1);

    pub fn get(self) -> u8 {
        self.0
    }
}

pub fn merge_binary(v: LikertValue) -> BinaryLabel {
    if v.get() >= 4 {
        BinaryLabel::AGREE
    } else {
        BinaryLabel::NOT_AGREE
    }
}

/// Label granularity used for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Likert5,
    Binary,
}

impl Setting {
    pub fn n_classes(self) -> usize {
        match self {
            Setting::Likert5 => 5,
            Setting::Binary => 2,
        }
    }

    pub fn class_of(self, v: LikertValue) -> usize {
        match self {
            Setting::Likert5 => v.class_index(),
            Setting::Binary => merge_binary(v).get() as usize,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Likert5 => "likert5",
            Setting::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "likert5" => Some(Setting::Likert5),
            "binary" => Some(Setting::Binary),
            _ => None,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Total map from the six questions to a Likert rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Responses([LikertValue; QuestionId::COUNT]);

impl Responses {
    pub fn new(values: [LikertValue; QuestionId::COUNT]) -> Self {
        Self(values)
    }

    pub fn get(&self, q: QuestionId) -> LikertValue {
        self.0[q.index()]
    }

    pub fn set(&mut self, q: QuestionId, v: LikertValue) {
        self.0[q.index()] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (QuestionId, LikertValue)> + '_ {
        QuestionId::ALL.iter().map(move |&q| (q, self.get(q)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub image_id: String,
    /// Seconds since session start.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub participant_id: String,
    pub episode_id: String,
    pub start_time: f64,
    pub end_time: f64,
    pub responses: Responses,
    pub images: Vec<ImageRef>,
}

impl EpisodeRecord {
    pub fn key(&self) -> EpisodeKey {
        EpisodeKey {
            participant_id: self.participant_id.clone(),
            episode_id: self.episode_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpisodeKey {
    pub participant_id: String,
    pub episode_id: String,
}

impl fmt::Display for EpisodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.participant_id, self.episode_id)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub episodes: Vec<EpisodeRecord>,
}

impl DatasetManifest {
    pub fn new(episodes: Vec<EpisodeRecord>) -> Self {
        Self { episodes }
    }

    /// Distinct participant ids in byte order.
    pub fn participants(&self) -> Vec<String> {
        self.episodes
            .iter()
            .map(|e| e.participant_id.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect()
    }

    pub fn episodes_of<'a>(
        &'a self,
        participant_id: &'a str,
    ) -> impl Iterator<Item = &'a EpisodeRecord> + 'a {
        self.episodes
            .iter()
            .filter(move |e| e.participant_id == participant_id)
    }
}

// On-disk mirror of the manifest; converted to the domain types with
// episode-level error context.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema_version: u32,
    episodes: Vec<RawEpisode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpisode {
    participant_id: String,
    episode_id: String,
    start_time: f64,
    end_time: f64,
    responses: BTreeMap<String, i64>,
    images: Vec<ImageRef>,
}

impl RawEpisode {
    fn into_record(self) -> Result<EpisodeRecord, ManifestError> {
        let schema_err = |message: String| ManifestError::Schema {
            participant_id: self.participant_id.clone(),
            episode_id: self.episode_id.clone(),
            message,
        };
        if let Some(unknown) = self
            .responses
            .keys()
            .find(|k| QuestionId::parse(k).is_none())
        {
            return Err(schema_err(format!("unknown response key `{unknown}`")));
        }
        let mut values = [LikertValue(1); QuestionId::COUNT];
        for q in QuestionId::ALL {
            let raw = *self
                .responses
                .get(q.as_str())
                .ok_or_else(|| schema_err(format!("missing field `responses.{q}`")))?;
            values[q.index()] = u8::try_from(raw)
                .ok()
                .and_then(LikertValue::new)
                .ok_or_else(|| {
                    schema_err(format!(
                        "responses.{q} = {raw} is not a Likert value in 1..=5"
                    ))
                })?;
        }
        Ok(EpisodeRecord {
            responses: Responses(values),
            participant_id: self.participant_id,
            episode_id: self.episode_id,
            start_time: self.start_time,
            end_time: self.end_time,
            images: self.images,
        })
    }

    fn from_record(e: &EpisodeRecord) -> Self {
        RawEpisode {
            participant_id: e.participant_id.clone(),
            episode_id: e.episode_id.clone(),
            start_time: e.start_time,
            end_time: e.end_time,
            responses: e
                .responses
                .iter()
                .map(|(q, v)| (q.as_str().to_owned(), i64::from(v.get())))
                .collect(),
            images: e.images.clone(),
        }
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest, ManifestError> {
    let malformed = |source| ManifestError::Malformed {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(malformed)?;
    match value.get("schema_version") {
        Some(v) if v.as_u64() == Some(u64::from(SCHEMA_VERSION)) => {}
        Some(v) => {
            return Err(ManifestError::SchemaVersion {
                found: v.to_string(),
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(ManifestError::SchemaVersion {
                found: "<missing>".into(),
                expected: SCHEMA_VERSION,
            })
        }
    }
    let raw: RawManifest = serde_json::from_value(value).map_err(malformed)?;
    let episodes = raw
        .episodes
        .into_iter()
        .map(RawEpisode::into_record)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetManifest { episodes })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ManifestError::NotFound(path.to_path_buf())
        } else {
            ManifestError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_manifest(&text, path)
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let raw = RawManifest {
        schema_version: SCHEMA_VERSION,
        episodes: m.episodes.iter().map(RawEpisode::from_record).collect(),
    };
    let mut s = serde_json::to_string_pretty(&raw).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn save_manifest(path: &Path, m: &DatasetManifest) -> Result<(), ManifestError> {
    fs::write(path, manifest_to_string(m)).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EndNotAfterStart,
    NonFiniteTime,
    NegativeTimestamp,
    DuplicateEpisode,
    DuplicateImageId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rule: Rule,
    /// Episode key, optionally followed by the offending image id.
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Check the manifest invariants that parsing does not enforce.
///
/// Images whose timestamps fall outside the episode window are allowed;
/// frame selection drops them.
pub fn validate_manifest(m: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut episode_keys = HashSet::new();
    let mut image_owner: HashMap<&str, EpisodeKey> = HashMap::new();

    for e in &m.episodes {
        let key = e.key();
        if !e.start_time.is_finite() || !e.end_time.is_finite() {
            out.push(Violation {
                rule: Rule::NonFiniteTime,
                location: key.to_string(),
                message: "start_time and end_time must be finite".into(),
            });
        } else if e.end_time <= e.start_time {
            out.push(Violation {
                rule: Rule::EndNotAfterStart,
                location: key.to_string(),
                message: format!(
                    "end_time {} is not after start_time {}",
                    e.end_time, e.start_time
                ),
            });
        }
        if !episode_keys.insert(key.clone()) {
            out.push(Violation {
                rule: Rule::DuplicateEpisode,
                location: key.to_string(),
                message: "duplicate (participant_id, episode_id)".into(),
            });
        }
        for img in &e.images {
            let loc = format!("{key} image {}", img.image_id);
            if !img.timestamp.is_finite() {
                out.push(Violation {
                    rule: Rule::NonFiniteTime,
                    location: loc.clone(),
                    message: "timestamp must be finite".into(),
                });
            } else if img.timestamp < 0.0 {
                out.push(Violation {
                    rule: Rule::NegativeTimestamp,
                    location: loc.clone(),
                    message: format!("timestamp {} is negative", img.timestamp),
                });
            }
            if let Some(first) = image_owner.get(img.image_id.as_str()) {
                out.push(Violation {
                    rule: Rule::DuplicateImageId,
                    location: loc,
                    message: format!("image_id `{}` already used in {first}", img.image_id),
                });
            } else {
                image_owner.insert(&img.image_id, key.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n_participants: usize,
    pub n_episodes: usize,
    pub n_images: usize,
    pub images_per_participant: f64,
    pub episodes_per_participant: f64,
}

impl DatasetStats {
    /// An empty manifest; the means are reported as 0.
    pub fn is_degenerate(&self) -> bool {
        self.n_participants == 0
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_participants={}", self.n_participants)?;
        writeln!(f, "n_episodes={}", self.n_episodes)?;
        writeln!(f, "n_images={}", self.n_images)?;
        writeln!(
            f,
            "images_per_participant={:.3}",
            self.images_per_participant
        )?;
        write!(
            f,
            "episodes_per_participant={:.3}",
            self.episodes_per_participant
        )?;
        if self.is_degenerate() {
            write!(f, "\ndegenerate=true (empty manifest; means defined as 0)")?;
        }
        Ok(())
    }
}

pub fn dataset_stats(m: &DatasetManifest) -> DatasetStats {
    let n_participants = m
        .episodes
        .iter()
        .map(|e| e.participant_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    let n_episodes = m.episodes.len();
    let n_images = m.episodes.iter().map(|e| e.images.len()).sum();
    let ratio = |n: usize| {
        if n_participants == 0 {
            0.0
        } else {
            n as f64 / n_participants as f64
        }
    };
    DatasetStats {
        n_participants,
        n_episodes,
        n_images,
        images_per_participant: ratio(n_images),
        episodes_per_participant: ratio(n_episodes),
    }
}
