//! Synthetic datasets with a known, decodable label signal.
//!
//! Every participant draws a latent receptivity score. Each episode's six
//! labels band `ρ·latent + √(1−ρ²)·noise` into Likert 1..5, so questions
//! co-vary through the shared latent. Frame embeddings scatter isotropically
//! around an episode mean `amplitude · Σ_q u[q][y_q]`, where `u` is a hidden
//! orthonormal codebook of 6 × 5 directions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    save_manifest, DatasetManifest, EpisodeRecord, ImageRef, LikertValue, ManifestError,
    QuestionId, Responses, Setting,
};
use crate::model::argmax;
use crate::sequence::select_frames;
use crate::store::{save_store, EmbeddingStore, StoreError};

pub const LIKERT_LEVELS: usize = 5;
/// Number of codebook directions; the embedding dimension must be at least this.
pub const CODEBOOK_SIZE: usize = QuestionId::COUNT * LIKERT_LEVELS;

/// Standard-normal quintile boundaries: an unshifted score lands in each
/// Likert level with probability 1/5.
const BANDS: [f64; 4] = [
    -0.841_621_233_572_914_3,
    -0.253_347_103_135_799_7,
    0.253_347_103_135_799_7,
    0.841_621_233_572_914_3,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Labels are decodable from the episode-mean embedding.
    PlantedLinear,
    /// Planted embeddings, but label vectors permuted across episodes.
    Shuffled,
    /// Embeddings planted from an independent label draw.
    PureNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_participants: usize,
    /// Mean episodes per participant; every participant has at least one.
    pub episodes_per_participant: f64,
    pub frame_interval_s: f64,
    pub median_duration_s: f64,
    /// Log-space standard deviation of episode durations.
    pub duration_log_sigma: f64,
    pub embedding_dim: usize,
    pub signal_mode: SignalMode,
    pub noise_sigma: f64,
    pub amplitude: f64,
    /// Weight ρ ∈ [0, 1] of the participant latent in every label score.
    pub latent_correlation: f64,
    /// Added to every label score; positive values skew labels upward.
    pub label_shift: f64,
    /// Probability that an episode also lists frames outside its window.
    pub stray_frame_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_participants: 40,
            episodes_per_participant: 2.2,
            frame_interval_s: 10.0,
            median_duration_s: 480.0,
            duration_log_sigma: 0.6,
            embedding_dim: 512,
            signal_mode: SignalMode::PlantedLinear,
            noise_sigma: 1.0,
            amplitude: 3.0,
            latent_correlation: 0.6,
            label_shift: 0.0,
            stray_frame_prob: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
    #[error("cannot parse synthetic spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> SyntheticError {
    SyntheticError::Invalid {
        field,
        message: message.into(),
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self, SyntheticError> {
        let spec: Self = toml::from_str(text).map_err(|e| SyntheticError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let finite_pos = |field, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {x}")))
            }
        };
        if self.n_participants == 0 {
            return Err(invalid("n_participants", "must be positive"));
        }
        if !(self.episodes_per_participant >= 1.0 && self.episodes_per_participant.is_finite()) {
            return Err(invalid(
                "episodes_per_participant",
                format!("must be at least 1, got {}", self.episodes_per_participant),
            ));
        }
        finite_pos("frame_interval_s", self.frame_interval_s)?;
        finite_pos("median_duration_s", self.median_duration_s)?;
        finite_pos("amplitude", self.amplitude)?;
        if !(self.duration_log_sigma >= 0.0 && self.duration_log_sigma.is_finite()) {
            return Err(invalid(
                "duration_log_sigma",
                "must be finite and non-negative",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma", "must be finite and non-negative"));
        }
        if self.embedding_dim < CODEBOOK_SIZE {
            return Err(invalid(
                "embedding_dim",
                format!(
                    "must be at least {CODEBOOK_SIZE}, got {}",
                    self.embedding_dim
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.latent_correlation) {
            return Err(invalid("latent_correlation", "must lie in [0, 1]"));
        }
        if !self.label_shift.is_finite() {
            return Err(invalid("label_shift", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.stray_frame_prob) {
            return Err(invalid("stray_frame_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Orthonormal directions `u[q][c]`, one per question and Likert level.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl Codebook {
    /// Gram-Schmidt over Gaussian draws; deterministic in `seed`.
    pub fn generate(dim: usize, seed: u64) -> Self {
        assert!(
            dim >= CODEBOOK_SIZE,
            "codebook needs dim >= {CODEBOOK_SIZE}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(CODEBOOK_SIZE);
        while vectors.len() < CODEBOOK_SIZE {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            // Two passes keep the basis orthogonal to machine precision.
            for _ in 0..2 {
                for u in &vectors {
                    let d = dot(&v, u);
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                vectors.push(v);
            }
        }
        Self { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn direction(&self, q: QuestionId, level: LikertValue) -> &[f64] {
        &self.vectors[q.index() * LIKERT_LEVELS + level.class_index()]
    }

    /// Episode mean for a label vector.
    pub fn mean(&self, labels: &Responses, amplitude: f64) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (q, v) in labels.iter() {
            for (x, u) in m.iter_mut().zip(self.direction(q, v)) {
                *x += amplitude * u;
            }
        }
        m
    }

    /// Nearest centroid for question `q`: the level whose direction has the
    /// largest inner product with `x`.
    pub fn decode(&self, x: &[f64], q: QuestionId) -> LikertValue {
        let scores: Vec<f64> = LikertValue::all()
            .map(|v| dot(x, self.direction(q, v)))
            .collect();
        LikertValue::from_class_index(argmax(&scores)).expect("five levels")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// One record per image id listed in the manifest.
    pub records: Vec<(String, Vec<f32>)>,
    pub codebook: Codebook,
}

impl SyntheticDataset {
    pub fn store(&self) -> Result<EmbeddingStore, StoreError> {
        EmbeddingStore::from_records(self.codebook.dim(), self.records.iter().cloned())
    }
}

fn band(score: f64) -> LikertValue {
    let level = BANDS.iter().filter(|&&b| score > b).count();
    LikertValue::from_class_index(level).expect("five bands")
}

fn draw_labels(rng: &mut ChaCha8Rng, latent: f64, spec: &SyntheticSpec) -> Responses {
    let rho = spec.latent_correlation;
    let own = (1.0 - rho * rho).sqrt();
    let mut values = [LikertValue::new(1).expect("valid"); QuestionId::COUNT];
    for v in &mut values {
        let eps: f64 = rng.sample(StandardNormal);
        *v = band(rho * latent + own * eps + spec.label_shift);
    }
    Responses::new(values)
}

struct Draft {
    record: EpisodeRecord,
    /// Labels the embeddings are planted from.
    planted: Responses,
    /// Aligned with `record.images`: true for out-of-window frames.
    stray: Vec<bool>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset, SyntheticError> {
    spec.validate()?;
    let codebook = Codebook::generate(spec.embedding_dim, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let extra = spec.episodes_per_participant - 1.0;
    let poisson = (extra > 0.0).then(|| Poisson::new(extra).expect("positive rate"));
    let duration = LogNormal::new(spec.median_duration_s.ln(), spec.duration_log_sigma)
        .expect("validated parameters");

    let mut drafts: Vec<Draft> = Vec::new();
    for p in 0..spec.n_participants {
        let participant_id = format!("P{:03}", p + 1);
        let latent: f64 = rng.sample(StandardNormal);
        let n_episodes = 1 + poisson.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);
        for e in 0..n_episodes {
            let episode_id = format!("E{:02}", e + 1);
            let labels = draw_labels(&mut rng, latent, spec);
            let planted = match spec.signal_mode {
                SignalMode::PureNoise => {
                    let unrelated: f64 = rng.sample(StandardNormal);
                    draw_labels(&mut rng, unrelated, spec)
                }
                _ => labels,
            };
            // One episode per day, starting between 08:00 and 20:00.
            let start = e as f64 * 86_400.0 + rng.random_range(28_800.0..72_000.0);
            let dur = duration.sample(&mut rng).max(1.5 * spec.frame_interval_s);
            let n_frames = ((dur / spec.frame_interval_s).floor() as usize).max(1);
            let prefix = format!("{participant_id}_{episode_id}");
            let mut images: Vec<(ImageRef, bool)> = (0..n_frames)
                .map(|k| {
                    let jitter = rng.random_range(-0.2..0.2);
                    let img = ImageRef {
                        image_id: format!("{prefix}_F{k:04}"),
                        timestamp: start + (k as f64 + 0.5 + jitter) * spec.frame_interval_s,
                    };
                    (img, false)
                })
                .collect();
            if rng.random::<f64>() < spec.stray_frame_prob {
                for k in 0..rng.random_range(1..=3usize) {
                    let gap = rng.random_range(1.0..600.0);
                    let timestamp = if rng.random::<bool>() {
                        start - gap
                    } else {
                        start + dur + gap
                    };
                    let img = ImageRef {
                        image_id: format!("{prefix}_S{k:02}"),
                        timestamp,
                    };
                    images.push((img, true));
                }
            }
            // The sequence builder must not rely on listing order.
            images.shuffle(&mut rng);
            let (images, stray) = images.into_iter().unzip();
            drafts.push(Draft {
                record: EpisodeRecord {
                    participant_id: participant_id.clone(),
                    episode_id,
                    start_time: start,
                    end_time: start + dur,
                    responses: labels,
                    images,
                },
                planted,
                stray,
            });
        }
    }

    if spec.signal_mode == SignalMode::Shuffled {
        let mut labels: Vec<Responses> = drafts.iter().map(|d| d.record.responses).collect();
        labels.shuffle(&mut rng);
        for (d, l) in drafts.iter_mut().zip(labels) {
            d.record.responses = l;
        }
    }

    let mut records = Vec::new();
    for (i, d) in drafts.iter().enumerate() {
        let mut erng = ChaCha8Rng::seed_from_u64(spec.seed);
        erng.set_stream(i as u64 + 1);
        let mean = codebook.mean(&d.planted, spec.amplitude);
        let stray_scale = spec.noise_sigma.max(spec.amplitude);
        for (img, &is_stray) in d.record.images.iter().zip(&d.stray) {
            let v: Vec<f32> = if is_stray {
                (0..spec.embedding_dim)
                    .map(|_| (stray_scale * erng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            } else {
                mean.iter()
                    .map(|m| (m + spec.noise_sigma * erng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            };
            records.push((img.image_id.clone(), v));
        }
    }
    records.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));

    Ok(SyntheticDataset {
        manifest: DatasetManifest::new(drafts.into_iter().map(|d| d.record).collect()),
        records,
        codebook,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORE_FILE: &str = "embeddings.emb";
pub const SPEC_FILE: &str = "spec.toml";

/// Write manifest, embedding store and a copy of the spec into `dir`.
pub fn save_dataset(
    dir: &Path,
    spec: &SyntheticSpec,
    ds: &SyntheticDataset,
) -> Result<(), SyntheticError> {
    fs::create_dir_all(dir).map_err(|source| SyntheticError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    save_manifest(&dir.join(MANIFEST_FILE), &ds.manifest)?;
    save_store(&dir.join(STORE_FILE), &ds.store()?)?;
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, spec.to_toml()).map_err(|source| SyntheticError::Io {
        path: spec_path.display().to_string(),
        source,
    })
}

/// Nearest-centroid accuracy per question, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub setting: Setting,
    pub per_question: [f64; QuestionId::COUNT],
    pub average: f64,
    pub n_episodes: usize,
    /// Episodes without any in-window frame; not scored.
    pub n_empty: usize,
}

/// Decode every episode's mean embedding (over the first `max_len`
/// chronological frames) with the codebook and score it against the
/// manifest labels. Likert predictions are merged for the binary setting.
pub fn oracle_accuracy(
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    codebook: &Codebook,
    setting: Setting,
    max_len: usize,
) -> Result<OracleReport, StoreError> {
    let mut hits = [0usize; QuestionId::COUNT];
    let (mut n, mut n_empty) = (0usize, 0usize);
    for e in &manifest.episodes {
        let frames = select_frames(e);
        let frames = &frames[..frames.len().min(max_len)];
        if frames.is_empty() {
            n_empty += 1;
            continue;
        }
        let mut mean = vec![0.0f64; store.dimension()];
        for img in frames {
            for (m, &x) in mean.iter_mut().zip(store.get(&img.image_id)?) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= frames.len() as f64);
        for q in QuestionId::ALL {
            let predicted = setting.class_of(codebook.decode(&mean, q));
            if predicted == setting.class_of(e.responses.get(q)) {
                hits[q.index()] += 1;
            }
        }
        n += 1;
    }
    let per_question = hits.map(|h| {
        if n == 0 {
            0.0
        } else {
            100.0 * h as f64 / n as f64
        }
    });
    Ok(OracleReport {
        setting,
        per_question,
        average: per_question.iter().sum::<f64>() / QuestionId::COUNT as f64,
        n_episodes: n,
        n_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_manifest;

    fn small(mode: SignalMode, sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_participants: 12,
            embedding_dim: 48,
            signal_mode: mode,
            noise_sigma: sigma,
            stray_frame_prob: 0.5,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn codebook_is_orthonormal() {
        let cb = Codebook::generate(40, 3);
        for (i, a) in cb.vectors.iter().enumerate() {
            for (j, b) in cb.vectors.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - expected).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn banding_is_monotone_and_quintile() {
        assert_eq!(band(-5.0).get(), 1);
        assert_eq!(band(0.0).get(), 3);
        assert_eq!(band(5.0).get(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        let n = 50_000;
        for _ in 0..n {
            counts[band(rng.sample(StandardNormal)).class_index()] += 1;
        }
        for c in counts {
            let p = c as f64 / n as f64;
            assert!((p - 0.2).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn generation_is_valid_and_deterministic() {
        let spec = small(SignalMode::PlantedLinear, 1.0);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.records, b.records);
        assert!(validate_manifest(&a.manifest).is_empty());
        assert_eq!(a.manifest.participants().len(), 12);
        let store = a.store().unwrap();
        for e in &a.manifest.episodes {
            for img in &e.images {
                assert!(store.contains(&img.image_id));
            }
        }
        let strays = a
            .manifest
            .episodes
            .iter()
            .flat_map(|e| e.images.iter().map(move |i| (e, i)))
            .filter(|(e, i)| i.timestamp < e.start_time || i.timestamp > e.end_time)
            .count();
        assert!(strays > 0, "stray frames requested but none generated");
    }

    #[test]
    fn noiseless_planted_oracle_is_perfect() {
        let spec = small(SignalMode::PlantedLinear, 0.0);
        let ds = generate(&spec).unwrap();
        let store = ds.store().unwrap();
        for setting in [Setting::Likert5, Setting::Binary] {
            let r = oracle_accuracy(&ds.manifest, &store, &ds.codebook, setting, 100).unwrap();
            assert_eq!(r.per_question, [100.0; 6], "{setting}");
            assert_eq!(r.n_empty, 0);
        }
    }

    #[test]
    fn shuffled_keeps_embeddings_and_label_multiset() {
        let planted = generate(&small(SignalMode::PlantedLinear, 1.0)).unwrap();
        let shuffled = generate(&small(SignalMode::Shuffled, 1.0)).unwrap();
        assert_eq!(planted.records, shuffled.records);
        let sorted = |ds: &SyntheticDataset| {
            let mut v: Vec<Vec<u8>> = ds
                .manifest
                .episodes
                .iter()
                .map(|e| e.responses.iter().map(|(_, v)| v.get()).collect())
                .collect();
            v.sort();
            v
        };
        assert_eq!(sorted(&planted), sorted(&shuffled));
        assert_ne!(planted.manifest, shuffled.manifest);
    }

    #[test]
    fn label_shift_skews_marginals() {
        let spec = SyntheticSpec {
            label_shift: 1.0,
            ..small(SignalMode::PlantedLinear, 1.0)
        };
        let ds = generate(&spec).unwrap();
        let (mut high, mut total) = (0, 0);
        for e in &ds.manifest.episodes {
            for (_, v) in e.responses.iter() {
                high += usize::from(v.get() >= 4);
                total += 1;
            }
        }
        // Unshifted P(agree) = 0.4; shifted by one standard deviation ≈ 0.75.
        assert!(high as f64 / total as f64 > 0.6, "{high}/{total}");
    }

    #[test]
    fn spec_validation_names_fields() {
        let err = SyntheticSpec::from_toml("embedding_dim = 8").unwrap_err();
        assert!(err.to_string().contains("embedding_dim"), "{err}");
        let err = SyntheticSpec::from_toml("bogus = 1").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let spec = small(SignalMode::Shuffled, 0.5);
        assert_eq!(SyntheticSpec::from_toml(&spec.to_toml()).unwrap(), spec);
    }
}
