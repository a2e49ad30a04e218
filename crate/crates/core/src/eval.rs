//! Participant-level k-fold cross-validation with random and majority
//! baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{validate_manifest, DatasetManifest, QuestionId, Setting};
use crate::model::{forward, predict_from_logits, Labels, ModelConfig, ModelError, ModelParams};
use crate::sequence::{build_sequence, EpisodeSequence, SequenceError};
use crate::store::EmbeddingStore;
use crate::train::{train_model, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need k >= 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("{participants} participants cannot fill {k} folds")]
    TooFewParticipants { participants: usize, k: usize },
    #[error("n_classes must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("empty label list")]
    EmptyLabels,
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("manifest is invalid: {0}")]
    InvalidManifest(String),
    #[error("fold {fold}: {message}")]
    EmptyFold { fold: usize, message: String },
    #[error("fold {fold}: participant {participant} is in both training and validation")]
    Leakage { fold: usize, participant: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Participant → fold index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, participant: &str) -> Option<usize> {
        self.folds.get(participant).copied()
    }

    /// Participants of `fold`, in byte order.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.folds.values().for_each(|&f| sizes[f] += 1);
        sizes
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.folds.iter().map(|(p, &f)| (p.as_str(), f))
    }
}

/// Shuffle the distinct participant ids with `seed`, then deal them out
/// round-robin, so fold sizes differ by at most one.
pub fn make_folds(
    participants: &[String],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewFolds(k));
    }
    // Sorting first makes the result independent of input order.
    let mut ids: Vec<&String> = participants
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < k {
        return Err(EvalError::TooFewParticipants {
            participants: ids.len(),
            k,
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}

/// A uniformly random class index.
pub fn random_baseline(n_classes: usize, rng: &mut impl Rng) -> Result<usize, EvalError> {
    if n_classes < 2 {
        return Err(EvalError::TooFewClasses(n_classes));
    }
    Ok(rng.random_range(0..n_classes))
}

/// Most frequent label; ties go to the smallest class index.
pub fn majority_baseline(train_labels: &[usize]) -> Result<usize, EvalError> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in train_labels {
        *counts.entry(l).or_default() += 1;
    }
    // Iterating in ascending class order and replacing only on a strictly
    // larger count keeps the smallest class on ties.
    let mut best: Option<(usize, usize)> = None;
    for (class, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((class, n));
        }
    }
    best.map(|(c, _)| c).ok_or(EvalError::EmptyLabels)
}

/// Percentage of positions where `preds` and `labels` agree.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyLabels);
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    Majority,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Random, Method::Majority, Method::Proposed];

    pub fn label(self) -> &'static str {
        match self {
            Method::Random => "Random",
            Method::Majority => "Majority",
            Method::Proposed => "Proposed",
        }
    }
}

/// How per-fold results combine into one number per question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Count hits over all held-out episodes of all folds.
    #[default]
    Pooled,
    /// Mean of the per-fold accuracies.
    FoldAveraged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub setting: Setting,
    pub aggregation: Aggregation,
    pub train: TrainConfig,
    /// Worker threads for fold-level parallelism; results do not depend on it.
    pub jobs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            setting: Setting::Likert5,
            aggregation: Aggregation::Pooled,
            train: TrainConfig::default(),
            jobs: 1,
        }
    }
}

/// Held-out results of one fold. `hits[m][q]` counts correct predictions of
/// method `m` on question `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_participants: usize,
    pub val_participants: usize,
    pub train_episodes: usize,
    pub val_episodes: usize,
    /// Held-out episodes without frames, excluded from scoring.
    pub val_empty: usize,
    pub hits: [[usize; QuestionId::COUNT]; 3],
    pub majority_class: [usize; QuestionId::COUNT],
    pub final_train_loss: f64,
}

impl FoldResult {
    pub fn accuracy(&self, m: Method, q: QuestionId) -> f64 {
        100.0 * self.hits[m as usize][q.index()] as f64 / self.val_episodes as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub aggregation: Aggregation,
    /// `accuracy[m][q]` in percent, unrounded.
    pub accuracy: [[f64; QuestionId::COUNT]; 3],
    pub folds: Vec<FoldResult>,
    pub seed: u64,
    pub config_hash: String,
    pub n_participants: usize,
    pub n_episodes: usize,
    /// Episodes with no in-window frame; neither trained on nor scored.
    pub n_empty_excluded: usize,
}

impl EvalReport {
    pub fn get(&self, m: Method, q: QuestionId) -> f64 {
        self.accuracy[m as usize][q.index()]
    }

    /// Mean of the six unrounded per-question accuracies.
    pub fn average(&self, m: Method) -> f64 {
        self.accuracy[m as usize].iter().sum::<f64>() / QuestionId::COUNT as f64
    }
}

fn class_labels(seq: &EpisodeSequence, setting: Setting) -> Labels {
    let mut out = [0; QuestionId::COUNT];
    for (q, v) in seq.labels.iter() {
        out[q.index()] = setting.class_of(v);
    }
    out
}

/// Episodes scored per forward call at evaluation time.
const EVAL_BATCH: usize = 32;

fn predict_all(
    params: &ModelParams<f32>,
    seqs: &[&EpisodeSequence],
) -> Result<Vec<Labels>, ModelError> {
    let n_classes = params.config().n_classes;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let logits = forward(params, chunk)?;
        let per_episode = QuestionId::COUNT * n_classes;
        for row in logits.data().chunks_exact(per_episode) {
            out.push(predict_from_logits(row, n_classes));
        }
    }
    Ok(out)
}

struct FoldInput<'a> {
    fold: usize,
    train: Vec<&'a EpisodeSequence>,
    val: Vec<&'a EpisodeSequence>,
    train_participants: usize,
    val_participants: usize,
    val_empty: usize,
}

fn run_fold(
    input: &FoldInput<'_>,
    model: &ModelConfig,
    opts: &CvOptions,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<(FoldResult, ModelParams<f32>), EvalError> {
    let fold_seed = opts.seed ^ input.fold as u64;
    let setting = opts.setting;
    let train_labels: Vec<Labels> = input
        .train
        .iter()
        .map(|s| class_labels(s, setting))
        .collect();
    let val_labels: Vec<Labels> = input.val.iter().map(|s| class_labels(s, setting)).collect();

    let epochs = opts.train.epochs;
    let outcome = train_model(
        model,
        &opts.train,
        &input.train,
        &train_labels,
        fold_seed,
        |e, loss| {
            if (e + 1) % 10 == 0 || e + 1 == epochs {
                progress(&format!(
                    "fold {} epoch {}/{} loss {loss:.4}",
                    input.fold,
                    e + 1,
                    epochs
                ));
            }
        },
    )?;
    let proposed = predict_all(&outcome.params, &input.val)?;

    let mut majority_class = [0; QuestionId::COUNT];
    for q in QuestionId::ALL {
        let col: Vec<usize> = train_labels.iter().map(|l| l[q.index()]).collect();
        majority_class[q.index()] = majority_baseline(&col)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    rng.set_stream(3);

    let mut hits = [[0usize; QuestionId::COUNT]; 3];
    for (truth, pred) in val_labels.iter().zip(&proposed) {
        for q in 0..QuestionId::COUNT {
            let random = random_baseline(setting.n_classes(), &mut rng)?;
            hits[Method::Random as usize][q] += usize::from(random == truth[q]);
            hits[Method::Majority as usize][q] += usize::from(majority_class[q] == truth[q]);
            hits[Method::Proposed as usize][q] += usize::from(pred[q] == truth[q]);
        }
    }
    let result = FoldResult {
        fold: input.fold,
        seed: fold_seed,
        train_participants: input.train_participants,
        val_participants: input.val_participants,
        train_episodes: input.train.len(),
        val_episodes: input.val.len(),
        val_empty: input.val_empty,
        hits,
        majority_class,
        final_train_loss: *outcome.epoch_losses.last().expect("at least one epoch"),
    };
    Ok((result, outcome.params))
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: EvalReport,
    /// Final weights of each fold's model, in fold order.
    pub fold_models: Vec<ModelParams<f32>>,
}

/// Train a fresh model per fold on the other folds' participants and score
/// it, together with both baselines, on the held-out participants.
///
/// The model's class count is taken from `opts.setting`.
pub fn run_cross_validation(
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    model: &ModelConfig,
    opts: &CvOptions,
    config_hash: &str,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<CvOutcome, EvalError> {
    let violations = validate_manifest(manifest);
    if let Some(v) = violations.first() {
        return Err(EvalError::InvalidManifest(format!(
            "{v} ({} violation(s) in total)",
            violations.len()
        )));
    }
    let model = ModelConfig {
        n_classes: opts.setting.n_classes(),
        ..model.clone()
    };
    model.validate()?;
    opts.train.validate()?;
    if store.dimension() != model.d_in {
        return Err(EvalError::Config(format!(
            "store dimension {} does not match model d_in {}",
            store.dimension(),
            model.d_in
        )));
    }
    if opts.jobs == 0 {
        return Err(EvalError::Config("jobs must be at least 1".into()));
    }

    let seqs: Vec<EpisodeSequence> = manifest
        .episodes
        .iter()
        .map(|e| build_sequence(e, store, model.max_len))
        .collect::<Result<_, _>>()?;
    let participants = manifest.participants();
    let folds = make_folds(&participants, opts.k, opts.seed)?;

    let mut inputs = Vec::with_capacity(opts.k);
    for fold in 0..opts.k {
        let in_val = |s: &EpisodeSequence| folds.fold_of(&s.key.participant_id) == Some(fold);
        let train_ids: BTreeSet<&str> = seqs
            .iter()
            .filter(|s| !in_val(s))
            .map(|s| s.key.participant_id.as_str())
            .collect();
        let val_ids: BTreeSet<&str> = folds.members(fold).into_iter().collect();
        if let Some(p) = train_ids.intersection(&val_ids).next() {
            return Err(EvalError::Leakage {
                fold,
                participant: p.to_string(),
            });
        }
        let train: Vec<&EpisodeSequence> = seqs
            .iter()
            .filter(|s| !in_val(s) && s.true_len() > 0)
            .collect();
        let val_all: Vec<&EpisodeSequence> = seqs.iter().filter(|s| in_val(s)).collect();
        let val: Vec<&EpisodeSequence> = val_all
            .iter()
            .copied()
            .filter(|s| s.true_len() > 0)
            .collect();
        if train.is_empty() || val.is_empty() {
            return Err(EvalError::EmptyFold {
                fold,
                message: format!(
                    "{} training and {} validation episodes with frames",
                    train.len(),
                    val.len()
                ),
            });
        }
        inputs.push(FoldInput {
            fold,
            train,
            val_empty: val_all.len() - val.len(),
            val,
            train_participants: train_ids.len(),
            val_participants: val_ids.len(),
        });
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| EvalError::Config(format!("cannot start worker pool: {e}")))?;
    // Collecting an indexed parallel iterator preserves fold order.
    let trained: Vec<(FoldResult, ModelParams<f32>)> = pool.install(|| {
        inputs
            .par_iter()
            .map(|input| run_fold(input, &model, opts, progress))
            .collect::<Result<_, _>>()
    })?;
    let (results, fold_models): (Vec<FoldResult>, Vec<_>) = trained.into_iter().unzip();

    let mut acc = [[0.0; QuestionId::COUNT]; 3];
    for m in Method::ALL {
        for q in QuestionId::ALL {
            acc[m as usize][q.index()] = match opts.aggregation {
                Aggregation::Pooled => {
                    let hits: usize = results.iter().map(|r| r.hits[m as usize][q.index()]).sum();
                    let n: usize = results.iter().map(|r| r.val_episodes).sum();
                    100.0 * hits as f64 / n as f64
                }
                Aggregation::FoldAveraged => {
                    results.iter().map(|r| r.accuracy(m, q)).sum::<f64>() / results.len() as f64
                }
            };
        }
    }
    let report = EvalReport {
        setting: opts.setting,
        aggregation: opts.aggregation,
        accuracy: acc,
        seed: opts.seed,
        config_hash: config_hash.to_string(),
        n_participants: participants.len(),
        n_episodes: seqs.len(),
        n_empty_excluded: seqs.iter().filter(|s| s.true_len() == 0).count(),
        folds: results,
    };
    Ok(CvOutcome {
        report,
        fold_models,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// One-decimal accuracy table: rows Q1..Q6 then Average, columns
/// Random / Majority / Proposed. The Average row rounds the mean of the
/// unrounded per-question values.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    let mut rows: Vec<(String, [f64; 3])> = QuestionId::ALL
        .iter()
        .map(|&q| (q.to_string(), Method::ALL.map(|m| report.get(m, q))))
        .collect();
    rows.push(("Average".into(), Method::ALL.map(|m| report.average(m))));
    let header = Method::ALL.map(Method::label);

    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str(&format!(
                "Classification accuracy (%), setting: {}, {} aggregation\n\n",
                report.setting,
                match report.aggregation {
                    Aggregation::Pooled => "pooled",
                    Aggregation::FoldAveraged => "fold-averaged",
                }
            ));
            out.push_str(&format!("| Question | {} |\n", header.join(" | ")));
            out.push_str("|---|---:|---:|---:|\n");
            for (name, v) in rows {
                out.push_str(&format!(
                    "| {name} | {:.1} | {:.1} | {:.1} |\n",
                    v[0], v[1], v[2]
                ));
            }
        }
        ReportFormat::Csv => {
            out.push_str(&format!("Question,{}\n", header.join(",")));
            for (name, v) in rows {
                out.push_str(&format!("{name},{:.1},{:.1},{:.1}\n", v[0], v[1], v[2]));
            }
        }
    }
    out
}

/// Machine-readable companion of the table: seed, config hash, exclusion
/// counts, unrounded accuracies and the per-fold breakdown.
pub fn report_meta(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&emit_report(self, ReportFormat::Markdown))
    }
}
