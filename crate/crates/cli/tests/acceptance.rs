//! Acceptance criteria A1–A10. Every criterion writes one `A<n> PASS|FAIL`
//! line to stderr (bypassing the test harness's output capture) and then
//! asserts.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use receptivity_core::autodiff::{load_checkpoint, save_checkpoint};
use receptivity_core::dataset::{
    merge_binary, EpisodeKey, EpisodeRecord, ImageRef, LikertValue, QuestionId, Responses, Setting,
};
use receptivity_core::eval::{
    accuracy, emit_report, majority_baseline, make_folds, random_baseline, run_cross_validation,
    Aggregation, CvOptions, EvalReport, ReportFormat,
};
use receptivity_core::gradcheck::{run_gradcheck, GradcheckConfig};
use receptivity_core::model::{forward, init_params, ModelConfig, ModelParams};
use receptivity_core::sequence::{build_sequence, EpisodeSequence};
use receptivity_core::store::{open_store, write_store, EmbeddingStore};
use receptivity_core::synthetic::{generate, oracle_accuracy, SignalMode, SyntheticSpec};

// Pinned thresholds.
const A1_MAX_REL_ERROR: f64 = 1e-3;
const A1_TIME: Duration = Duration::from_secs(60);
const A2_MIN_ORACLE: f64 = 95.0;
const A2_MIN_PROPOSED: f64 = 85.0;
const A2_TIME: Duration = Duration::from_secs(15 * 60);
const A3_BAND_PP: f64 = 10.0;
const A4_TRIALS: usize = 20_000;
const A4_BAND_PP: f64 = 1.5;
const A4_MULTISETS: usize = 1_000;
const A5_TRIPLES: usize = 200;
const A5_TIME: Duration = Duration::from_secs(10);
const A7_EPISODES: usize = 50;
const A7_MAX_ABS: f32 = 1e-5;
const A10_EPISODES: usize = 1_000;

fn verdict(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{id} failed: {detail}");
}

#[test]
fn a1_gradient_correctness() {
    let cfg = GradcheckConfig::default();
    let m = &cfg.model;
    assert_eq!(
        (
            m.d_in,
            m.d_model,
            m.n_layers,
            m.n_attention_heads,
            m.max_len,
            cfg.batch_size,
            m.n_classes
        ),
        (8, 8, 1, 2, 4, 2, 5)
    );
    assert_eq!(cfg.step, 1e-3);
    let t = Instant::now();
    let report = run_gradcheck(&cfg).unwrap();
    let elapsed = t.elapsed();
    let worst = report.max_rel_error();
    let n_params: usize = report.params.iter().map(|c| c.n_checked).sum();
    verdict(
        "A1",
        report.passed() && worst < A1_MAX_REL_ERROR && elapsed < A1_TIME,
        &format!(
            "max_rel_error={worst:.3e} over {} ops and {n_params} parameters (< {A1_MAX_REL_ERROR:e}), {:.2}s",
            report.ops.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// 40 participants × ~3 episodes; the label shift centres the binary split
/// so that chance is 50%.
fn benchmark_spec(mode: SignalMode) -> SyntheticSpec {
    SyntheticSpec {
        n_participants: 40,
        episodes_per_participant: 3.0,
        embedding_dim: 512,
        signal_mode: mode,
        noise_sigma: 1.0,
        amplitude: 3.0,
        label_shift: 0.253_347_103_135_799_7,
        seed: 1,
        ..SyntheticSpec::default()
    }
}

fn benchmark_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        ..ModelConfig::default()
    }
}

fn cv(mode: SignalMode, setting: Setting) -> (EvalReport, f64) {
    let ds = generate(&benchmark_spec(mode)).unwrap();
    let store = ds.store().unwrap();
    let opts = CvOptions {
        setting,
        ..CvOptions::default()
    };
    assert_eq!(
        (opts.k, opts.train.batch_size, opts.train.epochs),
        (5, 16, 100)
    );
    assert_eq!(opts.train.learning_rate, 1e-4);
    let oracle = oracle_accuracy(&ds.manifest, &store, &ds.codebook, setting, 100)
        .unwrap()
        .average;
    let report = run_cross_validation(&ds.manifest, &store, &benchmark_model(), &opts, "", &|_| {})
        .unwrap()
        .report;
    (report, oracle)
}

#[test]
fn a2_planted_signal_recovery() {
    let t = Instant::now();
    let (report, oracle) = cv(SignalMode::PlantedLinear, Setting::Binary);
    let elapsed = t.elapsed();
    let proposed = report.average(receptivity_core::eval::Method::Proposed);
    verdict(
        "A2",
        oracle >= A2_MIN_ORACLE && proposed >= A2_MIN_PROPOSED && elapsed < A2_TIME,
        &format!(
            "oracle={oracle:.1}% (>= {A2_MIN_ORACLE}), proposed binary average={proposed:.1}% (>= {A2_MIN_PROPOSED}), \
             {} episodes, d_model=32, {:.0}s",
            report.n_episodes,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn a3_null_control() {
    let mut details = Vec::new();
    let mut pass = true;
    for (setting, chance) in [(Setting::Binary, 50.0), (Setting::Likert5, 20.0)] {
        let (report, _) = cv(SignalMode::Shuffled, setting);
        let proposed = report.average(receptivity_core::eval::Method::Proposed);
        let n: usize = report.folds.iter().map(|f| f.val_episodes).sum();
        let p = chance / 100.0;
        // Standard error of one question's pooled accuracy under chance.
        let se = 100.0 * (p * (1.0 - p) / n as f64).sqrt();
        pass &= (proposed - chance).abs() <= A3_BAND_PP;
        details.push(format!(
            "{setting}: proposed={proposed:.1}% (chance {chance}±{A3_BAND_PP}, n={n}, binomial se={se:.1}pp)"
        ));
    }
    verdict("A3", pass, &details.join("; "));
}

/// Independent mode: counts by linear scan, smallest class among the maxima.
fn brute_force_mode(labels: &[usize]) -> usize {
    let top = *labels.iter().max().unwrap();
    let mut best = (0, 0);
    for c in 0..=top {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n > best.1 {
            best = (c, n);
        }
    }
    best.0
}

#[test]
fn a4_baseline_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut details = Vec::new();
    let mut pass = true;
    for c in [2usize, 5] {
        let labels: Vec<usize> = (0..A4_TRIALS).map(|i| i % c).collect();
        let preds: Vec<usize> = (0..A4_TRIALS)
            .map(|_| random_baseline(c, &mut rng).unwrap())
            .collect();
        let acc = accuracy(&preds, &labels).unwrap();
        let expected = 100.0 / c as f64;
        pass &= (acc - expected).abs() <= A4_BAND_PP;
        details.push(format!(
            "random C={c}: {acc:.2}% (expected {expected:.1}±{A4_BAND_PP})"
        ));
    }
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..A4_MULTISETS {
        let classes = rng.random_range(2..=5);
        let n = rng.random_range(1..=12);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut counts = HashMap::new();
        labels
            .iter()
            .for_each(|&l| *counts.entry(l).or_insert(0) += 1);
        let max = counts.values().max().unwrap();
        ties += usize::from(counts.values().filter(|&v| v == max).count() > 1);
        mismatches += usize::from(majority_baseline(&labels).unwrap() != brute_force_mode(&labels));
    }
    pass &= mismatches == 0;
    details.push(format!(
        "majority: {mismatches} mismatches over {A4_MULTISETS} multisets ({ties} with ties)"
    ));
    verdict("A4", pass, &details.join("; "));
}

#[test]
fn a5_split_integrity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = Instant::now();
    let mut failures = Vec::new();
    for trial in 0..A5_TRIPLES {
        let n = rng.random_range(2..=120);
        let k = rng.random_range(2..=n.min(10));
        let seed: u64 = rng.random();
        let ids: Vec<String> = (0..n).map(|i| format!("P{i:03}")).collect();
        let folds = make_folds(&ids, k, seed).unwrap();
        for fold in 0..k {
            let val: Vec<&str> = folds.members(fold);
            let train: Vec<&String> = ids
                .iter()
                .filter(|p| folds.fold_of(p) != Some(fold))
                .collect();
            let overlap = train.iter().filter(|p| val.contains(&p.as_str())).count();
            if overlap > 0 || val.len() + train.len() != n {
                failures.push(format!("trial {trial} fold {fold}: overlap {overlap}"));
            }
        }
        let sizes = folds.sizes();
        if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
            failures.push(format!("trial {trial}: sizes {sizes:?}"));
        }
    }
    let elapsed = t.elapsed();
    verdict(
        "A5",
        failures.is_empty() && elapsed < A5_TIME,
        &format!(
            "{A5_TRIPLES} (participants, k, seed) triples, {} failures, {:.3}s",
            failures.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn a6_label_merge() {
    let mut table = Vec::new();
    let mut pass = true;
    for raw in 0u8..=255 {
        match LikertValue::new(raw) {
            Some(v) => {
                let merged = merge_binary(v).get();
                let expected = if raw >= 4 { 1 } else { 0 };
                pass &= merged == expected;
                table.push(format!("{raw}->{merged}"));
            }
            None => pass &= !(1..=5).contains(&raw),
        }
    }
    pass &= table.len() == 5;
    verdict("A6", pass, &format!("{{{}}}", table.join(", ")));
}

fn key(i: usize) -> EpisodeKey {
    EpisodeKey {
        participant_id: "P".into(),
        episode_id: i.to_string(),
    }
}

fn default_responses() -> Responses {
    Responses::new([LikertValue::new(3).unwrap(); QuestionId::COUNT])
}

#[test]
fn a7_padding_invariance() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f32;
    for i in 0..A7_EPISODES {
        let true_len = rng.random_range(0..cfg.max_len);
        let rows: Vec<Vec<f32>> = (0..true_len)
            .map(|_| (0..cfg.d_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let seq = EpisodeSequence::from_rows(
            key(i),
            default_responses(),
            cfg.max_len,
            cfg.d_in,
            rows.iter().map(Vec::as_slice),
        );
        let mut noisy = seq.clone();
        let d = cfg.d_in;
        for x in &mut noisy.embeddings_mut()[true_len * d..] {
            *x = rng.random_range(-10.0..10.0);
        }
        let a = forward(&params, &[&seq]).unwrap();
        let b = forward(&params, &[&noisy]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    verdict(
        "A7",
        worst <= A7_MAX_ABS,
        &format!("{A7_EPISODES} episodes, max |Δlogit|={worst:e} (<= {A7_MAX_ABS:e})"),
    );
}

fn run_cv(bin: &str, config: &Path, jobs: usize) {
    let out = Command::new(bin)
        .args(["cv", "--config"])
        .arg(config)
        .args(["--jobs", &jobs.to_string()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "cv failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn a8_determinism() {
    let bin = env!("CARGO_BIN_EXE_receptivity");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = SyntheticSpec {
        n_participants: 15,
        embedding_dim: 48,
        seed: 8,
        ..SyntheticSpec::default()
    };
    fs::write(root.join("spec.toml"), spec.to_toml()).unwrap();
    let gen = Command::new(bin)
        .args(["gen", "--spec"])
        .arg(root.join("spec.toml"))
        .arg("--out")
        .arg(root.join("data"))
        .output()
        .unwrap();
    assert!(
        gen.status.success(),
        "{}",
        String::from_utf8_lossy(&gen.stderr)
    );

    let config = |name: &str| {
        let text = format!(
            "manifest = \"data/manifest.json\"\nstore = \"data/embeddings.emb\"\n\
             output_dir = \"{name}\"\nsetting = \"likert5\"\nseed = 11\n\
             [model]\nd_in = 48\nd_model = 16\nn_layers = 1\nffn_dim = 32\nhead_hidden = 16\nmax_len = 40\n\
             [train]\nepochs = 4\ndropout = 0.1\n"
        );
        let path = root.join(format!("{name}.toml"));
        fs::write(&path, text).unwrap();
        path
    };
    run_cv(bin, &config("run_a"), 1);
    run_cv(bin, &config("run_b"), 1);
    run_cv(bin, &config("run_c"), 4);
    let read = |name: &str, file: &str| fs::read(root.join(name).join(file)).unwrap();
    let same_ab = read("run_a", "report.csv") == read("run_b", "report.csv");
    let same_jobs = read("run_a", "report.csv") == read("run_c", "report.csv")
        && read("run_a", "report_meta.json") == read("run_c", "report_meta.json");
    verdict(
        "A8",
        same_ab && same_jobs,
        &format!("rerun byte-identical={same_ab}, --jobs 1 vs --jobs 4 identical={same_jobs}"),
    );
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn a9_format_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let specials = [
        0.0f32,
        -0.0,
        f32::MIN_POSITIVE,
        1e-45,
        f32::MAX,
        f32::MIN,
        1.0 / 3.0,
    ];
    let records: Vec<(String, Vec<f32>)> = (0..100)
        .map(|i| {
            let v: Vec<f32> = (0..512)
                .map(|j| {
                    if j < specials.len() {
                        specials[(i + j) % specials.len()]
                    } else {
                        f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)
                            * if rng.random() { 1.0 } else { -1.0 }
                    }
                })
                .collect();
            (format!("img_{:03}_{}", rng.random_range(0..1000), i), v)
        })
        .collect();
    let store_path = dir.path().join("s.emb");
    write_store(&store_path, 512, records.clone()).unwrap();
    let store = open_store(&store_path).unwrap();
    let store_ok = store.len() == 100
        && records
            .iter()
            .all(|(id, v)| bits(store.get(id).unwrap()) == bits(v))
        && store.encode() == fs::read(&store_path).unwrap();

    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 9).unwrap();
    let ckpt = dir.path().join("m.prm");
    save_checkpoint(&ckpt, &params.named()).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    let restored = ModelParams::from_named(cfg, loaded.clone()).unwrap();
    let ckpt_ok = params
        .tensors()
        .iter()
        .zip(restored.tensors())
        .all(|(a, b)| a.shape() == b.shape() && bits(a.data()) == bits(b.data()));
    let again = dir.path().join("m2.prm");
    save_checkpoint(&again, &loaded).unwrap();
    let ckpt_ok = ckpt_ok && fs::read(&ckpt).unwrap() == fs::read(&again).unwrap();

    let mut acc = [[0.0; 6]; 3];
    for row in &mut acc {
        for x in row.iter_mut() {
            *x = rng.random_range(0.0..=100.0);
        }
    }
    let report = EvalReport {
        setting: Setting::Likert5,
        aggregation: Aggregation::Pooled,
        accuracy: acc,
        folds: vec![],
        seed: 0,
        config_hash: String::new(),
        n_participants: 0,
        n_episodes: 0,
        n_empty_excluded: 0,
    };
    let csv = emit_report(&report, ReportFormat::Csv);
    let md = emit_report(&report, ReportFormat::Markdown);
    let lines: Vec<&str> = csv.lines().collect();
    let mut layout_ok = lines.len() == 8 && lines[0] == "Question,Random,Majority,Proposed";
    let names = ["Q1", "Q2", "Q3", "Q4", "Q5", "Q6", "Average"];
    for (r, name) in names.iter().enumerate() {
        let cells: Vec<&str> = lines[r + 1].split(',').collect();
        layout_ok &= cells.len() == 4 && cells[0] == *name;
        for (m, cell) in cells[1..].iter().enumerate() {
            let one_decimal = cell.split_once('.').is_some_and(|(_, d)| d.len() == 1);
            let value = if r < 6 {
                acc[m][r]
            } else {
                acc[m].iter().sum::<f64>() / 6.0
            };
            layout_ok &= one_decimal && *cell == format!("{value:.1}");
        }
        let md_row = format!("| {name} | {} |", cells[1..].join(" | "));
        layout_ok &= md.contains(&md_row);
    }
    verdict(
        "A9",
        store_ok && ckpt_ok && layout_ok,
        &format!(
            "store roundtrip bitwise={store_ok} (100×512), checkpoint roundtrip bitwise={ckpt_ok} ({} tensors), report layout={layout_ok}",
            loaded.len()
        ),
    );
}

/// Reference builder: explicit window test, insertion sort on
/// (timestamp, id bytes), copy of the first `t` rows into a zeroed matrix.
fn reference_sequence(e: &EpisodeRecord, store: &EmbeddingStore, t: usize) -> (usize, Vec<f32>) {
    let mut picked: Vec<&ImageRef> = Vec::new();
    for img in &e.images {
        if !(img.timestamp < e.start_time) && !(img.timestamp > e.end_time) {
            picked.push(img);
        }
    }
    for i in 1..picked.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (picked[j - 1], picked[j]);
            let a_after_b = a.timestamp > b.timestamp
                || (a.timestamp == b.timestamp && a.image_id.as_bytes() > b.image_id.as_bytes());
            if !a_after_b {
                break;
            }
            picked.swap(j - 1, j);
            j -= 1;
        }
    }
    let d = store.dimension();
    let mut out = vec![0.0f32; t * d];
    let n = picked.len().min(t);
    for (row, img) in picked.iter().take(n).enumerate() {
        out[row * d..(row + 1) * d].copy_from_slice(store.get(&img.image_id).unwrap());
    }
    (n, out)
}

#[test]
fn a10_sequence_builder_conformance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut mismatches, mut truncated, mut padded, mut empty) = (0, 0, 0, 0);
    for i in 0..A10_EPISODES {
        let t = rng.random_range(1..=12);
        let d = rng.random_range(1..=4);
        let n_images = rng.random_range(0..=20);
        let start: f64 = rng.random_range(0.0..100.0);
        let end = start + rng.random_range(0.0..60.0);
        let mut images = Vec::new();
        let mut records = Vec::new();
        for j in 0..n_images {
            // Coarse grid so equal timestamps (ties) and boundary hits occur.
            let ts = (rng.random_range(start - 20.0..end + 20.0) / 5.0).round() * 5.0;
            let ts = if rng.random_range(0..10) == 0 {
                end
            } else {
                ts.max(0.0)
            };
            let id = format!("{}{j}", ["b", "a", "c"][rng.random_range(0..3)]);
            images.push(ImageRef {
                image_id: id.clone(),
                timestamp: ts,
            });
            records.push((
                id,
                (0..d)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f32>>(),
            ));
        }
        let store = EmbeddingStore::from_records(d, records).unwrap();
        let e = EpisodeRecord {
            participant_id: "P".into(),
            episode_id: format!("E{i}"),
            start_time: start,
            end_time: end,
            responses: default_responses(),
            images,
        };
        let seq = build_sequence(&e, &store, t).unwrap();
        let (n, reference) = reference_sequence(&e, &store, t);
        let mask_ok = seq.mask() == (0..t).map(|r| u8::from(r < n)).collect::<Vec<u8>>();
        if seq.true_len() != n || bits(seq.embeddings()) != bits(&reference) || !mask_ok {
            mismatches += 1;
        }
        let in_window = e
            .images
            .iter()
            .filter(|img| img.timestamp >= start && img.timestamp <= end)
            .count();
        truncated += usize::from(in_window > t);
        padded += usize::from(in_window < t && in_window > 0);
        empty += usize::from(in_window == 0);
    }
    verdict(
        "A10",
        mismatches == 0 && truncated > 0 && padded > 0 && empty > 0,
        &format!(
            "{A10_EPISODES} random episodes, {mismatches} mismatches vs brute force \
             ({truncated} truncated, {padded} padded, {empty} empty)"
        ),
    );
}
