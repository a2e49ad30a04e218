//! `receptivity` — generate synthetic data, run cross-validation, check
//! gradients and summarise manifests.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration error,
//! 3 check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use receptivity_core::autodiff::save_checkpoint;
use receptivity_core::config::{ConfigError, RunConfig};
use receptivity_core::dataset::{
    dataset_stats, load_manifest, validate_manifest, ManifestError, Setting,
};
use receptivity_core::eval::{
    emit_report, report_meta, run_cross_validation, Aggregation, EvalError, ReportFormat,
};
use receptivity_core::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckError};
use receptivity_core::model::ModelError;
use receptivity_core::sequence::DEFAULT_MAX_LEN;
use receptivity_core::store::open_store;
use receptivity_core::synthetic::{
    generate, oracle_accuracy, save_dataset, SignalMode, SyntheticError, SyntheticSpec,
    MANIFEST_FILE, STORE_FILE,
};

#[derive(Parser)]
#[command(
    name = "receptivity",
    version,
    about = "Receptivity prediction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Likert5,
    Binary,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Likert5 => Setting::Likert5,
            SettingArg::Binary => Setting::Binary,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest and embedding store.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Participant-level cross-validation with baselines.
    Cv {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for folds (overrides the config; results are identical for any value).
        #[arg(long)]
        jobs: Option<usize>,
        /// Label setting (overrides the config).
        #[arg(long, value_enum)]
        setting: Option<SettingArg>,
        /// Average per-fold accuracies instead of pooling episodes across folds.
        #[arg(long)]
        fold_averaged: bool,
    },
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        /// TOML gradcheck config; defaults to the built-in tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print dataset statistics for a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

enum Failure {
    Runtime(String),
    Config(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Config(m) | Failure::Check(m) => m,
        }
    }
}

fn log(msg: &str) {
    eprintln!("[receptivity] {msg}");
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn manifest_failure(e: ManifestError) -> Failure {
    match e {
        ManifestError::NotFound(_) | ManifestError::Io { .. } => Failure::Runtime(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

fn cmd_gen(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Failure::Runtime(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let spec = SyntheticSpec::from_toml(&text)
        .map_err(|e| Failure::Config(format!("{}: {e}", spec_path.display())))?;
    let ds = generate(&spec).map_err(|e| Failure::Config(e.to_string()))?;
    save_dataset(out, &spec, &ds).map_err(|e| match e {
        SyntheticError::Invalid { .. } | SyntheticError::Parse(_) => Failure::Config(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    })?;

    let images: usize = ds.manifest.episodes.iter().map(|e| e.images.len()).sum();
    println!("participants={}", ds.manifest.participants().len());
    println!("episodes={}", ds.manifest.episodes.len());
    println!("images={images}");
    println!("manifest={}", out.join(MANIFEST_FILE).display());
    println!("store={}", out.join(STORE_FILE).display());
    if spec.signal_mode == SignalMode::PlantedLinear {
        let store = ds.store().map_err(|e| Failure::Runtime(e.to_string()))?;
        for setting in [Setting::Likert5, Setting::Binary] {
            let r = oracle_accuracy(&ds.manifest, &store, &ds.codebook, setting, DEFAULT_MAX_LEN)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("oracle_accuracy_{setting}={:.1}", r.average);
        }
    }
    Ok(())
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::InvalidManifest(_)
        | EvalError::Config(_)
        | EvalError::TooFewFolds(_)
        | EvalError::TooFewParticipants { .. }
        | EvalError::Model(ModelError::Config(_)) => Failure::Config(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    }
}

fn cmd_cv(
    config: &Path,
    jobs: Option<usize>,
    setting: Option<SettingArg>,
    fold_averaged: bool,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
        ConfigError::Invalid { .. } => Failure::Config(e.to_string()),
    })?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(s) = setting {
        cfg.setting = s.into();
    }
    if fold_averaged {
        cfg.aggregation = Aggregation::FoldAveraged;
    }
    cfg.validate().map_err(Failure::Config)?;

    let manifest = load_manifest(&cfg.manifest).map_err(manifest_failure)?;
    let store = open_store(&cfg.store)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.store.display())))?;
    log(&format!(
        "cv: {} episodes, setting={}, k={}, seed={}, jobs={}",
        manifest.episodes.len(),
        cfg.setting,
        cfg.k,
        cfg.seed,
        cfg.jobs
    ));
    let hash = cfg.config_hash();
    let outcome = run_cross_validation(
        &manifest,
        &store,
        &cfg.effective_model(),
        &cfg.cv_options(),
        &hash,
        &|m: &str| log(m),
    )
    .map_err(eval_failure)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write_file(
        &out.join("report.md"),
        &emit_report(&outcome.report, ReportFormat::Markdown),
    )?;
    write_file(
        &out.join("report.csv"),
        &emit_report(&outcome.report, ReportFormat::Csv),
    )?;
    write_file(&out.join("report_meta.json"), &report_meta(&outcome.report))?;
    if cfg.save_checkpoints {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        for (fold, params) in outcome.fold_models.iter().enumerate() {
            let path = dir.join(format!("fold_{fold}.prm"));
            save_checkpoint(&path, &params.named())
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        }
    }
    if outcome.report.n_empty_excluded > 0 {
        log(&format!(
            "{} episode(s) without in-window frames were excluded",
            outcome.report.n_empty_excluded
        ));
    }
    log(&format!("reports written to {}", out.display()));
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>) -> Result<(), Failure> {
    let cfg = match config {
        None => GradcheckConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Runtime(format!("cannot read config {}: {e}", path.display()))
            })?;
            GradcheckConfig::from_toml(&text)
                .map_err(|e| Failure::Config(format!("invalid config {}: {e}", path.display())))?
        }
    };
    let report = run_gradcheck(&cfg).map_err(|e| match e {
        GradcheckError::UnknownOp(_) | GradcheckError::Config(_) | GradcheckError::Model(_) => {
            Failure::Config(e.to_string())
        }
        GradcheckError::Tensor(_) => Failure::Runtime(e.to_string()),
    })?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let worst: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
        Err(Failure::Check(format!(
            "gradient check failed: {}",
            worst.join(", ")
        )))
    }
}

fn cmd_stats(path: &Path) -> Result<(), Failure> {
    let manifest = load_manifest(path).map_err(manifest_failure)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{v}");
        }
        return Err(Failure::Config(format!(
            "{}: {} violation(s)",
            path.display(),
            violations.len()
        )));
    }
    println!("{}", dataset_stats(&manifest));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { spec, out } => cmd_gen(spec, out),
        Command::Cv {
            config,
            jobs,
            setting,
            fold_averaged,
        } => cmd_cv(config, *jobs, *setting, *fold_averaged),
        Command::Gradcheck { config } => cmd_gradcheck(config.as_deref()),
        Command::Stats { manifest } => cmd_stats(manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log(&format!("error: {}", f.message()));
            ExitCode::from(f.code())
        }
    }
}
