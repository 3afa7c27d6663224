//! Subcommands of the `segqa` binary.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use segqa_core::autodiff::{load_checkpoint, save_checkpoint, Checkpoint};
use segqa_core::eval::{evaluate_records, export_showcase, pretrain_fold, AblationOptions, Report};
use segqa_core::mesh::export_ply;
use segqa_core::network::{history_csv, predict_classes, SampleLoader};
use segqa_core::{
    generate_dataset, Ablation, Dataset, DatasetConfig, GenerateOutcome, ModelConfig, PrecisionRule, TrainConfig,
};

pub const WORKERS_ENV: &str = "SEGQA_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Core(#[from] segqa_core::Error),
}

impl CliError {
    /// 2 config, 3 pipeline or data, 4 missing artifact, 5 diverged.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(segqa_core::Error::Config(_)) => 2,
            CliError::Missing(_) => 4,
            CliError::Core(segqa_core::Error::Diverged(_)) => 5,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Everything one run needs, read from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub precision_rule: PrecisionRule,
    #[serde(default = "default_showcase")]
    pub showcase_meshes: usize,
}

fn default_showcase() -> usize {
    5
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.dataset_dir.as_os_str().is_empty() || self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("dataset_dir and output_dir must be set".into()));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    fn write_to(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| segqa_core::Error::io(dir, e))?;
        let p = dir.join("config.json");
        let text = serde_json::to_vec_pretty(self).map_err(segqa_core::Error::from)?;
        fs::write(&p, text).map_err(|e| segqa_core::Error::io(&p, e))?;
        Ok(())
    }

    pub fn pretrain_dir(&self, fold: usize) -> PathBuf {
        self.output_dir.join("pretrain").join(format!("fold{fold}"))
    }

    pub fn train_dir(&self, ablation: Ablation, fold: usize) -> PathBuf {
        self.output_dir.join(ablation.name()).join(format!("fold{fold}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "segqa", version, about = "Ground-truth-free segmentation error detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    pub ablation: Ablation,
    /// Cross-validation fold.
    #[arg(long)]
    pub fold: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    pub ablation: Ablation,
    /// Folds to evaluate; all folds when omitted.
    #[arg(long)]
    pub fold: Vec<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Phantoms, perturbations, meshes and graph samples.
    Generate(ConfigArg),
    /// Boundary-patch pretraining of the encoder on one fold.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        fold: usize,
    },
    /// Node classifier training on one fold.
    Train(RunArgs),
    /// Test-fold metrics of trained models.
    Eval(EvalArgs),
    /// Class-coloured PLY of one dataset record.
    ExportMesh {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        record: usize,
        #[arg(long)]
        out: PathBuf,
        /// Colour by the predictions of this trained model instead of the labels.
        #[arg(long, value_parser = parse_ablation)]
        predicted_by: Option<Ablation>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: segqa_core::Error| e.to_string())
}

/// Single-line `ts=... level=... key=value` records on stderr.
struct LineLogger;

impl log::Log for LineLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::max_level()
    }

    fn log(&self, r: &log::Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let line = format!("ts={}.{:03} level={} {}\n", ts.as_secs(), ts.subsec_millis(), r.level(), r.args());
        let _ = std::io::stderr().lock().write_all(line.as_bytes());
    }

    fn flush(&self) {}
}

static LOGGER: LineLogger = LineLogger;

pub fn init_logging() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
}

/// Sizes the global worker pool from the environment.
pub fn init_workers() -> CliResult<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    if !cfg.dataset_dir.join(segqa_core::dataset::MANIFEST_FILE).exists() {
        return Err(CliError::Missing(cfg.dataset_dir.join(segqa_core::dataset::MANIFEST_FILE)));
    }
    let ds = Dataset::open(&cfg.dataset_dir)?;
    if ds.manifest.config_digest != cfg.dataset.digest()? {
        log::warn!("stage=open_dataset dataset config differs from the run config; using the manifest's");
    }
    Ok(ds)
}

fn check_fold(ds: &Dataset, fold: usize) -> CliResult<()> {
    ds.manifest.folds.check_fold(fold).map_err(|e| CliError::Config(e.to_string()))
}

fn require(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing(path))
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> CliResult<GenerateOutcome> {
    let out = generate_dataset(&cfg.dataset, &cfg.dataset_dir)?;
    cfg.write_to(&cfg.dataset_dir)?;
    match out {
        GenerateOutcome::UpToDate { records } => println!("up to date ({records} records)"),
        GenerateOutcome::Generated { records } => println!("generated {records} records"),
    }
    Ok(out)
}

pub fn cmd_pretrain(cfg: &RunConfig, fold: usize) -> CliResult<()> {
    let ds = open_dataset(cfg)?;
    check_fold(&ds, fold)?;
    let dir = cfg.pretrain_dir(fold);
    cfg.write_to(&dir)?;
    let split = ds.manifest.folds.split(fold)?;
    let out = pretrain_fold(&ds, &split, &cfg.model, &cfg.train)?;
    let p = dir.join("history.csv");
    fs::write(&p, history_csv(&out.history)).map_err(|e| segqa_core::Error::io(&p, e))?;
    let meta = serde_json::json!({
        "fold": fold,
        "best_epoch": out.best_epoch,
        "val_accuracy": out.val_accuracy,
        "elapsed_s": out.elapsed_s,
    });
    let ck = Checkpoint {
        params: out.encoder(),
        optimizer: None,
        rng: None,
        meta,
    };
    save_checkpoint(&ck, dir.join("encoder.ckpt"))?;
    println!("pretext held-out accuracy {:.4} (epoch {})", out.val_accuracy, out.best_epoch);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, ablation: Ablation, fold: usize) -> CliResult<()> {
    let ds = open_dataset(cfg)?;
    check_fold(&ds, fold)?;
    let encoder = if ablation.pretrained() {
        Some(load_checkpoint(require(cfg.pretrain_dir(fold).join("encoder.ckpt"))?)?.params)
    } else {
        None
    };
    let dir = cfg.train_dir(ablation, fold);
    cfg.write_to(&dir)?;
    let split = ds.manifest.folds.split(fold)?;
    let model = ablation.model_config(&cfg.model);
    let init = match &encoder {
        Some(e) => segqa_core::network::Init::PretrainedEncoder(e),
        None => segqa_core::network::Init::Random,
    };
    let out = segqa_core::network::train_error_net(
        &ds,
        &split.train_split(),
        &model,
        &cfg.train,
        init,
        ablation.blind(),
        Some(&dir),
    )?;
    println!(
        "trained {} fold {fold}: best epoch {} of {}",
        ablation.name(),
        out.best_epoch,
        out.history.len()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, ablation: Ablation, folds: &[usize]) -> CliResult<Report> {
    let ds = open_dataset(cfg)?;
    let folds: Vec<usize> = if folds.is_empty() {
        (0..ds.manifest.folds.k).collect()
    } else {
        folds.to_vec()
    };
    for &f in &folds {
        check_fold(&ds, f)?;
    }
    let model = ablation.model_config(&cfg.model);
    let opts = AblationOptions {
        rule: cfg.precision_rule,
        ..Default::default()
    };
    let mut metrics = Vec::new();
    for &f in &folds {
        let ck = load_checkpoint(require(cfg.train_dir(ablation, f).join("best.ckpt"))?)?;
        let split = ds.manifest.folds.split(f)?;
        let test: Vec<usize> = split.test.iter().flat_map(|&s| ds.records_of(s)).collect();
        let (m, evaluated) = evaluate_records(&ck.params, &model, &ds, &test, ablation.blind(), opts.rule, f)?;
        if cfg.showcase_meshes > 0 {
            let dir = cfg.train_dir(ablation, f).join("meshes");
            export_showcase(&dir, &evaluated, &m.samples, cfg.showcase_meshes)?;
        }
        log::info!(
            "stage=eval ablation={} fold={f} accuracy={:?} edge_recall={:?} agreement={:?}",
            ablation.name(),
            m.accuracy,
            m.edge_recall,
            m.neighbor_agreement
        );
        metrics.push(m);
    }
    let report = Report::new(ablation, opts.rule, &ds.manifest.folds, &model, &cfg.train, metrics);
    report.validate()?;
    let dir = cfg.output_dir.join(ablation.name());
    report.write(&dir)?;
    cfg.write_to(&dir)?;
    println!("wrote {}", dir.join("report.json").display());
    Ok(report)
}

pub fn cmd_export_mesh(
    cfg: &RunConfig,
    record: usize,
    out: &Path,
    predicted_by: Option<Ablation>,
    fold: usize,
) -> CliResult<()> {
    let ds = open_dataset(cfg)?;
    if record >= ds.num_records() {
        return Err(CliError::Config(format!("record {record} out of range ({} records)", ds.num_records())));
    }
    let s = ds.load(record)?;
    let classes = match predicted_by {
        Some(a) => {
            check_fold(&ds, fold)?;
            let ck = load_checkpoint(require(cfg.train_dir(a, fold).join("best.ckpt"))?)?;
            predict_classes(&ck.params, &a.model_config(&cfg.model), &s, a.blind())?
        }
        None => s.labels.clone(),
    };
    export_ply(&s.mesh(), Some(&classes), out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    init_workers()?;
    let load = |c: &ConfigArg| RunConfig::load(&c.config);
    match cli.command {
        Command::Generate(c) => cmd_generate(&load(&c)?).map(drop),
        Command::Pretrain { config, fold } => cmd_pretrain(&load(&config)?, fold),
        Command::Train(a) => cmd_train(&load(&a.config)?, a.ablation, a.fold),
        Command::Eval(a) => cmd_eval(&load(&a.config)?, a.ablation, &a.fold).map(drop),
        Command::ExportMesh {
            config,
            record,
            out,
            predicted_by,
            fold,
        } => cmd_export_mesh(&load(&config)?, record, &out, predicted_by, fold),
    }
}
