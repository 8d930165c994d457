use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mixoe::experiment::{
    aggregate_reports, collect_reports, run_evaluate, run_experiment, run_finetune, run_train, run_tune,
    ExperimentConfig, ExperimentManifest, Metric, Overrides, Stage, StageError,
};
use mixoe::mixing::MixMode;
use mixoe::objectives::{ObjectiveConfig, ObjectiveKind};
use mixoe::scoring::Scorer;
use mixoe::splits::make_holdout_splits;
use mixoe::synth::{generate, SuiteConfig};
use mixoe::viz::emit_tnr_bars;
use mixoe::Error;

const OUTPUT_ROOT_VAR: &str = "MIXOE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "mixoe", version, about = "Mixture outlier exposure experiments")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write holdout-class split manifests for a suite dataset.
    MakeSplits(MakeSplitsArgs),
    /// Standard training from scratch.
    Train(TrainArgs),
    /// Fine-tune a standard checkpoint with an OOD objective.
    Finetune(FinetuneArgs),
    /// Grid search of objective hyperparameters on the configured split.
    Tune(TuneArgs),
    /// Score a checkpoint and write detection reports.
    Evaluate(EvaluateArgs),
    /// Full pipeline from a config, or a replay of a manifest.
    Run(RunArgs),
    /// Aggregate detection reports into tables and a TNR95 figure.
    Report(ReportArgs),
}

#[derive(Args)]
struct MakeSplitsArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    n_ood: usize,
    #[arg(long, default_value_t = 3)]
    n_splits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suite definition (TOML); the default suite when omitted.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing manifests.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct ObjectiveArgs {
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    beta_mix: Option<f64>,
    #[arg(long)]
    beta_oe: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<MixMode>,
    #[arg(long)]
    m_in: Option<f64>,
    #[arg(long)]
    m_out: Option<f64>,
    #[arg(long)]
    mining_pool_factor: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Standard checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    objective: ObjectiveArgs,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    /// TOML file with a `[[grid]]` array of objective configs.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    scorer: Vec<Scorer>,
    /// Objective flags the checkpoint was fine-tuned with, if they differ
    /// from the config.
    #[command(flatten)]
    objective: ObjectiveArgs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Replay the config recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    objective: ObjectiveArgs,
    #[arg(long, value_delimiter = ',')]
    scorer: Option<Vec<Scorer>>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories or files holding detection reports.
    #[arg(long = "dir", required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    grid: Vec<ObjectiveConfig>,
}

fn parse_mode(s: &str) -> Result<MixMode, String> {
    match s {
        "linear" => Ok(MixMode::Linear),
        "cut" => Ok(MixMode::Cut),
        other => Err(format!("unknown mix mode {other:?}")),
    }
}

/// Failure of a command: exit code and message.
struct Failure {
    code: u8,
    message: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Unsupported(_) => 2,
        Error::Divergence { .. } => 4,
        Error::InvalidData(_) | Error::InvalidInput(_) | Error::Checkpoint { .. } | Error::Io { .. } => 3,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            code: exit_code(&e.source),
            message: e.to_string(),
        }
    }
}

fn staged(stage: Stage, e: Error) -> Failure {
    StageError { stage, source: e }.into()
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `--out`, else the config's output_dir (relative ones below the output
/// root), else the output root joined with the config file stem.
fn output_dir(flag: Option<&Path>, config: &ExperimentConfig, config_path: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match &config.output_dir {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) => output_root().join(p),
        None => {
            let stem = config_path
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into());
            output_root().join(stem)
        }
    }
}

/// Builds an objective from flags, taking unspecified values from `base`
/// when it is of the same kind.
fn objective_from_args(args: &ObjectiveArgs, base: Option<&ObjectiveConfig>) -> Result<Option<ObjectiveConfig>, Error> {
    let Some(kind) = args.objective else {
        if args.alpha.is_some() || args.beta.is_some() || args.mode.is_some() {
            return Err(Error::InvalidArgument("hyperparameter flags need --objective".into()));
        }
        return Ok(None);
    };
    let base = base.filter(|b| b.kind() == kind);
    let from_base = |name: &str| -> Option<f64> {
        let v = serde_json::to_value(base?).ok()?;
        v.get(name)?.as_f64()
    };
    let need = |flag: Option<f64>, name: &str| -> Result<f64, Error> {
        flag.or_else(|| from_base(name))
            .ok_or_else(|| Error::InvalidArgument(format!("--objective {kind} needs --{}", name.replace('_', "-"))))
    };
    let mode = || -> Result<MixMode, Error> {
        args.mode
            .or_else(|| {
                base.and_then(|b| match b {
                    ObjectiveConfig::Mix { mode, .. }
                    | ObjectiveConfig::Mixoe { mode, .. }
                    | ObjectiveConfig::MixPlusOe { mode, .. } => Some(*mode),
                    _ => None,
                })
            })
            .ok_or_else(|| Error::InvalidArgument(format!("--objective {kind} needs --mode")))
    };
    let config = match kind {
        ObjectiveKind::Standard => ObjectiveConfig::Standard,
        ObjectiveKind::Oe => ObjectiveConfig::Oe {
            beta: need(args.beta, "beta")?,
        },
        ObjectiveKind::OeHardMining => ObjectiveConfig::OeHardMining {
            beta: need(args.beta, "beta")?,
            mining_pool_factor: args
                .mining_pool_factor
                .or(match base {
                    Some(ObjectiveConfig::OeHardMining { mining_pool_factor, .. }) => Some(*mining_pool_factor),
                    _ => None,
                })
                .unwrap_or(4),
        },
        ObjectiveKind::EnergyOe => ObjectiveConfig::EnergyOe {
            beta: need(args.beta, "beta")?,
            m_in: need(args.m_in, "m_in")?,
            m_out: need(args.m_out, "m_out")?,
            hinge: Default::default(),
            reduction: Default::default(),
        },
        ObjectiveKind::Mix => ObjectiveConfig::Mix {
            alpha: need(args.alpha, "alpha")?,
            beta: need(args.beta, "beta")?,
            mode: mode()?,
        },
        ObjectiveKind::Mixoe => ObjectiveConfig::Mixoe {
            alpha: need(args.alpha, "alpha")?,
            beta: need(args.beta, "beta")?,
            mode: mode()?,
        },
        ObjectiveKind::MixPlusOe => ObjectiveConfig::MixPlusOe {
            alpha: need(args.alpha, "alpha")?,
            beta_mix: need(args.beta_mix, "beta_mix")?,
            beta_oe: need(args.beta_oe, "beta_oe")?,
            mode: mode()?,
        },
    };
    config.validate()?;
    Ok(Some(config))
}

/// Loads the config, applies overrides and validates it; no side effects.
fn prepare(common: &Common, mut overrides: Overrides) -> Result<(ExperimentConfig, Vec<String>, PathBuf), Failure> {
    let mut config = ExperimentConfig::load(&common.config).map_err(|e| staged(Stage::Config, e))?;
    overrides.seed = common.seed;
    let applied = config.apply(&overrides).map_err(|e| staged(Stage::Config, e))?;
    let config = config.resolved();
    config.validate().map_err(|e| staged(Stage::Config, e))?;
    let out = output_dir(common.out.as_deref(), &config, Some(&common.config));
    Ok((config, applied, out))
}

fn cmd_make_splits(args: MakeSplitsArgs) -> Result<(), Failure> {
    let suite = match &args.suite {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Parse {
                what: path.display().to_string(),
                reason: e.to_string(),
            })?
        }
        None => SuiteConfig::default(),
    };
    let generated = generate(&suite)?;
    let dataset = generated
        .datasets
        .get(&args.dataset)
        .ok_or_else(|| Error::InvalidArgument(format!("dataset {:?} is not part of the suite", args.dataset)))?;
    let classes = dataset.classes.clone();
    let others: Vec<String> = generated
        .datasets
        .keys()
        .filter(|k| **k != args.dataset)
        .cloned()
        .collect();
    let splits = make_holdout_splits(&args.dataset, &classes, &others, args.n_ood, args.n_splits, args.seed)?;

    let out = args.out.unwrap_or_else(|| output_root().join("splits"));
    let targets: Vec<PathBuf> = splits.iter().map(|s| out.join(s.file_name())).collect();
    if !args.force {
        if let Some(existing) = targets.iter().find(|p| p.exists()) {
            return Err(
                Error::InvalidArgument(format!("{} exists; pass --force to overwrite", existing.display())).into(),
            );
        }
    }
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    for (spec, path) in splits.iter().zip(&targets) {
        spec.save(path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let overrides = Overrides {
        standard_epochs: args.epochs,
        ..Overrides::default()
    };
    let (config, _, out) = prepare(&args.common, overrides)?;
    let (path, history) = run_train(&config, &out)?;
    if let Some(last) = history.epochs.last() {
        log::info!("final loss {:.4}", last.loss);
    }
    println!("{}", path.display());
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<(), Failure> {
    let base_config = ExperimentConfig::load(&args.common.config).map_err(|e| staged(Stage::Config, e))?;
    let objective = objective_from_args(&args.objective, base_config.finetune.as_ref().map(|f| &f.objective))
        .map_err(|e| staged(Stage::Config, e))?;
    let overrides = Overrides {
        objective,
        finetune_epochs: args.epochs,
        ..Overrides::default()
    };
    let (config, _, out) = prepare(&args.common, overrides)?;
    if config.finetune.is_none() {
        return Err(staged(
            Stage::Config,
            Error::InvalidArgument("no objective: pass --objective or add a finetune section".into()),
        ));
    }
    let (path, _) = run_finetune(&config, &args.checkpoint, &out)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_tune(args: TuneArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.grid).map_err(|e| {
        staged(
            Stage::Config,
            Error::Io {
                path: args.grid.clone(),
                source: e,
            },
        )
    })?;
    let grid: GridFile = toml::from_str(&text).map_err(|e| {
        staged(
            Stage::Config,
            Error::Parse {
                what: args.grid.display().to_string(),
                reason: e.to_string(),
            },
        )
    })?;
    let (config, _, out) = prepare(&args.common, Overrides::default())?;
    let outcome = run_tune(&config, &grid.grid, &args.checkpoint, &out)?;
    println!(
        "{}{}",
        serde_json::to_string(&outcome.chosen).expect("objective serializes"),
        if outcome.flagged {
            " (flagged: accuracy drop above limit)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let base_config = ExperimentConfig::load(&args.common.config).map_err(|e| staged(Stage::Config, e))?;
    let objective = objective_from_args(&args.objective, base_config.finetune.as_ref().map(|f| &f.objective))
        .map_err(|e| staged(Stage::Config, e))?;
    let overrides = Overrides {
        objective,
        ..Overrides::default()
    };
    let (config, _, out) = prepare(&args.common, overrides)?;
    for r in run_evaluate(&config, &args.checkpoint, &args.scorer, &out)? {
        println!("{}", r.to_json());
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let (mut config, config_path) = match (&args.config, &args.manifest) {
        (Some(path), _) => (
            ExperimentConfig::load(path).map_err(|e| staged(Stage::Config, e))?,
            Some(path.clone()),
        ),
        (None, Some(m)) => {
            let manifest = ExperimentManifest::load(m).map_err(|e| staged(Stage::Config, e))?;
            (
                manifest.replay_config().map_err(|e| staged(Stage::Config, e))?,
                manifest.config_path.clone(),
            )
        }
        (None, None) => unreachable!("clap requires one of --config and --manifest"),
    };
    let objective = objective_from_args(&args.objective, config.finetune.as_ref().map(|f| &f.objective))
        .map_err(|e| staged(Stage::Config, e))?;
    let overrides = Overrides {
        seed: args.seed,
        objective,
        scorers: args.scorer.clone(),
        ..Overrides::default()
    };
    let applied = config.apply(&overrides).map_err(|e| staged(Stage::Config, e))?;
    let config = config.resolved();
    config.validate().map_err(|e| staged(Stage::Config, e))?;
    let out = output_dir(args.out.as_deref(), &config, config_path.as_deref());
    let manifest = run_experiment(&config, &out, config_path.as_deref(), &applied)?;
    for r in &manifest.reports {
        println!("{}", out.join(r).display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let reports = collect_reports(&args.dirs)?;
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no detection reports found".into()).into());
    }
    let tables = [
        aggregate_reports(&reports, Metric::Tnr95)?,
        aggregate_reports(&reports, Metric::Auroc)?,
    ];
    let out = args.out.unwrap_or_else(|| args.dirs[0].clone());
    let out = if out.is_file() {
        out.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        out
    };
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    for table in &tables {
        let text = table.to_markdown();
        let name = format!("table_{}.md", table.metric.as_str().to_lowercase());
        let path = out.join(name);
        fs::write(&path, &text).map_err(|e| Error::Io { path, source: e })?;
        println!("{text}");
    }
    emit_tnr_bars(&reports, &out.join("tnr95_bars.svg"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::MakeSplits(a) => cmd_make_splits(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mixoe: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
