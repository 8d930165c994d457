//! Declarative experiments: one config file drives split generation,
//! standard training, fine-tuning, evaluation and figure output.

mod report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{stack_inputs, Example};
use crate::error::{Error, Result};
use crate::metrics::DetectionReport;
use crate::mixing::sample_lambda;
use crate::model::{Activation, Classifier, Mlp, MlpSpec};
use crate::objectives::ObjectiveConfig;
use crate::scoring::{msp_unchecked, Scorer};
use crate::splits::{
    assemble_coarse_ood, filter_outlier_pool, fine_ood_test, make_holdout_splits, partition_id_data,
    split_outlier_validation, DataPartition, EnvironmentSpec, OutlierPool,
};
use crate::synth::{generate, Suite, SuiteConfig};
use crate::trainer::{
    evaluate_environment, finetune, train_standard, tune_hyperparams, Checkpoint, EvalData, Evaluation, Phase,
    SgdConfig, TrainConfig, TrainHistory, TuningOutcome, TuningPools,
};
use crate::viz::{
    emit_confidence_density, emit_scatter, emit_tnr_bars, fit_vis_layer, DensityPanel, FigureManifest, PointTag,
    TaggedPoint, VisConfig,
};

pub use report::{aggregate_reports, collect_reports, Metric, ReportRow, ReportTable};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Points per tag drawn in the feature scatter.
const SCATTER_POINTS: usize = 300;

fn default_n_ood() -> usize {
    5
}

fn default_n_splits() -> u32 {
    3
}

fn default_split_index() -> u32 {
    1
}

fn default_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic suite; derived from the experiment seed when absent.
    #[serde(default)]
    pub suite: Option<SuiteConfig>,
    pub dataset: String,
    /// Use this environment instead of generating splits.
    #[serde(default)]
    pub split_manifest: Option<PathBuf>,
    #[serde(default = "default_n_ood")]
    pub n_ood: usize,
    #[serde(default = "default_n_splits")]
    pub n_splits: u32,
    #[serde(default = "default_split_index")]
    pub split_index: u32,
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub outlier_val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardConfig {
    pub epochs: usize,
    pub optimizer: SgdConfig,
    pub id_batch_size: usize,
}

impl Default for StandardConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            optimizer: SgdConfig::default(),
            id_batch_size: TrainConfig::ID_BATCH_SIZE,
        }
    }
}

fn default_finetune_epochs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_finetune_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    pub objective: ObjectiveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "default_scorers")]
    pub scorers: Vec<Scorer>,
    #[serde(default = "default_true")]
    pub figures: bool,
    #[serde(default)]
    pub vis: VisConfig,
}

fn default_scorers() -> Vec<Scorer> {
    vec![Scorer::Msp]
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            scorers: default_scorers(),
            figures: true,
            vis: VisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub standard: StandardConfig,
    #[serde(default)]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub objective: Option<ObjectiveConfig>,
    pub scorers: Option<Vec<Scorer>>,
    pub standard_epochs: Option<usize>,
    pub finetune_epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("experiment config", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fills in every derived value so the config alone reproduces a run.
    pub fn resolved(mut self) -> Self {
        if self.data.suite.is_none() {
            self.data.suite = Some(SuiteConfig {
                seed: self.seed,
                ..SuiteConfig::default()
            });
        }
        self
    }

    /// Applies overrides in place and describes each as `key=value`.
    pub fn apply(&mut self, overrides: &Overrides) -> Result<Vec<String>> {
        let mut applied = Vec::new();
        if let Some(seed) = overrides.seed {
            self.seed = seed;
            applied.push(format!("seed={seed}"));
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = Some(dir.clone());
            applied.push(format!("output_dir={}", dir.display()));
        }
        if let Some(objective) = &overrides.objective {
            match &mut self.finetune {
                Some(ft) => ft.objective = objective.clone(),
                None => {
                    self.finetune = Some(FinetuneConfig {
                        epochs: default_finetune_epochs(),
                        optimizer: SgdConfig::default(),
                        objective: objective.clone(),
                    })
                }
            }
            applied.push(format!(
                "finetune.objective={}",
                serde_json::to_string(objective).expect("objective serializes")
            ));
        }
        if let Some(scorers) = &overrides.scorers {
            self.evaluate.scorers = scorers.clone();
            let names: Vec<&str> = scorers.iter().map(|s| s.as_str()).collect();
            applied.push(format!("evaluate.scorers={}", names.join(",")));
        }
        if let Some(epochs) = overrides.standard_epochs {
            self.standard.epochs = epochs;
            applied.push(format!("standard.epochs={epochs}"));
        }
        if let Some(epochs) = overrides.finetune_epochs {
            let ft = self
                .finetune
                .as_mut()
                .ok_or_else(|| Error::invalid_arg("no finetune section to override epochs of"))?;
            ft.epochs = epochs;
            applied.push(format!("finetune.epochs={epochs}"));
        }
        Ok(applied)
    }

    fn suite_config(&self) -> SuiteConfig {
        self.data.suite.clone().unwrap_or_else(|| SuiteConfig {
            seed: self.seed,
            ..SuiteConfig::default()
        })
    }

    pub fn standard_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.standard.epochs,
            optimizer: self.standard.optimizer,
            id_batch_size: self.standard.id_batch_size,
            ..TrainConfig::standard(self.seed)
        }
    }

    pub fn finetune_train_config(&self) -> Option<TrainConfig> {
        self.finetune.as_ref().map(|ft| {
            let base = TrainConfig {
                epochs: ft.epochs,
                optimizer: ft.optimizer,
                id_batch_size: self.standard.id_batch_size,
                ..TrainConfig::finetune(ObjectiveConfig::Standard, self.seed)
            };
            base.with_objective(ft.objective.clone())
        })
    }

    /// Checks everything that can be checked without generating data.
    pub fn validate(&self) -> Result<()> {
        let suite = self.suite_config();
        suite.validate()?;
        let family = suite
            .families
            .iter()
            .find(|f| f.name == self.data.dataset)
            .ok_or_else(|| Error::invalid_arg(format!("dataset {:?} is not part of the suite", self.data.dataset)))?;
        if self.data.split_manifest.is_none() {
            if self.data.n_ood == 0 || self.data.n_ood >= family.n_classes {
                return Err(Error::invalid_arg(format!(
                    "n_ood must lie in 1..{}, got {}",
                    family.n_classes, self.data.n_ood
                )));
            }
            if self.data.split_index == 0 || self.data.split_index > self.data.n_splits {
                return Err(Error::invalid_arg(format!(
                    "split_index must lie in 1..={}, got {}",
                    self.data.n_splits, self.data.split_index
                )));
            }
        }
        for (name, f) in [
            ("val_fraction", self.data.val_fraction),
            ("outlier_val_fraction", self.data.outlier_val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid_arg(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        MlpSpec {
            input: suite.shape,
            hidden: self.model.hidden.clone(),
            num_classes: family.n_classes,
            activation: self.model.activation,
        }
        .validate()?;
        self.standard_train_config().validate()?;
        if let Some(ft) = self.finetune_train_config() {
            ft.validate()?;
        }
        if self.evaluate.scorers.is_empty() {
            return Err(Error::invalid_arg("evaluate.scorers is empty"));
        }
        let vis = &self.evaluate.vis;
        if self.evaluate.figures && (vis.epochs == 0 || vis.batch_size == 0 || vis.lr.is_nan() || vis.lr <= 0.0) {
            return Err(Error::invalid_arg("vis epochs, batch size and lr must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config. The output location is not part
    /// of an experiment's identity and is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone().resolved();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Everything one environment needs: generated data, the selected split,
/// the ID partition, test-time OOD sets and filtered outlier pools.
#[derive(Debug)]
pub struct Environment {
    pub suite: Suite,
    pub splits: Vec<EnvironmentSpec>,
    pub spec: EnvironmentSpec,
    pub partition: DataPartition,
    pub fine_ood: Vec<Example>,
    pub coarse_ood: Vec<Example>,
    pub outliers_train: OutlierPool,
    pub outliers_val: OutlierPool,
}

pub fn build_environment(config: &ExperimentConfig) -> Result<Environment> {
    let suite = generate(&config.suite_config())?;
    let dataset = suite
        .datasets
        .get(&config.data.dataset)
        .ok_or_else(|| Error::invalid_arg(format!("unknown dataset {:?}", config.data.dataset)))?;
    let (splits, spec) = match &config.data.split_manifest {
        Some(path) => {
            let spec = EnvironmentSpec::load(path)?;
            (vec![spec.clone()], spec)
        }
        None => {
            let others: Vec<String> = suite
                .datasets
                .keys()
                .filter(|k| **k != config.data.dataset)
                .cloned()
                .collect();
            let splits = make_holdout_splits(
                &config.data.dataset,
                &dataset.classes,
                &others,
                config.data.n_ood,
                config.data.n_splits,
                config.seed,
            )?;
            let spec = splits[config.data.split_index as usize - 1].clone();
            (splits, spec)
        }
    };
    let partition = partition_id_data(dataset, &spec, config.data.val_fraction, config.seed)?;
    let fine_ood = fine_ood_test(dataset, &spec)?;
    let coarse_ood = assemble_coarse_ood(&spec, &suite.datasets)?;
    let names: Vec<String> = suite.datasets.keys().cloned().collect();
    let pool = filter_outlier_pool(&suite.outliers, &names)?;
    let (outliers_train, outliers_val) =
        split_outlier_validation(&pool, config.data.outlier_val_fraction, config.seed)?;
    Ok(Environment {
        suite,
        splits,
        spec,
        partition,
        fine_ood,
        coarse_ood,
        outliers_train,
        outliers_val,
    })
}

pub fn model_spec(config: &ExperimentConfig, env: &Environment) -> MlpSpec {
    MlpSpec {
        input: env.partition.shape,
        hidden: config.model.hidden.clone(),
        num_classes: env.spec.id_classes.len(),
        activation: config.model.activation,
    }
}

pub fn new_model(config: &ExperimentConfig, env: &Environment) -> Result<Mlp> {
    Mlp::new(model_spec(config, env), config.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Train,
    Finetune,
    Tune,
    Evaluate,
    Figures,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
            Stage::Figures => "figures",
            Stage::Write => "write",
        })
    }
}

/// An error tagged with the pipeline stage it came from.
#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub config: Option<ExperimentConfig>,
    pub config_hash: String,
    pub overrides: Vec<String>,
    pub environment: Option<EnvironmentSpec>,
    pub objective: Option<String>,
    pub seed: u64,
    /// Paths below are relative to the output directory.
    pub splits: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub histories: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    pub scores: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
    pub tuning: Option<PathBuf>,
}

impl ExperimentManifest {
    fn new(config: &ExperimentConfig, config_path: Option<&Path>, overrides: &[String]) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: Some(config.clone()),
            config_hash: config.hash(),
            overrides: overrides.to_vec(),
            objective: config.finetune.as_ref().map(|f| f.objective.label()),
            seed: config.seed,
            ..Self::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    /// The recorded config, for replaying a run.
    pub fn replay_config(&self) -> Result<ExperimentConfig> {
        let config = self
            .config
            .clone()
            .ok_or_else(|| Error::InvalidData("manifest has no recorded config".into()))?;
        if config.hash() != self.config_hash {
            return Err(Error::InvalidData(
                "manifest config does not match its recorded hash".into(),
            ));
        }
        Ok(config)
    }
}

/// Output directory with helpers that record paths relative to it.
struct Out<'a> {
    root: &'a Path,
}

impl Out<'_> {
    fn file(&self, sub: &str, name: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = self.root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok((dir.join(name), Path::new(sub).join(name)))
    }

    fn write(&self, sub: &str, name: &str, text: &str) -> Result<PathBuf> {
        let (abs, rel) = self.file(sub, name)?;
        fs::write(&abs, text).map_err(|e| Error::io(&abs, e))?;
        Ok(rel)
    }
}

fn write_splits(out: &Out<'_>, env: &Environment) -> Result<Vec<PathBuf>> {
    env.splits
        .iter()
        .map(|s| out.write("splits", &s.file_name(), &s.to_manifest()))
        .collect()
}

fn write_history(out: &Out<'_>, name: &str, history: &TrainHistory) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(history).expect("history serializes");
    out.write("history", name, &text)
}

fn save_checkpoint(out: &Out<'_>, name: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let (abs, rel) = out.file("checkpoints", name)?;
    ckpt.save(&abs)?;
    Ok(rel)
}

/// Scores the model with every configured scorer.
pub fn evaluate_model<M: Classifier>(
    model: &M,
    env: &Environment,
    scorers: &[Scorer],
    method: &str,
) -> Result<Vec<Evaluation>> {
    let data = EvalData {
        id_test: Some(&env.partition.test),
        fine_ood: Some(&env.fine_ood),
        coarse_ood: Some(&env.coarse_ood),
    };
    scorers
        .iter()
        .map(|&s| evaluate_environment(model, &env.spec, data, s, s.default_temperature(), method))
        .collect()
}

fn write_evaluations(out: &Out<'_>, evaluations: &[Evaluation], manifest: &mut ExperimentManifest) -> Result<()> {
    for ev in evaluations {
        let stem = format!("{}-{}", ev.report.method, ev.report.scorer);
        manifest
            .reports
            .push(out.write("reports", &format!("{stem}.json"), &(ev.report.to_json() + "\n"))?);
        manifest
            .scores
            .push(out.write("scores", &format!("{stem}.csv"), &ev.scores.to_csv()?)?);
    }
    Ok(())
}

fn take_examples(examples: &[Example], n: usize) -> Vec<Example> {
    examples.iter().take(n).cloned().collect()
}

/// Scatter of projected features with MSP shading, confidence densities per
/// model and TNR95 bars.
fn emit_figures(
    out: &Out<'_>,
    config: &ExperimentConfig,
    env: &Environment,
    model: &Mlp,
    evaluations: &[Evaluation],
) -> Result<Vec<PathBuf>> {
    let mut figures = FigureManifest::default();
    let mut paths = Vec::new();
    let vis = VisConfig {
        seed: config.seed,
        ..config.evaluate.vis
    };
    let projector = fit_vis_layer(model, &env.partition.train, &env.partition.id_classes, &vis)?;

    let dim = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(4);
    let id_train = env.partition.train.examples();
    let outliers = take_examples(&env.outliers_train.examples, SCATTER_POINTS);
    let mut mixed = Vec::new();
    for (x_in, x_out) in id_train.iter().zip(&outliers) {
        let lambda = sample_lambda(1.0, &mut rng)?.lambda();
        let input = x_in
            .input
            .iter()
            .zip(&x_out.input)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        mixed.push(Example {
            id: x_in.id,
            label: None,
            source: "mixed".into(),
            input,
        });
    }
    let groups: [(PointTag, Vec<Example>); 5] = [
        (
            PointTag::Id,
            take_examples(env.partition.test.examples(), SCATTER_POINTS),
        ),
        (PointTag::CoarseOod, take_examples(&env.coarse_ood, SCATTER_POINTS)),
        (PointTag::FineOod, take_examples(&env.fine_ood, SCATTER_POINTS)),
        (PointTag::Outlier, outliers.clone()),
        (PointTag::Mixed, mixed),
    ];
    let mut points = Vec::new();
    for (tag, examples) in &groups {
        if examples.is_empty() {
            continue;
        }
        let xy = projector.project(model, examples)?;
        let logits = model.forward(&stack_inputs(examples, dim)?);
        for (p, row) in xy.iter().zip(logits.outer_iter()) {
            points.push(TaggedPoint {
                x: p[0],
                y: p[1],
                tag: *tag,
                confidence: Some(msp_unchecked(row.as_slice().expect("contiguous"))),
            });
        }
    }
    let (abs, rel) = out.file("figures", "features.svg")?;
    let mut entry = emit_scatter(&points, &abs)?;
    entry.path = rel.clone();
    entry.parameters.insert(
        "vis".into(),
        serde_json::to_string(&projector.metadata).expect("metadata serializes"),
    );
    figures.figures.push(entry);
    paths.push(rel);

    let mut panels: Vec<DensityPanel> = Vec::new();
    for ev in evaluations {
        if panels.iter().all(|p| p.name != ev.report.method) {
            panels.push(DensityPanel {
                name: ev.report.method.clone(),
                table: ev.confidence.clone(),
            });
        }
    }
    let (abs, rel) = out.file("figures", "confidence.svg")?;
    let mut entry = emit_confidence_density(&panels, &abs)?;
    entry.path = rel.clone();
    figures.figures.push(entry);
    paths.push(rel);

    let reports: Vec<DetectionReport> = evaluations.iter().map(|e| e.report.clone()).collect();
    let (abs, rel) = out.file("figures", "tnr95.svg")?;
    let mut entry = emit_tnr_bars(&reports, &abs)?;
    entry.path = rel.clone();
    figures.figures.push(entry);
    paths.push(rel);

    let (abs, rel) = out.file("figures", "figures.json")?;
    figures.save(&abs)?;
    paths.push(rel);
    Ok(paths)
}

/// Runs standard training, optional fine-tuning and evaluation, writing every
/// artifact below `out_dir` and returning the manifest (also written there).
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    config_path: Option<&Path>,
    overrides: &[String],
) -> StageResult<ExperimentManifest> {
    let config = config.clone().resolved();
    config.validate().at(Stage::Config)?;
    let env = build_environment(&config).at(Stage::Data)?;
    let out = Out { root: out_dir };
    let mut manifest = ExperimentManifest::new(&config, config_path, overrides);
    manifest.environment = Some(env.spec.clone());
    manifest.splits = write_splits(&out, &env).at(Stage::Write)?;

    let standard_cfg = config.standard_train_config();
    let mut model = new_model(&config, &env).at(Stage::Train)?;
    let (base, history) = train_standard(&mut model, &env.partition, &standard_cfg).at(Stage::Train)?;
    manifest
        .checkpoints
        .push(save_checkpoint(&out, "standard.ckpt", &base).at(Stage::Write)?);
    manifest
        .histories
        .push(write_history(&out, "standard.json", &history).at(Stage::Write)?);
    let mut evaluations = evaluate_model(&model, &env, &config.evaluate.scorers, "standard").at(Stage::Evaluate)?;

    if let Some(ft_cfg) = config.finetune_train_config() {
        let mut tuned = new_model(&config, &env).at(Stage::Finetune)?;
        let (ckpt, history) =
            finetune(&mut tuned, &base, &env.partition, &env.outliers_train, &ft_cfg).at(Stage::Finetune)?;
        manifest
            .checkpoints
            .push(save_checkpoint(&out, "finetune.ckpt", &ckpt).at(Stage::Write)?);
        manifest
            .histories
            .push(write_history(&out, "finetune.json", &history).at(Stage::Write)?);
        let label = ft_cfg.objective.label();
        evaluations.extend(evaluate_model(&tuned, &env, &config.evaluate.scorers, &label).at(Stage::Evaluate)?);
        model = tuned;
    }

    write_evaluations(&out, &evaluations, &mut manifest).at(Stage::Write)?;
    let reports: Vec<DetectionReport> = evaluations.iter().map(|e| e.report.clone()).collect();
    manifest.reports.push(
        out.write("reports", "reports.csv", &DetectionReport::to_csv(&reports))
            .at(Stage::Write)?,
    );
    if config.evaluate.figures {
        manifest.figures = emit_figures(&out, &config, &env, &model, &evaluations).at(Stage::Figures)?;
    }
    manifest.save(&out_dir.join(MANIFEST_FILE)).at(Stage::Write)?;
    Ok(manifest)
}

/// Standard training only.
pub fn run_train(config: &ExperimentConfig, out_dir: &Path) -> StageResult<(PathBuf, TrainHistory)> {
    let config = config.clone().resolved();
    config.validate().at(Stage::Config)?;
    let env = build_environment(&config).at(Stage::Data)?;
    let out = Out { root: out_dir };
    write_splits(&out, &env).at(Stage::Write)?;
    let mut model = new_model(&config, &env).at(Stage::Train)?;
    let (ckpt, history) =
        train_standard(&mut model, &env.partition, &config.standard_train_config()).at(Stage::Train)?;
    let rel = save_checkpoint(&out, "standard.ckpt", &ckpt).at(Stage::Write)?;
    write_history(&out, "standard.json", &history).at(Stage::Write)?;
    Ok((out_dir.join(rel), history))
}

fn load_base(config: &ExperimentConfig, base_path: &Path) -> Result<Checkpoint> {
    let base = Checkpoint::load(base_path, Some(&config.standard_train_config().hash()))?;
    if base.phase != Phase::Standard {
        return Err(Error::invalid_arg("base checkpoint is not a standard-phase checkpoint"));
    }
    Ok(base)
}

/// Fine-tunes from a standard checkpoint produced by the same config.
pub fn run_finetune(
    config: &ExperimentConfig,
    base_path: &Path,
    out_dir: &Path,
) -> StageResult<(PathBuf, TrainHistory)> {
    let config = config.clone().resolved();
    config.validate().at(Stage::Config)?;
    let ft_cfg = config
        .finetune_train_config()
        .ok_or_else(|| Error::invalid_arg("config has no finetune section"))
        .at(Stage::Config)?;
    let base = load_base(&config, base_path).at(Stage::Data)?;
    let env = build_environment(&config).at(Stage::Data)?;
    let out = Out { root: out_dir };
    let mut model = new_model(&config, &env).at(Stage::Finetune)?;
    let (ckpt, history) =
        finetune(&mut model, &base, &env.partition, &env.outliers_train, &ft_cfg).at(Stage::Finetune)?;
    let rel = save_checkpoint(&out, "finetune.ckpt", &ckpt).at(Stage::Write)?;
    write_history(&out, "finetune.json", &history).at(Stage::Write)?;
    Ok((out_dir.join(rel), history))
}

/// Grid search on the configured split, starting from a standard checkpoint.
pub fn run_tune(
    config: &ExperimentConfig,
    grid: &[ObjectiveConfig],
    base_path: &Path,
    out_dir: &Path,
) -> StageResult<TuningOutcome> {
    let config = config.clone().resolved();
    config.validate().at(Stage::Config)?;
    if grid.is_empty() {
        return Err(Error::invalid_arg("empty tuning grid")).at(Stage::Config);
    }
    for c in grid {
        c.validate().at(Stage::Config)?;
    }
    let base = load_base(&config, base_path).at(Stage::Data)?;
    let env = build_environment(&config).at(Stage::Data)?;
    let template = config.finetune_train_config().unwrap_or_else(|| TrainConfig {
        phase: Phase::Finetune,
        ..config.standard_train_config()
    });
    let pools = TuningPools {
        train: &env.outliers_train,
        validation: &env.outliers_val,
    };
    let outcome = tune_hyperparams(
        grid,
        || new_model(&config, &env),
        &base,
        &env.spec,
        env.spec.split_index,
        &env.partition,
        pools,
        &template,
    )
    .at(Stage::Tune)?;
    let out = Out { root: out_dir };
    let text = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    out.write("", "tuning.json", &text).at(Stage::Write)?;
    Ok(outcome)
}

/// Evaluates a checkpoint from this config; the method label follows from
/// which phase config produced it.
pub fn run_evaluate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    scorers: &[Scorer],
    out_dir: &Path,
) -> StageResult<Vec<DetectionReport>> {
    let config = config.clone().resolved();
    config.validate().at(Stage::Config)?;
    if scorers.is_empty() {
        return Err(Error::invalid_arg("no scorer given")).at(Stage::Config);
    }
    let ckpt = Checkpoint::load(checkpoint, None).at(Stage::Data)?;
    let standard_hash = config.standard_train_config().hash();
    let finetune_cfg = config.finetune_train_config();
    let method = if ckpt.config_hash == standard_hash {
        "standard".to_string()
    } else if let Some(ft) = finetune_cfg.filter(|ft| ft.hash() == ckpt.config_hash) {
        ft.objective.label()
    } else {
        return Err(Error::Checkpoint {
            path: checkpoint.to_path_buf(),
            reason: "not produced by this config".into(),
        })
        .at(Stage::Data);
    };
    let env = build_environment(&config).at(Stage::Data)?;
    let mut model = new_model(&config, &env).at(Stage::Evaluate)?;
    ckpt.restore(&mut model).at(Stage::Evaluate)?;
    let evaluations = evaluate_model(&model, &env, scorers, &method).at(Stage::Evaluate)?;
    let out = Out { root: out_dir };
    let mut scratch = ExperimentManifest::default();
    write_evaluations(&out, &evaluations, &mut scratch).at(Stage::Write)?;
    Ok(evaluations.into_iter().map(|e| e.report).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::FamilyConfig;

    pub(crate) fn smoke_config() -> ExperimentConfig {
        let family = |name: &str, n| FamilyConfig {
            name: name.into(),
            n_classes: n,
            train_per_class: 12,
            test_per_class: 6,
        };
        ExperimentConfig::from_toml(
            r#"
seed = 3
[data]
dataset = "a"
n_ood = 2
n_splits = 2
[model]
hidden = [16]
[standard]
epochs = 2
[standard.optimizer]
lr = 0.05
momentum = 0.9
weight_decay = 0.0005
[finetune]
epochs = 1
[finetune.objective]
kind = "mixoe"
alpha = 1.0
beta = 1.0
mode = "cut"
[evaluate]
scorers = ["msp", "energy"]
[evaluate.vis]
epochs = 2
lr = 0.01
momentum = 0.9
batch_size = 16
seed = 0
"#,
        )
        .map(|mut c| {
            c.data.suite = Some(SuiteConfig {
                seed: 3,
                families: vec![family("a", 6), family("b", 3)],
                web_concepts: 4,
                web_per_concept: 20,
                contamination_per_dataset: 10,
                ..SuiteConfig::default()
            });
            c
        })
        .unwrap()
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = smoke_config();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let minimal = ExperimentConfig::from_toml("seed = 1\n[data]\ndataset = \"fgvc-a\"\n").unwrap();
        assert_eq!(minimal.standard.epochs, 90);
        assert_eq!(minimal.data.val_fraction, 0.1);
        assert!(minimal.validate().is_ok());
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2\n[data]\ndataset = \"x\"\n").is_err());
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut c = smoke_config();
        c.data.dataset = "zzz".into();
        assert!(c.validate().is_err());
        let mut c = smoke_config();
        c.data.split_index = 3;
        assert!(c.validate().is_err());
        let mut c = smoke_config();
        c.evaluate.scorers.clear();
        assert!(c.validate().is_err());
        let mut c = smoke_config();
        c.finetune.as_mut().unwrap().objective = ObjectiveConfig::Oe { beta: -1.0 };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_config_but_not_output_dir() {
        let a = smoke_config();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        let applied = c
            .apply(&Overrides {
                objective: Some(ObjectiveConfig::Oe { beta: 0.5 }),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(applied.len(), 1);
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn environment_filters_contamination() {
        let env = build_environment(&smoke_config()).unwrap();
        assert_eq!(env.splits.len(), 2);
        assert_eq!(env.spec.fine_ood_classes.len(), 2);
        assert_eq!(env.spec.coarse_ood_sources, vec!["b".to_string()]);
        for pool in [&env.outliers_train, &env.outliers_val] {
            assert!(pool
                .source_labels
                .as_ref()
                .unwrap()
                .iter()
                .all(|l| l.starts_with("web-")));
        }
        assert_eq!(env.outliers_train.len() + env.outliers_val.len(), 80);
    }

    #[test]
    fn run_writes_manifest_and_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config();
        let first = run_experiment(&config, &dir.path().join("a"), None, &[]).unwrap();
        assert_eq!(first.checkpoints.len(), 2);
        assert_eq!(first.reports.len(), 5);
        assert_eq!(first.objective.as_deref(), Some("mixoe-cut"));
        for p in first.reports.iter().chain(&first.figures).chain(&first.splits) {
            assert!(dir.path().join("a").join(p).exists(), "{p:?}");
        }
        let loaded = ExperimentManifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, first);
        let second = run_experiment(&loaded.replay_config().unwrap(), &dir.path().join("b"), None, &[]).unwrap();
        assert_eq!(second.reports, first.reports);
        assert_eq!(second.config_hash, first.config_hash);
        for p in &first.reports {
            let a = fs::read(dir.path().join("a").join(p)).unwrap();
            let b = fs::read(dir.path().join("b").join(p)).unwrap();
            assert_eq!(a, b, "{p:?}");
        }
        for p in &first.figures {
            let a = fs::read(dir.path().join("a").join(p)).unwrap();
            let b = fs::read(dir.path().join("b").join(p)).unwrap();
            assert_eq!(a, b, "{p:?}");
        }
    }

    #[test]
    fn phase_commands_chain() {
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config();
        let (base, _) = run_train(&config, dir.path()).unwrap();
        let (tuned, _) = run_finetune(&config, &base, dir.path()).unwrap();
        let reports = run_evaluate(&config, &tuned, &[Scorer::Odin], dir.path()).unwrap();
        assert_eq!(reports[0].method, "mixoe-cut");
        let reports = run_evaluate(&config, &base, &[Scorer::Msp], dir.path()).unwrap();
        assert_eq!(reports[0].method, "standard");

        let mut other = config.clone();
        other.seed = 99;
        other.data.suite.as_mut().unwrap().seed = 3;
        let err = run_finetune(&other, &base, dir.path()).unwrap_err();
        assert!(matches!(err.source, Error::Checkpoint { .. }));

        let grid = [ObjectiveConfig::Oe { beta: 1.0 }, ObjectiveConfig::Oe { beta: 0.5 }];
        let outcome = run_tune(&config, &grid, &base, dir.path()).unwrap();
        assert_eq!(outcome.candidates.len(), 2);
        assert!(dir.path().join("tuning.json").exists());
        assert!(run_tune(&config, &[], &base, dir.path()).is_err());
    }
}
