//! The `rgl` command line: build graphs, train, evaluate and inspect models.
//!
//! Every run is driven by a flat TOML config (see [`ExperimentConfig`]). The
//! fully resolved config is written next to the outputs and embedded in
//! every checkpoint, so a run can be repeated from either.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_idx, scramble, subset, Dataset, Permutation};
use crate::error::Error;
use crate::graph::{build_grid_graph, covariance_graph, graph_power, knn_inverse_covariance_graph, Graph, GraphStats};
use crate::layer::{Activation, Contraction, Conv2dLayer, DenseLayer, ReceptiveGraphLayer, WeightKernel};
use crate::model::{dense_stack, Classifier, InputLayer};
use crate::optim::{
    evaluate, train, write_metrics_csv, AdamHyper, EpochMetrics, LrSchedule, OptimizerKind, Phase, TrainConfig,
    TrainObserver,
};
use crate::scheme::{
    convolution_scheme_2d, fully_connected_scheme, init_onehot, init_uniform, ConstraintFlags, OneHotOrdering,
    SchemeTensor,
};
use crate::seed::{named_rng, sub_seed};

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "RGL_DATA_DIR";
pub const CONFIG_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime { .. } => EXIT_RUNTIME,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: Into<Error>> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime { context: what(), source: e.into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontLayer {
    Receptive,
    Conv,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Grid,
    GridPower,
    Covariance,
    Knn,
    ConvReduction,
    FcReduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeInit {
    /// Circulant one-hot on graphs with a pixel layout, random one-hot otherwise.
    Auto,
    OnehotCirculant,
    OnehotRandom,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// Flat experiment config. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,

    /// Dataset root; `RGL_DATA_DIR` takes precedence.
    pub data_dir: Option<String>,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Stratified subsample sizes; whole splits when absent.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Pixel scramble applied to both splits.
    pub scramble_seed: Option<u64>,
    /// Image size for graph construction when no dataset is needed.
    pub image_height: usize,
    pub image_width: usize,

    pub front_layer: FrontLayer,
    pub graph: GraphKind,
    pub power: usize,
    pub density: f64,
    pub knn_k: usize,
    pub conv_kernel: usize,
    pub fc_outputs: usize,
    pub omega: Option<usize>,
    pub scheme_init: SchemeInit,
    pub freeze_scheme: bool,
    /// Element budget under which `Θ` is materialized.
    pub contraction_budget: usize,

    pub feature_maps: usize,
    pub dense_front_width: usize,
    pub hidden: Vec<usize>,
    pub classes: Option<usize>,
    pub dropout: f64,

    pub optimizer: OptimizerName,
    pub learning_rate: f64,
    pub lr_decay_gamma: Option<f64>,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub positive: bool,
    pub normalized: bool,
    pub l2_weight: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            data_dir: None,
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            train_subset: None,
            test_subset: None,
            scramble_seed: None,
            image_height: 28,
            image_width: 28,
            front_layer: FrontLayer::Receptive,
            graph: GraphKind::GridPower,
            power: 2,
            density: 0.03,
            knn_k: 25,
            conv_kernel: 5,
            fc_outputs: 16,
            omega: None,
            scheme_init: SchemeInit::Auto,
            freeze_scheme: false,
            contraction_budget: 64 << 20,
            feature_maps: 50,
            dense_front_width: 500,
            hidden: vec![300],
            classes: None,
            dropout: 0.5,
            optimizer: OptimizerName::Adam,
            learning_rate: 1e-3,
            lr_decay_gamma: None,
            lr_decay_every: 10,
            momentum: 0.9,
            batch_size: 64,
            epochs_main: 10,
            epochs_finetune: 5,
            positive: false,
            normalized: false,
            l2_weight: ConstraintFlags::DEFAULT_L2,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config_err(msg)) };
        check(self.config_version == CONFIG_VERSION, "config_version must be 1")?;
        check(self.image_height > 0 && self.image_width > 0, "image size must be positive")?;
        check(self.power >= 1, "power must be at least 1")?;
        check(self.density > 0.0 && self.density <= 1.0, "density must lie in (0, 1]")?;
        check(self.knn_k >= 1, "knn_k must be at least 1")?;
        check(self.conv_kernel % 2 == 1, "conv_kernel must be odd")?;
        check(self.fc_outputs >= 1, "fc_outputs must be at least 1")?;
        check(self.omega != Some(0), "omega must be at least 1")?;
        check(self.feature_maps >= 1, "feature_maps must be at least 1")?;
        check(self.dense_front_width >= 1, "dense_front_width must be at least 1")?;
        check(self.hidden.iter().all(|&h| h >= 1), "hidden widths must be positive")?;
        check(self.classes.is_none_or(|c| c >= 2), "classes must be at least 2")?;
        check((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)")?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive")?;
        check(self.lr_decay_gamma.is_none_or(|g| g > 0.0), "lr_decay_gamma must be positive")?;
        check(self.lr_decay_every >= 1, "lr_decay_every must be at least 1")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.l2_weight >= 0.0 && self.l2_weight.is_finite(), "l2_weight must be non-negative")?;
        check(self.train_subset != Some(0) && self.test_subset != Some(0), "subset sizes must be positive")?;
        if self.front_layer == FrontLayer::Receptive && self.graph == GraphKind::ConvReduction {
            check(self.omega.is_none_or(|w| w == self.conv_kernel * self.conv_kernel), "conv-reduction fixes omega to conv_kernel^2")?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: match self.optimizer {
                OptimizerName::Adam => OptimizerKind::Adam(AdamHyper::default()),
                OptimizerName::Sgd => OptimizerKind::Sgd { momentum: self.momentum },
            },
            schedule: match self.lr_decay_gamma {
                Some(gamma) => LrSchedule::StepDecay { initial: self.learning_rate, gamma, every: self.lr_decay_every },
                None => LrSchedule::Constant(self.learning_rate),
            },
            batch_size: self.batch_size,
            epochs_main: self.epochs_main,
            epochs_finetune: self.epochs_finetune,
            flags: ConstraintFlags { positive: self.positive, normalized: self.normalized, l2_weight: self.l2_weight },
            seed: sub_seed(self.seed, "train"),
        }
    }

    fn data_root(&self) -> Result<PathBuf, CliError> {
        std::env::var_os(DATA_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.data_dir.as_ref().map(PathBuf::from))
            .ok_or_else(|| config_err(format!("no dataset root: set data_dir or {DATA_DIR_ENV}")))
    }

    fn needs_data_for_graph(&self) -> bool {
        matches!(self.graph, GraphKind::Covariance | GraphKind::Knn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Parser)]
#[command(name = "rgl", version, about = "Receptive graph layer experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the configured graph and write it with a stats report.
    BuildGraph,
    /// Train the configured model.
    Train,
    /// Error rate of a checkpoint on one split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Scheme statistics of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Earlier checkpoint to measure dominant-index persistence against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

/// Parses arguments, runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let load_config = || -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("rgl-out"));
    match cli.command {
        Command::BuildGraph => {
            let stats = cmd_build_graph(&load_config()?, &out)?;
            print!("{}", format_stats(&stats));
        }
        Command::Train => {
            let summary = cmd_train(&load_config()?, &out)?;
            if let Some(err) = summary.final_test_error {
                println!("final_test_error={err:.6}");
            }
            if let Some((epoch, err)) = summary.best {
                println!("best_epoch={epoch}\nbest_test_error={err:.6}");
            }
            println!("out={}", out.display());
        }
        Command::Eval { checkpoint, split } => {
            let err = cmd_eval(&checkpoint, split)?;
            println!("error_rate={err:.6}");
        }
        Command::Inspect { checkpoint, reference } => {
            print!("{}", cmd_inspect(&checkpoint, reference.as_deref())?);
        }
    }
    Ok(())
}

fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset, CliError> {
    let root = cfg.data_root()?;
    let (images, labels, count, name) = match split {
        Split::Train => (&cfg.train_images, &cfg.train_labels, cfg.train_subset, "train"),
        Split::Test => (&cfg.test_images, &cfg.test_labels, cfg.test_subset, "test"),
    };
    let (ip, lp) = (root.join(images), root.join(labels));
    let mut data = load_idx(&ip, &lp).context(|| format!("loading {name} split from {}", root.display()))?;
    if let Some(count) = count {
        data = subset(&data, count.min(data.len()), sub_seed(cfg.seed, &format!("{name}-subset")))
            .context(|| format!("subsetting {name} split"))?;
    }
    if let Some(seed) = cfg.scramble_seed {
        data = scramble(&data, &Permutation::random(data.features(), seed)).context(|| "scrambling pixels".into())?;
    }
    Ok(data)
}

/// Builds the support graph for the receptive layer. `train` is required for
/// data-driven graphs.
pub fn build_graph(cfg: &ExperimentConfig, train: Option<&Dataset>) -> Result<Graph, CliError> {
    let (h, w) = match train {
        Some(d) => (d.height, d.width),
        None => (cfg.image_height, cfg.image_width),
    };
    let need = || train.ok_or_else(|| config_err("this graph needs a dataset"));
    let g = match cfg.graph {
        GraphKind::Grid => build_grid_graph(h, w),
        GraphKind::GridPower => build_grid_graph(h, w).and_then(|g| graph_power(&g, cfg.power)),
        GraphKind::Covariance => covariance_graph(need()?.images(), cfg.density),
        GraphKind::Knn => knn_inverse_covariance_graph(need()?.images(), cfg.knn_k),
        GraphKind::ConvReduction => {
            convolution_scheme_2d::<f32>(h, w, cfg.conv_kernel, cfg.conv_kernel).map(|s| s.graph().clone())
        }
        GraphKind::FcReduction => fully_connected_scheme::<f32>(h * w, cfg.fc_outputs).map(|s| s.graph().clone()),
    };
    g.context(|| format!("building {:?} graph", cfg.graph))
}

/// `ω` used when the config leaves it open.
pub fn default_omega(cfg: &ExperimentConfig, g: &Graph) -> usize {
    match cfg.graph {
        GraphKind::Grid => 5,
        GraphKind::GridPower => 2 * cfg.power * cfg.power + 2 * cfg.power + 1,
        GraphKind::Knn => cfg.knn_k,
        GraphKind::Covariance => ((g.nnz() as f64 / g.rows() as f64).round() as usize).max(1),
        GraphKind::ConvReduction => cfg.conv_kernel * cfg.conv_kernel,
        GraphKind::FcReduction => g.nnz(),
    }
}

fn build_scheme(cfg: &ExperimentConfig, g: Graph, omega: usize) -> Result<SchemeTensor<f32>, CliError> {
    let seed = sub_seed(cfg.seed, "scheme");
    let mut s = match cfg.graph {
        GraphKind::ConvReduction => convolution_scheme_2d(cfg.image_height, cfg.image_width, cfg.conv_kernel, cfg.conv_kernel),
        GraphKind::FcReduction => fully_connected_scheme(g.cols(), g.rows()),
        _ => match cfg.scheme_init {
            SchemeInit::Auto if g.layout().is_some() => init_onehot(&g, omega, OneHotOrdering::KnownCirculant, seed),
            SchemeInit::Auto | SchemeInit::OnehotRandom => init_onehot(&g, omega, OneHotOrdering::UnknownRandom, seed),
            SchemeInit::OnehotCirculant => init_onehot(&g, omega, OneHotOrdering::KnownCirculant, seed),
            SchemeInit::Uniform => init_uniform(&g, omega, seed),
        },
    }
    .context(|| "initializing scheme".into())?;
    s.frozen = cfg.freeze_scheme;
    Ok(s)
}

/// Builds the initial classifier. Fills `omega` and `classes` in `cfg` with
/// the values actually used.
pub fn build_model(cfg: &mut ExperimentConfig, train: &Dataset) -> Result<Classifier<f32>, CliError> {
    if matches!(cfg.graph, GraphKind::ConvReduction) || cfg.front_layer == FrontLayer::Conv {
        cfg.image_height = train.height;
        cfg.image_width = train.width;
    }
    let classes = cfg.classes.unwrap_or(train.classes);
    if classes < train.classes && train.labels().iter().any(|&l| l >= classes) {
        return Err(config_err(format!("classes = {classes} but the dataset has label {}", train.classes - 1)));
    }
    cfg.classes = Some(classes);
    let mut rng = named_rng(cfg.seed, "init");
    let p = train.channels;
    let q = cfg.feature_maps;
    let input = match cfg.front_layer {
        FrontLayer::Receptive => {
            let g = build_graph(cfg, Some(train))?;
            if g.cols() * p != train.features() {
                return Err(config_err(format!("graph has {} input nodes, images have {} pixels", g.cols(), train.features() / p)));
            }
            let omega = match cfg.graph {
                GraphKind::ConvReduction | GraphKind::FcReduction => default_omega(cfg, &g),
                _ => cfg.omega.unwrap_or_else(|| default_omega(cfg, &g)),
            };
            cfg.omega = Some(omega);
            let scheme = build_scheme(cfg, g, omega)?;
            let kernel = WeightKernel::glorot(omega, p, q, &mut rng).context(|| "initializing kernel".into())?;
            let layer = ReceptiveGraphLayer::new(scheme, kernel, vec![0.0; q], Activation::Relu)
                .context(|| "building receptive layer".into())?
                .with_contraction(Contraction::Auto { budget: cfg.contraction_budget });
            InputLayer::Receptive(layer)
        }
        FrontLayer::Conv => {
            let k = cfg.conv_kernel;
            let kernel = WeightKernel::glorot(k * k, p, q, &mut rng).context(|| "initializing kernel".into())?;
            let layer = Conv2dLayer::new(train.height, train.width, k, k, kernel, vec![0.0; q], Activation::Relu)
                .context(|| "building convolution layer".into())?;
            InputLayer::Conv(layer)
        }
        FrontLayer::Dense => {
            InputLayer::Dense(DenseLayer::glorot(train.features(), cfg.dense_front_width, Activation::Relu, &mut rng))
        }
    };
    let dense = dense_stack(input.out_features(), &cfg.hidden, classes, &mut rng);
    Classifier::new(input, dense, cfg.dropout).context(|| "assembling classifier".into())
}

pub fn format_stats(s: &GraphStats) -> String {
    format!(
        "rows={}\ncols={}\nnnz={}\ndensity={:.6}\nmin_degree={}\nmedian_degree={}\nmax_degree={}\n",
        s.rows, s.cols, s.nnz, s.density, s.min_degree, s.median_degree, s.max_degree
    )
}

/// Writes `graph.txt` and `graph_stats.txt` into `out`.
pub fn cmd_build_graph(cfg: &ExperimentConfig, out: &Path) -> Result<GraphStats, CliError> {
    cfg.validate()?;
    let train = if cfg.needs_data_for_graph() { Some(load_split(cfg, Split::Train)?) } else { None };
    let g = build_graph(cfg, train.as_ref())?;
    fs::create_dir_all(out).context(|| format!("creating {}", out.display()))?;
    let file = fs::File::create(out.join("graph.txt")).context(|| "creating graph.txt".into())?;
    g.write_text(std::io::BufWriter::new(file)).context(|| "writing graph.txt".into())?;
    let stats = g.stats();
    fs::write(out.join("graph_stats.txt"), format_stats(&stats)).context(|| "writing graph_stats.txt".into())?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochMetrics>,
    pub final_test_error: Option<f64>,
    /// Epoch and test error of the best checkpoint.
    pub best: Option<(usize, f64)>,
    pub resolved: ExperimentConfig,
}

struct RunObserver<'a> {
    out: &'a Path,
    metadata: &'a str,
    history: Vec<EpochMetrics>,
}

impl TrainObserver<f32> for RunObserver<'_> {
    fn after_epoch(&mut self, m: &EpochMetrics, _model: &Classifier<f32>) -> crate::Result<()> {
        let err = m.test_error.map(|e| format!(" test_error={e:.4}")).unwrap_or_default();
        eprintln!("epoch {} {} loss={:.5}{}", m.epoch, m.phase, m.train_loss, err);
        self.history.push(m.clone());
        write_metrics_csv(&self.history, fs::File::create(self.out.join("metrics.csv"))?)
    }

    fn after_phase(&mut self, phase: Phase, model: &Classifier<f32>) -> crate::Result<()> {
        if phase == Phase::Main {
            Checkpoint::new(model.clone(), self.metadata).save(&self.out.join("main.ckpt"))?;
        }
        Ok(())
    }
}

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Trains the configured model. Writes into `out`:
/// `resolved_config.toml`, `metrics.csv`, `main.ckpt` (end of the joint
/// phase), `final.ckpt`, and `best.ckpt` (lowest test error). An
/// `INCOMPLETE` marker exists while the run is in progress or after it
/// failed.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let train_set = load_split(&cfg, Split::Train)?;
    let test_set = load_split(&cfg, Split::Test)?;
    if test_set.features() != train_set.features() {
        return Err(config_err("train and test images differ in size"));
    }
    let mut model = build_model(&mut cfg, &train_set)?;

    fs::create_dir_all(out).context(|| format!("creating {}", out.display()))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run in progress\n").context(|| "writing marker".into())?;
    let resolved = cfg.to_toml();
    fs::write(out.join("resolved_config.toml"), &resolved).context(|| "writing resolved config".into())?;
    write_metrics_csv(&[], fs::File::create(out.join("metrics.csv")).context(|| "creating metrics.csv".into())?)
        .context(|| "writing metrics.csv".into())?;

    let mut observer = RunObserver { out, metadata: &resolved, history: Vec::new() };
    let result = train(&mut model, &train_set, Some(&test_set), &cfg.train_config(), &mut observer);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::write(&marker, format!("training failed: {e}\n"));
            return Err(CliError::Runtime { context: "training".into(), source: e });
        }
    };
    let finish = || -> crate::Result<Option<f64>> {
        Checkpoint::new(model.clone(), resolved.as_str()).save(&out.join("final.ckpt"))?;
        if let Some(best) = &report.best {
            Checkpoint::new(best.model.clone(), resolved.as_str()).save(&out.join("best.ckpt"))?;
        }
        write_metrics_csv(&report.history, fs::File::create(out.join("metrics.csv"))?)?;
        let final_err = match report.history.last() {
            Some(m) => m.test_error,
            None => Some(evaluate(&model, &test_set, 256)?),
        };
        fs::remove_file(&marker)?;
        Ok(final_err)
    };
    let final_test_error = finish().context(|| "writing outputs".into())?;
    Ok(TrainSummary {
        history: report.history,
        final_test_error,
        best: report.best.map(|b| (b.epoch, b.test_error)),
        resolved: cfg,
    })
}

fn checkpoint_config(ck: &Checkpoint<f32>) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::from_toml(&ck.metadata).map_err(|e| config_err(format!("checkpoint config: {e}")))
}

/// Error rate of a checkpoint on a split of the dataset it was trained on
/// (same subset and scramble).
pub fn cmd_eval(checkpoint: &Path, split: Split) -> Result<f64, CliError> {
    let ck = Checkpoint::<f32>::load(checkpoint).context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = checkpoint_config(&ck)?;
    let data = load_split(&cfg, split)?;
    evaluate(&ck.model, &data, 256).context(|| "evaluating".into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectReport {
    pub edges: usize,
    pub omega: usize,
    pub frozen: bool,
    /// Fraction of scheme vectors with exactly one nonzero entry.
    pub onehot_fraction: f64,
    /// Mean over vectors of `max|s_k| / Σ|s_k|`.
    pub mean_max_share: f64,
    /// Ten equal-width bins over `[min, max]` of all entries.
    pub histogram: Vec<(f64, f64, usize)>,
    /// Fraction of edges whose dominant index matches the reference.
    pub persistence: Option<f64>,
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "edges={}\nomega={}\nfrozen={}", self.edges, self.omega, self.frozen)?;
        writeln!(f, "onehot_fraction={:.6}\nmean_max_share={:.6}", self.onehot_fraction, self.mean_max_share)?;
        if let Some(p) = self.persistence {
            writeln!(f, "dominant_index_persistence={p:.6}")?;
        }
        writeln!(f, "histogram:")?;
        for (lo, hi, n) in &self.histogram {
            writeln!(f, "  [{lo:+.4}, {hi:+.4}) {n}")?;
        }
        Ok(())
    }
}

/// Index of the largest-magnitude entry (first on ties).
fn dominant(v: &[f32]) -> usize {
    (1..v.len()).fold(0, |best, k| if v[k].abs() > v[best].abs() { k } else { best })
}

pub fn inspect_scheme(s: &SchemeTensor<f32>, reference: Option<&SchemeTensor<f32>>) -> Result<InspectReport, CliError> {
    let omega = s.omega();
    let vectors: Vec<&[f32]> = s.values().chunks(omega).collect();
    let onehot = vectors.iter().filter(|v| v.iter().filter(|&&x| x != 0.0).count() == 1).count();
    let share: f64 = vectors
        .iter()
        .map(|v| {
            let total: f64 = v.iter().map(|x| x.abs() as f64).sum();
            if total > 0.0 {
                v.iter().map(|x| x.abs() as f64).fold(0.0, f64::max) / total
            } else {
                0.0
            }
        })
        .sum();
    let (lo, hi) = s.values().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x as f64), hi.max(x as f64))
    });
    let bins = 10;
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in s.values() {
        let b = (((x as f64 - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let histogram = counts.into_iter().enumerate().map(|(b, n)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, n)).collect();
    let persistence = match reference {
        Some(r) => {
            if r.graph() != s.graph() || r.omega() != omega {
                return Err(config_err("reference checkpoint has a different graph or omega"));
            }
            let same = r.values().chunks(omega).zip(&vectors).filter(|(a, b)| dominant(a) == dominant(b)).count();
            Some(same as f64 / vectors.len() as f64)
        }
        None => None,
    };
    Ok(InspectReport {
        edges: vectors.len(),
        omega,
        frozen: s.frozen,
        onehot_fraction: onehot as f64 / vectors.len() as f64,
        mean_max_share: share / vectors.len() as f64,
        histogram,
        persistence,
    })
}

pub fn cmd_inspect(checkpoint: &Path, reference: Option<&Path>) -> Result<InspectReport, CliError> {
    let load = |p: &Path| -> Result<SchemeTensor<f32>, CliError> {
        let ck = Checkpoint::<f32>::load(p).context(|| format!("loading {}", p.display()))?;
        match ck.model.input {
            InputLayer::Receptive(l) => Ok(l.scheme),
            _ => Err(config_err(format!("{} has no receptive graph layer", p.display()))),
        }
    };
    let s = load(checkpoint)?;
    let r = reference.map(load).transpose()?;
    inspect_scheme(&s, r.as_ref())
}
