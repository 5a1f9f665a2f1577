//! Experiment configuration, the round loop and metrics persistence.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, TheoryParams};
use crate::client::{
    self, Activation, ClientError, ClientState, LrKind, LrSchedule, Objective, QuantErrorStats, TrainingSpec,
};
use crate::datagen::{self, DataError, DataGenParams, DataShard};
use crate::quantkit::MAX_RATE;
use crate::server::{ClientReport, ServerError, ServerState};
use crate::sslcore::{self, FeatureMatrix, SslError};
use crate::streams::{stream, Domain};

/// Overrides both seeds when set.
pub const SEED_ENV: &str = "FEDQ_SEED";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const INITIAL_METRICS_FILE: &str = "initial_metrics.json";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid config: {0}")]
    Validation(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("aborted before round {round}: {reason}")]
    Aborted { round: u64, reason: String },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

fn default_grad_extra_bits() -> u32 {
    2
}
fn default_local_epochs() -> i64 {
    1
}
fn default_batch_size() -> Option<usize> {
    Some(64)
}
fn default_aug_sigma() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_lr_kind() -> LrKind {
    LrKind::InverseSqrt
}
fn default_lr_scale() -> f64 {
    0.05
}
fn default_frequent_count() -> usize {
    2000
}
fn default_infrequent_exponent() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    #[serde(default = "default_lr_kind")]
    pub kind: LrKind,
    /// `α₀`; when absent it is `scale / λ₁(X̄)`.
    #[serde(default)]
    pub base: Option<f64>,
    #[serde(default = "default_lr_scale")]
    pub scale: f64,
    #[serde(default = "default_true")]
    pub constant_within_round: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self { kind: default_lr_kind(), base: None, scale: default_lr_scale(), constant_within_round: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer widths from input to output; defaults to `[d, m]`.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub activation: Activation,
    /// Representation dimension; defaults to the number of clients.
    #[serde(default)]
    pub m: Option<usize>,
    /// Defaults to off for a single linear layer and on otherwise.
    #[serde(default)]
    pub quantize_activations: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_frequent_count")]
    pub frequent_count: usize,
    #[serde(default = "default_infrequent_exponent")]
    pub infrequent_exponent: f64,
    #[serde(default = "default_true")]
    pub noise: bool,
    /// Give every client a copy of client 1's shard.
    #[serde(default)]
    pub identical_shards: bool,
    /// Load shards written by `datagen` instead of generating them.
    #[serde(default)]
    pub shard_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frequent_count: default_frequent_count(),
            infrequent_exponent: default_infrequent_exponent(),
            noise: true,
            identical_shards: false,
            shard_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default)]
    pub data: u64,
    #[serde(default)]
    pub training: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_true")]
    pub moreau: bool,
    #[serde(default = "default_true")]
    pub representability: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { moreau: true, representability: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub d: usize,
    /// `s_k` for clients `1..=n_clients`.
    pub bitwidths: Vec<u32>,
    pub rounds: i64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: i64,
    #[serde(default = "default_grad_extra_bits")]
    pub grad_extra_bits: u32,
    /// `null` trains full-batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: Option<usize>,
    /// When false every quantizer is bypassed.
    #[serde(default = "default_true")]
    pub quantize: bool,
    #[serde(default = "default_aug_sigma")]
    pub aug_sigma: f64,
    #[serde(default)]
    pub lr: LrConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything but the required fields.
    pub fn new(n_clients: usize, d: usize, bitwidths: Vec<u32>, rounds: i64) -> Self {
        Self {
            n_clients,
            d,
            bitwidths,
            rounds,
            local_epochs: default_local_epochs(),
            grad_extra_bits: default_grad_extra_bits(),
            batch_size: default_batch_size(),
            quantize: true,
            aug_sigma: default_aug_sigma(),
            lr: LrConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            seeds: SeedConfig::default(),
            metrics: MetricsConfig::default(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_params(&self) -> DataGenParams {
        DataGenParams {
            n: self.n_clients,
            d: self.d,
            frequent_count: self.data.frequent_count,
            infrequent_exponent: self.data.infrequent_exponent,
            noise: self.data.noise,
            seed: self.seeds.data,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        match &self.model.layers {
            Some(l) => l.clone(),
            None => vec![self.d, self.model.m.unwrap_or(self.n_clients)],
        }
    }

    pub fn m(&self) -> usize {
        *self.layers().last().expect("validated layer list")
    }

    pub fn rounds(&self) -> u64 {
        self.rounds.max(0) as u64
    }

    pub fn local_epochs(&self) -> usize {
        self.local_epochs.max(0) as usize
    }

    pub fn quantize_activations(&self) -> bool {
        self.model.quantize_activations.unwrap_or(self.layers().len() > 2)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation(msg));
        if self.n_clients == 0 {
            return fail("n_clients must be at least 1".into());
        }
        if self.bitwidths.len() != self.n_clients {
            return fail(format!("bitwidths has {} entries but n_clients is {}", self.bitwidths.len(), self.n_clients));
        }
        if let Some(&s) = self.bitwidths.iter().find(|&&s| s == 0 || s + self.grad_extra_bits > MAX_RATE) {
            return fail(format!(
                "bitwidth {s} with {} extra gradient bits is outside 1..={MAX_RATE}",
                self.grad_extra_bits
            ));
        }
        if self.rounds < 1 {
            return fail(format!("rounds must be at least 1, got {}", self.rounds));
        }
        if self.local_epochs < 1 {
            return fail(format!("local_epochs must be at least 1, got {}", self.local_epochs));
        }
        if self.batch_size == Some(0) {
            return fail("batch_size must be positive or null".into());
        }
        if !(self.aug_sigma >= 0.0 && self.aug_sigma.is_finite()) {
            return fail(format!("aug_sigma must be a non-negative number, got {}", self.aug_sigma));
        }
        if let Some(b) = self.lr.base {
            if !(b > 0.0 && b.is_finite()) {
                return fail(format!("lr.base must be positive, got {b}"));
            }
        }
        if !(self.lr.scale > 0.0 && self.lr.scale.is_finite()) {
            return fail(format!("lr.scale must be positive, got {}", self.lr.scale));
        }
        let layers = self.layers();
        if layers.len() < 2 || layers.contains(&0) {
            return fail(format!("model.layers must list at least two positive widths, got {layers:?}"));
        }
        if layers[0] != self.d {
            return fail(format!("model.layers starts at {} but d is {}", layers[0], self.d));
        }
        if let (Some(m), Some(_)) = (self.model.m, &self.model.layers) {
            if m != self.m() {
                return fail(format!("model.m is {m} but the last layer has width {}", self.m()));
            }
        }
        self.data_params().validate().map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Copy with every derived default written out, suitable for the echo file.
    pub fn resolved(&self, lambda_max: f64) -> Self {
        let mut out = self.clone();
        out.lr.base = Some(self.lr.base.unwrap_or(self.lr.scale / lambda_max));
        out.model.layers = Some(self.layers());
        out.model.m = Some(self.m());
        out.model.quantize_activations = Some(self.quantize_activations());
        out
    }

    pub fn schedule(&self, lambda_max: f64) -> LrSchedule {
        LrSchedule {
            kind: self.lr.kind,
            base: self.lr.base.unwrap_or(self.lr.scale / lambda_max),
            constant_within_round: self.lr.constant_within_round,
        }
    }
}

/// Reads and validates a config file, applying the seed override from the
/// environment.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = ExperimentConfig::from_json(&text, path)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| ConfigError::Validation(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        cfg.seeds = SeedConfig { data: seed, training: seed };
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientMetrics {
    pub client_id: u32,
    /// Local loss of the dequantized client model after training.
    pub loss: f64,
    pub grad_error: f64,
    pub weight_error: f64,
    pub requant_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// 0 for the initial model.
    pub round: u64,
    pub alpha: f64,
    pub global_loss: f64,
    pub moreau_surrogate: Option<f64>,
    pub clients: Vec<ClientMetrics>,
    /// First `n` entries of the global model's representability.
    pub representability: Vec<f64>,
    pub wall_ms: f64,
}

pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header(n_clients: usize) -> String {
    let mut cols: Vec<String> = ["round", "alpha", "global_loss", "moreau_surrogate"].map(String::from).to_vec();
    for k in 1..=n_clients {
        for name in ["loss", "eps_g", "eps_w", "eps_r"] {
            cols.push(format!("{name}_{k}"));
        }
    }
    for i in 1..=n_clients {
        cols.push(format!("r_{i}"));
    }
    cols.join(",")
}

impl MetricsRecord {
    /// Row in `csv_header` order; disabled diagnostics are empty fields.
    pub fn csv_row(&self, n_clients: usize) -> String {
        let mut cols = vec![
            self.round.to_string(),
            csv_float(self.alpha),
            csv_float(self.global_loss),
            self.moreau_surrogate.map(csv_float).unwrap_or_default(),
        ];
        for c in &self.clients {
            cols.extend([c.loss, c.grad_error, c.weight_error, c.requant_error].map(csv_float));
        }
        for i in 0..n_clients {
            cols.push(self.representability.get(i).copied().map(csv_float).unwrap_or_default());
        }
        cols.join(",")
    }
}

/// Callbacks into the round loop.
pub trait RoundHook {
    /// Called before round `round` (1-based) starts; an error aborts the run.
    fn before_round(&mut self, _round: u64) -> Result<(), String> {
        Ok(())
    }
}

struct NoHook;
impl RoundHook for NoHook {}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where to write artifacts; falls back to the config's `output_dir`.
    /// With neither, nothing is written.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; defaults to `min(n_clients, available parallelism)`.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub initial: MetricsRecord,
    pub records: Vec<MetricsRecord>,
    /// Every local step of every client, in client order.
    pub client_stats: Vec<QuantErrorStats>,
    /// `(α, ‖ε_r‖²)` for every server re-quantization.
    pub requant: Vec<(f64, f64)>,
    /// Step size of each round.
    pub round_alphas: Vec<f64>,
    pub global_covariance: Array2<f64>,
    pub global_model: Vec<Array2<f64>>,
    pub out_dir: Option<PathBuf>,
}

impl RunSummary {
    pub fn all_steps(&self) -> QuantErrorStats {
        let mut all = QuantErrorStats::default();
        for s in &self.client_stats {
            all.extend(s.clone());
        }
        all
    }

    pub fn mean_requant_error(&self) -> f64 {
        if self.requant.is_empty() {
            return 0.0;
        }
        self.requant.iter().map(|&(_, e)| e).sum::<f64>() / self.requant.len() as f64
    }
}

/// Shards as configured: loaded from `shard_dir`, copies of client 1's
/// shard, or freshly generated.
pub fn prepare_shards(cfg: &ExperimentConfig) -> Result<Vec<DataShard>, RunError> {
    let params = cfg.data_params();
    let mut shards = if let Some(dir) = &cfg.data.shard_dir {
        (1..=cfg.n_clients as u32)
            .map(|k| datagen::read_shard(&dir.join(datagen::shard_file_name(k))))
            .collect::<Result<Vec<_>, _>>()?
    } else if cfg.data.identical_shards {
        let first = datagen::generate_shard(&params, 1, &mut datagen::client_stream(&params, 1))?;
        (1..=cfg.n_clients as u32)
            .map(|k| DataShard::new(k, first.samples.clone(), first.labels.clone()))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        datagen::generate_all(&params)?
    };
    for s in &shards {
        if s.dim() != cfg.d {
            return Err(DataError::DimensionMismatch(format!(
                "client {} shard has dimension {}, config says {}",
                s.client_id,
                s.dim(),
                cfg.d
            ))
            .into());
        }
    }
    for s in shards.iter_mut() {
        s.covariance()?;
    }
    Ok(shards)
}

/// Shared full-precision initialization, `N(0, (0.1/√fan_in)²)` per layer.
pub fn initial_weights(cfg: &ExperimentConfig) -> Vec<Array2<f64>> {
    let mut rng = stream(cfg.seeds.training, Domain::Init, 0);
    cfg.layers()
        .windows(2)
        .map(|w| {
            let normal = Normal::new(0.0, 0.1 / (w[0] as f64).sqrt()).expect("positive std");
            Array2::from_shape_simple_fn((w[1], w[0]), || normal.sample(&mut rng))
        })
        .collect()
}

struct Evaluator {
    linear: bool,
    activation: Activation,
    global_cov: Array2<f64>,
    pooled: Option<Array2<f64>>,
    theory: Option<TheoryParams>,
    representability: bool,
    n: usize,
}

impl Evaluator {
    fn new(cfg: &ExperimentConfig, shards: &[DataShard], global_cov: Array2<f64>) -> Result<Self, RunError> {
        let linear = cfg.layers().len() == 2;
        let pooled = if linear {
            None
        } else {
            let views: Vec<_> = shards.iter().map(|s| s.samples.view()).collect();
            Some(concatenate(Axis(0), &views).map_err(|e| RunError::Pool(e.to_string()))?)
        };
        let theory = (linear && cfg.metrics.moreau).then(|| TheoryParams::for_covariance(&global_cov)).transpose()?;
        Ok(Self {
            linear,
            activation: cfg.model.activation,
            global_cov,
            pooled,
            theory,
            representability: cfg.metrics.representability && linear,
            n: cfg.n_clients,
        })
    }

    fn loss(&self, weights: &[Array2<f64>], cov: &Array2<f64>, data: &Array2<f64>) -> Result<f64, RunError> {
        if self.linear {
            Ok(sslcore::loss(&FeatureMatrix::new(weights[0].clone())?, cov)?)
        } else {
            Ok(Objective::OutputCovariance.evaluate(weights, data, self.activation))
        }
    }

    fn global(&self, round: u64, alpha: f64, weights: &[Array2<f64>]) -> Result<MetricsRecord, RunError> {
        let global_loss = match &self.pooled {
            Some(data) => Objective::OutputCovariance.evaluate(weights, data, self.activation),
            None => sslcore::loss(&FeatureMatrix::new(weights[0].clone())?, &self.global_cov)?,
        };
        let moreau_surrogate = match &self.theory {
            Some(tp) => {
                Some(analysis::moreau_grad_surrogate(&FeatureMatrix::new(weights[0].clone())?, &self.global_cov, tp)?)
            }
            None => None,
        };
        let representability = if self.representability && weights[0].iter().any(|&v| v != 0.0) {
            let r = sslcore::representability(&FeatureMatrix::new(weights[0].clone())?)?;
            r.iter().take(self.n).copied().collect()
        } else {
            Vec::new()
        };
        Ok(MetricsRecord {
            round,
            alpha,
            global_loss,
            moreau_surrogate,
            clients: Vec::new(),
            representability,
            wall_ms: 0.0,
        })
    }
}

struct Artifacts {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    n: usize,
}

impl Artifacts {
    fn create(dir: &Path, resolved: &ExperimentConfig, initial: &MetricsRecord) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let echo = serde_json::to_string_pretty(resolved).expect("config serializes");
        fs::write(dir.join(CONFIG_ECHO_FILE), echo + "\n").map_err(io_err("writing config echo"))?;
        let init = serde_json::to_string_pretty(initial).expect("metrics serialize");
        fs::write(dir.join(INITIAL_METRICS_FILE), init + "\n").map_err(io_err("writing initial metrics"))?;
        let open = |name: &str| -> Result<BufWriter<File>, RunError> {
            Ok(BufWriter::new(File::create(dir.join(name)).map_err(io_err(format!("creating {name}")))?))
        };
        let mut out = Self { metrics: open(METRICS_FILE)?, timing: open(TIMING_FILE)?, n: resolved.n_clients };
        writeln!(out.metrics, "{}", csv_header(out.n)).map_err(io_err("writing metrics header"))?;
        writeln!(out.timing, "round,wall_ms").map_err(io_err("writing timing header"))?;
        out.flush()?;
        Ok(out)
    }

    fn append(&mut self, record: &MetricsRecord) -> Result<(), RunError> {
        writeln!(self.metrics, "{}", record.csv_row(self.n)).map_err(io_err("writing metrics row"))?;
        writeln!(self.timing, "{},{:.3}", record.round, record.wall_ms).map_err(io_err("writing timing row"))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<(), RunError> {
        self.metrics.flush().map_err(io_err("flushing metrics"))?;
        self.timing.flush().map_err(io_err("flushing timing"))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    run_experiment_with_hook(cfg, opts, &mut NoHook)
}

/// Full simulation: data, shared init, `T` rounds of parallel local training
/// followed by server aggregation, with one metrics row per round.
pub fn run_experiment_with_hook(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    hook: &mut dyn RoundHook,
) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    let mut shards = prepare_shards(cfg)?;
    let global_cov = datagen::global_covariance(&shards)?;
    let lambda_max = analysis::spectral_norm(&global_cov);
    if lambda_max <= 0.0 {
        return Err(ConfigError::Validation("data covariance is zero".into()).into());
    }
    let resolved = cfg.resolved(lambda_max);
    let schedule = cfg.schedule(lambda_max);
    let evaluator = Evaluator::new(cfg, &shards, global_cov.clone())?;
    let init = initial_weights(cfg);

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for (k, &bits) in cfg.bitwidths.iter().enumerate() {
        let id = k as u32 + 1;
        let spec = TrainingSpec {
            bitwidth: bits,
            grad_extra_bits: cfg.grad_extra_bits,
            quantize: cfg.quantize,
            quantize_activations: cfg.quantize_activations(),
            activation: cfg.model.activation,
            aug_sigma: cfg.aug_sigma,
            schedule,
            batch_size: cfg.batch_size,
        };
        clients.push(ClientState::new(id, spec, &init, stream(cfg.seeds.training, Domain::Training, id as u64))?);
    }
    let bitwidths = clients.iter().map(|c| (c.client_id, c.bitwidth())).collect();
    let mut server =
        ServerState::new(init.clone(), bitwidths, cfg.quantize, stream(cfg.seeds.training, Domain::Server, 0));

    let initial = evaluator.global(0, schedule.at(0), &init)?;
    let out_dir = opts.out_dir.clone().or_else(|| cfg.output_dir.clone());
    let mut artifacts = match &out_dir {
        Some(dir) => Some(Artifacts::create(dir, &resolved, &initial)?),
        None => None,
    };

    let threads = opts
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.n_clients))
        .max(1);
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| RunError::Pool(e.to_string()))?;

    let epochs = cfg.local_epochs();
    let mut records = Vec::with_capacity(cfg.rounds() as usize);
    let mut client_stats = vec![QuantErrorStats::default(); cfg.n_clients];
    let mut requant = Vec::new();
    let mut round_alphas = Vec::new();
    for round in 1..=cfg.rounds() {
        hook.before_round(round).map_err(|reason| RunError::Aborted { round, reason })?;
        let started = Instant::now();
        let index = round - 1;
        let alpha = schedule.at(index);

        let trained: Vec<Result<QuantErrorStats, ClientError>> = pool.install(|| {
            clients
                .par_iter_mut()
                .zip(shards.par_iter())
                .map(|(c, s)| client::run_local_epochs(c, s, epochs, index))
                .collect()
        });
        let mut per_client = Vec::with_capacity(cfg.n_clients);
        for (k, stats) in trained.into_iter().enumerate() {
            let stats = stats?;
            let weights = clients[k].weights();
            let shard = &mut shards[k];
            let cov = shard.covariance()?.clone();
            per_client.push(ClientMetrics {
                client_id: clients[k].client_id,
                loss: evaluator.loss(&weights, &cov, &shard.samples)?,
                grad_error: stats.mean_grad_error(),
                weight_error: stats.mean_weight_error(),
                requant_error: 0.0,
            });
            client_stats[k].extend(stats);
        }

        let reports: Vec<ClientReport> = clients
            .iter()
            .zip(&shards)
            .map(|(c, s)| ClientReport { client_id: c.client_id, model: c.model.clone(), sample_count: s.len() })
            .collect();
        let downlinks = server.run_round(&reports)?;
        for (c, down) in clients.iter_mut().zip(downlinks) {
            debug_assert_eq!(c.client_id, down.client_id);
            c.install(down.model)?;
            requant.push((alpha, down.requant_error_sq));
            if let Some(m) = per_client.iter_mut().find(|m| m.client_id == down.client_id) {
                m.requant_error = down.requant_error_sq;
            }
        }

        let mut record = evaluator.global(round, alpha, &server.global_model)?;
        record.clients = per_client;
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        if let Some(a) = artifacts.as_mut() {
            a.append(&record)?;
        }
        round_alphas.push(alpha);
        records.push(record);
    }

    Ok(RunSummary {
        config: resolved,
        initial,
        records,
        client_stats,
        requant,
        round_alphas,
        global_covariance: global_cov,
        global_model: server.global_model,
        out_dir,
    })
}

/// Parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty metrics file")?;
        let columns: Vec<String> = header.split(',').map(String::from).collect();
        if columns.first().map(String::as_str) != Some("round") {
            return Err("metrics header must start with `round`".into());
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(format!("row {} has {} fields, expected {}", i + 1, fields.len(), columns.len()));
            }
            let row = fields
                .iter()
                .map(|f| {
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>().map(Some).map_err(|_| format!("row {}: bad number {f:?}", i + 1))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// `round,metric,value` rows, one per non-empty cell.
    pub fn long_format(&self) -> String {
        let mut out = String::from("round,metric,value\n");
        for row in &self.rows {
            let round = row[0].map(|r| r as u64).unwrap_or_default();
            for (name, v) in self.columns.iter().zip(row).skip(1) {
                if let Some(v) = v {
                    out.push_str(&format!("{round},{name},{}\n", csv_float(*v)));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("rounds: {}\n", self.rows.len());
        for name in self.columns.iter().skip(1) {
            let values: Vec<f64> = self.column(name).unwrap_or_default().into_iter().flatten().collect();
            if values.is_empty() {
                continue;
            }
            let first = values[0];
            let last = values[values.len() - 1];
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!(
                "{name:<18} first {first:<12.6e} last {last:<12.6e} min {min:<12.6e} max {max:.6e}\n"
            ));
        }
        out
    }
}
