//! Experiment orchestration behind the command-line verbs: repeated
//! training runs, evaluation, the hinge-count sweep with its frozen
//! ablation, and activation export.
//!
//! Experiments are configured with `key = value` files (see
//! [`crate::config`]). Recognised keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `data` | dataset manifest | required |
//! | `network` | network spec file; its activation layers take `activation` | |
//! | `hidden` | comma-separated MLP hidden sizes, used when `network` is absent | `128,128` |
//! | `dropout` | dropout rate after each hidden activation of a `hidden` MLP | `0` |
//! | `activation` | `relu`, `leaky_relu`, `apl` or `maxout` | `apl` |
//! | `hinges` | hinges per APL unit | `1` |
//! | `sharing` | APL sharing on feature maps: `shared` or `per_neuron` | `shared` |
//! | `k` | leaky slope, or `best` to pick from ±{0.01, 0.05, 0.1, 0.2} by validation error | `0.01` |
//! | `pieces` | maxout pieces | `2` |
//! | `frozen` | keep APL parameters at initialisation | `false` |
//! | `lr`, `momentum`, `weight_decay`, `apl_penalty`, `batch_size`, `epochs`, `seed`, `augment_pad` | optimiser settings | see [`TrainConfig`] |
//! | `lr_schedule` | `epoch:multiplier` pairs, comma-separated | ×0.1 at 50%, ×0.01 at 75% |
//! | `repetitions` | runs with seeds `seed`, `seed+1`, … | `1` |
//! | `val_fraction` | share of training data held out for validation | `0.1` |
//! | `train_limit`, `test_limit` | use a seed-determined subset of N samples | all |
//! | `normalize` | subtract per-feature training means | `true` |
//! | `precision` | `f64` or `f32` | `f64` |
//! | `output` | output directory | `runs` |
//! | `workers` | parallel runs in a sweep | available cores |
//! | `s_values`, `include_frozen` | sweep rows | `1,2,5,10`, `true` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use crate::archive::{Archive, NamedTensor};
use crate::config::KvConfig;
use crate::data::{mean_subtract, Dataset, Manifest, Normalization, Split, Targets};
use crate::error::{Error, Result};
use crate::layers::InitScheme;
use crate::network::{ActivationKind, AplSharing, LayerSpec, Network, NetworkInit, NetworkSpec};
use crate::optim::TrainConfig;
use crate::pwl::apl_to_pwl;
use crate::tensor::Scalar;
use crate::train::{evaluate, initial_state, train, Metrics};

/// Candidate slopes for `k = best`.
pub const LEAKY_GRID: [f64; 8] = [0.01, -0.01, 0.05, -0.05, 0.1, -0.1, 0.2, -0.2];

/// Archive entry holding the per-feature training means a model expects
/// subtracted from its inputs.
pub const NORMALIZATION_TENSOR: &str = "normalization/mean";

/// Most neurons exported per layer.
pub const MAX_EXPORTED_NEURONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeakySlope {
    Fixed(f64),
    /// Chosen from [`LEAKY_GRID`] by validation error.
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationSetting {
    Relu,
    Leaky(LeakySlope),
    Apl { hinges: usize, sharing: AplSharing },
    Maxout { pieces: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkSource {
    Spec(NetworkSpec),
    /// MLP over flattened inputs with these hidden sizes and a dropout
    /// layer of the given rate after each hidden activation.
    Mlp { hidden: Vec<usize>, dropout: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub activation: ActivationSetting,
    pub frozen: bool,
    pub output: PathBuf,
    pub repetitions: usize,
    pub val_fraction: f64,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub normalize: bool,
    pub precision: Precision,
    pub workers: usize,
    pub s_values: Vec<usize>,
    pub include_frozen: bool,
}

const KEYS: &[&str] = &[
    "data",
    "network",
    "hidden",
    "dropout",
    "activation",
    "hinges",
    "sharing",
    "k",
    "pieces",
    "frozen",
    "lr",
    "momentum",
    "weight_decay",
    "apl_penalty",
    "batch_size",
    "epochs",
    "seed",
    "augment_pad",
    "lr_schedule",
    "repetitions",
    "val_fraction",
    "train_limit",
    "test_limit",
    "normalize",
    "precision",
    "output",
    "workers",
    "s_values",
    "include_frozen",
];

fn parse_list<V: std::str::FromStr>(s: &str) -> Option<Vec<V>> {
    s.split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(|w| w.parse().ok())
        .collect()
}

impl ExperimentConfig {
    /// Loads `path` and applies `overrides` (`key`, `value`) on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = KvConfig::load(path)?;
        for (k, v) in overrides {
            kv.set(k, v.clone(), "<command line>");
        }
        Self::from_kv(&kv)
    }

    /// Builds a config from parsed key-value pairs, reporting every problem
    /// at once.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut errors: Vec<String> = kv
            .keys()
            .filter(|k| !KEYS.contains(k))
            .map(|k| format!("{}: unknown key `{k}`", kv.entry(k).map_or("", |e| &e.origin)))
            .collect();
        let e = &mut errors;
        let defaults = TrainConfig::default();

        let data = kv.path("data").unwrap_or_default();
        if kv.get("data").is_none() {
            e.push("missing required key `data`".into());
        }
        let dropout: f64 = kv.parsed("dropout", e).unwrap_or(0.0);
        let network = if let Some(path) = kv.path("network") {
            match fs::read_to_string(&path) {
                Ok(text) => match text.parse::<NetworkSpec>() {
                    Ok(spec) => NetworkSource::Spec(spec),
                    Err(Error::Config(msgs)) => {
                        e.extend(msgs.into_iter().map(|m| format!("{}: {m}", path.display())));
                        NetworkSource::Mlp { hidden: vec![], dropout }
                    }
                    Err(other) => {
                        e.push(other.to_string());
                        NetworkSource::Mlp { hidden: vec![], dropout }
                    }
                },
                Err(err) => {
                    e.push(format!("{}: {err}", path.display()));
                    NetworkSource::Mlp { hidden: vec![], dropout }
                }
            }
        } else {
            let hidden = match kv.get("hidden") {
                None => vec![128, 128],
                Some(h) => parse_list(h).unwrap_or_else(|| {
                    e.push(format!("invalid hidden sizes {h:?}"));
                    vec![]
                }),
            };
            if hidden.contains(&0) {
                e.push("hidden sizes must be positive".into());
            }
            if !(0.0..1.0).contains(&dropout) {
                e.push(format!("dropout {dropout} outside [0, 1)"));
            }
            NetworkSource::Mlp { hidden, dropout }
        };

        let hinges: usize = kv.parsed("hinges", e).unwrap_or(1);
        let sharing = match kv.get("sharing").unwrap_or("shared") {
            "shared" => AplSharing::Shared,
            "per_neuron" => AplSharing::PerNeuron,
            other => {
                e.push(format!("unknown sharing {other:?}"));
                AplSharing::Shared
            }
        };
        let activation = match kv.get("activation").unwrap_or("apl") {
            "relu" => ActivationSetting::Relu,
            "leaky_relu" => ActivationSetting::Leaky(match kv.get("k").unwrap_or("0.01") {
                "best" => LeakySlope::Best,
                _ => LeakySlope::Fixed(kv.parsed("k", e).unwrap_or(0.01)),
            }),
            "apl" => ActivationSetting::Apl { hinges, sharing },
            "maxout" => {
                let pieces = kv.parsed("pieces", e).unwrap_or(2);
                if pieces == 0 {
                    e.push("pieces must be at least 1".into());
                }
                ActivationSetting::Maxout { pieces }
            }
            other => {
                e.push(format!("unknown activation {other:?}"));
                ActivationSetting::Relu
            }
        };
        let frozen: bool = kv.parsed("frozen", e).unwrap_or(false);
        if frozen && !matches!(activation, ActivationSetting::Apl { .. }) {
            e.push("`frozen` is only valid with `activation = apl`".into());
        }

        let lr_schedule = kv.get("lr_schedule").map(|s| {
            s.split(',')
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .filter_map(|pair| {
                    let parsed = pair
                        .split_once(':')
                        .and_then(|(ep, m)| Some((ep.trim().parse().ok()?, m.trim().parse().ok()?)));
                    if parsed.is_none() {
                        e.push(format!("invalid lr_schedule entry {pair:?}, expected epoch:multiplier"));
                    }
                    parsed
                })
                .collect()
        });
        let train = TrainConfig {
            lr: kv.parsed("lr", e).unwrap_or(defaults.lr),
            momentum: kv.parsed("momentum", e).unwrap_or(defaults.momentum),
            weight_decay: kv.parsed("weight_decay", e).unwrap_or(defaults.weight_decay),
            apl_penalty: kv.parsed("apl_penalty", e).unwrap_or(defaults.apl_penalty),
            batch_size: kv.parsed("batch_size", e).unwrap_or(defaults.batch_size),
            epochs: kv.parsed("epochs", e).unwrap_or(defaults.epochs),
            lr_schedule,
            seed: kv.parsed("seed", e).unwrap_or(defaults.seed),
            freeze_apl: frozen,
            augment_pad: kv.parsed("augment_pad", e).unwrap_or(0),
        };
        e.extend(train.validate());

        let repetitions = kv.parsed("repetitions", e).unwrap_or(1);
        if repetitions == 0 {
            e.push("repetitions must be at least 1".into());
        }
        let val_fraction = kv.parsed("val_fraction", e).unwrap_or(0.1);
        if !(0.0..1.0).contains(&val_fraction) {
            e.push(format!("val_fraction {val_fraction} outside [0, 1)"));
        }
        if activation == ActivationSetting::Leaky(LeakySlope::Best) && val_fraction == 0.0 {
            e.push("`k = best` needs a validation split (val_fraction > 0)".into());
        }
        let precision = match kv.get("precision").unwrap_or("f64") {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => {
                e.push(format!("unknown precision {other:?}"));
                Precision::F64
            }
        };
        let s_values = match kv.get("s_values") {
            None => vec![1, 2, 5, 10],
            Some(s) => parse_list(s).unwrap_or_else(|| {
                e.push(format!("invalid s_values {s:?}"));
                vec![]
            }),
        };
        let workers = kv
            .parsed("workers", e)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let cfg = Self {
            network,
            train,
            data,
            activation,
            frozen,
            output: kv.path("output").unwrap_or_else(|| PathBuf::from("runs")),
            repetitions,
            val_fraction,
            train_limit: kv.parsed("train_limit", e),
            test_limit: kv.parsed("test_limit", e),
            normalize: kv.parsed("normalize", e).unwrap_or(true),
            precision,
            workers: workers.max(1),
            s_values,
            include_frozen: kv.parsed("include_frozen", e).unwrap_or(true),
        };
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }
}

/// Training, optional validation and test data after limits, splitting and
/// normalisation.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl Splits {
    /// Loads the manifest of `cfg`, draws the sample limits, holds out the
    /// validation share (seeded by `cfg.train.seed`) and subtracts training
    /// means.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let manifest = Manifest::load(&cfg.data)?;
        let mut train = manifest.load_split(Split::Train)?;
        let mut test = manifest.load_split(Split::Test)?;
        if let Some(n) = cfg.train_limit {
            train = train.sample(n, cfg.train.seed);
        }
        if let Some(n) = cfg.test_limit {
            test = test.sample(n, cfg.train.seed);
        }
        Self::prepare(train, test, cfg.val_fraction, cfg.train.seed, cfg.normalize)
    }

    pub fn prepare(train: Dataset, mut test: Dataset, val_fraction: f64, seed: u64, normalize: bool) -> Result<Self> {
        let (mut train, mut val) = if val_fraction > 0.0 {
            let (t, v) = train.split_validation(val_fraction, seed)?;
            (t, Some(v))
        } else {
            (train, None)
        };
        if normalize {
            let mut others: Vec<&mut Dataset> = vec![&mut test];
            if let Some(v) = val.as_mut() {
                others.push(v);
            }
            mean_subtract(&mut train, &mut others)?;
        }
        Ok(Self { train, val, test })
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    /// Leaky slope used, when the activation is leaky ReLU.
    pub k: Option<f64>,
    pub train: Metrics,
    pub val: Option<Metrics>,
    pub test: Metrics,
    /// Final model and optimiser state.
    pub checkpoint: Archive,
}

impl RunResult {
    /// Test error rate for classification, test loss otherwise.
    pub fn score(&self) -> f64 {
        self.test.error_rate.unwrap_or(self.test.loss)
    }
}

/// Builds the network spec of `cfg` with the given activation for data
/// shaped like `splits`.
pub fn resolve_spec(source: &NetworkSource, kind: ActivationKind, splits: &Splits) -> Result<NetworkSpec> {
    match source {
        NetworkSource::Spec(spec) => {
            let spec = spec.with_activation(kind);
            spec.shapes()?;
            Ok(spec)
        }
        NetworkSource::Mlp { hidden, dropout } => {
            let input: usize = splits.train.feature_shape().iter().product();
            let outputs = match &splits.train.targets {
                Targets::Classes(_) => splits.train.num_classes().max(splits.test.num_classes()),
                Targets::Values(v) => v.row_len(),
            };
            let mut layers = Vec::new();
            for &units in hidden {
                let units = match kind {
                    ActivationKind::Maxout { pieces } => units * pieces,
                    _ => units,
                };
                layers.push(LayerSpec::Dense { units });
                layers.push(LayerSpec::Activation(kind));
                if *dropout > 0.0 {
                    layers.push(LayerSpec::Dropout { rate: *dropout });
                }
            }
            layers.push(LayerSpec::Dense { units: outputs });
            let spec = NetworkSpec {
                input: vec![input],
                layers,
            };
            spec.shapes()?;
            Ok(spec)
        }
    }
}

/// Failure of a single run; carries the last finite state when training
/// diverged.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub last_finite: Option<Box<Archive>>,
}

fn run_typed<T: Scalar>(spec: NetworkSpec, train_cfg: &TrainConfig, splits: &Splits) -> std::result::Result<RunResult, RunFailure> {
    let fail = |error: Error| RunFailure {
        error,
        last_finite: None,
    };
    let init = NetworkInit {
        seed: train_cfg.seed,
        apl: InitScheme::default(),
    };
    let mut state = initial_state::<T>(spec, init).map_err(fail)?;
    state.metadata = run_metadata::<T>(train_cfg);
    if let Err(error) = train(&mut state, &splits.train, train_cfg, |_, _| Ok(())) {
        return Err(RunFailure {
            error,
            last_finite: Some(Box::new(state.to_archive())),
        });
    }
    let eval = |ds: &Dataset| evaluate(&state.network, ds);
    let mut checkpoint = state.to_archive();
    if let Some(n) = &splits.train.normalization {
        checkpoint.tensors.push(NamedTensor {
            name: NORMALIZATION_TENSOR.to_string(),
            shape: vec![n.mean.len()],
            data: n.mean.clone(),
        });
    }
    Ok(RunResult {
        seed: train_cfg.seed,
        k: None,
        train: eval(&splits.train).map_err(fail)?,
        val: splits.val.as_ref().map(eval).transpose().map_err(fail)?,
        test: eval(&splits.test).map_err(fail)?,
        checkpoint,
    })
}

fn run_metadata<T: Scalar>(cfg: &TrainConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("precision".to_string(), T::NAME.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("frozen".to_string(), cfg.freeze_apl.to_string()),
    ])
}

/// Trains one model with the activation `kind` and seed `seed`.
pub fn run_once(
    cfg: &ExperimentConfig,
    kind: ActivationKind,
    frozen: bool,
    seed: u64,
    splits: &Splits,
) -> std::result::Result<RunResult, RunFailure> {
    let spec = resolve_spec(&cfg.network, kind, splits).map_err(|error| RunFailure {
        error,
        last_finite: None,
    })?;
    let train_cfg = TrainConfig {
        seed,
        freeze_apl: frozen,
        ..cfg.train.clone()
    };
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(spec, &train_cfg, splits),
        Precision::F32 => run_typed::<f32>(spec, &train_cfg, splits),
    }
}

fn activation_kind(setting: ActivationSetting, k: f64) -> ActivationKind {
    match setting {
        ActivationSetting::Relu => ActivationKind::Relu,
        ActivationSetting::Leaky(_) => ActivationKind::LeakyRelu(k),
        ActivationSetting::Apl { hinges, sharing } => ActivationKind::Apl { hinges, sharing },
        ActivationSetting::Maxout { pieces } => ActivationKind::Maxout { pieces },
    }
}

/// One run of `cfg` with `seed`, resolving `k = best` by validation error
/// (ties go to the earlier grid entry).
pub fn run_setting(cfg: &ExperimentConfig, seed: u64, splits: &Splits) -> std::result::Result<RunResult, RunFailure> {
    match cfg.activation {
        ActivationSetting::Leaky(LeakySlope::Best) => {
            let mut best: Option<RunResult> = None;
            for k in LEAKY_GRID {
                let mut r = run_once(cfg, ActivationKind::LeakyRelu(k), false, seed, splits)?;
                r.k = Some(k);
                let val = r.val.map_or(f64::INFINITY, |m| m.error_rate.unwrap_or(m.loss));
                let better = best
                    .as_ref()
                    .is_none_or(|b| val < b.val.map_or(f64::INFINITY, |m| m.error_rate.unwrap_or(m.loss)));
                if better {
                    best = Some(r);
                }
            }
            Ok(best.expect("grid is not empty"))
        }
        ActivationSetting::Leaky(LeakySlope::Fixed(k)) => {
            let mut r = run_once(cfg, ActivationKind::LeakyRelu(k), false, seed, splits)?;
            r.k = Some(k);
            Ok(r)
        }
        setting => run_once(cfg, activation_kind(setting, 0.0), cfg.frozen, seed, splits),
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub runs: Vec<RunResult>,
    /// Files written, in order.
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_sidecar(path: &Path, started: SystemTime, elapsed: std::time::Duration) -> Result<()> {
    let secs = started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_file(
        path,
        &format!(
            "started_unix = {secs}\nelapsed_seconds = {:.3}\nversion = {}\n",
            elapsed.as_secs_f64(),
            env!("CARGO_PKG_VERSION")
        ),
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn save_archive(archive: &Archive, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    archive.save(path)
}

/// `train` verb: `cfg.repetitions` runs with seeds `seed, seed+1, …`.
///
/// Writes `runs.csv`, `report.txt`, one `run-<i>.ckpt` per run and a
/// `meta.txt` sidecar with timing to `cfg.output`. If a run diverges its
/// last finite state is saved as `run-<i>.last-finite.ckpt` and the error
/// is returned.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let splits = Splits::load(cfg)?;
    let mut runs = Vec::new();
    let mut files = Vec::new();
    for rep in 0..cfg.repetitions {
        let seed = cfg.train.seed + rep as u64;
        match run_setting(cfg, seed, &splits) {
            Ok(r) => {
                let path = cfg.output.join(format!("run-{rep}.ckpt"));
                save_archive(&r.checkpoint, &path)?;
                files.push(path);
                runs.push(r);
            }
            Err(RunFailure { error, last_finite }) => {
                if let Some(a) = last_finite {
                    let path = cfg.output.join(format!("run-{rep}.last-finite.ckpt"));
                    save_archive(&a, &path)?;
                }
                return Err(error);
            }
        }
    }

    let mut csv = String::from("run,seed,k,train_loss,train_error,val_loss,val_error,test_loss,test_error\n");
    for (i, r) in runs.iter().enumerate() {
        writeln!(
            csv,
            "{i},{},{},{:.6},{},{},{},{:.6},{}",
            r.seed,
            r.k.map_or_else(String::new, |k| k.to_string()),
            r.train.loss,
            fmt_opt(r.train.error_rate),
            fmt_opt(r.val.map(|m| m.loss)),
            fmt_opt(r.val.and_then(|m| m.error_rate)),
            r.test.loss,
            fmt_opt(r.test.error_rate),
        )
        .expect("writing to a String");
    }
    let scores: Vec<f64> = runs.iter().map(RunResult::score).collect();
    let (mean, std) = mean_std(&scores);
    let metric = if runs.iter().any(|r| r.test.error_rate.is_some()) {
        "test error"
    } else {
        "test loss"
    };
    let report = format!(
        "runs: {}\nseeds: {}..={}\n{metric}: {mean:.6} ({std:.6})\ninit and data order reseeded per run\n",
        runs.len(),
        cfg.train.seed,
        cfg.train.seed + cfg.repetitions as u64 - 1,
    );
    for (name, text) in [("runs.csv", csv), ("report.txt", report)] {
        let path = cfg.output.join(name);
        write_file(&path, &text)?;
        files.push(path);
    }
    let meta = cfg.output.join("meta.txt");
    write_sidecar(&meta, started, clock.elapsed())?;
    files.push(meta);
    Ok(TrainReport { runs, files })
}

/// `eval` verb: metrics of a saved model on one split of a manifest. The
/// training-mean normalisation stored with the model, if any, is applied.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, split: Split) -> Result<Metrics> {
    let archive = Archive::load(checkpoint)?;
    let net = Network::<f64>::from_archive(&archive)?;
    let mut data = Manifest::load(manifest)?.load_split(split)?;
    if let Some(t) = archive.tensor(NORMALIZATION_TENSOR) {
        Normalization { mean: t.data.clone() }.apply(&mut data)?;
    }
    evaluate(&net, &data)
}

/// One row of a hinge-count sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub kind: ActivationKind,
    pub frozen: bool,
    /// Per-seed score (test error, or test loss for regression) or the
    /// failure message.
    pub cells: Vec<std::result::Result<f64, String>>,
}

impl SweepRow {
    pub fn scores(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.as_ref().ok().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub files: Vec<PathBuf>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// CSV with one line per (row, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,activation,hinges,frozen,seed,score,status\n");
        for row in &self.rows {
            let hinges = match row.kind {
                ActivationKind::Apl { hinges, .. } => hinges.to_string(),
                _ => String::new(),
            };
            let act = match row.kind {
                ActivationKind::Relu => "relu",
                ActivationKind::LeakyRelu(_) => "leaky_relu",
                ActivationKind::Apl { .. } => "apl",
                ActivationKind::Maxout { .. } => "maxout",
            };
            for (seed, cell) in self.seeds.iter().zip(&row.cells) {
                let (score, status) = match cell {
                    Ok(v) => (format!("{v:.6}"), "ok".to_string()),
                    Err(e) => (String::new(), format!("\"failed: {}\"", e.replace('"', "'"))),
                };
                writeln!(out, "{},{act},{hinges},{},{seed},{score},{status}", row.label, row.frozen)
                    .expect("writing to a String");
            }
        }
        out
    }

    /// Text table of mean (standard deviation) per row, in percent.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  mean (std), %  over {} seeds\n", "method", self.seeds.len());
        for row in &self.rows {
            let scores = row.scores();
            let failed = row.cells.len() - scores.len();
            let cell = if scores.is_empty() {
                "failed".to_string()
            } else {
                let (m, s) = mean_std(&scores);
                let mut c = format!("{:.2} ({:.2})", 100.0 * m, 100.0 * s);
                if failed > 0 {
                    write!(c, "  [{failed} failed]").expect("writing to a String");
                }
                c
            };
            writeln!(out, "{:<width$}  {cell}", row.label).expect("writing to a String");
        }
        out.push_str("init and data order reseeded per seed\n");
        out
    }
}

/// `sweep-s` verb: a ReLU baseline row, one APL row per hinge count in
/// `s_values` and, if `include_frozen`, a frozen S=1 row, each trained with
/// seeds `seed, seed+1, …, seed+repetitions-1`.
///
/// Cells run on a pool of `cfg.workers` threads; each run is
/// single-threaded and deterministic, so `sweep.csv` and `sweep.txt` are
/// identical across repeats. Timing goes to `sweep.meta`. Checkpoints are
/// saved under `checkpoints/<row>/seed-<seed>.ckpt`. A failed run marks its
/// cell instead of aborting the sweep.
pub fn cmd_sweep_s(cfg: &ExperimentConfig, s_values: &[usize], include_frozen: bool) -> Result<SweepTable> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let splits = Splits::load(cfg)?;
    let sharing = match cfg.activation {
        ActivationSetting::Apl { sharing, .. } => sharing,
        _ => AplSharing::Shared,
    };
    let mut rows = vec![("ReLU".to_string(), ActivationKind::Relu, false)];
    for &s in s_values {
        rows.push((format!("S={s}"), ActivationKind::Apl { hinges: s, sharing }, false));
    }
    if include_frozen {
        rows.push(("S=1 frozen".to_string(), ActivationKind::Apl { hinges: 1, sharing }, true));
    }
    let seeds: Vec<u64> = (0..cfg.repetitions as u64).map(|r| cfg.train.seed + r).collect();
    let jobs: Vec<(usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..seeds.len()).map(move |s| (r, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let results: Vec<std::result::Result<RunResult, RunFailure>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, s)| run_once(cfg, rows[r].1, rows[r].2, seeds[s], &splits))
            .collect()
    });

    let mut files = Vec::new();
    let mut table_rows: Vec<SweepRow> = rows
        .iter()
        .map(|(label, kind, frozen)| SweepRow {
            label: label.clone(),
            kind: *kind,
            frozen: *frozen,
            cells: Vec::with_capacity(seeds.len()),
        })
        .collect();
    for (&(r, s), result) in jobs.iter().zip(results) {
        let dir = cfg.output.join("checkpoints").join(rows[r].0.replace([' ', '='], "_"));
        let cell = match result {
            Ok(run) => {
                let path = dir.join(format!("seed-{}.ckpt", seeds[s]));
                save_archive(&run.checkpoint, &path)?;
                files.push(path);
                Ok(run.score())
            }
            Err(RunFailure { error, last_finite }) => {
                if let Some(a) = last_finite {
                    let path = dir.join(format!("seed-{}.last-finite.ckpt", seeds[s]));
                    save_archive(&a, &path)?;
                    files.push(path);
                }
                Err(error.to_string())
            }
        };
        table_rows[r].cells.push(cell);
    }
    let table = SweepTable {
        seeds,
        rows: table_rows,
        files: Vec::new(),
    };
    for (name, text) in [("sweep.csv", table.to_csv()), ("sweep.txt", table.to_text())] {
        let path = cfg.output.join(name);
        write_file(&path, &text)?;
        files.push(path);
    }
    let meta = cfg.output.join("sweep.meta");
    write_sidecar(&meta, started, clock.elapsed())?;
    files.push(meta);
    Ok(SweepTable { files, ..table })
}

/// Evaluation grid for [`cmd_export_activations`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Grid {
    pub fn new(min: f64, max: f64, points: usize) -> Result<Self> {
        if points < 2 || !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::Usage(format!(
                "grid needs finite min < max and at least 2 points, got [{min}, {max}] × {points}"
            )));
        }
        Ok(Self { min, max, points })
    }

    pub fn xs(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| if i + 1 == self.points { self.max } else { self.min + step * i as f64 })
            .collect()
    }
}

/// Which APL layers to export: `all`, or comma-separated layer indices as
/// listed in the network spec (optionally written `layer<i>`).
pub fn parse_layer_selector(selector: &str) -> Result<Option<Vec<usize>>> {
    if selector.trim() == "all" {
        return Ok(None);
    }
    selector
        .split(',')
        .map(|w| {
            let w = w.trim();
            w.strip_prefix("layer")
                .unwrap_or(w)
                .parse()
                .map_err(|_| Error::Usage(format!("invalid layer selector {w:?}")))
        })
        .collect::<Result<Vec<usize>>>()
        .map(Some)
}

/// `export-activations` verb: for each selected APL layer writes
/// `activations-layer<i>.csv` with columns `x, init_<n>, final_<n>, …` for
/// up to 1000 units, followed by two summary rows whose first field is
/// `left_slope` and `right_slope`.
pub fn cmd_export_activations(checkpoint: &Path, selector: &str, grid: Grid, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let archive = Archive::load(checkpoint)?;
    let net = Network::<f64>::from_archive(&archive)?;
    let wanted = parse_layer_selector(selector)?;
    let layers: Vec<_> = net
        .apl_layers()
        .into_iter()
        .filter(|l| wanted.as_ref().is_none_or(|w| w.contains(&l.layer)))
        .collect();
    if layers.is_empty() {
        return Err(Error::Usage(format!(
            "selector {selector:?} matches no APL layer in {}",
            checkpoint.display()
        )));
    }
    let xs = grid.xs();
    let mut files = Vec::new();
    for layer in layers {
        let count = layer.current.neurons().min(MAX_EXPORTED_NEURONS);
        let mut fns = Vec::with_capacity(count);
        for i in 0..count {
            fns.push((apl_to_pwl(&layer.initial.row(i)), apl_to_pwl(&layer.current.row(i))));
        }
        let mut out = String::from("x");
        for i in 0..count {
            write!(out, ",init_{i},final_{i}").expect("writing to a String");
        }
        out.push('\n');
        for &x in &xs {
            write!(out, "{x:e}").expect("writing to a String");
            for (init, fin) in &fns {
                write!(out, ",{:e},{:e}", init.eval(x)?, fin.eval(x)?).expect("writing to a String");
            }
            out.push('\n');
        }
        for (label, slope) in [
            ("left_slope", (|f: &crate::pwl::PwlFunction| f.left_slope()) as fn(&_) -> f64),
            ("right_slope", |f| f.right_slope()),
        ] {
            out.push_str(label);
            for (init, fin) in &fns {
                write!(out, ",{:e},{:e}", slope(init), slope(fin)).expect("writing to a String");
            }
            out.push('\n');
        }
        let path = out_dir.join(format!("activations-layer{}.csv", layer.layer));
        write_file(&path, &out)?;
        files.push(path);
    }
    Ok(files)
}
