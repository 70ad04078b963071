//! Time-series experiments: ingestion, standardization, model templates,
//! fitting, prediction output and diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditional::{uniform_grid, ConditionedLayer, HyperdataNet};
use crate::effective::{propagate_stack, LayerStack};
use crate::error::{Error, Result};
use crate::kernel::{column, KernelFamily, KernelSpec};
use crate::moments::{
    heavy_tail_gap, heavy_tail_grid, mc_sample_composite, mc_second_moments, DEFAULT_BATCHES,
};
use crate::regression::chol_jitter;
use crate::training::{fit, grad_check_with, predict_stack, FitResult, Optimizer, TrainConfig};

/// Points in the dense prediction grid.
pub const GRID_POINTS: usize = 400;

/// A univariate time series.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    /// Sorts by `t` and rejects duplicate or non-finite entries.
    pub fn new(name: impl Into<String>, t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if t.len() != y.len() {
            return Err(Error::Data(format!(
                "{} times but {} values",
                t.len(),
                y.len()
            )));
        }
        if t.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if t.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        let mut rows: Vec<(f64, f64)> = t.into_iter().zip(y).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut dups: Vec<f64> = rows
            .windows(2)
            .filter(|w| w[0].0 == w[1].0)
            .map(|w| w[0].0)
            .collect();
        dups.dedup();
        if !dups.is_empty() {
            let list: Vec<String> = dups.iter().map(|d| d.to_string()).collect();
            return Err(Error::Data(format!(
                "duplicate t values: {}",
                list.join(", ")
            )));
        }
        let (t, y) = rows.into_iter().unzip();
        Ok(Dataset {
            name: name.into(),
            t,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// A parsed dataset and the number of rows dropped as malformed.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub dataset: Dataset,
    pub dropped: usize,
}

/// Reads a `t,y` CSV. Rows whose fields do not parse as finite numbers are
/// dropped and counted.
pub fn ingest_csv(path: &Path) -> Result<Ingested> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    parse_csv(name, &text)
}

pub fn parse_csv(name: &str, text: &str) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != ["t", "y"] {
        return Err(Error::Data(format!(
            "expected header \"t,y\", found {:?}",
            header.join(",")
        )));
    }
    let (mut t, mut y, mut dropped) = (Vec::new(), Vec::new(), 0);
    for record in reader.records() {
        let Ok(record) = record else {
            dropped += 1;
            continue;
        };
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed = (record.len() == 2)
            .then(|| (record[0].parse::<f64>(), record[1].parse::<f64>()))
            .and_then(|(a, b)| Some((a.ok()?, b.ok()?)))
            .filter(|(a, b)| a.is_finite() && b.is_finite());
        match parsed {
            Some((a, b)) => {
                t.push(a);
                y.push(b);
            }
            None => dropped += 1,
        }
    }
    if t.is_empty() {
        return Err(Error::Data(format!(
            "no valid rows in {name} ({dropped} dropped)"
        )));
    }
    Ok(Ingested {
        dataset: Dataset::new(name, t, y)?,
        dropped,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Affine maps from raw units to model units: `x = (t − t_shift)·t_factor`,
/// `ỹ = (y − y_mean)/y_std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub t_shift: f64,
    pub t_factor: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Transform {
    pub fn x(&self, t: f64) -> f64 {
        (t - self.t_shift) * self.t_factor
    }

    pub fn t(&self, x: f64) -> f64 {
        x / self.t_factor + self.t_shift
    }

    pub fn y_forward(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn y_inverse(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }

    pub fn std_inverse(&self, s: f64) -> f64 {
        s * self.y_std
    }

    pub fn inputs(&self, t: &[f64]) -> DMatrix<f64> {
        column(&t.iter().map(|&v| self.x(v)).collect::<Vec<_>>())
    }

    pub fn targets(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().map(|&v| self.y_forward(v)))
    }
}

/// Training and test portions in raw units plus the transform fitted on the
/// training portion.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub transform: Transform,
}

impl Split {
    pub fn x_train(&self) -> DMatrix<f64> {
        self.transform.inputs(&self.train.t)
    }

    pub fn y_train(&self) -> DVector<f64> {
        self.transform.targets(&self.train.y)
    }

    pub fn x_test(&self) -> DMatrix<f64> {
        self.transform.inputs(&self.test.t)
    }
}

/// Minimum training-set size for [`standardize_split`].
pub const MIN_TRAIN: usize = 10;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Splits at the `split_fraction` point of the time axis (points with
/// `t ≤ t₀ + f·(t_end − t₀)` train) and standardizes with training
/// statistics. With `time_rescale = Some(c)`, `x = c·(t − t_first_train)`;
/// otherwise time is standardized like `y`.
pub fn standardize_split(
    ds: &Dataset,
    split_fraction: f64,
    time_rescale: Option<f64>,
) -> Result<Split> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Config(format!(
            "split_fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (t0, t1) = (ds.t[0], ds.t[ds.len() - 1]);
    let cut = t0 + split_fraction * (t1 - t0);
    let n_train = ds.t.iter().take_while(|&&t| t <= cut).count();
    if n_train < MIN_TRAIN {
        return Err(Error::Data(format!(
            "split leaves {n_train} training points, need at least {MIN_TRAIN}"
        )));
    }
    let train = Dataset {
        name: ds.name.clone(),
        t: ds.t[..n_train].to_vec(),
        y: ds.y[..n_train].to_vec(),
    };
    let test = Dataset {
        name: ds.name.clone(),
        t: ds.t[n_train..].to_vec(),
        y: ds.y[n_train..].to_vec(),
    };
    let (y_mean, y_std) = mean_std(&train.y);
    if !(y_std > 1e-12 * y_mean.abs().max(1.0)) {
        return Err(Error::Data(
            "training targets are constant; cannot standardize".into(),
        ));
    }
    let (t_shift, t_factor) = match time_rescale {
        Some(c) if c > 0.0 && c.is_finite() => (train.t[0], c),
        Some(c) => {
            return Err(Error::Config(format!(
                "time_rescale must be positive, got {c}"
            )))
        }
        None => {
            let (m, s) = mean_std(&train.t);
            (m, 1.0 / s)
        }
    };
    Ok(Split {
        train,
        test,
        transform: Transform {
            t_shift,
            t_factor,
            y_mean,
            y_std,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single-layer GP with an SE kernel.
    Se,
    /// Single-layer GP with SE + periodic + rational-quadratic kernel.
    Mixture,
    /// Two-layer zero-mean composition with SE kernels (no hyperdata).
    Sese,
    /// Two layers, the inner one conditioned on network-generated hyperdata.
    Cdgp2,
    /// Three layers, both inner ones conditioned.
    Cdgp3,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Se,
        ModelKind::Mixture,
        ModelKind::Sese,
        ModelKind::Cdgp2,
        ModelKind::Cdgp3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Se => "se",
            ModelKind::Mixture => "mixture",
            ModelKind::Sese => "sese",
            ModelKind::Cdgp2 => "cdgp2",
            ModelKind::Cdgp3 => "cdgp3",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, ModelKind::Cdgp2 | ModelKind::Cdgp3)
    }

    fn n_conditioned(self) -> usize {
        match self {
            ModelKind::Cdgp2 => 1,
            ModelKind::Cdgp3 => 2,
            _ => 0,
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model {s:?}; expected se|mixture|sese|cdgp2|cdgp3"
                ))
            })
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub split_fraction: f64,
    /// Hyperdata count per conditioned layer; `None` picks the default for
    /// the model and dataset.
    pub hyperdata_counts: Option<Vec<usize>>,
    pub net_width: usize,
    pub time_rescale: Option<f64>,
    /// Learn hyperdata inputs as well as outputs.
    pub optimize_z: bool,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Se,
            split_fraction: 0.7,
            hyperdata_counts: None,
            net_width: HyperdataNet::DEFAULT_WIDTH,
            time_rescale: None,
            optimize_z: false,
            train: TrainConfig::default(),
        }
    }
}

/// On-disk form: one flat table, training keys alongside the rest.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatConfig {
    model: Option<ModelKind>,
    split_fraction: Option<f64>,
    hyperdata_counts: Option<Vec<usize>>,
    net_width: Option<usize>,
    time_rescale: Option<f64>,
    optimize_z: Option<bool>,
    optimizer: Option<Optimizer>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    max_iters: Option<usize>,
    tolerance: Option<f64>,
    patience: Option<usize>,
    restarts: Option<usize>,
    seed: Option<u64>,
    max_halvings: Option<usize>,
    restart_perturbation: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let flat: FlatConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = ExperimentConfig::default();
        macro_rules! take {
            ($($field:ident),*) => { $(if let Some(v) = flat.$field { cfg.$field = v; })* };
        }
        macro_rules! take_train {
            ($($field:ident),*) => { $(if let Some(v) = flat.$field { cfg.train.$field = v; })* };
        }
        take!(model, split_fraction, net_width, optimize_z);
        take_train!(
            optimizer,
            learning_rate,
            beta1,
            beta2,
            max_iters,
            tolerance,
            patience,
            restarts,
            seed,
            max_halvings,
            restart_perturbation
        );
        cfg.hyperdata_counts = flat.hyperdata_counts;
        cfg.time_rescale = flat.time_rescale;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if let Some(c) = &self.hyperdata_counts {
            if c.contains(&0) {
                return Err(Error::Config("hyperdata counts must be positive".into()));
            }
        }
        if self.net_width == 0 {
            return Err(Error::Config("net_width must be positive".into()));
        }
        if let Some(c) = self.time_rescale {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "time_rescale must be positive, got {c}"
                )));
            }
        }
        self.train.validate()
    }

    /// Hyperdata counts for this model on `dataset`.
    pub fn resolved_counts(&self, dataset: &str) -> Result<Vec<usize>> {
        let need = self.model.n_conditioned();
        let counts = match (&self.hyperdata_counts, self.model) {
            (Some(c), _) => c.clone(),
            (None, ModelKind::Cdgp2) if dataset == "airline" => vec![13],
            (None, ModelKind::Cdgp2) => vec![50],
            (None, ModelKind::Cdgp3) => vec![37, 23],
            (None, _) => Vec::new(),
        };
        if counts.len() < need {
            return Err(Error::Config(format!(
                "model {} needs {need} hyperdata counts, got {}",
                self.model,
                counts.len()
            )));
        }
        Ok(counts[..need].to_vec())
    }
}

const INIT_NOISE_STD: f64 = 0.01;

fn se_layer(sigma: f64, ell: f64) -> KernelSpec {
    KernelSpec::se(sigma, ell)
}

/// Conditioned layer on `m` hyperdata spread uniformly over `[lo, hi]`, with
/// outputs from a freshly drawn network and length scale equal to the
/// hyperdata spacing.
fn conditioned_layer(
    lo: f64,
    hi: f64,
    m: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionedLayer> {
    let z = uniform_grid(lo, hi, m);
    let spacing = if m > 1 {
        (hi - lo) / (m - 1) as f64
    } else {
        hi - lo
    };
    let (shift, scale) = HyperdataNet::range_normalization(&z);
    let net = HyperdataNet::random(1, width, HyperdataNet::DEFAULT_INIT_STD, rng)
        .with_normalization(shift, scale)?;
    ConditionedLayer::with_net(se_layer(1.0, spacing), z, net)
}

/// Initial stack for `cfg.model` given standardized training inputs.
/// Network weights are drawn from `cfg.train.seed`.
pub fn build_template(
    cfg: &ExperimentConfig,
    x_train: &DMatrix<f64>,
    dataset: &str,
) -> Result<LayerStack> {
    if x_train.nrows() < 2 || x_train.ncols() != 1 {
        return Err(Error::Shape(
            "templates need at least two scalar training inputs".into(),
        ));
    }
    let lo = x_train.column(0).min();
    let hi = x_train.column(0).max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Data("training inputs span no range".into()));
    }
    let noise = INIT_NOISE_STD * INIT_NOISE_STD;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let counts = cfg.resolved_counts(dataset)?;
    let stack = match cfg.model {
        ModelKind::Se => LayerStack::single(se_layer(1.0, range / 10.0), noise)?,
        ModelKind::Mixture => LayerStack::single(
            KernelSpec::new(
                KernelFamily::Mixture,
                &[1.0, range / 2.0, 0.3, 1.0, 0.3, range / 20.0, 1.0],
            )?,
            noise,
        )?,
        ModelKind::Sese => LayerStack::new(
            vec![ConditionedLayer::unconditioned(
                se_layer(1.0, range / 10.0),
                1,
            )],
            se_layer(1.0, 1.0),
            noise,
        )?,
        ModelKind::Cdgp2 | ModelKind::Cdgp3 => {
            let mut layers = vec![conditioned_layer(
                lo,
                hi,
                counts[0],
                cfg.net_width,
                &mut rng,
            )?];
            if cfg.model == ModelKind::Cdgp3 {
                layers.push(conditioned_layer(
                    -2.0,
                    2.0,
                    counts[1],
                    cfg.net_width,
                    &mut rng,
                )?);
            }
            let layers = layers
                .into_iter()
                .map(|l| l.with_optimize_z(cfg.optimize_z))
                .collect();
            LayerStack::new(layers, se_layer(1.0, 1.0), noise)?
        }
    };
    Ok(stack)
}

/// Latent mean and std of one intermediate layer along the prediction grid,
/// in model units.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentProfile {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestartSummary {
    pub index: usize,
    pub logml: f64,
    pub iterations: usize,
    pub converged: bool,
    pub jitter_events: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerHyperdata {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub net: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearnedParams {
    pub layers: Vec<BTreeMap<String, f64>>,
    pub exposed: BTreeMap<String, f64>,
    pub noise: f64,
}

/// Contents of `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Results {
    pub model: ModelKind,
    pub dataset: String,
    pub seed: u64,
    pub logml: f64,
    /// Raw units.
    pub test_rmse: Option<f64>,
    pub params: LearnedParams,
    pub hyperdata: Vec<LayerHyperdata>,
    pub runtime_sec: Option<f64>,
    pub jitter_events: usize,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub n_train: usize,
    pub n_test: usize,
    pub transform: Transform,
    pub config: ExperimentConfig,
}

/// Everything produced by one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub results: Results,
    pub split: Split,
    pub fit: FitResult,
    /// Prediction grid in raw time units.
    pub grid_t: Vec<f64>,
    /// Predictive mean and std (noise included) on the grid, model units.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub latents: Vec<LatentProfile>,
    pub runtime_sec: f64,
}

fn named_params(kernel: &KernelSpec) -> BTreeMap<String, f64> {
    let names = kernel.family().param_names();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), kernel.param(i)))
        .collect()
}

fn learned(stack: &LayerStack) -> (LearnedParams, Vec<LayerHyperdata>) {
    let params = LearnedParams {
        layers: stack
            .intermediate()
            .iter()
            .map(|l| named_params(l.kernel()))
            .collect(),
        exposed: named_params(stack.exposed()),
        noise: stack.noise_var().sqrt(),
    };
    let hyperdata = stack
        .intermediate()
        .iter()
        .filter(|l| !l.hyperdata().is_empty())
        .map(|l| LayerHyperdata {
            z: l.hyperdata().z().iter().copied().collect(),
            u: l.hyperdata().u().iter().copied().collect(),
            net: l.net().map(HyperdataNet::weights),
        })
        .collect();
    (params, hyperdata)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Fits `cfg.model` on the training split and predicts on a dense grid over
/// the whole series and on the test points.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let split = standardize_split(ds, cfg.split_fraction, cfg.time_rescale)?;
    let x = split.x_train();
    let y = split.y_train();
    let template = build_template(cfg, &x, &ds.name)?;
    let fitted = fit(&template, &x, &y, &cfg.train)?;

    let tr = split.transform;
    let grid_t = linspace(ds.t[0], ds.t[ds.len() - 1], GRID_POINTS);
    let mut t_star = grid_t.clone();
    t_star.extend_from_slice(&split.test.t);
    let x_star = tr.inputs(&t_star);
    let pred = predict_stack(&fitted.stack, &x, &y, &x_star, true)?;
    let g = GRID_POINTS;
    let mean: Vec<f64> = pred.mean.rows(0, g).iter().copied().collect();
    let std: Vec<f64> = pred
        .var
        .rows(0, g)
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    let test_rmse = (!split.test.is_empty()).then(|| {
        let se: f64 = split
            .test
            .y
            .iter()
            .enumerate()
            .map(|(i, &yt)| (tr.y_inverse(pred.mean[g + i]) - yt).powi(2))
            .sum();
        (se / split.test.len() as f64).sqrt()
    });

    let latents = if fitted.stack.depth() > 1 {
        let prop = propagate_stack(&fitted.stack, &tr.inputs(&grid_t))?;
        prop.moments
            .iter()
            .enumerate()
            .map(|(l, pm)| LatentProfile {
                layer: l + 1,
                mean: pm.means().iter().copied().collect(),
                std: (0..g).map(|i| pm.cov()[(i, i)].max(0.0).sqrt()).collect(),
            })
            .collect()
    } else {
        Vec::new()
    };

    let (params, hyperdata) = learned(&fitted.stack);
    let runtime_sec = start.elapsed().as_secs_f64();
    let results = Results {
        model: cfg.model,
        dataset: ds.name.clone(),
        seed: cfg.train.seed,
        logml: fitted.logml,
        test_rmse,
        params,
        hyperdata,
        runtime_sec: None,
        jitter_events: fitted.jitter_events,
        best_restart: fitted.best_restart,
        restarts: fitted
            .restarts
            .iter()
            .map(|r| RestartSummary {
                index: r.index,
                logml: r.logml,
                iterations: r.iterations,
                converged: r.converged,
                jitter_events: r.jitter_events,
                failure: r.failure.clone(),
            })
            .collect(),
        n_train: split.train.len(),
        n_test: split.test.len(),
        transform: tr,
        config: cfg.clone(),
    };
    Ok(ExperimentOutput {
        results,
        split,
        fit: fitted,
        grid_t,
        mean,
        std,
        latents,
        runtime_sec,
    })
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl ExperimentOutput {
    pub fn results_json(&self, record_runtime: bool) -> Result<String> {
        let mut results = self.results.clone();
        if record_runtime {
            results.runtime_sec = Some(self.runtime_sec);
        }
        let mut s = serde_json::to_string_pretty(&results)?;
        s.push('\n');
        Ok(s)
    }

    /// `t,mean,std` on the grid in raw units.
    pub fn predictions_csv(&self) -> String {
        let tr = &self.results.transform;
        let mut s = String::from("t,mean,std\n");
        for i in 0..self.grid_t.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                self.grid_t[i],
                tr.y_inverse(self.mean[i]),
                tr.std_inverse(self.std[i])
            );
        }
        s
    }

    /// `t,mean,std` of one latent layer; `t` in raw units, latent values in
    /// model units.
    pub fn latent_csv(&self, profile: &LatentProfile) -> String {
        let mut s = String::from("t,mean,std\n");
        for i in 0..self.grid_t.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                self.grid_t[i], profile.mean[i], profile.std[i]
            );
        }
        s
    }

    /// `restart,step,logml` for every accepted step of every restart.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("restart,step,logml\n");
        for r in &self.fit.restarts {
            for (k, v) in r.trace.iter().enumerate() {
                let _ = writeln!(s, "{},{k},{v}", r.index);
            }
        }
        s
    }

    /// Writes `results.json`, `predictions.csv`, `trace.csv`,
    /// `latent_layer{l}.csv` and `timing.json` into `dir`. Returns the paths.
    pub fn write(&self, dir: &Path, record_runtime: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = vec![
            (dir.join("results.json"), self.results_json(record_runtime)?),
            (dir.join("predictions.csv"), self.predictions_csv()),
            (dir.join("trace.csv"), self.trace_csv()),
        ];
        for p in &self.latents {
            files.push((
                dir.join(format!("latent_layer{}.csv", p.layer)),
                self.latent_csv(p),
            ));
        }
        files.push((
            dir.join("timing.json"),
            format!(
                "{}\n",
                serde_json::json!({ "runtime_sec": self.runtime_sec })
            ),
        ));
        for (path, body) in &files {
            write_atomic(path, body.as_bytes())?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// One pass/fail entry of a diagnostics report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub model: ModelKind,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// Small series used when `diagnose` gets no data: a trend plus a yearly
/// cycle, monthly over five years.
pub fn synthetic_dataset() -> Dataset {
    let t: Vec<f64> = (0..60).map(|i| 2000.0 + i as f64 / 12.0).collect();
    let y = t
        .iter()
        .map(|&v| 0.5 * (v - 2000.0) + (2.0 * std::f64::consts::PI * v).sin())
        .collect();
    Dataset {
        name: "synthetic".into(),
        t,
        y,
    }
}

/// Training points used by the diagnostics.
pub const DIAGNOSE_POINTS: usize = 40;
/// Points and samples for the sampling comparison.
pub const DIAGNOSE_MC_POINTS: usize = 5;
pub const DIAGNOSE_MC_SAMPLES: usize = 50_000;

/// Gradient check, sampling-vs-closed-form kernel comparison, PSD check and
/// heavy-tail grid on the model template for `cfg`.
pub fn diagnose(cfg: &ExperimentConfig, ds: &Dataset) -> Result<DiagnosticReport> {
    diagnose_with(cfg, ds, |_| {})
}

/// [`diagnose`] with a hook that corrupts the analytic gradient before the
/// gradient check.
pub fn diagnose_with<F: FnOnce(&mut [f64])>(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    corrupt: F,
) -> Result<DiagnosticReport> {
    cfg.validate()?;
    let split = standardize_split(ds, cfg.split_fraction, cfg.time_rescale)?;
    let x_all = split.x_train();
    let y_all = split.y_train();
    let n = x_all.nrows();
    let stride = n.div_ceil(DIAGNOSE_POINTS);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let x = x_all.select_rows(&idx);
    let y = y_all.select_rows(&idx);
    let stack = build_template(cfg, &x_all, &ds.name)?;
    let mut checks = Vec::new();

    let gc = grad_check_with(&stack, &x, &y, 1e-5, corrupt)?;
    let worst = gc
        .entries
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .map(|e| e.name.clone());
    checks.push(Check {
        name: "grad_check".into(),
        passed: gc.passed(),
        detail: serde_json::json!({
            "n_params": gc.entries.len(),
            "max_rel_error": gc.max_rel_error(),
            "threshold": gc.threshold,
            "worst": worst,
            "flagged": gc.entries.iter().filter(|e| e.flagged).map(|e| e.name.clone()).collect::<Vec<_>>(),
        }),
    });

    let mc_idx: Vec<usize> = (0..DIAGNOSE_MC_POINTS)
        .map(|k| k * (x.nrows() - 1) / (DIAGNOSE_MC_POINTS - 1))
        .collect();
    let xm = x.select_rows(&mc_idx);
    let gram = propagate_stack(&stack, &xm)?.gram;
    let samples = mc_sample_composite(&stack, &xm, DIAGNOSE_MC_SAMPLES, cfg.train.seed)?;
    let (est, se) = mc_second_moments(&samples, DEFAULT_BATCHES);
    let mut misses = 0;
    let mut worst_z: f64 = 0.0;
    for i in 0..xm.nrows() {
        for j in i..xm.nrows() {
            let err = (gram[(i, j)] - est[(i, j)]).abs();
            worst_z = worst_z.max(err / se[(i, j)].max(f64::MIN_POSITIVE));
            if err > 4.0 * se[(i, j)] + 1e-12 * gram[(i, i)] {
                misses += 1;
            }
        }
    }
    checks.push(Check {
        name: "mc_effective_kernel".into(),
        passed: misses == 0,
        detail: serde_json::json!({
            "case": if stack.depth() == 1 { "plain_gp" } else { "composite" },
            "points": xm.nrows(),
            "samples": DIAGNOSE_MC_SAMPLES,
            "entries_outside_4se": misses,
            "max_abs_z": worst_z,
        }),
    });

    let full = propagate_stack(&stack, &x)?.gram;
    let psd = chol_jitter(&full);
    let jitter = psd.as_ref().map(|c| c.jitter).ok();
    checks.push(Check {
        name: "psd".into(),
        passed: jitter.is_some_and(|j| j <= 1e-8),
        detail: serde_json::json!({ "points": x.nrows(), "jitter": jitter }),
    });

    let grid = heavy_tail_grid(21);
    let min_gap = grid.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
    let at_unit = heavy_tail_gap(0.0, 1.0);
    let expected = 1.0 / 3f64.sqrt() - 0.5;
    checks.push(Check {
        name: "heavy_tail".into(),
        passed: min_gap >= 0.0 && (at_unit - expected).abs() <= 1e-12,
        detail: serde_json::json!({ "grid_points": grid.len(), "min_gap": min_gap, "gap_0_1": at_unit }),
    });

    Ok(DiagnosticReport {
        model: cfg.model,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_well_formed_file() {
        let ing = parse_csv("d", "t,y\n1,2\n2,3\n3,5\n").unwrap();
        assert_eq!(ing.dataset.len(), 3);
        assert_eq!(ing.dropped, 0);
    }

    #[test]
    fn malformed_row_is_dropped_and_counted() {
        let ing = parse_csv("d", "t,y\n1,2\n2,abc\n3,5\n4,1,9\n").unwrap();
        assert_eq!(ing.dataset.t, vec![1.0, 3.0]);
        assert_eq!(ing.dropped, 2);
    }

    #[test]
    fn unsorted_input_is_sorted() {
        let ing = parse_csv("d", "t,y\n3,1\n1,2\n2,3\n").unwrap();
        assert_eq!(ing.dataset.t, vec![1.0, 2.0, 3.0]);
        assert_eq!(ing.dataset.y, vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn duplicates_and_empty_files_are_errors() {
        let err = parse_csv("d", "t,y\n1,2\n1,3\n2,1\n").unwrap_err();
        assert!(err.to_string().contains('1'), "{err}");
        assert!(parse_csv("d", "t,y\nx,y\n").is_err());
        assert!(parse_csv("d", "a,b\n1,2\n").is_err());
        assert!(ingest_csv(Path::new("/nonexistent/file.csv")).is_err());
    }

    fn ramp(n: usize) -> Dataset {
        let t: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y = t.iter().map(|v| 3.0 + 0.1 * v + (v * 0.7).sin()).collect();
        Dataset::new("ramp", t, y).unwrap()
    }

    #[test]
    fn split_counts_and_standardization() {
        let ds = ramp(100);
        let s = standardize_split(&ds, 0.7, None).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (70, 30));
        let y = s.y_train();
        let mean = y.mean();
        let std = (y.map(|v| (v - mean).powi(2)).sum() / 70.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
        for (i, v) in y.iter().enumerate() {
            assert!((s.transform.y_inverse(*v) - s.train.y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(standardize_split(&ramp(12), 0.5, None).is_err());
        let flat = Dataset::new("c", (0..30).map(f64::from).collect(), vec![2.0; 30]).unwrap();
        assert!(standardize_split(&flat, 0.7, None).is_err());
        assert!(standardize_split(&ramp(30), 1.0, None).is_err());
    }

    #[test]
    fn time_rescale_anchors_first_training_point() {
        let s = standardize_split(&ramp(40), 0.7, Some(2.0)).unwrap();
        assert_eq!(s.transform.x(0.0), 0.0);
        assert_eq!(s.transform.x(3.0), 6.0);
        assert_eq!(s.transform.t(6.0), 3.0);
    }

    #[test]
    fn flat_config_round_trip() {
        let cfg = ExperimentConfig::from_toml_str(
            "model = \"cdgp2\"\nhyperdata_counts = [13]\nlearning_rate = 0.05\nrestarts = 5\ntime_rescale = 3.0\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::Cdgp2);
        assert_eq!(cfg.train.learning_rate, 0.05);
        assert_eq!(cfg.train.restarts, 5);
        assert_eq!(cfg.resolved_counts("x").unwrap(), vec![13]);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("split_fraction = 1.5").is_err());
        assert!(ExperimentConfig::from_toml_str("hyperdata_counts = [0]").is_err());
    }

    #[test]
    fn default_counts_follow_dataset() {
        let mut cfg = ExperimentConfig {
            model: ModelKind::Cdgp2,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.resolved_counts("airline").unwrap(), vec![13]);
        assert_eq!(cfg.resolved_counts("co2").unwrap(), vec![50]);
        cfg.model = ModelKind::Cdgp3;
        assert_eq!(cfg.resolved_counts("co2").unwrap(), vec![37, 23]);
        cfg.model = ModelKind::Se;
        assert!(cfg.resolved_counts("co2").unwrap().is_empty());
    }

    #[test]
    fn templates_have_expected_shape() {
        let x = column(&linspace(0.0, 10.0, 30));
        for model in ModelKind::ALL {
            let cfg = ExperimentConfig {
                model,
                ..ExperimentConfig::default()
            };
            let s = build_template(&cfg, &x, "co2").unwrap();
            let depth = match model {
                ModelKind::Se | ModelKind::Mixture => 1,
                ModelKind::Sese | ModelKind::Cdgp2 => 2,
                ModelKind::Cdgp3 => 3,
            };
            assert_eq!(s.depth(), depth, "{model}");
        }
        let cfg = ExperimentConfig {
            model: ModelKind::Cdgp2,
            ..ExperimentConfig::default()
        };
        let s = build_template(&cfg, &x, "co2").unwrap();
        let layer = &s.intermediate()[0];
        assert_eq!(layer.hyperdata().len(), 50);
        assert!((layer.kernel().param(1) - 10.0 / 49.0).abs() < 1e-12);
        assert_eq!(layer.hyperdata().z()[0], 0.0);
        assert_eq!(layer.hyperdata().z()[49], 10.0);
    }

    #[test]
    fn model_names_parse() {
        for m in ModelKind::ALL {
            assert_eq!(m.as_str().parse::<ModelKind>().unwrap(), m);
        }
        assert!("dkl".parse::<ModelKind>().is_err());
    }
}
