//! Config-driven experiment runner.
//!
//! A TOML config selects one of four experiments (centralized sigma sweep,
//! multi-vs-single noise layer, federated sweep, mechanism comparison),
//! names the model, dataset, noise and training settings, and points at an
//! output directory. Every run writes a JSON manifest with its resolved
//! config and derived seeds; re-running from the manifest reproduces every
//! CSV byte for byte. Sweep cells are independent and run in the worker
//! pool; per-cell seeds derive from (master seed, cell index), so parallel
//! and serial execution emit identical results.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{export_perturbation_grid, export_pgm, load_cifar10, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::federated::{run_rounds, FederatedConfig, RoundRecord};
use crate::metrics::{
    optimal_sigma_by_snr, price_of_anarchy, price_of_stability, snr_db, MetricSeries, Snr,
    SweepResult, SweepRow,
};
use crate::model::{build_model, Mode, Model};
use crate::noise::{equivalent_single_sigma, Mechanism, NoisePlan};
use crate::par;
use crate::rng::{derive_seed, RngStream};
use crate::spec::{preset, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{train, train_segment, Schedule, TrainConfig, TrainReport};

const SEED_INIT: u64 = 0x60;
const SEED_TRAIN: u64 = 0x61;
const SEED_NOISE: u64 = 0x62;
const SEED_FED: u64 = 0x63;
const SEED_FIGS: u64 = 0x64;
const SEED_NOISE_LAYERS: u64 = 0x65;

/// Sigma values used by `export_figs` for the perturbation grid.
const FIG_SIGMAS: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];
/// Channel cap per conv layer in feature-map export.
const FIG_MAX_CHANNELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SweepCentralized,
    MultiVsSingleLayer,
    FederatedSweep,
    MechanismComparison,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::SweepCentralized => "sweep_centralized",
            ExperimentKind::MultiVsSingleLayer => "multi_vs_single_layer",
            ExperimentKind::FederatedSweep => "federated_sweep",
            ExperimentKind::MechanismComparison => "mechanism_comparison",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    /// Built-in spec name (model1, model2, model3, model_s).
    #[serde(default)]
    pub preset: Option<String>,
    /// Full inline spec; wins over `preset` when both are given.
    #[serde(default)]
    pub inline: Option<ModelSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    200
}
fn default_hw() -> usize {
    8
}
fn default_channels() -> usize {
    3
}
fn default_separation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory with the CIFAR-10 binary batches (cifar10 only).
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_hw")]
    pub hw: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
    /// Optional (train, val, test) subset sizes applied after loading.
    #[serde(default)]
    pub subset: Option<(usize, usize, usize)>,
}

fn default_sigma() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSection {
    /// Mechanism for sweep_centralized cells.
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    /// Sweep grid; defaults to 0 plus 20 evenly spaced levels in (0, 1].
    #[serde(default)]
    pub sigma_grid: Option<Vec<f64>>,
    /// Fixed sigma for multi_vs_single_layer and mechanism_comparison.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Mechanism list for mechanism_comparison; the base (none) group is
    /// always first.
    #[serde(default)]
    pub mechanisms: Option<Vec<Mechanism>>,
    /// Optional extra grid for the top mechanisms in mechanism_comparison.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub grid_mechanisms: Option<Vec<Mechanism>>,
}

fn default_mechanism() -> Mechanism {
    Mechanism::HiddenLayers
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            mechanism: default_mechanism(),
            sigma_grid: None,
            sigma: default_sigma(),
            mechanisms: None,
            grid: None,
            grid_mechanisms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedSigmaMode {
    /// One federated run per sigma in the grid, uniform across clients.
    FixedGrid,
    /// A single run with an explicit per-client sigma vector.
    PerClient,
    /// Per-client sigmas chosen by maximizing SNR on local sweeps.
    SnrAuto,
}

fn default_fed_mode() -> FedSigmaMode {
    FedSigmaMode::FixedGrid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSection {
    #[serde(default = "crate::experiments::default_fed_clients")]
    pub num_clients: usize,
    #[serde(default = "crate::experiments::default_fed_rounds")]
    pub rounds: usize,
    #[serde(default = "crate::experiments::default_fed_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_fed_mode")]
    pub sigma_mode: FedSigmaMode,
    #[serde(default)]
    pub per_client_sigma: Option<Vec<f64>>,
    /// Grid for fixed_grid mode; defaults to {0.1, 0.3, 0.5, 0.7, 0.9}.
    #[serde(default)]
    pub sigma_grid: Option<Vec<f64>>,
    /// Optional perturbation of uploaded weights (see `FederatedConfig`).
    #[serde(default)]
    pub upload_sigma: Option<f64>,
}

pub(crate) fn default_fed_clients() -> usize {
    3
}
pub(crate) fn default_fed_rounds() -> usize {
    20
}
pub(crate) fn default_fed_local_epochs() -> usize {
    4
}

fn default_fed_grid() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

/// Full experiment description; serializes to/from the TOML config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub federated: Option<FederatedSection>,
}

/// Twenty evenly spaced sigma levels in (0, 1], plus the mandatory base 0.
pub fn default_sigma_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    for k in 1..=20 {
        grid.push(k as f64 * 0.05);
    }
    grid
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))
    }

    /// Structural validation; error messages name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.training
            .validate()
            .map_err(|e| Error::Config(format!("training: {e}")))?;
        if self.noise.sigma < 0.0 {
            return Err(Error::Config("noise.sigma must be >= 0".into()));
        }
        if let Some(grid) = &self.noise.sigma_grid {
            validate_grid(grid, "noise.sigma_grid")?;
        }
        if let Some(grid) = &self.noise.grid {
            if grid.iter().any(|s| *s < 0.0) {
                return Err(Error::Config("noise.grid must be non-negative".into()));
            }
        }
        match self.dataset.kind {
            DatasetKind::Cifar10 => {
                if self.dataset.path.is_none() {
                    return Err(Error::Config(
                        "dataset.path is required for dataset.kind = \"cifar10\"".into(),
                    ));
                }
            }
            DatasetKind::Synthetic => {
                if self.dataset.classes < 2 {
                    return Err(Error::Config("dataset.classes must be >= 2".into()));
                }
                if self.dataset.per_class < 7 {
                    return Err(Error::Config(
                        "dataset.per_class must be >= 7 so every split is non-empty".into(),
                    ));
                }
            }
        }
        if self.model.preset.is_none() && self.model.inline.is_none() {
            return Err(Error::Config(
                "model: either model.preset or model.inline is required".into(),
            ));
        }
        if let Some(name) = &self.model.preset {
            if self.model.inline.is_none() && preset(name).is_none() {
                return Err(Error::Config(format!(
                    "model.preset: unknown preset '{name}'"
                )));
            }
        }
        if self.experiment == ExperimentKind::FederatedSweep {
            let fed = self.federated.as_ref().ok_or_else(|| {
                Error::Config("federated section is required for federated_sweep".into())
            })?;
            if fed.num_clients == 0 {
                return Err(Error::Config("federated.num_clients must be >= 1".into()));
            }
            match fed.sigma_mode {
                FedSigmaMode::PerClient => {
                    let sigmas = fed.per_client_sigma.as_ref().ok_or_else(|| {
                        Error::Config(
                            "federated.per_client_sigma is required for per_client mode".into(),
                        )
                    })?;
                    if sigmas.len() != fed.num_clients {
                        return Err(Error::Config(format!(
                            "federated.per_client_sigma needs {} entries, got {}",
                            fed.num_clients,
                            sigmas.len()
                        )));
                    }
                }
                FedSigmaMode::FixedGrid => {
                    if let Some(grid) = &fed.sigma_grid {
                        if grid.is_empty() || grid.iter().any(|s| *s < 0.0) {
                            return Err(Error::Config(
                                "federated.sigma_grid must be non-empty and non-negative".into(),
                            ));
                        }
                    }
                }
                FedSigmaMode::SnrAuto => {}
            }
        }
        Ok(())
    }

    /// Load and validate the dataset named by the config.
    pub fn resolve_dataset(&self) -> Result<Dataset> {
        let base = match self.dataset.kind {
            DatasetKind::Synthetic => synth_dataset(
                self.dataset.classes,
                self.dataset.per_class,
                self.dataset.hw,
                self.dataset.channels,
                self.dataset.separation,
                self.dataset.seed,
            )?,
            DatasetKind::Cifar10 => {
                let path = self.dataset.path.as_ref().expect("validated");
                load_cifar10(path, self.dataset.seed)?
            }
        };
        match self.dataset.subset {
            Some((train, val, test)) => base.subsample(train, val, test, self.dataset.seed),
            None => Ok(base),
        }
    }

    /// Resolve the model spec against the dataset's image shape and class
    /// count. The desk-scale preset adapts to the dataset; fixed-size specs
    /// must match it.
    pub fn resolve_spec(&self, data: &Dataset) -> Result<ModelSpec> {
        let shape = data.image_shape();
        let spec = if let Some(spec) = &self.model.inline {
            spec.clone()
        } else {
            let name = self.model.preset.as_ref().expect("validated");
            if name == "model_s" || name == "models" {
                crate::spec::model_s(shape, data.num_classes)
            } else {
                preset(name).expect("validated")
            }
        };
        if spec.input_shape != shape {
            return Err(Error::Config(format!(
                "model input shape {:?} does not match dataset {:?}",
                spec.input_shape, shape
            )));
        }
        if spec.num_classes != data.num_classes {
            return Err(Error::Config(format!(
                "model num_classes {} does not match dataset {}",
                spec.num_classes, data.num_classes
            )));
        }
        spec.validate()?;
        Ok(spec)
    }

    fn init_seed(&self) -> u64 {
        derive_seed(self.master_seed, &[SEED_INIT])
    }
    fn train_seed(&self) -> u64 {
        derive_seed(self.master_seed, &[SEED_TRAIN])
    }
    fn cell_noise_seed(&self, cell: u64) -> u64 {
        derive_seed(self.master_seed, &[SEED_NOISE, cell])
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train_seed(),
            ..self.training.clone()
        }
    }
}

fn validate_grid(grid: &[f64], field: &str) -> Result<()> {
    if grid.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::Config(format!(
            "{field} must contain only finite non-negative values"
        )));
    }
    if !grid.contains(&0.0) {
        return Err(Error::Config(format!(
            "{field} must contain 0 (the base model row)"
        )));
    }
    Ok(())
}

/// Per-cell seed record in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeed {
    pub label: String,
    pub init_seed: u64,
    pub train_seed: u64,
    pub noise_seed: u64,
}

/// Provenance for a run: enough to bit-reproduce every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub code_version: String,
    pub precision: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub per_run_seeds: Vec<RunSeed>,
    pub created_unix: u64,
}

impl RunManifest {
    fn new(config: &ExperimentConfig, per_run_seeds: Vec<RunSeed>) -> Self {
        RunManifest {
            experiment: config.experiment.name().to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            precision: "f64".to_string(),
            master_seed: config.master_seed,
            config: config.clone(),
            per_run_seeds,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Result of `run`: where the outputs went.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Load a config (TOML) or a previous run's manifest (JSON) and execute it.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = if path.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        manifest.config
    } else {
        ExperimentConfig::from_toml(&text)?
    };
    config.validate()?;
    Ok(config)
}

/// Execute the experiment described by a config or manifest file.
pub fn run(config_path: &Path) -> Result<RunSummary> {
    let config = load_config(config_path)?;
    execute(&config)
}

/// Execute an already validated config.
pub fn execute(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let out_dir = &config.output_dir;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    match config.experiment {
        ExperimentKind::SweepCentralized => {
            let (sweep, reports) = run_sweep_centralized(config, &mut seeds)?;
            files.push(write_text(&out_dir.join("sweep.csv"), &sweep.to_csv())?);
            files.extend(write_reports(out_dir, &reports)?);
        }
        ExperimentKind::MultiVsSingleLayer => {
            let report = preset_multi_vs_single(config, &mut seeds)?;
            files.push(write_text(
                &out_dir.join("multi_vs_single.csv"),
                &report.to_csv(),
            )?);
            let labelled: Vec<(String, TrainReport)> = report
                .rows
                .iter()
                .zip(report.reports.iter())
                .map(|(row, rep)| (row.model_type.clone(), rep.clone()))
                .collect();
            files.extend(write_labelled_reports(out_dir, &labelled)?);
        }
        ExperimentKind::FederatedSweep => {
            let report = preset_federated_sweep(config, &mut seeds)?;
            files.push(write_text(
                &out_dir.join("rounds.csv"),
                &report.rounds_csv(),
            )?);
            files.push(write_text(
                &out_dir.join("federated_summary.csv"),
                &report.summary_csv(),
            )?);
        }
        ExperimentKind::MechanismComparison => {
            let report = preset_mechanism_comparison(config, &mut seeds)?;
            files.push(write_text(
                &out_dir.join("mechanisms.csv"),
                &report.to_csv(),
            )?);
            let labelled: Vec<(String, TrainReport)> = report
                .rows
                .iter()
                .zip(report.reports.iter())
                .map(|(row, rep)| {
                    (
                        format!("mech_{}_sigma_{:.2}", row.mechanism.name(), row.sigma),
                        rep.clone(),
                    )
                })
                .collect();
            files.extend(write_labelled_reports(out_dir, &labelled)?);
        }
    }
    let manifest = RunManifest::new(config, seeds);
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    files.push(manifest_path);
    Ok(RunSummary {
        output_dir: out_dir.clone(),
        files,
    })
}

/// Train one model per sigma in the grid (in the worker pool) and assemble
/// the sweep table with SNR, PoS and PoA against the sigma = 0 base row.
pub fn run_sweep_centralized(
    config: &ExperimentConfig,
    seeds: &mut Vec<RunSeed>,
) -> Result<(SweepResult, Vec<(String, TrainReport)>)> {
    let data = config.resolve_dataset()?;
    let spec = config.resolve_spec(&data)?;
    let grid = normalized_grid(config.noise.sigma_grid.clone())?;
    let cells = run_sigma_cells(
        config,
        &data,
        &spec,
        &grid,
        config.noise.mechanism,
        &data.splits.train,
        0,
        seeds,
    )?;
    let sweep = assemble_sweep(&cells)?;
    let reports = cells
        .into_iter()
        .map(|(sigma, report)| (format!("sigma_{sigma:.2}"), report))
        .collect();
    Ok((sweep, reports))
}

fn normalized_grid(grid: Option<Vec<f64>>) -> Result<Vec<f64>> {
    let mut grid = grid.unwrap_or_else(default_sigma_grid);
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    grid.dedup();
    validate_grid(&grid, "noise.sigma_grid")?;
    Ok(grid)
}

/// Train one cell per sigma, all sharing the same initialization and
/// schedule seeds so runs differ only in their noise plан.
#[allow(clippy::too_many_arguments)]
fn run_sigma_cells(
    config: &ExperimentConfig,
    data: &Dataset,
    spec: &ModelSpec,
    grid: &[f64],
    mechanism: Mechanism,
    train_indices: &[usize],
    worker: u64,
    seeds: &mut Vec<RunSeed>,
) -> Result<Vec<(f64, TrainReport)>> {
    let init_seed = config.init_seed();
    let train_config = config.train_config();
    let results = par::map_collect(grid.len(), |cell| {
        let sigma = grid[cell];
        let noise_seed = config.cell_noise_seed(cell as u64);
        let mechanism = if sigma == 0.0 {
            Mechanism::None
        } else {
            mechanism
        };
        let plan = NoisePlan::new(mechanism, sigma, noise_seed);
        let mut model = build_model(spec, init_seed)?;
        let per_epoch = train_segment(
            &mut model,
            data,
            train_indices,
            &train_config,
            &plan,
            Schedule {
                worker,
                epoch_offset: 0,
            },
            train_config.epochs,
        )?;
        let test = crate::train::evaluate(&model, data, &data.splits.test)?;
        Ok::<(f64, TrainReport), Error>((
            sigma,
            TrainReport {
                per_epoch,
                final_test: crate::train::FinalStats {
                    test_acc: test.accuracy,
                    test_loss: test.loss,
                },
                sigma,
                mechanism: plan.mechanism,
                seed: train_config.seed,
            },
        ))
    });
    let mut cells = Vec::with_capacity(results.len());
    for (cell, result) in results.into_iter().enumerate() {
        let pair = result?;
        seeds.push(RunSeed {
            label: format!("sigma_{:.2}", pair.0),
            init_seed,
            train_seed: config.train_seed(),
            noise_seed: config.cell_noise_seed(cell as u64),
        });
        cells.push(pair);
    }
    Ok(cells)
}

/// Build the sweep table from per-sigma reports.
fn assemble_sweep(cells: &[(f64, TrainReport)]) -> Result<SweepResult> {
    let base = cells
        .iter()
        .find(|(sigma, _)| *sigma == 0.0)
        .ok_or_else(|| Error::Metric("sweep has no sigma=0 base row".into()))?;
    let base_report = &base.1;
    let signal = MetricSeries::new(base_report.validation_series(), 0.0, "base")?;
    let mut rows = Vec::with_capacity(cells.len());
    for (sigma, report) in cells {
        let snr = if *sigma == 0.0 {
            Snr::Infinite
        } else {
            let noisy = MetricSeries::new(
                report.validation_series(),
                *sigma,
                format!("sigma_{sigma:.2}"),
            )?;
            snr_db(&signal, &noisy)?
        };
        rows.push(SweepRow {
            sigma: *sigma,
            train_acc: report.per_epoch.last().map(|e| e.train_acc).unwrap_or(0.0),
            val_series: MetricSeries::new(
                report.validation_series(),
                *sigma,
                format!("sigma_{sigma:.2}"),
            )?,
            test_acc: report.final_test.test_acc,
            test_loss: report.final_test.test_loss,
            snr,
            pos: price_of_stability(report.final_test.test_acc, base_report.final_test.test_acc)?,
            poa: price_of_anarchy(
                report.final_test.test_loss,
                base_report.final_test.test_loss,
            )?,
        });
    }
    rows.sort_by(|a, b| a.sigma.partial_cmp(&b.sigma).expect("finite sigma"));
    let sweep = SweepResult { rows };
    sweep.validate()?;
    Ok(sweep)
}

/// Rows of the multi-vs-single comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiVsSingleRow {
    pub model_type: String,
    pub sigma: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiVsSingleReport {
    pub rows: Vec<MultiVsSingleRow>,
    pub reports: Vec<TrainReport>,
    pub noise_sites: usize,
}

impl MultiVsSingleReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_type,sigma,train_acc,test_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{},{}\n",
                r.model_type, r.sigma, r.train_acc, r.test_acc
            ));
        }
        out
    }
}

/// Train (a) the base model, (b) the model with one noise layer per site at
/// sigma, (c) the model with a single layer at sqrt(N) * sigma, and report
/// the three side by side.
pub fn preset_multi_vs_single(
    config: &ExperimentConfig,
    seeds: &mut Vec<RunSeed>,
) -> Result<MultiVsSingleReport> {
    let data = config.resolve_dataset()?;
    let spec = config.resolve_spec(&data)?;
    let sites = spec.noise_site_count();
    if sites == 0 {
        return Err(Error::Config(
            "model has no noise sites (needs at least two Conv2D layers)".into(),
        ));
    }
    let sigma = config.noise.sigma;
    let single_sigma = equivalent_single_sigma(sites, sigma)?;
    let layer_seed = derive_seed(config.master_seed, &[SEED_NOISE_LAYERS]);

    let variants: Vec<(String, ModelSpec, f64)> = vec![
        ("base".into(), spec.clone(), 0.0),
        (
            "multiple_noise_layers".into(),
            spec.with_gaussian_noise_layers(sigma, layer_seed),
            sigma,
        ),
        (
            "single_layer_substitute".into(),
            spec.with_single_noise_layer(single_sigma, derive_seed(layer_seed, &[1]), 0),
            single_sigma,
        ),
    ];

    let init_seed = config.init_seed();
    let train_config = config.train_config();
    let results = par::map_collect(variants.len(), |i| {
        let (_, variant_spec, _) = &variants[i];
        let mut model = build_model(variant_spec, init_seed)?;
        train(&mut model, &data, &train_config, &NoisePlan::none())
    });
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for ((label, _, sigma), result) in variants.iter().zip(results) {
        let report = result?;
        seeds.push(RunSeed {
            label: label.clone(),
            init_seed,
            train_seed: train_config.seed,
            noise_seed: layer_seed,
        });
        rows.push(MultiVsSingleRow {
            model_type: label.clone(),
            sigma: *sigma,
            train_acc: report.per_epoch.last().map(|e| e.train_acc).unwrap_or(0.0),
            test_acc: report.final_test.test_acc,
        });
        reports.push(report);
    }
    Ok(MultiVsSingleReport {
        rows,
        reports,
        noise_sites: sites,
    })
}

/// One federated run and its per-round records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedRun {
    pub label: String,
    pub sigmas: Vec<f64>,
    pub records: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSweepReport {
    pub runs: Vec<FederatedRun>,
    pub num_clients: usize,
}

impl FederatedSweepReport {
    /// `label,round,global_acc,global_loss,client_i_acc,client_i_loss...`
    pub fn rounds_csv(&self) -> String {
        let mut header = String::from("label,round,global_acc,global_loss");
        for i in 1..=self.num_clients {
            header.push_str(&format!(",client_{i}_acc,client_{i}_loss"));
        }
        header.push('\n');
        let mut out = header;
        for run in &self.runs {
            for record in &run.records {
                out.push_str(&format!(
                    "{},{},{},{}",
                    run.label, record.round_index, record.global_accuracy, record.global_loss
                ));
                for c in &record.per_client {
                    out.push_str(&format!(",{},{}", c.local_acc, c.local_loss));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Final-round summary per run: `label,sigmas,final_global_acc,final_global_loss`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("label,sigmas,final_global_acc,final_global_loss\n");
        for run in &self.runs {
            let sigmas = run
                .sigmas
                .iter()
                .map(|s| format!("{s:.2}"))
                .collect::<Vec<_>>()
                .join(";");
            match run.records.last() {
                Some(last) => out.push_str(&format!(
                    "{},{},{},{}\n",
                    run.label, sigmas, last.global_accuracy, last.global_loss
                )),
                None => out.push_str(&format!("{},{},,\n", run.label, sigmas)),
            }
        }
        out
    }
}

/// Federated experiment: either one run per sigma of a fixed grid, a single
/// run with explicit per-client sigmas, or per-client sigmas chosen by the
/// optimal SNR of local sweeps.
pub fn preset_federated_sweep(
    config: &ExperimentConfig,
    seeds: &mut Vec<RunSeed>,
) -> Result<FederatedSweepReport> {
    let fed = config
        .federated
        .as_ref()
        .ok_or_else(|| Error::Config("federated section is required".into()))?;
    let data = config.resolve_dataset()?;
    let spec = config.resolve_spec(&data)?;
    let fed_seed = derive_seed(config.master_seed, &[SEED_FED]);
    let train_config = config.train_config();

    let make_config = |sigmas: Vec<f64>| FederatedConfig {
        num_clients: fed.num_clients,
        rounds: fed.rounds,
        local_epochs: fed.local_epochs,
        per_client_sigma: sigmas,
        train_config: train_config.clone(),
        seed: fed_seed,
        upload_sigma: fed.upload_sigma,
    };

    let mut runs = Vec::new();
    match fed.sigma_mode {
        FedSigmaMode::FixedGrid => {
            let grid = fed.sigma_grid.clone().unwrap_or_else(default_fed_grid);
            for sigma in grid {
                let cfg = make_config(vec![sigma]);
                let (records, _) = run_rounds(&cfg, &data, &spec)?;
                seeds.push(RunSeed {
                    label: format!("fed_sigma_{sigma:.2}"),
                    init_seed: train_config.seed,
                    train_seed: train_config.seed,
                    noise_seed: fed_seed,
                });
                runs.push(FederatedRun {
                    label: format!("sigma_{sigma:.2}"),
                    sigmas: vec![sigma],
                    records,
                });
            }
        }
        FedSigmaMode::PerClient => {
            let sigmas = fed.per_client_sigma.clone().expect("validated");
            let cfg = make_config(sigmas.clone());
            let (records, _) = run_rounds(&cfg, &data, &spec)?;
            seeds.push(RunSeed {
                label: "fed_per_client".into(),
                init_seed: train_config.seed,
                train_seed: train_config.seed,
                noise_seed: fed_seed,
            });
            runs.push(FederatedRun {
                label: "per_client".into(),
                sigmas,
                records,
            });
        }
        FedSigmaMode::SnrAuto => {
            // Local sweeps per client shard pick the sigma with the best
            // SNR; the federated run then uses those sigmas.
            let shards = crate::federated::partition(
                &data.splits.train,
                fed.num_clients,
                &mut RngStream::from_seed(derive_seed(fed_seed, &[0x50])),
            )?;
            let grid = normalized_grid(config.noise.sigma_grid.clone())?;
            let mut sigmas = Vec::with_capacity(fed.num_clients);
            for (client, shard) in shards.iter().enumerate() {
                let cells = run_sigma_cells(
                    config,
                    &data,
                    &spec,
                    &grid,
                    Mechanism::HiddenLayers,
                    shard,
                    client as u64,
                    seeds,
                )?;
                let sweep = assemble_sweep(&cells)?;
                sigmas.push(optimal_sigma_by_snr(&sweep)?);
            }
            let cfg = make_config(sigmas.clone());
            let (records, _) = run_rounds(&cfg, &data, &spec)?;
            seeds.push(RunSeed {
                label: "fed_snr_auto".into(),
                init_seed: train_config.seed,
                train_seed: train_config.seed,
                noise_seed: fed_seed,
            });
            runs.push(FederatedRun {
                label: "snr_auto".into(),
                sigmas,
                records,
            });
        }
    }
    Ok(FederatedSweepReport {
        runs,
        num_clients: fed.num_clients,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRow {
    pub mechanism: Mechanism,
    pub sigma: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MechanismComparisonReport {
    pub rows: Vec<MechanismRow>,
    pub reports: Vec<TrainReport>,
}

impl MechanismComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,sigma,train_acc,test_acc,test_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.2},{},{},{}\n",
                r.mechanism.name(),
                r.sigma,
                r.train_acc,
                r.test_acc,
                r.test_loss
            ));
        }
        out
    }

    pub fn row(&self, mechanism: Mechanism, sigma: f64) -> Option<&MechanismRow> {
        self.rows
            .iter()
            .find(|r| r.mechanism == mechanism && r.sigma == sigma)
    }
}

/// One run per mechanism at the fixed sigma (the base group first), plus an
/// optional grid over the most resilient mechanisms.
pub fn preset_mechanism_comparison(
    config: &ExperimentConfig,
    seeds: &mut Vec<RunSeed>,
) -> Result<MechanismComparisonReport> {
    let data = config.resolve_dataset()?;
    let spec = config.resolve_spec(&data)?;
    let mut mechanisms = config
        .noise
        .mechanisms
        .clone()
        .unwrap_or_else(|| Mechanism::all().to_vec());
    // Base group always exists and comes first.
    mechanisms.retain(|m| *m != Mechanism::None);
    mechanisms.insert(0, Mechanism::None);

    let sigma = config.noise.sigma;
    let mut cells: Vec<(Mechanism, f64)> = mechanisms
        .iter()
        .map(|m| (*m, if *m == Mechanism::None { 0.0 } else { sigma }))
        .collect();
    if let Some(grid) = &config.noise.grid {
        let grid_mechs = config.noise.grid_mechanisms.clone().unwrap_or_else(|| {
            vec![
                Mechanism::HiddenLayers,
                Mechanism::Gradients,
                Mechanism::Labels,
            ]
        });
        for mech in grid_mechs {
            for &s in grid {
                if !cells.contains(&(mech, s)) {
                    cells.push((mech, s));
                }
            }
        }
    }

    let init_seed = config.init_seed();
    let train_config = config.train_config();
    let results = par::map_collect(cells.len(), |i| {
        let (mechanism, sigma) = cells[i];
        let plan = NoisePlan::new(mechanism, sigma, config.cell_noise_seed(i as u64));
        let mut model = build_model(&spec, init_seed)?;
        train(&mut model, &data, &train_config, &plan)
    });
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for ((mechanism, sigma), result) in cells.iter().zip(results) {
        let report = result?;
        seeds.push(RunSeed {
            label: format!("mech_{}_sigma_{sigma:.2}", mechanism.name()),
            init_seed,
            train_seed: train_config.seed,
            noise_seed: report.seed,
        });
        rows.push(MechanismRow {
            mechanism: *mechanism,
            sigma: *sigma,
            train_acc: report.per_epoch.last().map(|e| e.train_acc).unwrap_or(0.0),
            test_acc: report.final_test.test_acc,
            test_loss: report.final_test.test_loss,
        });
        reports.push(report);
    }
    Ok(MechanismComparisonReport { rows, reports })
}

/// Render the figure set for a finished run directory: the perturbation
/// grid of the first test image, and feature maps of the first two
/// convolution layers from a briefly trained base model and its
/// hidden-noise counterpart.
pub fn export_figs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = run_dir.join("manifest.json");
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let config = manifest.config;
    config.validate()?;
    let data = config.resolve_dataset()?;
    let spec = config.resolve_spec(&data)?;
    let figs_dir = run_dir.join("figs");
    fs::create_dir_all(&figs_dir)?;
    let mut files = Vec::new();

    // Perturbed-image grid.
    let image = data.image(data.splits.test[0]);
    let rng = RngStream::from_seed(derive_seed(config.master_seed, &[SEED_FIGS]));
    files.extend(export_perturbation_grid(
        &image,
        &FIG_SIGMAS,
        &rng,
        &figs_dir.join("perturbed"),
    )?);

    // Short training runs for the feature maps: base and hidden-noise.
    let mut feature_config = config.train_config();
    feature_config.epochs = feature_config.epochs.min(2);
    let sigma = if config.noise.sigma > 0.0 {
        config.noise.sigma
    } else {
        0.1
    };
    for (tag, plan) in [
        ("base", NoisePlan::none()),
        (
            "noisy",
            NoisePlan::new(
                Mechanism::HiddenLayers,
                sigma,
                derive_seed(config.master_seed, &[SEED_FIGS, 1]),
            ),
        ),
    ] {
        let mut model = build_model(&spec, config.init_seed())?;
        train_segment(
            &mut model,
            &data,
            &data.splits.train,
            &feature_config,
            &plan,
            Schedule::default(),
            feature_config.epochs,
        )?;
        files.extend(export_feature_maps(&model, &image, tag, &figs_dir)?);
    }
    Ok(files)
}

/// Eval-mode feature maps of the first two conv layers for one image.
fn export_feature_maps(
    model: &Model,
    image: &Tensor,
    tag: &str,
    figs_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        other => {
            return Err(Error::InvalidArgument(format!(
                "expected (H, W, C) image, got {other:?}"
            )))
        }
    };
    let batch = image.reshaped(&[1, h, w, c])?;
    let fwd = model.forward_pure(&batch, Mode::Eval, &RngStream::from_seed(0), None)?;
    let mut files = Vec::new();
    for (conv_ordinal, layer_index) in model.conv_layer_indices().into_iter().take(2).enumerate() {
        let (maps, shape) = model
            .conv_feature_map(&fwd, layer_index)
            .expect("conv layer produces feature maps");
        let (mh, mw, mc) = match shape {
            crate::spec::Shape::Spatial { h, w, c } => (h, w, c),
            _ => continue,
        };
        for channel in 0..mc.min(FIG_MAX_CHANNELS) {
            let mut plane = Vec::with_capacity(mh * mw);
            for p in 0..mh * mw {
                plane.push(maps[p * mc + channel]);
            }
            let map = Tensor::from_vec(&[mh, mw], plane)?;
            let path = figs_dir.join(format!(
                "fmap_{tag}_conv{}_ch{channel:02}.pgm",
                conv_ordinal + 1
            ));
            export_pgm(&map, &path)?;
            files.push(path);
        }
    }
    Ok(files)
}

fn write_text(path: &Path, content: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(path.to_path_buf())
}

fn write_reports(out_dir: &Path, reports: &[(String, TrainReport)]) -> Result<Vec<PathBuf>> {
    write_labelled_reports(out_dir, reports)
}

fn write_labelled_reports(
    out_dir: &Path,
    reports: &[(String, TrainReport)],
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("reports");
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (label, report) in reports {
        let json_path = dir.join(format!("{label}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
        files.push(json_path);
        let csv_path = dir.join(format!("{label}.csv"));
        fs::write(&csv_path, report.to_csv())?;
        files.push(csv_path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(experiment: ExperimentKind, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            experiment,
            output_dir: out.to_path_buf(),
            master_seed: 42,
            model: ModelSection {
                preset: Some("model_s".into()),
                inline: None,
            },
            dataset: DatasetSection {
                kind: DatasetKind::Synthetic,
                path: None,
                classes: 3,
                per_class: 30,
                hw: 8,
                channels: 1,
                separation: 1.5,
                seed: 7,
                subset: None,
            },
            noise: NoiseSection {
                sigma_grid: Some(vec![0.0, 0.1, 0.3]),
                ..NoiseSection::default()
            },
            training: TrainConfig {
                batch_size: 16,
                learning_rate: 0.01,
                momentum: 0.9,
                epochs: 2,
                seed: 0,
            },
            federated: None,
        }
    }

    #[test]
    fn default_grid_has_base_plus_twenty_levels() {
        let grid = default_sigma_grid();
        assert_eq!(grid.len(), 21);
        assert_eq!(grid[0], 0.0);
        assert!((grid[20] - 1.0).abs() < 1e-12);
        validate_grid(&grid, "grid").unwrap();
    }

    #[test]
    fn config_validation_field_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::SweepCentralized, dir.path());
        cfg.noise.sigma_grid = Some(vec![0.1, 0.3]);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("noise.sigma_grid"), "{err}");

        let mut cfg = base_config(ExperimentKind::SweepCentralized, dir.path());
        cfg.model.preset = Some("model_x".into());
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.preset"), "{err}");

        let mut cfg = base_config(ExperimentKind::FederatedSweep, dir.path());
        cfg.federated = None;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("federated"), "{err}");
    }

    #[test]
    fn toml_round_trip_and_unknown_mechanism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(ExperimentKind::SweepCentralized, dir.path());
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);

        let bad = text.replace("mechanism = \"hidden_layers\"", "mechanism = \"voodoo\"");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("mechanism"), "{err}");
    }

    #[test]
    fn sweep_centralized_produces_valid_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(ExperimentKind::SweepCentralized, dir.path());
        let summary = execute(&cfg).unwrap();
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sigma,train_acc,test_acc,test_loss,snr_db,pos,poa"
        );
        let base_row = lines.next().unwrap();
        assert!(base_row.starts_with("0.00,"), "{base_row}");
        let fields: Vec<&str> = base_row.split(',').collect();
        assert_eq!(fields[4], "inf");
        assert_eq!(fields[5], "1");
        assert_eq!(fields[6], "1");
        assert_eq!(csv.lines().count(), 4); // header + 3 sigmas
        assert!(summary.files.iter().any(|f| f.ends_with("manifest.json")));
        assert!(dir.path().join("reports/sigma_0.10.json").exists());
        assert!(dir.path().join("reports/sigma_0.10.csv").exists());
    }

    #[test]
    fn rerun_from_manifest_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let cfg = base_config(ExperimentKind::SweepCentralized, dir_a.path());
        execute(&cfg).unwrap();
        let sweep_a = fs::read(dir_a.path().join("sweep.csv")).unwrap();

        // Re-run from the manifest into a second directory.
        let manifest_path = dir_a.path().join("manifest.json");
        let mut config = load_config(&manifest_path).unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        config.output_dir = dir_b.path().to_path_buf();
        execute(&config).unwrap();
        let sweep_b = fs::read(dir_b.path().join("sweep.csv")).unwrap();
        assert_eq!(sweep_a, sweep_b);
    }

    #[test]
    fn multi_vs_single_rows_and_sigma_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::MultiVsSingleLayer, dir.path());
        cfg.noise.sigma = 0.1;
        let mut seeds = Vec::new();
        let report = preset_multi_vs_single(&cfg, &mut seeds).unwrap();
        assert_eq!(report.noise_sites, 1); // model_s has two convs
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].model_type, "base");
        assert_eq!(report.rows[0].sigma, 0.0);
        assert_eq!(report.rows[1].sigma, 0.1);
        assert!((report.rows[2].sigma - 0.1).abs() < 1e-12); // sqrt(1)*0.1
        let csv = report.to_csv();
        assert!(csv.contains("single_layer_substitute,0.10"));
    }

    #[test]
    fn multi_vs_single_sigma_zero_collapses_to_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::MultiVsSingleLayer, dir.path());
        cfg.noise.sigma = 0.0;
        let mut seeds = Vec::new();
        let report = preset_multi_vs_single(&cfg, &mut seeds).unwrap();
        let base = &report.reports[0];
        for other in &report.reports[1..] {
            assert_eq!(base.per_epoch, other.per_epoch);
            assert_eq!(base.final_test, other.final_test);
        }
    }

    #[test]
    fn federated_sweep_default_grid_and_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::FederatedSweep, dir.path());
        cfg.federated = Some(FederatedSection {
            num_clients: 2,
            rounds: 1,
            local_epochs: 1,
            sigma_mode: FedSigmaMode::FixedGrid,
            per_client_sigma: None,
            sigma_grid: None,
            upload_sigma: None,
        });
        let mut seeds = Vec::new();
        let report = preset_federated_sweep(&cfg, &mut seeds).unwrap();
        assert_eq!(report.runs.len(), 5); // default grid 0.1..0.9
        let csv = report.rounds_csv();
        assert!(csv.starts_with(
            "label,round,global_acc,global_loss,client_1_acc,client_1_loss,client_2_acc,client_2_loss"
        ));
        assert_eq!(csv.lines().count(), 1 + 5);
        let summary = report.summary_csv();
        assert_eq!(summary.lines().count(), 1 + 5);
    }

    #[test]
    fn federated_per_client_mode_consumes_vector() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::FederatedSweep, dir.path());
        cfg.federated = Some(FederatedSection {
            num_clients: 3,
            rounds: 1,
            local_epochs: 1,
            sigma_mode: FedSigmaMode::PerClient,
            per_client_sigma: Some(vec![0.53, 0.37, 0.16]),
            sigma_grid: None,
            upload_sigma: None,
        });
        cfg.validate().unwrap();
        let mut seeds = Vec::new();
        let report = preset_federated_sweep(&cfg, &mut seeds).unwrap();
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.runs[0].sigmas, vec![0.53, 0.37, 0.16]);
        assert_eq!(report.runs[0].records.len(), 1);
        assert_eq!(report.runs[0].records[0].per_client.len(), 3);
    }

    #[test]
    fn mechanism_comparison_groups() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::MechanismComparison, dir.path());
        cfg.noise.mechanisms = Some(vec![
            Mechanism::HiddenLayers,
            Mechanism::Gradients,
            Mechanism::None,
        ]);
        cfg.noise.sigma = 0.1;
        cfg.training.epochs = 1;
        let mut seeds = Vec::new();
        let report = preset_mechanism_comparison(&cfg, &mut seeds).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].mechanism, Mechanism::None);
        assert_eq!(report.rows[0].sigma, 0.0);
        let csv = report.to_csv();
        assert!(csv.starts_with("mechanism,sigma,train_acc,test_acc,test_loss"));
        assert!(csv.lines().nth(1).unwrap().starts_with("none,0.00"));
    }

    #[test]
    fn mechanism_grid_mode_adds_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::MechanismComparison, dir.path());
        cfg.noise.mechanisms = Some(vec![Mechanism::HiddenLayers]);
        cfg.noise.grid = Some(vec![0.1, 0.3]);
        cfg.noise.grid_mechanisms = Some(vec![Mechanism::HiddenLayers, Mechanism::Gradients]);
        cfg.noise.sigma = 0.1;
        cfg.training.epochs = 1;
        let mut seeds = Vec::new();
        let report = preset_mechanism_comparison(&cfg, &mut seeds).unwrap();
        // none + hidden@0.1 + hidden@0.3 + gradients@0.1 + gradients@0.3
        assert_eq!(report.rows.len(), 5);
        assert!(report.row(Mechanism::Gradients, 0.3).is_some());
    }

    #[test]
    fn multi_vs_single_agree_within_tolerance_over_seeds() {
        // Seed-averaged comparison of N layers at sigma vs one layer at
        // sqrt(N)*sigma; the layer count must not matter.
        let dir = tempfile::tempdir().unwrap();
        let mut multi_sum = 0.0;
        let mut single_sum = 0.0;
        for master_seed in [11u64, 12, 13] {
            let mut cfg = base_config(ExperimentKind::MultiVsSingleLayer, dir.path());
            cfg.master_seed = master_seed;
            cfg.dataset.separation = 1.5;
            cfg.noise.sigma = 0.1;
            cfg.training.epochs = 4;
            let mut seeds = Vec::new();
            let report = preset_multi_vs_single(&cfg, &mut seeds).unwrap();
            multi_sum += report.rows[1].test_acc;
            single_sum += report.rows[2].test_acc;
        }
        let gap = (multi_sum / 3.0 - single_sum / 3.0).abs();
        assert!(gap <= 0.05, "seed-averaged multi/single gap {gap}");
    }

    #[test]
    fn federated_single_client_summary_matches_centralized_short_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(ExperimentKind::FederatedSweep, dir.path());
        cfg.federated = Some(FederatedSection {
            num_clients: 1,
            rounds: 1,
            local_epochs: 2,
            sigma_mode: FedSigmaMode::FixedGrid,
            per_client_sigma: None,
            sigma_grid: Some(vec![0.0]),
            upload_sigma: None,
        });
        let mut seeds = Vec::new();
        let report = preset_federated_sweep(&cfg, &mut seeds).unwrap();
        let record = report.runs[0].records.last().unwrap();

        // Centralized oracle: same derived seeds, two epochs.
        let data = cfg.resolve_dataset().unwrap();
        let spec = cfg.resolve_spec(&data).unwrap();
        let mut train_config = cfg.train_config();
        train_config.epochs = 2;
        let mut model = build_model(&spec, train_config.seed).unwrap();
        let oracle = train(&mut model, &data, &train_config, &NoisePlan::none()).unwrap();
        assert_eq!(record.global_accuracy, oracle.final_test.test_acc);
        assert_eq!(record.global_loss, oracle.final_test.test_loss);
    }

    #[test]
    fn export_figs_writes_grid_and_feature_maps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config(ExperimentKind::SweepCentralized, dir.path());
        execute(&cfg).unwrap();
        let files = export_figs(dir.path()).unwrap();
        assert!(files.len() > FIG_SIGMAS.len());
        assert!(dir.path().join("figs/perturbed_sigma0.30.pgm").exists());
        assert!(dir.path().join("figs/fmap_base_conv1_ch00.pgm").exists());
        assert!(dir.path().join("figs/fmap_noisy_conv2_ch00.pgm").exists());
        // PGMs parse back.
        let (w, h, _) =
            crate::data::parse_pgm(&dir.path().join("figs/fmap_base_conv1_ch00.pgm")).unwrap();
        assert_eq!((w, h), (8, 8));
    }
}
