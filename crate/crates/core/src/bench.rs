//! Experiment harness: declarative experiment specs with parameter sweeps,
//! the split-half reproducibility protocol, accuracy surfaces over the
//! sparsity parameters, the sparsity/independence ratio diagnostic, and
//! parallel-speedup measurement.
//!
//! Every trial draws its seed from the master seed and stable cell/trial
//! indices, so results are independent of scheduling and thread count, and
//! a partially completed sweep can be resumed without changing any number.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::{
    init_fastica, run_ica_emk, run_ica_emk_profiled, run_sparse_ica, whiten_reduce, DemixingState,
    DensityModel, IcaConfig, SparseConfig, StepRule, WInit,
};
use crate::iva::{run_iva_aggd, DatasetStack, IvaConfig, IvaInit, IvaMethod};
use crate::metrics;
use crate::sources::{
    gen_fmri_like, mix_random, sample_gamma_source, sample_ggd, sample_ggd_mixture, sample_mggd,
    FmriScenario, GgdMixtureSpec, GgdSpec, MixingProblem,
};

// ---------------------------------------------------------------------------
// generators

fn default_mixture_sources() -> usize {
    8
}
fn default_samples() -> usize {
    10_000
}
fn default_sparse_sources() -> usize {
    20
}
fn default_sparse_samples() -> usize {
    1000
}
fn default_ggd_beta() -> f64 {
    0.1
}
fn default_scv_sources() -> usize {
    10
}
fn default_scv_datasets() -> usize {
    3
}
fn default_beta_range() -> (f64, f64) {
    (0.25, 4.0)
}
fn default_sigma_range() -> (f64, f64) {
    (0.4, 0.6)
}

/// What a generator produced for one trial.
#[derive(Debug, Clone)]
pub enum GeneratedData {
    /// One mixing problem (single-dataset ICA experiments).
    Single(MixingProblem),
    /// K aligned problems sharing dependent sources (IVA experiments).
    Stack(Vec<MixingProblem>),
    /// Per-subject problems (fMRI-like protocols).
    Subjects(Vec<MixingProblem>),
}

/// Declarative source generator, serializable inside an experiment spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// Bank of GGD-mixture sources: 4 or 5 kernels per source with fixed
    /// symmetric mean sets, kernel shapes uniform in (0.25, 4), mixed by a
    /// random standard-normal square matrix.
    GgdMixtureBank {
        #[serde(default = "default_mixture_sources")]
        n_sources: usize,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    /// Bank of i.i.d. GGD sources with one shared shape (sparsity-driven
    /// experiments).
    GgdBank {
        #[serde(default = "default_sparse_sources")]
        n_sources: usize,
        #[serde(default = "default_sparse_samples")]
        samples: usize,
        #[serde(default = "default_ggd_beta")]
        beta: f64,
    },
    /// Bank of Gamma-distributed sources with shapes cycling through
    /// 1..=8.
    GammaBank {
        #[serde(default = "default_mixture_sources")]
        n_sources: usize,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    /// K datasets whose corresponding sources form MGGD source component
    /// vectors with AR(1) scatter; each dataset mixed independently.
    MggdScvStack {
        #[serde(default = "default_scv_sources")]
        n_sources: usize,
        #[serde(default = "default_scv_datasets")]
        n_datasets: usize,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_beta_range")]
        beta_range: (f64, f64),
        #[serde(default = "default_sigma_range")]
        sigma_range: (f64, f64),
    },
    /// fMRI-like per-subject datasets.
    Fmri(FmriScenario),
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<GeneratedData> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &[0x9e]));
        match self {
            GeneratorSpec::GgdMixtureBank { n_sources, samples } => {
                let mut s = DMatrix::zeros(*n_sources, *samples);
                for row in 0..*n_sources {
                    let k = if rng.gen::<bool>() { 4 } else { 5 };
                    let means: &[f64] = if k == 4 {
                        &[-8.0, -4.0, 4.0, 8.0]
                    } else {
                        &[-10.0, -5.0, 0.0, 5.0, 10.0]
                    };
                    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
                    let kernels: Vec<GgdSpec> = means
                        .iter()
                        .map(|&mu| GgdSpec::new(rng.gen_range(0.25..4.0), 1.0, mu))
                        .collect::<Result<_>>()?;
                    let spec = GgdMixtureSpec::new(kernels, weights)?;
                    let draw =
                        sample_ggd_mixture(&spec, *samples, crate::seed::derive(seed, &[1, row as u64]))?;
                    for (col, v) in draw.into_iter().enumerate() {
                        s[(row, col)] = v;
                    }
                }
                Ok(GeneratedData::Single(mix_random(s, seed)))
            }
            GeneratorSpec::GgdBank {
                n_sources,
                samples,
                beta,
            } => {
                let mut s = DMatrix::zeros(*n_sources, *samples);
                for row in 0..*n_sources {
                    let spec = GgdSpec::new(*beta, 1.0, 0.0)?;
                    let draw =
                        sample_ggd(&spec, *samples, crate::seed::derive(seed, &[2, row as u64]))?;
                    for (col, v) in draw.into_iter().enumerate() {
                        s[(row, col)] = v;
                    }
                }
                Ok(GeneratedData::Single(mix_random(s, seed)))
            }
            GeneratorSpec::GammaBank { n_sources, samples } => {
                let mut s = DMatrix::zeros(*n_sources, *samples);
                for row in 0..*n_sources {
                    let shape = (row % 8 + 1) as f64;
                    let draw = sample_gamma_source(
                        shape,
                        *samples,
                        crate::seed::derive(seed, &[3, row as u64]),
                    )?;
                    for (col, v) in draw.into_iter().enumerate() {
                        s[(row, col)] = v;
                    }
                }
                Ok(GeneratedData::Single(mix_random(s, seed)))
            }
            GeneratorSpec::MggdScvStack {
                n_sources,
                n_datasets,
                samples,
                beta_range,
                sigma_range,
            } => {
                let mut per_dataset: Vec<DMatrix<f64>> =
                    (0..*n_datasets).map(|_| DMatrix::zeros(*n_sources, *samples)).collect();
                for n in 0..*n_sources {
                    let beta = rng.gen_range(beta_range.0..beta_range.1);
                    let sigma = rng.gen_range(sigma_range.0..sigma_range.1);
                    let scatter = crate::sources::make_ar1_scatter(*n_datasets, sigma)?;
                    let params = crate::mggd::MggdParams::new(scatter, beta, 1.0)?;
                    let scv =
                        sample_mggd(&params, *samples, crate::seed::derive(seed, &[4, n as u64]))?;
                    for k in 0..*n_datasets {
                        per_dataset[k].set_row(n, &scv.row(k));
                    }
                }
                let problems = per_dataset
                    .into_iter()
                    .enumerate()
                    .map(|(k, s)| {
                        mix_random(s, crate::seed::derive(seed, &[5, k as u64]))
                    })
                    .collect();
                Ok(GeneratedData::Stack(problems))
            }
            GeneratorSpec::Fmri(scenario) => Ok(GeneratedData::Subjects(gen_fmri_like(
                scenario, seed,
            )?)),
        }
    }
}

// ---------------------------------------------------------------------------
// algorithms

fn default_max_iter() -> usize {
    512
}
fn default_tol() -> f64 {
    1e-6
}
fn default_lag() -> usize {
    8
}
fn default_max_local() -> usize {
    crate::maxent::DEFAULT_MAX_LOCAL
}
fn default_lambda() -> f64 {
    1e4
}
fn default_eps() -> f64 {
    1e-2
}
fn default_density() -> DensityModel {
    DensityModel::Emk
}
fn default_iva_method() -> IvaMethod {
    IvaMethod::Rafp
}
fn default_iva_iter() -> usize {
    64
}
fn default_iva_tol() -> f64 {
    1e-5
}

/// Declarative algorithm choice, serializable inside an experiment spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmSpec {
    IcaEmk {
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_lag")]
        lag: usize,
        #[serde(default = "default_max_local")]
        max_local: usize,
        #[serde(default)]
        parallel_rows: bool,
        #[serde(default = "default_density")]
        density: DensityModel,
    },
    SparseIca {
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_lag")]
        lag: usize,
        #[serde(default = "default_max_local")]
        max_local: usize,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_density")]
        density: DensityModel,
    },
    Iva {
        #[serde(default = "default_iva_method")]
        method: IvaMethod,
        #[serde(default = "default_iva_iter")]
        max_iter: usize,
        #[serde(default = "default_iva_tol")]
        tol: f64,
    },
    Fastica {},
}

fn make_ica_config(
    max_iter: usize,
    tol: f64,
    lag: usize,
    max_local: usize,
    parallel_rows: bool,
    density: DensityModel,
    seed: u64,
) -> IcaConfig {
    IcaConfig {
        max_iter,
        tol,
        history_lag: lag,
        step: StepRule::LineSearch,
        density,
        max_local,
        parallel_rows,
        seed,
        init: WInit::RandomOrthogonal,
    }
}

/// Demixing output of one trial: matrices mapping the raw observations to
/// source estimates (whitening folded in), one per dataset.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub demixing: Vec<DMatrix<f64>>,
    pub estimates: Vec<DMatrix<f64>>,
    pub states: Vec<DemixingState>,
}

/// Runs an algorithm spec on generated data. Observations are whitened
/// internally; the returned demixing matrices act on the raw observations.
pub fn run_algorithm(
    algorithm: &AlgorithmSpec,
    data: &GeneratedData,
    seed: u64,
) -> Result<TrialOutput> {
    match (algorithm, data) {
        (AlgorithmSpec::Iva { method, max_iter, tol }, GeneratedData::Stack(problems)) => {
            let mut whiteners = Vec::new();
            let mut zs = Vec::new();
            for p in problems {
                let w = whiten_reduce(&p.observations, p.observations.nrows())?;
                whiteners.push(w.whitener.clone());
                zs.push(w.z);
            }
            let stack = DatasetStack::new(zs)?;
            let cfg = IvaConfig {
                method: *method,
                max_iter: *max_iter,
                tol: *tol,
                seed,
                init: IvaInit::Identity,
                step: StepRule::LineSearch,
                parallel: false,
            };
            let state = run_iva_aggd(&stack, &cfg)?;
            let demixing: Vec<DMatrix<f64>> = state
                .w
                .iter()
                .zip(&whiteners)
                .map(|(w, wh)| w * wh)
                .collect();
            let estimates = demixing
                .iter()
                .zip(problems)
                .map(|(w, p)| w * &p.observations)
                .collect();
            Ok(TrialOutput {
                demixing,
                estimates,
                states: Vec::new(),
            })
        }
        (AlgorithmSpec::Iva { .. }, _) => {
            Err(Error::invalid("IVA requires a dataset-stack generator"))
        }
        (algo, GeneratedData::Single(problem)) => {
            let n = problem.sources.nrows();
            let w = whiten_reduce(&problem.observations, n)?;
            let (state, demix) = match algo {
                AlgorithmSpec::IcaEmk {
                    max_iter,
                    tol,
                    lag,
                    max_local,
                    parallel_rows,
                    density,
                } => {
                    let cfg = make_ica_config(
                        *max_iter,
                        *tol,
                        *lag,
                        *max_local,
                        *parallel_rows,
                        *density,
                        seed,
                    );
                    let state = run_ica_emk(&w.z, &cfg)?;
                    let demix = &state.w * &w.whitener;
                    (state, demix)
                }
                AlgorithmSpec::SparseIca {
                    max_iter,
                    tol,
                    lag,
                    max_local,
                    lambda,
                    eps,
                    density,
                } => {
                    let base =
                        make_ica_config(*max_iter, *tol, *lag, *max_local, false, *density, seed);
                    let cfg = SparseConfig::uniform(base, *lambda, *eps);
                    let state = run_sparse_ica(&w.z, &cfg)?;
                    let demix = &state.w * &w.whitener;
                    (state, demix)
                }
                AlgorithmSpec::Fastica {} => {
                    let (w0, converged) = init_fastica(&w.z, seed)?;
                    let demix = &w0 * &w.whitener;
                    let state = DemixingState {
                        w: w0,
                        cost_history: Vec::new(),
                        iterations: 0,
                        converged,
                        cost_parts: None,
                    };
                    (state, demix)
                }
                AlgorithmSpec::Iva { .. } => unreachable!(),
            };
            let estimates = &demix * &problem.observations;
            Ok(TrialOutput {
                demixing: vec![demix],
                estimates: vec![estimates],
                states: vec![state],
            })
        }
        (_, GeneratedData::Stack(_)) => Err(Error::invalid(
            "single-dataset algorithm cannot run on a dataset stack",
        )),
        (_, GeneratedData::Subjects(_)) => Err(Error::invalid(
            "per-subject data is driven by the repro/accuracy protocols",
        )),
    }
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Isr,
    IsrNormalized,
    IsiAvg,
    IsiJnt,
    /// Mean absolute correlation between true and aligned estimated
    /// sources.
    Corr,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Isr => "isr",
            MetricKind::IsrNormalized => "isr_normalized",
            MetricKind::IsiAvg => "isi_avg",
            MetricKind::IsiJnt => "isi_jnt",
            MetricKind::Corr => "corr",
        }
    }
}

fn compute_metrics(
    kinds: &[MetricKind],
    problems: &[MixingProblem],
    output: &TrialOutput,
) -> Result<BTreeMap<String, f64>> {
    let gs: Vec<DMatrix<f64>> = output
        .demixing
        .iter()
        .zip(problems)
        .map(|(w, p)| w * &p.mixing)
        .collect();
    let mut out = BTreeMap::new();
    for kind in kinds {
        let value = match kind {
            MetricKind::Isr => {
                let mut acc = 0.0;
                for g in &gs {
                    acc += metrics::isr(g)?;
                }
                acc / gs.len() as f64
            }
            MetricKind::IsrNormalized => {
                let mut acc = 0.0;
                for g in &gs {
                    acc += metrics::isr_normalized(g)?;
                }
                acc / gs.len() as f64
            }
            MetricKind::IsiAvg => metrics::isi_avg(&gs)?,
            MetricKind::IsiJnt => metrics::isi_jnt(&gs)?,
            MetricKind::Corr => {
                let mut acc = 0.0;
                for (est, p) in output.estimates.iter().zip(problems) {
                    let (_, corrs) = metrics::pair_correlation(&p.sources, est)?;
                    acc += corrs.iter().sum::<f64>() / corrs.len() as f64;
                }
                acc / problems.len() as f64
            }
        };
        out.insert(kind.name().to_string(), value);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// experiments

fn default_trials() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub generator: GeneratorSpec,
    pub algorithm: AlgorithmSpec,
    pub metrics: Vec<MetricKind>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub sweep: Option<Vec<SweepAxis>>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        if self.metrics.is_empty() {
            return Err(Error::invalid("need at least one metric"));
        }
        if let Some(axes) = &self.sweep {
            for axis in axes {
                if axis.values.is_empty() {
                    return Err(Error::invalid(format!("sweep axis '{}' is empty", axis.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub assignments: BTreeMap<String, serde_json::Value>,
    pub records: Vec<TrialRecord>,
    /// mean/std/min/max per metric over successful trials
    pub aggregates: BTreeMap<String, Aggregate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub toolkit_version: String,
    pub spec: ExperimentSpec,
    pub cells: Vec<CellResult>,
    /// fraction of paired trials where the first cell's metric is lower
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pairwise_frac_lower: BTreeMap<String, f64>,
    /// wall-clock info, quarantined so the numeric payload can be hashed
    /// without it
    pub timing: BTreeMap<String, f64>,
}

impl ExperimentResult {
    pub fn has_errors(&self) -> bool {
        self.cells
            .iter()
            .any(|c| c.records.iter().any(|r| r.error.is_some()))
    }
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a; stable across runs and platforms
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn cartesian(axes: &[SweepAxis]) -> Vec<Vec<(String, serde_json::Value)>> {
    let mut cells: Vec<Vec<(String, serde_json::Value)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for value in &axis.values {
                let mut c = cell.clone();
                c.push((axis.name.clone(), value.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

fn cell_key(assignments: &[(String, serde_json::Value)]) -> String {
    if assignments.is_empty() {
        return "default".to_string();
    }
    assignments
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Applies sweep assignments to the generator/algorithm specs by patching
/// the matching field names in their JSON form.
fn apply_assignments(
    spec: &ExperimentSpec,
    assignments: &[(String, serde_json::Value)],
) -> Result<(GeneratorSpec, AlgorithmSpec)> {
    let mut gen_value = serde_json::to_value(&spec.generator)?;
    let mut algo_value = serde_json::to_value(&spec.algorithm)?;
    for (name, value) in assignments {
        let mut found = false;
        for target in [&mut gen_value, &mut algo_value] {
            if let Some(map) = target.as_object_mut() {
                if map.contains_key(name) {
                    map.insert(name.clone(), value.clone());
                    found = true;
                }
            }
        }
        if !found {
            return Err(Error::invalid(format!(
                "sweep axis '{name}' matches no generator or algorithm field"
            )));
        }
    }
    Ok((
        serde_json::from_value(gen_value)?,
        serde_json::from_value(algo_value)?,
    ))
}

fn aggregate(records: &[TrialRecord]) -> BTreeMap<String, Aggregate> {
    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (k, v) in &r.metrics {
            by_metric.entry(k.clone()).or_default().push(*v);
        }
    }
    by_metric
        .into_iter()
        .map(|(k, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let agg = Aggregate {
                mean,
                std: var.sqrt(),
                min: values.iter().cloned().fold(f64::INFINITY, f64::min),
                max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                count: values.len(),
            };
            (k, agg)
        })
        .collect()
}

/// Runs every sweep cell × trial of an experiment. Trial errors are
/// recorded per record and do not abort the sweep. When `out_dir` is
/// given, writes `result.json` and per-cell CSV tables, and skips cells
/// already completed by a previous run in the same directory.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    spec.validate()?;
    let started = Instant::now();
    let axes = spec.sweep.clone().unwrap_or_default();
    let cells = cartesian(&axes);

    // resumability: reuse completed cells from a previous partial run
    let mut previous: BTreeMap<String, CellResult> = BTreeMap::new();
    if let Some(dir) = out_dir {
        let path = dir.join("result.json");
        if path.exists() {
            if let Ok(text) = std::fs::read_to_string(&path) {
                if let Ok(prev) = serde_json::from_str::<ExperimentResult>(&text) {
                    if prev.spec.master_seed == spec.master_seed {
                        for cell in prev.cells {
                            if cell.records.len() == spec.trials
                                && cell.records.iter().all(|r| r.error.is_none())
                            {
                                previous.insert(cell.key.clone(), cell);
                            }
                        }
                    }
                }
            }
        }
    }

    let cell_results: Vec<CellResult> = cells
        .iter()
        .map(|assignments| {
            let key = cell_key(assignments);
            if let Some(done) = previous.remove(&key) {
                return Ok(done);
            }
            let (generator, algorithm) = apply_assignments(spec, assignments)?;
            let key_hash = stable_hash(&key);
            let records: Vec<TrialRecord> = (0..spec.trials)
                .into_par_iter()
                .map(|trial| {
                    let seed = crate::seed::derive(spec.master_seed, &[key_hash, trial as u64]);
                    let outcome = (|| -> Result<BTreeMap<String, f64>> {
                        let data = generator.generate(seed)?;
                        let output = run_algorithm(&algorithm, &data, seed)?;
                        let problems: Vec<MixingProblem> = match data {
                            GeneratedData::Single(p) => vec![p],
                            GeneratedData::Stack(ps) => ps,
                            GeneratedData::Subjects(ps) => ps,
                        };
                        compute_metrics(&spec.metrics, &problems, &output)
                    })();
                    match outcome {
                        Ok(metrics) => TrialRecord {
                            trial,
                            seed,
                            metrics,
                            error: None,
                        },
                        Err(e) => TrialRecord {
                            trial,
                            seed,
                            metrics: BTreeMap::new(),
                            error: Some(e.to_string()),
                        },
                    }
                })
                .collect();
            Ok(CellResult {
                key,
                assignments: assignments.iter().cloned().collect(),
                aggregates: aggregate(&records),
                records,
            })
        })
        .collect::<Result<_>>()?;

    // pairwise per-trial comparisons across cells (paired by trial index)
    let mut pairwise = BTreeMap::new();
    if cell_results.len() >= 2 && cell_results.len() <= 8 {
        for a in &cell_results {
            for b in &cell_results {
                if a.key >= b.key {
                    continue;
                }
                for metric in spec.metrics.iter().map(|m| m.name()) {
                    let mut lower = 0usize;
                    let mut total = 0usize;
                    for (ra, rb) in a.records.iter().zip(&b.records) {
                        if let (Some(va), Some(vb)) = (ra.metrics.get(metric), rb.metrics.get(metric))
                        {
                            total += 1;
                            if va < vb {
                                lower += 1;
                            }
                        }
                    }
                    if total > 0 {
                        pairwise.insert(
                            format!("{} | {} | {metric}", a.key, b.key),
                            lower as f64 / total as f64,
                        );
                    }
                }
            }
        }
    }

    let mut timing = BTreeMap::new();
    timing.insert("wall_seconds".to_string(), started.elapsed().as_secs_f64());
    let result = ExperimentResult {
        name: spec.name.clone(),
        toolkit_version: crate::VERSION.to_string(),
        spec: spec.clone(),
        cells: cell_results,
        pairwise_frac_lower: pairwise,
        timing,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)?)?;
        let cells_dir = dir.join("cells");
        std::fs::create_dir_all(&cells_dir)?;
        for cell in &result.cells {
            let mut csv = String::new();
            let metric_names: Vec<&str> = spec.metrics.iter().map(|m| m.name()).collect();
            csv.push_str("trial,seed,");
            csv.push_str(&metric_names.join(","));
            csv.push_str(",error\n");
            for r in &cell.records {
                csv.push_str(&format!("{},{}", r.trial, r.seed));
                for m in &metric_names {
                    match r.metrics.get(*m) {
                        Some(v) => csv.push_str(&format!(",{v}")),
                        None => csv.push(','),
                    }
                }
                csv.push_str(&format!(",{}\n", r.error.clone().unwrap_or_default()));
            }
            let safe: String = cell
                .key
                .chars()
                .map(|c| if c.is_alphanumeric() || c == '=' || c == '-' || c == '.' { c } else { '_' })
                .collect();
            std::fs::write(cells_dir.join(format!("{safe}.csv")), csv)?;
        }
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// split-half reproducibility

/// Splits by interleaving rows: even-indexed rows (0, 2, ...) in the first
/// half, odd-indexed in the second.
pub fn split_half(x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = x.nrows();
    let first: Vec<usize> = (0..rows).step_by(2).collect();
    let second: Vec<usize> = (1..rows).step_by(2).collect();
    let take = |idx: &[usize]| {
        let mut m = DMatrix::zeros(idx.len(), x.ncols());
        for (to, &from) in idx.iter().enumerate() {
            m.set_row(to, &x.row(from));
        }
        m
    };
    (take(&first), take(&second))
}

/// Specification of the sparse-ICA surface protocols over a (λ, ε) grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub scenario: FmriScenario,
    pub lambda_grid: Vec<f64>,
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_density")]
    pub density: DensityModel,
    #[serde(default = "default_surface_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_surface_iter() -> usize {
    48
}

/// Default λ grid spanning the benchmark surfaces.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1.0, 1e2, 1e3, 1e4]
}

/// Default ε grid spanning the benchmark surfaces.
pub fn default_eps_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1, 0.5, 1.46, 5.0, 10.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceCell {
    pub lambda: f64,
    pub eps: f64,
    pub value: f64,
}

fn sparse_config(spec: &SurfaceSpec, lambda: f64, eps: f64, seed: u64) -> SparseConfig {
    SparseConfig::uniform(
        IcaConfig {
            max_iter: spec.max_iter,
            tol: 1e-6,
            history_lag: 8,
            step: StepRule::LineSearch,
            density: spec.density,
            max_local: crate::maxent::DEFAULT_MAX_LOCAL,
            parallel_rows: false,
            seed,
            init: WInit::RandomOrthogonal,
        },
        lambda,
        eps,
    )
}

/// Accuracy surface: mean aligned |corr| between the true spatial maps and
/// the sparse-ICA estimates, per (λ, ε) cell, averaged over subjects.
pub fn accuracy_surface(spec: &SurfaceSpec) -> Result<Vec<SurfaceCell>> {
    let subjects = gen_fmri_like(&spec.scenario, spec.master_seed)?;
    let n = spec.scenario.n_sources;
    // reduce each subject once; cells reuse the reduction
    let reduced: Vec<(crate::ica::Whitening, &MixingProblem)> = subjects
        .iter()
        .map(|p| Ok((whiten_reduce(&p.observations, n)?, p)))
        .collect::<Result<_>>()?;
    let grid: Vec<(f64, f64)> = spec
        .lambda_grid
        .iter()
        .flat_map(|&l| spec.eps_grid.iter().map(move |&e| (l, e)))
        .collect();
    grid.par_iter()
        .map(|&(lambda, eps)| {
            let mut acc = 0.0;
            for (subject, (w, p)) in reduced.iter().enumerate() {
                let seed = crate::seed::derive(
                    spec.master_seed,
                    &[0xacc, subject as u64, lambda.to_bits(), eps.to_bits()],
                );
                let cfg = sparse_config(spec, lambda, eps, seed);
                let state = run_sparse_ica(&w.z, &cfg)?;
                let est = &state.w * &w.z;
                let (_, corrs) = metrics::pair_correlation(&p.sources, &est)?;
                acc += corrs.iter().sum::<f64>() / corrs.len() as f64;
            }
            Ok(SurfaceCell {
                lambda,
                eps,
                value: acc / reduced.len() as f64,
            })
        })
        .collect()
}

/// Split-half reproducibility surface: per subject, run sparse ICA
/// independently on the interleaved halves of the observation matrix,
/// pair the two component sets, and average |corr| across subjects.
pub fn repro_protocol(spec: &SurfaceSpec) -> Result<Vec<SurfaceCell>> {
    let subjects = gen_fmri_like(&spec.scenario, spec.master_seed)?;
    let n = spec.scenario.n_sources;
    let halves: Vec<(crate::ica::Whitening, crate::ica::Whitening)> = subjects
        .iter()
        .map(|p| {
            // observations are timepoints × voxels here
            let x = &p.observations;
            let (x1, x2) = split_half(x);
            Ok((whiten_reduce(&x1, n)?, whiten_reduce(&x2, n)?))
        })
        .collect::<Result<_>>()?;
    let grid: Vec<(f64, f64)> = spec
        .lambda_grid
        .iter()
        .flat_map(|&l| spec.eps_grid.iter().map(move |&e| (l, e)))
        .collect();
    grid.par_iter()
        .map(|&(lambda, eps)| {
            let mut acc = 0.0;
            for (subject, (w1, w2)) in halves.iter().enumerate() {
                let run = |w: &crate::ica::Whitening, tag: u64| -> Result<DMatrix<f64>> {
                    let seed = crate::seed::derive(
                        spec.master_seed,
                        &[0x5e1f, subject as u64, tag, lambda.to_bits(), eps.to_bits()],
                    );
                    let cfg = sparse_config(spec, lambda, eps, seed);
                    let state = run_sparse_ica(&w.z, &cfg)?;
                    Ok(&state.w * &w.z)
                };
                let s1 = run(w1, 1)?;
                let s2 = run(w2, 2)?;
                let (_, corrs) = metrics::pair_correlation(&s1, &s2)?;
                acc += corrs.iter().sum::<f64>() / corrs.len() as f64;
            }
            Ok(SurfaceCell {
                lambda,
                eps,
                value: acc / halves.len() as f64,
            })
        })
        .collect()
}

/// Sparsity/independence ratio at the final iteration of a sparse-ICA run:
/// `r = |sparsity - total| / |independence - total|`, with an infinity
/// sentinel when the denominator vanishes (λ = 0).
pub fn ratio_diagnostic(half1: &DemixingState, half2: &DemixingState) -> Result<(f64, f64)> {
    let ratio = |state: &DemixingState| -> Result<f64> {
        let parts = state
            .cost_parts
            .as_ref()
            .ok_or_else(|| Error::invalid("run record has no cost decomposition"))?;
        let num = (parts.sparsity - parts.total).abs();
        let den = (parts.independence - parts.total).abs();
        if den == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(num / den)
    };
    Ok((ratio(half1)?, ratio(half2)?))
}

/// Writes a (λ, ε, value) surface as CSV.
pub fn write_surface_csv(path: &Path, cells: &[SurfaceCell]) -> Result<()> {
    let mut csv = String::from("lambda,eps,value\n");
    for c in cells {
        csv.push_str(&format!("{},{},{}\n", c.lambda, c.eps, c.value));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

pub fn surface_cell(cells: &[SurfaceCell], lambda: f64, eps: f64) -> Option<f64> {
    cells
        .iter()
        .find(|c| c.lambda == lambda && c.eps == eps)
        .map(|c| c.value)
}

// ---------------------------------------------------------------------------
// parallel speedup

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub n_sources: usize,
    pub seconds_sequential: f64,
    pub seconds_parallel: f64,
    pub speedup: f64,
    /// fraction of sequential time spent in the parallelizable row loop
    pub parallel_fraction: f64,
    /// Amdahl bound `1 / ((1-f) + f/s)` at the measured fraction
    pub amdahl_bound: f64,
    /// demixing matrices agree bit-for-bit across thread counts
    pub identical_results: bool,
}

/// Measures wall time of the Jacobi row schedule on one thread versus
/// `threads` threads at a fixed sweep count, for each source count.
pub fn measure_speedup(
    source_counts: &[usize],
    samples: usize,
    sweeps: usize,
    threads: usize,
    master_seed: u64,
) -> Result<Vec<SpeedupRow>> {
    let mut rows = Vec::new();
    for &n in source_counts {
        let generator = GeneratorSpec::GgdMixtureBank {
            n_sources: n,
            samples,
        };
        let data = generator.generate(crate::seed::derive(master_seed, &[n as u64]))?;
        let problem = match data {
            GeneratedData::Single(p) => p,
            _ => unreachable!(),
        };
        let w = whiten_reduce(&problem.observations, n)?;
        let cfg = IcaConfig {
            max_iter: sweeps,
            tol: 0.0, // fixed iteration count: the lag criterion never fires
            history_lag: sweeps + 1,
            step: StepRule::LineSearch,
            density: DensityModel::Emk,
            max_local: crate::maxent::DEFAULT_MAX_LOCAL,
            parallel_rows: true,
            seed: master_seed,
            init: WInit::RandomOrthogonal,
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
        let (seq_state, fraction) = single.install(|| run_ica_emk_profiled(&w.z, &cfg))?;
        let t0 = Instant::now();
        let seq_again = single.install(|| run_ica_emk(&w.z, &cfg))?;
        let seconds_sequential = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let par_state = multi.install(|| run_ica_emk(&w.z, &cfg))?;
        let seconds_parallel = t1.elapsed().as_secs_f64();
        let identical = seq_state.w == par_state.w && seq_again.w == par_state.w;
        let speedup = seconds_sequential / seconds_parallel;
        let amdahl_bound = 1.0 / ((1.0 - fraction) + fraction / threads as f64);
        rows.push(SpeedupRow {
            n_sources: n,
            seconds_sequential,
            seconds_parallel,
            speedup,
            parallel_fraction: fraction,
            amdahl_bound,
            identical_results: identical,
        });
    }
    Ok(rows)
}
