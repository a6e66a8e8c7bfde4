//! `bss` — command-line driver for the blind source separation toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bss_core::bench::{
    accuracy_surface, default_eps_grid, default_lambda_grid, measure_speedup, ratio_diagnostic,
    repro_protocol, run_experiment, write_surface_csv, ExperimentSpec, GeneratedData,
    GeneratorSpec, SurfaceSpec,
};
use bss_core::ica::{
    run_ica_emk, run_sparse_ica, whiten_reduce, DemixingState, DensityModel, IcaConfig,
    SparseConfig, StepRule, WInit,
};
use bss_core::io::{read_matrix, MatrixFormat};
use bss_core::iva::{run_iva_aggd, DatasetStack, IvaConfig, IvaInit, IvaMethod};
use bss_core::metrics;
use bss_core::mggd::{
    estimate_joint, estimate_scatter_fp_eps, estimate_scatter_mlfp, estimate_scatter_mlfs,
    estimate_scatter_rafp, nonexpansivity_probe, FitReport, JointOptions, ScatterMethod,
    ScatterOptions,
};

#[derive(Parser)]
#[command(
    name = "bss",
    about = "Blind source separation toolkit: flexible ICA, MGGD estimation, adaptive IVA, sparse ICA",
    version
)]
struct Cli {
    /// Cap the rayon worker count for parallel trials and row schedules.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data from a generator spec (JSON).
    Gen(GenArgs),
    /// Fit a maximum-entropy density to a sample file.
    FitDensity(FitDensityArgs),
    /// Estimate MGGD parameters from a sample matrix.
    FitMggd(FitMggdArgs),
    /// Emit the fixed-point non-expansivity difference surface.
    ProbeNonexpansive(ProbeArgs),
    /// Run ICA with the maximum-entropy kernel density (or fixed tanh).
    Ica(IcaArgs),
    /// Run sparsity-regularized ICA (three-stage pipeline).
    SparseIca(SparseIcaArgs),
    /// Run IVA with the adaptive MGGD source model across datasets.
    Iva(IvaArgs),
    /// Compute separation/sparsity metrics from matrix files.
    Score(ScoreArgs),
    /// Run a declarative experiment spec (sweeps, trials, CSV/JSON out).
    Bench(BenchArgs),
    /// Accuracy and split-half reproducibility surfaces over (λ, ε).
    Repro(ReproArgs),
    /// Measure parallel speedup of the row-decoupled ICA engine.
    Speedup(SpeedupArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Mat64,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => MatrixFormat::Csv,
            FormatArg::Mat64 => MatrixFormat::Mat64,
        }
    }
}

#[derive(Args)]
struct FitDensityArgs {
    /// Sample matrix (one row or one column, CSV or .mat64).
    #[arg(long)]
    input: PathBuf,
    /// Output JSON for the fitted density.
    #[arg(long)]
    output: PathBuf,
    /// Optional CSV of (x, pdf(x)) on the quadrature grid.
    #[arg(long)]
    grid_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    max_local: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mom,
    Mlfp,
    Mlfs,
    Rafp,
    FpEps,
}

#[derive(Args)]
struct FitMggdArgs {
    /// Sample matrix, K rows × T columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Fix the shape parameter instead of estimating it jointly.
    #[arg(long)]
    beta: Option<f64>,
    /// Perturbation weight for the fp-eps method.
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Output JSON (stdout when omitted).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Sample matrix, K rows × T columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    beta: f64,
    /// Grid as comma-separated values or lo:hi:count.
    #[arg(long, default_value = "0.1:0.9:9")]
    grid: String,
    /// Output CSV (sigma1, sigma2, difference).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Observation matrix, N rows × V columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "emk")]
    density: DensityArg,
    #[arg(long, default_value_t = 512)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// History lag of the cost-based stop criterion.
    #[arg(long, default_value_t = 8)]
    lag: usize,
    #[arg(long, default_value_t = false)]
    parallel_rows: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the internal whitening step.
    #[arg(long, default_value_t = false)]
    raw: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum DensityArg {
    Emk,
    Tanh,
}

impl From<DensityArg> for DensityModel {
    fn from(d: DensityArg) -> Self {
        match d {
            DensityArg::Emk => DensityModel::Emk,
            DensityArg::Tanh => DensityModel::FixedTanh,
        }
    }
}

#[derive(Args)]
struct IcaArgs {
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct SparseIcaArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Sparsity weight λ (shared across sources).
    #[arg(long, default_value_t = 1e4)]
    lambda: f64,
    /// Smoothing parameter ε of the ℓ¹ surrogate.
    #[arg(long, default_value_t = 1e-2)]
    eps: f64,
}

#[derive(Args)]
struct IvaArgs {
    /// Dataset files (one matrix per dataset, equal shapes).
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "rafp")]
    method: IvaMethodArg,
    #[arg(long, default_value_t = 64)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum IvaMethodArg {
    Mom,
    Mlfs,
    Rafp,
}

impl From<IvaMethodArg> for IvaMethod {
    fn from(m: IvaMethodArg) -> Self {
        match m {
            IvaMethodArg::Mom => IvaMethod::Mom,
            IvaMethodArg::Mlfs => IvaMethod::Mlfs,
            IvaMethodArg::Rafp => IvaMethod::Rafp,
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[command(subcommand)]
    metric: ScoreMetric,
}

#[derive(Subcommand)]
enum ScoreMetric {
    /// ISI of a global matrix G = W·A.
    Isi {
        #[arg(long)]
        g: PathBuf,
    },
    /// Average ISI over several global matrices.
    IsiAvg {
        #[arg(long, num_args = 1.., required = true)]
        g: Vec<PathBuf>,
    },
    /// Joint ISI over several global matrices.
    IsiJnt {
        #[arg(long, num_args = 1.., required = true)]
        g: Vec<PathBuf>,
    },
    /// Average interference-to-source ratio of a global matrix.
    Isr {
        #[arg(long)]
        g: PathBuf,
        #[arg(long, default_value_t = false)]
        normalized: bool,
    },
    /// Gini sparsity index of each row of a matrix.
    Gini {
        #[arg(long)]
        input: PathBuf,
    },
    /// Aligned absolute correlations between true and estimated sources.
    Corr {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        est: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment spec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReproArgs {
    /// Surface spec JSON (scenario, λ/ε grids, engine knobs).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the ratio diagnostic sweep.
    #[arg(long, default_value_t = false)]
    no_ratios: bool,
}

#[derive(Args)]
struct SpeedupArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated source counts.
    #[arg(long, default_value = "2,4,8,16,32")]
    sources: String,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Fixed sweep count per run.
    #[arg(long, default_value_t = 8)]
    sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("warning: global thread pool already initialized");
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::FitDensity(args) => cmd_fit_density(args),
        Command::FitMggd(args) => cmd_fit_mggd(args),
        Command::ProbeNonexpansive(args) => cmd_probe(args),
        Command::Ica(args) => cmd_ica(args),
        Command::SparseIca(args) => cmd_sparse_ica(args),
        Command::Iva(args) => cmd_iva(args),
        Command::Score(args) => cmd_score(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Repro(args) => cmd_repro(args),
        Command::Speedup(args) => cmd_speedup(args),
    }
}

fn write_problem(
    dir: &Path,
    prefix: &str,
    problem: &bss_core::sources::MixingProblem,
    format: MatrixFormat,
) -> Result<Vec<String>> {
    let ext = format.extension();
    let mut files = Vec::new();
    for (name, matrix) in [
        ("sources", &problem.sources),
        ("mixing", &problem.mixing),
        ("observations", &problem.observations),
    ] {
        let file = format!("{prefix}{name}.{ext}");
        format.write(dir.join(&file), matrix)?;
        files.push(file);
    }
    Ok(files)
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: GeneratorSpec = serde_json::from_str(&text).context("parsing generator spec")?;
    std::fs::create_dir_all(&args.out)?;
    let format: MatrixFormat = args.format.into();
    let data = spec.generate(args.seed)?;
    let mut files = Vec::new();
    let mut noise = Vec::new();
    match &data {
        GeneratedData::Single(p) => {
            files.extend(write_problem(&args.out, "", p, format)?);
            noise.push(p.noise.clone());
        }
        GeneratedData::Stack(ps) => {
            for (k, p) in ps.iter().enumerate() {
                files.extend(write_problem(&args.out, &format!("dataset{k}_"), p, format)?);
                noise.push(p.noise.clone());
            }
        }
        GeneratedData::Subjects(ps) => {
            for (k, p) in ps.iter().enumerate() {
                files.extend(write_problem(&args.out, &format!("subject{k}_"), p, format)?);
                noise.push(p.noise.clone());
            }
        }
    }
    let meta = serde_json::json!({
        "generator": spec,
        "seed": args.seed,
        "format": format,
        "files": files,
        "noise": noise,
        "toolkit_version": bss_core::VERSION,
    });
    std::fs::write(args.out.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("wrote {} files to {}", files.len() + 1, args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit_density(args: FitDensityArgs) -> Result<ExitCode> {
    let m = read_matrix(&args.input)?;
    let samples: Vec<f64> = if m.nrows() == 1 || m.ncols() == 1 {
        m.iter().copied().collect()
    } else {
        bail!("expected a vector-shaped sample file, got {}x{}", m.nrows(), m.ncols());
    };
    let density = bss_core::maxent::fit_emk(&samples, args.max_local)?;
    std::fs::write(&args.output, serde_json::to_string_pretty(&density)?)?;
    if let Some(grid_path) = &args.grid_csv {
        let mut csv = String::from("x,pdf\n");
        for x in density.grid() {
            csv.push_str(&format!("{x},{}\n", density.pdf(x)));
        }
        std::fs::write(grid_path, csv)?;
    }
    println!(
        "fitted {} measuring functions, entropy {:.6}",
        density.functions.len(),
        density.entropy()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit_mggd(args: FitMggdArgs) -> Result<ExitCode> {
    let data = read_matrix(&args.input)?;
    let opts = ScatterOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        ..Default::default()
    };
    let report: FitReport = match (args.method, args.beta) {
        (MethodArg::Mom, _) => bss_core::mggd::estimate_mom(&data)?,
        (MethodArg::Mlfp, Some(beta)) => estimate_scatter_mlfp(&data, beta, &opts)?,
        (MethodArg::Mlfs, Some(beta)) => estimate_scatter_mlfs(&data, beta, &opts)?,
        (MethodArg::Rafp, Some(beta)) => estimate_scatter_rafp(&data, beta, &opts)?,
        (MethodArg::FpEps, Some(beta)) => estimate_scatter_fp_eps(&data, beta, args.eps, &opts)?,
        (method, None) => {
            let joint = JointOptions {
                tol: args.tol,
                max_iter: args.max_iter,
                ..Default::default()
            };
            let method = match method {
                MethodArg::Mlfp => ScatterMethod::Mlfp,
                MethodArg::Mlfs => ScatterMethod::Mlfs,
                MethodArg::Rafp => ScatterMethod::Rafp,
                MethodArg::FpEps => ScatterMethod::FpEps(args.eps),
                MethodArg::Mom => unreachable!(),
            };
            estimate_joint(&data, method, &joint)?
        }
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    if let Some((lo, rest)) = text.split_once(':') {
        let (hi, count) = rest
            .split_once(':')
            .context("grid range must be lo:hi:count")?;
        let lo: f64 = lo.parse()?;
        let hi: f64 = hi.parse()?;
        let count: usize = count.parse()?;
        if count < 2 {
            bail!("grid needs at least 2 points");
        }
        Ok((0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect())
    } else {
        text.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(Into::into))
            .collect()
    }
}

fn cmd_probe(args: ProbeArgs) -> Result<ExitCode> {
    let data = read_matrix(&args.input)?;
    let grid = parse_grid(&args.grid)?;
    let table = nonexpansivity_probe(&data, args.beta, &grid)?;
    let mut csv = String::from("sigma1,sigma2,difference\n");
    for (s1, s2, diff) in table {
        csv.push_str(&format!("{s1},{s2},{diff}\n"));
    }
    std::fs::write(&args.out, csv)?;
    Ok(ExitCode::SUCCESS)
}

struct EngineOutput {
    state: DemixingState,
    demixing: nalgebra::DMatrix<f64>,
    estimates: nalgebra::DMatrix<f64>,
    wall_seconds: f64,
}

fn run_engine(
    engine: &EngineArgs,
    sparse: Option<(f64, f64)>,
) -> Result<EngineOutput> {
    let x = read_matrix(&engine.input)?;
    let n = x.nrows();
    let start = Instant::now();
    let (z, whitener) = if engine.raw {
        (x.clone(), nalgebra::DMatrix::identity(n, n))
    } else {
        let w = whiten_reduce(&x, n)?;
        (w.z, w.whitener)
    };
    let cfg = IcaConfig {
        max_iter: engine.max_iter,
        tol: engine.tol,
        history_lag: engine.lag,
        step: StepRule::LineSearch,
        density: engine.density.into(),
        max_local: bss_core::maxent::DEFAULT_MAX_LOCAL,
        parallel_rows: engine.parallel_rows,
        seed: engine.seed,
        init: WInit::RandomOrthogonal,
    };
    let state = match sparse {
        None => run_ica_emk(&z, &cfg)?,
        Some((lambda, eps)) => run_sparse_ica(&z, &SparseConfig::uniform(cfg, lambda, eps))?,
    };
    let demixing = &state.w * &whitener;
    let estimates = &demixing * &x;
    Ok(EngineOutput {
        state,
        demixing,
        estimates,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_engine_output(out: &Path, format: MatrixFormat, result: &EngineOutput) -> Result<()> {
    std::fs::create_dir_all(out)?;
    format.write(
        out.join(format!("demixing.{}", format.extension())),
        &result.demixing,
    )?;
    format.write(
        out.join(format!("sources_est.{}", format.extension())),
        &result.estimates,
    )?;
    let record = serde_json::json!({
        "iterations": result.state.iterations,
        "converged": result.state.converged,
        "cost_history": result.state.cost_history,
        "cost_parts": result.state.cost_parts,
        "toolkit_version": bss_core::VERSION,
        "timing": { "wall_seconds": result.wall_seconds },
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn cmd_ica(args: IcaArgs) -> Result<ExitCode> {
    let result = run_engine(&args.engine, None)?;
    write_engine_output(&args.engine.out, args.engine.format.into(), &result)?;
    println!(
        "{} sweeps, converged = {}",
        result.state.iterations, result.state.converged
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sparse_ica(args: SparseIcaArgs) -> Result<ExitCode> {
    let result = run_engine(&args.engine, Some((args.lambda, args.eps)))?;
    write_engine_output(&args.engine.out, args.engine.format.into(), &result)?;
    println!(
        "{} sweeps, converged = {}",
        result.state.iterations, result.state.converged
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_iva(args: IvaArgs) -> Result<ExitCode> {
    let mut zs = Vec::new();
    let mut whiteners = Vec::new();
    for path in &args.datasets {
        let x = read_matrix(path)?;
        let w = whiten_reduce(&x, x.nrows())?;
        zs.push(w.z);
        whiteners.push(w.whitener);
    }
    let stack = DatasetStack::new(zs)?;
    let cfg = IvaConfig {
        method: args.method.into(),
        max_iter: args.max_iter,
        tol: args.tol,
        seed: args.seed,
        init: IvaInit::Identity,
        step: StepRule::LineSearch,
        parallel: false,
    };
    let start = Instant::now();
    let state = run_iva_aggd(&stack, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let format: MatrixFormat = args.format.into();
    for (k, (w, wh)) in state.w.iter().zip(&whiteners).enumerate() {
        let total = w * wh;
        format.write(
            args.out
                .join(format!("demixing{k}.{}", format.extension())),
            &total,
        )?;
    }
    let record = serde_json::json!({
        "scv_params": state.scv_params,
        "cost_history": state.cost_history,
        "iterations": state.iterations,
        "converged": state.converged,
        "mom_fallbacks": state.mom_fallbacks,
        "toolkit_version": bss_core::VERSION,
        "timing": { "wall_seconds": start.elapsed().as_secs_f64() },
    });
    std::fs::write(args.out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    println!(
        "{} iterations, converged = {}",
        state.iterations, state.converged
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_score(args: ScoreArgs) -> Result<ExitCode> {
    let value = match args.metric {
        ScoreMetric::Isi { g } => {
            serde_json::json!({ "isi": metrics::isi(&read_matrix(&g)?)? })
        }
        ScoreMetric::IsiAvg { g } => {
            let gs: Vec<_> = g.iter().map(read_matrix).collect::<bss_core::Result<_>>()?;
            serde_json::json!({ "isi_avg": metrics::isi_avg(&gs)? })
        }
        ScoreMetric::IsiJnt { g } => {
            let gs: Vec<_> = g.iter().map(read_matrix).collect::<bss_core::Result<_>>()?;
            serde_json::json!({ "isi_jnt": metrics::isi_jnt(&gs)? })
        }
        ScoreMetric::Isr { g, normalized } => {
            let g = read_matrix(&g)?;
            if normalized {
                serde_json::json!({ "isr_normalized": metrics::isr_normalized(&g)? })
            } else {
                serde_json::json!({ "isr": metrics::isr(&g)? })
            }
        }
        ScoreMetric::Gini { input } => {
            let m = read_matrix(&input)?;
            let values: Vec<f64> = (0..m.nrows())
                .map(|i| {
                    let row: Vec<f64> = m.row(i).iter().copied().collect();
                    metrics::gini(&row)
                })
                .collect::<bss_core::Result<_>>()?;
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            serde_json::json!({ "gini": values, "mean": mean })
        }
        ScoreMetric::Corr { truth, est } => {
            let s_true = read_matrix(&truth)?;
            let s_est = read_matrix(&est)?;
            let (perm, corrs) = metrics::pair_correlation(&s_true, &s_est)?;
            let mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
            serde_json::json!({ "permutation": perm, "corr": corrs, "mean": mean })
        }
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: ExperimentSpec = serde_json::from_str(&text).context("parsing experiment spec")?;
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    let result = run_experiment(&spec, Some(&args.out))?;
    let errors = result
        .cells
        .iter()
        .flat_map(|c| c.records.iter())
        .filter(|r| r.error.is_some())
        .count();
    println!(
        "{} cells, {} trials each, {errors} failed trials -> {}",
        result.cells.len(),
        spec.trials,
        args.out.display()
    );
    if result.has_errors() {
        // partial failure: sweep completed but some trials errored
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_repro(args: ReproArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SurfaceSpec = serde_json::from_str(&text).context("parsing surface spec")?;
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    if spec.lambda_grid.is_empty() {
        spec.lambda_grid = default_lambda_grid();
    }
    if spec.eps_grid.is_empty() {
        spec.eps_grid = default_eps_grid();
    }
    let surfaces = args.out.join("surfaces");
    std::fs::create_dir_all(&surfaces)?;
    let accuracy = accuracy_surface(&spec)?;
    write_surface_csv(&surfaces.join("accuracy.csv"), &accuracy)?;
    let reproducibility = repro_protocol(&spec)?;
    write_surface_csv(&surfaces.join("reproducibility.csv"), &reproducibility)?;
    let mut summary = serde_json::json!({
        "spec": spec,
        "accuracy": accuracy,
        "reproducibility": reproducibility,
        "toolkit_version": bss_core::VERSION,
    });
    if !args.no_ratios {
        // sparsity/independence ratios on the two halves of subject 0 at
        // the working-point epsilon
        let eps = 1.46;
        let subjects = bss_core::sources::gen_fmri_like(&spec.scenario, spec.master_seed)?;
        let (x1, x2) = bss_core::bench::split_half(&subjects[0].observations);
        let n = spec.scenario.n_sources;
        let w1 = whiten_reduce(&x1, n)?;
        let w2 = whiten_reduce(&x2, n)?;
        let mut rows = Vec::new();
        for &lambda in &spec.lambda_grid {
            let cfg = |seed| {
                SparseConfig::uniform(
                    IcaConfig {
                        max_iter: spec.max_iter,
                        tol: 1e-6,
                        history_lag: 8,
                        step: StepRule::LineSearch,
                        density: spec.density,
                        max_local: bss_core::maxent::DEFAULT_MAX_LOCAL,
                        parallel_rows: false,
                        seed,
                        init: WInit::RandomOrthogonal,
                    },
                    lambda,
                    eps,
                )
            };
            let s1 = run_sparse_ica(&w1.z, &cfg(1))?;
            let s2 = run_sparse_ica(&w2.z, &cfg(2))?;
            let (r1, r2) = ratio_diagnostic(&s1, &s2)?;
            rows.push((lambda, r1, r2));
        }
        let mut csv = String::from("lambda,r1,r2\n");
        for (lambda, r1, r2) in &rows {
            csv.push_str(&format!("{lambda},{r1},{r2}\n"));
        }
        std::fs::write(args.out.join("ratios.csv"), csv)?;
        summary["ratios"] = serde_json::json!(rows
            .iter()
            .map(|(l, r1, r2)| serde_json::json!({ "lambda": l, "r1": r1, "r2": r2 }))
            .collect::<Vec<_>>());
    }
    std::fs::write(
        args.out.join("repro.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("surfaces written to {}", surfaces.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_speedup(args: SpeedupArgs) -> Result<ExitCode> {
    let sources: Vec<usize> = args
        .sources
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let threads = rayon::current_num_threads();
    let rows = measure_speedup(&sources, args.samples, args.sweeps, threads, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from(
        "n_sources,seconds_sequential,seconds_parallel,speedup,parallel_fraction,amdahl_bound,identical_results\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.n_sources,
            r.seconds_sequential,
            r.seconds_parallel,
            r.speedup,
            r.parallel_fraction,
            r.amdahl_bound,
            r.identical_results
        ));
    }
    std::fs::write(args.out.join("speedup.csv"), csv)?;
    std::fs::write(
        args.out.join("speedup.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "threads": threads,
            "rows": rows,
            "toolkit_version": bss_core::VERSION,
        }))?,
    )?;
    for r in &rows {
        println!(
            "N={:>3}: speedup {:.2} (bound {:.2}, f={:.3}, identical={})",
            r.n_sources, r.speedup, r.amdahl_bound, r.parallel_fraction, r.identical_results
        );
    }
    Ok(ExitCode::SUCCESS)
}
