//! Multivariate generalized Gaussian density evaluation and parameter
//! estimation.
//!
//! The scatter estimators iterate on the maximum-likelihood scatter
//! equation; they differ in how the next iterate is formed: plain fixed
//! point (ML-FP), ε-perturbed fixed point, Fisher scoring (ML-FS), and the
//! Riemannian-averaged fixed point (RA-FP) that stays accurate for large
//! shape parameters. Shape and scale have dedicated estimators, and
//! `estimate_joint` alternates scatter and shape steps from a
//! method-of-moments start.
//!
//! Two algebraically equivalent forms of the fixed-point map appear here.
//! `fp_map` is the scale-profiled form (weights `K u^{β-1} / Σ_j u_j^β`);
//! it is degree-1 homogeneous, so it acts only on the shape of the scatter
//! and leaves the overall scale free. `fp_map_ml` is the same ML equation
//! in the unit-scale gauge (`(β/T) Σ_i u_i^{β-1} y_i y_i'`), whose
//! iteration also drives the scale: linearized at the fixed point the
//! scale error obeys `log c ← (1-β) log c`, stable only for `β < 2`. The
//! iterative estimators run on `fp_map_ml` — its convergence (one step at
//! `β = 1`, oscillation at `β = 2`, blow-up beyond) is exactly the
//! behavior the averaging of RA-FP repairs.
//!
//! Scale gauge: `estimate_mom` and `estimate_joint` return scatters
//! normalized to `trace = K` with the scale folded into `m`; the fixed-β
//! scatter estimators return the raw terminal iterate, which at
//! convergence sits at the gauge where `m = 1`.

pub mod spd;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
pub use spd::{riem_average, riem_distance, strong_convexity_check, SpdMatrix};

/// Parameters of a zero-mean MGGD: scatter `Σ`, shape `β`, scale `m`.
///
/// `β = 1` is the multivariate Gaussian (with covariance `m·Σ`); `β < 1`
/// gives peakier, heavier-tailed marginals and `β > 1` lighter tails.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MggdParams {
    pub scatter: SpdMatrix,
    pub shape: f64,
    pub scale: f64,
}

impl MggdParams {
    pub fn new(scatter: SpdMatrix, shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::invalid(format!("shape must be positive, got {shape}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        Ok(MggdParams { scatter, shape, scale })
    }

    pub fn dim(&self) -> usize {
        self.scatter.dim()
    }
}

/// Per-iteration diagnostics: Riemannian step length and profile
/// log-likelihood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: f64,
    pub log_lik: f64,
}

/// Outcome of a scatter or joint fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub params: MggdParams,
    pub iterations: usize,
    /// Riemannian distance between the last two iterates.
    pub final_step: f64,
    pub converged: bool,
    pub trace: Option<Vec<TracePoint>>,
    pub warning: Option<String>,
}

/// Initial scatter for the iterative estimators.
#[derive(Debug, Clone, Default)]
pub enum ScatterInit {
    #[default]
    Mom,
    Identity,
    Given(SpdMatrix),
}

#[derive(Debug, Clone)]
pub struct ScatterOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub init: ScatterInit,
    pub trace: bool,
}

impl Default for ScatterOptions {
    fn default() -> Self {
        ScatterOptions {
            tol: 1e-6,
            max_iter: 500,
            init: ScatterInit::Mom,
            trace: false,
        }
    }
}

/// Scatter update rule used by `estimate_joint` and the IVA engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterMethod {
    Mom,
    Mlfp,
    Mlfs,
    Rafp,
    FpEps(f64),
}

fn validate_data(data: &DMatrix<f64>) -> Result<(usize, usize)> {
    let (k, t) = (data.nrows(), data.ncols());
    if t <= k {
        return Err(Error::invalid(format!(
            "need more samples than dimensions: K={k}, T={t}"
        )));
    }
    Ok((k, t))
}

/// Log of the MGGD normalizing constant for dimension `k` and shape `beta`.
fn log_norm_const(k: usize, beta: f64) -> f64 {
    let kf = k as f64;
    beta.ln() + ln_gamma(kf / 2.0)
        - (kf / 2.0) * std::f64::consts::PI.ln()
        - ln_gamma(kf / (2.0 * beta))
        - (kf / (2.0 * beta)) * std::f64::consts::LN_2
}

/// Log-density of a zero-mean MGGD, evaluated with log-gamma for stability.
pub fn mggd_logpdf(y: &DVector<f64>, params: &MggdParams) -> Result<f64> {
    let k = params.dim();
    if y.len() != k {
        return Err(Error::Dimension(format!(
            "point has dimension {}, scatter is {k}x{k}",
            y.len()
        )));
    }
    let kf = k as f64;
    let sinv = params.scatter.inverse();
    let u = y.dot(&(sinv.as_matrix() * y));
    Ok(log_norm_const(k, params.shape) - (kf / 2.0) * params.scale.ln()
        - 0.5 * params.scatter.log_det()
        - u.powf(params.shape) / (2.0 * params.scale.powf(params.shape)))
}

/// Differential entropy of the MGGD with the expectation term plugged in
/// from a sample (`u_mean_beta` is the sample mean of `u^β`).
pub fn mggd_entropy_plugin(params: &MggdParams, u_mean_beta: f64) -> f64 {
    let kf = params.dim() as f64;
    -log_norm_const(params.dim(), params.shape)
        + (kf / 2.0) * params.scale.ln()
        + 0.5 * params.scatter.log_det()
        + u_mean_beta / (2.0 * params.scale.powf(params.shape))
}

/// Squared Mahalanobis radii `u_i = y_i' Σ^{-1} y_i` for the columns of
/// `data`.
fn mahalanobis_sq(sigma: &SpdMatrix, data: &DMatrix<f64>) -> Result<Vec<f64>> {
    let sinv = sigma.inverse();
    let siy = sinv.as_matrix() * data;
    let t = data.ncols();
    let mut u = Vec::with_capacity(t);
    for i in 0..t {
        let ui = data.column(i).dot(&siy.column(i));
        if !(ui > 0.0) {
            return Err(Error::degenerate(format!(
                "degenerate sample: zero Mahalanobis radius at column {i}"
            )));
        }
        u.push(ui);
    }
    Ok(u)
}

/// One application of the scatter fixed-point map
/// `f(Σ) = Σ_i [K / (u_i + u_i^{1-β} Σ_{j≠i} u_j^β)] y_i y_i'`.
pub fn fp_map(sigma: &SpdMatrix, data: &DMatrix<f64>, beta: f64) -> Result<SpdMatrix> {
    let (k, t) = validate_data(data)?;
    if sigma.dim() != k {
        return Err(Error::Dimension(format!(
            "scatter is {}x{} but data has {k} rows",
            sigma.dim(),
            sigma.dim()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let u = mahalanobis_sq(sigma, data)?;
    let ub: Vec<f64> = u.iter().map(|ui| ui.powf(beta)).collect();
    let s_beta: f64 = ub.iter().sum();
    let mut out = DMatrix::zeros(k, k);
    for i in 0..t {
        let denom = u[i] + u[i].powf(1.0 - beta) * (s_beta - ub[i]);
        let w = k as f64 / denom;
        let y = data.column(i);
        for a in 0..k {
            let wya = w * y[a];
            for b in a..k {
                out[(a, b)] += wya * y[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    SpdMatrix::from_nearly_symmetric(out, 1e-9)
}

/// The ML scatter equation in the unit-scale gauge:
/// `f(Σ) = (β/T) Σ_i u_i^{β-1} y_i y_i'`. Same stationary rays as
/// `fp_map`, but the map also evolves the scale of the iterate (unstable
/// for `β ≥ 2`), which is the behavior the iterative estimators study.
pub fn fp_map_ml(sigma: &SpdMatrix, data: &DMatrix<f64>, beta: f64) -> Result<SpdMatrix> {
    let (k, t) = validate_data(data)?;
    if sigma.dim() != k {
        return Err(Error::Dimension(format!(
            "scatter is {}x{} but data has {k} rows",
            sigma.dim(),
            sigma.dim()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let u = mahalanobis_sq(sigma, data)?;
    let mut out = DMatrix::zeros(k, k);
    for i in 0..t {
        let w = beta / t as f64 * u[i].powf(beta - 1.0);
        if !w.is_finite() {
            return Err(Error::Numerical(format!(
                "fixed-point weight overflow at column {i} (u = {:.3e})",
                u[i]
            )));
        }
        let y = data.column(i);
        for a in 0..k {
            let wya = w * y[a];
            for b in a..k {
                out[(a, b)] += wya * y[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    SpdMatrix::from_nearly_symmetric(out, 1e-9)
}

/// Profile log-likelihood `log F(Σ) = -log|Σ| - (K/β) log Σ_i u_i^β`,
/// a monotone transform of the likelihood with `m` profiled out.
fn profile_log_lik(sigma: &SpdMatrix, data: &DMatrix<f64>, beta: f64) -> Result<f64> {
    let k = data.nrows() as f64;
    let u = mahalanobis_sq(sigma, data)?;
    let s: f64 = u.iter().map(|ui| ui.powf(beta)).sum();
    Ok(-sigma.log_det() - (k / beta) * s.ln())
}

fn initial_scatter(data: &DMatrix<f64>, init: &ScatterInit) -> Result<SpdMatrix> {
    match init {
        ScatterInit::Identity => Ok(SpdMatrix::identity(data.nrows())),
        ScatterInit::Mom => sample_scatter(data),
        ScatterInit::Given(s) => Ok(s.clone()),
    }
}

/// Sample covariance of the columns (zero-mean model), trace-normalized.
fn sample_scatter(data: &DMatrix<f64>) -> Result<SpdMatrix> {
    let (k, t) = validate_data(data)?;
    let cov = data * data.transpose() / t as f64;
    let spd = SpdMatrix::from_nearly_symmetric(cov, 1e-9).map_err(|_| {
        Error::degenerate(format!("sample covariance is singular (K={k}, T={t})"))
    })?;
    Ok(spd.normalized_trace())
}

enum FpUpdate {
    Plain,
    Rafp,
    Eps(f64),
}

fn finish_report(
    data: &DMatrix<f64>,
    sigma: SpdMatrix,
    beta: f64,
    iterations: usize,
    final_step: f64,
    converged: bool,
    trace: Option<Vec<TracePoint>>,
    warning: Option<String>,
) -> Result<FitReport> {
    // raw terminal iterate; at convergence its scale is the m = 1 gauge
    let mut warning = warning;
    let m = match estimate_m(data, &sigma, beta) {
        Ok(m) if m.is_finite() && m > 0.0 => m,
        _ => {
            // scale estimate overflows on blown-up iterates; the report is
            // already marked diverged, keep a placeholder scale
            if warning.is_none() {
                warning = Some("scale estimate overflowed on diverged scatter".into());
            }
            1.0
        }
    };
    Ok(FitReport {
        params: MggdParams::new(sigma, beta, m)?,
        iterations,
        final_step,
        converged,
        trace,
        warning,
    })
}

fn run_fp_family(
    data: &DMatrix<f64>,
    beta: f64,
    opts: &ScatterOptions,
    update: FpUpdate,
) -> Result<FitReport> {
    validate_data(data)?;
    let mut sigma = initial_scatter(data, &opts.init)?;
    let mut trace = opts.trace.then(Vec::new);
    let mut prev_step = f64::INFINITY;
    let mut grow_streak = 0usize;
    let mut converged = false;
    let mut warning = None;
    let mut step = f64::NAN;
    let mut iterations = 0;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        // a numerically exploded iterate counts as divergence, not a hard
        // error: report the last usable scatter with converged = false
        let next = (|| -> Result<SpdMatrix> {
            let f = fp_map_ml(&sigma, data, beta)?;
            match update {
                FpUpdate::Plain => Ok(f),
                // t_k = 1/(k+1) with k starting at 0: the first step is a
                // full fixed-point step.
                FpUpdate::Rafp => riem_average(&sigma, &f, 1.0 / iter as f64),
                FpUpdate::Eps(eps) => {
                    let k = sigma.dim();
                    let blended =
                        f.as_matrix() * (1.0 - eps) + DMatrix::<f64>::identity(k, k) * eps;
                    SpdMatrix::from_nearly_symmetric(blended, 1e-9)
                }
            }
        })();
        let next = match next {
            Ok(next) => next,
            Err(e) => {
                warning = Some(format!("iterates diverged to a degenerate matrix: {e}"));
                break;
            }
        };
        step = riem_distance(&sigma, &next)?;
        if let Some(tr) = trace.as_mut() {
            tr.push(TracePoint {
                step,
                log_lik: profile_log_lik(&next, data, beta)?,
            });
        }
        sigma = next;
        if step < opts.tol {
            converged = true;
            break;
        }
        if step > prev_step {
            grow_streak += 1;
            if grow_streak >= 10 {
                warning = Some(format!(
                    "iterates diverging: step grew for {grow_streak} consecutive iterations (last {step:.3e})"
                ));
                break;
            }
        } else {
            grow_streak = 0;
        }
        prev_step = step;
    }
    finish_report(data, sigma, beta, iterations, step, converged, trace, warning)
}

/// Plain maximum-likelihood fixed point `Σ_{k+1} = f(Σ_k)`.
pub fn estimate_scatter_mlfp(
    data: &DMatrix<f64>,
    beta: f64,
    opts: &ScatterOptions,
) -> Result<FitReport> {
    run_fp_family(data, beta, opts, FpUpdate::Plain)
}

/// Riemannian-averaged fixed point `Σ_{k+1} = Σ_k #_{1/(k+1)} f(Σ_k)`.
pub fn estimate_scatter_rafp(
    data: &DMatrix<f64>,
    beta: f64,
    opts: &ScatterOptions,
) -> Result<FitReport> {
    run_fp_family(data, beta, opts, FpUpdate::Rafp)
}

/// ε-perturbed fixed point `Σ_{k+1} = (1-ε) f(Σ_k) + ε I`.
pub fn estimate_scatter_fp_eps(
    data: &DMatrix<f64>,
    beta: f64,
    eps: f64,
    opts: &ScatterOptions,
) -> Result<FitReport> {
    if !(eps >= 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("eps must be in [0,1], got {eps}")));
    }
    run_fp_family(data, beta, opts, FpUpdate::Eps(eps))
}

/// Fisher information matrix of Eqs.-style closed form: diagonal entries
/// `((3K+6β)/(K+2) - 1)/4`, off-diagonal `((K+2β)/(K+2) - 1)/4`.
pub fn fisher_matrix(k: usize, beta: f64) -> DMatrix<f64> {
    let kf = k as f64;
    let diag = 0.25 * ((3.0 * kf + 6.0 * beta) / (kf + 2.0) - 1.0);
    let off = 0.25 * ((kf + 2.0 * beta) / (kf + 2.0) - 1.0);
    DMatrix::from_fn(k, k, |i, j| if i == j { diag } else { off })
}

fn mlfs_step(
    sigma: &SpdMatrix,
    data: &DMatrix<f64>,
    beta: f64,
    ginv: &DMatrix<f64>,
) -> Result<(SpdMatrix, bool)> {
    let k = sigma.dim();
    let f = fp_map(sigma, data, beta)?;
    let sinv = sigma.inverse();
    let grad = sinv.as_matrix() * (f.as_matrix() - sigma.as_matrix()) * sinv.as_matrix();
    // The likelihood gradient carries a positive scalar factor that over-
    // or underflows with T; only the direction matters under the line
    // search, so it is dropped.
    let dir = ginv * grad;
    let dir = (&dir + dir.transpose()) * 0.5;
    let base = profile_log_lik(sigma, data, beta)?;
    let floor = 1e-10 * sigma.trace() / k as f64;
    let mut gamma = 1.0;
    for _ in 0..=20 {
        let cand = sigma.as_matrix() + &dir * gamma;
        let cand = (&cand + cand.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(cand.clone());
        if eig.eigenvalues.min() > floor {
            if let Ok(spd) = SpdMatrix::from_nearly_symmetric(cand, 1e-9) {
                if profile_log_lik(&spd, data, beta)? >= base {
                    return Ok((spd, true));
                }
            }
        }
        gamma *= 0.5;
    }
    Ok((sigma.clone(), false))
}

/// Fisher-scoring scatter estimate: damped steps along `G^{-1} ∇`, with an
/// SPD projection (symmetrize, eigenvalue floor) guarding each update.
pub fn estimate_scatter_mlfs(
    data: &DMatrix<f64>,
    beta: f64,
    opts: &ScatterOptions,
) -> Result<FitReport> {
    let (k, _) = validate_data(data)?;
    let g = fisher_matrix(k, beta);
    let ginv = g
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Fisher information matrix is singular".into()))?;
    let mut sigma = initial_scatter(data, &opts.init)?;
    let mut trace = opts.trace.then(Vec::new);
    let mut converged = false;
    let mut warning = None;
    let mut step = f64::NAN;
    let mut iterations = 0;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        let (next, ok) = mlfs_step(&sigma, data, beta, &ginv)?;
        if !ok {
            warning = Some("line search stalled: step left the SPD cone repeatedly".into());
            step = 0.0;
            break;
        }
        step = riem_distance(&sigma, &next)?;
        if let Some(tr) = trace.as_mut() {
            tr.push(TracePoint {
                step,
                log_lik: profile_log_lik(&next, data, beta)?,
            });
        }
        sigma = next;
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    finish_report(data, sigma, beta, iterations, step, converged, trace, warning)
}

/// Shape-equation residual whose root is the ML shape estimate (digamma
/// form, with `p = K`, `N = T`).
fn shape_residual(u: &[f64], k: usize, t: usize, beta: f64) -> f64 {
    let (kf, tf) = (k as f64, t as f64);
    let mut su = 0.0;
    let mut sul = 0.0;
    for &ui in u {
        let ub = ui.powf(beta);
        su += ub;
        sul += ub * ui.ln();
    }
    let kt = kf * tf;
    kt / (2.0 * su) * sul
        - kt / (2.0 * beta) * (digamma(kf / (2.0 * beta)) + std::f64::consts::LN_2)
        - tf
        - kt / (2.0 * beta) * (beta * su / kt).ln()
}

pub const BETA_MIN: f64 = 0.05;
pub const BETA_MAX: f64 = 20.0;

/// Newton–Raphson root of the shape equation, with a finite-difference
/// derivative and a bisection fallback on the bracket `[lo, hi]`.
pub fn estimate_beta_bounded(
    data: &DMatrix<f64>,
    sigma: &SpdMatrix,
    init_beta: f64,
    tol: f64,
    max_iter: usize,
    bounds: (f64, f64),
) -> Result<f64> {
    let (k, t) = validate_data(data)?;
    if !(init_beta > 0.0) {
        return Err(Error::invalid(format!("init_beta must be positive, got {init_beta}")));
    }
    let u = mahalanobis_sq(sigma, data)?;
    let g = |beta: f64| shape_residual(&u, k, t, beta);
    let (mut lo, mut hi) = bounds;
    let (glo, ghi) = (g(lo), g(hi));
    if glo == 0.0 {
        return Ok(lo);
    }
    if ghi == 0.0 {
        return Ok(hi);
    }
    if glo.signum() == ghi.signum() {
        return Err(Error::degenerate(format!(
            "shape not identifiable: no sign change of the shape equation in [{lo}, {hi}]"
        )));
    }
    let mut beta = init_beta.clamp(lo, hi);
    let mut val = g(beta);
    for _ in 0..max_iter {
        if val.abs() < tol {
            return Ok(beta);
        }
        if val.signum() == glo.signum() {
            lo = beta;
        } else {
            hi = beta;
        }
        let h = 1e-4 * beta;
        let deriv = (g(beta + h) - g(beta - h)) / (2.0 * h);
        let mut next = beta - val / deriv;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - beta).abs() < 1e-14 * beta {
            return Ok(next);
        }
        beta = next;
        val = g(beta);
    }
    Err(Error::NoConvergence(format!(
        "shape estimation: residual {val:.3e} after {max_iter} iterations (tol {tol:.1e})"
    )))
}

/// Shape estimate on the default bracket `[0.05, 20]`.
pub fn estimate_beta(
    data: &DMatrix<f64>,
    sigma: &SpdMatrix,
    init_beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    estimate_beta_bounded(data, sigma, init_beta, tol, max_iter, (BETA_MIN, BETA_MAX))
}

/// Scale estimate `m = ((β/(K·T)) Σ_i u_i^β)^{1/β}` given scatter and shape.
pub fn estimate_m(data: &DMatrix<f64>, sigma: &SpdMatrix, beta: f64) -> Result<f64> {
    let (k, t) = validate_data(data)?;
    let u = mahalanobis_sq(sigma, data)?;
    let su: f64 = u.iter().map(|ui| ui.powf(beta)).sum();
    Ok((beta * su / (k as f64 * t as f64)).powf(1.0 / beta))
}

/// Theoretical radial-moment ratio `E[u²]/E[u]²` of an MGGD as a function
/// of the shape, used by the method of moments.
pub fn radial_moment_ratio(k: usize, beta: f64) -> f64 {
    let a = k as f64 / (2.0 * beta);
    let inc = 1.0 / beta;
    (ln_gamma(a + 2.0 * inc) + ln_gamma(a) - 2.0 * ln_gamma(a + inc)).exp()
}

/// Method-of-moments estimate: trace-normalized sample covariance for the
/// scatter, shape from the radial-moment ratio by bisection, scale last.
pub fn estimate_mom(data: &DMatrix<f64>) -> Result<FitReport> {
    let (k, _) = validate_data(data)?;
    let sigma = sample_scatter(data)?;
    let u = mahalanobis_sq(&sigma, data)?;
    let t = u.len() as f64;
    let m1 = u.iter().sum::<f64>() / t;
    let m2 = u.iter().map(|ui| ui * ui).sum::<f64>() / t;
    let empirical = m2 / (m1 * m1);
    // radial_moment_ratio is decreasing in beta.
    let (mut lo, mut hi) = (BETA_MIN, BETA_MAX);
    let (rlo, rhi) = (radial_moment_ratio(k, lo), radial_moment_ratio(k, hi));
    let mut warning = None;
    let beta = if empirical >= rlo {
        warning = Some(format!(
            "radial moment ratio {empirical:.4} above attainable range; shape clamped to {lo}"
        ));
        lo
    } else if empirical <= rhi {
        warning = Some(format!(
            "radial moment ratio {empirical:.4} below attainable range; shape clamped to {hi}"
        ));
        hi
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if radial_moment_ratio(k, mid) > empirical {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let m = estimate_m(data, &sigma, beta)?;
    Ok(FitReport {
        params: MggdParams::new(sigma, beta, m)?,
        iterations: 1,
        final_step: 0.0,
        converged: true,
        trace: None,
        warning,
    })
}

#[derive(Debug, Clone)]
pub struct JointOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub beta_bounds: (f64, f64),
    pub trace: bool,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            tol: 1e-6,
            max_iter: 500,
            beta_bounds: (BETA_MIN, BETA_MAX),
            trace: false,
        }
    }
}

/// Joint scatter/shape estimation: one scatter step (per `method`) and one
/// shape root-solve per outer iteration, starting from the method of
/// moments; terminates when the combined change
/// `D(k) = d_riem(Σ_k, Σ_{k+1}) + |Δβ|/β` drops below `tol`.
pub fn estimate_joint(
    data: &DMatrix<f64>,
    method: ScatterMethod,
    opts: &JointOptions,
) -> Result<FitReport> {
    let (k, t) = validate_data(data)?;
    let mom = estimate_mom(data)?;
    let (blo, bhi) = opts.beta_bounds;
    if method == ScatterMethod::Mom {
        let mut report = mom;
        let clamped = report.params.shape.clamp(blo, bhi);
        if clamped != report.params.shape {
            report.params.shape = clamped;
            report.params.scale = estimate_m(data, &report.params.scatter, clamped)?;
        }
        return Ok(report);
    }
    let mut sigma = mom.params.scatter;
    let mut beta = mom.params.shape.clamp(blo, bhi);
    let mut warning = mom.warning;
    let gamma_tol = 1e-7 * (k * t) as f64;
    let mut trace = opts.trace.then(Vec::new);
    let mut converged = false;
    let mut change = f64::NAN;
    let mut iterations = 0;
    let mut prev_change = f64::INFINITY;
    let mut grow_streak = 0usize;
    for iter in 1..=opts.max_iter {
        iterations = iter;
        // the outer iteration renormalizes the trace, so the profiled and
        // unit-scale forms of the map give identical steps here
        let next = (|| -> Result<SpdMatrix> {
            match method {
                ScatterMethod::Mlfp => fp_map_ml(&sigma, data, beta),
                ScatterMethod::Rafp => {
                    let f = fp_map_ml(&sigma, data, beta)?;
                    riem_average(&sigma, &f, 1.0 / iter as f64)
                }
                ScatterMethod::FpEps(eps) => {
                    let f = fp_map_ml(&sigma, data, beta)?;
                    SpdMatrix::from_nearly_symmetric(
                        f.as_matrix() * (1.0 - eps) + DMatrix::<f64>::identity(k, k) * eps,
                        1e-9,
                    )
                }
                ScatterMethod::Mlfs => {
                    // the Fisher matrix depends on beta; refresh it each
                    // outer iteration
                    let ginv = fisher_matrix(k, beta)
                        .try_inverse()
                        .ok_or_else(|| Error::Numerical("Fisher matrix singular".into()))?;
                    Ok(mlfs_step(&sigma, data, beta, &ginv)?.0)
                }
                ScatterMethod::Mom => unreachable!(),
            }
        })();
        let next = match next {
            Ok(next) => next,
            Err(e) => {
                if warning.is_none() {
                    warning = Some(format!("scatter step diverged: {e}"));
                }
                break;
            }
        };
        let next = next.normalized_trace();
        let beta_next = match estimate_beta_bounded(data, &next, beta, gamma_tol, 100, (blo, bhi)) {
            Ok(b) => b,
            Err(Error::Degenerate(_)) => {
                // No root inside the allowed bracket: clamp to the nearer
                // bound and record it.
                let u = mahalanobis_sq(&next, data)?;
                let b = if shape_residual(&u, k, t, blo) > 0.0 { bhi } else { blo };
                if warning.is_none() {
                    warning = Some(format!("shape clamped to bracket bound {b}"));
                }
                b
            }
            Err(e) => return Err(e),
        };
        change = riem_distance(&sigma, &next)? + (beta_next - beta).abs() / beta;
        if let Some(tr) = trace.as_mut() {
            tr.push(TracePoint {
                step: change,
                log_lik: profile_log_lik(&next, data, beta_next)?,
            });
        }
        sigma = next;
        beta = beta_next;
        if change < opts.tol {
            converged = true;
            break;
        }
        if change > prev_change {
            grow_streak += 1;
            if grow_streak >= 10 {
                if warning.is_none() {
                    warning = Some(format!(
                        "joint iteration diverging: change grew for {grow_streak} consecutive iterations"
                    ));
                }
                break;
            }
        } else {
            grow_streak = 0;
        }
        prev_change = change;
    }
    let m = estimate_m(data, &sigma, beta)?;
    Ok(FitReport {
        params: MggdParams::new(sigma, beta, m)?,
        iterations,
        final_step: change,
        converged,
        trace,
        warning,
    })
}

/// Samples the non-expansivity diagnostic of the fixed-point map: for each
/// pair of AR(1) matrices `M_1 = Σ(σ_1)`, `M_2 = Σ(σ_2)` on the grid,
/// emits `(σ_1, σ_2, d(f(M_1), f(M_2)) - d(M_1, M_2))`.
pub fn nonexpansivity_probe(
    data: &DMatrix<f64>,
    beta: f64,
    sigma_grid: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    let k = data.nrows();
    let mats: Vec<(f64, SpdMatrix, SpdMatrix)> = sigma_grid
        .iter()
        .map(|&s| {
            let m = crate::sources::make_ar1_scatter(k, s)?;
            let fm = fp_map(&m, data, beta)?;
            Ok((s, m, fm))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(mats.len() * mats.len());
    for (s1, m1, f1) in &mats {
        for (s2, m2, f2) in &mats {
            let diff = riem_distance(f1, f2)? - riem_distance(m1, m2)?;
            out.push((*s1, *s2, diff));
        }
    }
    Ok(out)
}
