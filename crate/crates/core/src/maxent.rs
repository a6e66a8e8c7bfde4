//! Maximum-entropy density estimation with kernels (EMK).
//!
//! A density `p(x) = exp(-1 + Σ λ_i r_i(x))` is pinned by moment
//! constraints `E_p[r_i] = α_i`, where the measuring functions `r_i` are
//! four fixed globals `{1, x, x², x/(1+x²)}` plus adaptively placed local
//! Gaussian kernels. The Lagrange multipliers come from a damped Newton
//! iteration on a fixed quadrature grid; the number of local kernels is
//! selected by a minimum-description-length score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quadrature nodes of the fixed trapezoid grid.
const QUAD_POINTS: usize = 2048;

/// Maximum local kernels by default (4 globals + 5 locals = 9 functions).
pub const DEFAULT_MAX_LOCAL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasuringFunction {
    One,
    X,
    XSquared,
    /// `x / (1 + x²)`, sensitive to tail asymmetry.
    Rational,
    /// Local Gaussian kernel `exp(-(x-μ)²/(2σ²))`.
    Gaussian { mu: f64, sigma: f64 },
}

impl MeasuringFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MeasuringFunction::One => 1.0,
            MeasuringFunction::X => x,
            MeasuringFunction::XSquared => x * x,
            MeasuringFunction::Rational => x / (1.0 + x * x),
            MeasuringFunction::Gaussian { mu, sigma } => {
                let z = (x - mu) / sigma;
                (-0.5 * z * z).exp()
            }
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            MeasuringFunction::One => 0.0,
            MeasuringFunction::X => 1.0,
            MeasuringFunction::XSquared => 2.0 * x,
            MeasuringFunction::Rational => {
                let d = 1.0 + x * x;
                (1.0 - x * x) / (d * d)
            }
            MeasuringFunction::Gaussian { mu, sigma } => {
                let z = (x - mu) / sigma;
                -(z / sigma) * (-0.5 * z * z).exp()
            }
        }
    }
}

/// The measuring-function set: globals first, local kernels appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuringFunctionSet {
    pub functions: Vec<MeasuringFunction>,
}

impl MeasuringFunctionSet {
    /// The four fixed global functions `{1, x, x², x/(1+x²)}`.
    pub fn globals() -> Self {
        MeasuringFunctionSet {
            functions: vec![
                MeasuringFunction::One,
                MeasuringFunction::X,
                MeasuringFunction::XSquared,
                MeasuringFunction::Rational,
            ],
        }
    }

    pub fn custom(functions: Vec<MeasuringFunction>) -> Result<Self> {
        if functions.first() != Some(&MeasuringFunction::One) {
            return Err(Error::invalid("first measuring function must be the constant 1"));
        }
        Ok(MeasuringFunctionSet { functions })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn with_kernel(&self, mu: f64, sigma: f64) -> Self {
        let mut functions = self.functions.clone();
        functions.push(MeasuringFunction::Gaussian { mu, sigma });
        MeasuringFunctionSet { functions }
    }
}

/// A fitted maximum-entropy density `p(x) = exp(-1 + Σ λ_i r_i(x))`,
/// normalized over its finite support interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxEntDensity {
    pub functions: MeasuringFunctionSet,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub support: (f64, f64),
}

impl MaxEntDensity {
    pub fn log_pdf(&self, x: f64) -> f64 {
        let mut acc = -1.0;
        for (f, l) in self.functions.functions.iter().zip(&self.lambdas) {
            acc += l * f.eval(x);
        }
        acc
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Differential entropy `H = 1 - Σ λ_i α_i`.
    pub fn entropy(&self) -> f64 {
        let dot: f64 = self
            .lambdas
            .iter()
            .zip(&self.alphas)
            .map(|(l, a)| l * a)
            .sum();
        1.0 - dot
    }

    /// Score `d log p / dx = Σ λ_i r_i'(x)`.
    pub fn score(&self, x: f64) -> f64 {
        self.functions
            .functions
            .iter()
            .zip(&self.lambdas)
            .map(|(f, l)| l * f.deriv(x))
            .sum()
    }

    /// The quadrature abscissae of the fit grid.
    pub fn grid(&self) -> Vec<f64> {
        grid_points(self.support)
    }
}

fn grid_points(support: (f64, f64)) -> Vec<f64> {
    let (a, b) = support;
    let h = (b - a) / (QUAD_POINTS - 1) as f64;
    (0..QUAD_POINTS).map(|i| a + i as f64 * h).collect()
}

/// Trapezoid weights matching `grid_points`.
fn grid_weights(support: (f64, f64)) -> Vec<f64> {
    let (a, b) = support;
    let h = (b - a) / (QUAD_POINTS - 1) as f64;
    let mut w = vec![h; QUAD_POINTS];
    w[0] = h / 2.0;
    w[QUAD_POINTS - 1] = h / 2.0;
    w
}

/// Solves the moment conditions `E_p[r_i] = α_i` for the Lagrange
/// multipliers by damped Newton iteration on the quadrature grid.
///
/// The Jacobian entry `J_ij = ∫ r_i r_j p` and the residual
/// `∫ (r_i - α_i) p` are both evaluated on the fixed trapezoid grid over
/// `support`.
pub fn solve_lagrange(
    functions: &MeasuringFunctionSet,
    alphas: &[f64],
    init: &[f64],
    support: (f64, f64),
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let m = functions.len();
    if alphas.len() != m || init.len() != m {
        return Err(Error::Dimension(format!(
            "{m} functions but {} alphas and {} initial multipliers",
            alphas.len(),
            init.len()
        )));
    }
    if (alphas[0] - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("alpha_1 must equal 1 (normalization constraint)"));
    }
    if !(support.1 > support.0) {
        return Err(Error::invalid("support interval is empty"));
    }
    let xs = grid_points(support);
    let ws = grid_weights(support);
    // r_i evaluated over the grid, reused by every Newton step
    let mut r = DMatrix::zeros(m, QUAD_POINTS);
    for (i, f) in functions.functions.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            r[(i, j)] = f.eval(x);
        }
    }
    let rt = r.transpose();
    let weights = DVector::from_column_slice(&ws);
    let mut lambda = DVector::from_column_slice(init);
    let alpha = DVector::from_column_slice(alphas);

    // density values times quadrature weights over the grid
    let weighted_density = |lambda: &DVector<f64>| -> DVector<f64> {
        let mut z = &rt * lambda;
        for (v, w) in z.iter_mut().zip(weights.iter()) {
            *v = (*v - 1.0).exp() * w;
        }
        z
    };
    // Moment residual ∫ r_i p - α_i. With r_1 = 1, α_1 = 1 the first row
    // enforces normalization; at the solution (∫p = 1) this equals the
    // centered form ∫ (r_i - α_i) p, which would otherwise leave the
    // normalization row identically zero on unnormalized iterates.
    let residual = |pw: &DVector<f64>| -> DVector<f64> { &r * pw - &alpha };

    let mut pw = weighted_density(&lambda);
    let mut res = residual(&pw);
    for _ in 0..max_iter {
        if res.amax() < tol {
            return Ok(lambda.iter().copied().collect());
        }
        // J = R diag(p ∘ w) Rᵀ
        let mut scaled = rt.clone();
        for (mut row, &pwj) in scaled.row_iter_mut().zip(pw.iter()) {
            row *= pwj;
        }
        let jac = &r * scaled;
        let delta = jac
            .lu()
            .solve(&res)
            .ok_or_else(|| Error::degenerate("degenerate constraint set: singular Jacobian"))?;
        if !delta.iter().all(|d| d.is_finite()) {
            return Err(Error::degenerate("degenerate constraint set: singular Jacobian"));
        }
        // damped step: halve until the residual stops increasing
        let base_norm = res.norm();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand = &lambda - &delta * scale;
            let pc = weighted_density(&cand);
            let rc = residual(&pc);
            if rc.norm() < base_norm && rc.iter().all(|v| v.is_finite()) {
                lambda = cand;
                pw = pc;
                res = rc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence(format!(
                "Newton stalled with moment residual {base_norm:.3e}"
            )));
        }
    }
    if res.amax() < tol {
        Ok(lambda.iter().copied().collect())
    } else {
        Err(Error::NoConvergence(format!(
            "moment residual {:.3e} after {max_iter} iterations (tol {tol:.1e})",
            res.amax()
        )))
    }
}

/// Histogram density estimate with Freedman–Diaconis bin width.
struct Histogram {
    lo: f64,
    width: f64,
    density: Vec<f64>,
}

impl Histogram {
    fn build(samples: &[f64]) -> Histogram {
        let mut sorted: Vec<f64> = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let q = |p: f64| -> f64 {
            let idx = (p * (n - 1) as f64).round() as usize;
            sorted[idx.min(n - 1)]
        };
        let iqr = q(0.75) - q(0.25);
        let lo = sorted[0];
        let hi = sorted[n - 1];
        let range = hi - lo;
        let mut width = 2.0 * iqr * (n as f64).powf(-1.0 / 3.0);
        if !(width > 0.0) {
            width = range / (n as f64).sqrt().max(1.0);
        }
        let bins = ((range / width).ceil() as usize).clamp(8, 512);
        let width = range / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in &sorted {
            let idx = (((x - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let density = counts
            .iter()
            .map(|&c| c as f64 / (n as f64 * width))
            .collect();
        Histogram { lo, width, density }
    }

    fn eval(&self, x: f64) -> f64 {
        let idx = (x - self.lo) / self.width;
        if idx < 0.0 {
            return 0.0;
        }
        let idx = idx as usize;
        if idx >= self.density.len() {
            return 0.0;
        }
        self.density[idx]
    }
}

/// Two-part MDL code length from cached per-sample function values:
/// negative log-likelihood plus `(M/2) log T` for the `M` functions.
fn mdl_score_cached(lambdas: &[f64], r_rows: &[Vec<f64>], t: usize) -> f64 {
    let mut nll = 0.0;
    for s in 0..t {
        let mut lp = -1.0;
        for (l, row) in lambdas.iter().zip(r_rows) {
            lp += l * row[s];
        }
        nll -= lp;
    }
    nll + 0.5 * lambdas.len() as f64 * (t as f64).ln()
}

fn solve_density(
    functions: &MeasuringFunctionSet,
    alphas: &[f64],
    init: &[f64],
    support: (f64, f64),
) -> Result<MaxEntDensity> {
    let lambdas = solve_lagrange(functions, alphas, init, support, 1e-9, 200)?;
    Ok(MaxEntDensity {
        functions: functions.clone(),
        lambdas,
        alphas: alphas.to_vec(),
        support,
    })
}

/// Fits an EMK density: globals-only Newton solve, then greedy local
/// Gaussian kernels placed at the largest estimated-vs-histogram deviation,
/// each kept only if it lowers the MDL score.
pub fn fit_emk(samples: &[f64], max_local: usize) -> Result<MaxEntDensity> {
    if samples.len() < 100 {
        return Err(Error::invalid(format!(
            "need at least 100 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::degenerate("zero-variance samples"));
    }
    let std = var.sqrt();
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * std;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * std;
    let support = (lo, hi);

    // Gaussian-moment warm start for the global multipliers.
    let globals = MeasuringFunctionSet::globals();
    let init = vec![
        1.0 - 0.5 * (2.0 * std::f64::consts::PI * var).ln() - mean * mean / (2.0 * var),
        mean / var,
        -0.5 / var,
        0.0,
    ];
    // per-sample function values, cached across kernel candidates (each
    // candidate only appends one row)
    let mut r_rows: Vec<Vec<f64>> = globals
        .functions
        .iter()
        .map(|f| samples.iter().map(|&x| f.eval(x)).collect())
        .collect();
    let t = samples.len();
    let row_mean = |row: &Vec<f64>| row.iter().sum::<f64>() / t as f64;
    let mut alphas: Vec<f64> = r_rows.iter().map(row_mean).collect();
    let mut best = solve_density(&globals, &alphas, &init, support)?;
    let mut best_mdl = mdl_score_cached(&best.lambdas, &r_rows, t);

    let hist = Histogram::build(samples);
    let xs = grid_points(support);
    for _ in 0..max_local {
        // place the candidate kernel at the largest deviation from the
        // histogram density
        let mut peak_idx = 0;
        let mut peak_dev = 0.0;
        let devs: Vec<f64> = xs
            .iter()
            .map(|&x| (best.pdf(x) - hist.eval(x)).abs())
            .collect();
        for (i, &d) in devs.iter().enumerate() {
            if d > peak_dev {
                peak_dev = d;
                peak_idx = i;
            }
        }
        if peak_dev == 0.0 {
            break;
        }
        let mu = xs[peak_idx];
        // half-width at half-deviation of the bump, floored at a bin width
        let half = peak_dev / 2.0;
        let mut left = peak_idx;
        while left > 0 && devs[left] > half {
            left -= 1;
        }
        let mut right = peak_idx;
        while right + 1 < devs.len() && devs[right] > half {
            right += 1;
        }
        let sigma = ((xs[right] - xs[left]) / 2.0).max(hist.width);

        let candidate_set = best.functions.with_kernel(mu, sigma);
        let kernel = candidate_set.functions.last().unwrap().clone();
        let kernel_row: Vec<f64> = samples.iter().map(|&x| kernel.eval(x)).collect();
        let kernel_alpha = row_mean(&kernel_row);
        let mut cand_alphas = alphas.clone();
        cand_alphas.push(kernel_alpha);
        let mut init = best.lambdas.clone();
        init.push(0.0);
        let candidate = match solve_density(&candidate_set, &cand_alphas, &init, support) {
            Ok(d) => d,
            Err(_) => break,
        };
        r_rows.push(kernel_row);
        let mdl = mdl_score_cached(&candidate.lambdas, &r_rows, t);
        if mdl < best_mdl {
            best = candidate;
            best_mdl = mdl;
            alphas = cand_alphas;
        } else {
            r_rows.pop();
            break;
        }
    }
    Ok(best)
}

/// Convenience wrapper with the default local-kernel cap.
pub fn fit_emk_default(samples: &[f64]) -> Result<MaxEntDensity> {
    fit_emk(samples, DEFAULT_MAX_LOCAL)
}

#[cfg(test)]
mod tests;
