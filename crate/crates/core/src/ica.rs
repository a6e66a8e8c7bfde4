//! Decoupled (row-wise) ICA engines.
//!
//! Each row of the demixing matrix is optimized independently on the unit
//! sphere: the determinant term of the mutual-information cost is split off
//! through the vector `h_n` orthogonal to all other rows, the per-source
//! entropy comes from a density model refit every sweep, and updates are
//! sphere-projected gradient steps with a backtracking line search.
//!
//! Two engines share this machinery: `run_ica_emk` (entropy from the
//! maximum-entropy kernel fit) and `run_sparse_ica` (adds a smoothed-ℓ¹
//! penalty and runs the three-stage pipeline: fixed-point initializer,
//! orthogonal refinement, nonorthogonal decoupled updates).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxent::{fit_emk, MaxEntDensity};

/// Density model driving the entropy term of each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityModel {
    /// Maximum-entropy kernel fit, refit on the current source estimate
    /// once per sweep.
    Emk,
    /// Fixed hyperbolic-secant model with score `-tanh(y)`.
    FixedTanh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Backtracking Armijo line search starting at step 1.
    LineSearch,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub enum WInit {
    RandomOrthogonal,
    Identity,
    Given(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct IcaConfig {
    pub max_iter: usize,
    /// Tolerance δ of the lag-k cost criterion.
    pub tol: f64,
    /// History lag k: stop when `|J(W_iter) - J(W_iter-k)| < δ`.
    pub history_lag: usize,
    pub step: StepRule,
    pub density: DensityModel,
    /// Cap on adaptive local kernels in the EMK fit.
    pub max_local: usize,
    /// Jacobi (sweep-snapshot, parallelizable) row schedule instead of the
    /// in-place Gauss–Seidel order.
    pub parallel_rows: bool,
    pub seed: u64,
    pub init: WInit,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            max_iter: 512,
            tol: 1e-6,
            history_lag: 8,
            step: StepRule::LineSearch,
            density: DensityModel::Emk,
            max_local: crate::maxent::DEFAULT_MAX_LOCAL,
            parallel_rows: false,
            seed: 0,
            init: WInit::RandomOrthogonal,
        }
    }
}

/// Final decomposition of the sparse cost, kept for the ratio diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostParts {
    pub independence: f64,
    pub sparsity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemixingState {
    #[serde(with = "crate::io::serde_mat")]
    pub w: DMatrix<f64>,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub cost_parts: Option<CostParts>,
}

#[derive(Debug, Clone)]
pub struct SparseConfig {
    pub base: IcaConfig,
    /// Per-source sparsity weights; a single entry is broadcast.
    pub lambda: Vec<f64>,
    /// Per-source smoothing parameters; a single entry is broadcast.
    pub eps: Vec<f64>,
}

impl SparseConfig {
    pub fn uniform(base: IcaConfig, lambda: f64, eps: f64) -> Self {
        SparseConfig {
            base,
            lambda: vec![lambda],
            eps: vec![eps],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        for v in [&self.lambda, &self.eps] {
            if v.len() != 1 && v.len() != n {
                return Err(Error::Dimension(format!(
                    "per-source parameter list has length {}, expected 1 or {n}",
                    v.len()
                )));
            }
        }
        if self.lambda.iter().any(|&l| l < 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.eps.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }

    fn lambda_for(&self, n: usize) -> f64 {
        if self.lambda.len() == 1 {
            self.lambda[0]
        } else {
            self.lambda[n]
        }
    }

    fn eps_for(&self, n: usize) -> f64 {
        if self.eps.len() == 1 {
            self.eps[0]
        } else {
            self.eps[n]
        }
    }
}

/// Result of whitening: `z = whitener · (x - mean)` has identity
/// covariance and `dewhiten · z` restores the demeaned data.
#[derive(Debug, Clone)]
pub struct Whitening {
    pub z: DMatrix<f64>,
    pub dewhiten: DMatrix<f64>,
    pub whitener: DMatrix<f64>,
    pub mean: DVector<f64>,
}

/// PCA whitening with optional dimension reduction to `n_components`.
pub fn whiten_reduce(x: &DMatrix<f64>, n_components: usize) -> Result<Whitening> {
    let (n, v) = x.shape();
    if v <= n {
        return Err(Error::invalid(format!(
            "need more samples than channels: {n} channels, {v} samples"
        )));
    }
    if n_components == 0 || n_components > n {
        return Err(Error::invalid(format!(
            "cannot keep {n_components} of {n} components"
        )));
    }
    let mean = DVector::from_fn(n, |i, _| x.row(i).sum() / v as f64);
    let mut centered = x.clone();
    for i in 0..n {
        for j in 0..v {
            centered[(i, j)] -= mean[i];
        }
    }
    let cov = &centered * centered.transpose() / v as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let max_eig = eig.eigenvalues[order[0]];
    let mut whitener = DMatrix::zeros(n_components, n);
    let mut dewhiten = DMatrix::zeros(n, n_components);
    for (row, &idx) in order.iter().take(n_components).enumerate() {
        let lam = eig.eigenvalues[idx];
        if lam <= 1e-12 * max_eig {
            return Err(Error::degenerate(format!(
                "covariance rank deficient: principal dimension {row} has eigenvalue {lam:.3e}"
            )));
        }
        let vector = eig.eigenvectors.column(idx);
        let scale = lam.sqrt();
        for i in 0..n {
            whitener[(row, i)] = vector[i] / scale;
            dewhiten[(i, row)] = vector[i] * scale;
        }
    }
    let z = &whitener * &centered;
    Ok(Whitening {
        z,
        dewhiten,
        whitener,
        mean,
    })
}

/// Whitening without reduction; returns `(z, dewhiten)`.
pub fn whiten(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let w = whiten_reduce(x, x.nrows())?;
    Ok((w.z, w.dewhiten))
}

/// Unit vector orthogonal to every row of `w` except row `n`, signed so
/// that `h'w_n > 0`. Computed from the rank-one orthogonal projector onto
/// the null space of the remaining rows.
pub fn decouple_h(w: &DMatrix<f64>, n: usize) -> Result<DVector<f64>> {
    let dim = w.nrows();
    if w.ncols() != dim {
        return Err(Error::Dimension("demixing matrix must be square".into()));
    }
    if n >= dim {
        return Err(Error::invalid(format!("row index {n} out of range for N={dim}")));
    }
    if dim == 1 {
        let sign = if w[(0, 0)] < 0.0 { -1.0 } else { 1.0 };
        return Ok(DVector::from_element(1, sign));
    }
    let mut others = DMatrix::zeros(dim - 1, dim);
    let mut row = 0;
    for i in 0..dim {
        if i != n {
            others.set_row(row, &w.row(i));
            row += 1;
        }
    }
    let gram = &others * others.transpose();
    let solved = gram
        .lu()
        .solve(&others)
        .ok_or_else(|| Error::degenerate(format!("rows other than {n} are rank deficient")))?;
    let projector = DMatrix::identity(dim, dim) - others.transpose() * solved;
    // the projector has rank one; take its largest column as h
    let mut best = 0;
    let mut best_norm = -1.0;
    for j in 0..dim {
        let norm = projector.column(j).norm();
        if norm > best_norm {
            best_norm = norm;
            best = j;
        }
    }
    if best_norm < 1e-10 {
        return Err(Error::degenerate(format!("rows other than {n} are rank deficient")));
    }
    let mut h = projector.column(best).into_owned();
    h /= h.norm();
    let dot = h.dot(&w.row(n).transpose());
    if dot < 0.0 {
        h = -h;
    }
    Ok(h)
}

/// Projection of `g` onto the tangent plane of the unit sphere at `w`:
/// `(I - w w') g`.
pub fn sphere_project(w: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    g - w * w.dot(g)
}

/// Smoothed ℓ¹ surrogate `Σ_v sqrt(y_v² + eps)`.
pub fn smoothed_l1(y: &[f64], eps: f64) -> f64 {
    y.iter().map(|&v| (v * v + eps).sqrt()).sum()
}

fn ln_cosh(x: f64) -> f64 {
    x.abs() + (1.0 + (-2.0 * x.abs()).exp()).ln() - std::f64::consts::LN_2
}

/// Per-row density model used inside a sweep.
enum RowModel {
    Emk(MaxEntDensity),
    Tanh,
}

impl RowModel {
    fn fit(y: &[f64], density: DensityModel, max_local: usize) -> Result<RowModel> {
        match density {
            DensityModel::Emk => Ok(RowModel::Emk(fit_emk(y, max_local)?)),
            DensityModel::FixedTanh => Ok(RowModel::Tanh),
        }
    }

    /// Plug-in entropy `E[-log p(y)]` with the model frozen.
    fn entropy(&self, y: &[f64]) -> f64 {
        let v = y.len() as f64;
        match self {
            RowModel::Emk(d) => {
                // 1 - Σ λ_i α_i with α recomputed on the given samples
                let mut dot = 0.0;
                for (f, l) in d.functions.functions.iter().zip(&d.lambdas) {
                    let alpha = y.iter().map(|&x| f.eval(x)).sum::<f64>() / v;
                    dot += l * alpha;
                }
                1.0 - dot
            }
            RowModel::Tanh => {
                std::f64::consts::PI.ln() + y.iter().map(|&x| ln_cosh(x)).sum::<f64>() / v
            }
        }
    }

    /// `-d log p / dy` per sample.
    fn neg_score(&self, y: &[f64]) -> Vec<f64> {
        match self {
            RowModel::Emk(d) => y.iter().map(|&x| -d.score(x)).collect(),
            RowModel::Tanh => y.iter().map(|&x| x.tanh()).collect(),
        }
    }
}

/// Entropy-term gradient plus determinant term for one row (the
/// sample-average form of the decoupled cost gradient).
pub fn emk_row_gradient(
    x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    n: usize,
    density: &MaxEntDensity,
) -> Result<DVector<f64>> {
    let h = decouple_h(w, n)?;
    let wn = w.row(n).transpose();
    let hw = h.dot(&wn);
    if hw.abs() < 1e-12 {
        return Err(Error::degenerate(format!("row collapse: h'w ~ 0 for row {n}")));
    }
    let v = x.ncols();
    let y = wn.transpose() * x;
    let neg_score = DVector::from_fn(v, |j, _| -density.score(y[(0, j)]));
    Ok(x * neg_score / v as f64 - &h / hw)
}

struct RowOutcome {
    w: DVector<f64>,
    model: RowModel,
}

struct SparseTerm<'a> {
    lambda: &'a (dyn Fn(usize) -> f64 + Sync),
    eps: &'a (dyn Fn(usize) -> f64 + Sync),
}

struct Engine<'a> {
    x: &'a DMatrix<f64>,
    cfg: &'a IcaConfig,
    sparse: Option<SparseTerm<'a>>,
    orthogonal: bool,
}

impl Engine<'_> {
    fn row_cost(&self, model: &RowModel, y: &[f64], hw: Option<f64>, n: usize) -> f64 {
        let mut cost = model.entropy(y);
        if let Some(hw) = hw {
            cost -= hw.abs().ln();
        }
        if let Some(sp) = &self.sparse {
            let lambda = (sp.lambda)(n);
            if lambda > 0.0 {
                cost += lambda * smoothed_l1(y, (sp.eps)(n));
            }
        }
        cost
    }

    fn row_values(&self, w: &DVector<f64>) -> Vec<f64> {
        let y = w.transpose() * self.x;
        y.iter().copied().collect()
    }

    /// One projected-gradient update of row `n` against the `basis`
    /// snapshot. Restarts the row from a random direction on collapse,
    /// charging the row's restart budget.
    fn update_row(
        &self,
        basis: &DMatrix<f64>,
        n: usize,
        sweep: usize,
        restarts: &mut usize,
    ) -> Result<RowOutcome> {
        let v = self.x.ncols() as f64;
        let mut wn = basis.row(n).transpose();
        loop {
            let attempt = (|| -> Result<(DVector<f64>, RowModel)> {
                let y = self.row_values(&wn);
                let model = RowModel::fit(&y, self.cfg.density, self.cfg.max_local)?;
                let (h, hw) = if self.orthogonal {
                    (None, None)
                } else {
                    let h = decouple_h(basis, n)?;
                    let hw = h.dot(&wn);
                    if hw.abs() < 1e-12 {
                        return Err(Error::degenerate(format!(
                            "row collapse: h'w ~ 0 for row {n}"
                        )));
                    }
                    (Some(h), Some(hw))
                };
                let neg_score = DVector::from_column_slice(&model.neg_score(&y));
                let mut grad = self.x * neg_score / v;
                if let Some(sp) = &self.sparse {
                    let lambda = (sp.lambda)(n);
                    if lambda > 0.0 {
                        let eps = (sp.eps)(n);
                        let weights =
                            DVector::from_fn(y.len(), |j, _| y[j] / (y[j] * y[j] + eps).sqrt());
                        grad += self.x * weights * lambda;
                    }
                }
                if let (Some(h), Some(hw)) = (&h, hw) {
                    grad -= h / hw;
                }
                let u = sphere_project(&wn, &grad);
                let base_cost = self.row_cost(&model, &y, hw, n);
                if !base_cost.is_finite() {
                    return Err(Error::Numerical(format!("non-finite cost at row {n}")));
                }
                let next = match self.cfg.step {
                    StepRule::Fixed(gamma) => {
                        let mut cand = &wn - &u * gamma;
                        let norm = cand.norm();
                        if norm < 1e-300 {
                            return Err(Error::degenerate(format!("row collapse: row {n} vanished")));
                        }
                        cand /= norm;
                        cand
                    }
                    StepRule::LineSearch => {
                        let u_sq = u.norm_squared();
                        let mut gamma = 1.0;
                        let mut chosen = wn.clone();
                        for _ in 0..20 {
                            let mut cand = &wn - &u * gamma;
                            let norm = cand.norm();
                            if norm > 1e-300 {
                                cand /= norm;
                                let yc = self.row_values(&cand);
                                let hwc = match (&h, hw) {
                                    (Some(h), Some(_)) => Some(h.dot(&cand)),
                                    _ => None,
                                };
                                let collapse =
                                    hwc.map(|x| x.abs() < 1e-12).unwrap_or(false);
                                if !collapse {
                                    let cost = self.row_cost(&model, &yc, hwc, n);
                                    if cost <= base_cost - 1e-4 * gamma * u_sq {
                                        chosen = cand;
                                        break;
                                    }
                                }
                            }
                            gamma *= 0.5;
                        }
                        chosen
                    }
                };
                Ok((next, model))
            })();
            match attempt {
                Ok((w, model)) => {
                    return Ok(RowOutcome { w, model });
                }
                Err(Error::Degenerate(_)) if *restarts < 3 => {
                    // restart the row from a random direction orthogonalized
                    // against the other rows
                    *restarts += 1;
                    let seed = crate::seed::derive(
                        self.cfg.seed,
                        &[0x7e57, sweep as u64, n as u64, *restarts as u64],
                    );
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let dim = basis.nrows();
                    let mut fresh =
                        DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                    for i in 0..dim {
                        if i != n {
                            let row = basis.row(i).transpose();
                            let denom = row.norm_squared();
                            if denom > 1e-300 {
                                let coeff = fresh.dot(&row) / denom;
                                fresh -= row * coeff;
                            }
                        }
                    }
                    let norm = fresh.norm();
                    if norm < 1e-10 {
                        return Err(Error::degenerate(format!(
                            "row {n}: no usable restart direction"
                        )));
                    }
                    wn = fresh / norm;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn sweep_cost(&self, w: &DMatrix<f64>, models: &[RowModel]) -> Result<(f64, CostParts)> {
        let n = w.nrows();
        let det = w.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::degenerate(format!(
                "demixing matrix near singular: |det| = {:.3e}",
                det.abs()
            )));
        }
        let mut independence = -det.abs().ln();
        let mut sparsity = 0.0;
        for row in 0..n {
            let y = self.row_values(&w.row(row).transpose());
            independence += models[row].entropy(&y);
            if let Some(sp) = &self.sparse {
                sparsity += (sp.lambda)(row) * y.iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        let total = independence + sparsity;
        if !total.is_finite() {
            return Err(Error::Numerical("non-finite sweep cost".into()));
        }
        Ok((
            total,
            CostParts {
                independence,
                sparsity,
                total,
            },
        ))
    }

    fn run(&self, w0: DMatrix<f64>) -> Result<DemixingState> {
        let n = w0.nrows();
        let mut w = w0;
        // rows live on the unit sphere
        for i in 0..n {
            let norm = w.row(i).norm();
            if norm < 1e-300 {
                return Err(Error::degenerate(format!("initial row {i} is zero")));
            }
            let scaled = w.row(i) / norm;
            w.set_row(i, &scaled);
        }
        let mut restarts = vec![0usize; n];
        let mut history = Vec::new();
        let mut converged = false;
        let mut last_parts = None;
        let mut iterations = 0;
        for sweep in 0..self.cfg.max_iter {
            iterations = sweep + 1;
            let mut models: Vec<Option<RowModel>> = (0..n).map(|_| None).collect();
            if self.cfg.parallel_rows {
                let basis = w.clone();
                let outcomes: Vec<Result<(RowOutcome, usize)>> = restarts
                    .par_iter()
                    .enumerate()
                    .map(|(row, &budget_used)| {
                        let mut used = budget_used;
                        let outcome = self.update_row(&basis, row, sweep, &mut used)?;
                        Ok((outcome, used))
                    })
                    .collect();
                for (row, outcome) in outcomes.into_iter().enumerate() {
                    let (outcome, used) = outcome?;
                    restarts[row] = used;
                    w.set_row(row, &outcome.w.transpose());
                    models[row] = Some(outcome.model);
                }
            } else {
                for row in 0..n {
                    let basis = w.clone();
                    let outcome = self.update_row(&basis, row, sweep, &mut restarts[row])?;
                    w.set_row(row, &outcome.w.transpose());
                    models[row] = Some(outcome.model);
                }
            }
            if self.orthogonal {
                w = symmetric_decorrelation(&w)?;
            }
            let models: Vec<RowModel> = models.into_iter().map(Option::unwrap).collect();
            let (cost, parts) = self.sweep_cost(&w, &models)?;
            history.push(cost);
            last_parts = Some(parts);
            let lag = self.cfg.history_lag.max(1);
            if history.len() > lag {
                let prev = history[history.len() - 1 - lag];
                if (cost - prev).abs() < self.cfg.tol {
                    converged = true;
                    break;
                }
            }
        }
        Ok(DemixingState {
            w,
            cost_history: history,
            iterations,
            converged,
            cost_parts: last_parts,
        })
    }
}

/// Symmetric decorrelation `W ← (W W')^{-1/2} W`.
pub fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = w * w.transpose();
    let eig = nalgebra::SymmetricEigen::new(gram);
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::degenerate("demixing matrix is rank deficient"));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w)
}

fn initial_w(n: usize, init: &WInit, seed: u64) -> Result<DMatrix<f64>> {
    match init {
        WInit::Identity => Ok(DMatrix::identity(n, n)),
        WInit::Given(w) => {
            if w.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "initial W is {}x{}, expected {n}x{n}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            Ok(w.clone())
        }
        WInit::RandomOrthogonal => {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &[0x1ca]));
            let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            symmetric_decorrelation(&raw)
        }
    }
}

/// ICA by entropy maximization with kernels: decoupled sphere-projected
/// gradient sweeps with the density refit per row per sweep, stopping on
/// the lag-k cost criterion.
pub fn run_ica_emk(x: &DMatrix<f64>, cfg: &IcaConfig) -> Result<DemixingState> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least 2 sources"));
    }
    let w0 = initial_w(n, &cfg.init, cfg.seed)?;
    let engine = Engine {
        x,
        cfg,
        sparse: None,
        orthogonal: false,
    };
    engine.run(w0)
}

/// FastICA-style symmetric fixed-point initializer with the tanh
/// nonlinearity. Returns the orthogonal estimate and a convergence flag.
pub fn init_fastica(x: &DMatrix<f64>, seed: u64) -> Result<(DMatrix<f64>, bool)> {
    let (n, v) = x.shape();
    if v <= n {
        return Err(Error::invalid("need more samples than channels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, &[0xfa57]));
    let raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut w = symmetric_decorrelation(&raw)?;
    let vf = v as f64;
    let mut converged = false;
    for _ in 0..200 {
        let y = &w * x;
        let g = y.map(f64::tanh);
        let g_prime_mean =
            DVector::from_fn(n, |i, _| g.row(i).iter().map(|t| 1.0 - t * t).sum::<f64>() / vf);
        let mut next = &g * x.transpose() / vf;
        for i in 0..n {
            for j in 0..n {
                next[(i, j)] -= g_prime_mean[i] * w[(i, j)];
            }
        }
        let next = symmetric_decorrelation(&next)?;
        // rotation change: how far diag(W_new W_old') drifts from ±1
        let overlap = &next * w.transpose();
        let change = (0..n)
            .map(|i| (1.0 - overlap[(i, i)].abs()).abs())
            .fold(0.0f64, f64::max);
        w = next;
        if change < 1e-4 {
            converged = true;
            break;
        }
    }
    Ok((w, converged))
}

/// SparseICA: three stages (fixed-point initializer, orthogonal ICA with
/// symmetric decorrelation, nonorthogonal decoupled updates), minimizing
/// the entropy cost plus the smoothed-ℓ¹ penalty weighted by λ_n.
pub fn run_sparse_ica(x: &DMatrix<f64>, cfg: &SparseConfig) -> Result<DemixingState> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least 2 sources"));
    }
    cfg.validate(n)?;
    // stage 1: fixed-point initializer (skipped for an explicit W)
    let w0 = match &cfg.base.init {
        WInit::Given(w) => w.clone(),
        WInit::Identity => DMatrix::identity(n, n),
        WInit::RandomOrthogonal => init_fastica(x, cfg.base.seed)?.0,
    };
    let lambda = |row: usize| cfg.lambda_for(row);
    let eps = |row: usize| cfg.eps_for(row);
    // stage 2: orthogonal refinement
    let stage2 = Engine {
        x,
        cfg: &cfg.base,
        sparse: Some(SparseTerm {
            lambda: &lambda,
            eps: &eps,
        }),
        orthogonal: true,
    }
    .run(w0)?;
    // stage 3: nonorthogonal decoupled updates
    let stage3 = Engine {
        x,
        cfg: &cfg.base,
        sparse: Some(SparseTerm {
            lambda: &lambda,
            eps: &eps,
        }),
        orthogonal: false,
    }
    .run(stage2.w)?;
    let mut history = stage2.cost_history;
    history.extend_from_slice(&stage3.cost_history);
    Ok(DemixingState {
        w: stage3.w,
        cost_history: history,
        iterations: stage2.iterations + stage3.iterations,
        converged: stage3.converged,
        cost_parts: stage3.cost_parts,
    })
}

/// Variant of `run_ica_emk` that reports the fraction of wall time spent
/// in the parallelizable row loop; used for speedup profiling.
pub fn run_ica_emk_profiled(x: &DMatrix<f64>, cfg: &IcaConfig) -> Result<(DemixingState, f64)> {
    use std::time::Instant;
    let start = Instant::now();
    // run once to measure total time
    let state = run_ica_emk(x, cfg)?;
    let total = start.elapsed().as_secs_f64();
    // estimate the row-loop share by timing the row work in isolation on
    // the final state
    let n = x.nrows();
    let engine = Engine {
        x,
        cfg,
        sparse: None,
        orthogonal: false,
    };
    let row_start = Instant::now();
    let mut scratch = 0usize;
    for row in 0..n {
        let _ = engine.update_row(&state.w, row, 0, &mut scratch)?;
    }
    let per_sweep = row_start.elapsed().as_secs_f64();
    let row_total = per_sweep * state.iterations as f64;
    let fraction = (row_total / total).clamp(0.0, 1.0);
    Ok((state, fraction))
}
