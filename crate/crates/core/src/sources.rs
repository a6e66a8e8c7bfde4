//! Synthetic data generators for the benchmark experiments: univariate GGD
//! and GGD-mixture sources, Gamma sources, MGGD source component vectors
//! with AR(1)-structured scatter, and simplified fMRI-like spatial maps
//! with Rician noise at a prescribed contrast-to-noise ratio.
//!
//! Every sampler is a pure function of `(spec, seed)` and returns
//! bit-identical output for identical inputs.

use nalgebra::{DMatrix, DVector};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mggd::{MggdParams, SpdMatrix};

/// Univariate generalized Gaussian: shape `beta`, scale `sigma`,
/// location `mu`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GgdSpec {
    pub beta: f64,
    pub sigma: f64,
    pub mu: f64,
}

impl GgdSpec {
    pub fn new(beta: f64, sigma: f64, mu: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !mu.is_finite() {
            return Err(Error::invalid(format!("mu must be finite, got {mu}")));
        }
        Ok(GgdSpec { beta, sigma, mu })
    }

    /// Normalizing constant `η = β / (2^{1/(2β)} Γ(1/(2β)) σ)`.
    pub fn norm_const(&self) -> f64 {
        let inv2b = 1.0 / (2.0 * self.beta);
        self.beta / (2f64.powf(inv2b) * ln_gamma(inv2b).exp() * self.sigma)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GgdMixtureSpec {
    pub kernels: Vec<GgdSpec>,
    pub weights: Vec<f64>,
}

impl GgdMixtureSpec {
    pub fn new(kernels: Vec<GgdSpec>, weights: Vec<f64>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::invalid("mixture needs at least one kernel"));
        }
        if kernels.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} kernels but {} weights",
                kernels.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(GgdMixtureSpec { kernels, weights })
    }
}

/// Noise applied to a mixing problem, kept for provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub kind: String,
    pub scale: f64,
    pub achieved_cnr: f64,
}

/// A generated separation problem: `observations = mixing · sources`, plus
/// an optional noise record when the observations are noisy.
#[derive(Debug, Clone)]
pub struct MixingProblem {
    pub sources: DMatrix<f64>,
    pub mixing: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub noise: Option<NoiseRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmriScenarioKind {
    AllSparseNoOverlap,
    MixedSparsityNoOverlap,
    MixedSparsityOverlap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FmriScenario {
    pub scenario: FmriScenarioKind,
    pub n_sources: usize,
    pub image_side: usize,
    pub n_timepoints: usize,
    pub n_subjects: usize,
    pub cnr: Option<f64>,
}

impl FmriScenario {
    pub fn new(scenario: FmriScenarioKind) -> Self {
        FmriScenario {
            scenario,
            n_sources: 20,
            image_side: 100,
            n_timepoints: 260,
            n_subjects: 10,
            cnr: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.image_side == 0 || self.n_subjects == 0 {
            return Err(Error::invalid("source, image and subject counts must be positive"));
        }
        if self.n_timepoints < 2 {
            return Err(Error::invalid("need at least 2 timepoints"));
        }
        if let Some(c) = self.cnr {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("cnr must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// GGD density `η exp(-|x-μ|^{2β} / (2σ^{2β}))`.
pub fn ggd_pdf(x: f64, spec: &GgdSpec) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("x must be finite, got {x}")));
    }
    let z = (x - spec.mu).abs() / spec.sigma;
    Ok(spec.norm_const() * (-z.powf(2.0 * spec.beta) / 2.0).exp())
}

/// Draws i.i.d. GGD samples through the Gamma power transform:
/// `x = μ ± σ g^{1/(2β)}` with `g ~ Gamma(1/(2β), scale 2)`.
pub fn sample_ggd(spec: &GgdSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(1.0 / (2.0 * spec.beta), 2.0)
        .map_err(|e| Error::invalid(format!("gamma sampler: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let g: f64 = gamma.sample(&mut rng);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        out.push(spec.mu + sign * spec.sigma * g.powf(1.0 / (2.0 * spec.beta)));
    }
    Ok(out)
}

/// Draws from a GGD mixture: the component index by weight, then the
/// selected kernel.
pub fn sample_ggd_mixture(spec: &GgdMixtureSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = WeightedIndex::new(&spec.weights)
        .map_err(|e| Error::invalid(format!("mixture weights: {e}")))?;
    let gammas: Vec<Gamma<f64>> = spec
        .kernels
        .iter()
        .map(|k| {
            Gamma::new(1.0 / (2.0 * k.beta), 2.0)
                .map_err(|e| Error::invalid(format!("gamma sampler: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let c = index.sample(&mut rng);
        let k = &spec.kernels[c];
        let g: f64 = gammas[c].sample(&mut rng);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        out.push(k.mu + sign * k.sigma * g.powf(1.0 / (2.0 * k.beta)));
    }
    Ok(out)
}

/// Draws from the Gamma density `p(x) = x^{β-1} e^{-x} / Γ(β)` (skewed
/// unimodal sources used alongside the GGD banks).
pub fn sample_gamma_source(shape: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("need n >= 1"));
    }
    if !(shape > 0.0) {
        return Err(Error::invalid(format!("shape must be positive, got {shape}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma =
        Gamma::new(shape, 1.0).map_err(|e| Error::invalid(format!("gamma sampler: {e}")))?;
    Ok((0..n).map(|_| gamma.sample(&mut rng)).collect())
}

/// AR(1)-structured scatter `Σ(i,j) = σ^{|i-j|}` (Kac–Murdock–Szegő
/// matrix; positive definite for `|σ| < 1`).
pub fn make_ar1_scatter(k: usize, sigma: f64) -> Result<SpdMatrix> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::invalid(format!("sigma must be in [0,1), got {sigma}")));
    }
    if k == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let m = DMatrix::from_fn(k, k, |i, j| sigma.powi((i as i64 - j as i64).unsigned_abs() as i32));
    SpdMatrix::new(m)
}

/// Draws MGGD samples through the spherical stochastic representation
/// `y = r Σ^{1/2} u`, `u` uniform on the unit sphere,
/// `r = (2 m^β t)^{1/(2β)}` with `t ~ Gamma(K/(2β), 1)`. Returns `K×n`.
pub fn sample_mggd(params: &MggdParams, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("need n >= 1"));
    }
    let k = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(k as f64 / (2.0 * params.shape), 1.0)
        .map_err(|e| Error::invalid(format!("gamma sampler: {e}")))?;
    let sqrt_sigma = params.scatter.sqrt();
    let two_m_beta = 2.0 * params.scale.powf(params.shape);
    let mut out = DMatrix::zeros(k, n);
    let mut dir = DVector::zeros(k);
    for col in 0..n {
        loop {
            for a in 0..k {
                dir[a] = rng.sample::<f64, _>(StandardNormal);
            }
            let norm = dir.norm();
            if norm > 1e-300 {
                dir /= norm;
                break;
            }
        }
        let t: f64 = gamma.sample(&mut rng);
        let r = (two_m_beta * t).powf(1.0 / (2.0 * params.shape));
        let y = sqrt_sigma.as_matrix() * &dir * r;
        out.set_column(col, &y);
    }
    Ok(out)
}

/// Square mixing matrix with i.i.d. standard normal entries.
pub fn random_mixing(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Mixes sources with a random square standard-normal matrix, retrying the
/// draw if the matrix is numerically rank deficient.
pub fn mix_random(sources: DMatrix<f64>, seed: u64) -> MixingProblem {
    let n = sources.nrows();
    let mut sub = 0u64;
    let mixing = loop {
        let a = random_mixing(n, n, crate::seed::derive(seed, &[0x61, sub]));
        let svd = a.clone().svd(false, false);
        let smin = svd.singular_values.min();
        let smax = svd.singular_values.max();
        if smin > 1e-6 * smax {
            break a;
        }
        sub += 1;
    };
    let observations = &mixing * &sources;
    MixingProblem {
        sources,
        mixing,
        observations,
        noise: None,
    }
}

/// Rasterizes an isotropic Gaussian blob onto a `side × side` image,
/// flattened row-major.
pub fn rasterize_blob(side: usize, cx: f64, cy: f64, spread: f64) -> DVector<f64> {
    let mut v = DVector::zeros(side * side);
    let denom = 2.0 * spread * spread;
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            v[y * side + x] = (-(dx * dx + dy * dy) / denom).exp();
        }
    }
    v
}

/// Per-voxel temporal standard deviation averaged over voxels.
fn mean_temporal_std(m: &DMatrix<f64>) -> f64 {
    let t = m.nrows() as f64;
    let mut acc = 0.0;
    for v in 0..m.ncols() {
        let col = m.column(v);
        let mean = col.sum() / t;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t;
        acc += var.sqrt();
    }
    acc / m.ncols() as f64
}

/// Contrast-to-noise ratio: mean temporal std of the signal over mean
/// temporal std of the noise.
pub fn measure_cnr(signal: &DMatrix<f64>, noise: &DMatrix<f64>) -> f64 {
    mean_temporal_std(signal) / mean_temporal_std(noise)
}

/// Applies magnitude (Rician) noise `sqrt((x+n1)² + n2²)` at scale `s` and
/// removes the per-voxel mean offset it introduces, so the returned noise
/// component is zero-mean. The magnitude transform is taken around a
/// positive baseline (as in magnitude MR images, where intensities sit on
/// a large positive offset); the baseline cancels out of the returned
/// noise.
fn rician_noise(
    clean: &DMatrix<f64>,
    baseline: f64,
    s: f64,
    n1: &DMatrix<f64>,
    n2: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (rows, cols) = clean.shape();
    let mut noise = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            let x = clean[(i, j)] + baseline;
            let y = ((x + s * n1[(i, j)]).powi(2) + (s * n2[(i, j)]).powi(2)).sqrt();
            noise[(i, j)] = y - x;
        }
    }
    // bias correction: magnitude noise has a positive mean; remove it per
    // voxel so observations stay centered on the clean signal
    for j in 0..cols {
        let mean = noise.column(j).sum() / rows as f64;
        for i in 0..rows {
            noise[(i, j)] -= mean;
        }
    }
    noise
}

/// Smooth random time course: AR(1)-filtered white noise, standardized.
fn smooth_time_course(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let rho = 0.9f64;
    let innov = (1.0 - rho * rho).sqrt();
    let mut v = DVector::zeros(len);
    let mut prev: f64 = rng.sample(StandardNormal);
    v[0] = prev;
    for t in 1..len {
        prev = rho * prev + innov * rng.sample::<f64, _>(StandardNormal);
        v[t] = prev;
    }
    let mean = v.sum() / len as f64;
    v.apply(|x| *x -= mean);
    let norm = (v.norm_squared() / len as f64).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

struct BlobLayout {
    centers: Vec<(f64, f64)>,
    spreads: Vec<f64>,
    jitter: f64,
}

fn scenario_layout(spec: &FmriScenario) -> Result<BlobLayout> {
    let n = spec.n_sources;
    let side = spec.image_side as f64;
    let grid = (n as f64).sqrt().ceil() as usize;
    let base_spacing = side / grid as f64;
    let (spacing, origin) = match spec.scenario {
        FmriScenarioKind::MixedSparsityOverlap => {
            // 40% tighter grid, packed toward the image center.
            let s = 0.6 * base_spacing;
            let extent = s * grid as f64;
            (s, (side - extent) / 2.0)
        }
        _ => (base_spacing, 0.0),
    };
    if spacing < 2.0 {
        return Err(Error::invalid(format!(
            "grid too small to place {n} blobs on a {0}x{0} image without collapsing",
            spec.image_side
        )));
    }
    let base_spread = base_spacing / 8.0;
    let mut centers = Vec::with_capacity(n);
    let mut spreads = Vec::with_capacity(n);
    for i in 0..n {
        let gx = i % grid;
        let gy = i / grid;
        centers.push((
            origin + (gx as f64 + 0.5) * spacing,
            origin + (gy as f64 + 0.5) * spacing,
        ));
        let wide = match spec.scenario {
            FmriScenarioKind::AllSparseNoOverlap => false,
            _ => i % 3 == 2,
        };
        spreads.push(if wide { 3.0 * base_spread } else { base_spread });
    }
    Ok(BlobLayout {
        centers,
        spreads,
        jitter: 0.05 * spacing,
    })
}

/// Generates one fMRI-like dataset per subject: Gaussian-blob spatial maps
/// (shared layout, small per-subject center jitter), smooth random time
/// courses as the mixing matrix, and optional Rician noise scaled to hit
/// the requested CNR.
pub fn gen_fmri_like(spec: &FmriScenario, seed: u64) -> Result<Vec<MixingProblem>> {
    spec.validate()?;
    let layout = scenario_layout(spec)?;
    let v = spec.image_side * spec.image_side;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for subject in 0..spec.n_subjects {
        let sseed = crate::seed::derive(seed, &[0xf1, subject as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(sseed);
        let mut sources = DMatrix::zeros(spec.n_sources, v);
        for (i, (&(cx, cy), &spread)) in layout.centers.iter().zip(&layout.spreads).enumerate() {
            let jx = rng.gen_range(-layout.jitter..=layout.jitter);
            let jy = rng.gen_range(-layout.jitter..=layout.jitter);
            let blob = rasterize_blob(spec.image_side, cx + jx, cy + jy, spread);
            sources.set_row(i, &blob.transpose());
        }
        let mut mixing = DMatrix::zeros(spec.n_timepoints, spec.n_sources);
        for col in 0..spec.n_sources {
            mixing.set_column(col, &smooth_time_course(spec.n_timepoints, &mut rng));
        }
        let clean = &mixing * &sources;
        let (observations, noise) = match spec.cnr {
            None => (clean, None),
            Some(target) => {
                let n1 = DMatrix::from_fn(spec.n_timepoints, v, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let n2 = DMatrix::from_fn(spec.n_timepoints, v, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                let signal_level = mean_temporal_std(&clean);
                let baseline = 2.0 * clean.amax() + 10.0 * signal_level;
                // noise std grows monotonically with s; bisect s to the
                // target CNR
                let mut lo = 1e-9 * signal_level;
                let mut hi = 100.0 * signal_level / target;
                let mut achieved = f64::NAN;
                let mut scale = hi;
                for _ in 0..60 {
                    scale = 0.5 * (lo + hi);
                    let noise = rician_noise(&clean, baseline, scale, &n1, &n2);
                    achieved = measure_cnr(&clean, &noise);
                    if achieved > target {
                        lo = scale;
                    } else {
                        hi = scale;
                    }
                    if (achieved - target).abs() / target < 1e-4 {
                        break;
                    }
                }
                let noise = rician_noise(&clean, baseline, scale, &n1, &n2);
                (
                    &clean + &noise,
                    Some(NoiseRecord {
                        kind: "rician".into(),
                        scale,
                        achieved_cnr: achieved,
                    }),
                )
            }
        };
        subjects.push(MixingProblem {
            sources,
            mixing,
            observations,
            noise,
        });
    }
    Ok(subjects)
}
