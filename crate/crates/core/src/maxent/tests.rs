use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

fn gaussian_triple() -> MeasuringFunctionSet {
    MeasuringFunctionSet::custom(vec![
        MeasuringFunction::One,
        MeasuringFunction::X,
        MeasuringFunction::XSquared,
    ])
    .unwrap()
}

#[test]
fn lagrange_standard_normal() {
    let functions = gaussian_triple();
    let lambdas = solve_lagrange(
        &functions,
        &[1.0, 0.0, 1.0],
        &[0.0, 0.0, -0.1],
        (-10.0, 10.0),
        1e-10,
        100,
    )
    .unwrap();
    assert!((lambdas[0] - (1.0 - 0.5 * LN_2PI)).abs() < 1e-6, "{lambdas:?}");
    assert!(lambdas[1].abs() < 1e-6);
    assert!((lambdas[2] + 0.5).abs() < 1e-6);
}

#[test]
fn lagrange_translated_gaussian() {
    let functions = gaussian_triple();
    let mu = 1.7;
    let lambdas = solve_lagrange(
        &functions,
        &[1.0, mu, mu * mu + 1.0],
        &[0.0, 0.0, -0.1],
        (mu - 10.0, mu + 10.0),
        1e-10,
        100,
    )
    .unwrap();
    // N(μ, 1): λ = (1 - ln(2π)/2 - μ²/2, μ, -1/2)
    assert!((lambdas[0] - (1.0 - 0.5 * LN_2PI - mu * mu / 2.0)).abs() < 1e-6);
    assert!((lambdas[1] - mu).abs() < 1e-6);
    assert!((lambdas[2] + 0.5).abs() < 1e-6);
}

#[test]
fn lagrange_rational_constraint_inactive_for_gaussian_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let functions = MeasuringFunctionSet::globals();
    let n = samples.len() as f64;
    let alphas: Vec<f64> = functions
        .functions
        .iter()
        .map(|f| samples.iter().map(|&x| f.eval(x)).sum::<f64>() / n)
        .collect();
    let lambdas = solve_lagrange(
        &functions,
        &alphas,
        &[1.0 - 0.5 * LN_2PI, 0.0, -0.5, 0.0],
        (-12.0, 12.0),
        1e-9,
        200,
    )
    .unwrap();
    assert!(lambdas[3].abs() < 0.1, "lambda_4 = {}", lambdas[3]);
}

#[test]
fn lagrange_rejects_bad_alpha1_and_singular_sets() {
    let functions = gaussian_triple();
    assert!(solve_lagrange(&functions, &[0.9, 0.0, 1.0], &[0.0; 3], (-5.0, 5.0), 1e-8, 50).is_err());
    // duplicated measuring function makes the Jacobian singular
    let dup = MeasuringFunctionSet::custom(vec![
        MeasuringFunction::One,
        MeasuringFunction::X,
        MeasuringFunction::X,
    ])
    .unwrap();
    let r = solve_lagrange(&dup, &[1.0, 0.0, 0.0], &[0.0; 3], (-5.0, 5.0), 1e-10, 50);
    assert!(r.is_err());
}

#[test]
fn entropy_gaussian_and_uniform() {
    let functions = gaussian_triple();
    let lambdas = solve_lagrange(
        &functions,
        &[1.0, 0.0, 1.0],
        &[0.0, 0.0, -0.1],
        (-10.0, 10.0),
        1e-10,
        100,
    )
    .unwrap();
    let density = MaxEntDensity {
        functions,
        lambdas,
        alphas: vec![1.0, 0.0, 1.0],
        support: (-10.0, 10.0),
    };
    let expected = 0.5 * (LN_2PI + 1.0); // ½ ln(2πe)
    assert!((density.entropy() - expected).abs() < 1e-5);

    // only the normalization constraint on [0,1]: the uniform density
    let constant = MeasuringFunctionSet::custom(vec![MeasuringFunction::One]).unwrap();
    let lambdas = solve_lagrange(&constant, &[1.0], &[0.5], (0.0, 1.0), 1e-12, 100).unwrap();
    let uniform = MaxEntDensity {
        functions: constant,
        lambdas,
        alphas: vec![1.0],
        support: (0.0, 1.0),
    };
    assert!(uniform.entropy().abs() < 1e-9, "{}", uniform.entropy());
}

#[test]
fn entropy_shift_under_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<f64> = (0..20_000)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.8 + 0.3)
        .collect();
    let base = fit_emk_default(&samples).unwrap();
    let c = 2.0;
    let scaled: Vec<f64> = samples.iter().map(|&x| c * x).collect();
    let refit = fit_emk_default(&scaled).unwrap();
    let shift = refit.entropy() - base.entropy();
    assert!(
        (shift - c.ln()).abs() < 0.02,
        "entropy shift {shift} vs ln {c} = {}",
        c.ln()
    );
}

#[test]
fn score_gaussian_analytic() {
    let functions = gaussian_triple();
    let lambdas = solve_lagrange(
        &functions,
        &[1.0, 0.0, 1.0],
        &[0.0, 0.0, -0.1],
        (-10.0, 10.0),
        1e-10,
        100,
    )
    .unwrap();
    let density = MaxEntDensity {
        functions,
        lambdas,
        alphas: vec![1.0, 0.0, 1.0],
        support: (-10.0, 10.0),
    };
    for x in [-2.0, 0.0, 3.0] {
        assert!((density.score(x) + x).abs() < 1e-8, "score({x}) = {}", density.score(x));
    }
}

#[test]
fn score_zero_at_origin_for_symmetric_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f64> = (0..5000)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v
        })
        .collect();
    // symmetrize the sample so odd moments vanish exactly
    let sym: Vec<f64> = samples.iter().flat_map(|&x| [x, -x]).collect();
    let density = fit_emk_default(&sym).unwrap();
    assert!(density.score(0.0).abs() < 1e-6, "{}", density.score(0.0));
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<f64> = (0..5000)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z.tanh() * 3.0 + 0.2 * z
        })
        .collect();
    let density = fit_emk_default(&samples).unwrap();
    let h = 1e-6;
    for i in 0..20 {
        let x = -2.5 + 0.25 * i as f64;
        let fd = (density.log_pdf(x + h) - density.log_pdf(x - h)) / (2.0 * h);
        assert!(
            (density.score(x) - fd).abs() < 1e-5,
            "x={x}: score {} vs fd {fd}",
            density.score(x)
        );
    }
}

#[test]
fn fit_normalizes_and_satisfies_constraints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<f64> = (0..10_000)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * 1.3 - 0.4)
        .collect();
    let density = fit_emk_default(&samples).unwrap();
    // trapezoid integral over the support
    let xs = density.grid();
    let h = xs[1] - xs[0];
    let mut integral = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let w = if i == 0 || i == xs.len() - 1 { 0.5 } else { 1.0 };
        integral += w * density.pdf(x) * h;
    }
    assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    // moment constraints hold at solver tolerance
    for (i, f) in density.functions.functions.iter().enumerate() {
        let mut moment = 0.0;
        for (j, &x) in xs.iter().enumerate() {
            let w = if j == 0 || j == xs.len() - 1 { 0.5 } else { 1.0 };
            moment += w * f.eval(x) * density.pdf(x) * h;
        }
        assert!(
            (moment - density.alphas[i]).abs() < 1e-6,
            "constraint {i}: {moment} vs {}",
            density.alphas[i]
        );
    }
}

#[test]
fn fit_gaussian_data_rarely_accepts_kernels() {
    let mut accepted = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let density = fit_emk_default(&samples).unwrap();
        if density.functions.len() > 4 {
            accepted += 1;
        }
    }
    assert!(accepted <= 10, "{accepted}/100 runs accepted local kernels");
}

#[test]
fn fit_bimodal_data_accepts_kernels() {
    let mut accepted = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                if rng.gen::<bool>() {
                    z + 4.0
                } else {
                    z - 4.0
                }
            })
            .collect();
        let density = fit_emk_default(&samples).unwrap();
        if density.functions.len() > 4 {
            accepted += 1;
        }
    }
    assert!(accepted >= 90, "only {accepted}/100 runs accepted a kernel");
}

#[test]
fn fit_rejects_degenerate_input() {
    assert!(fit_emk_default(&[1.0; 500]).is_err());
    assert!(fit_emk_default(&[1.0; 50]).is_err());
    let with_nan: Vec<f64> = (0..200).map(|i| if i == 7 { f64::NAN } else { i as f64 }).collect();
    assert!(fit_emk_default(&with_nan).is_err());
}

#[test]
fn newton_solution_is_stationary() {
    // residual gradient norm below tolerance at the solution
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<f64> = (0..5000)
        .map(|_| rng.sample::<f64, _>(StandardNormal).powi(3))
        .collect();
    let density = fit_emk_default(&samples).unwrap();
    let xs = density.grid();
    let h = xs[1] - xs[0];
    let mut worst: f64 = 0.0;
    for (i, f) in density.functions.functions.iter().enumerate() {
        let mut resid = 0.0;
        for (j, &x) in xs.iter().enumerate() {
            let w = if j == 0 || j == xs.len() - 1 { 0.5 } else { 1.0 };
            resid += w * (f.eval(x) - density.alphas[i]) * density.pdf(x) * h;
        }
        worst = worst.max(resid.abs());
    }
    assert!(worst < 1e-6, "stationarity residual {worst}");
}
