use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Literal transcription of the ISI formula, kept independent of the
/// production implementation as a dual-route oracle.
fn isi_reference(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let mut first = 0.0;
    for row in 0..n {
        let max_p = (0..n).map(|p| g[(row, p)].abs()).fold(0.0f64, f64::max);
        let inner: f64 = (0..n).map(|m| g[(row, m)].abs() / max_p).sum();
        first += inner - 1.0;
    }
    let mut second = 0.0;
    for m in 0..n {
        let max_p = (0..n).map(|p| g[(p, m)].abs()).fold(0.0f64, f64::max);
        let inner: f64 = (0..n).map(|row| g[(row, m)].abs() / max_p).sum();
        second += inner - 1.0;
    }
    (first + second) / (2.0 * n as f64 * (n - 1) as f64)
}

fn perm_diag(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut cols: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        cols.swap(i, rng.gen_range(0..=i));
    }
    let mut g = DMatrix::zeros(n, n);
    for (row, &col) in cols.iter().enumerate() {
        let mut scale = 0.0f64;
        while scale.abs() < 0.1 {
            scale = rng.gen_range(-3.0..3.0);
        }
        g[(row, col)] = scale;
    }
    g
}

#[test]
fn isi_permuted_diagonal_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let g = perm_diag(5, &mut rng);
        assert!(isi(&g).unwrap().abs() < 1e-15);
    }
}

#[test]
fn isi_all_ones_is_one() {
    for n in [2, 3, 7] {
        let g = DMatrix::from_element(n, n, 1.0);
        assert!((isi(&g).unwrap() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn isi_matches_reference_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let g = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-2.0..2.0));
        if (0..3).any(|i| g.row(i).amax() == 0.0) {
            continue;
        }
        assert!((isi(&g).unwrap() - isi_reference(&g)).abs() < 1e-12);
    }
}

#[test]
fn isi_range_and_zero_row_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let value = isi(&g).unwrap();
        assert!((0.0..=1.0).contains(&value));
    }
    let mut g = DMatrix::from_element(3, 3, 1.0);
    g.set_row(1, &nalgebra::RowDVector::zeros(3));
    assert!(isi(&g).is_err());
}

#[test]
fn isi_avg_vs_jnt_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // identical matrices: avg == jnt == isi
    let g = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(0.1..2.0));
    let single = isi(&g).unwrap();
    assert!((isi_avg(&[g.clone(), g.clone()]).unwrap() - single).abs() < 1e-15);
    assert!((isi_jnt(&[g.clone(), g.clone()]).unwrap() - single).abs() < 1e-12);

    // misaligned permutations: per-dataset perfect, jointly not
    let mut g1 = DMatrix::zeros(3, 3);
    g1[(0, 0)] = 1.0;
    g1[(1, 1)] = 2.0;
    g1[(2, 2)] = 1.5;
    let mut g2 = DMatrix::zeros(3, 3);
    g2[(0, 1)] = 1.0;
    g2[(1, 0)] = 1.0;
    g2[(2, 2)] = 1.0;
    let gs = [g1, g2];
    assert!(isi_avg(&gs).unwrap().abs() < 1e-15);
    assert!(isi_jnt(&gs).unwrap() > 0.1);

    // K copies leave jnt unchanged
    let copies: Vec<DMatrix<f64>> = (0..4).map(|_| g.clone()).collect();
    assert!((isi_jnt(&copies).unwrap() - single).abs() < 1e-12);
}

#[test]
fn isr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let g = perm_diag(4, &mut rng);
        assert!(isr(&g).unwrap().abs() < 1e-15);
    }
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 1.0]);
    assert!((isr(&g).unwrap() - 0.025).abs() < 1e-15);
    assert!((isr_normalized(&g).unwrap() - 0.025).abs() < 1e-15);
}

#[test]
fn isr_invariant_to_source_side_permutation_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let n = 4;
        // well-separated global matrix: dominant diagonal plus noise
        let mut g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.2..0.2));
        for i in 0..n {
            g[(i, i)] += rng.gen_range(1.0..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let base = isr(&g).unwrap();
        // permute and rescale rows (estimate relabeling)
        let p = perm_diag(n, &mut rng);
        let pg = &p * &g;
        let permuted = isr(&pg).unwrap();
        assert!(
            (base - permuted).abs() < 1e-12,
            "base {base} vs permuted {permuted}"
        );
    }
}

#[test]
fn gini_identities() {
    assert!(gini(&[1.0; 16]).unwrap().abs() < 1e-15);
    let value = gini(&[0.0, 0.0, 0.0, 5.0]).unwrap();
    assert!((value - 0.75).abs() < 1e-15);
    assert!(gini(&[0.0; 4]).is_err());
}

#[test]
fn gini_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = gini(&u).unwrap();
    for c in [3.0, -0.5, 1e6] {
        let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
        assert!((gini(&scaled).unwrap() - base).abs() < 1e-12);
    }
}

#[test]
fn gini_orders_ggd_shapes() {
    // sparser shape (smaller beta) has the larger index, averaged over trials
    let mean_gini = |beta: f64, seed: u64| {
        let mut acc = 0.0;
        for trial in 0..100u64 {
            let spec = crate::sources::GgdSpec::new(beta, 1.0, 0.0).unwrap();
            let x = crate::sources::sample_ggd(&spec, 10_000, seed + trial).unwrap();
            acc += gini(&x).unwrap();
        }
        acc / 100.0
    };
    let sparse = mean_gini(0.1, 1000);
    let dense = mean_gini(0.5, 2000);
    assert!(sparse > dense, "gini(0.1) = {sparse} vs gini(0.5) = {dense}");
}

#[test]
fn assign_identity_and_reversal() {
    let eye = DMatrix::<f64>::identity(4, 4);
    assert_eq!(assign(&eye).unwrap(), vec![0, 1, 2, 3]);
    let anti = DMatrix::from_fn(4, 4, |i, j| if i + j == 3 { 1.0 } else { 0.0 });
    assert_eq!(assign(&anti).unwrap(), vec![3, 2, 1, 0]);
}

fn brute_force_best(sim: &DMatrix<f64>) -> f64 {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q: Vec<usize> = p.iter().map(|&x| if x >= pos { x + 1 } else { x }).collect();
                q.push(pos);
                out.push(q);
            }
        }
        out
    }
    permutations(sim.nrows())
        .into_iter()
        .map(|p| (0..sim.nrows()).map(|i| sim[(i, p[i])]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn assign_optimal_vs_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..100 {
        let n = 2 + trial % 5; // up to 6x6
        let sim = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0));
        let perm = assign(&sim).unwrap();
        let total: f64 = (0..n).map(|i| sim[(i, perm[i])]).sum();
        let best = brute_force_best(&sim);
        assert!(
            (total - best).abs() < 1e-10,
            "n={n}: hungarian {total} vs brute force {best}"
        );
        // result is a permutation
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
    }
}

#[test]
fn pair_correlation_recovers_planted_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 5;
    let v = 500;
    let s_true = DMatrix::from_fn(n, v, |_, _| rng.gen_range(-1.0..1.0f64));
    // estimate = scaled, sign-flipped, permuted truth
    let perm = [2usize, 0, 4, 1, 3];
    let mut s_est = DMatrix::zeros(n, v);
    for (est_row, &true_row) in perm.iter().enumerate() {
        let scale = if est_row % 2 == 0 { -2.5 } else { 0.3 };
        for j in 0..v {
            s_est[(est_row, j)] = scale * s_true[(true_row, j)];
        }
    }
    let (found, corrs) = pair_correlation(&s_true, &s_est).unwrap();
    assert_eq!(found, perm.to_vec());
    assert!(corrs.iter().all(|&c| (c - 1.0).abs() < 1e-12));
}

#[test]
fn pair_correlation_noise_is_uncorrelated() {
    let v = 10_000;
    let n = 4;
    let mut successes = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let s_true = DMatrix::from_fn(n, v, |_, _| rng.gen_range(-1.0..1.0f64));
        let s_est = DMatrix::from_fn(n, v, |_, _| rng.gen_range(-1.0..1.0f64));
        let (_, corrs) = pair_correlation(&s_true, &s_est).unwrap();
        let mean = corrs.iter().sum::<f64>() / n as f64;
        if mean < 0.03 {
            successes += 1;
        }
    }
    assert!(successes >= 19, "only {successes}/20 below threshold");
}

#[test]
fn pair_correlation_constant_row_errors() {
    let s_true = DMatrix::from_fn(2, 50, |i, j| (i + j) as f64);
    let mut s_est = s_true.clone();
    s_est.set_row(1, &nalgebra::RowDVector::from_element(50, 3.0));
    let err = pair_correlation(&s_true, &s_est).unwrap_err();
    assert!(err.to_string().contains("row 1"));
}
