//! Separation-quality and sparsity metrics: ISI (single, average, joint),
//! ISR on the assignment-aligned global matrix, the Gini sparsity index,
//! and absolute-correlation pairing with an optimal linear assignment.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Normalized intersymbol-interference of a global matrix `G = W·A`;
/// 0 for a permuted diagonal matrix, 1 for the all-ones matrix.
pub fn isi(g: &DMatrix<f64>) -> Result<f64> {
    let n = g.nrows();
    if n != g.ncols() {
        return Err(Error::Dimension(format!(
            "global matrix must be square, got {}x{}",
            n,
            g.ncols()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("ISI needs at least a 2x2 matrix"));
    }
    let a = g.map(f64::abs);
    let mut row_max = vec![0.0f64; n];
    let mut col_max = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            row_max[i] = row_max[i].max(a[(i, j)]);
            col_max[j] = col_max[j].max(a[(i, j)]);
        }
    }
    if row_max.iter().any(|&m| m == 0.0) || col_max.iter().any(|&m| m == 0.0) {
        return Err(Error::degenerate("global matrix has an all-zero row or column"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += a[(i, j)] / row_max[i] + a[(i, j)] / col_max[j];
        }
    }
    total -= 2.0 * n as f64;
    Ok(total / (2.0 * n as f64 * (n - 1) as f64))
}

/// Mean of the per-dataset ISI values.
pub fn isi_avg(gs: &[DMatrix<f64>]) -> Result<f64> {
    if gs.is_empty() {
        return Err(Error::invalid("need at least one global matrix"));
    }
    let mut acc = 0.0;
    for g in gs {
        acc += isi(g)?;
    }
    Ok(acc / gs.len() as f64)
}

/// Joint ISI: the ISI of the entrywise sum of absolute global matrices.
/// Misaligned permutations across datasets raise it even when every
/// per-dataset ISI is zero.
pub fn isi_jnt(gs: &[DMatrix<f64>]) -> Result<f64> {
    if gs.is_empty() {
        return Err(Error::invalid("need at least one global matrix"));
    }
    let mut total = gs[0].map(f64::abs);
    for g in &gs[1..] {
        if g.shape() != total.shape() {
            return Err(Error::Dimension("global matrices differ in shape".into()));
        }
        total += g.map(f64::abs);
    }
    isi(&total)
}

/// Optimal assignment maximizing `Σ_n similarity[n, π(n)]` (Hungarian
/// algorithm with potentials; exact, not greedy).
pub fn assign(similarity: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = similarity.nrows();
    if n != similarity.ncols() {
        return Err(Error::Dimension(format!(
            "similarity matrix must be square, got {}x{}",
            n,
            similarity.ncols()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("empty similarity matrix"));
    }
    // Convert maximization to minimization.
    let top = similarity.amax();
    let cost = similarity.map(|v| top - v);

    // Shortest-augmenting-path Hungarian with row/column potentials
    // (1-based internal indexing; column 0 is the virtual start).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        result[p[j] - 1] = j - 1;
    }
    Ok(result)
}

/// Average interference-to-source ratio. Rows are aligned to sources by a
/// max-|entry| assignment; on the aligned matrix,
/// `ISR = (1/N) Σ_n (Σ_{m≠n} g̃_{nm}²) / g̃_{nn}²`.
pub fn isr(g: &DMatrix<f64>) -> Result<f64> {
    let n = g.nrows();
    if n != g.ncols() {
        return Err(Error::Dimension(format!(
            "global matrix must be square, got {}x{}",
            n,
            g.ncols()
        )));
    }
    let perm = assign(&g.map(f64::abs))?;
    let mut total = 0.0;
    for row in 0..n {
        let diag = g[(row, perm[row])];
        if diag == 0.0 {
            return Err(Error::degenerate(format!(
                "assignment degenerate: aligned entry for row {row} is zero"
            )));
        }
        let mut off = 0.0;
        for m in 0..n {
            if m != perm[row] {
                off += g[(row, m)].powi(2);
            }
        }
        total += off / diag.powi(2);
    }
    Ok(total / n as f64)
}

/// `isr` divided by `N - 1`, the normalization used on benchmark axes.
pub fn isr_normalized(g: &DMatrix<f64>) -> Result<f64> {
    let n = g.nrows();
    if n < 2 {
        return Err(Error::invalid("normalized ISR needs at least 2 sources"));
    }
    Ok(isr(g)? / (n - 1) as f64)
}

/// Gini sparsity index on the absolute coordinates, in [0, 1]:
/// `1 - 2 Σ_v (|u|_(v)/||u||₁) ((V - v + 1/2)/V)` over ascending sorted
/// values. 0 for a constant vector, `1 - 1/V` for a one-hot vector.
pub fn gini(u: &[f64]) -> Result<f64> {
    let v = u.len();
    if v == 0 {
        return Err(Error::invalid("empty vector"));
    }
    let mut a: Vec<f64> = u.iter().map(|x| x.abs()).collect();
    let l1: f64 = a.iter().sum();
    if l1 == 0.0 {
        return Err(Error::degenerate("zero vector has no sparsity index"));
    }
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let vf = v as f64;
    let mut acc = 0.0;
    for (idx, val) in a.iter().enumerate() {
        let rank = (idx + 1) as f64;
        acc += val / l1 * ((vf - rank + 0.5) / vf);
    }
    Ok(1.0 - 2.0 * acc)
}

/// Pairs estimated sources with true sources by maximizing total absolute
/// Pearson correlation. Returns the permutation (row `n` of `s_est`
/// matches row `perm[n]` of `s_true`) and the aligned `|corr|` values.
pub fn pair_correlation(
    s_true: &DMatrix<f64>,
    s_est: &DMatrix<f64>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = s_true.nrows();
    if s_est.nrows() != n {
        return Err(Error::Dimension(format!(
            "row counts differ: {} true vs {} estimated",
            n,
            s_est.nrows()
        )));
    }
    if s_true.ncols() != s_est.ncols() {
        return Err(Error::Dimension("sample counts differ".into()));
    }
    let center = |m: &DMatrix<f64>, label: &str| -> Result<(DMatrix<f64>, Vec<f64>)> {
        let v = m.ncols() as f64;
        let mut c = m.clone();
        let mut norms = Vec::with_capacity(m.nrows());
        for i in 0..m.nrows() {
            let mean = m.row(i).sum() / v;
            for j in 0..m.ncols() {
                c[(i, j)] -= mean;
            }
            let norm = c.row(i).norm();
            if norm == 0.0 {
                return Err(Error::degenerate(format!("row {i} of {label} is constant")));
            }
            norms.push(norm);
        }
        Ok((c, norms))
    };
    let (ct, nt) = center(s_true, "s_true")?;
    let (ce, ne) = center(s_est, "s_est")?;
    let mut sim = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sim[(i, j)] = (ce.row(i).dot(&ct.row(j)) / (ne[i] * nt[j])).abs();
        }
    }
    let perm = assign(&sim)?;
    let corrs = (0..n).map(|i| sim[(i, perm[i])]).collect();
    Ok((perm, corrs))
}

#[cfg(test)]
mod tests;
