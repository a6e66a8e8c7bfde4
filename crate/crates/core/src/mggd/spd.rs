//! Symmetric positive-definite matrices and the affine-invariant geometry
//! used by the Riemannian-averaged fixed point iteration.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::serde_mat;

/// A symmetric positive-definite matrix.
///
/// Construction symmetrizes the input and rejects matrices whose asymmetry
/// exceeds the stated tolerance or whose spectrum is not strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdMatrix {
    #[serde(with = "serde_mat")]
    entries: DMatrix<f64>,
}

impl SpdMatrix {
    /// Wraps a matrix expected to be symmetric to within `1e-12` relative
    /// asymmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::from_nearly_symmetric(m, 1e-12)
    }

    /// Wraps a matrix after symmetrization, allowing up to `tol` relative
    /// asymmetry (useful for matrices assembled from sums of outer
    /// products, which carry rounding noise).
    pub fn from_nearly_symmetric(m: DMatrix<f64>, tol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > tol * scale.max(1.0) {
            return Err(Error::InvalidParam(format!(
                "matrix is not symmetric: max asymmetry {asym:.3e}"
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidParam(format!(
                "matrix is not positive definite: min eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(SpdMatrix { entries: sym })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            entries: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.entries.clone())
    }

    /// Matrix power `A^t` through the eigendecomposition.
    pub fn powf(&self, t: f64) -> SpdMatrix {
        let eig = self.eigen();
        let powered = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.powf(t)));
        let m = &eig.eigenvectors * powered * eig.eigenvectors.transpose();
        SpdMatrix {
            entries: (&m + m.transpose()) * 0.5,
        }
    }

    pub fn sqrt(&self) -> SpdMatrix {
        self.powf(0.5)
    }

    pub fn inv_sqrt(&self) -> SpdMatrix {
        self.powf(-0.5)
    }

    pub fn inverse(&self) -> SpdMatrix {
        self.powf(-1.0)
    }

    pub fn log_det(&self) -> f64 {
        self.eigen().eigenvalues.iter().map(|l| l.ln()).sum()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// Rescales so that `trace = dim`, the gauge convention used by the
    /// scatter estimators (scale lives in the MGGD `m` parameter).
    pub fn normalized_trace(&self) -> SpdMatrix {
        let k = self.dim() as f64;
        SpdMatrix {
            entries: &self.entries * (k / self.trace()),
        }
    }

    /// Frobenius distance to another matrix of the same dimension.
    pub fn frobenius_distance(&self, other: &SpdMatrix) -> f64 {
        (&self.entries - &other.entries).norm()
    }
}

fn check_dims(p: &SpdMatrix, q: &SpdMatrix) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension(format!(
            "SPD dimensions differ: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Affine-invariant Riemannian distance `|| log(P^{-1/2} Q P^{-1/2}) ||_F`.
pub fn riem_distance(p: &SpdMatrix, q: &SpdMatrix) -> Result<f64> {
    check_dims(p, q)?;
    let pis = p.inv_sqrt();
    let inner = pis.as_matrix() * q.as_matrix() * pis.as_matrix();
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    Ok(eig
        .eigenvalues
        .iter()
        .map(|l| l.ln().powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Point at parameter `t` on the geodesic from `P` to `Q`:
/// `P^{1/2} (P^{-1/2} Q P^{-1/2})^t P^{1/2}`.
pub fn riem_average(p: &SpdMatrix, q: &SpdMatrix, t: f64) -> Result<SpdMatrix> {
    check_dims(p, q)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("ratio t must be in [0,1], got {t}")));
    }
    let ps = p.sqrt();
    let pis = p.inv_sqrt();
    let inner = pis.as_matrix() * q.as_matrix() * pis.as_matrix();
    let inner = SpdMatrix::from_nearly_symmetric(inner, 1e-9)?;
    let powered = inner.powf(t);
    let m = ps.as_matrix() * powered.as_matrix() * ps.as_matrix();
    SpdMatrix::from_nearly_symmetric(m, 1e-9)
}

/// Checks the strong-convexity inequality of the squared distance along a
/// geodesic: `d²(R, γ(t)) ≤ t d²(R,Q) + (1−t) d²(R,P) − t(1−t) d²(P,Q)`,
/// with `1e-9` slack for rounding.
pub fn strong_convexity_check(r: &SpdMatrix, p: &SpdMatrix, q: &SpdMatrix, t: f64) -> Result<bool> {
    let gamma = riem_average(p, q, t)?;
    let lhs = riem_distance(r, &gamma)?.powi(2);
    let rhs = t * riem_distance(r, q)?.powi(2) + (1.0 - t) * riem_distance(r, p)?.powi(2)
        - t * (1.0 - t) * riem_distance(p, q)?.powi(2);
    Ok(lhs <= rhs + 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(k: usize, rng: &mut impl Rng) -> SpdMatrix {
        let a = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(k, k) * 0.5;
        SpdMatrix::new((&m + m.transpose()) * 0.5).unwrap()
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(SpdMatrix::new(m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdMatrix::new(m).is_err());
    }

    #[test]
    fn distance_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = random_spd(3, &mut rng);
            assert!(riem_distance(&p, &p).unwrap() < 1e-10);
        }
        // P = I, Q = diag(e^2, 1): log eigenvalues are (2, 0).
        let p = SpdMatrix::identity(2);
        let q = SpdMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            2.0f64.exp(),
            1.0,
        ])))
        .unwrap();
        let d = riem_distance(&p, &q).unwrap();
        assert!((d - 2.0).abs() < 1e-10, "d = {d}");
    }

    #[test]
    fn congruence_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_spd(3, &mut rng);
            let q = random_spd(3, &mut rng);
            let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0))
                + DMatrix::identity(3, 3) * 2.0;
            let ap = SpdMatrix::from_nearly_symmetric(&a * p.as_matrix() * a.transpose(), 1e-9)
                .unwrap();
            let aq = SpdMatrix::from_nearly_symmetric(&a * q.as_matrix() * a.transpose(), 1e-9)
                .unwrap();
            let d0 = riem_distance(&p, &q).unwrap();
            let d1 = riem_distance(&ap, &aq).unwrap();
            assert!((d0 - d1).abs() < 1e-8, "{d0} vs {d1}");
        }
    }

    #[test]
    fn average_endpoints_and_commuting_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_spd(3, &mut rng);
        let q = random_spd(3, &mut rng);
        assert!(riem_average(&p, &q, 0.0).unwrap().frobenius_distance(&p) < 1e-10);
        assert!(riem_average(&p, &q, 1.0).unwrap().frobenius_distance(&q) < 1e-9);

        let p = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0])).unwrap();
        let q = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[9.0, 0.0, 0.0, 4.0])).unwrap();
        let mid = riem_average(&p, &q, 0.5).unwrap();
        assert!((mid.as_matrix()[(0, 0)] - 3.0).abs() < 1e-10);
        assert!((mid.as_matrix()[(1, 1)] - 4.0).abs() < 1e-10);
    }

    #[test]
    fn geodesic_length_parameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let p = random_spd(3, &mut rng);
            let q = random_spd(3, &mut rng);
            let d = riem_distance(&p, &q).unwrap();
            for t in [0.25, 0.5, 0.75] {
                let g = riem_average(&p, &q, t).unwrap();
                let dt = riem_distance(&p, &g).unwrap();
                assert!((dt - t * d).abs() < 1e-8, "t={t}: {dt} vs {}", t * d);
            }
        }
    }

    #[test]
    fn strong_convexity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = random_spd(3, &mut rng);
            let p = random_spd(3, &mut rng);
            let q = random_spd(3, &mut rng);
            let t: f64 = rng.gen_range(0.0..1.0);
            assert!(strong_convexity_check(&r, &p, &q, t).unwrap());
        }
        // R = P: lhs = t² d²(P,Q) ≤ t d²(P,Q).
        let p = random_spd(3, &mut rng);
        let q = random_spd(3, &mut rng);
        assert!(strong_convexity_check(&p, &p, &q, 0.7).unwrap());
        // P = Q: both sides equal d²(R,P).
        assert!(strong_convexity_check(&q, &p, &p, 0.3).unwrap());
    }

    #[test]
    fn metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let p = random_spd(3, &mut rng);
            let q = random_spd(3, &mut rng);
            let r = random_spd(3, &mut rng);
            let dpq = riem_distance(&p, &q).unwrap();
            let dqp = riem_distance(&q, &p).unwrap();
            assert!((dpq - dqp).abs() < 1e-10);
            let dpr = riem_distance(&p, &r).unwrap();
            let drq = riem_distance(&r, &q).unwrap();
            assert!(dpq <= dpr + drq + 1e-9);
        }
    }
}
