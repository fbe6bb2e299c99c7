use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Gaussian summary of a feature cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "covariance {:?} for a {d}-dim mean",
                sigma.shape()
            )));
        }
        if n < 2 {
            return Err(Error::Domain(format!("feature stats need n ≥ 2, got {n}")));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-6 {
            return Err(Error::Domain(format!("covariance asymmetric by {asym}")));
        }
        Ok(Self { mu, sigma, n })
    }

    /// Sample mean and unbiased covariance of `rows`.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Domain(format!("feature stats need n ≥ 2, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut c = x.clone();
        for j in 0..d {
            let m = mu[j];
            c.column_mut(j).add_scalar_mut(-m);
        }
        let mut sigma = c.transpose() * &c / (n - 1) as f64;
        // Exact symmetry for the eigen route.
        sigma = (&sigma + sigma.transpose()) * 0.5;
        Self::new(mu, sigma, n)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

const NEG_TOL: f64 = 1e-6;

/// Eigen-decomposition square root of a symmetric PSD matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m.clone());
    let min = e.eigenvalues.min();
    if min < -NEG_TOL {
        return Err(Error::NotPsd(min));
    }
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
///
/// `tr((Σg Σr)^{1/2})` is computed as the trace of the square root of the
/// symmetric matrix `Σr^{1/2} Σg Σr^{1/2}`, which has the same spectrum.
pub fn fid(g: &FeatureStats, r: &FeatureStats) -> Result<f64> {
    if g.dim() != r.dim() {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            g.dim(),
            r.dim()
        )));
    }
    let diff = &g.mu - &r.mu;
    let sr = psd_sqrt(&r.sigma)?;
    let m = &sr * &g.sigma * &sr;
    let m = (&m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(m);
    let min = e.eigenvalues.min();
    if min < -NEG_TOL {
        return Err(Error::NotPsd(min));
    }
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff.norm_squared() + g.sigma.trace() + r.sigma.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], diag: &[f64]) -> FeatureStats {
        FeatureStats::new(
            DVector::from_row_slice(mu),
            DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
            10,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_cases() {
        let a = stats(&[0.3, -1.0], &[2.0, 0.5]);
        assert!(fid(&a, &a).unwrap().abs() < 1e-4);
        let g = stats(&[1.0, 0.0], &[1.0, 1.0]);
        let r = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert!((fid(&g, &r).unwrap() - 1.0).abs() < 1e-4);
        let g = stats(&[0.0, 0.0], &[4.0, 4.0]);
        assert!((fid(&g, &r).unwrap() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn non_commuting_matches_scalar_formula_in_1d_blocks() {
        // Rotated covariances: fid is rotation invariant when both rotate.
        let rot = |a: f64| DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]);
        let q = rot(0.7);
        let sg = &q * DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0])) * q.transpose();
        let sr = &q * DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 9.0])) * q.transpose();
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        let g = FeatureStats::new(DVector::zeros(2), sym(sg), 5).unwrap();
        let r = FeatureStats::new(DVector::zeros(2), sym(sr), 5).unwrap();
        // (2-1)^2 + (1-3)^2
        assert!((fid(&g, &r).unwrap() - 5.0).abs() < 1e-9);
        assert!((fid(&r, &g).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let b = stats(&[0.0], &[1.0]);
        assert!(matches!(fid(&a, &b), Err(Error::Shape(_))));
        let bad = FeatureStats::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, -0.5])),
            4,
        )
        .unwrap();
        assert!(matches!(fid(&a, &bad), Err(Error::NotPsd(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(FeatureStats::new(DVector::zeros(2), asym, 4).is_err());
        assert!(FeatureStats::from_features(&[vec![1.0]]).is_err());
    }

    #[test]
    fn sample_covariance_is_unbiased() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0]];
        let s = FeatureStats::from_features(&rows).unwrap();
        assert_eq!(s.mu.as_slice(), &[2.0, 3.0]);
        assert!((s.sigma[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((s.sigma[(1, 1)] - 3.0).abs() < 1e-12);
        assert!((s.sigma[(0, 1)] - 0.0).abs() < 1e-12);
    }
}
