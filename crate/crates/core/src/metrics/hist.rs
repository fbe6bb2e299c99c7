use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[−ε, ε]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub excess_kurtosis: f64,
    /// Fraction of values with `|v| ≥ 0.9 ε`.
    pub bound_mass: f64,
}

/// Fourth standardised moment minus 3; 0 for a constant sample.
pub fn excess_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return 0.0;
    }
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Histogram of flattened perturbation values over `[−ε, ε]`.
pub fn perturbation_histogram(values: &[f32], eps: f32, bins: usize) -> Result<Histogram> {
    if bins == 0 || !(eps > 0.0) {
        return Err(Error::Domain("histogram needs bins ≥ 1 and ε > 0".into()));
    }
    let e = eps as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| -e + 2.0 * e * i as f64 / bins as f64)
        .collect();
    let mut counts = vec![0u64; bins];
    let mut near = 0usize;
    for &v in values {
        let v = v as f64;
        let k = (((v + e) / (2.0 * e)) * bins as f64).floor();
        counts[(k.max(0.0) as usize).min(bins - 1)] += 1;
        if v.abs() >= 0.9 * e {
            near += 1;
        }
    }
    let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    Ok(Histogram {
        edges,
        counts,
        excess_kurtosis: excess_kurtosis(&xs),
        bound_mass: near as f64 / values.len().max(1) as f64,
    })
}

/// Chi-square test that two histograms share one distribution. Returns
/// `(statistic, degrees of freedom, p-value)`; bins empty in both are
/// dropped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<(f64, usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape("histograms with different bin counts".into()));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("empty histogram".into()));
    }
    let n = na + nb;
    let mut stat = 0.0;
    let mut used = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        used += 1;
        let (ea, eb) = (na * col / n, nb * col / n);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    let dof = used.saturating_sub(1);
    if dof == 0 {
        return Ok((0.0, 0, 1.0));
    }
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((stat, dof, 1.0 - chi.cdf(stat)))
}

/// One-sided paired t-test of `mean(a − b) > 0`. Returns `(t, p)`.
/// Identical pairs give `p = 1`; a constant positive difference gives
/// `p = 0`.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "paired test needs two equal samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (0.0, 1.0)
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn paired_t_matches_hand_computation() {
        // d = [1, 2, 3]: mean 2, sd 1, t = 2·√3; one-sided p from t(2).
        let (t, p) = paired_t_greater(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        // t(2) CDF: 1/2 + t / (2√(2 + t²)).
        let want = 0.5 - t / (2.0 * (2.0 + t * t).sqrt());
        assert!((p - want).abs() < 1e-9, "{p} vs {want}");
        assert_eq!(paired_t_greater(&[1.0, 1.0], &[1.0, 1.0]).unwrap().1, 1.0);
        assert_eq!(paired_t_greater(&[2.0, 2.0], &[1.0, 1.0]).unwrap().1, 0.0);
        assert!(paired_t_greater(&[1.0], &[0.0]).is_err());
        let (_, p_rev) = paired_t_greater(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!(p_rev > 0.95);
    }

    #[test]
    fn gaussian_sample_has_near_zero_excess_kurtosis() {
        let mut rng = Rng::new(1, 0);
        let x: Vec<f64> = (0..50_000).map(|_| rng.normal()).collect();
        assert!(excess_kurtosis(&x).abs() < 0.3);
        let lap: Vec<f64> = (0..50_000)
            .map(|_| {
                let u = rng.uniform(-0.5, 0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        assert!((excess_kurtosis(&lap) - 3.0).abs() < 0.6);
    }

    #[test]
    fn zero_perturbation_fills_one_bin() {
        let h = perturbation_histogram(&[0.0; 100], 0.1, 21).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<u64>(), 100);
        assert_eq!(h.excess_kurtosis, 0.0);
        assert_eq!(h.bound_mass, 0.0);
    }

    #[test]
    fn endpoints_land_in_edge_bins() {
        let h = perturbation_histogram(&[-0.1, 0.1, 0.0999], 0.1, 4).unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 2]);
        assert_eq!(h.bound_mass, 1.0);
    }

    #[test]
    fn chi_square_separates_shapes() {
        let same = chi_square_homogeneity(&[50, 100, 50], &[48, 104, 48]).unwrap();
        assert!(same.2 > 0.5);
        let diff = chi_square_homogeneity(&[50, 100, 50], &[100, 0, 100]).unwrap();
        assert!(diff.2 < 1e-6);
        assert_eq!(diff.1, 2);
    }
}
