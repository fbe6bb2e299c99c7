//! Natural-scene statistics: MSCN coefficients, paired products, moment
//! matched GGD/AGGD fits, and a Mahalanobis quality score against clean
//! corpus statistics.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const KERNEL: usize = 7;
pub const KERNEL_STD: f64 = 7.0 / 6.0;
/// Stabiliser for `[0, 1]` intensities.
pub const C: f64 = 1.0 / (255.0 * 255.0);
pub const FEATURES_PER_SCALE: usize = 18;
pub const SCALES: usize = 2;

/// Row-major grayscale plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("{} values for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    /// From `[−1, 1]` pixels to `[0, 1]` intensities.
    pub fn from_signed(h: usize, w: usize, px: &[f32]) -> Result<Self> {
        Self::new(h, w, px.iter().map(|&v| (v as f64 + 1.0) / 2.0).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    /// 2× box downsample (odd trailing row/column dropped).
    pub fn half(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let data = (0..h * w)
            .map(|k| {
                let (i, j) = (2 * (k / w), 2 * (k % w));
                (self.at(i, j) + self.at(i + 1, j) + self.at(i, j + 1) + self.at(i + 1, j + 1))
                    / 4.0
            })
            .collect();
        Plane { h, w, data }
    }

    /// Circular shift by `(di, dj)`.
    pub fn roll(&self, di: usize, dj: usize) -> Plane {
        let data = (0..self.h * self.w)
            .map(|k| {
                let (i, j) = (k / self.w, k % self.w);
                self.at(
                    (i + self.h - di % self.h) % self.h,
                    (j + self.w - dj % self.w) % self.w,
                )
            })
            .collect();
        Plane {
            h: self.h,
            w: self.w,
            data,
        }
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (KERNEL / 2) as f64;
    let k1: Vec<f64> = (0..KERNEL)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * KERNEL_STD * KERNEL_STD)).exp())
        .collect();
    let s: f64 = k1.iter().sum();
    k1.into_iter().map(|v| v / s).collect()
}

/// Symmetric reflection (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflective borders.
fn blur(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.h * p.w];
    for i in 0..p.h {
        for j in 0..p.w {
            tmp[i * p.w + j] = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| kv * p.at(i, reflect(j as isize + t as isize - r, p.w)))
                .sum();
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for i in 0..p.h {
        for j in 0..p.w {
            out[i * p.w + j] = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| kv * tmp[reflect(i as isize + t as isize - r, p.h) * p.w + j])
                .sum();
        }
    }
    Plane {
        h: p.h,
        w: p.w,
        data: out,
    }
}

/// Mean-subtracted contrast-normalised coefficients and their local
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MscnField {
    pub ihat: Plane,
    pub mu: Plane,
    pub sigma: Plane,
}

pub fn mscn(image: &Plane) -> Result<MscnField> {
    if image.h < KERNEL || image.w < KERNEL {
        return Err(Error::Domain(format!(
            "{}x{} image smaller than the {KERNEL}x{KERNEL} kernel",
            image.h, image.w
        )));
    }
    let k = gaussian_kernel();
    let mu = blur(image, &k);
    let dev = Plane {
        h: image.h,
        w: image.w,
        data: image
            .data
            .iter()
            .zip(&mu.data)
            .map(|(x, m)| (x - m).powi(2))
            .collect(),
    };
    let var = blur(&dev, &k);
    let sigma = Plane {
        h: image.h,
        w: image.w,
        data: var.data.iter().map(|v| v.max(0.0).sqrt()).collect(),
    };
    let ihat = Plane {
        h: image.h,
        w: image.w,
        data: image
            .data
            .iter()
            .zip(&mu.data)
            .zip(&sigma.data)
            .map(|((x, m), s)| {
                let d = x - m;
                // Exact zero where the image is locally flat.
                if d == 0.0 {
                    0.0
                } else {
                    d / (s + C)
                }
            })
            .collect(),
    };
    Ok(MscnField { ihat, mu, sigma })
}

/// Horizontal, vertical, main- and anti-diagonal neighbour products.
#[derive(Clone, Debug, PartialEq)]
pub struct PairProducts {
    pub h: Plane,
    pub v: Plane,
    pub d1: Plane,
    pub d2: Plane,
}

pub fn pairwise_products(f: &MscnField) -> PairProducts {
    let m = &f.ihat;
    let (h, w) = (m.h, m.w);
    let build = |rows: usize, cols: usize, g: &dyn Fn(usize, usize) -> f64| Plane {
        h: rows,
        w: cols,
        data: (0..rows * cols).map(|k| g(k / cols, k % cols)).collect(),
    };
    PairProducts {
        h: build(h, w - 1, &|i, j| m.at(i, j) * m.at(i, j + 1)),
        v: build(h - 1, w, &|i, j| m.at(i, j) * m.at(i + 1, j)),
        d1: build(h - 1, w - 1, &|i, j| m.at(i, j) * m.at(i + 1, j + 1)),
        d2: build(h - 1, w - 1, &|i, j| m.at(i, j + 1) * m.at(i + 1, j)),
    }
}

fn gamma_ratio(shape: f64) -> f64 {
    // Γ(1/γ)Γ(3/γ) / Γ(2/γ)²
    (ln_gamma(1.0 / shape) + ln_gamma(3.0 / shape) - 2.0 * ln_gamma(2.0 / shape)).exp()
}

/// `(shape, ratio)` over the candidate shapes 0.2, 0.201, …, 9.999.
fn ratio_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..9800)
            .map(|i| {
                let s = 0.2 + i as f64 * 0.001;
                (s, gamma_ratio(s))
            })
            .collect()
    })
}

fn solve_shape(target: f64) -> f64 {
    ratio_table()
        .iter()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .expect("non-empty grid")
        .0
}

/// Zero-mean generalised Gaussian fit: `(shape, variance)`.
pub fn fit_ggd(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let mabs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if mabs == 0.0 {
        return (10.0, 0.0);
    }
    (solve_shape(var / (mabs * mabs)), var)
}

/// Asymmetric generalised Gaussian fit: `(shape, mean, left var, right var)`.
pub fn fit_aggd(x: &[f64]) -> (f64, f64, f64, f64) {
    let side = |neg: bool| {
        let v: Vec<f64> = x
            .iter()
            .copied()
            .filter(|&v| if neg { v < 0.0 } else { v > 0.0 })
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64
        }
    };
    let (lv, rv) = (side(true), side(false));
    let n = x.len().max(1) as f64;
    let mabs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let msq = x.iter().map(|v| v * v).sum::<f64>() / n;
    if lv == 0.0 || rv == 0.0 || msq == 0.0 {
        return (10.0, 0.0, lv, rv);
    }
    let (ls, rs) = (lv.sqrt(), rv.sqrt());
    let gh = ls / rs;
    let rhat = mabs * mabs / msq;
    let big_r = rhat * (gh.powi(3) + 1.0) * (gh + 1.0) / (gh * gh + 1.0).powi(2);
    // ρ(α) = Γ(2/α)² / (Γ(1/α)Γ(3/α)) is the reciprocal of `gamma_ratio`.
    let alpha = solve_shape(1.0 / big_r);
    let lg = |v: f64| ln_gamma(v).exp();
    let scale = (lg(1.0 / alpha) / lg(3.0 / alpha)).sqrt();
    let mean = (rs * scale - ls * scale) * lg(2.0 / alpha) / lg(1.0 / alpha);
    (alpha, mean, lv, rv)
}

fn scale_features(p: &Plane) -> Result<Vec<f64>> {
    let f = mscn(p)?;
    let mut out = Vec::with_capacity(FEATURES_PER_SCALE);
    let (s, v) = fit_ggd(&f.ihat.data);
    out.extend([s, v]);
    let pp = pairwise_products(&f);
    for m in [&pp.h, &pp.v, &pp.d1, &pp.d2] {
        let (a, mean, l, r) = fit_aggd(&m.data);
        out.extend([a, mean, l, r]);
    }
    Ok(out)
}

/// 36 features: 18 at full resolution, 18 at half.
pub fn brisque_features(image: &Plane) -> Result<Vec<f64>> {
    let mut f = scale_features(image)?;
    f.extend(scale_features(&image.half())?);
    Ok(f)
}

/// Mean and regularised inverse covariance of clean-corpus features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: Vec<f64>,
    /// Row-major inverse of `Σ + 1e−6·I`.
    pub precision: Vec<f64>,
}

pub const COV_RIDGE: f64 = 1e-6;

impl CorpusStats {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Domain(
                "corpus statistics need at least two images".into(),
            ));
        }
        let d = features[0].len();
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut c = x;
        for j in 0..d {
            let m = mean[j];
            c.column_mut(j).add_scalar_mut(-m);
        }
        let cov = c.transpose() * &c / (n - 1) as f64 + DMatrix::identity(d, d) * COV_RIDGE;
        let cov = (&cov + cov.transpose()) * 0.5;
        let inv = cov
            .cholesky()
            .ok_or_else(|| Error::Domain("corpus covariance not positive definite".into()))?
            .inverse();
        Ok(Self {
            mean: mean.as_slice().to_vec(),
            precision: inv.as_slice().to_vec(),
        })
    }

    /// Mahalanobis distance of one feature vector.
    pub fn score(&self, f: &[f64]) -> Result<f64> {
        let d = self.mean.len();
        if f.len() != d {
            return Err(Error::Shape(format!(
                "{} features, corpus has {d}",
                f.len()
            )));
        }
        let p = DMatrix::from_column_slice(d, d, &self.precision);
        let diff = DVector::from_fn(d, |i, _| f[i] - self.mean[i]);
        Ok((diff.transpose() * p * &diff)[(0, 0)].max(0.0).sqrt())
    }
}

pub fn brisque_score(image: &Plane, corpus: &CorpusStats) -> Result<f64> {
    corpus.score(&brisque_features(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn textured(seed: u64, n: usize) -> Plane {
        let mut rng = Rng::new(seed, 0);
        let base = rng.gaussian(&[n, n]);
        let p = Plane::new(
            n,
            n,
            base.data().iter().map(|&v| 0.5 + 0.1 * v as f64).collect(),
        )
        .unwrap();
        // Smooth a little so neighbouring coefficients correlate.
        blur(&p, &[0.25, 0.5, 0.25])
    }

    #[test]
    fn constant_image_has_zero_coefficients() {
        let p = Plane::new(16, 16, vec![0.37; 256]).unwrap();
        let f = mscn(&p).unwrap();
        assert!(f.ihat.data.iter().all(|&v| v == 0.0));
        let pp = pairwise_products(&f);
        for m in [pp.h, pp.v, pp.d1, pp.d2] {
            assert!(m.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mscn_is_roughly_normalised() {
        let f = mscn(&textured(3, 32)).unwrap();
        let n = f.ihat.data.len() as f64;
        let mean = f.ihat.data.iter().sum::<f64>() / n;
        let var = f.ihat.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1, "{mean}");
        assert!((0.5..1.5).contains(&var), "{var}");
        assert!(f.sigma.data.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn horizontal_products_shift_with_the_image() {
        let p = textured(4, 24);
        let shifted = p.roll(0, 1);
        let a = pairwise_products(&mscn(&p).unwrap()).h;
        let b = pairwise_products(&mscn(&shifted).unwrap()).h;
        // The variance blur sits on top of the mean blur: 6 pixels of reach.
        for i in 6..18 {
            for j in 6..16 {
                assert!((a.at(i, j) - b.at(i, j + 1)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ggd_recovers_laplacian_shape() {
        let mut rng = Rng::new(5, 0);
        let x: Vec<f64> = (0..100_000)
            .map(|_| {
                let u = rng.uniform(-0.5, 0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let (shape, _) = fit_ggd(&x);
        assert!((shape - 1.0).abs() < 0.15, "{shape}");
        let g: Vec<f64> = (0..100_000).map(|_| 2.0 * rng.normal()).collect();
        let (shape, var) = fit_ggd(&g);
        assert!((shape - 2.0).abs() < 0.1, "{shape}");
        assert!((var - 4.0).abs() < 0.1);
    }

    #[test]
    fn aggd_recovers_asymmetry() {
        let mut rng = Rng::new(6, 0);
        let x: Vec<f64> = (0..50_000)
            .map(|_| {
                // Side masses proportional to the side scales.
                let v = rng.normal().abs();
                if rng.uniform(0.0, 1.0) < 0.2 {
                    -v * 0.5
                } else {
                    v * 2.0
                }
            })
            .collect();
        let (shape, mean, l, r) = fit_aggd(&x);
        assert!((shape - 2.0).abs() < 0.2, "{shape}");
        assert!(mean > 0.0);
        assert!((l - 0.25).abs() < 0.02 && (r - 4.0).abs() < 0.2);
    }

    #[test]
    fn noise_raises_the_score() {
        let corpus: Vec<Plane> = (0..60).map(|s| textured(100 + s, 16)).collect();
        let feats: Vec<Vec<f64>> = corpus
            .iter()
            .map(|p| brisque_features(p).unwrap())
            .collect();
        assert_eq!(feats[0].len(), SCALES * FEATURES_PER_SCALE);
        let stats = CorpusStats::fit(&feats).unwrap();
        let clean = textured(7, 16);
        let mut rng = Rng::new(8, 0);
        let noisy = Plane::new(
            16,
            16,
            clean
                .data
                .iter()
                .map(|&v| (v + 0.2 * rng.normal()).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();
        assert!(brisque_score(&noisy, &stats).unwrap() > brisque_score(&clean, &stats).unwrap());
    }

    #[test]
    fn small_images_are_rejected() {
        assert!(mscn(&Plane::new(6, 6, vec![0.0; 36]).unwrap()).is_err());
    }
}
