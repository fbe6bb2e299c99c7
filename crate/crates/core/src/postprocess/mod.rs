//! Adversary-side clean-up of protected images: blockwise DCT quantisation
//! in the style of baseline JPEG, and diffusion purification.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::diffusion::{denoise_from, EpsModel, ImageBatch, Schedule};
use crate::error::{Error, Result};
use crate::numerics::{streams, Rng, Tensor};

pub const BLOCK: usize = 8;

/// Luminance quantisation table, ITU T.81 Annex K.
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JpegConfig {
    pub quality: u8,
}

impl Default for JpegConfig {
    fn default() -> Self {
        Self { quality: 75 }
    }
}

impl JpegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.quality) {
            return Err(Error::Config(format!(
                "JPEG quality {} outside [1, 100]",
                self.quality
            )));
        }
        Ok(())
    }

    /// Annex K table under the IJG quality scaling, entries clamped to
    /// `[1, 255]`.
    pub fn table(&self) -> [f64; 64] {
        let q = self.quality.clamp(1, 100) as u32;
        let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let mut out = [0.0; 64];
        for (o, &t) in out.iter_mut().zip(&LUMA_TABLE) {
            *o = ((t as u32 * scale + 50) / 100).clamp(1, 255) as f64;
        }
        out
    }
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static B: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        let n = BLOCK as f64;
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos();
            }
        }
        b
    })
}

/// 2-D DCT of an 8x8 block (row-major).
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..BLOCK {
        for u in 0..BLOCK {
            tmp[y * BLOCK + u] = (0..BLOCK).map(|x| b[u][x] * block[y * BLOCK + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..BLOCK {
        for u in 0..BLOCK {
            out[v * BLOCK + u] = (0..BLOCK).map(|y| b[v][y] * tmp[y * BLOCK + u]).sum();
        }
    }
    out
}

pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..BLOCK {
        for x in 0..BLOCK {
            tmp[v * BLOCK + x] = (0..BLOCK).map(|u| b[u][x] * coef[v * BLOCK + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            out[y * BLOCK + x] = (0..BLOCK).map(|v| b[v][y] * tmp[v * BLOCK + x]).sum();
        }
    }
    out
}

fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Quantise one `[−1, 1]` plane at 8-bit level scale. Planes whose sides
/// are not multiples of 8 are reflect-padded and cropped back.
fn jpeg_plane(px: &[f32], h: usize, w: usize, table: &[f64; 64]) -> Vec<f32> {
    let (ph, pw) = (h.div_ceil(BLOCK) * BLOCK, w.div_ceil(BLOCK) * BLOCK);
    let level = |i: usize, j: usize| px[reflect(i, h) * w + reflect(j, w)] as f64 * 127.5;
    let mut out = vec![0f32; h * w];
    for bi in (0..ph).step_by(BLOCK) {
        for bj in (0..pw).step_by(BLOCK) {
            let mut blk = [0.0; 64];
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    blk[y * BLOCK + x] = level(bi + y, bj + x);
                }
            }
            let mut c = dct8(&blk);
            for (v, q) in c.iter_mut().zip(table) {
                *v = (*v / q).round() * q;
            }
            let r = idct8(&c);
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    let (i, j) = (bi + y, bj + x);
                    if i < h && j < w {
                        out[i * w + j] = ((r[y * BLOCK + x] / 127.5) as f32).clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Blockwise DCT, quantise to table multiples, inverse DCT, clamp.
pub fn jpeg_like(images: &ImageBatch, cfg: &JpegConfig) -> Result<ImageBatch> {
    cfg.validate()?;
    let table = cfg.table();
    let shape = images.images().shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let data: Vec<f32> = (0..images.len())
        .flat_map(|i| jpeg_plane(images.images().item_slice(i), h, w, &table))
        .collect();
    ImageBatch::new(Tensor::new(shape, data)?, images.ids().to_vec())
}

/// Share of DCT energy outside the top-left 2x2 coefficients, summed over
/// all blocks of all images.
pub fn high_frequency_energy(images: &ImageBatch) -> f64 {
    let r = images.res();
    let mut total = 0.0;
    for i in 0..images.len() {
        let px = images.images().item_slice(i);
        for bi in (0..r - r % BLOCK).step_by(BLOCK) {
            for bj in (0..r - r % BLOCK).step_by(BLOCK) {
                let mut blk = [0.0; 64];
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        blk[y * BLOCK + x] = px[(bi + y) * r + bj + x] as f64;
                    }
                }
                let c = dct8(&blk);
                for v in 0..BLOCK {
                    for u in 0..BLOCK {
                        if u >= 2 || v >= 2 {
                            total += c[v * BLOCK + u].powi(2);
                        }
                    }
                }
            }
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffpureConfig {
    pub t_star: f32,
    pub steps: usize,
}

impl Default for DiffpureConfig {
    fn default() -> Self {
        Self {
            t_star: 0.3,
            steps: 10,
        }
    }
}

impl DiffpureConfig {
    pub fn validate(&self) -> Result<()> {
        if !Schedule::default().contains(self.t_star) {
            return Err(Error::Config(format!(
                "t* {} outside the schedule",
                self.t_star
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("purification needs at least one step".into()));
        }
        Ok(())
    }
}

/// Diffuse to `t*` with fresh noise, then run the purifier's deterministic
/// reverse pass back to `t_min` under the null condition.
pub fn diffpure<M: EpsModel>(
    images: &ImageBatch,
    purifier: &M,
    cfg: &DiffpureConfig,
    rng: &mut Rng,
) -> Result<ImageBatch> {
    let sched = Schedule::default();
    cfg.validate()?;
    let mut noise = rng.fork(streams::NOISE);
    let eps = noise.gaussian(images.images().shape());
    let (a, s) = (sched.alpha(cfg.t_star), sched.sigma(cfg.t_star));
    let x_t = images.images().zip_map(&eps, |x, e| a * x + s * e)?;
    let cond = vec![0; images.len()];
    let out = denoise_from(purifier, x_t, cfg.t_star, &cond, cfg.steps, &sched)?;
    images.with_images(out)
}
