use serde::{Deserialize, Serialize};

use crate::diffusion::{per_item_loss, EpsModel, NoiseDraw, Schedule};
use crate::error::{Error, Result};
use crate::numerics::{streams, Rng, Tensor};

/// Mean diffusion loss per noise level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub t: Vec<f32>,
    pub loss: Vec<f64>,
}

impl ProbeCurve {
    /// `self − other` per grid point.
    pub fn elevation(&self, other: &ProbeCurve) -> Result<Vec<f64>> {
        if self.t != other.t {
            return Err(Error::Shape("probe curves on different grids".into()));
        }
        Ok(self
            .loss
            .iter()
            .zip(&other.loss)
            .map(|(a, b)| a - b)
            .collect())
    }

    /// Fraction of grid points where `self` is strictly above `other`.
    pub fn fraction_above(&self, other: &ProbeCurve) -> Result<f64> {
        let e = self.elevation(other)?;
        Ok(e.iter().filter(|&&d| d > 0.0).count() as f64 / e.len().max(1) as f64)
    }

    pub fn mean(&self) -> f64 {
        self.loss.iter().sum::<f64>() / self.loss.len().max(1) as f64
    }
}

/// Midpoints of `n` equal cells of `[0, 1]`: 0.05, 0.15, …, 0.95 for 10.
pub fn probe_grid(n: usize) -> Vec<f32> {
    (0..n)
        .map(|k| ((k as f64 + 0.5) / n as f64) as f32)
        .collect()
}

/// Noise for grid point `k`, draw `d`. Depends only on the seed and the
/// batch shape, so every condition probed with the same seed sees the same
/// draws.
fn paired_noise(seed: u64, k: usize, d: usize, shape: &[usize]) -> Tensor {
    Rng::new(seed, streams::EVAL)
        .fork((k * 1024 + d) as u64)
        .gaussian(shape)
}

/// Per-`t` mean over images and `draws` of `w‖ε̂ − ε‖²`, null condition.
pub fn diffusion_loss_probe<M: EpsModel>(
    model: &M,
    images: &Tensor,
    t_grid: &[f32],
    draws: usize,
    seed: u64,
    sched: &Schedule,
) -> Result<ProbeCurve> {
    if draws == 0 || images.batch() == 0 {
        return Err(Error::Domain(
            "probe needs at least one image and one draw".into(),
        ));
    }
    let cond = vec![0; images.batch()];
    let mut loss = Vec::with_capacity(t_grid.len());
    for (k, &t) in t_grid.iter().enumerate() {
        sched.check(t)?;
        let mut acc = 0.0;
        for d in 0..draws {
            let draw = NoiseDraw::at(t, paired_noise(seed, k, d, images.shape()));
            acc += per_item_loss(model, images, &draw, &cond, sched)
                .iter()
                .sum::<f64>();
        }
        loss.push(acc / (draws * images.batch()) as f64);
    }
    Ok(ProbeCurve {
        t: t_grid.to_vec(),
        loss,
    })
}
