//! Per-image defense latency.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, ImageBatch};
use crate::error::{Error, Result};
use crate::imagewise::{pgd_defend, PgdConfig};
use crate::numerics::{streams, Rng};
use crate::rid::{defend, DefenderNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    /// Median seconds per image.
    pub median_s: f64,
    pub samples_s: Vec<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time `f` on each image alone, `reps` times after `warmup` untimed calls
/// on the first image.
pub fn time_per_image(
    label: &str,
    images: &ImageBatch,
    warmup: usize,
    reps: usize,
    mut f: impl FnMut(&ImageBatch) -> Result<()>,
) -> Result<Timing> {
    if images.is_empty() || reps == 0 {
        return Err(Error::Config(
            "timing needs at least one image and one repetition".into(),
        ));
    }
    let first = images.select(&[0]);
    for _ in 0..warmup {
        f(&first)?;
    }
    let mut samples = Vec::with_capacity(images.len() * reps);
    for _ in 0..reps {
        for i in 0..images.len() {
            let x = images.select(&[i]);
            let t = Instant::now();
            f(&x)?;
            samples.push(t.elapsed().as_secs_f64());
        }
    }
    let median_s = median(&mut samples.clone());
    Ok(Timing {
        label: label.to_string(),
        median_s,
        samples_s: samples,
    })
}

pub fn bench_rid(
    net: &DefenderNet,
    images: &ImageBatch,
    warmup: usize,
    reps: usize,
) -> Result<Timing> {
    time_per_image("rid", images, warmup, reps, |x| defend(net, x).map(|_| ()))
}

pub fn bench_pgd(
    targets: &[Denoiser],
    cfg: &PgdConfig,
    images: &ImageBatch,
    warmup: usize,
    reps: usize,
) -> Result<Timing> {
    let mut rng = Rng::new(0, streams::NOISE);
    let label = format!("pgd{}", cfg.steps);
    time_per_image(&label, images, warmup, reps, |x| {
        pgd_defend(x, targets, cfg, &mut rng).map(|_| ())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ImageBatch;
    use crate::numerics::Tensor;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn warmup_calls_are_not_timed() {
        let x = ImageBatch::new(Tensor::zeros(&[3, 1, 8, 8]), vec![0, 1, 2]).unwrap();
        let mut calls = 0;
        let t = time_per_image("noop", &x, 2, 2, |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 2 + 2 * 3);
        assert_eq!(t.samples_s.len(), 6);
        assert!(time_per_image("noop", &x, 0, 0, |_| Ok(())).is_err());
    }
}
