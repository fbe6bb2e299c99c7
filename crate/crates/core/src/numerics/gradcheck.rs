use super::{Array, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Number of input coordinates probed.
    pub coords: usize,
    /// Added to `|fd|` in the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-3,
            coords: 20,
            floor: 1e-3,
        }
    }
}

/// Compare the tape gradient of `block` against central differences.
///
/// The block runs on an `f64` tape so the comparison measures the
/// derivative code rather than roundoff. Its output is reduced to a scalar by
/// a fixed random projection `Σ rᵢ yᵢ`. Returns
/// `max |analytic − fd| / (|fd| + floor)` over the sampled coordinates.
pub fn grad_check<F>(block: F, input: &Tensor, cfg: &GradCheck, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Var,
{
    if !(1e-4..=1e-2).contains(&cfg.h) {
        return Err(Error::Domain(format!(
            "grad_check step {} outside [1e-4, 1e-2]",
            cfg.h
        )));
    }
    let input: Array<f64> = input.cast();
    let g = Graph::<f64>::default();
    let x = g.param(input.clone());
    let y = block(&g, x);
    let yv = g.value(y);
    yv.ensure_finite("grad_check forward")?;
    let proj: Array<f64> = rng.gaussian(yv.shape()).cast();
    let r = g.constant(proj.clone());
    let s = g.mul(y, r);
    let s = g.sum(s);
    let grads = g.backward(s);
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Array::zeros(input.shape()));

    let eval = |t: Array<f64>| -> Result<f64> {
        let g = Graph::<f64>::default();
        let x = g.constant(t);
        let y = g.value(block(&g, x));
        y.ensure_finite("grad_check forward")?;
        Ok(y.dot(&proj))
    };

    let n = input.numel();
    let coords = rng.choose_indices(n, cfg.coords.min(n));
    let mut worst = 0.0f64;
    for i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += cfg.h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= cfg.h;
        let step = plus.data()[i] - minus.data()[i];
        let fd = (eval(plus)? - eval(minus)?) / step;
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / (fd.abs() + cfg.floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(block: impl Fn(&Graph<f64>, Var) -> Var, shape: &[usize], seed: u64) -> f64 {
        let mut rng = Rng::new(seed, 0);
        let x = rng.gaussian(shape);
        grad_check(block, &x, &GradCheck::default(), &mut rng).unwrap()
    }

    #[test]
    fn identity_block_is_exact() {
        let err = check(|_, x| x, &[3, 4], 1);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_layer() {
        let w = Rng::new(5, 1).gaussian(&[6, 4]);
        let err = check(
            |g, x| {
                let w = g.lift(&w);
                g.matmul(x, w)
            },
            &[3, 6],
            2,
        );
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn scaled_tanh_slope_at_zero_is_budget() {
        let budget = 16.0 / 255.0;
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[1]));
        let y = g.tanh(x);
        let y = g.scale(y, budget);
        let grads = g.backward(y);
        assert!((grads.get(x).unwrap().item() - budget).abs() < 1e-7);
        let err = grad_check(
            |g, x| {
                let y = g.tanh(x);
                g.scale(y, budget)
            },
            &Tensor::zeros(&[1]),
            &GradCheck {
                coords: 1,
                ..Default::default()
            },
            &mut Rng::new(0, 0),
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let cfg = GradCheck {
            h: 0.1,
            ..Default::default()
        };
        assert!(grad_check(|_, x| x, &Tensor::zeros(&[2]), &cfg, &mut Rng::new(0, 0)).is_err());
    }

    #[test]
    fn elementwise_and_reduction_ops() {
        let blocks: Vec<(&str, Box<dyn Fn(&Graph<f64>, Var) -> Var>)> = vec![
            ("tanh", Box::new(|g, x| g.tanh(x))),
            ("silu", Box::new(|g, x| g.silu(x))),
            ("gelu", Box::new(|g, x| g.gelu(x))),
            ("mul", Box::new(|g, x| g.mul(x, x))),
            (
                "sub",
                Box::new(|g, x| {
                    let y = g.scale(x, 0.5);
                    g.sub(x, y)
                }),
            ),
            ("layer_norm", Box::new(|g, x| g.layer_norm(x))),
            ("softmax", Box::new(|g, x| g.softmax(x))),
            ("permute", Box::new(|g, x| g.permute(x, &[1, 0, 2]))),
            (
                "mean_spatial",
                Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 3, 2, 2]);
                    g.mean_spatial(y)
                }),
            ),
            ("sq_sum", Box::new(|g, x| g.sq_sum(x))),
            ("mean", Box::new(|g, x| g.mean(x))),
            (
                "scale_items",
                Box::new(|g, x| g.scale_items(x, &[0.5, -2.0])),
            ),
            (
                "cross_entropy",
                Box::new(|g, x| {
                    let y = g.reshape(x, &[4, 6]);
                    g.cross_entropy(y, &[0, 5, 2, 2])
                }),
            ),
        ];
        for (i, (name, b)) in blocks.into_iter().enumerate() {
            let err = check(b, &[2, 3, 4], 10 + i as u64);
            assert!(err <= 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn abs_uses_zero_subgradient_at_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.abs(x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn structural_ops() {
        let table = Rng::new(3, 3).gaussian(&[5, 4]);
        let bias = Rng::new(3, 4).gaussian(&[3]);
        let other = Rng::new(3, 5).gaussian(&[2, 1, 2, 2]);
        let blocks: Vec<(&str, Box<dyn Fn(&Graph<f64>, Var) -> Var>)> = vec![
            (
                "concat",
                Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 3, 2, 2]);
                    let o = g.lift(&other);
                    g.concat(y, o, 1)
                }),
            ),
            (
                "upsample",
                Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 3, 2, 2]);
                    g.upsample2(y)
                }),
            ),
            (
                "gather",
                Box::new(|g, x| {
                    let t = g.reshape(x, &[6, 4]);
                    g.gather(t, &[1, 1, 5, 0])
                }),
            ),
            (
                "gather_table",
                Box::new(|g, x| {
                    let t = g.lift(&table);
                    let t = g.add(t, g.reshape(g.scale(x, 1.0), &[5, 4]));
                    g.gather(t, &[4, 2])
                }),
            ),
            ("repeat", Box::new(|g, x| g.repeat(x, 3))),
            (
                "add_bcast",
                Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 3, 4]);
                    let b = g.param(bias.cast());
                    g.add_bcast(y, b, 1)
                }),
            ),
            (
                "mul_bcast_per_outer",
                Box::new(|g, x| {
                    let y = g.reshape(x, &[2, 12]);
                    let b = g.reshape(y, &[24]);
                    let b = g.gather(g.reshape(b, &[12, 2]), &[0, 3]);
                    let b = g.reshape(b, &[4]);
                    let z = g.reshape(y, &[2, 2, 6]);
                    g.mul_bcast(z, b, 1)
                }),
            ),
        ];
        for (i, (name, b)) in blocks.into_iter().enumerate() {
            let shape: &[usize] = if name == "gather_table" { &[20] } else { &[24] };
            let err = check(b, shape, 40 + i as u64);
            assert!(err <= 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn conv_and_bmm() {
        let w = Rng::new(9, 1).gaussian(&[4, 3 * 9]).scale(0.3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let err = check(
                |g, x| {
                    let w = g.lift(&w);
                    g.conv2d(x, w, 3, stride, pad)
                },
                &[2, 3, 6, 6],
                stride as u64 * 7 + pad as u64,
            );
            assert!(err <= 1e-3, "conv s{stride} p{pad}: {err}");
        }
        let x = Rng::new(9, 2).gaussian(&[2, 3, 6, 6]);
        let err = check(
            |g, wv| {
                let x = g.lift(&x);
                g.conv2d(x, wv, 3, 2, 1)
            },
            &[4, 27],
            3,
        );
        assert!(err <= 1e-3, "conv weight: {err}");

        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            // x is stored [2, 3, 5]: logical [3, 5] or, transposed, [5, 3].
            let k = if ta { 3 } else { 5 };
            let other_shape = if tb { [2, 4, k] } else { [2, k, 4] };
            let other = Rng::new(9, 3).gaussian(&other_shape);
            let err = check(
                |g, x| {
                    let o = g.lift(&other);
                    g.bmm(x, o, ta, tb)
                },
                &[2, 3, 5],
                ta as u64 * 2 + tb as u64,
            );
            assert!(err <= 1e-3, "bmm ta={ta} tb={tb}: {err}");
        }
    }
}
