use std::collections::BTreeMap;

use super::{GradBundle, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub hyper: AdamHyper,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            step: 0,
            hyper,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter named in `bundle`.
///
/// Parameters absent from the bundle are left as they are. Moments are
/// created lazily with the parameter's shape.
pub fn adam_step(params: &mut ParamSet, bundle: &GradBundle, state: &mut AdamState) -> Result<()> {
    for (name, g) in &bundle.grads {
        let p = params
            .0
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        p.same_shape(g, &format!("gradient for `{name}`"))?;
        g.ensure_finite(&format!("gradient for `{name}`"))?;
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - (h.beta1 as f64).powi(t);
    let bc2 = 1.0 - (h.beta2 as f64).powi(t);
    let step_size = (h.lr as f64 / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    for (name, g) in &bundle.grads {
        let p = params.0.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gi;
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gi * gi;
            pd[i] -= step_size * md[i] / (vd[i].sqrt() / bc2_sqrt + h.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    fn grad(v: f32) -> GradBundle {
        let mut b = GradBundle::default();
        b.grads.insert("w".into(), Tensor::scalar(v));
        b
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.25);
        let mut s = AdamState::new(AdamHyper::default());
        adam_step(&mut p, &grad(0.0), &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.25);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps) ≈ lr.
        let mut p = single(0.0);
        let mut s = AdamState::new(AdamHyper::with_lr(0.1));
        adam_step(&mut p, &grad(1.0), &mut s).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w + 0.1).abs() < 1e-6, "{w}");
    }

    #[test]
    fn replay_is_identical() {
        let run = || {
            let mut p = single(1.0);
            let mut s = AdamState::new(AdamHyper::default());
            for i in 0..5 {
                adam_step(&mut p, &grad(i as f32 - 2.0), &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.0);
        let mut b = GradBundle::default();
        b.grads.insert("w".into(), Tensor::zeros(&[2]));
        let mut s = AdamState::new(AdamHyper::default());
        assert!(matches!(
            adam_step(&mut p, &b, &mut s),
            Err(Error::Shape(_))
        ));
        assert_eq!(s.step, 0);
    }
}
