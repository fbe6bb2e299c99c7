//! The feed-forward defender, its surrogate score-distillation loss, the
//! regression regulariser toward PGD perturbations, and the trainer.
//!
//! Sign convention: with `r = w(t)(ε̂ − ε)` evaluated at the noisy defended
//! image, the surrogate's exact gradient is `−2α(t) rᵀ ∂δ/∂φ`, which is
//! `2α(t)` times the score-distillation direction `−rᵀ ∂δ/∂φ`. Descending
//! the surrogate moves `x_t` along `+r` and therefore raises the true
//! diffusion loss, so the trainer minimises `Sur + λ·reg` as written.

mod net;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use net::{DefenderArch, DefenderNet};

use crate::diffusion::{
    noisy_input, residual, Denoiser, EpsModel, ImageBatch, NoiseDraw, Schedule,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Bundle;
use crate::imagewise::{PairStore, Perturbation};
use crate::numerics::{
    adam_step, streams, AdamHyper, AdamState, Array, Elem, GradBundle, Graph, Rng, Tensor, Var,
};

/// Null-condition slot used for every image during defender training.
pub const NULL_COND: usize = 0;

/// Largest `f32` strictly below `eps`; `ε·tanh` rounds to `ε` once `tanh`
/// saturates in single precision.
fn strict_limit(eps: f32) -> f32 {
    f32::from_bits(eps.to_bits() - 1)
}

/// One forward pass: `δ = δ_φ(x0)` and `clamp(x0 + δ, −1, 1)`.
pub fn defend(net: &DefenderNet, x0: &ImageBatch) -> Result<(Perturbation, ImageBatch)> {
    check_res(net, x0)?;
    let g = Graph::new();
    let p = net.bind(&g, false);
    let x = g.constant(x0.images().clone());
    let d = net.forward(&g, &p, x);
    let lim = strict_limit(net.eps_budget);
    let delta = g.value(d).map(|v| v.clamp(-lim, lim));
    delta.ensure_finite("defender output")?;
    let pert = Perturbation {
        delta,
        eps_budget: net.eps_budget,
    };
    let defended = pert.apply(x0)?;
    Ok((pert, defended))
}

/// Number of tape nodes one defender forward records for `x0`.
pub fn trace_len(net: &DefenderNet, x0: &ImageBatch) -> usize {
    let g = Graph::new();
    let p = net.bind(&g, false);
    let x = g.constant(x0.images().clone());
    net.forward(&g, &p, x);
    g.len()
}

fn check_res(net: &DefenderNet, x0: &ImageBatch) -> Result<()> {
    if x0.res() != net.arch.res {
        return Err(Error::Shape(format!(
            "defender expects {0}x{0} images, got {1}x{1}",
            net.arch.res,
            x0.res()
        )));
    }
    Ok(())
}

fn check_draw(x0: &Tensor, draw: &NoiseDraw, sched: &Schedule) -> Result<()> {
    x0.same_shape(&draw.eps, "noise draw")?;
    if draw.t.len() != x0.batch() {
        return Err(Error::Shape(format!(
            "{} times for a batch of {}",
            draw.t.len(),
            x0.batch()
        )));
    }
    for &t in &draw.t {
        sched.check(t)?;
    }
    Ok(())
}

/// Surrogate term on a graph: `‖x_t − sg(x_t + r)‖² / B` where `r` is
/// computed on `sg(x_t)`.
fn sur_term<T: Elem, M: EpsModel>(
    g: &Graph<T>,
    model: &M,
    x_def: Var,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Var {
    let b = draw.t.len();
    let pm = model.bind(g, &|_| false);
    let x_t = noisy_input(g, x_def, draw, sched);
    let frozen = g.stop_grad(x_t);
    let r = residual(g, model, &pm, frozen, draw, &vec![NULL_COND; b], sched);
    assert!(!g.needs_grad(r), "denoiser must receive no gradient");
    let target = g.add(frozen, r);
    let target = g.stop_grad(target);
    let diff = g.sub(x_t, target);
    let s = g.sq_sum(diff);
    g.scale(s, 1.0 / b as f32)
}

fn defended_input<T: Elem>(
    g: &Graph<T>,
    net: &DefenderNet,
    p: &crate::numerics::Bound,
    x0: &Tensor,
) -> (Var, Var) {
    let x = g.lift(x0);
    let d = net.forward(g, p, x);
    (d, g.add(x, d))
}

/// Surrogate score-distillation loss and its gradient with respect to `φ`.
/// The value equals the batch mean of `w²‖ε̂ − ε‖²`.
pub fn sur_adv_sds_loss<T: Elem, M: EpsModel>(
    net: &DefenderNet,
    model: &M,
    x0: &Tensor,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Result<GradBundle> {
    check_draw(x0, draw, sched)?;
    let g = Graph::<T>::default();
    let p = net.bind(&g, true);
    let (_, x_def) = defended_input(&g, net, &p, x0);
    let loss = sur_term(&g, model, x_def, draw, sched);
    finish(&g, &p, loss, "surrogate loss")
}

fn finish<T: Elem>(
    g: &Graph<T>,
    p: &crate::numerics::Bound,
    loss: Var,
    what: &str,
) -> Result<GradBundle> {
    let value = g.value(loss).item().to_f32();
    if !value.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    let mut grads = g.backward(loss);
    Ok(p.collect(g, &mut grads, value))
}

/// `r = w(ε̂ − ε)` at the noisy defended images, as plain values.
fn residual_values<T: Elem, M: EpsModel>(
    model: &M,
    x_def: &Array<T>,
    draw: &NoiseDraw,
    sched: &Schedule,
    with_vjp: bool,
) -> (Array<T>, Option<Array<T>>) {
    let g = Graph::<T>::default();
    let pm = model.bind(&g, &|_| false);
    let xd = g.constant(x_def.clone());
    let x_t = noisy_input(&g, xd, draw, sched);
    let x_t = g.param(g.value(x_t).as_ref().clone());
    let b = draw.t.len();
    let r = residual(&g, model, &pm, x_t, draw, &vec![NULL_COND; b], sched);
    let rv = g.value(r).as_ref().clone();
    let vjp = with_vjp.then(|| {
        let mut grads = g.backward_with(r, rv.clone());
        grads.take(x_t).unwrap_or_else(|| Array::zeros(rv.shape()))
    });
    (rv, vjp)
}

/// Backpropagate a per-pixel cotangent on `δ_φ(x0)` into `φ`.
fn pull_back<T: Elem>(
    net: &DefenderNet,
    x0: &Tensor,
    cotangent: impl FnOnce(&Array<T>) -> Array<T>,
    value: f32,
) -> GradBundle {
    let g = Graph::<T>::default();
    let p = net.bind(&g, true);
    let (d, x_def) = defended_input(&g, net, &p, x0);
    let seed = cotangent(&g.value(x_def));
    let mut grads = g.backward_with(d, seed);
    p.collect(&g, &mut grads, value)
}

fn batch_value<T: Elem>(r: &Array<T>) -> f32 {
    (r.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / r.batch() as f64) as f32
}

/// Score-distillation direction `−(1/B) Σ_i r_iᵀ ∂δ_φ(x0_i)/∂φ`, computed by
/// feeding the residual straight in as a cotangent, without any loss.
pub fn advsds_grad_reference<T: Elem, M: EpsModel>(
    net: &DefenderNet,
    model: &M,
    x0: &Tensor,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Result<GradBundle> {
    check_draw(x0, draw, sched)?;
    let mut value = 0.0;
    let out = pull_back::<T>(
        net,
        x0,
        |x_def| {
            let (r, _) = residual_values(model, x_def, draw, sched, false);
            value = batch_value(&r);
            let c = T::lit(-1.0 / r.batch() as f64);
            r.map(|v| v * c)
        },
        0.0,
    );
    Ok(GradBundle { value, ..out })
}

/// Exact gradient of `−L_diff(x0 + δ_φ(x0))` for one draw, with the
/// denoiser Jacobian kept.
pub fn full_grad_reference<T: Elem, M: EpsModel>(
    net: &DefenderNet,
    model: &M,
    x0: &Tensor,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Result<GradBundle> {
    check_draw(x0, draw, sched)?;
    let g = Graph::<T>::default();
    let p = net.bind(&g, true);
    let (_, x_def) = defended_input(&g, net, &p, x0);
    let loss = neg_diffusion_loss(&g, model, x_def, draw, sched);
    finish(&g, &p, loss, "diffusion loss")
}

/// `−(1/B) Σ_i w‖ε̂(x_t,i) − ε_i‖²` on a graph, differentiable in `x_def`.
pub fn neg_diffusion_loss<T: Elem, M: EpsModel>(
    g: &Graph<T>,
    model: &M,
    x_def: Var,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Var {
    let b = draw.t.len();
    let pm = model.bind(g, &|_| false);
    let l = crate::diffusion::loss_graph(g, model, &pm, x_def, draw, &vec![NULL_COND; b], sched);
    g.scale(l, -1.0)
}

/// The part of the full gradient the surrogate drops:
/// `−(1/B) Σ_i 2α_i (J_εᵀ r_i − r_i)ᵀ ∂δ_φ/∂φ`.
pub fn jacobian_path_term<T: Elem, M: EpsModel>(
    net: &DefenderNet,
    model: &M,
    x0: &Tensor,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> Result<GradBundle> {
    check_draw(x0, draw, sched)?;
    let mut value = 0.0;
    let out = pull_back::<T>(
        net,
        x0,
        |x_def| {
            let (r, vjp) = residual_values(model, x_def, draw, sched, true);
            value = batch_value(&r);
            let vjp = vjp.expect("requested");
            let n = r.item_len();
            let b = r.batch() as f64;
            let data = vjp
                .data()
                .iter()
                .zip(r.data())
                .enumerate()
                .map(|(i, (&j, &ri))| {
                    let a = sched.alpha(draw.t[i / n]) as f64;
                    T::lit(-2.0 * a / b) * (j - ri)
                })
                .collect();
            Array::from_parts(r.shape().to_vec(), data)
        },
        0.0,
    );
    Ok(GradBundle { value, ..out })
}

/// Norm used by the regression term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegNorm {
    #[default]
    L1,
    /// Squared Euclidean.
    L2,
}

fn reg_term<T: Elem>(g: &Graph<T>, d: Var, target: &Tensor, norm: RegNorm) -> Var {
    let b = target.batch();
    let t = g.lift(target);
    let diff = g.sub(d, t);
    let s = match norm {
        RegNorm::L1 => {
            let a = g.abs(diff);
            g.sum(a)
        }
        RegNorm::L2 => g.sq_sum(diff),
    };
    g.scale(s, 1.0 / b as f32)
}

/// Gather the stored PGD perturbations for `ids` (indices into `data`).
pub fn pair_batch(
    data: &ImageBatch,
    pairs: &PairStore,
    ids: &[usize],
) -> Result<(ImageBatch, Tensor)> {
    let deltas = ids
        .iter()
        .map(|&i| pairs.get(i).cloned())
        .collect::<Result<Vec<_>>>()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
        return Err(Error::MissingPair(bad));
    }
    Ok((data.select(ids), Tensor::stack(&deltas)?))
}

/// Batch mean of `‖δ_φ(x0) − δ_iw‖` per image.
pub fn reg_loss(
    net: &DefenderNet,
    x0: &ImageBatch,
    delta_iw: &Tensor,
    norm: RegNorm,
) -> Result<GradBundle> {
    check_res(net, x0)?;
    x0.images().same_shape(delta_iw, "regression target")?;
    let g = Graph::new();
    let p = net.bind(&g, true);
    let (d, _) = defended_input(&g, net, &p, x0.images());
    let loss = reg_term(&g, d, delta_iw, norm);
    finish(&g, &p, loss, "regression loss")
}

/// Which terms of the combined objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Combined,
    AdvSdsOnly,
    RegOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidTrainConfig {
    pub lambda: f32,
    pub steps: usize,
    pub batch: usize,
    /// Regression pairs per step.
    pub pair_batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub reg_norm: RegNorm,
    pub ablation: Ablation,
    /// Held-out surrogate is logged every this many steps (0 disables).
    pub eval_every: usize,
    /// Abort when the gradient norm exceeds this.
    pub max_grad_norm: f32,
}

impl Default for RidTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            steps: 600,
            batch: 8,
            pair_batch: 4,
            lr: 5e-4,
            seed: 0,
            reg_norm: RegNorm::L1,
            ablation: Ablation::Combined,
            eval_every: 20,
            max_grad_norm: 1e6,
        }
    }
}

impl RidTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.batch == 0 || self.pair_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    fn uses_sur(&self) -> bool {
        self.ablation != Ablation::RegOnly
    }

    fn uses_reg(&self) -> bool {
        self.ablation != Ablation::AdvSdsOnly && self.lambda > 0.0
    }
}

/// Everything the trainer reads but never writes.
pub struct RidInputs<'a> {
    /// Training images `D`.
    pub data: &'a ImageBatch,
    /// PGD perturbations for the subset `D′`, keyed by index into `data`.
    pub pairs: &'a PairStore,
    /// Frozen target denoisers; the surrogate is averaged over them.
    pub targets: &'a [Denoiser],
    /// Images used only to monitor the surrogate.
    pub holdout: Option<&'a ImageBatch>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Ensemble surrogate (mean over targets).
    pub sur: f32,
    pub per_model: Vec<f32>,
    pub reg: f32,
    pub total: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RidLog {
    pub steps: Vec<StepLog>,
    /// `(step, surrogate)` on the fixed held-out batch and draw.
    pub heldout: Vec<(usize, f32)>,
}

/// Combined objective for one batch: `mean_i Sur_i + λ·reg`.
pub struct Objective {
    pub bundle: GradBundle,
    pub log: StepLog,
}

/// Evaluate the objective and its gradient. `pairs` is `None` or an empty
/// batch when the regression term is off.
pub fn objective<M: EpsModel>(
    net: &DefenderNet,
    targets: &[M],
    x0: &Tensor,
    draw: &NoiseDraw,
    pairs: Option<(&Tensor, &Tensor)>,
    cfg: &RidTrainConfig,
    sched: &Schedule,
) -> Result<Objective> {
    if targets.is_empty() {
        return Err(Error::Config(
            "at least one target model is required".into(),
        ));
    }
    check_draw(x0, draw, sched)?;
    let g = Graph::new();
    let p = net.bind(&g, true);
    let mut total: Option<Var> = None;
    let mut log = StepLog::default();
    if cfg.uses_sur() {
        let (_, x_def) = defended_input(&g, net, &p, x0);
        let terms: Vec<Var> = targets
            .iter()
            .map(|m| sur_term(&g, m, x_def, draw, sched))
            .collect();
        log.per_model = terms.iter().map(|&v| g.value(v).item()).collect();
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        let sur = g.scale(acc, 1.0 / targets.len() as f32);
        log.sur = g.value(sur).item();
        total = Some(sur);
    }
    if cfg.uses_reg() {
        if let Some((px, pd)) = pairs {
            px.same_shape(pd, "regression pairs")?;
            let (d, _) = defended_input(&g, net, &p, px);
            let r = reg_term(&g, d, pd, cfg.reg_norm);
            log.reg = g.value(r).item();
            let r = g.scale(r, cfg.lambda);
            total = Some(match total {
                Some(s) => g.add(s, r),
                None => r,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Config("objective has no active term".into()))?;
    let bundle = finish(&g, &p, total, "objective")?;
    log.total = bundle.value;
    Ok(Objective { bundle, log })
}

/// Surrogate value on `x0` without gradients, averaged over targets.
pub fn sur_value<M: EpsModel>(
    net: &DefenderNet,
    targets: &[M],
    x0: &Tensor,
    draw: &NoiseDraw,
    sched: &Schedule,
) -> f32 {
    let g = Graph::new();
    let p = net.bind(&g, false);
    let (_, x_def) = defended_input(&g, net, &p, x0);
    let s: f32 = targets
        .iter()
        .map(|m| g.value(sur_term(&g, m, x_def, draw, sched)).item())
        .sum();
    s / targets.len() as f32
}

/// Train `net` in place with Adam. On divergence the error is returned and
/// `net` holds the last finite parameters.
pub fn train_rid(
    net: &mut DefenderNet,
    cfg: &RidTrainConfig,
    inputs: &RidInputs,
) -> Result<RidLog> {
    cfg.validate()?;
    check_res(net, inputs.data)?;
    if inputs.targets.is_empty() {
        return Err(Error::Config(
            "at least one target model is required".into(),
        ));
    }
    let pair_ids = inputs.pairs.ids();
    if cfg.uses_reg() && pair_ids.is_empty() {
        return Err(Error::Config(
            "regression term needs at least one pair".into(),
        ));
    }
    if let Some(&bad) = pair_ids.iter().find(|&&i| i >= inputs.data.len()) {
        return Err(Error::MissingPair(bad));
    }
    let sched = Schedule::default();
    let root = Rng::new(cfg.seed, 0);
    let mut shuffle = root.fork(streams::SHUFFLE);
    let mut noise = root.fork(streams::NOISE);
    let mut eval = root.fork(streams::EVAL);
    let held = inputs.holdout.map(|h| {
        let draw = NoiseDraw::sample(&mut eval, h.images().shape(), &sched);
        (h.images().clone(), draw)
    });
    let mut opt = AdamState::new(AdamHyper::with_lr(cfg.lr));
    let mut log = RidLog::default();
    let n = inputs.data.len();
    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some((hx, hd)) = &held {
                log.heldout
                    .push((step, sur_value(net, inputs.targets, hx, hd, &sched)));
            }
        }
        let idx: Vec<usize> = (0..cfg.batch).map(|_| shuffle.below(n)).collect();
        let x = inputs.data.select(&idx);
        let draw = NoiseDraw::sample(&mut noise, x.images().shape(), &sched);
        let pairs = if cfg.uses_reg() {
            let ids: Vec<usize> = (0..cfg.pair_batch)
                .map(|_| pair_ids[shuffle.below(pair_ids.len())])
                .collect();
            Some(pair_batch(inputs.data, inputs.pairs, &ids)?)
        } else {
            None
        };
        let obj = objective(
            net,
            inputs.targets,
            x.images(),
            &draw,
            pairs.as_ref().map(|(b, d)| (b.images(), d)),
            cfg,
            &sched,
        );
        let obj = match obj {
            Ok(o) => o,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite {what}"),
                })
            }
            Err(e) => return Err(e),
        };
        let gnorm = obj
            .bundle
            .flatten()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !obj.bundle.is_finite() || gnorm > cfg.max_grad_norm as f64 {
            return Err(Error::Divergence {
                step,
                detail: format!("gradient norm {gnorm}"),
            });
        }
        adam_step(&mut net.params, &obj.bundle, &mut opt)?;
        log.steps.push(StepLog { step, ..obj.log });
    }
    if let Some((hx, hd)) = &held {
        log.heldout
            .push((cfg.steps, sur_value(net, inputs.targets, hx, hd, &sched)));
    }
    Ok(log)
}

impl DefenderNet {
    /// Checkpoint tagged with the budget and the fingerprints of the models
    /// it was trained against.
    pub fn save(&self, path: &Path, target_fingerprints: &[String]) -> Result<()> {
        let arch = serde_json::to_string(&self.arch)?;
        Bundle::new(self.params.clone())
            .with_meta("kind", "defender")
            .with_meta("arch", arch)
            .with_meta("eps_budget", self.eps_budget.to_string())
            .with_meta("targets", target_fingerprints.join(","))
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(Bundle::load(path)?)
    }

    pub fn from_bundle(b: Bundle) -> Result<Self> {
        if b.meta("kind")? != "defender" {
            return Err(Error::Malformed("not a defender checkpoint".into()));
        }
        let arch: DefenderArch = serde_json::from_str(b.meta("arch")?)?;
        let eps_budget = b
            .meta("eps_budget")?
            .parse()
            .map_err(|e| Error::Malformed(format!("eps_budget: {e}")))?;
        let fresh = DefenderNet::init(arch.clone(), eps_budget, 0)?;
        for (name, t) in fresh.params.iter() {
            let got = b.tensors.get(name)?;
            got.same_shape(t, name)?;
        }
        Ok(Self {
            arch,
            eps_budget,
            params: b.tensors,
        })
    }
}

#[cfg(test)]
mod tests;
