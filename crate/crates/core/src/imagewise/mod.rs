//! Per-image PGD defenses (AdvDM and Anti-DB styles), the regression-pair
//! store built from them, and Gaussian noise baselines.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{diffusion_loss, Denoiser, ImageBatch, Schedule, Wrt, INPUT_GRAD};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Bundle;
use crate::numerics::{adam_step, sign, streams, AdamHyper, AdamState, ParamSet, Rng, Tensor};

/// Budget in `[-1, 1]` pixel units for a budget stated in `[0, 1]` units.
pub fn budget_from_unit(unit: f32) -> f32 {
    2.0 * unit
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdMode {
    Advdm,
    Antidb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub eps_budget: f32,
    pub gamma: f32,
    pub steps: usize,
    pub mode: PgdMode,
    /// Anti-DB: fine-tune the surrogate every this many PGD steps.
    pub refresh_every: usize,
    /// Anti-DB: surrogate fine-tuning steps per refresh.
    pub refresh_steps: usize,
    pub refresh_lr: f32,
}

impl Default for PgdConfig {
    fn default() -> Self {
        let eps = budget_from_unit(8.0 / 255.0);
        Self {
            eps_budget: eps,
            gamma: eps / 10.0,
            steps: 50,
            mode: PgdMode::Advdm,
            refresh_every: 10,
            refresh_steps: 20,
            refresh_lr: 1e-4,
        }
    }
}

impl PgdConfig {
    pub fn with_budget(eps_budget: f32) -> Self {
        Self {
            eps_budget,
            gamma: eps_budget / 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_budget > 0.0) {
            return Err(Error::Config("eps_budget must be positive".into()));
        }
        if !(0.0..=self.eps_budget).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, eps_budget]".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("PGD needs at least one step".into()));
        }
        if self.mode == PgdMode::Antidb && self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be positive".into()));
        }
        Ok(())
    }
}

/// Bounded perturbation `δ` with `‖δ‖∞ ≤ eps_budget`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub eps_budget: f32,
}

impl Perturbation {
    pub fn zeros(shape: &[usize], eps_budget: f32) -> Self {
        Self {
            delta: Tensor::zeros(shape),
            eps_budget,
        }
    }

    /// `clamp(x0 + δ, -1, 1)`.
    pub fn apply(&self, x0: &ImageBatch) -> Result<ImageBatch> {
        x0.with_images(x0.images().add(&self.delta)?)
    }

    pub fn within_budget(&self) -> bool {
        self.delta.abs_max() <= self.eps_budget
    }
}

/// Result of a PGD run. `failed` lists images whose gradient went
/// non-finite; their `δ` is the last valid iterate.
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub perturbation: Perturbation,
    pub failed: Vec<(usize, String)>,
}

/// Sign-gradient ascent with projection onto the `L∞` ball.
///
/// `grad` receives the current defended images and the step index and
/// returns the ascent gradient. `on_iter` observes every iterate.
pub fn pgd_loop(
    x0: &ImageBatch,
    cfg: &PgdConfig,
    mut grad: impl FnMut(&ImageBatch, usize) -> Result<Tensor>,
    mut on_iter: impl FnMut(&Tensor),
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let shape = x0.images().shape().to_vec();
    let mut delta = Tensor::zeros(&shape);
    let mut active = vec![true; x0.len()];
    let mut failed = Vec::new();
    let n = delta.item_len();
    for step in 0..cfg.steps {
        let defended = x0.with_images(x0.images().add(&delta)?)?;
        let g = grad(&defended, step)?;
        g.same_shape(&delta, "PGD gradient")?;
        for (i, live) in active.iter_mut().enumerate() {
            if !*live {
                continue;
            }
            let gi = g.item_slice(i);
            if gi.iter().any(|v| !v.is_finite()) {
                *live = false;
                failed.push((i, format!("non-finite gradient at step {step}")));
                continue;
            }
            let d = &mut delta.data_mut()[i * n..(i + 1) * n];
            for (dv, &gv) in d.iter_mut().zip(gi) {
                *dv = (*dv + cfg.gamma * sign(gv)).clamp(-cfg.eps_budget, cfg.eps_budget);
            }
        }
        on_iter(&delta);
    }
    Ok(PgdOutcome {
        perturbation: Perturbation {
            delta,
            eps_budget: cfg.eps_budget,
        },
        failed,
    })
}

/// Summed input gradient of the null-conditioned diffusion loss over
/// `models`, one fresh `(t, ε)` per image.
fn ascent_gradient(models: &[&Denoiser], x: &ImageBatch, rng: &mut Rng) -> Result<Tensor> {
    let sched = Schedule::default();
    let cond = vec![0; x.len()];
    let mut acc = Tensor::zeros(x.images().shape());
    for m in models {
        let b = match diffusion_loss(*m, x, &cond, rng, 1, Wrt::Input, &sched) {
            Ok(b) => b,
            // A non-finite loss poisons every image; let the per-image check
            // record it.
            Err(Error::NonFinite(_)) => return Ok(Tensor::full(x.images().shape(), f32::NAN)),
            Err(e) => return Err(e),
        };
        acc = acc.add(&b.grads[INPUT_GRAD])?;
    }
    Ok(acc)
}

/// PGD defense of `x0` against `targets` (frozen).
pub fn pgd_defend(
    x0: &ImageBatch,
    targets: &[Denoiser],
    cfg: &PgdConfig,
    rng: &mut Rng,
) -> Result<PgdOutcome> {
    if targets.is_empty() {
        return Err(Error::Config("PGD needs at least one target model".into()));
    }
    match cfg.mode {
        PgdMode::Advdm => {
            let refs: Vec<&Denoiser> = targets.iter().collect();
            pgd_loop(x0, cfg, |x, _| ascent_gradient(&refs, x, rng), |_| {})
        }
        PgdMode::Antidb => {
            let mut surrogate = targets[0].clone();
            let mut adam = AdamState::new(AdamHyper::with_lr(cfg.refresh_lr));
            let mut ft_rng = rng.fork(streams::SHUFFLE);
            let sched = Schedule::default();
            pgd_loop(
                x0,
                cfg,
                |x, step| {
                    if step % cfg.refresh_every == 0 {
                        let cond = vec![0; x.len()];
                        for _ in 0..cfg.refresh_steps {
                            let b = diffusion_loss(
                                &surrogate,
                                x,
                                &cond,
                                &mut ft_rng,
                                1,
                                Wrt::Params,
                                &sched,
                            )?;
                            adam_step(&mut surrogate.params, &b, &mut adam)?;
                        }
                    }
                    ascent_gradient(&[&surrogate], x, rng)
                },
                |_| {},
            )
        }
    }
}

/// Fixed `(image index → δ)` pairs for the regression term.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PairStore {
    pub eps_budget: f32,
    pub pairs: BTreeMap<usize, Tensor>,
    pub failed: Vec<(usize, String)>,
}

impl PairStore {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Tensor> {
        self.pairs.get(&id).ok_or(Error::MissingPair(id))
    }

    pub fn ids(&self) -> Vec<usize> {
        self.pairs.keys().copied().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ps = ParamSet::new();
        for (id, d) in &self.pairs {
            ps.insert(format!("pair.{id:08}"), d.clone());
        }
        Bundle::new(ps)
            .with_meta("kind", "pairs")
            .with_meta("eps_budget", self.eps_budget.to_string())
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::load(path)?;
        let eps_budget = b
            .meta("eps_budget")?
            .parse()
            .map_err(|e| Error::Malformed(format!("eps_budget: {e}")))?;
        let mut pairs = BTreeMap::new();
        for (name, t) in b.tensors.iter() {
            let id = name
                .strip_prefix("pair.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Malformed(format!("unexpected entry `{name}`")))?;
            pairs.insert(id, t.clone());
        }
        Ok(Self {
            eps_budget,
            pairs,
            failed: Vec::new(),
        })
    }
}

/// Number of pairs a fraction of `n` images yields.
pub fn pair_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

/// Run PGD on a deterministic random `fraction` of `data` and keep the
/// perturbations keyed by image index.
pub fn build_regression_pairs(
    data: &ImageBatch,
    fraction: f64,
    targets: &[Denoiser],
    cfg: &PgdConfig,
    rng: &mut Rng,
) -> Result<PairStore> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "pair fraction {fraction} outside (0, 1]"
        )));
    }
    let k = pair_count(data.len(), fraction);
    let mut pick = rng.fork(streams::SHUFFLE);
    let mut chosen = pick.choose_indices(data.len(), k);
    chosen.sort_unstable();
    let mut store = PairStore {
        eps_budget: cfg.eps_budget,
        ..Default::default()
    };
    const CHUNK: usize = 8;
    for ids in chosen.chunks(CHUNK) {
        let x = data.select(ids);
        match pgd_defend(&x, targets, cfg, rng) {
            Ok(out) => {
                let failed: Vec<usize> = out.failed.iter().map(|(i, _)| *i).collect();
                for (j, &id) in ids.iter().enumerate() {
                    if failed.contains(&j) {
                        continue;
                    }
                    store.pairs.insert(id, out.perturbation.delta.item_at(j));
                }
                for (j, why) in out.failed {
                    store.failed.push((ids[j], why));
                }
            }
            Err(e) => {
                for &id in ids {
                    store.failed.push((id, e.to_string()));
                }
            }
        }
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianSize {
    /// `std = ε / 3`.
    Small,
    /// `std = ε`.
    Large,
}

/// Gaussian perturbation and the raw draws it was made from.
#[derive(Clone, Debug)]
pub struct GaussianBaseline {
    pub perturbation: Perturbation,
    pub raw: Tensor,
}

/// Image quantisation step in `[-1, 1]` units.
pub const PIXEL_STEP: f32 = 1.0 / 127.5;

/// Gaussian noise, clamped to the budget and rounded to the pixel grid.
pub fn gaussian_baseline(
    shape: &[usize],
    eps_budget: f32,
    size: GaussianSize,
    rng: &mut Rng,
) -> GaussianBaseline {
    let std = match size {
        GaussianSize::Small => eps_budget / 3.0,
        GaussianSize::Large => eps_budget,
    };
    let raw = rng.gaussian(shape).scale(std);
    let delta = raw.map(|v| {
        let q = (v.clamp(-eps_budget, eps_budget) / PIXEL_STEP).round() * PIXEL_STEP;
        // Rounding may step just outside a budget that is off the grid.
        q.clamp(-eps_budget, eps_budget)
    });
    GaussianBaseline {
        perturbation: Perturbation { delta, eps_budget },
        raw,
    }
}
