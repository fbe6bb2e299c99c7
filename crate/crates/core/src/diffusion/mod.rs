//! Forward noising, the noise-prediction loss, toy denoisers, pre-training
//! and deterministic sampling.

mod denoiser;

pub use denoiser::{time_features, Denoiser, DenoiserArch, EpsModel, TIME_FEATURES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, streams, AdamHyper, AdamState, Elem, GradBundle, Graph, Rng, Tensor, Var,
};

pub const T_MIN: f32 = 0.002;
pub const T_MAX: f32 = 0.998;

/// Continuous cosine schedule `α = cos(πt/2)`, `σ = sin(πt/2)`, `w ≡ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_min: f32,
    pub t_max: f32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            t_min: T_MIN,
            t_max: T_MAX,
        }
    }
}

impl Schedule {
    pub fn alpha(&self, t: f32) -> f32 {
        (std::f64::consts::FRAC_PI_2 * t as f64).cos() as f32
    }

    pub fn sigma(&self, t: f32) -> f32 {
        (std::f64::consts::FRAC_PI_2 * t as f64).sin() as f32
    }

    pub fn weight(&self, _t: f32) -> f32 {
        1.0
    }

    pub fn contains(&self, t: f32) -> bool {
        (self.t_min..=self.t_max).contains(&t)
    }

    pub fn check(&self, t: f32) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "t = {t} outside [{}, {}]",
                self.t_min, self.t_max
            )))
        }
    }

    /// `n` evenly spaced times covering the domain.
    pub fn grid(&self, n: usize) -> Vec<f32> {
        assert!(n >= 2);
        (0..n)
            .map(|i| self.t_min + (self.t_max - self.t_min) * i as f32 / (n - 1) as f32)
            .collect()
    }
}

/// Grayscale images `[B, 1, H, W]` in `[-1, 1]` with identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    images: Tensor,
    ids: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Tensor, ids: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(format!(
                "images must be [B, 1, H, W], got {s:?}"
            )));
        }
        if ids.len() != s[0] {
            return Err(Error::shape(format!(
                "{} ids for {} images",
                ids.len(),
                s[0]
            )));
        }
        images.ensure_finite("images")?;
        if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Domain("image values must lie in [-1, 1]".into()));
        }
        Ok(Self { images, ids })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn res(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            images: self.images.select(idx),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn concat(parts: &[ImageBatch]) -> Result<ImageBatch> {
        let images = Tensor::stack(&parts.iter().map(|p| p.images.clone()).collect::<Vec<_>>())?;
        let ids = parts.iter().flat_map(|p| p.ids.iter().copied()).collect();
        Ok(ImageBatch { images, ids })
    }

    /// Indices of the images labelled `id`.
    pub fn indices_of(&self, id: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.ids[i] == id).collect()
    }

    /// Same labels with new pixels, clamped into range.
    pub fn with_images(&self, images: Tensor) -> Result<ImageBatch> {
        self.images.same_shape(&images, "with_images")?;
        ImageBatch::new(images.clamp(-1.0, 1.0), self.ids.clone())
    }
}

/// `α(t)·x0 + σ(t)·ε`.
pub fn forward_diffuse(x0: &ImageBatch, t: f32, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check(t)?;
    x0.images.same_shape(eps, "forward_diffuse noise")?;
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    x0.images.zip_map(eps, |x, e| a * x + s * e)
}

/// One Monte-Carlo draw of `(t, ε)` per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<f32>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(rng: &mut Rng, shape: &[usize], sched: &Schedule) -> Self {
        let t = (0..shape[0])
            .map(|_| rng.uniform(sched.t_min as f64, sched.t_max as f64) as f32)
            .collect();
        let eps = rng.gaussian(shape);
        Self { t, eps }
    }

    /// Every item at the same time.
    pub fn at(t: f32, eps: Tensor) -> Self {
        Self {
            t: vec![t; eps.batch()],
            eps,
        }
    }

    /// Draws stacked along the batch axis.
    pub fn concat(parts: &[NoiseDraw]) -> Result<Self> {
        Ok(Self {
            t: parts.iter().flat_map(|p| p.t.iter().copied()).collect(),
            eps: Tensor::stack(&parts.iter().map(|p| p.eps.clone()).collect::<Vec<_>>())?,
        })
    }
}

/// Record `x_t = α x0 + σ ε` for a batch of per-item times.
pub fn noisy_input<T: Elem>(g: &Graph<T>, x0: Var, draw: &NoiseDraw, sched: &Schedule) -> Var {
    let alphas: Vec<f32> = draw.t.iter().map(|&t| sched.alpha(t)).collect();
    let sigmas: Vec<f32> = draw.t.iter().map(|&t| sched.sigma(t)).collect();
    let ax = g.scale_items(x0, &alphas);
    let se = g.lift(&draw.eps);
    let se = g.scale_items(se, &sigmas);
    g.add(ax, se)
}

/// Per-item weighted residual `w(t)(ε̂ − ε)` as a graph node.
pub fn residual<T: Elem, M: EpsModel>(
    g: &Graph<T>,
    model: &M,
    p: &crate::numerics::Bound,
    x_t: Var,
    draw: &NoiseDraw,
    cond: &[usize],
    sched: &Schedule,
) -> Var {
    let eps_hat = model.eps(g, p, x_t, &draw.t, cond);
    let eps = g.lift(&draw.eps);
    let r = g.sub(eps_hat, eps);
    let w: Vec<f32> = draw.t.iter().map(|&t| sched.weight(t)).collect();
    g.scale_items(r, &w)
}

/// Batch mean of `w(t)‖ε̂ − ε‖²` for one draw. With `w ≡ 1` the weight
/// placement (inside or outside the square) is immaterial.
pub fn loss_graph<T: Elem, M: EpsModel>(
    g: &Graph<T>,
    model: &M,
    p: &crate::numerics::Bound,
    x0: Var,
    draw: &NoiseDraw,
    cond: &[usize],
    sched: &Schedule,
) -> Var {
    let x_t = noisy_input(g, x0, draw, sched);
    let r = residual(g, model, p, x_t, draw, cond, sched);
    let s = g.sq_sum(r);
    g.scale(s, 1.0 / draw.t.len() as f32)
}

/// What [`diffusion_loss`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Input,
}

/// Name under which the input gradient appears in a bundle.
pub const INPUT_GRAD: &str = "input";

/// Monte-Carlo diffusion loss on `x0` with `n_mc` draws per image.
///
/// With [`Wrt::Input`] the bundle holds a single entry named
/// [`INPUT_GRAD`].
pub fn diffusion_loss<M: EpsModel>(
    model: &M,
    x0: &ImageBatch,
    cond: &[usize],
    rng: &mut Rng,
    n_mc: usize,
    wrt: Wrt,
    sched: &Schedule,
) -> Result<GradBundle> {
    if n_mc == 0 {
        return Err(Error::Domain("n_mc must be at least 1".into()));
    }
    let draws: Vec<NoiseDraw> = (0..n_mc)
        .map(|_| NoiseDraw::sample(rng, x0.images.shape(), sched))
        .collect();
    diffusion_loss_with(model, x0, cond, &draws, wrt, sched)
}

/// [`diffusion_loss`] on explicit draws.
pub fn diffusion_loss_with<M: EpsModel>(
    model: &M,
    x0: &ImageBatch,
    cond: &[usize],
    draws: &[NoiseDraw],
    wrt: Wrt,
    sched: &Schedule,
) -> Result<GradBundle> {
    let n_mc = draws.len();
    let draw = NoiseDraw::concat(draws)?;
    let reps: Vec<ImageBatch> = (0..n_mc).map(|_| x0.clone()).collect();
    let big = ImageBatch::concat(&reps)?;
    let conds: Vec<usize> = (0..n_mc).flat_map(|_| cond.iter().copied()).collect();
    let g = Graph::new();
    let p = model.bind(&g, &|_| wrt == Wrt::Params);
    let x = match wrt {
        Wrt::Params => g.constant(big.images.clone()),
        Wrt::Input => g.param(big.images.clone()),
    };
    let loss = loss_graph(&g, model, &p, x, &draw, &conds, sched);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    let mut grads = g.backward(loss);
    match wrt {
        Wrt::Params => Ok(p.collect(&g, &mut grads, value)),
        Wrt::Input => {
            // Each replica's gradient lands on its own copy; sum them back.
            let gx = grads
                .take(x)
                .unwrap_or_else(|| Tensor::zeros(big.images.shape()));
            let n = x0.len();
            let mut acc = Tensor::zeros(x0.images.shape());
            for r in 0..n_mc {
                let idx: Vec<usize> = (r * n..(r + 1) * n).collect();
                let part = gx.select(&idx);
                acc = acc.add(&part)?;
            }
            let mut out = GradBundle {
                value,
                ..Default::default()
            };
            out.grads.insert(INPUT_GRAD.to_string(), acc);
            Ok(out)
        }
    }
}

/// Per-item loss values for one draw, without gradients.
pub fn per_item_loss<M: EpsModel>(
    model: &M,
    x0: &Tensor,
    draw: &NoiseDraw,
    cond: &[usize],
    sched: &Schedule,
) -> Vec<f64> {
    let g = Graph::new();
    let p = model.bind(&g, &|_| false);
    let x = g.constant(x0.clone());
    let x_t = noisy_input(&g, x, draw, sched);
    let r = residual(&g, model, &p, x_t, draw, cond, sched);
    let rv = g.value(r);
    (0..rv.batch())
        .map(|i| rv.item_slice(i).iter().map(|&v| v as f64 * v as f64).sum())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Probability of replacing an identity by the null condition.
    pub cond_dropout: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            cond_dropout: 0.1,
        }
    }
}

/// Condition row for dataset identity `id` (row 0 is null).
pub fn cond_slot(id: usize) -> usize {
    id + 1
}

/// Train `model` on `data`, conditioning image `i` on identity slot
/// `cond_slot(ids[i])`. Returns the per-step loss log.
pub fn pretrain(model: &mut Denoiser, data: &ImageBatch, cfg: &PretrainConfig) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Config("pretraining set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let n_cond = model.n_cond();
    if let Some(&bad) = data.ids.iter().find(|&&id| cond_slot(id) >= n_cond) {
        return Err(Error::Config(format!(
            "identity {bad} has no conditioning slot ({n_cond} rows)"
        )));
    }
    let sched = Schedule::default();
    let mut adam = AdamState::new(AdamHyper::with_lr(cfg.lr));
    let mut data_rng = Rng::new(cfg.seed, streams::SHUFFLE);
    let mut noise_rng = Rng::new(cfg.seed, streams::NOISE);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| data_rng.below(data.len())).collect();
        let batch = data.select(&idx);
        let cond: Vec<usize> = batch
            .ids
            .iter()
            .map(|&id| {
                if data_rng.uniform(0.0, 1.0) < cfg.cond_dropout as f64 {
                    0
                } else {
                    cond_slot(id)
                }
            })
            .collect();
        let bundle = diffusion_loss(model, &batch, &cond, &mut noise_rng, 1, Wrt::Params, &sched)
            .map_err(|e| Error::Divergence {
            step,
            detail: e.to_string(),
        })?;
        if !bundle.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        log.push(bundle.value);
        adam_step(&mut model.params, &bundle, &mut adam)?;
    }
    Ok(log)
}

/// Deterministic DDIM-style reverse pass from pure noise at `t_max` down to
/// `t_min` in `steps` jumps, one image per entry of `cond`.
pub fn sample<M: EpsModel>(
    model: &M,
    cond: &[usize],
    res: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let sched = Schedule::default();
    let x = rng.gaussian(&[cond.len(), 1, res, res]);
    denoise_from(model, x, sched.t_max, cond, steps, &sched)
}

/// Reverse pass starting from `x_t` at time `t_start`.
pub fn denoise_from<M: EpsModel>(
    model: &M,
    x_t: Tensor,
    t_start: f32,
    cond: &[usize],
    steps: usize,
    sched: &Schedule,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Domain("sampling needs at least one step".into()));
    }
    sched.check(t_start)?;
    let b = x_t.batch();
    let mut x = x_t;
    let mut x0_hat = x.clone();
    for i in 0..steps {
        let t = t_start + (sched.t_min - t_start) * i as f32 / steps as f32;
        let t_next = t_start + (sched.t_min - t_start) * (i + 1) as f32 / steps as f32;
        let g = Graph::new();
        let p = model.bind(&g, &|_| false);
        let xv = g.constant(x.clone());
        let eps_hat = g.value(model.eps(&g, &p, xv, &vec![t; b], cond));
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        x0_hat = x
            .zip_map(&eps_hat, |xv, e| (xv - s * e) / a)?
            .clamp(-1.0, 1.0);
        // Noise estimate consistent with the clamped prediction.
        let eps_c = x.zip_map(&x0_hat, |xv, x0| (xv - a * x0) / s)?;
        let (an, sn) = (sched.alpha(t_next), sched.sigma(t_next));
        x = x0_hat.zip_map(&eps_c, |x0, e| an * x0 + sn * e)?;
        x.ensure_finite("sampling iterate")?;
    }
    Ok(x0_hat)
}
