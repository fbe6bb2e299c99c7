//! The adversary: fine-tune a pre-trained denoiser on a handful of portraits
//! of one identity, either fully or through low-rank adapters plus a learned
//! conditioning token.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    diffusion_loss, diffusion_loss_with, per_item_loss, Denoiser, EpsModel, ImageBatch, NoiseDraw,
    Schedule, Wrt,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Bundle;
use crate::numerics::{
    adam_step, streams, AdamHyper, AdamState, Bound, Elem, GradBundle, Graph, ParamSet, Rng,
    Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalizeMode {
    Full,
    LoraTi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeConfig {
    pub mode: PersonalizeMode,
    pub steps: usize,
    pub lr: f32,
    pub rank: usize,
    pub scale: f32,
    pub batch: usize,
    pub seed: u64,
    pub images_per_id: usize,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            mode: PersonalizeMode::LoraTi,
            steps: 400,
            lr: 1e-3,
            rank: 4,
            scale: 1.0,
            batch: 4,
            seed: 0,
            images_per_id: 12,
        }
    }
}

impl PersonalizeConfig {
    pub fn full() -> Self {
        Self {
            mode: PersonalizeMode::Full,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images_per_id == 0 {
            return Err(Error::Config("images_per_id must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

/// Low-rank factors per adapted conv weight: `W' = W + scale · B A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub scale: f32,
    /// `{layer}.a` is `[r, in]`, `{layer}.b` is `[out, r]`.
    pub params: ParamSet,
}

impl AdapterSet {
    /// Adapters on every conv weight of `base`; `B = 0` so the adapted model
    /// starts as an exact copy.
    pub fn init(base: &Denoiser, rank: usize, scale: f32, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed, streams::INIT);
        let mut params = ParamSet::new();
        for name in base.conv_weights() {
            let w = base.params.get(&name)?;
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            if rank > out.min(inp) {
                return Err(Error::Config(format!(
                    "rank {rank} exceeds min dims of `{name}` {:?}",
                    w.shape()
                )));
            }
            params.insert(
                format!("{name}.a"),
                rng.gaussian(&[rank, inp]).scale(1.0 / (inp as f32).sqrt()),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(&[out, rank]));
        }
        Ok(Self {
            rank,
            scale,
            params,
        })
    }

    pub fn layers(&self) -> Vec<String> {
        self.params
            .iter()
            .filter_map(|(n, _)| n.strip_suffix(".a").map(str::to_string))
            .collect()
    }
}

/// Conditioning vector for the personalised identity slot.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedToken {
    pub embedding: Tensor,
}

impl LearnedToken {
    /// Copy of the base model's null-condition row.
    pub fn from_null(base: &Denoiser) -> Result<Self> {
        let table = base.params.get("cond")?;
        Ok(Self {
            embedding: table.select(&[0]),
        })
    }
}

const ADAPTER_PREFIX: &str = "lora.";
const TOKEN: &str = "token";

/// Base model with adapters and a learned token in slot `base.n_cond()`.
pub struct AdaptedDenoiser<'a> {
    pub base: &'a Denoiser,
    pub adapters: &'a AdapterSet,
    pub token: &'a LearnedToken,
}

impl AdaptedDenoiser<'_> {
    /// Conditioning slot of the learned token.
    pub fn slot(&self) -> usize {
        self.base.n_cond()
    }

    /// Trainable tensors under the names [`EpsModel::bind`] uses.
    fn trainables(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (n, t) in self.adapters.params.iter() {
            ps.insert(format!("{ADAPTER_PREFIX}{n}"), t.clone());
        }
        ps.insert(TOKEN, self.token.embedding.clone());
        ps
    }
}

fn is_trainable(name: &str) -> bool {
    name.starts_with(ADAPTER_PREFIX) || name == TOKEN
}

impl EpsModel for AdaptedDenoiser<'_> {
    fn bind<T: Elem>(&self, g: &Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Bound {
        let mut p = self.base.params.bind(g, |_| false);
        let extra = self
            .trainables()
            .bind(g, |n| trainable(n) && is_trainable(n));
        for layer in self.adapters.layers() {
            let a = extra.var(&format!("{ADAPTER_PREFIX}{layer}.a"));
            let b = extra.var(&format!("{ADAPTER_PREFIX}{layer}.b"));
            let ba = g.matmul(b, a);
            let ba = g.scale(ba, self.adapters.scale);
            let w = g.add(p.var(&layer), ba);
            p.rebind(&layer, w);
            p.insert(format!("{ADAPTER_PREFIX}{layer}.a"), a);
            p.insert(format!("{ADAPTER_PREFIX}{layer}.b"), b);
        }
        let token = extra.var(TOKEN);
        let table = g.concat(p.var("cond"), token, 0);
        p.rebind("cond", table);
        p.insert(TOKEN, token);
        p
    }

    fn eps<T: Elem>(&self, g: &Graph<T>, p: &Bound, x_t: Var, t: &[f32], cond: &[usize]) -> Var {
        self.base.eps(g, p, x_t, t, cond)
    }
}

fn check_refs(base: &Denoiser, refs: &ImageBatch) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::Config("no reference images".into()));
    }
    if refs.res() != base.res {
        return Err(Error::shape(format!(
            "reference resolution {} vs model {}",
            refs.res(),
            base.res
        )));
    }
    Ok(())
}

fn divergence(step: usize, bundle: &GradBundle) -> Result<()> {
    if bundle.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: "non-finite personalization gradient".into(),
        })
    }
}

/// Full fine-tuning with a fresh identity slot appended to the condition
/// table. Returns the tuned copy, its slot, and the loss log.
pub fn finetune_full(
    base: &Denoiser,
    refs: &ImageBatch,
    cfg: &PersonalizeConfig,
) -> Result<(Denoiser, usize, Vec<f32>)> {
    cfg.validate()?;
    check_refs(base, refs)?;
    let mut model = base.clone();
    let slot = base.n_cond();
    let table = base.params.get("cond")?;
    let grown = Tensor::stack(&[table.clone(), table.select(&[0])])?;
    model.params.insert("cond", grown);
    let mut adam = AdamState::new(AdamHyper::with_lr(cfg.lr));
    let mut pick = Rng::new(cfg.seed, streams::SHUFFLE);
    let mut noise = Rng::new(cfg.seed, streams::NOISE);
    let sched = Schedule::default();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| pick.below(refs.len())).collect();
        let batch = refs.select(&idx);
        let cond = vec![slot; idx.len()];
        let bundle = diffusion_loss(&model, &batch, &cond, &mut noise, 1, Wrt::Params, &sched)?;
        divergence(step, &bundle)?;
        log.push(bundle.value);
        adam_step(&mut model.params, &bundle, &mut adam)?;
    }
    Ok((model, slot, log))
}

/// Adapter + token personalization; the base is never modified.
pub fn finetune_lora_ti(
    base: &Denoiser,
    refs: &ImageBatch,
    cfg: &PersonalizeConfig,
) -> Result<(AdapterSet, LearnedToken, Vec<f32>)> {
    cfg.validate()?;
    check_refs(base, refs)?;
    let mut adapters = AdapterSet::init(base, cfg.rank, cfg.scale, cfg.seed)?;
    let mut token = LearnedToken::from_null(base)?;
    let mut adam = AdamState::new(AdamHyper::with_lr(cfg.lr));
    let mut pick = Rng::new(cfg.seed, streams::SHUFFLE);
    let mut noise = Rng::new(cfg.seed, streams::NOISE);
    let sched = Schedule::default();
    let slot = base.n_cond();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| pick.below(refs.len())).collect();
        let batch = refs.select(&idx);
        let cond = vec![slot; idx.len()];
        let draw = NoiseDraw::sample(&mut noise, batch.images().shape(), &sched);
        let model = AdaptedDenoiser {
            base,
            adapters: &adapters,
            token: &token,
        };
        let bundle = diffusion_loss_with(&model, &batch, &cond, &[draw], Wrt::Params, &sched)?;
        divergence(step, &bundle)?;
        log.push(bundle.value);
        let mut trainable = model.trainables();
        adam_step(&mut trainable, &bundle, &mut adam)?;
        split_trainables(trainable, &mut adapters, &mut token);
    }
    Ok((adapters, token, log))
}

fn split_trainables(ps: ParamSet, adapters: &mut AdapterSet, token: &mut LearnedToken) {
    let mut rest = BTreeMap::new();
    for (n, t) in ps.0 {
        if n == TOKEN {
            token.embedding = t;
        } else if let Some(stripped) = n.strip_prefix(ADAPTER_PREFIX) {
            rest.insert(stripped.to_string(), t);
        }
    }
    adapters.params = ParamSet(rest);
}

/// Personalised model ready for evaluation, whichever mode produced it.
pub enum Personalized {
    Full {
        model: Denoiser,
        slot: usize,
    },
    LoraTi {
        adapters: AdapterSet,
        token: LearnedToken,
    },
}

impl Personalized {
    pub fn slot(&self, base: &Denoiser) -> usize {
        match self {
            Personalized::Full { slot, .. } => *slot,
            Personalized::LoraTi { .. } => base.n_cond(),
        }
    }

    /// Full fine-tunes are stored as a denoiser; adapters and token are
    /// stored on their own and need the base at load time.
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Personalized::Full { model, slot } => Bundle::new(model.params.clone())
                .with_meta("kind", "personalized_full")
                .with_meta("arch", serde_json::to_string(&model.arch)?)
                .with_meta("res", model.res.to_string())
                .with_meta("slot", slot.to_string()),
            Personalized::LoraTi { adapters, token } => {
                let mut ps = adapters.params.clone();
                ps.insert(TOKEN, token.embedding.clone());
                Bundle::new(ps)
                    .with_meta("kind", "personalized_lora_ti")
                    .with_meta("rank", adapters.rank.to_string())
                    .with_meta("scale", adapters.scale.to_string())
            }
        }
        .save(path)
    }

    pub fn load(path: &Path, base: &Denoiser) -> Result<Self> {
        let mut b = Bundle::load(path)?;
        let num = |b: &Bundle, k: &str| -> Result<f64> {
            b.meta(k)?
                .parse()
                .map_err(|e| Error::Malformed(format!("{k}: {e}")))
        };
        match b.meta("kind")? {
            "personalized_full" => {
                let slot = num(&b, "slot")? as usize;
                let model = Denoiser {
                    arch: serde_json::from_str(b.meta("arch")?)?,
                    res: num(&b, "res")? as usize,
                    params: b.tensors,
                };
                if slot >= model.n_cond() {
                    return Err(Error::Malformed(format!(
                        "slot {slot} beyond condition table"
                    )));
                }
                Ok(Personalized::Full { model, slot })
            }
            "personalized_lora_ti" => {
                let embedding = b
                    .tensors
                    .0
                    .remove(TOKEN)
                    .ok_or_else(|| Error::MissingTensor(TOKEN.into()))?;
                let rank = num(&b, "rank")? as usize;
                let scale = num(&b, "scale")? as f32;
                let fresh = AdapterSet::init(base, rank, scale, 0)?;
                for (name, t) in fresh.params.iter() {
                    b.tensors.get(name)?.same_shape(t, name)?;
                }
                Ok(Personalized::LoraTi {
                    adapters: AdapterSet {
                        rank,
                        scale,
                        params: b.tensors,
                    },
                    token: LearnedToken { embedding },
                })
            }
            other => Err(Error::Malformed(format!(
                "unexpected checkpoint kind `{other}`"
            ))),
        }
    }
}

/// Run the configured personalization mode. Also returns the loss log.
pub fn personalize(
    base: &Denoiser,
    refs: &ImageBatch,
    cfg: &PersonalizeConfig,
) -> Result<(Personalized, Vec<f32>)> {
    match cfg.mode {
        PersonalizeMode::Full => {
            let (model, slot, log) = finetune_full(base, refs, cfg)?;
            Ok((Personalized::Full { model, slot }, log))
        }
        PersonalizeMode::LoraTi => {
            let (adapters, token, log) = finetune_lora_ti(base, refs, cfg)?;
            Ok((Personalized::LoraTi { adapters, token }, log))
        }
    }
}

/// Call `f` with the personalised model as an [`EpsModel`] and its slot.
pub fn with_model<R>(
    base: &Denoiser,
    p: &Personalized,
    f: impl FnOnce(&dyn PersonalModel) -> R,
) -> R {
    match p {
        Personalized::Full { model, slot } => f(&Slotted { model, slot: *slot }),
        Personalized::LoraTi { adapters, token } => f(&AdaptedDenoiser {
            base,
            adapters,
            token,
        }),
    }
}

/// Object-safe evaluation view of a personalised model.
pub trait PersonalModel {
    fn slot(&self) -> usize;
    /// Mean diffusion loss over fixed draws on `images`, conditioned on the
    /// personal slot.
    fn loss_on(&self, images: &ImageBatch, draws: &[NoiseDraw]) -> Result<f64>;
    /// Samples from the personal slot.
    fn generate(&self, n: usize, steps: usize, rng: &mut Rng) -> Result<Tensor>;
}

struct Slotted<'a> {
    model: &'a Denoiser,
    slot: usize,
}

fn loss_on<M: EpsModel>(
    m: &M,
    slot: usize,
    images: &ImageBatch,
    draws: &[NoiseDraw],
) -> Result<f64> {
    if draws.is_empty() || images.is_empty() {
        return Err(Error::Domain(
            "loss needs at least one image and one draw".into(),
        ));
    }
    let cond = vec![slot; images.len()];
    let sched = Schedule::default();
    let mut acc = 0.0;
    for d in draws {
        acc += per_item_loss(m, images.images(), d, &cond, &sched)
            .iter()
            .sum::<f64>();
    }
    let v = acc / (draws.len() * images.len()) as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("personalised loss".into()))
    }
}

impl PersonalModel for Slotted<'_> {
    fn slot(&self) -> usize {
        self.slot
    }

    fn loss_on(&self, images: &ImageBatch, draws: &[NoiseDraw]) -> Result<f64> {
        loss_on(self.model, self.slot, images, draws)
    }

    fn generate(&self, n: usize, steps: usize, rng: &mut Rng) -> Result<Tensor> {
        crate::diffusion::sample(self.model, &vec![self.slot; n], self.model.res, steps, rng)
    }
}

impl PersonalModel for AdaptedDenoiser<'_> {
    fn slot(&self) -> usize {
        AdaptedDenoiser::slot(self)
    }

    fn loss_on(&self, images: &ImageBatch, draws: &[NoiseDraw]) -> Result<f64> {
        loss_on(self, AdaptedDenoiser::slot(self), images, draws)
    }

    fn generate(&self, n: usize, steps: usize, rng: &mut Rng) -> Result<Tensor> {
        let slot = AdaptedDenoiser::slot(self);
        crate::diffusion::sample(self, &vec![slot; n], self.base.res, steps, rng)
    }
}

#[cfg(test)]
mod tests;
