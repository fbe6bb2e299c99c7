use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Bundle;
use crate::numerics::{init_normal, streams, Bound, Elem, Graph, ParamSet, Rng, Tensor, Var};

/// Sinusoidal time-feature width.
pub const TIME_FEATURES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserArch {
    /// Three-resolution conv U-net with additive time/identity embedding.
    Unet { widths: [usize; 3], emb: usize },
    /// Two convolutions around one nonlinearity; small enough for exact
    /// Jacobian bookkeeping in tests.
    Tiny { hidden: usize, emb: usize },
}

impl DenoiserArch {
    pub fn emb(&self) -> usize {
        match self {
            DenoiserArch::Unet { emb, .. } | DenoiserArch::Tiny { emb, .. } => *emb,
        }
    }
}

/// Noise-prediction network `ε_θ(x_t, t, c)`.
///
/// Row 0 of the `cond` table is the null condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub res: usize,
    pub params: ParamSet,
}

/// Anything that predicts noise on a tape. Implemented by [`Denoiser`], by
/// adapter-augmented models, and by test doubles.
pub trait EpsModel {
    /// Bind the model's tensors into `g`; names accepted by `trainable`
    /// become differentiable.
    fn bind<T: Elem>(&self, g: &Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Bound;

    /// Predicted noise for `x_t [B, 1, H, W]` at per-item times `t`.
    fn eps<T: Elem>(&self, g: &Graph<T>, p: &Bound, x_t: Var, t: &[f32], cond: &[usize]) -> Var;
}

fn conv_w(rng: &mut Rng, cout: usize, cin: usize) -> Tensor {
    init_normal(rng, &[cout, cin * 9], cin * 9, 1.0)
}

fn resblock_params(ps: &mut ParamSet, rng: &mut Rng, name: &str, c: usize, emb: usize) {
    ps.insert(format!("{name}.c1.w"), conv_w(rng, c, c));
    ps.insert(format!("{name}.c1.b"), Tensor::zeros(&[c]));
    ps.insert(
        format!("{name}.emb.w"),
        init_normal(rng, &[emb, c], emb, 1.0),
    );
    ps.insert(format!("{name}.emb.b"), Tensor::zeros(&[c]));
    // Second conv starts small so each block begins close to identity.
    ps.insert(format!("{name}.c2.w"), conv_w(rng, c, c).scale(0.1));
    ps.insert(format!("{name}.c2.b"), Tensor::zeros(&[c]));
}

impl Denoiser {
    /// Fresh initialisation with `n_ids` identity slots plus the null slot.
    pub fn init(arch: DenoiserArch, res: usize, n_ids: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed, streams::INIT);
        let mut ps = ParamSet::new();
        let emb = arch.emb();
        ps.insert(
            "temb.w1",
            init_normal(&mut rng, &[TIME_FEATURES, emb], TIME_FEATURES, 1.0),
        );
        ps.insert("temb.b1", Tensor::zeros(&[emb]));
        ps.insert("temb.w2", init_normal(&mut rng, &[emb, emb], emb, 1.0));
        ps.insert("temb.b2", Tensor::zeros(&[emb]));
        ps.insert("cond", rng.gaussian(&[n_ids + 1, emb]).scale(0.5));
        match &arch {
            DenoiserArch::Unet { widths, .. } => {
                let [c0, c1, c2] = *widths;
                assert!(res % 4 == 0, "U-net resolution must be divisible by 4");
                ps.insert("in.w", conv_w(&mut rng, c0, 1));
                ps.insert("in.b", Tensor::zeros(&[c0]));
                resblock_params(&mut ps, &mut rng, "b0", c0, emb);
                ps.insert("down1.w", conv_w(&mut rng, c1, c0));
                ps.insert("down1.b", Tensor::zeros(&[c1]));
                resblock_params(&mut ps, &mut rng, "b1", c1, emb);
                ps.insert("down2.w", conv_w(&mut rng, c2, c1));
                ps.insert("down2.b", Tensor::zeros(&[c2]));
                resblock_params(&mut ps, &mut rng, "mid", c2, emb);
                ps.insert("up1.w", conv_w(&mut rng, c1, c2 + c1));
                ps.insert("up1.b", Tensor::zeros(&[c1]));
                resblock_params(&mut ps, &mut rng, "u1", c1, emb);
                ps.insert("up0.w", conv_w(&mut rng, c0, c1 + c0));
                ps.insert("up0.b", Tensor::zeros(&[c0]));
                resblock_params(&mut ps, &mut rng, "u0", c0, emb);
                ps.insert("out.w", Tensor::zeros(&[1, c0 * 9]));
                ps.insert("out.b", Tensor::zeros(&[1]));
            }
            DenoiserArch::Tiny { hidden, .. } => {
                ps.insert("in.w", conv_w(&mut rng, *hidden, 1));
                ps.insert("in.b", Tensor::zeros(&[*hidden]));
                ps.insert("emb.w", init_normal(&mut rng, &[emb, *hidden], emb, 1.0));
                ps.insert("emb.b", Tensor::zeros(&[*hidden]));
                ps.insert("out.w", conv_w(&mut rng, 1, *hidden).scale(0.5));
                ps.insert("out.b", Tensor::zeros(&[1]));
            }
        }
        Self {
            arch,
            res,
            params: ps,
        }
    }

    /// Number of conditioning rows, null included.
    pub fn n_cond(&self) -> usize {
        self.params.get("cond").map(|t| t.shape()[0]).unwrap_or(0)
    }

    /// Convolution weights with more than one output channel; the layers
    /// adapters attach to.
    pub fn conv_weights(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, t)| {
                n.ends_with(".w")
                    && !n.starts_with("temb")
                    && !n.contains(".emb.")
                    && !n.starts_with("emb.")
                    && t.shape()[0] > 1
            })
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Bundle::new(self.params.clone())
            .with_meta("kind", "denoiser")
            .with_meta("arch", serde_json::to_string(&self.arch)?)
            .with_meta("res", self.res.to_string())
            .save(path)
    }

    /// Load and check every tensor against a fresh model of the stored
    /// architecture; the condition table may have any number of rows.
    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::load(path)?;
        if b.meta("kind")? != "denoiser" {
            return Err(Error::Malformed(format!(
                "{} is not a denoiser checkpoint",
                path.display()
            )));
        }
        let arch: DenoiserArch = serde_json::from_str(b.meta("arch")?)?;
        let res: usize = b
            .meta("res")?
            .parse()
            .map_err(|e| Error::Malformed(format!("res: {e}")))?;
        let n_ids = b.tensors.get("cond")?.shape()[0].saturating_sub(1);
        let fresh = Denoiser::init(arch.clone(), res, n_ids, 0);
        if fresh.params.len() != b.tensors.len() {
            return Err(Error::Malformed(format!(
                "{} tensors, architecture expects {}",
                b.tensors.len(),
                fresh.params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            b.tensors.get(name)?.same_shape(t, name)?;
        }
        Ok(Self {
            arch,
            res,
            params: b.tensors,
        })
    }
}

/// `[B, TIME_FEATURES]` sinusoidal features of `t ∈ [0, 1]`.
pub fn time_features(t: &[f32]) -> Tensor {
    let half = TIME_FEATURES / 2;
    Tensor::from_fn(&[t.len(), TIME_FEATURES], |i| {
        let (b, j) = (i / TIME_FEATURES, i % TIME_FEATURES);
        let k = j % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t[b] as f64 * 1000.0 * freq;
        (if j < half { arg.sin() } else { arg.cos() }) as f32
    })
}

/// Conditioning vector `[B, emb]`: time MLP plus the identity row.
fn embedding<T: Elem>(g: &Graph<T>, p: &Bound, t: &[f32], cond: &[usize]) -> Var {
    let tf = g.lift(&time_features(t));
    let h = g.linear(tf, p.var("temb.w1"), Some(p.var("temb.b1")));
    let h = g.silu(h);
    let h = g.linear(h, p.var("temb.w2"), Some(p.var("temb.b2")));
    let c = g.gather(p.var("cond"), cond);
    let e = g.add(h, c);
    g.silu(e)
}

fn conv<T: Elem>(g: &Graph<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Var {
    let y = g.conv2d(x, p.var(&format!("{name}.w")), 3, stride, 1);
    g.add_bcast(y, p.var(&format!("{name}.b")), 1)
}

fn resblock<T: Elem>(g: &Graph<T>, p: &Bound, name: &str, x: Var, e: Var) -> Var {
    let h = g.silu(x);
    let h = conv(g, p, &format!("{name}.c1"), h, 1);
    let eb = g.linear(
        e,
        p.var(&format!("{name}.emb.w")),
        Some(p.var(&format!("{name}.emb.b"))),
    );
    let h = g.add_bcast(h, eb, 1);
    let h = g.silu(h);
    let h = conv(g, p, &format!("{name}.c2"), h, 1);
    g.add(x, h)
}

impl EpsModel for Denoiser {
    fn bind<T: Elem>(&self, g: &Graph<T>, trainable: &dyn Fn(&str) -> bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn eps<T: Elem>(&self, g: &Graph<T>, p: &Bound, x_t: Var, t: &[f32], cond: &[usize]) -> Var {
        let e = embedding(g, p, t, cond);
        match &self.arch {
            DenoiserArch::Unet { .. } => {
                let h0 = conv(g, p, "in", x_t, 1);
                let h0 = resblock(g, p, "b0", h0, e);
                let h1 = conv(g, p, "down1", h0, 2);
                let h1 = resblock(g, p, "b1", h1, e);
                let h2 = conv(g, p, "down2", h1, 2);
                let h2 = resblock(g, p, "mid", h2, e);
                let u1 = g.upsample2(h2);
                let u1 = g.concat(u1, h1, 1);
                let u1 = conv(g, p, "up1", u1, 1);
                let u1 = resblock(g, p, "u1", u1, e);
                let u0 = g.upsample2(u1);
                let u0 = g.concat(u0, h0, 1);
                let u0 = conv(g, p, "up0", u0, 1);
                let u0 = resblock(g, p, "u0", u0, e);
                let out = g.silu(u0);
                conv(g, p, "out", out, 1)
            }
            DenoiserArch::Tiny { .. } => {
                let h = conv(g, p, "in", x_t, 1);
                let eb = g.linear(e, p.var("emb.w"), Some(p.var("emb.b")));
                let h = g.add_bcast(h, eb, 1);
                let h = g.tanh(h);
                conv(g, p, "out", h, 1)
            }
        }
    }
}
