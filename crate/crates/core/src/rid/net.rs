use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init_normal, streams, Bound, Elem, Graph, ParamSet, Rng, Tensor, Var};

/// Patch transformer shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenderArch {
    pub layers: usize,
    pub hidden: usize,
    pub patch: usize,
    pub heads: usize,
    pub res: usize,
}

impl Default for DefenderArch {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            patch: 4,
            heads: 4,
            res: 32,
        }
    }
}

impl DefenderArch {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.patch == 0 {
            return Err(Error::Config("defender dimensions must be positive".into()));
        }
        if self.res % self.patch != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by patch {}",
                self.res, self.patch
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.res / self.patch).pow(2)
    }
}

/// Feed-forward perturbation generator `δ_φ(x) = ε · tanh(f_φ(x))`.
///
/// A DiT-style patch transformer whose adaLN modulation is driven by a zero
/// conditioning vector, so each block's shift, scale and gate reduce to
/// learned biases.
#[derive(Clone, Debug, PartialEq)]
pub struct DefenderNet {
    pub arch: DefenderArch,
    pub eps_budget: f32,
    pub params: ParamSet,
}

impl DefenderNet {
    pub fn init(arch: DefenderArch, eps_budget: f32, seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(eps_budget > 0.0) {
            return Err(Error::Config("eps_budget must be positive".into()));
        }
        let mut rng = Rng::new(seed, streams::INIT);
        let d = arch.hidden;
        let pp = arch.patch * arch.patch;
        let mut ps = ParamSet::new();
        ps.insert("patch.w", init_normal(&mut rng, &[pp, d], pp, 1.0));
        ps.insert("patch.b", Tensor::zeros(&[d]));
        ps.insert("pos", rng.gaussian(&[arch.tokens(), d]).scale(0.02));
        for i in 0..arch.layers {
            let b = format!("blk{i}");
            ps.insert(format!("{b}.ada.w"), Tensor::zeros(&[d, 6 * d]));
            ps.insert(format!("{b}.ada.b"), Tensor::zeros(&[6 * d]));
            ps.insert(
                format!("{b}.qkv.w"),
                init_normal(&mut rng, &[d, 3 * d], d, 1.0),
            );
            ps.insert(format!("{b}.qkv.b"), Tensor::zeros(&[3 * d]));
            ps.insert(
                format!("{b}.proj.w"),
                init_normal(&mut rng, &[d, d], d, 1.0),
            );
            ps.insert(format!("{b}.proj.b"), Tensor::zeros(&[d]));
            ps.insert(
                format!("{b}.fc1.w"),
                init_normal(&mut rng, &[d, 4 * d], d, 1.0),
            );
            ps.insert(format!("{b}.fc1.b"), Tensor::zeros(&[4 * d]));
            ps.insert(
                format!("{b}.fc2.w"),
                init_normal(&mut rng, &[4 * d, d], 4 * d, 1.0),
            );
            ps.insert(format!("{b}.fc2.b"), Tensor::zeros(&[d]));
        }
        ps.insert("final.ada.w", Tensor::zeros(&[d, 2 * d]));
        ps.insert("final.ada.b", Tensor::zeros(&[2 * d]));
        ps.insert("final.w", Tensor::zeros(&[d, pp]));
        ps.insert("final.b", Tensor::zeros(&[pp]));
        Ok(Self {
            arch,
            eps_budget,
            params: ps,
        })
    }

    pub fn bind<T: Elem>(&self, g: &Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, |_| trainable)
    }

    /// Record `δ_φ(x)` for `x [B, 1, res, res]`.
    pub fn forward<T: Elem>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let a = &self.arch;
        let b = g.shape(x)[0];
        let (d, n, pp) = (a.hidden, a.tokens(), a.patch * a.patch);
        let tokens = patchify(g, x, a.res, a.patch);
        let h = g.linear(tokens, p.var("patch.w"), Some(p.var("patch.b")));
        let h = g.reshape(h, &[b, n * d]);
        let pos = g.reshape(p.var("pos"), &[n * d]);
        let h = g.add_bcast(h, pos, 1);
        let mut h = g.reshape(h, &[b * n, d]);
        let zero = g.constant(Tensor::zeros(&[1, d]).cast());
        let c = g.silu(zero);
        for i in 0..a.layers {
            let blk = format!("blk{i}");
            let m = modulation(g, p, &blk, c, 6, d);
            let x1 = modulate(g, h, m[0], m[1], d);
            let att = attention(g, p, &blk, x1, b, n, a.heads, d);
            let att = g.mul_bcast(att, m[2], 1);
            h = g.add(h, att);
            let x2 = modulate(g, h, m[3], m[4], d);
            let f = g.linear(
                x2,
                p.var(&format!("{blk}.fc1.w")),
                Some(p.var(&format!("{blk}.fc1.b"))),
            );
            let f = g.gelu(f);
            let f = g.linear(
                f,
                p.var(&format!("{blk}.fc2.w")),
                Some(p.var(&format!("{blk}.fc2.b"))),
            );
            let f = g.mul_bcast(f, m[5], 1);
            h = g.add(h, f);
        }
        let m = modulation(g, p, "final", c, 2, d);
        let hf = modulate(g, h, m[0], m[1], d);
        let raw = g.linear(hf, p.var("final.w"), Some(p.var("final.b")));
        debug_assert_eq!(g.shape(raw), vec![b * n, pp]);
        let raw = unpatchify(g, raw, b, a.res, a.patch);
        let y = g.tanh(raw);
        g.scale(y, self.eps_budget)
    }

    /// Number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }
}

/// `[B, 1, H, W] -> [B * N, p * p]` in row-major patch order.
fn patchify<T: Elem>(g: &Graph<T>, x: Var, res: usize, p: usize) -> Var {
    let b = g.shape(x)[0];
    let q = res / p;
    let x = g.reshape(x, &[b, q, p, q, p]);
    let x = g.permute(x, &[0, 1, 3, 2, 4]);
    g.reshape(x, &[b * q * q, p * p])
}

fn unpatchify<T: Elem>(g: &Graph<T>, x: Var, b: usize, res: usize, p: usize) -> Var {
    let q = res / p;
    let x = g.reshape(x, &[b, q, q, p, p]);
    let x = g.permute(x, &[0, 1, 3, 2, 4]);
    g.reshape(x, &[b, 1, res, res])
}

/// `k` modulation vectors of width `d` from the (zero) conditioning `c`.
fn modulation<T: Elem>(
    g: &Graph<T>,
    p: &Bound,
    name: &str,
    c: Var,
    k: usize,
    d: usize,
) -> Vec<Var> {
    let m = g.linear(
        c,
        p.var(&format!("{name}.ada.w")),
        Some(p.var(&format!("{name}.ada.b"))),
    );
    let m = g.reshape(m, &[k, d]);
    (0..k)
        .map(|i| {
            let row = g.gather(m, &[i]);
            g.reshape(row, &[d])
        })
        .collect()
}

/// `LN(h) · (1 + scale) + shift` over rows of `h [rows, d]`.
fn modulate<T: Elem>(g: &Graph<T>, h: Var, shift: Var, scale: Var, d: usize) -> Var {
    let n = g.layer_norm(h);
    let one = g.constant(Tensor::full(&[d], 1.0).cast());
    let s = g.add(scale, one);
    let n = g.mul_bcast(n, s, 1);
    g.add_bcast(n, shift, 1)
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Elem>(
    g: &Graph<T>,
    p: &Bound,
    blk: &str,
    x: Var,
    b: usize,
    n: usize,
    heads: usize,
    d: usize,
) -> Var {
    let dh = d / heads;
    let qkv = g.linear(
        x,
        p.var(&format!("{blk}.qkv.w")),
        Some(p.var(&format!("{blk}.qkv.b"))),
    );
    let qkv = g.reshape(qkv, &[b, n, 3, heads, dh]);
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
    let qkv = g.reshape(qkv, &[3, b * heads * n * dh]);
    let part = |i: usize| {
        let v = g.gather(qkv, &[i]);
        g.reshape(v, &[b * heads, n, dh])
    };
    let (q, k, v) = (part(0), part(1), part(2));
    let s = g.bmm(q, k, false, true);
    let s = g.scale(s, 1.0 / (dh as f32).sqrt());
    let a = g.softmax(s);
    let o = g.bmm(a, v, false, false);
    let o = g.reshape(o, &[b, heads, n, dh]);
    let o = g.permute(o, &[0, 2, 1, 3]);
    let o = g.reshape(o, &[b * n, d]);
    g.linear(
        o,
        p.var(&format!("{blk}.proj.w")),
        Some(p.var(&format!("{blk}.proj.b"))),
    )
}
