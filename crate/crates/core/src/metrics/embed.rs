use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ImageBatch;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Bundle;
use crate::numerics::{
    adam_step, init_normal, streams, AdamHyper, AdamState, Bound, Graph, ParamSet, Rng, Tensor, Var,
};

/// Width of the penultimate layer.
pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Detection threshold on the max softmax probability.
    pub tau: f32,
    /// Std of additive pixel noise used as augmentation.
    pub noise_aug: f32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 32,
            lr: 2e-3,
            seed: 0,
            tau: 0.5,
            noise_aug: 0.05,
        }
    }
}

/// Small conv classifier over identities. Its penultimate activations are
/// the face embedding; its confidence is the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub params: ParamSet,
    pub n_classes: usize,
    pub res: usize,
    pub tau: f32,
}

const WIDTHS: [usize; 3] = [16, 32, 32];
/// Mean training embedding, subtracted from reported embeddings so that
/// cosine similarity reflects identity rather than the shared offset of
/// non-negative activations. The classifier sees raw activations.
const CENTER: &str = "center";

impl EmbeddingModel {
    pub fn init(n_classes: usize, res: usize, tau: f32, seed: u64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("tau {tau} outside (0, 1)")));
        }
        if n_classes < 2 {
            return Err(Error::Config(
                "embedder needs at least two identities".into(),
            ));
        }
        let mut rng = Rng::new(seed, streams::INIT);
        let mut ps = ParamSet::new();
        let mut cin = 1;
        for (i, &c) in WIDTHS.iter().enumerate() {
            ps.insert(
                format!("c{i}.w"),
                init_normal(&mut rng, &[c, cin * 9], cin * 9, 1.0),
            );
            ps.insert(format!("c{i}.b"), Tensor::zeros(&[c]));
            cin = c;
        }
        ps.insert("fc.w", init_normal(&mut rng, &[cin, EMBED_DIM], cin, 1.0));
        ps.insert("fc.b", Tensor::zeros(&[EMBED_DIM]));
        ps.insert(
            "head.w",
            init_normal(&mut rng, &[EMBED_DIM, n_classes], EMBED_DIM, 1.0),
        );
        ps.insert("head.b", Tensor::zeros(&[n_classes]));
        ps.insert(CENTER, Tensor::zeros(&[1, EMBED_DIM]));
        Ok(Self {
            params: ps,
            n_classes,
            res,
            tau,
        })
    }

    fn features(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for i in 0..WIDTHS.len() {
            let stride = if i == 0 { 1 } else { 2 };
            h = g.conv2d(h, p.var(&format!("c{i}.w")), 3, stride, 1);
            h = g.add_bcast(h, p.var(&format!("c{i}.b")), 1);
            h = g.silu(h);
        }
        let h = g.mean_spatial(h);
        let h = g.linear(h, p.var("fc.w"), Some(p.var("fc.b")));
        g.silu(h)
    }

    fn check(&self, images: &ImageBatch) -> Result<()> {
        if images.res() != self.res {
            return Err(Error::Shape(format!(
                "embedder expects {0}x{0}, got {1}x{1}",
                self.res,
                images.res()
            )));
        }
        Ok(())
    }

    fn centered(&self, raw: &Tensor) -> Result<Tensor> {
        let c = self.params.get(CENTER)?;
        let d = raw.item_len();
        Ok(Tensor::from_fn(raw.shape(), |i| {
            raw.data()[i] - c.data()[i % d]
        }))
    }

    /// `[B, EMBED_DIM]` penultimate activations minus the training mean.
    pub fn embed(&self, images: &ImageBatch) -> Result<Tensor> {
        self.check(images)?;
        let g = Graph::new();
        let p = self.params.bind(&g, |_| false);
        let x = g.constant(images.images().clone());
        let e = self.features(&g, &p, x);
        self.centered(g.value(e).as_ref())
    }

    /// Embeddings plus `(argmax class, max softmax probability)` per image.
    pub fn embed_and_classify(&self, images: &ImageBatch) -> Result<(Tensor, Vec<(usize, f32)>)> {
        self.check(images)?;
        let g = Graph::new();
        let p = self.params.bind(&g, |_| false);
        let x = g.constant(images.images().clone());
        let e = self.features(&g, &p, x);
        let logits = g.linear(e, p.var("head.w"), Some(p.var("head.b")));
        let probs = g.softmax(logits);
        let pv = g.value(probs);
        let k = self.n_classes;
        let cls = (0..images.len())
            .map(|i| {
                let row = &pv.data()[i * k..(i + 1) * k];
                let (c, &v) =
                    row.iter()
                        .enumerate()
                        .fold((0, &f32::MIN), |a, b| if b.1 > a.1 { b } else { a });
                (c, v)
            })
            .collect();
        Ok((self.centered(g.value(e).as_ref())?, cls))
    }

    pub fn classify(&self, images: &ImageBatch) -> Result<Vec<(usize, f32)>> {
        Ok(self.embed_and_classify(images)?.1)
    }

    /// Fraction of `images` whose predicted class equals their id.
    pub fn accuracy(&self, images: &ImageBatch) -> Result<f64> {
        let c = self.classify(images)?;
        let hits = c
            .iter()
            .zip(images.ids())
            .filter(|((p, _), &id)| *p == id)
            .count();
        Ok(hits as f64 / images.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Bundle::new(self.params.clone())
            .with_meta("kind", "embedder")
            .with_meta("n_classes", self.n_classes.to_string())
            .with_meta("res", self.res.to_string())
            .with_meta("tau", self.tau.to_string())
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::load(path)?;
        if b.meta("kind")? != "embedder" {
            return Err(Error::Malformed(format!(
                "{} is not an embedder checkpoint",
                path.display()
            )));
        }
        let parse = |k: &str| -> Result<f64> {
            b.meta(k)?
                .parse()
                .map_err(|e| Error::Malformed(format!("{k}: {e}")))
        };
        Ok(Self {
            n_classes: parse("n_classes")? as usize,
            res: parse("res")? as usize,
            tau: parse("tau")? as f32,
            params: b.tensors,
        })
    }
}

/// Train the identity classifier on labelled images (labels are the ids).
pub fn train_embedder(
    data: &ImageBatch,
    n_classes: usize,
    cfg: &EmbedderConfig,
) -> Result<(EmbeddingModel, Vec<f32>)> {
    if let Some(&bad) = data.ids().iter().find(|&&id| id >= n_classes) {
        return Err(Error::Config(format!(
            "label {bad} outside {n_classes} classes"
        )));
    }
    let mut model = EmbeddingModel::init(n_classes, data.res(), cfg.tau, cfg.seed)?;
    let root = Rng::new(cfg.seed, 0);
    let mut shuffle = root.fork(streams::SHUFFLE);
    let mut noise = root.fork(streams::NOISE);
    let mut opt = AdamState::new(AdamHyper::with_lr(cfg.lr));
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| shuffle.below(data.len())).collect();
        let b = data.select(&idx);
        let x = b
            .images()
            .add(&noise.gaussian(b.images().shape()).scale(cfg.noise_aug))?;
        let g = Graph::new();
        let p = model.params.bind(&g, |n| n != CENTER);
        let xv = g.constant(x);
        let e = model.features(&g, &p, xv);
        let logits = g.linear(e, p.var("head.w"), Some(p.var("head.b")));
        let loss = g.cross_entropy(logits, b.ids());
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("embedder loss".into()));
        }
        let mut grads = g.backward(loss);
        let bundle = p.collect(&g, &mut grads, value);
        adam_step(&mut model.params, &bundle, &mut opt)?;
        log.push(value);
    }
    let raw = {
        let g = Graph::new();
        let p = model.params.bind(&g, |_| false);
        let e = model.features(&g, &p, g.constant(data.images().clone()));
        g.value(e).as_ref().clone()
    };
    let d = raw.item_len();
    let n = raw.batch() as f32;
    let center = Tensor::from_fn(&[1, d], |j| {
        (0..raw.batch()).map(|i| raw.item_slice(i)[j]).sum::<f32>() / n
    });
    model.params.insert(CENTER, center);
    Ok((model, log))
}

/// Identity similarity of generated images to references.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsmScore {
    /// Cosine of mean embeddings; `None` when nothing was detected.
    pub ism: Option<f64>,
    /// Detected fraction of the generated set.
    pub dr: f64,
    /// `ism · dr`, or 0 without detections.
    pub aism: f64,
}

fn mean_rows(e: &Tensor, keep: &[bool]) -> Option<Vec<f64>> {
    let d = e.item_len();
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            for (a, &v) in acc.iter_mut().zip(e.item_slice(i)) {
                *a += v as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| acc.into_iter().map(|v| v / n as f64).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// ISM from precomputed embeddings and confidences. References without a
/// single detection fall back to all references.
pub fn ism_from_embeddings(
    gen: &Tensor,
    gen_conf: &[f32],
    refs: &Tensor,
    ref_conf: &[f32],
    tau: f32,
) -> IsmScore {
    let gd: Vec<bool> = gen_conf.iter().map(|&c| c >= tau).collect();
    let rd: Vec<bool> = ref_conf.iter().map(|&c| c >= tau).collect();
    let dr = gd.iter().filter(|&&d| d).count() as f64 / gd.len().max(1) as f64;
    let r_mean = mean_rows(refs, &rd).or_else(|| mean_rows(refs, &vec![true; rd.len()]));
    match (mean_rows(gen, &gd), r_mean) {
        (Some(g), Some(r)) => {
            let ism = cosine(&g, &r);
            IsmScore {
                ism: Some(ism),
                dr,
                aism: ism * dr,
            }
        }
        _ => IsmScore {
            ism: None,
            dr,
            aism: 0.0,
        },
    }
}

pub fn ism(gen: &ImageBatch, refs: &ImageBatch, emb: &EmbeddingModel) -> Result<IsmScore> {
    if refs.is_empty() {
        return Err(Error::Domain("ISM needs at least one reference".into()));
    }
    let (ge, gc) = emb.embed_and_classify(gen)?;
    let (re, rc) = emb.embed_and_classify(refs)?;
    let conf = |c: &[(usize, f32)]| c.iter().map(|x| x.1).collect::<Vec<_>>();
    Ok(ism_from_embeddings(
        &ge,
        &conf(&gc),
        &re,
        &conf(&rc),
        emb.tau,
    ))
}
