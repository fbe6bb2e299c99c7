//! Synthetic face-like identities.
//!
//! Each identity is a vector of continuous shape parameters drawn once from
//! fixed ranges; every image of it is a render under a small pose jitter.
//! Intensities stay inside `±MAX_LEVEL` so a bounded perturbation rarely
//! meets the `[−1, 1]` clamp.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ImageBatch;
use crate::error::{Error, Result};
use crate::harness::checkpoint::Bundle;
use crate::numerics::{streams, ParamSet, Rng, Tensor};

pub const MAX_LEVEL: f32 = 0.85;

/// Parameters of one identity in normalised image coordinates `[−1, 1]²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// Face centre, `[−0.1, 0.1]` each.
    pub center: (f32, f32),
    /// Face half-axes: width `[0.5, 0.75]`, height `[0.65, 0.9]`.
    pub axes: (f32, f32),
    /// Eye horizontal offset `[0.18, 0.38]` and height above centre `[0.1, 0.35]`.
    pub eye_offset: (f32, f32),
    /// Eye radius `[0.08, 0.16]`.
    pub eye_radius: f32,
    /// Mouth height below centre `[0.25, 0.5]`, half-width `[0.15, 0.4]`.
    pub mouth: (f32, f32),
    /// Mouth curvature `[−1.5, 1.5]`; positive is a smile.
    pub mouth_curve: f32,
    /// Hair line height as a fraction of the face `[0.2, 0.7]` and tone `[−0.8, 0.2]`.
    pub hair: (f32, f32),
    /// Skin tone `[0.1, 0.6]`.
    pub brightness: f32,
    /// Background tone `[−0.6, −0.1]`.
    pub background: f32,
    /// Seed of the identity's low-frequency skin texture.
    pub texture_seed: u64,
}

impl IdentityParams {
    pub fn sample(rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.uniform(lo, hi) as f32;
        Self {
            center: (u(-0.1, 0.1), u(-0.1, 0.1)),
            axes: (u(0.5, 0.75), u(0.65, 0.9)),
            eye_offset: (u(0.18, 0.38), u(0.1, 0.35)),
            eye_radius: u(0.08, 0.16),
            mouth: (u(0.25, 0.5), u(0.15, 0.4)),
            mouth_curve: u(-1.5, 1.5),
            hair: (u(0.2, 0.7), u(-0.8, 0.2)),
            brightness: u(0.1, 0.6),
            background: u(-0.6, -0.1),
            texture_seed: rng.next_u64(),
        }
    }
}

/// Per-image nuisance: shift, scale, lighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub shift: (f32, f32),
    pub scale: f32,
    pub light: f32,
}

impl Pose {
    pub const NEUTRAL: Pose = Pose {
        shift: (0.0, 0.0),
        scale: 1.0,
        light: 0.0,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            shift: (
                rng.uniform(-0.08, 0.08) as f32,
                rng.uniform(-0.08, 0.08) as f32,
            ),
            scale: rng.uniform(0.93, 1.07) as f32,
            light: rng.uniform(-0.06, 0.06) as f32,
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Render one `res × res` image; a pure function of its arguments.
pub fn render(p: &IdentityParams, pose: &Pose, res: usize) -> Vec<f32> {
    let mut trng = Rng::new(p.texture_seed, streams::DATA);
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                trng.uniform(1.0, 3.0) as f32,
                trng.uniform(1.0, 3.0) as f32,
                trng.uniform(0.0, std::f64::consts::TAU) as f32,
                trng.uniform(0.03, 0.07) as f32,
            )
        })
        .collect();
    let sharp = res as f32 / 2.0;
    let mut out = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            // Pixel centre in [−1, 1], y down.
            let y = ((i as f32 + 0.5) / res as f32 * 2.0 - 1.0 - pose.shift.1) / pose.scale;
            let x = ((j as f32 + 0.5) / res as f32 * 2.0 - 1.0 - pose.shift.0) / pose.scale;
            let (dx, dy) = (x - p.center.0, y - p.center.1);
            let r2 = (dx / p.axes.0).powi(2) + (dy / p.axes.1).powi(2);
            let face = sigmoid((1.0 - r2) * sharp);
            let texture: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (fx * dx + ph).sin() * (fy * dy).cos())
                .sum();
            let mut v = p.background + face * (p.brightness + texture - p.background);
            let hair_line = -p.axes.1 + p.hair.0 * p.axes.1;
            let hair = face * sigmoid((hair_line - dy) * sharp);
            v += hair * (p.hair.1 - v);
            for side in [-1.0f32, 1.0] {
                let ex = dx - side * p.eye_offset.0;
                let ey = dy + p.eye_offset.1;
                let d = (ex * ex + ey * ey).sqrt();
                let eye = face * sigmoid((p.eye_radius - d) * sharp * 1.5);
                v += eye * (-0.75 - v);
            }
            let mouth_y =
                p.mouth.0 - p.mouth_curve * 0.25 * (dx / p.mouth.1.max(1e-3)).powi(2) * p.mouth.1;
            let across = sigmoid((p.mouth.1 - dx.abs()) * sharp);
            let mouth = face * across * (-((dy - mouth_y) / 0.07).powi(2)).exp();
            v += mouth * (-0.6 - v);
            out.push((v + pose.light).clamp(-MAX_LEVEL, MAX_LEVEL));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_ids: usize,
    pub per_id: usize,
    pub res: usize,
    pub seed: u64,
    /// Identities held out from pre-training and defender training.
    pub holdout_ids: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_ids: 20,
            per_id: 20,
            res: 32,
            seed: 0,
            holdout_ids: 5,
        }
    }
}

/// Rendered corpus with an identity split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub identities: Vec<IdentityParams>,
    /// Image `k` shows identity `k / per_id`.
    pub images: ImageBatch,
    pub train_ids: Vec<usize>,
    pub holdout_ids: Vec<usize>,
}

impl Dataset {
    /// Images of the listed identities, labels kept.
    pub fn of_ids(&self, ids: &[usize]) -> ImageBatch {
        let idx: Vec<usize> = ids
            .iter()
            .flat_map(|&id| id * self.spec.per_id..(id + 1) * self.spec.per_id)
            .collect();
        self.images.select(&idx)
    }

    /// Images `range` (within identity) of identity `id`.
    pub fn slice(&self, id: usize, range: std::ops::Range<usize>) -> ImageBatch {
        let base = id * self.spec.per_id;
        let idx: Vec<usize> = range.map(|k| base + k).collect();
        self.images.select(&idx)
    }
}

pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n_ids < 2 || spec.per_id < 15 {
        return Err(Error::Config(format!(
            "dataset needs ≥ 2 identities and ≥ 15 images each, got {} x {}",
            spec.n_ids, spec.per_id
        )));
    }
    if spec.holdout_ids >= spec.n_ids {
        return Err(Error::Config(
            "holdout must leave at least one training identity".into(),
        ));
    }
    if spec.res < 8 {
        return Err(Error::Config(format!("resolution {} below 8", spec.res)));
    }
    let root = Rng::new(spec.seed, streams::DATA);
    let mut id_rng = root.fork(1);
    let identities: Vec<IdentityParams> = (0..spec.n_ids)
        .map(|_| IdentityParams::sample(&mut id_rng))
        .collect();
    let mut pose_rng = root.fork(2);
    let mut data = Vec::with_capacity(spec.n_ids * spec.per_id * spec.res * spec.res);
    let mut labels = Vec::with_capacity(spec.n_ids * spec.per_id);
    for (id, p) in identities.iter().enumerate() {
        for _ in 0..spec.per_id {
            data.extend(render(p, &Pose::sample(&mut pose_rng), spec.res));
            labels.push(id);
        }
    }
    let images = ImageBatch::new(
        Tensor::new(vec![labels.len(), 1, spec.res, spec.res], data)?,
        labels,
    )?;
    let n_train = spec.n_ids - spec.holdout_ids;
    Ok(Dataset {
        spec: spec.clone(),
        identities,
        images,
        train_ids: (0..n_train).collect(),
        holdout_ids: (n_train..spec.n_ids).collect(),
    })
}

/// Store a labelled batch as a checkpoint with `images` and `ids` entries.
pub fn save_images(batch: &ImageBatch, path: &Path) -> Result<()> {
    let mut ps = ParamSet::new();
    ps.insert("images", batch.images().clone());
    let ids: Vec<f32> = batch.ids().iter().map(|&i| i as f32).collect();
    ps.insert("ids", Tensor::new(vec![ids.len()], ids)?);
    Bundle::new(ps).with_meta("kind", "images").save(path)
}

pub fn load_images(path: &Path) -> Result<ImageBatch> {
    let b = Bundle::load(path)?;
    if b.meta("kind")? != "images" {
        return Err(Error::Malformed(format!(
            "{} is not an image file",
            path.display()
        )));
    }
    let ids = b
        .tensors
        .get("ids")?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    ImageBatch::new(b.tensors.get("images")?.clone(), ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_split_and_range() {
        let d = synth_dataset(&DatasetSpec::default()).unwrap();
        assert_eq!(d.images.len(), 400);
        assert_eq!(d.images.ids().len(), 400);
        assert_eq!(d.train_ids.len() + d.holdout_ids.len(), 20);
        assert!(d.train_ids.iter().all(|i| !d.holdout_ids.contains(i)));
        assert!(d.images.images().abs_max() <= MAX_LEVEL);
        assert_eq!(d.of_ids(&[3]).ids(), &[3; 20]);
        assert_eq!(d.slice(2, 0..5).len(), 5);
    }

    #[test]
    fn deterministic() {
        let spec = DatasetSpec {
            n_ids: 3,
            per_id: 15,
            res: 16,
            seed: 9,
            holdout_ids: 1,
        };
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
    }

    #[test]
    fn identities_differ_in_many_parameters() {
        let mut rng = Rng::new(1, 0);
        let a = IdentityParams::sample(&mut rng);
        let b = IdentityParams::sample(&mut rng);
        let pa = [
            a.axes.0,
            a.axes.1,
            a.eye_radius,
            a.mouth_curve,
            a.brightness,
            a.hair.0,
        ];
        let pb = [
            b.axes.0,
            b.axes.1,
            b.eye_radius,
            b.mouth_curve,
            b.brightness,
            b.hair.0,
        ];
        assert!(pa.iter().zip(&pb).filter(|(x, y)| x != y).count() >= 3);
        let img_a = render(&a, &Pose::NEUTRAL, 16);
        let img_b = render(&b, &Pose::NEUTRAL, 16);
        assert_ne!(img_a, img_b);
    }

    #[test]
    fn image_files_round_trip() {
        let spec = DatasetSpec {
            n_ids: 2,
            per_id: 15,
            res: 8,
            seed: 1,
            holdout_ids: 1,
        };
        let d = synth_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ridc");
        save_images(&d.images, &p).unwrap();
        assert_eq!(load_images(&p).unwrap(), d.images);
    }

    #[test]
    fn rejects_small_specs() {
        let mut s = DatasetSpec::default();
        s.per_id = 10;
        assert!(synth_dataset(&s).is_err());
        let mut s = DatasetSpec::default();
        s.holdout_ids = 20;
        assert!(synth_dataset(&s).is_err());
    }
}
