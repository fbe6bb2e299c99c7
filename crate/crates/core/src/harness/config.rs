//! Experiment configuration, read from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserArch, PretrainConfig};
use crate::error::{Error, Result};
use crate::harness::dataset::DatasetSpec;
use crate::imagewise::{budget_from_unit, GaussianSize, PgdConfig, PgdMode};
use crate::metrics::EmbedderConfig;
use crate::personalize::PersonalizeConfig;
use crate::postprocess::{DiffpureConfig, JpegConfig};
use crate::rid::{DefenderArch, RidTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: DenoiserArch,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    /// Targets the defender is trained against; the first is also the
    /// personalization base and the white-box probe model.
    pub ensemble: Vec<ModelSpec>,
    /// Never seen by any defense; used for the black-box probe.
    pub holdout: Option<ModelSpec>,
    pub pretrain: PretrainConfig,
}

fn unet(widths: [usize; 3], seed: u64) -> ModelSpec {
    ModelSpec {
        arch: DenoiserArch::Unet { widths, emb: 32 },
        seed,
    }
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            ensemble: vec![
                unet([16, 32, 32], 100),
                unet([16, 24, 32], 101),
                unet([24, 32, 48], 102),
            ],
            holdout: Some(unet([16, 32, 32], 103)),
            pretrain: PretrainConfig {
                steps: 1000,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Rid,
    Advdm,
    Antidb,
    Gaussian,
    None,
}

impl DefenseKind {
    pub fn label(&self) -> &'static str {
        match self {
            DefenseKind::Rid => "rid",
            DefenseKind::Advdm => "advdm",
            DefenseKind::Antidb => "antidb",
            DefenseKind::Gaussian => "gaussian",
            DefenseKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub arch: DefenderArch,
    pub train: RidTrainConfig,
    /// Fraction of the training images given PGD regression targets.
    pub pair_fraction: f64,
    /// PGD settings for the per-image defenses and for the regression
    /// pairs. Its budget is overridden by the sweep value.
    pub pgd: PgdConfig,
    pub gaussian: GaussianSize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::Rid,
            arch: DefenderArch {
                layers: 4,
                hidden: 64,
                patch: 4,
                heads: 4,
                res: 16,
            },
            train: RidTrainConfig {
                steps: 1500,
                ..RidTrainConfig::default()
            },
            pair_fraction: 0.1,
            pgd: PgdConfig::default(),
            gaussian: GaussianSize::Large,
        }
    }
}

impl DefenseConfig {
    /// PGD settings at budget `eps` (in `[-1, 1]` units) for `mode`.
    pub fn pgd_at(&self, eps: f32, mode: PgdMode) -> PgdConfig {
        PgdConfig {
            eps_budget: eps,
            gamma: eps / 10.0,
            mode,
            ..self.pgd.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PostprocessSpec {
    None,
    Jpeg { quality: u8 },
    Diffpure { t_star: f32, steps: usize },
}

impl Default for PostprocessSpec {
    fn default() -> Self {
        PostprocessSpec::None
    }
}

impl PostprocessSpec {
    pub fn label(&self) -> String {
        match self {
            PostprocessSpec::None => "none".into(),
            PostprocessSpec::Jpeg { quality } => format!("jpeg{quality}"),
            PostprocessSpec::Diffpure { t_star, .. } => format!("diffpure{t_star}"),
        }
    }

    pub fn jpeg(&self) -> Option<JpegConfig> {
        match self {
            PostprocessSpec::Jpeg { quality } => Some(JpegConfig { quality: *quality }),
            _ => None,
        }
    }

    pub fn diffpure(&self) -> Option<DiffpureConfig> {
        match self {
            PostprocessSpec::Diffpure { t_star, steps } => Some(DiffpureConfig {
                t_star: *t_star,
                steps: *steps,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Held-out identities evaluated (the first this many of the split).
    pub eval_ids: usize,
    /// Reference images per identity handed to the defense.
    pub refs_per_id: usize,
    /// Images sampled from each personalised model.
    pub gen_per_id: usize,
    pub sample_steps: usize,
    pub probe_points: usize,
    pub probe_draws: usize,
    pub embedder: EmbedderConfig,
    /// Skip personalization and report only probes.
    pub probes_only: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            eval_ids: 15,
            refs_per_id: 12,
            gen_per_id: 12,
            sample_steps: 20,
            probe_points: 10,
            probe_draws: 2,
            embedder: EmbedderConfig::default(),
            probes_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub label: String,
    pub seed: u64,
    /// Personalization seeds; paired across conditions.
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub models: ModelsConfig,
    pub defense: DefenseConfig,
    /// Budgets in `[0, 1]` pixel units times 255.
    pub eps: Vec<f32>,
    pub personalize: PersonalizeConfig,
    pub postprocess: PostprocessSpec,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "experiment".into(),
            seed: 0,
            seeds: vec![0, 1, 2],
            dataset: DatasetSpec {
                n_ids: 45,
                per_id: 24,
                res: 16,
                seed: 0,
                holdout_ids: 15,
            },
            models: ModelsConfig::default(),
            defense: DefenseConfig::default(),
            eps: vec![6.0, 8.0, 12.0],
            personalize: PersonalizeConfig::default(),
            postprocess: PostprocessSpec::None,
            metrics: MetricsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// By extension: `.json` is JSON, anything else TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Budgets in `[-1, 1]` units.
    pub fn eps_budgets(&self) -> Vec<f32> {
        self.eps
            .iter()
            .map(|&e| budget_from_unit(e / 255.0))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.n_ids < 2 || d.per_id < 15 || d.holdout_ids == 0 || d.holdout_ids >= d.n_ids {
            return bad(format!(
                "dataset {d:?} needs ≥ 2 ids, ≥ 15 per id, a non-empty holdout"
            ));
        }
        let m = &self.metrics;
        if m.eval_ids == 0 || m.eval_ids > d.holdout_ids {
            return bad(format!(
                "eval_ids {} must lie in 1..={}",
                m.eval_ids, d.holdout_ids
            ));
        }
        if m.refs_per_id == 0 || m.refs_per_id >= d.per_id {
            return bad(format!(
                "refs_per_id {} must leave clean images of each identity for comparison",
                m.refs_per_id
            ));
        }
        if m.probe_points == 0 || m.probe_draws == 0 || m.sample_steps == 0 || m.gen_per_id < 2 {
            return bad(
                "probe points/draws, sample steps must be positive and gen_per_id ≥ 2".into(),
            );
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.eps.is_empty() || self.eps.iter().any(|&e| !(e > 0.0 && e < 255.0)) {
            return bad(format!("eps values {:?} must lie in (0, 255)", self.eps));
        }
        if self.models.ensemble.is_empty() {
            return bad("the ensemble needs at least one model".into());
        }
        if self.defense.arch.res != d.res {
            return bad(format!(
                "defender resolution {} differs from dataset resolution {}",
                self.defense.arch.res, d.res
            ));
        }
        if !(self.defense.pair_fraction > 0.0 && self.defense.pair_fraction <= 1.0) {
            return bad(format!(
                "pair_fraction {} outside (0, 1]",
                self.defense.pair_fraction
            ));
        }
        self.defense.arch.validate()?;
        self.defense.train.validate()?;
        self.personalize.validate()?;
        if let Some(j) = self.postprocess.jpeg() {
            j.validate()?;
        }
        if let Some(p) = self.postprocess.diffpure() {
            p.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml_and_json() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("label = \"x\"\nlamda = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            ExperimentConfig::from_toml("[defense]\nkind = \"rid\"\nlamda = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "label = \"sweep\"\neps = [8.0]\n[defense]\nkind = \"gaussian\"\n[postprocess]\nkind = \"jpeg\"\nquality = 75\n",
        )
        .unwrap();
        assert_eq!(cfg.defense.kind, DefenseKind::Gaussian);
        assert_eq!(cfg.postprocess, PostprocessSpec::Jpeg { quality: 75 });
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn budgets_double_into_signed_units() {
        let cfg = ExperimentConfig::default();
        let b = cfg.eps_budgets();
        assert!((b[1] - 16.0 / 255.0).abs() < 1e-7);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let mut cfg = ExperimentConfig::default();
        cfg.metrics.eval_ids = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.eps = vec![0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.defense.arch.res = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.metrics.refs_per_id = 24;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
