//! Metric reports: JSON documents per condition plus CSV plot data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ProbeCurve;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    /// `white_box` (first ensemble member) or `black_box` (held-out model).
    pub model: String,
    pub t: Vec<f32>,
    pub loss: Vec<f64>,
}

impl ProbeRecord {
    pub fn curve(&self) -> ProbeCurve {
        ProbeCurve {
            t: self.t.clone(),
            loss: self.loss.clone(),
        }
    }
}

/// One personalization run: identity × seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub seed: u64,
    /// Personalised model's mean loss on the images it was tuned on.
    pub refs_loss: f64,
    pub ism: Option<f64>,
    pub dr: f64,
    pub aism: f64,
    pub brisque_mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Fraction of entries with `|δ| ≥ 0.9 ε`.
    pub bound_mass: f64,
    pub excess_kurtosis: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtimes {
    /// Defender training or pair building, zero when not applicable.
    pub prepare_s: f64,
    pub defend_per_image_s: f64,
    pub personalize_s: f64,
    pub evaluate_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub label: String,
    pub defense: String,
    pub postprocess: String,
    /// Budget in `[0, 1]` units times 255.
    pub eps: f32,
    pub seeds: Vec<u64>,
    pub ids: Vec<usize>,
    pub fid: Option<f64>,
    /// Mean over runs with at least one detection.
    pub ism: Option<f64>,
    pub dr: Option<f64>,
    pub aism: Option<f64>,
    pub brisque_mean: Option<f64>,
    pub brisque_std: Option<f64>,
    pub refs_loss: Option<f64>,
    pub samples: Vec<SampleRecord>,
    pub probes: Vec<ProbeRecord>,
    pub perturbation: PerturbationStats,
    pub runtimes: Runtimes,
    pub config_fingerprint: String,
    /// Set when some stage failed; see `errors`.
    pub partial: bool,
    pub errors: Vec<String>,
}

fn finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("report field {what}")))
    }
}

impl MetricReport {
    pub fn probe(&self, model: &str) -> Option<&ProbeRecord> {
        self.probes.iter().find(|p| p.model == model)
    }

    /// Every number finite.
    pub fn validate(&self) -> Result<()> {
        let opts = [
            ("fid", self.fid),
            ("ism", self.ism),
            ("dr", self.dr),
            ("aism", self.aism),
            ("brisque_mean", self.brisque_mean),
            ("brisque_std", self.brisque_std),
            ("refs_loss", self.refs_loss),
        ];
        for (k, v) in opts {
            if let Some(v) = v {
                finite(k, v)?;
            }
        }
        finite("eps", self.eps as f64)?;
        for s in &self.samples {
            for (k, v) in [
                ("refs_loss", s.refs_loss),
                ("dr", s.dr),
                ("aism", s.aism),
                ("brisque", s.brisque_mean),
            ] {
                finite(k, v)?;
            }
            if let Some(v) = s.ism {
                finite("ism", v)?;
            }
        }
        for p in &self.probes {
            if p.t.len() != p.loss.len() {
                return Err(Error::Shape(format!(
                    "probe `{}` has {} t and {} values",
                    p.model,
                    p.t.len(),
                    p.loss.len()
                )));
            }
            for &v in &p.loss {
                finite("probe", v)?;
            }
        }
        let ps = &self.perturbation;
        for v in [ps.mean_abs, ps.max_abs, ps.bound_mass, ps.excess_kurtosis] {
            finite("perturbation", v)?;
        }
        let r = &self.runtimes;
        for v in [
            r.prepare_s,
            r.defend_per_image_s,
            r.personalize_s,
            r.evaluate_s,
        ] {
            finite("runtime", v)?;
        }
        Ok(())
    }

    /// Copy with wall-clock fields zeroed; what reproducibility compares.
    pub fn without_timing(&self) -> Self {
        Self {
            runtimes: Runtimes::default(),
            ..self.clone()
        }
    }

    /// `refs_loss` per `(id, seed)`, in a fixed order.
    pub fn refs_losses(&self) -> Vec<((usize, u64), f64)> {
        let mut v: Vec<_> = self
            .samples
            .iter()
            .map(|s| ((s.id, s.seed), s.refs_loss))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

pub fn write_reports(reports: &[MetricReport], path: &Path) -> Result<()> {
    for r in reports {
        r.validate()?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(reports)?)?;
    Ok(())
}

/// Reads either a single report or a list.
pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let reports: Vec<MetricReport> = if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    };
    for r in &reports {
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Malformed(format!(
                "{}: report schema {} (expected {SCHEMA_VERSION})",
                path.display(),
                r.schema_version
            )));
        }
        r.validate()?;
    }
    Ok(reports)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: &'a str,
    defense: &'a str,
    postprocess: &'a str,
    eps: f32,
    fid: Option<f64>,
    ism: Option<f64>,
    dr: Option<f64>,
    aism: Option<f64>,
    brisque_mean: Option<f64>,
    brisque_std: Option<f64>,
    refs_loss: Option<f64>,
    mean_abs_delta: f64,
    bound_mass: f64,
    defend_per_image_s: f64,
    partial: bool,
}

#[derive(Serialize)]
struct ProbeRow<'a> {
    label: &'a str,
    model: &'a str,
    t: f32,
    loss: f64,
}

#[derive(Serialize)]
struct SampleRow<'a> {
    label: &'a str,
    id: usize,
    seed: u64,
    refs_loss: f64,
    ism: Option<f64>,
    dr: f64,
    aism: f64,
    brisque_mean: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// `summary.csv`, `probes.csv` and `samples.csv` under `dir`.
pub fn write_plot_data(reports: &[MetricReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(csv_err)?;
    for r in reports {
        w.serialize(SummaryRow {
            label: &r.label,
            defense: &r.defense,
            postprocess: &r.postprocess,
            eps: r.eps,
            fid: r.fid,
            ism: r.ism,
            dr: r.dr,
            aism: r.aism,
            brisque_mean: r.brisque_mean,
            brisque_std: r.brisque_std,
            refs_loss: r.refs_loss,
            mean_abs_delta: r.perturbation.mean_abs,
            bound_mass: r.perturbation.bound_mass,
            defend_per_image_s: r.runtimes.defend_per_image_s,
            partial: r.partial,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("probes.csv")).map_err(csv_err)?;
    for r in reports {
        for p in &r.probes {
            for (&t, &loss) in p.t.iter().zip(&p.loss) {
                w.serialize(ProbeRow {
                    label: &r.label,
                    model: &p.model,
                    t,
                    loss,
                })
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("samples.csv")).map_err(csv_err)?;
    for r in reports {
        for s in &r.samples {
            w.serialize(SampleRow {
                label: &r.label,
                id: s.id,
                seed: s.seed,
                refs_loss: s.refs_loss,
                ism: s.ism,
                dr: s.dr,
                aism: s.aism,
                brisque_mean: s.brisque_mean,
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Concatenate report files, ordered by label then eps; duplicate labels
/// at the same budget are rejected.
pub fn merge_reports(paths: &[&Path]) -> Result<Vec<MetricReport>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_reports(p)?);
    }
    all.sort_by(|a, b| a.label.cmp(&b.label).then(a.eps.total_cmp(&b.eps)));
    for w in all.windows(2) {
        if w[0].label == w[1].label && w[0].eps == w[1].eps {
            return Err(Error::Config(format!(
                "duplicate report `{}` at eps {}",
                w[0].label, w[0].eps
            )));
        }
    }
    Ok(all)
}

#[cfg(test)]
pub(crate) fn sample_report(label: &str, eps: f32) -> MetricReport {
    MetricReport {
        schema_version: SCHEMA_VERSION,
        label: label.into(),
        defense: "rid".into(),
        postprocess: "none".into(),
        eps,
        seeds: vec![0],
        ids: vec![3],
        fid: Some(1.5),
        ism: Some(0.4),
        dr: Some(0.5),
        aism: Some(0.2),
        brisque_mean: Some(10.0),
        brisque_std: Some(1.0),
        refs_loss: Some(12.0),
        samples: vec![SampleRecord {
            id: 3,
            seed: 0,
            refs_loss: 12.0,
            ism: None,
            dr: 0.0,
            aism: 0.0,
            brisque_mean: 10.0,
        }],
        probes: vec![ProbeRecord {
            model: "white_box".into(),
            t: vec![0.25, 0.75],
            loss: vec![3.0, 1.0],
        }],
        perturbation: PerturbationStats::default(),
        runtimes: Runtimes {
            evaluate_s: 2.0,
            ..Default::default()
        },
        config_fingerprint: "abc".into(),
        partial: false,
        errors: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        write_reports(&[sample_report("rid", 8.0)], &a).unwrap();
        fs::write(&b, serde_json::to_vec(&sample_report("none", 8.0)).unwrap()).unwrap();
        assert_eq!(read_reports(&a).unwrap(), vec![sample_report("rid", 8.0)]);
        let merged = merge_reports(&[&a, &b]).unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].label, "none");
        assert!(merge_reports(&[&a, &a]).is_err());
    }

    #[test]
    fn non_finite_numbers_are_rejected() {
        let mut r = sample_report("x", 8.0);
        r.fid = Some(f64::NAN);
        assert!(r.validate().is_err());
        let mut r = sample_report("x", 8.0);
        r.probes[0].loss[1] = f64::INFINITY;
        assert!(r.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(write_reports(&[r], &dir.path().join("r.json")).is_err());
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let mut r = sample_report("x", 8.0);
        r.schema_version = 99;
        fs::write(&p, serde_json::to_vec(&r).unwrap()).unwrap();
        assert!(matches!(read_reports(&p), Err(Error::Malformed(_))));
    }

    #[test]
    fn csv_has_one_row_per_probe_point() {
        let dir = tempfile::tempdir().unwrap();
        write_plot_data(
            &[sample_report("a", 6.0), sample_report("b", 8.0)],
            dir.path(),
        )
        .unwrap();
        let probes = fs::read_to_string(dir.path().join("probes.csv")).unwrap();
        assert_eq!(probes.lines().count(), 1 + 4);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.starts_with("label,defense,postprocess,eps,fid"));
    }

    #[test]
    fn timing_is_stripped_for_comparison() {
        let a = sample_report("x", 8.0);
        let mut b = a.clone();
        b.runtimes.evaluate_s = 7.0;
        assert_ne!(a, b);
        assert_eq!(a.without_timing(), b.without_timing());
    }
}
