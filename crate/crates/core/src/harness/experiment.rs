//! Orchestration: pre-trained models, defenses, personalization and
//! evaluation for one experiment configuration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::diffusion::{pretrain, Denoiser, ImageBatch, NoiseDraw, PretrainConfig, Schedule};
use crate::error::{Error, Result};
use crate::harness::config::{DefenseKind, ExperimentConfig, ModelSpec, PostprocessSpec};
use crate::harness::dataset::{synth_dataset, Dataset};
use crate::harness::report::{
    write_plot_data, write_reports, MetricReport, PerturbationStats, ProbeRecord, Runtimes,
    SampleRecord, SCHEMA_VERSION,
};
use crate::imagewise::{
    build_regression_pairs, gaussian_baseline, pgd_defend, GaussianSize, PairStore, PgdConfig,
    PgdMode,
};
use crate::metrics::{
    batch_brisque_features, diffusion_loss_probe, excess_kurtosis, fid_images, ism, probe_grid,
    train_embedder, CorpusStats, EmbeddingModel,
};
use crate::numerics::{streams, Rng, Tensor};
use crate::personalize::{personalize, with_model, PersonalizeConfig};
use crate::postprocess::{diffpure, jpeg_like};
use crate::rid::{defend, train_rid, DefenderNet, RidInputs, RidLog, RidTrainConfig};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "RIDLAB_WORKERS";

pub const WHITE_BOX: &str = "white_box";
pub const BLACK_BOX: &str = "black_box";

/// Worker count from [`WORKERS_ENV`], default 1.
pub fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!("{WORKERS_ENV}={v} is not a positive integer"))
            })
        }
        Err(_) => Ok(1),
    }
}

/// Run `f` over `jobs` on `n` threads; results come back in job order.
pub fn parallel_map<J: Sync, R: Send>(jobs: &[J], n: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    if n <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..jobs.len())
                        .step_by(n)
                        .map(|k| (k, f(&jobs[k])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("worker panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn digest(parts: &impl Serialize) -> String {
    let json = serde_json::to_vec(parts).expect("serialisable cache key");
    Sha256::digest(&json)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Optional on-disk artifact cache keyed by content hashes.
#[derive(Clone, Debug, Default)]
pub struct Cache {
    pub dir: Option<PathBuf>,
}

impl Cache {
    pub fn at(dir: &Path) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
        }
    }

    fn path(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{kind}-{key}.ridc")))
    }

    fn get_or<T>(
        &self,
        kind: &str,
        key: &str,
        load: impl Fn(&Path) -> Result<T>,
        save: impl Fn(&T, &Path) -> Result<()>,
        build: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let Some(p) = self.path(kind, key) else {
            return build();
        };
        if p.exists() {
            return load(&p);
        }
        let v = build()?;
        std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
        save(&v, &p)?;
        Ok(v)
    }
}

/// Pre-train one denoiser on the training identities.
pub fn pretrained_model(
    data: &Dataset,
    spec: &ModelSpec,
    cfg: &PretrainConfig,
    cache: &Cache,
) -> Result<Denoiser> {
    let key = digest(&(&data.spec, spec, cfg));
    cache.get_or(
        "denoiser",
        &key,
        Denoiser::load,
        |m, p| m.save(p),
        || {
            let mut m =
                Denoiser::init(spec.arch.clone(), data.spec.res, data.spec.n_ids, spec.seed);
            pretrain(&mut m, &data.of_ids(&data.train_ids), cfg)?;
            Ok(m)
        },
    )
}

/// A defense ready to apply to reference images.
pub enum Defense {
    None,
    Rid(DefenderNet),
    Pgd(PgdConfig),
    Gaussian { eps: f32, size: GaussianSize },
}

impl Defense {
    pub fn kind(&self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Rid(_) => "rid",
            Defense::Pgd(c) => match c.mode {
                PgdMode::Advdm => "advdm",
                PgdMode::Antidb => "antidb",
            },
            Defense::Gaussian { .. } => "gaussian",
        }
    }
}

/// Which identities and seeds an evaluation covers.
#[derive(Clone, Debug, PartialEq)]
pub struct Scope {
    pub ids: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Skip personalization; report probes and perturbation statistics.
    pub probes_only: bool,
}

/// Shared state of an experiment: data, frozen models and metric models.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub ensemble: Vec<Denoiser>,
    pub holdout: Option<Denoiser>,
    pub embedder: EmbeddingModel,
    pub corpus: CorpusStats,
    pub cache: Cache,
}

/// Images per identity kept out of embedder training for its accuracy check.
pub const EMBEDDER_HOLDOUT: usize = 4;

impl Lab {
    pub fn prepare(cfg: &ExperimentConfig, cache: Cache) -> Result<Self> {
        cfg.validate()?;
        let data = synth_dataset(&cfg.dataset)?;
        let ensemble = cfg
            .models
            .ensemble
            .iter()
            .map(|s| pretrained_model(&data, s, &cfg.models.pretrain, &cache))
            .collect::<Result<Vec<_>>>()?;
        let holdout = cfg
            .models
            .holdout
            .as_ref()
            .map(|s| pretrained_model(&data, s, &cfg.models.pretrain, &cache))
            .transpose()?;
        let per = cfg.dataset.per_id;
        let emb_train = ImageBatch::concat(
            &(0..cfg.dataset.n_ids)
                .map(|i| data.slice(i, 0..per - EMBEDDER_HOLDOUT))
                .collect::<Vec<_>>(),
        )?;
        let ecfg = &cfg.metrics.embedder;
        let embedder = cache.get_or(
            "embedder",
            &digest(&(&cfg.dataset, ecfg)),
            EmbeddingModel::load,
            |m, p| m.save(p),
            || Ok(train_embedder(&emb_train, cfg.dataset.n_ids, ecfg)?.0),
        )?;
        let corpus = CorpusStats::fit(&batch_brisque_features(&data.of_ids(&data.train_ids))?)?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            ensemble,
            holdout,
            embedder,
            corpus,
            cache,
        })
    }

    /// Held-out identities under evaluation.
    pub fn eval_ids(&self) -> &[usize] {
        &self.data.holdout_ids[..self.cfg.metrics.eval_ids]
    }

    /// Reference images of `id` handed to the defense.
    pub fn refs(&self, id: usize) -> ImageBatch {
        self.data.slice(id, 0..self.cfg.metrics.refs_per_id)
    }

    /// Clean images of the evaluated identities never used as references.
    pub fn clean_rest(&self) -> Result<ImageBatch> {
        self.clean_rest_of(self.eval_ids())
    }

    pub fn clean_rest_of(&self, ids: &[usize]) -> Result<ImageBatch> {
        let (r, n) = (self.cfg.metrics.refs_per_id, self.cfg.dataset.per_id);
        ImageBatch::concat(
            &ids.iter()
                .map(|&id| self.data.slice(id, r..n))
                .collect::<Vec<_>>(),
        )
    }

    /// Embedder accuracy on images of every identity it never trained on.
    pub fn embedder_accuracy(&self) -> Result<f64> {
        let n = self.cfg.dataset.per_id;
        let test = ImageBatch::concat(
            &(0..self.cfg.dataset.n_ids)
                .map(|i| self.data.slice(i, n - EMBEDDER_HOLDOUT..n))
                .collect::<Vec<_>>(),
        )?;
        self.embedder.accuracy(&test)
    }

    fn train_images(&self) -> ImageBatch {
        self.data.of_ids(&self.data.train_ids)
    }

    fn ensemble_key(&self) -> String {
        digest(&(
            &self.cfg.dataset,
            &self.cfg.models.ensemble,
            &self.cfg.models.pretrain,
        ))
    }

    /// PGD regression targets at budget `eps` (`[-1, 1]` units).
    pub fn pairs(&self, eps: f32) -> Result<PairStore> {
        let d = &self.cfg.defense;
        let pgd = d.pgd_at(eps, PgdMode::Advdm);
        let key = digest(&(self.ensemble_key(), d.pair_fraction, &pgd, self.cfg.seed));
        self.cache.get_or(
            "pairs",
            &key,
            PairStore::load,
            |p, path| p.save(path),
            || {
                let mut rng = Rng::new(self.cfg.seed, streams::DATA).fork(7);
                build_regression_pairs(
                    &self.train_images(),
                    d.pair_fraction,
                    &self.ensemble,
                    &pgd,
                    &mut rng,
                )
            },
        )
    }

    /// Train a defender at budget `eps` with `train` settings.
    pub fn defender(
        &self,
        eps: f32,
        train: &RidTrainConfig,
    ) -> Result<(DefenderNet, Option<RidLog>)> {
        let pairs = self.pairs(eps)?;
        let arch = &self.cfg.defense.arch;
        let key = digest(&(
            self.ensemble_key(),
            arch,
            train,
            eps,
            self.cfg.defense.pair_fraction,
            self.cfg.seed,
        ));
        let fps: Vec<String> = self.ensemble.iter().map(Denoiser::fingerprint).collect();
        let mut log = None;
        let net = self.cache.get_or(
            "defender",
            &key,
            DefenderNet::load,
            |n, p| n.save(p, &fps),
            || {
                let mut net = DefenderNet::init(arch.clone(), eps, train.seed)?;
                let data = self.train_images();
                let inputs = RidInputs {
                    data: &data,
                    pairs: &pairs,
                    targets: &self.ensemble,
                    holdout: None,
                };
                log = Some(train_rid(&mut net, train, &inputs)?);
                Ok(net)
            },
        )?;
        Ok((net, log))
    }

    /// Build the configured defense kind at `eps`.
    pub fn build_defense(&self, kind: DefenseKind, eps: f32) -> Result<Defense> {
        let d = &self.cfg.defense;
        Ok(match kind {
            DefenseKind::None => Defense::None,
            DefenseKind::Rid => Defense::Rid(self.defender(eps, &d.train)?.0),
            DefenseKind::Advdm => Defense::Pgd(d.pgd_at(eps, PgdMode::Advdm)),
            DefenseKind::Antidb => Defense::Pgd(d.pgd_at(eps, PgdMode::Antidb)),
            DefenseKind::Gaussian => Defense::Gaussian {
                eps,
                size: d.gaussian,
            },
        })
    }

    /// Defended copy of `refs` of identity `id`.
    pub fn apply(&self, defense: &Defense, refs: &ImageBatch, id: usize) -> Result<ImageBatch> {
        let mut rng = Rng::new(self.cfg.seed, streams::SAMPLE).fork(id as u64);
        match defense {
            Defense::None => Ok(refs.clone()),
            Defense::Rid(net) => Ok(defend(net, refs)?.1),
            Defense::Pgd(cfg) => pgd_defend(refs, &self.ensemble, cfg, &mut rng)?
                .perturbation
                .apply(refs),
            Defense::Gaussian { eps, size } => {
                gaussian_baseline(refs.images().shape(), *eps, *size, &mut rng)
                    .perturbation
                    .apply(refs)
            }
        }
    }

    /// Post-process with a paired stream per identity.
    pub fn postprocess(
        &self,
        spec: &PostprocessSpec,
        images: &ImageBatch,
        id: usize,
    ) -> Result<ImageBatch> {
        if let Some(j) = spec.jpeg() {
            return jpeg_like(images, &j);
        }
        if let Some(p) = spec.diffpure() {
            let mut rng = Rng::new(self.cfg.seed, streams::NOISE).fork(id as u64);
            return diffpure(images, &self.ensemble[0], &p, &mut rng);
        }
        Ok(images.clone())
    }

    fn personalize_cfg(&self, id: usize, seed: u64) -> PersonalizeConfig {
        PersonalizeConfig {
            seed: seed.wrapping_mul(1_000_003).wrapping_add(id as u64),
            ..self.cfg.personalize.clone()
        }
    }

    /// Paired draws on the probe grid for the refs-loss of `(id, seed)`.
    fn refs_draws(&self, shape: &[usize], id: usize, seed: u64) -> Vec<NoiseDraw> {
        let m = &self.cfg.metrics;
        let mut rng = Rng::new(seed, streams::EVAL).fork(id as u64);
        probe_grid(m.probe_points)
            .into_iter()
            .flat_map(|t| (0..m.probe_draws).map(move |_| t))
            .map(|t| NoiseDraw::at(t, rng.gaussian(shape)))
            .collect()
    }

    /// Personalise on `protected`, then measure refs-loss, identity and
    /// quality of generations. Returns the record and the generations.
    pub fn personalize_and_measure(
        &self,
        protected: &ImageBatch,
        clean_refs: &ImageBatch,
        id: usize,
        seed: u64,
    ) -> Result<(SampleRecord, ImageBatch)> {
        let m = &self.cfg.metrics;
        let base = &self.ensemble[0];
        let (p, _) = personalize(base, protected, &self.personalize_cfg(id, seed))?;
        let draws = self.refs_draws(protected.images().shape(), id, seed);
        let (refs_loss, gen) = with_model(base, &p, |pm| -> Result<(f64, Tensor)> {
            let l = pm.loss_on(protected, &draws)?;
            let mut rng = Rng::new(seed, streams::SAMPLE).fork(id as u64);
            Ok((l, pm.generate(m.gen_per_id, m.sample_steps, &mut rng)?))
        })?;
        let gen = ImageBatch::new(gen, vec![id; m.gen_per_id])?;
        let s = ism(&gen, clean_refs, &self.embedder)?;
        let scores = batch_brisque_features(&gen)?
            .iter()
            .map(|f| self.corpus.score(f))
            .collect::<Result<Vec<_>>>()?;
        let brisque_mean = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok((
            SampleRecord {
                id,
                seed,
                refs_loss,
                ism: s.ism,
                dr: s.dr,
                aism: s.aism,
                brisque_mean,
            },
            gen,
        ))
    }

    /// The configured identities, seeds and depth of evaluation.
    pub fn scope(&self) -> Scope {
        Scope {
            ids: self.eval_ids().to_vec(),
            seeds: self.cfg.seeds.clone(),
            probes_only: self.cfg.metrics.probes_only,
        }
    }

    /// Full evaluation of one condition over the configured scope.
    pub fn evaluate(
        &self,
        defense: &Defense,
        post: &PostprocessSpec,
        label: &str,
        eps_unit: f32,
    ) -> Result<MetricReport> {
        self.evaluate_in(&self.scope(), defense, post, label, eps_unit)
    }

    /// Evaluation of one condition restricted to `scope`. FID compares the
    /// pooled generations with the unused clean images of `scope.ids`.
    pub fn evaluate_in(
        &self,
        scope: &Scope,
        defense: &Defense,
        post: &PostprocessSpec,
        label: &str,
        eps_unit: f32,
    ) -> Result<MetricReport> {
        let start = Instant::now();
        let m = &self.cfg.metrics;
        let ids = scope.ids.clone();
        if ids.is_empty() || (!scope.probes_only && scope.seeds.is_empty()) {
            return Err(Error::Config(
                "evaluation needs at least one identity and one seed".into(),
            ));
        }
        let mut clean = Vec::new();
        let mut defended = Vec::new();
        let t_def = Instant::now();
        for &id in &ids {
            let refs = self.refs(id);
            defended.push(self.apply(defense, &refs, id)?);
            clean.push(refs);
        }
        let n_images: usize = clean.iter().map(ImageBatch::len).sum();
        let defend_per_image_s = t_def.elapsed().as_secs_f64() / n_images as f64;
        let protected = ids
            .iter()
            .zip(&defended)
            .map(|(&id, x)| self.postprocess(post, x, id))
            .collect::<Result<Vec<_>>>()?;
        let perturbation = perturbation_stats(&clean, &defended, budget(defense))?;

        let grid = probe_grid(m.probe_points);
        let sched = Schedule::default();
        let all = ImageBatch::concat(&protected)?;
        let mut probes = vec![curve(
            WHITE_BOX,
            &self.ensemble[0],
            &all,
            &grid,
            m.probe_draws,
            self.cfg.seed,
            &sched,
        )?];
        if let Some(h) = &self.holdout {
            probes.push(curve(
                BLACK_BOX,
                h,
                &all,
                &grid,
                m.probe_draws,
                self.cfg.seed,
                &sched,
            )?);
        }

        let mut report = MetricReport {
            schema_version: SCHEMA_VERSION,
            label: label.to_string(),
            defense: defense.kind().to_string(),
            postprocess: post.label(),
            eps: eps_unit,
            seeds: scope.seeds.clone(),
            ids: ids.clone(),
            fid: None,
            ism: None,
            dr: None,
            aism: None,
            brisque_mean: None,
            brisque_std: None,
            refs_loss: None,
            samples: Vec::new(),
            probes,
            perturbation,
            runtimes: Runtimes {
                defend_per_image_s,
                ..Default::default()
            },
            config_fingerprint: self.cfg.fingerprint(),
            partial: false,
            errors: Vec::new(),
        };
        if !scope.probes_only {
            let t_p = Instant::now();
            let jobs: Vec<(usize, u64)> = (0..ids.len())
                .flat_map(|k| scope.seeds.iter().map(move |&s| (k, s)))
                .collect();
            let results = parallel_map(&jobs, workers()?, |&(k, seed)| {
                self.personalize_and_measure(&protected[k], &clean[k], ids[k], seed)
            });
            let mut gens = Vec::new();
            for (r, (k, seed)) in results.into_iter().zip(&jobs) {
                match r {
                    Ok((rec, gen)) => {
                        report.samples.push(rec);
                        gens.push(gen);
                    }
                    Err(e) => {
                        report.partial = true;
                        report
                            .errors
                            .push(format!("identity {} seed {seed}: {e}", ids[*k]));
                    }
                }
            }
            report.runtimes.personalize_s = t_p.elapsed().as_secs_f64();
            summarise(
                &mut report,
                &gens,
                &self.clean_rest_of(&ids)?,
                &self.embedder,
            );
        }
        report.runtimes.evaluate_s = start.elapsed().as_secs_f64();
        report.validate()?;
        Ok(report)
    }
}

fn budget(d: &Defense) -> Option<f32> {
    match d {
        Defense::None => None,
        Defense::Rid(n) => Some(n.eps_budget),
        Defense::Pgd(c) => Some(c.eps_budget),
        Defense::Gaussian { eps, .. } => Some(*eps),
    }
}

fn curve(
    name: &str,
    model: &Denoiser,
    images: &ImageBatch,
    grid: &[f32],
    draws: usize,
    seed: u64,
    sched: &Schedule,
) -> Result<ProbeRecord> {
    let c = diffusion_loss_probe(model, images.images(), grid, draws, seed, sched)?;
    Ok(ProbeRecord {
        model: name.to_string(),
        t: c.t,
        loss: c.loss,
    })
}

fn perturbation_stats(
    clean: &[ImageBatch],
    defended: &[ImageBatch],
    eps: Option<f32>,
) -> Result<PerturbationStats> {
    let mut v = Vec::new();
    for (c, d) in clean.iter().zip(defended) {
        let delta = d.images().sub(c.images())?;
        v.extend(delta.data().iter().map(|&x| x as f64));
    }
    let n = v.len().max(1) as f64;
    let bound_mass = match eps {
        Some(e) => v.iter().filter(|x| x.abs() >= 0.9 * e as f64).count() as f64 / n,
        None => 0.0,
    };
    Ok(PerturbationStats {
        mean_abs: v.iter().map(|x| x.abs()).sum::<f64>() / n,
        max_abs: v.iter().fold(0.0, |a, x| a.max(x.abs())),
        bound_mass,
        excess_kurtosis: excess_kurtosis(&v),
    })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarise(
    report: &mut MetricReport,
    gens: &[ImageBatch],
    rest: &ImageBatch,
    emb: &EmbeddingModel,
) {
    let s = &report.samples;
    if s.is_empty() {
        return;
    }
    let isms: Vec<f64> = s.iter().filter_map(|r| r.ism).collect();
    report.ism = mean(&isms);
    report.dr = mean(&s.iter().map(|r| r.dr).collect::<Vec<_>>());
    report.aism = mean(&s.iter().map(|r| r.aism).collect::<Vec<_>>());
    report.refs_loss = mean(&s.iter().map(|r| r.refs_loss).collect::<Vec<_>>());
    let b: Vec<f64> = s.iter().map(|r| r.brisque_mean).collect();
    let bm = mean(&b).unwrap_or(0.0);
    report.brisque_mean = Some(bm);
    report.brisque_std =
        Some((b.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / b.len() as f64).sqrt());
    match ImageBatch::concat(gens).and_then(|g| fid_images(&g, rest, emb)) {
        Ok(f) => report.fid = Some(f),
        Err(e) => {
            report.partial = true;
            report.errors.push(format!("fid: {e}"));
        }
    }
}

/// Every condition of `cfg`: the configured defense at each budget.
/// Reports and plot data go to `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<MetricReport>> {
    let cache = out_dir
        .map(|d| Cache::at(&d.join("cache")))
        .unwrap_or_default();
    let lab = Lab::prepare(cfg, cache)?;
    let mut reports = Vec::new();
    for (&unit, &eps) in cfg.eps.iter().zip(&cfg.eps_budgets()) {
        let t = Instant::now();
        let defense = lab.build_defense(cfg.defense.kind, eps)?;
        let prepare_s = t.elapsed().as_secs_f64();
        let label = format!("{}-{}-{}", cfg.label, cfg.defense.kind.label(), unit);
        let mut r = lab.evaluate(&defense, &cfg.postprocess, &label, unit)?;
        r.runtimes.prepare_s = prepare_s;
        reports.push(r);
    }
    if let Some(dir) = out_dir {
        write_reports(&reports, &dir.join("reports.json"))?;
        write_plot_data(&reports, dir)?;
    }
    Ok(reports)
}
