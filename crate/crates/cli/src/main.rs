//! `ridlab`: stage-by-stage driver for the defense experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rid_core::error::Error;
use rid_core::harness::bench::{bench_pgd, bench_rid};
use rid_core::harness::config::{DefenseKind, ExperimentConfig};
use rid_core::harness::dataset::{load_images, save_images, synth_dataset};
use rid_core::harness::experiment::{
    run_experiment, workers, Cache, Defense, Lab, Scope, BLACK_BOX, WHITE_BOX,
};
use rid_core::harness::report::{merge_reports, write_plot_data, write_reports};
use rid_core::imagewise::{budget_from_unit, PgdMode};
use rid_core::personalize::personalize;

#[derive(Parser)]
#[command(
    name = "ridlab",
    version,
    about = "Feed-forward identity protection against toy diffusion models"
)]
struct Cli {
    /// Experiment configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts and reports.
    #[arg(long, global = true, default_value = "ridlab-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic identity dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Pre-train the ensemble and held-out denoisers.
    Pretrain,
    /// Identity embedder used by FID and ISM.
    Embedder {
        #[command(subcommand)]
        action: EmbedderAction,
    },
    /// PGD regression pairs for defender training.
    Pairs {
        #[command(subcommand)]
        action: PairsAction,
    },
    /// The feed-forward defender.
    Rid {
        #[command(subcommand)]
        action: RidAction,
    },
    /// Apply the configured defense to an image file.
    Defend(IoArgs),
    /// Personalise the base model on an image file; writes the adapters.
    Personalize(IoArgs),
    /// Apply the configured post-processing to an image file.
    Postprocess(IoArgs),
    /// Run every configured condition and write reports.
    Evaluate {
        /// Exit with status 3 unless the defended white-box probe lies
        /// above the clean one at every grid point.
        #[arg(long)]
        check: bool,
    },
    /// Per-image latency of the defender against PGD.
    Bench {
        #[arg(long, default_value_t = 8)]
        images: usize,
        /// Exit with status 3 unless the defender is at least 30x faster.
        #[arg(long)]
        check: bool,
    },
    /// Reports from several runs.
    Report {
        #[command(subcommand)]
        action: ReportAction,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    Gen,
}

#[derive(Subcommand)]
enum EmbedderAction {
    Train,
}

#[derive(Subcommand)]
enum PairsAction {
    Build(EpsArg),
}

#[derive(Subcommand)]
enum RidAction {
    Train(EpsArg),
}

#[derive(Subcommand)]
enum ReportAction {
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct EpsArg {
    /// Budget in [0, 1] units times 255; defaults to the first sweep value.
    #[arg(long)]
    eps: Option<f32>,
}

#[derive(Args)]
struct IoArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    eps: Option<f32>,
}

/// Failure classes mapped to exit codes 1, 2 and 3.
enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    workers()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl Serialize) -> Outcome {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn eps_of(cfg: &ExperimentConfig, eps: Option<f32>) -> (f32, f32) {
    let unit = eps.unwrap_or(cfg.eps[0]);
    (unit, budget_from_unit(unit / 255.0))
}

fn lab(cli: &Cli, cfg: &ExperimentConfig) -> Result<Lab, Failure> {
    Ok(Lab::prepare(cfg, Cache::at(&cli.out_dir.join("cache")))?)
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Dataset {
            action: DatasetAction::Gen,
        } => {
            let d = synth_dataset(&cfg.dataset)?;
            save_images(&d.images, &out.join("dataset.ridc"))?;
            #[derive(Serialize)]
            struct Meta<'a> {
                spec: &'a rid_core::harness::dataset::DatasetSpec,
                train_ids: &'a [usize],
                holdout_ids: &'a [usize],
                identities: &'a [rid_core::harness::dataset::IdentityParams],
            }
            write_json(
                &out.join("dataset.json"),
                &Meta {
                    spec: &d.spec,
                    train_ids: &d.train_ids,
                    holdout_ids: &d.holdout_ids,
                    identities: &d.identities,
                },
            )?;
            println!("{} images of {} identities", d.images.len(), d.spec.n_ids);
        }
        Command::Pretrain => {
            let lab = lab(cli, &cfg)?;
            for (k, m) in lab.ensemble.iter().enumerate() {
                m.save(&out.join(format!("models/ensemble-{k}.ridc")))?;
            }
            if let Some(h) = &lab.holdout {
                h.save(&out.join("models/holdout.ridc"))?;
            }
            println!(
                "{} ensemble models, holdout: {}",
                lab.ensemble.len(),
                lab.holdout.is_some()
            );
        }
        Command::Embedder {
            action: EmbedderAction::Train,
        } => {
            let lab = lab(cli, &cfg)?;
            lab.embedder.save(&out.join("models/embedder.ridc"))?;
            println!(
                "embedder accuracy on unseen images: {:.3}",
                lab.embedder_accuracy()?
            );
        }
        Command::Pairs {
            action: PairsAction::Build(a),
        } => {
            let lab = lab(cli, &cfg)?;
            let (unit, eps) = eps_of(&cfg, a.eps);
            let pairs = lab.pairs(eps)?;
            pairs.save(&out.join(format!("pairs-{unit}.ridc")))?;
            println!("{} pairs, {} failed", pairs.len(), pairs.failed.len());
        }
        Command::Rid {
            action: RidAction::Train(a),
        } => {
            let lab = lab(cli, &cfg)?;
            let (unit, eps) = eps_of(&cfg, a.eps);
            let (net, log) = lab.defender(eps, &cfg.defense.train)?;
            let fps: Vec<String> = lab.ensemble.iter().map(|m| m.fingerprint()).collect();
            net.save(&out.join(format!("defender-{unit}.ridc")), &fps)?;
            if let Some(log) = log {
                write_json(&out.join(format!("rid-log-{unit}.json")), &log)?;
            }
            println!("defender with {} parameters", net.numel());
        }
        Command::Defend(io) => {
            let lab = lab(cli, &cfg)?;
            let (_, eps) = eps_of(&cfg, io.eps);
            let defense = lab.build_defense(cfg.defense.kind, eps)?;
            let x = load_images(&io.input)?;
            let y = lab.apply(&defense, &x, 0)?;
            save_images(&y, &io.output)?;
        }
        Command::Personalize(io) => {
            let lab = lab(cli, &cfg)?;
            let x = load_images(&io.input)?;
            let (p, log) = personalize(&lab.ensemble[0], &x, &cfg.personalize)?;
            p.save(&io.output)?;
            println!("final loss {:.4}", log.last().copied().unwrap_or(f32::NAN));
        }
        Command::Postprocess(io) => {
            let lab = lab(cli, &cfg)?;
            let x = load_images(&io.input)?;
            save_images(&lab.postprocess(&cfg.postprocess, &x, 0)?, &io.output)?;
        }
        Command::Evaluate { check } => {
            let reports = run_experiment(&cfg, Some(out))?;
            for r in &reports {
                println!(
                    "{}: refs-loss {:?} aISM {:?} FID {:?}",
                    r.label, r.refs_loss, r.aism, r.fid
                );
            }
            if *check && cfg.defense.kind != DefenseKind::None {
                let lab = lab(cli, &cfg)?;
                let scope = Scope {
                    probes_only: true,
                    ..lab.scope()
                };
                let clean =
                    lab.evaluate_in(&scope, &Defense::None, &cfg.postprocess, "clean", 0.0)?;
                let base = clean.probe(WHITE_BOX).expect("white-box probe").curve();
                for r in &reports {
                    let c = r.probe(WHITE_BOX).expect("white-box probe").curve();
                    if c.fraction_above(&base)? < 1.0 {
                        return Err(Failure::Check(format!(
                            "{}: defended probe not above clean everywhere",
                            r.label
                        )));
                    }
                    if let (Some(b), Some(c)) = (clean.probe(BLACK_BOX), r.probe(BLACK_BOX)) {
                        println!(
                            "{}: black-box fraction above {:.2}",
                            r.label,
                            c.curve().fraction_above(&b.curve())?
                        );
                    }
                }
            }
        }
        Command::Bench { images, check } => {
            let lab = lab(cli, &cfg)?;
            let (_, eps) = eps_of(&cfg, None);
            let (net, _) = lab.defender(eps, &cfg.defense.train)?;
            let x = lab.data.images.select(&(0..*images).collect::<Vec<_>>());
            let rid = bench_rid(&net, &x, 3, 5)?;
            let pgd = bench_pgd(
                &lab.ensemble,
                &cfg.defense.pgd_at(eps, PgdMode::Advdm),
                &x,
                1,
                1,
            )?;
            let speedup = pgd.median_s / rid.median_s;
            write_json(&out.join("bench.json"), &(&rid, &pgd, speedup))?;
            println!(
                "rid {:.3e} s/img, pgd {:.3e} s/img, speedup {speedup:.0}x",
                rid.median_s, pgd.median_s
            );
            if *check && speedup < 30.0 {
                return Err(Failure::Check(format!("speedup {speedup:.1} below 30")));
            }
        }
        Command::Report {
            action: ReportAction::Merge { inputs, output },
        } => {
            let paths: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let merged = merge_reports(&paths)?;
            write_reports(&merged, output)?;
            write_plot_data(&merged, output.parent().unwrap_or(Path::new(".")))?;
            println!("{} reports merged", merged.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}
