use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use structkd::harness::{
    self, binning, distill_train, evaluate, gradcheck, load_splits, train_teacher, RunRecord, TeacherSource,
    TrainConfig, RUN_RECORD,
};
use structkd::nets::checkpoint;
use structkd::tasks::cache::{cache_teacher_outputs, TeacherCache};
use structkd::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "structkd", version, about = "Structured knowledge distillation for dense prediction")]
struct Cli {
    /// TOML training config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Config overrides such as `--lr0=0.05` or `--toggles.pi=true`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, test and unlabeled splits to `paths.data`.
    GenData(Overrides),
    /// Pretrain the teacher into `paths.out_dir`.
    TrainTeacher(Overrides),
    /// Run the teacher over the training split into `paths.cache`.
    CacheTeacher(Overrides),
    /// Train a student against the teacher at `paths.teacher`.
    Distill(Overrides),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on the training split instead.
        #[arg(long)]
        train: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Finite-difference checks of the registered gradients.
    Gradcheck {
        /// Components to check; all of them when empty.
        #[arg(long = "component")]
        components: Vec<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Ablation CSV and score histograms from run records.
    Report {
        /// Run records, or directories holding `run.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(cli_config: &Option<PathBuf>, o: &Overrides) -> anyhow::Result<TrainConfig> {
    let base = match cli_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    Ok(base.with_overrides(&o.overrides)?)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => Err(Error::Config(format!("{key} must be set")).into()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_teacher(cfg: &TrainConfig) -> anyhow::Result<structkd::nets::Network> {
    let dir = required(&cfg.paths.teacher, "paths.teacher")?;
    let (mut t, _) = checkpoint::load(dir).with_context(|| format!("loading teacher from {}", dir.display()))?;
    t.freeze();
    Ok(t)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(o) => {
            let cfg = config(&cli.config, &o)?;
            let root = required(&cfg.paths.data, "paths.data")?;
            let (train, test, unlabeled) = harness::generate_splits(&cfg)?;
            for (name, ds) in [("train", Some(train)), ("test", Some(test)), ("unlabeled", unlabeled)] {
                if let Some(ds) = ds {
                    let m = ds.save(&root.join(name))?;
                    info!("{name}: {} samples, images {}", m.samples, m.images_sha256);
                }
            }
        }
        Command::TrainTeacher(o) => {
            let cfg = config(&cli.config, &o)?;
            required(&cfg.paths.out_dir, "paths.out_dir")?;
            let out = train_teacher(&cfg, &load_splits(&cfg)?)?;
            print_json(&out.record.metrics)?;
        }
        Command::CacheTeacher(o) => {
            let cfg = config(&cli.config, &o)?;
            let dir = required(&cfg.paths.cache, "paths.cache")?;
            let mut teacher = load_teacher(&cfg)?;
            let splits = load_splits(&cfg)?;
            let m = cache_teacher_outputs(&mut teacher, &splits.train, dir, cfg.batch_size)?;
            info!("cached {} samples in {}", m.samples, dir.display());
        }
        Command::Distill(o) => {
            let cfg = config(&cli.config, &o)?;
            let splits = load_splits(&cfg)?;
            let out = match &cfg.paths.cache {
                Some(dir) => {
                    let cache = TeacherCache::load(dir)?;
                    if cache.len() != splits.train.len() {
                        bail!(Error::Config(format!(
                            "cache holds {} samples but the training split has {}",
                            cache.len(),
                            splits.train.len()
                        )));
                    }
                    distill_train(&cfg, &splits, TeacherSource::Cached(&cache))?
                }
                None => {
                    let mut teacher = load_teacher(&cfg)?;
                    distill_train(&cfg, &splits, TeacherSource::Live(&mut teacher))?
                }
            };
            print_json(&out.record.metrics)?;
        }
        Command::Eval { checkpoint: dir, train, o } => {
            let cfg = config(&cli.config, &o)?;
            let (mut net, _) = checkpoint::load(&dir)?;
            let splits = load_splits(&cfg)?;
            let ds = if train { &splits.train } else { &splits.test };
            print_json(&evaluate(&mut net, ds, &binning(&cfg)?, cfg.batch_size)?)?;
        }
        Command::Gradcheck { components, seeds } => {
            let names: Vec<String> = if components.is_empty() {
                gradcheck::COMPONENTS.iter().map(|s| s.to_string()).collect()
            } else {
                components
            };
            let mut ok = true;
            for name in &names {
                let mut worst = 0f64;
                for seed in 0..seeds {
                    worst = worst.max(gradcheck::gradcheck(name, seed)?.max_rel_error);
                }
                let pass = worst < gradcheck::TOLERANCE;
                ok &= pass;
                println!("{name:20} max_rel_error {worst:.2e} {}", if pass { "ok" } else { "FAIL" });
            }
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report { runs, out } => {
            let records = runs
                .iter()
                .map(|p| {
                    let p = if p.is_dir() { p.join(RUN_RECORD) } else { p.clone() };
                    RunRecord::load(&p)
                })
                .collect::<structkd::Result<Vec<_>>>()?;
            let table = harness::ablation_table(&records)?;
            for row in &table.rows {
                let std = row.std.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
                println!("{:12} {} {:.4}{std} (n={})", row.scheme, table.metric, row.mean, row.runs);
            }
            for p in harness::write_report(&records, &out)? {
                info!("wrote {}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::TaskMismatch { .. }) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
