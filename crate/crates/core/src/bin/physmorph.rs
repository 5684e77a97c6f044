use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use physmorph::app;
use physmorph::config::ExperimentConfig;
use physmorph::gradcheck;
use physmorph::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "physmorph",
    version,
    about = "Differentiable MPM to Gaussian-splat shape morphing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; PHYSMORPH_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    resolution_scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write CSVs, frames, snapshots and a checkpoint.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Chamfer distance and anisotropy statistics of a snapshot.
    Eval {
        #[command(flatten)]
        common: Common,
        snapshot: PathBuf,
    },
    /// Render one frame set of a snapshot.
    Render {
        #[command(flatten)]
        common: Common,
        snapshot: PathBuf,
    },
    /// Finite-difference checks of all gradient paths.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write target mass slices and target alpha/depth images.
    Targets {
        #[command(flatten)]
        common: Common,
    },
}

struct Failure {
    code: u8,
    error: Error,
}

fn config_failure(error: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

fn runtime(error: Error) -> Failure {
    let code = match error {
        Error::Config { .. } | Error::Shape(_) | Error::OutsideMargin { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    };
    Failure { code, error }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    match std::env::var("PHYSMORPH_THREADS") {
        Ok(v) if !v.trim().is_empty() => v.trim().parse::<usize>().map(Some).map_err(|_| {
            config_failure(Error::config(
                "PHYSMORPH_THREADS",
                format!("`{v}` is not a thread count"),
            ))
        }),
        _ => Ok(flag),
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&common.config).map_err(config_failure)?;
    if let Some(s) = common.resolution_scale {
        cfg = cfg.with_resolution_scale(s).map_err(config_failure)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(e) = common.episodes {
        cfg.training.episodes = e;
    }
    if let Some(dir) = &common.out_dir {
        cfg.output.dir = dir.clone();
    }
    cfg.validate().map_err(config_failure)?;
    let out = cfg.output.dir.clone();
    Ok((cfg, out))
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::Run { common, .. }
        | Command::Eval { common, .. }
        | Command::Render { common, .. }
        | Command::Gradcheck { common }
        | Command::Targets { common } => common,
    }
}

fn execute(cmd: &Command) -> Result<(), Failure> {
    let (cfg, out) = load(common(cmd))?;
    match cmd {
        Command::Run { resume, .. } => {
            let s = app::run(&cfg, &out, *resume).map_err(runtime)?;
            println!(
                "episodes {} chamfer {:.6e} anisotropy_mean {:.4} output {}",
                s.state.episode,
                s.evaluation.chamfer,
                s.evaluation.anisotropy.mean,
                out.display()
            );
        }
        Command::Eval { snapshot, .. } => {
            let e = app::eval_snapshot(&cfg, snapshot, &out).map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&e).expect("evaluation serializes"));
        }
        Command::Render { snapshot, .. } => {
            let p = app::render_snapshot(&cfg, snapshot, &out).map_err(runtime)?;
            println!("{}", p.display());
        }
        Command::Gradcheck { .. } => {
            let checks = gradcheck::run_all(&cfg.sim, cfg.seed).map_err(runtime)?;
            let mut ok = true;
            for c in &checks {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} entries {:>4}  max_rel {:.3e}  tol {:.0e}  {verdict}",
                    c.name, c.entries, c.max_rel, c.tol
                );
                ok &= c.passed();
            }
            if !ok {
                return Err(Failure {
                    code: EXIT_GRADCHECK,
                    error: Error::InvalidArgument("gradient check exceeded tolerance".into()),
                });
            }
        }
        Command::Targets { .. } => {
            app::write_targets(&cfg, &out).map_err(runtime)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Result<(), Failure> + Send) -> Result<(), Failure> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_failure(Error::config("threads", e.to_string())))?
            .install(f),
        None => f(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = thread_count(common(&cli.command).threads).and_then(|t| with_threads(t, || execute(&cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
