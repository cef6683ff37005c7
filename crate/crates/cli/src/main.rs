use std::alloc::{GlobalAlloc, Layout, System};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use subadj_cli::commands::{self, CHECKPOINT_FILE};
use subadj_cli::config::OUT_DIR_ENV;
use subadj_cli::{exit_code, Axis, RunConfig};

/// Tracks live and peak heap bytes.
struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

#[derive(Parser)]
#[command(name = "subadj", version, about = "Sub-adjacent attention anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file of dotted keys (model.d_model, train.lambda, span.k1, ...).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (beats SUBADJ_OUT_DIR and `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self, extra: Vec<String>) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("out_dir={}", toml_string(&o.display().to_string())));
        }
        overrides.extend(extra);
        Ok(RunConfig::from_env(self.config.as_deref(), &overrides)?)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test pair and its provenance.
    Generate {
        /// Synthetic spec (TOML); defaults to the built-in sine benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model; writes a checkpoint, the epoch log and the resolved config.
    Train(RunArgs),
    /// Score the test split and pick the best-F1 threshold.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `full` (dynamic Gaussian score) or `raw` (reconstruction error).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        no_point_adjust: bool,
        #[arg(long)]
        entity_average: bool,
    },
    /// Train and evaluate over a grid of one hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// k1k2, lambda, window or mapping.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid, e.g. `0:0,20:30` or `0,10`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { spec, seed, out } => {
            let out = out
                .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data"));
            let p = commands::generate(spec.as_deref(), seed, &out)?;
            println!(
                "wrote {} train and {} test rows to {} (seed {}, anomaly rate {:.4})",
                p.train_rows,
                p.test_rows,
                out.display(),
                p.seed,
                p.anomaly_rate
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve(Vec::new())?;
            let out = commands::train(&cfg)?;
            let best = out.log.best();
            println!(
                "trained {} epochs ({} steps), best epoch {} val_loss {}; artifacts in {}",
                out.log.epochs.len(),
                out.log.optimizer_steps,
                out.log.best_epoch,
                best.map_or(f64::NAN, |b| b.val_loss),
                cfg.out_dir.display()
            );
            for w in &out.log.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Eval {
            run,
            checkpoint,
            mode,
            no_point_adjust,
            entity_average,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                let m: subadj_core::ScoreMode = m.parse()?;
                let name = match m {
                    subadj_core::ScoreMode::Full => "full",
                    subadj_core::ScoreMode::RawReconstruction => "raw_reconstruction",
                };
                extra.push(format!("score.mode={}", toml_string(name)));
            }
            if no_point_adjust {
                extra.push("eval.point_adjust=false".into());
            }
            if entity_average {
                extra.push("eval.aggregation=\"entity_average\"".into());
            }
            let cfg = run.resolve(extra)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let out = commands::eval(&cfg, &ck)?.output;
            let r = &out.report;
            println!(
                "{}: f1 {:.4} (pa {}), precision {:.4}, recall {:.4}, auc {:.4}, threshold {}",
                out.dataset,
                out.headline_f1(),
                out.point_adjust,
                r.selected().precision,
                r.selected().recall,
                r.auc,
                r.threshold
            );
        }
        Command::Sweep { run, axis, values } => {
            let axis: Axis = axis.parse()?;
            let cfg = run.resolve(Vec::new())?;
            let rows = commands::sweep(&cfg, axis, &values)?;
            for r in &rows {
                match &r.result {
                    Ok(o) => println!("{}={}: f1 {:.4} auc {:.4}", axis.name(), r.value, o.headline_f1(), o.report.auc),
                    Err(_) => println!("{}={}: failed", axis.name(), r.value),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = run(cli);
    eprintln!(
        "wall-clock {:.2} s, peak heap {:.1} MiB",
        start.elapsed().as_secs_f64(),
        PEAK.load(Ordering::Relaxed) as f64 / (1024.0 * 1024.0)
    );
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
