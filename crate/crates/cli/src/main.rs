use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dualflow::commands::{self, EvalOverrides};
use dualflow::config::{SolverParams, StrategyName, TraceKind, TraceParams};
use dualflow::{exit_code, series, Checkpoint, CliError, RunConfig, OUT_ENV};
use dualflow_core::data::{self, TelemetrySpec};

#[derive(Parser)]
#[command(name = "dualflow", version, about = "Continuous normalizing flows for density estimation and anomaly scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's output_dir, then
        /// $DUALFLOW_OUT/<objective>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score windows by negative log-likelihood and report P/R/F1/AUC.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Series to score; defaults to the config's evaluation split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        labels: Option<PathBuf>,
        #[arg(long)]
        point_adjust: bool,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples through the forward model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate densities at given points or on a 2-D grid.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "grid")]
        points: Option<PathBuf>,
        #[arg(long)]
        grid: bool,
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 100)]
        res: usize,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset to disk.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 20_000)]
        length: usize,
        #[arg(long, default_value_t = 5)]
        channels: usize,
        #[arg(long, default_value_t = 0.05)]
        anomaly_rate: f64,
        /// Leading share of the series kept anomaly-free.
        #[arg(long, default_value_t = 0.0)]
        clean_fraction: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    TwoMoons,
    Telemetry,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverName {
    Euler,
    Dopri5,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long, value_enum)]
    solver: Option<SolverName>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_enum)]
    trace: Option<TraceFlag>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyFlag>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceFlag {
    Exact,
    Hutchinson,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyFlag {
    ReverseModel,
    ForwardModel,
}

impl EvalFlags {
    fn overrides(&self, ck: &Checkpoint) -> Result<EvalOverrides> {
        let base = ck.config.eval.solver;
        let solver = match self.solver {
            None if self.steps.is_some()
                || self.atol.is_some()
                || self.rtol.is_some()
                || self.max_steps.is_some() =>
            {
                return Err(CliError::Config("solver settings need --solver".into()).into())
            }
            None => None,
            Some(SolverName::Euler) => Some(SolverParams::Euler {
                steps: self.steps.unwrap_or(4),
            }),
            Some(SolverName::Dopri5) => {
                let (atol, rtol, max_steps) = match base {
                    SolverParams::Dopri5 {
                        atol,
                        rtol,
                        max_steps,
                    } => (atol, rtol, max_steps),
                    SolverParams::Euler { .. } => (1e-1, 1e-2, 10_000),
                };
                Some(SolverParams::Dopri5 {
                    atol: self.atol.unwrap_or(atol),
                    rtol: self.rtol.unwrap_or(rtol),
                    max_steps: self.max_steps.unwrap_or(max_steps),
                })
            }
        };
        if let Some(s) = solver {
            s.to_solver()
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        let trace = (self.trace.is_some() || self.probes.is_some()).then(|| {
            let base = ck.config.eval.trace;
            TraceParams {
                trace: match self.trace {
                    Some(TraceFlag::Exact) => TraceKind::Exact,
                    Some(TraceFlag::Hutchinson) => TraceKind::Hutchinson,
                    None => base.trace,
                },
                probes: self.probes.unwrap_or(base.probes),
                probe_dist: base.probe_dist,
            }
        });
        if trace.is_some_and(|t| t.probes == 0) {
            return Err(CliError::Config("--probes must be at least 1".into()).into());
        }
        Ok(EvalOverrides {
            solver,
            trace,
            strategy: self.strategy.map(|s| match s {
                StrategyFlag::ReverseModel => StrategyName::ReverseModel,
                StrategyFlag::ForwardModel => StrategyName::ForwardModel,
            }),
            point_adjust: None,
            seed: self.seed,
        })
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// The run directory that owns a checkpoint directory.
fn run_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, PathBuf)> {
    let dir = commands::resolve_checkpoint(path);
    let ck = Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok((ck, run_dir(&dir)))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| out_root().join(format!("{}-seed{}", cfg.objective().name(), cfg.seed)));
            let total = cfg.train.steps;
            let o = commands::run_train(&cfg, &out, |step, loss| {
                if step % 100 == 0 || step + 1 == total {
                    eprintln!("step {step:>6}  loss {loss:.6}");
                }
            })?;
            let s = &o.summary;
            if s.steps == 0 {
                println!("initialized {} without training; run written to {}", s.objective, out.display());
            } else {
                println!(
                    "trained {} for {} steps: loss {:.6} -> {:.6} ({:.1}s); run written to {}",
                    s.objective,
                    s.steps,
                    s.initial_loss,
                    s.final_loss,
                    s.seconds,
                    out.display()
                );
            }
        }
        Command::Score {
            checkpoint,
            data,
            labels,
            point_adjust,
            eval,
            out,
        } => {
            let (ck, run) = load_checkpoint(&checkpoint)?;
            let mut o = eval.overrides(&ck)?;
            if point_adjust {
                o.point_adjust = Some(true);
            }
            let (windows, lab) = commands::score_inputs(&ck, data.as_deref(), labels.as_deref())?;
            let tag = o.solver.unwrap_or(ck.config.eval.solver).tag();
            let out = out.unwrap_or_else(|| run.join(format!("score-{tag}")));
            let r = commands::run_score(&ck, &windows, lab.as_deref(), &o, &out)?;
            let s = &r.summary;
            println!(
                "[{}] {} windows, NFE {} ({:.1} per chunk), {} failed, point-adjust {}",
                s.solver_tag,
                s.windows,
                s.nfe,
                s.nfe_per_chunk,
                s.failures,
                if s.point_adjusted { "on" } else { "off" }
            );
            match &s.metrics {
                Some(m) => println!(
                    "[{}] P {:.4}  R {:.4}  F1 {:.4}  AUC {:.4}  threshold {:.4}",
                    s.solver_tag, m.precision, m.recall, m.f1, m.auc, m.threshold
                ),
                None => eprintln!("{}", s.notice.as_deref().unwrap_or("metrics omitted")),
            }
            println!("report written to {}", out.display());
        }
        Command::Sample {
            checkpoint,
            n,
            eval,
            out,
        } => {
            let (ck, run) = load_checkpoint(&checkpoint)?;
            let o = eval.overrides(&ck)?;
            let out = out.unwrap_or_else(|| run.join("samples.csv"));
            commands::run_sample(&ck, n, &o, &out)?;
            println!("{n} samples written to {}", out.display());
        }
        Command::Density {
            checkpoint,
            points,
            grid,
            lo,
            hi,
            res,
            eval,
            out,
        } => {
            let (ck, run) = load_checkpoint(&checkpoint)?;
            let o = eval.overrides(&ck)?;
            let (pts, area) = match (points, grid) {
                (Some(p), _) => (series::load_series(&p, None)?.values, None),
                (None, true) => {
                    if ck.dim != 2 {
                        return Err(CliError::Config(format!(
                            "grid density needs a 2-D model, this one has {} dimensions",
                            ck.dim
                        ))
                        .into());
                    }
                    let (g, a) = commands::grid(lo, hi, res)?;
                    (g, Some(a))
                }
                (None, false) => {
                    return Err(CliError::Config("pass --points FILE or --grid".into()).into())
                }
            };
            let out = out.unwrap_or_else(|| run.join("density.csv"));
            let d = commands::run_density(&ck, &pts, area, &o, &out)?;
            if let Some(m) = d.riemann_sum {
                println!("grid mass {m:.4} over [{lo}, {hi}]²");
            }
            println!("{} densities written to {} (NFE {})", pts.rows(), out.display(), d.nfe);
        }
        Command::GenData {
            kind,
            out,
            seed,
            n,
            noise,
            length,
            channels,
            anomaly_rate,
            clean_fraction,
        } => {
            std::fs::create_dir_all(&out)?;
            match kind {
                DataKind::TwoMoons => {
                    let x = data::gen_two_moons(n, noise, seed);
                    let p = out.join("two_moons.csv");
                    series::write_csv(&p, &["x0".into(), "x1".into()], &x)?;
                    println!("{n} points written to {}", p.display());
                }
                DataKind::Telemetry => {
                    let spec = TelemetrySpec {
                        length,
                        channels,
                        anomaly_rate,
                        clean_fraction,
                        seed,
                    };
                    let s = data::gen_telemetry(&spec).map_err(|e| CliError::Config(e.to_string()))?;
                    let p = out.join("series.json");
                    series::write_series(&p, &s.values)?;
                    series::write_labels(&out.join("labels.txt"), s.labels.as_deref().unwrap_or(&[]))?;
                    println!("{length}×{channels} series written to {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
