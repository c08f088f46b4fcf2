//! The work behind each subcommand, callable without a process boundary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use dualflow_core::anomaly::{self, ScoreReport, Strategy};
use dualflow_core::data::{self, Normalizer, TelemetrySpec};
use dualflow_core::ode;
use dualflow_core::train::{self, TrainState};
use dualflow_core::Tensor;

use crate::checkpoint::{Checkpoint, MANIFEST};
use crate::config::{DataSource, RunConfig, SolverParams, StrategyName, TraceParams};
use crate::error::CliError;
use crate::series;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.csv";

/// Training rows plus the labelled evaluation split, both in model
/// coordinates except `test`, which stays raw.
pub struct Prepared {
    pub train: Tensor,
    pub test: Option<Tensor>,
    pub test_labels: Option<Vec<u8>>,
    pub normalizer: Option<Normalizer>,
}

/// Generates or loads the configured dataset. Deterministic in the config.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    match &cfg.data {
        DataSource::TwoMoons { n, noise } => Ok(Prepared {
            train: data::gen_two_moons(*n, *noise, cfg.seed),
            test: None,
            test_labels: None,
            normalizer: None,
        }),
        DataSource::Telemetry {
            length,
            channels,
            anomaly_rate,
            train_fraction,
            window,
        } => {
            let spec = TelemetrySpec {
                length: *length,
                channels: *channels,
                anomaly_rate: *anomaly_rate,
                clean_fraction: *train_fraction,
                seed: cfg.seed,
            };
            let s = data::gen_telemetry(&spec).map_err(|e| CliError::Config(e.to_string()))?;
            let w = data::window(&s, *window)?;
            let split = (train_fraction * *length as f64) as usize;
            let raw_train = w.windows.slice_rows(0, split);
            let normalizer = Normalizer::fit(&raw_train)?;
            Ok(Prepared {
                train: normalizer.apply(&raw_train)?,
                test: Some(w.windows.slice_rows(split, w.len())),
                test_labels: w.labels.map(|l| l[split..].to_vec()),
                normalizer: Some(normalizer),
            })
        }
        DataSource::Files {
            train,
            test,
            test_labels,
            window,
        } => {
            let s = series::load_series(train, None)?;
            let w = data::window(&s, *window)?;
            let normalizer = Normalizer::fit(&w.windows)?;
            let (test, labels) = match test {
                Some(p) => {
                    let t = series::load_series(p, test_labels.as_deref())?;
                    let tw = data::window(&t, *window)?;
                    (Some(tw.windows), tw.labels)
                }
                None => (None, None),
            };
            Ok(Prepared {
                train: normalizer.apply(&w.windows)?,
                test,
                test_labels: labels,
                normalizer: Some(normalizer),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub objective: String,
    pub seed: u64,
    pub dim: usize,
    pub train_rows: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub summary: TrainSummary,
    pub checkpoint: Checkpoint,
}

/// Trains per `cfg` and writes the config copy, loss curve, checkpoint and
/// summary into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path, progress: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    let started = Instant::now();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let prepared = prepare(cfg)?;
    let dim = prepared.train.cols();
    let state = train::train_with(cfg.train_config(dim), &prepared.train, progress)?;

    let mut w = csv::Writer::from_path(out.join(LOSS_FILE))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in state.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;

    let checkpoint = Checkpoint::from_state(cfg.clone(), &state, prepared.normalizer);
    checkpoint.save(&out.join(CHECKPOINT_DIR))?;
    let summary = TrainSummary {
        objective: cfg.objective().name().into(),
        seed: cfg.seed,
        dim,
        train_rows: prepared.train.rows(),
        steps: state.step,
        initial_loss: state.losses.first().copied().unwrap_or(f64::NAN),
        final_loss: state.losses.last().copied().unwrap_or(f64::NAN),
        seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(TrainOutcome {
        state,
        summary,
        checkpoint,
    })
}

/// Accepts either a checkpoint directory or a run directory holding one.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.join(MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join(CHECKPOINT_DIR)
    }
}

/// Evaluation settings, each falling back to the checkpoint's config.
#[derive(Debug, Clone, Default)]
pub struct EvalOverrides {
    pub solver: Option<SolverParams>,
    pub trace: Option<TraceParams>,
    pub strategy: Option<StrategyName>,
    pub point_adjust: Option<bool>,
    pub seed: Option<u64>,
}

struct Eval {
    solver: SolverParams,
    trace: TraceParams,
    strategy: Strategy,
    point_adjust: bool,
    seed: u64,
}

fn eval_settings(ck: &Checkpoint, o: &EvalOverrides) -> Eval {
    let c = &ck.config;
    Eval {
        solver: o.solver.unwrap_or(c.eval.solver),
        trace: o.trace.unwrap_or(c.eval.trace),
        strategy: o.strategy.map(Strategy::from).unwrap_or_else(|| c.strategy()),
        point_adjust: o.point_adjust.unwrap_or(c.eval.point_adjust),
        seed: o.seed.unwrap_or(c.seed),
    }
}

/// `log p(x)` in raw coordinates for every row of `x`, with the NFE used.
pub fn log_density(ck: &Checkpoint, x: &Tensor, o: &EvalOverrides) -> Result<(Tensor, usize)> {
    if x.cols() != ck.dim {
        return Err(CliError::Data(format!(
            "points have {} columns; the model expects {}",
            x.cols(),
            ck.dim
        ))
        .into());
    }
    let e = eval_settings(ck, o);
    let field = e.strategy.select(&ck.theta, ck.lambda.as_ref())?;
    let z = ck.normalize(x)?;
    let (lp, nfe) = ode::log_density(
        field,
        &ck.prior,
        &z,
        &e.solver.to_solver(),
        &e.trace.estimator(e.seed),
    )?;
    let shift = ck.log_scale();
    Ok((lp.map(|v| v - shift), nfe))
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsBlock {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    /// `F` fixed-step, `V` variable-step.
    pub solver_tag: String,
    pub solver: SolverParams,
    pub strategy: String,
    pub nfe: usize,
    pub nfe_per_chunk: f64,
    pub windows: usize,
    pub failures: usize,
    pub point_adjusted: bool,
    pub metrics: Option<MetricsBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
    pub scores_path: String,
}

pub struct ScoreOutcome {
    pub summary: ScoreSummary,
    pub scores: Vec<f64>,
    pub labels: Option<Vec<u8>>,
    pub report: Option<ScoreReport>,
}

/// Raw windows and labels to score: explicit files, else the config's
/// evaluation split.
pub fn score_inputs(
    ck: &Checkpoint,
    data: Option<&Path>,
    labels: Option<&Path>,
) -> Result<(Tensor, Option<Vec<u8>>)> {
    let window = match &ck.config.data {
        DataSource::Telemetry { window, .. } | DataSource::Files { window, .. } => *window,
        DataSource::TwoMoons { .. } => 1,
    };
    match data {
        Some(p) => {
            let s = series::load_series(p, labels)?;
            if s.channels() * window != ck.dim {
                return Err(CliError::Data(format!(
                    "{} has {} channels; the model was trained on {} (window {window})",
                    p.display(),
                    s.channels(),
                    ck.dim / window
                ))
                .into());
            }
            let w = data::window(&s, window)?;
            Ok((w.windows, w.labels))
        }
        None => {
            let p = prepare(&ck.config)?;
            let test = p.test.ok_or_else(|| {
                CliError::Data("the configured data source has no evaluation split; pass --data".into())
            })?;
            Ok((test, p.test_labels))
        }
    }
}

/// Scores windows, writes `scores.csv` and `metrics.json` into `out`.
pub fn run_score(
    ck: &Checkpoint,
    windows: &Tensor,
    labels: Option<&[u8]>,
    o: &EvalOverrides,
    out: &Path,
) -> Result<ScoreOutcome> {
    let e = eval_settings(ck, o);
    let field = e.strategy.select(&ck.theta, ck.lambda.as_ref())?;
    let z = ck.normalize(windows)?;
    let s = anomaly::score_windows(
        field,
        &ck.prior,
        &z,
        &e.solver.to_solver(),
        &e.trace.estimator(e.seed),
        ck.config.eval.chunk,
    )?;
    let shift = ck.log_scale();
    let scores: Vec<f64> = s.scores.iter().map(|v| v + shift).collect();

    let (report, notice) = match labels {
        Some(l) => (Some(anomaly::evaluate(&scores, l, e.point_adjust)?), None),
        None => (None, Some("no labels given; metrics omitted".to_string())),
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = csv::Writer::from_path(out.join(SCORES_FILE))?;
    match labels {
        Some(l) => {
            w.write_record(["index", "score", "label"])?;
            for (i, (sc, lb)) in scores.iter().zip(l).enumerate() {
                w.write_record([i.to_string(), sc.to_string(), lb.to_string()])?;
            }
        }
        None => {
            w.write_record(["index", "score"])?;
            for (i, sc) in scores.iter().enumerate() {
                w.write_record([i.to_string(), sc.to_string()])?;
            }
        }
    }
    w.flush()?;

    let summary = ScoreSummary {
        solver_tag: e.solver.tag().into(),
        solver: e.solver,
        strategy: e.strategy.name().into(),
        nfe: s.nfe,
        nfe_per_chunk: s.nfe as f64 / s.chunks.max(1) as f64,
        windows: scores.len(),
        failures: s.failures,
        point_adjusted: e.point_adjust,
        metrics: report.as_ref().map(|r| MetricsBlock {
            threshold: r.threshold,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            auc: r.auc,
        }),
        notice,
        scores_path: SCORES_FILE.into(),
    };
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(ScoreOutcome {
        summary,
        scores,
        labels: labels.map(<[u8]>::to_vec),
        report,
    })
}

fn coordinate_names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

/// Draws `n` samples through the forward model and writes them as CSV.
pub fn run_sample(ck: &Checkpoint, n: usize, o: &EvalOverrides, out: &Path) -> Result<Tensor> {
    let e = eval_settings(ck, o);
    let z = ode::push_forward_sample(&ck.theta, &ck.prior, n, &e.solver.to_solver(), e.seed)?;
    let x = ck.denormalize(&z);
    series::write_csv(out, &coordinate_names(ck.dim), &x)?;
    Ok(x)
}

/// Cell centres of a `res × res` grid over `[lo, hi]²`.
pub fn grid(lo: f64, hi: f64, res: usize) -> Result<(Tensor, f64)> {
    if res == 0 || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(CliError::Config("grid needs res ≥ 1 and hi > lo".into()).into());
    }
    let h = (hi - lo) / res as f64;
    let mut pts = Vec::with_capacity(2 * res * res);
    for i in 0..res {
        for j in 0..res {
            pts.push(lo + (i as f64 + 0.5) * h);
            pts.push(lo + (j as f64 + 0.5) * h);
        }
    }
    Ok((Tensor::matrix(res * res, 2, pts)?, h * h))
}

pub struct DensityOutcome {
    pub log_density: Tensor,
    /// `Σ p · cell area` when evaluated on a grid.
    pub riemann_sum: Option<f64>,
    pub nfe: usize,
}

/// Evaluates densities at `points` (or a grid when `cell_area` is given)
/// and writes `coords…, log_density, density` rows.
pub fn run_density(
    ck: &Checkpoint,
    points: &Tensor,
    cell_area: Option<f64>,
    o: &EvalOverrides,
    out: &Path,
) -> Result<DensityOutcome> {
    let (lp, nfe) = log_density(ck, points, o)?;
    let d = points.cols();
    let mut rows = Vec::with_capacity(points.rows() * (d + 2));
    for r in 0..points.rows() {
        rows.extend_from_slice(points.row(r));
        let l = lp.data()[r];
        rows.push(l);
        rows.push(l.exp());
    }
    let mut cols = coordinate_names(d);
    cols.push("log_density".into());
    cols.push("density".into());
    series::write_csv(out, &cols, &Tensor::matrix(points.rows(), d + 2, rows)?)?;
    let riemann_sum = cell_area.map(|a| lp.data().iter().map(|l| l.exp()).sum::<f64>() * a);
    Ok(DensityOutcome {
        log_density: lp,
        riemann_sum,
        nfe,
    })
}
