//! Fixed-step Euler and adaptive Dormand–Prince 5(4) integration, for the
//! plain flow and for the augmented `(x, Δlog p)` system.
//!
//! Both methods integrate in either direction of time. Along a traversal
//! from `t_start` to `t_end` the log-density accumulator obeys
//! `d(Δlog p)/dt = −Tr(∂v/∂x)`, so
//! `log p_end(x_end) = log p_start(x_start) + Δlog p`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{GaussianPrior, VectorField};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::trace::{self, ProbeDist, TraceEstimator, TraceMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Euler {
        steps: usize,
    },
    Dopri5 {
        atol: f64,
        rtol: f64,
        max_steps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub t_start: f64,
    pub t_end: f64,
}

impl SolverConfig {
    pub const DEFAULT_MAX_STEPS: usize = 10_000;

    pub fn euler(steps: usize) -> Self {
        Self {
            method: Method::Euler { steps },
            t_start: 0.0,
            t_end: 1.0,
        }
    }

    pub fn dopri5(atol: f64, rtol: f64) -> Self {
        Self {
            method: Method::Dopri5 {
                atol,
                rtol,
                max_steps: Self::DEFAULT_MAX_STEPS,
            },
            t_start: 0.0,
            t_end: 1.0,
        }
    }

    pub fn span(mut self, t_start: f64, t_end: f64) -> Self {
        self.t_start = t_start;
        self.t_end = t_end;
        self
    }

    /// Same method over the reversed interval.
    pub fn reversed(self) -> Self {
        self.span(self.t_end, self.t_start)
    }

    pub fn is_fixed_step(&self) -> bool {
        matches!(self.method, Method::Euler { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Euler { steps: 0 } => {
                return Err(Error::Config("euler needs at least one step".into()))
            }
            Method::Dopri5 { atol, rtol, .. } if !(atol > 0.0 && rtol > 0.0) => {
                return Err(Error::Config("dopri5 tolerances must be positive".into()))
            }
            Method::Dopri5 { max_steps: 0, .. } => {
                return Err(Error::Config("dopri5 max_steps must be positive".into()))
            }
            _ => {}
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite()) {
            return Err(Error::Config("integration bounds must be finite".into()));
        }
        Ok(())
    }
}

/// Right-hand side of an ODE over a batch of rows.
pub trait OdeSystem {
    fn rhs(&mut self, t: f64, state: &Tensor) -> Result<Tensor>;

    /// Called once before every step attempt.
    fn begin_step(&mut self) {}
}

struct FnSystem<F>(F);

impl<F: FnMut(f64, &Tensor) -> Result<Tensor>> OdeSystem for FnSystem<F> {
    fn rhs(&mut self, t: f64, state: &Tensor) -> Result<Tensor> {
        (self.0)(t, state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub state: Tensor,
    /// Right-hand-side evaluations.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrates `dx/dt = f(t, x)` from `x0` over the configured interval.
pub fn solve<F>(f: F, x0: &Tensor, cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    integrate(&mut FnSystem(f), x0.clone(), cfg)
}

/// Flows `x0` along a [`VectorField`].
pub fn solve_field<F: VectorField + ?Sized>(
    field: &F,
    x0: &Tensor,
    cfg: &SolverConfig,
) -> Result<Solution> {
    solve(|t, x| field.eval(t, x), x0, cfg)
}

pub fn integrate<S: OdeSystem>(sys: &mut S, y0: Tensor, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let mut nfe = 0;
    let mut eval = |sys: &mut S, t: f64, y: &Tensor| -> Result<Tensor> {
        nfe += 1;
        let dy = sys.rhs(t, y)?;
        if dy.shape() != y.shape() {
            return Err(y.mismatch("ode_rhs", &dy));
        }
        if !dy.is_finite() {
            return Err(Error::FieldNotFinite { t });
        }
        Ok(dy)
    };
    if cfg.t_start == cfg.t_end {
        return Ok(Solution {
            state: y0,
            nfe: 0,
            accepted: 0,
            rejected: 0,
        });
    }
    let (state, accepted, rejected) = match cfg.method {
        Method::Euler { steps } => {
            let h = (cfg.t_end - cfg.t_start) / steps as f64;
            let mut y = y0;
            for k in 0..steps {
                sys.begin_step();
                let t = cfg.t_start + k as f64 * h;
                let dy = eval(sys, t, &y)?;
                axpy(&mut y, h, &dy);
            }
            (y, steps, 0)
        }
        Method::Dopri5 {
            atol,
            rtol,
            max_steps,
        } => dopri5(sys, &mut eval, y0, cfg, atol, rtol, max_steps)?,
    };
    Ok(Solution {
        state,
        nfe,
        accepted,
        rejected,
    })
}

fn axpy(y: &mut Tensor, a: f64, x: &Tensor) {
    for (yi, xi) in y.data_mut().iter_mut().zip(x.data()) {
        *yi += a * xi;
    }
}

/// `y + h Σ_i c_i k_i`.
fn combine(y: &Tensor, h: f64, terms: &[(f64, &Tensor)]) -> Tensor {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            axpy(&mut out, h * c, k);
        }
    }
    out
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Fifth-order minus embedded fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const H_MIN: f64 = 1e-6;

/// Worst per-row RMS of `err / (atol + rtol·max(|y|, |y_new|))`.
fn error_norm(err: &Tensor, y: &Tensor, y_new: &Tensor, atol: f64, rtol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..err.rows() {
        let (e, a, b) = (err.row(r), y.row(r), y_new.row(r));
        let mut acc = 0.0;
        for j in 0..e.len() {
            let scale = atol + rtol * a[j].abs().max(b[j].abs());
            let q = e[j] / scale;
            acc += q * q;
        }
        let rms = math::sqrt(acc / e.len().max(1) as f64);
        worst = if rms.is_nan() { f64::INFINITY } else { worst.max(rms) };
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn dopri5<S, E>(
    sys: &mut S,
    eval: &mut E,
    y0: Tensor,
    cfg: &SolverConfig,
    atol: f64,
    rtol: f64,
    max_steps: usize,
) -> Result<(Tensor, usize, usize)>
where
    S: OdeSystem,
    E: FnMut(&mut S, f64, &Tensor) -> Result<Tensor>,
{
    let span = (cfg.t_end - cfg.t_start).abs();
    let dir = (cfg.t_end - cfg.t_start).signum();
    let h_min = H_MIN.min(span);
    let mut h = (span / 10.0).clamp(h_min, span);
    let mut t = cfg.t_start;
    let mut y = y0;
    let mut k1 = eval(sys, t, &y)?;
    let mut err_prev: f64 = 1e-4;
    let (mut accepted, mut rejected) = (0, 0);

    while dir * (cfg.t_end - t) > 0.0 {
        if accepted + rejected >= max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps,
                t_reached: t,
            });
        }
        let remaining = (cfg.t_end - t).abs();
        let last = h >= remaining;
        let step = if last { remaining } else { h };
        let hs = dir * step;

        sys.begin_step();
        let y2 = combine(&y, hs, &[(A21, &k1)]);
        let k2 = eval(sys, t + C2 * hs, &y2)?;
        let y3 = combine(&y, hs, &[(A31, &k1), (A32, &k2)]);
        let k3 = eval(sys, t + C3 * hs, &y3)?;
        let y4 = combine(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        let k4 = eval(sys, t + C4 * hs, &y4)?;
        let y5 = combine(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        let k5 = eval(sys, t + C5 * hs, &y5)?;
        let y6 = combine(
            &y,
            hs,
            &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
        );
        let t_next = if last { cfg.t_end } else { t + hs };
        let k6 = eval(sys, t_next, &y6)?;
        let y_new = combine(&y, hs, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = eval(sys, t_next, &y_new)?;

        let err_vec = combine(
            &Tensor::zeros(y.shape()),
            hs,
            &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
        );
        let err = error_norm(&err_vec, &y, &y_new, atol, rtol);

        if err <= 1.0 || step <= h_min {
            // Steps at the floor are taken regardless of the estimate.
            accepted += 1;
            t = t_next;
            y = y_new;
            k1 = k7;
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * math::powf(err, -ALPHA) * math::powf(err_prev, BETA))
                    .clamp(MIN_FACTOR, MAX_FACTOR)
            };
            err_prev = err.max(1e-4);
            h = (step * factor).clamp(h_min, span);
        } else {
            rejected += 1;
            let factor = (SAFETY * math::powf(err, -ALPHA)).max(MIN_FACTOR);
            h = (step * factor).max(h_min);
        }
    }
    Ok((y, accepted, rejected))
}

/// Final state of an augmented solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: Tensor,
    /// `∫ −Tr(∂v/∂x) dt` along the traversal, one value per row.
    pub delta_logp: Tensor,
    pub nfe: usize,
}

#[allow(clippy::large_enum_variant)]
enum Probes {
    Exact,
    Hutchinson {
        count: usize,
        dist: ProbeDist,
        rng: Rng,
        current: Vec<Tensor>,
        started: bool,
    },
}

/// The `[v(t, x) | −Tr(∂v/∂x)]` system on `[n, D + 1]` states.
struct Augmented<'a, F: ?Sized> {
    field: &'a F,
    dim: usize,
    rows: usize,
    probes: Probes,
}

impl<F: VectorField + ?Sized> OdeSystem for Augmented<'_, F> {
    fn rhs(&mut self, t: f64, state: &Tensor) -> Result<Tensor> {
        let d = self.dim;
        let mut x = Vec::with_capacity(self.rows * d);
        for r in 0..self.rows {
            x.extend_from_slice(&state.row(r)[..d]);
        }
        let x = Tensor::matrix(self.rows, d, x)?;
        let mode = match &self.probes {
            Probes::Exact => TraceMode::Exact,
            Probes::Hutchinson { current, .. } => TraceMode::Probes(current),
        };
        let (v, tr) = trace::field_and_trace(self.field, t, &x, mode)?;
        let mut out = Vec::with_capacity(self.rows * (d + 1));
        for r in 0..self.rows {
            out.extend_from_slice(v.row(r));
            out.push(-tr.data()[r]);
        }
        Tensor::matrix(self.rows, d + 1, out)
    }

    fn begin_step(&mut self) {
        // One probe set per step: held across the stages of a Dopri5 step
        // so the integrand stays smooth within it.
        if let Probes::Hutchinson {
            count,
            dist,
            rng,
            current,
            started,
        } = &mut self.probes
        {
            if *started {
                *current = trace::sample_probes(*dist, *count, &[self.rows, self.dim], rng);
            }
            *started = true;
        }
    }
}

/// Integrates `x` and `Δlog p` jointly over the configured interval.
pub fn solve_with_logdet<F: VectorField + ?Sized>(
    field: &F,
    x_start: &Tensor,
    cfg: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<AugmentedState> {
    estimator.validate()?;
    let d = field.dim();
    if x_start.ndim() != 2 || x_start.cols() != d {
        return Err(Error::Shape {
            op: "solve_with_logdet",
            lhs: alloc::vec![d],
            rhs: x_start.shape().to_vec(),
        });
    }
    let n = x_start.rows();
    if n == 0 {
        return Ok(AugmentedState {
            x: x_start.clone(),
            delta_logp: Tensor::vector(Vec::new()),
            nfe: 0,
        });
    }
    let probes = match *estimator {
        TraceEstimator::Exact => Probes::Exact,
        TraceEstimator::Hutchinson { probes, dist, seed } => {
            let mut rng = rng::seeded(seed);
            let current = trace::sample_probes(dist, probes, &[n, d], &mut rng);
            Probes::Hutchinson {
                count: probes,
                dist,
                rng,
                current,
                started: false,
            }
        }
    };
    let mut sys = Augmented {
        field,
        dim: d,
        rows: n,
        probes,
    };
    let mut y0 = Vec::with_capacity(n * (d + 1));
    for r in 0..n {
        y0.extend_from_slice(x_start.row(r));
        y0.push(0.0);
    }
    let sol = integrate(&mut sys, Tensor::matrix(n, d + 1, y0)?, cfg)?;
    let mut x = Vec::with_capacity(n * d);
    let mut dl = Vec::with_capacity(n);
    for r in 0..n {
        let row = sol.state.row(r);
        x.extend_from_slice(&row[..d]);
        dl.push(row[d]);
    }
    Ok(AugmentedState {
        x: Tensor::matrix(n, d, x)?,
        delta_logp: Tensor::vector(dl),
        nfe: sol.nfe,
    })
}

/// `log p₁(x₁)` by pulling `x₁` back to `t = 0` along `field` and scoring the
/// result under the prior. Returns the log densities and the NFE used.
pub fn log_density<F: VectorField + ?Sized>(
    field: &F,
    prior: &GaussianPrior,
    x1: &Tensor,
    cfg: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<(Tensor, usize)> {
    let cfg = cfg.span(1.0, 0.0);
    let aug = solve_with_logdet(field, x1, &cfg, estimator)?;
    let lp0 = prior.log_pdf(&aug.x)?;
    // log p₀(x₀) = log p₁(x₁) + Δ  ⇒  log p₁(x₁) = log p₀(x₀) − Δ.
    let out = lp0.zip_map(&aug.delta_logp, |a, b| a - b)?;
    Ok((out, aug.nfe))
}

/// Draws `n` prior samples and transports them from `t = 0` to `t = 1`.
pub fn push_forward_sample<F: VectorField + ?Sized>(
    field: &F,
    prior: &GaussianPrior,
    n: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Tensor> {
    let d = prior.dim();
    if n == 0 {
        return Tensor::matrix(0, d, Vec::new());
    }
    let x0 = prior.sample_seeded(n, seed);
    let cfg = cfg.span(0.0, 1.0);
    Ok(solve_field(field, &x0, &cfg)?.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::LinearField;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn euler_exact_for_constant_field() {
        let sol = solve(
            |_, x| Ok(Tensor::filled(x.shape(), 1.0)),
            &col(&[0.0, 0.0]),
            &SolverConfig::euler(4),
        )
        .unwrap();
        assert_eq!(sol.state.data(), &[1.0, 1.0]);
        assert_eq!(sol.nfe, 4);
    }

    #[test]
    fn euler_four_steps_on_growth() {
        let sol = solve(|_, x| Ok(x.clone()), &col(&[1.0]), &SolverConfig::euler(4)).unwrap();
        assert_eq!(sol.state.item(), 2.44140625);
    }

    #[test]
    fn dopri5_decay() {
        let sol = solve(
            |_, x| Ok(x.map(|v| -v)),
            &col(&[1.0]),
            &SolverConfig::dopri5(1e-6, 1e-6),
        )
        .unwrap();
        assert!((sol.state.item() - math::exp(-1.0)).abs() < 1e-5);
    }

    #[test]
    fn dopri5_counts_every_evaluation() {
        let mut calls = 0;
        let sol = solve(
            |t, x| {
                calls += 1;
                Ok(x.map(|v| math::cos(3.0 * t) * v))
            },
            &col(&[1.0, 2.0]),
            &SolverConfig::dopri5(1e-8, 1e-8),
        )
        .unwrap();
        assert_eq!(sol.nfe, calls);
        assert_eq!((sol.nfe - 1) % 6, 0);
        assert_eq!(sol.nfe, 1 + 6 * (sol.accepted + sol.rejected));
    }

    #[test]
    fn dopri5_max_steps_reports_time() {
        let cfg = SolverConfig {
            method: Method::Dopri5 {
                atol: 1e-12,
                rtol: 1e-12,
                max_steps: 3,
            },
            t_start: 0.0,
            t_end: 1.0,
        };
        let err = solve(|t, x| Ok(x.map(|v| math::sin(50.0 * t) * v)), &col(&[1.0]), &cfg)
            .unwrap_err();
        match err {
            Error::MaxStepsExceeded { max_steps, t_reached } => {
                assert_eq!(max_steps, 3);
                assert!((0.0..1.0).contains(&t_reached));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn nan_field_is_an_error() {
        let err = solve(
            |_, x| Ok(x.map(|_| f64::NAN)),
            &col(&[1.0]),
            &SolverConfig::euler(2),
        )
        .unwrap_err();
        assert_eq!(err, Error::FieldNotFinite { t: 0.0 });
    }

    #[test]
    fn reverse_direction_integrates_backwards() {
        let cfg = SolverConfig::dopri5(1e-9, 1e-9).span(1.0, 0.0);
        let sol = solve(|_, x| Ok(x.clone()), &col(&[math::exp(1.0)]), &cfg).unwrap();
        assert!((sol.state.item() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_field_keeps_density() {
        let f = LinearField::scaled_identity(2, 0.0);
        let x = col(&[0.3, -0.4]);
        let aug =
            solve_with_logdet(&f, &x, &SolverConfig::euler(4), &TraceEstimator::Exact).unwrap();
        assert_eq!(aug.x, x);
        assert_eq!(aug.delta_logp.data(), &[0.0]);
    }

    #[test]
    fn affine_flow_logdet() {
        let a = 0.5;
        let f = LinearField::scaled_identity(3, a);
        let x = col(&[1.0, -2.0, 0.5]);
        let cfg = SolverConfig::dopri5(1e-10, 1e-10);
        let aug = solve_with_logdet(&f, &x, &cfg, &TraceEstimator::Exact).unwrap();
        for (got, x0) in aug.x.data().iter().zip(x.data()) {
            assert!((got - math::exp(a) * x0).abs() < 1e-8);
        }
        assert!((aug.delta_logp.item() + 3.0 * a).abs() < 1e-8);
    }

    #[test]
    fn push_forward_of_nothing_is_empty() {
        let f = LinearField::scaled_identity(2, 1.0);
        let s = push_forward_sample(&f, &GaussianPrior::standard(2), 0, &SolverConfig::euler(4), 1)
            .unwrap();
        assert_eq!(s.shape(), &[0, 2]);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SolverConfig::euler(0).validate().is_err());
        assert!(SolverConfig::dopri5(0.0, 1e-3).validate().is_err());
    }
}
