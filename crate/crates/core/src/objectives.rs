//! Training objectives: maximum likelihood through a discretized flow,
//! conditional flow matching, and dual flow matching, plus the round-trip
//! bijectivity diagnostic and the closed-form prior refit.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::{GaussianPrior, PriorBinding, VectorField};
use crate::math;
use crate::ode::{self, Method, SolverConfig};
use crate::paths::{Conditioning, PathSpec};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::trace::{self, TraceEstimator, TraceMode};

/// Floor on vector norms before normalizing to unit length.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfmVariant {
    /// `1 − cos(v_θ, v_λ)`.
    CosPair,
    /// `1 − cos(v_θ ⊙ v_λ, 1)`: the product should point along the ones
    /// vector.
    CosProductOnes,
}

impl DfmVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CosPair => "cos_pair",
            Self::CosProductOnes => "cos_product_ones",
        }
    }
}

/// Negative mean log-likelihood of `x1` under the flow, integrating
/// `t: 1 → 0` with fixed-step Euler on `tape`.
///
/// The trace is recorded with Jacobian-vector products so the loss is
/// differentiable in the field's parameters and the prior's. Hutchinson
/// probes are redrawn every Euler step from the estimator's seed.
pub fn mle_loss<F: VectorField + ?Sized>(
    tape: &Tape,
    field: &F,
    prior: &PriorBinding,
    x1: &Tensor,
    solver: &SolverConfig,
    estimator: &TraceEstimator,
) -> Result<Var> {
    let steps = match solver.method {
        Method::Euler { steps } if steps > 0 => steps,
        Method::Euler { .. } => {
            return Err(Error::Config("euler needs at least one step".into()))
        }
        Method::Dopri5 { .. } => {
            return Err(Error::Config("training requires fixed-step solver".into()))
        }
    };
    estimator.validate()?;
    let h = 1.0 / steps as f64;
    let mut x = tape.constant(x1.clone())?;
    let mut rng = match *estimator {
        TraceEstimator::Hutchinson { seed, .. } => Some(rng::seeded(seed)),
        TraceEstimator::Exact => None,
    };
    let mut delta: Option<Var> = None;
    for k in 0..steps {
        let t = 1.0 - k as f64 * h;
        let probes = match (estimator, rng.as_mut()) {
            (TraceEstimator::Hutchinson { probes, dist, .. }, Some(r)) => {
                trace::sample_probes(*dist, *probes, x1.shape(), r)
            }
            _ => Vec::new(),
        };
        let mode = match estimator {
            TraceEstimator::Exact => TraceMode::Exact,
            TraceEstimator::Hutchinson { .. } => TraceMode::Probes(&probes),
        };
        let (v, tr) = trace::taped_trace(field, tape, &[t], &x, mode)?;
        x = x.sub(&v.scale(h)?)?;
        // dΔ/dt = −Tr with dt = −h, so each step adds h·Tr.
        let inc = tr.scale(h)?;
        delta = Some(match delta {
            None => inc,
            Some(d) => d.add(&inc)?,
        });
    }
    let lp0 = prior.log_pdf(&x)?;
    let delta = delta.expect("at least one step");
    lp0.sub(&delta)?.mean()?.neg()
}

/// A CFM regression batch: path samples and their target field.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmBatch {
    pub times: Vec<f64>,
    pub xt: Tensor,
    pub target: Tensor,
}

/// Builds path samples `x_t = μ_t + σ_t ε` and targets `u_t(x_t | z)` row by
/// row. `x0` is required by the coupled paths and ignored by FM.
pub fn cfm_batch(
    path: &PathSpec,
    x1: &Tensor,
    x0: Option<&Tensor>,
    times: &[f64],
    eps: &Tensor,
) -> Result<CfmBatch> {
    path.validate()?;
    let n = x1.rows();
    if times.len() != n {
        return Err(Error::Shape {
            op: "cfm_loss",
            lhs: alloc::vec![n],
            rhs: alloc::vec![times.len()],
        });
    }
    if eps.shape() != x1.shape() {
        return Err(x1.mismatch("cfm_loss", eps));
    }
    if let Some(x0) = x0 {
        if x0.shape() != x1.shape() {
            return Err(x1.mismatch("cfm_loss", x0));
        }
    }
    let d = x1.cols();
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for r in 0..n {
        let z = match (path.couples_source(), x0) {
            (true, Some(x0)) => Conditioning::pair(x0.row(r), x1.row(r)),
            (true, None) => {
                return Err(Error::Config(alloc::format!(
                    "path {} needs source samples",
                    path.name()
                )))
            }
            (false, _) => Conditioning::data(x1.row(r)),
        };
        let x = path.sample_xt_with(times[r], z, eps.row(r))?;
        target.extend(path.cond_vector_field(times[r], &x, z)?);
        xt.extend(x);
    }
    Ok(CfmBatch {
        times: times.to_vec(),
        xt: Tensor::matrix(n, d, xt)?,
        target: Tensor::matrix(n, d, target)?,
    })
}

/// `mean_rows ‖v(t, x_t) − u_t‖²` for a prepared batch.
pub fn cfm_loss_with<F: VectorField + ?Sized>(tape: &Tape, field: &F, batch: &CfmBatch) -> Result<Var> {
    let x = tape.constant(batch.xt.clone())?;
    let u = tape.constant(batch.target.clone())?;
    let v = field.forward(tape, &batch.times, &x)?;
    v.sub(&u)?.square()?.sum_rows()?.mean()
}

/// Draws one `(t, x₀, ε)` triple per row and returns the CFM loss. Sources
/// come from `N(0, I)`; `t` is uniform on `[0, path.t_max())`.
pub fn cfm_loss<F: VectorField + ?Sized>(
    tape: &Tape,
    field: &F,
    path: &PathSpec,
    x1: &Tensor,
    rng: &mut Rng,
) -> Result<Var> {
    let batch = sample_cfm_batch(path, x1, rng)?;
    cfm_loss_with(tape, field, &batch)
}

pub fn sample_cfm_batch(path: &PathSpec, x1: &Tensor, rng: &mut Rng) -> Result<CfmBatch> {
    let n = x1.rows();
    let t_max = path.t_max();
    let times: Vec<f64> = (0..n).map(|_| rng::uniform(rng) * t_max).collect();
    let x0 = path
        .couples_source()
        .then(|| rng::normal_tensor(rng, x1.shape()));
    let eps = rng::normal_tensor(rng, x1.shape());
    cfm_batch(path, x1, x0.as_ref(), &times, &eps)
}

fn unit_rows(v: &Var) -> Result<Var> {
    v.div_rows(&v.row_norm()?.clamp_min(NORM_FLOOR)?)
}

/// Per-row cosine distance between two field outputs, averaged.
pub fn cosine_objective(v_theta: &Var, v_lambda: &Var, variant: DfmVariant) -> Result<Var> {
    let (a, b) = (v_theta.value(), v_lambda.value());
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(a.mismatch("dfm_loss", &b));
    }
    let cos = match variant {
        DfmVariant::CosPair => unit_rows(v_theta)?.mul(&unit_rows(v_lambda)?)?.sum_rows()?,
        DfmVariant::CosProductOnes => {
            let d = a.cols() as f64;
            unit_rows(&v_theta.mul(v_lambda)?)?
                .sum_rows()?
                .scale(1.0 / math::sqrt(d))?
        }
    };
    cos.neg()?.add_scalar(1.0)?.mean()
}

/// Dual flow matching loss between the forward field on data rows and the
/// reverse field on prior rows, sharing one time per pair.
pub fn dfm_loss<A, B>(
    tape: &Tape,
    theta: &A,
    lambda: &B,
    x: &Tensor,
    y: &Tensor,
    times: &[f64],
    variant: DfmVariant,
) -> Result<Var>
where
    A: VectorField + ?Sized,
    B: VectorField + ?Sized,
{
    if x.shape() != y.shape() {
        return Err(x.mismatch("dfm_loss", y));
    }
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let vt = theta.forward(tape, times, &xv)?;
    let vl = lambda.forward(tape, times, &yv)?;
    cosine_objective(&vt, &vl, variant)
}

/// Mean Euclidean distance between `x` and its round trip forward through
/// `θ` over `t: 0 → 1` and back through `λ` over `t: 1 → 0`.
pub fn bijectivity_residual<A, B>(theta: &A, lambda: &B, x: &Tensor, solver: &SolverConfig) -> Result<f64>
where
    A: VectorField + ?Sized,
    B: VectorField + ?Sized,
{
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let there = ode::solve_field(theta, x, &solver.span(0.0, 1.0))?.state;
    let back = ode::solve_field(lambda, &there, &solver.span(1.0, 0.0))?.state;
    let total: f64 = (0..x.rows())
        .map(|r| {
            let s: f64 = back.row(r).iter().zip(x.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
            math::sqrt(s)
        })
        .sum();
    Ok(total / x.rows() as f64)
}

/// Smallest standard deviation a refitted prior may take.
pub const PRIOR_STD_FLOOR: f64 = 1e-6;

/// Maximum-likelihood diagonal Gaussian for `data` pulled back to `t = 0`
/// along `field`, with the flow held fixed. The flow's log-determinant does
/// not depend on the prior, so this is the exact optimum over the prior's
/// parameters.
pub fn calibrate_prior<F: VectorField + ?Sized>(
    field: &F,
    data: &Tensor,
    solver: &SolverConfig,
) -> Result<GaussianPrior> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::Config("cannot fit a prior to no data".into()));
    }
    let x0 = ode::solve_field(field, data, &solver.span(1.0, 0.0))?.state;
    let d = x0.cols();
    let mut mean = alloc::vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x0.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = alloc::vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x0.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let log_std = var
        .iter()
        .map(|s| math::ln(math::sqrt(s / n as f64).max(PRIOR_STD_FLOOR)))
        .collect();
    GaussianPrior::new(mean, log_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::{ConstantField, LinearField};
    use crate::field::{MlpConfig, MlpVectorField};

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    fn dfm_value(a: &Tensor, b: &Tensor, variant: DfmVariant) -> f64 {
        let tape = Tape::new();
        let (a, b) = (tape.leaf(a.clone()).unwrap(), tape.leaf(b.clone()).unwrap());
        cosine_objective(&a, &b, variant).unwrap().value().item()
    }

    #[test]
    fn mle_zero_model_at_mode() {
        let f = MlpVectorField::new(MlpConfig::new(3), 0).unwrap();
        let prior = GaussianPrior::standard(3);
        let tape = Tape::new();
        let pb = prior.bind(&tape).unwrap();
        let loss = mle_loss(
            &tape,
            &f,
            &pb,
            &Tensor::zeros(&[4, 3]),
            &SolverConfig::euler(4),
            &TraceEstimator::Exact,
        )
        .unwrap();
        assert!((loss.value().item() - 3.0 * 0.5 * math::LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn mle_rejects_adaptive_solver() {
        let f = LinearField::scaled_identity(1, 1.0);
        let prior = GaussianPrior::standard(1);
        let tape = Tape::new();
        let pb = prior.bind(&tape).unwrap();
        let err = mle_loss(
            &tape,
            &f,
            &pb,
            &Tensor::zeros(&[1, 1]),
            &SolverConfig::dopri5(1e-3, 1e-3),
            &TraceEstimator::Exact,
        )
        .unwrap_err();
        assert_eq!(err, Error::Config("training requires fixed-step solver".into()));
    }

    #[test]
    fn cfm_perfect_regression_is_zero() {
        // Rectified with x₀ = 0 and x₁ = c everywhere has u = c.
        let path = PathSpec::Rectified;
        let x1 = m(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let x0 = Tensor::zeros(&[2, 2]);
        let batch = cfm_batch(&path, &x1, Some(&x0), &[0.2, 0.7], &Tensor::zeros(&[2, 2])).unwrap();
        let tape = Tape::new();
        let loss = cfm_loss_with(&tape, &ConstantField::new(alloc::vec![1.0, 2.0]), &batch).unwrap();
        assert_eq!(loss.value().item(), 0.0);
    }

    #[test]
    fn cfm_coupled_path_needs_source() {
        let x1 = m(1, 2, &[1.0, 2.0]);
        assert!(cfm_batch(&PathSpec::Rectified, &x1, None, &[0.5], &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn dfm_identical_directions() {
        let a = m(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        assert!(dfm_value(&a, &a, DfmVariant::CosPair).abs() < 1e-15);
    }

    #[test]
    fn dfm_orthogonal_row() {
        let a = m(1, 2, &[1.0, 0.0]);
        let b = m(1, 2, &[0.0, 1.0]);
        assert_eq!(dfm_value(&a, &b, DfmVariant::CosPair), 1.0);
    }

    #[test]
    fn dfm_reciprocal_product() {
        let a = m(1, 1, &[2.0]);
        let b = m(1, 1, &[0.5]);
        assert_eq!(dfm_value(&a, &b, DfmVariant::CosProductOnes), 0.0);
    }

    #[test]
    fn dfm_zero_vectors_use_floor() {
        let z = Tensor::zeros(&[1, 2]);
        let b = m(1, 2, &[1.0, 0.0]);
        assert_eq!(dfm_value(&z, &b, DfmVariant::CosPair), 1.0);
    }

    #[test]
    fn dfm_range() {
        let a = m(1, 2, &[1.0, 1.0]);
        let b = m(1, 2, &[-2.0, -2.0]);
        assert!((dfm_value(&a, &b, DfmVariant::CosPair) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bijectivity_of_zero_models() {
        let z = LinearField::scaled_identity(2, 0.0);
        let x = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bijectivity_residual(&z, &z, &x, &SolverConfig::euler(4)).unwrap(), 0.0);
    }

    #[test]
    fn calibrated_prior_of_identity_flow_is_data_moments() {
        let f = LinearField::scaled_identity(1, 0.0);
        let x = m(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let p = calibrate_prior(&f, &x, &SolverConfig::euler(2)).unwrap();
        assert_eq!(p.mean.value().data(), &[2.5]);
        assert!((p.std()[0] - math::sqrt(1.25)).abs() < 1e-12);
    }
}
