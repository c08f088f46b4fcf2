//! Divergence `Tr(∂v/∂x)` of a vector field, exactly or by Hutchinson's
//! estimator `E[εᵀ J ε] = Tr(J)`.
//!
//! Evaluation-time estimates use vector-Jacobian products on a throwaway
//! tape: one forward pass, then one seeded pullback per basis vector or
//! probe. [`taped_trace`] instead records Jacobian-vector products on the
//! caller's tape so the trace stays differentiable in the model weights.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Largest dimension for which [`exact_trace`] runs `D` pullbacks.
pub const EXACT_TRACE_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceEstimator {
    Exact,
    Hutchinson {
        probes: usize,
        dist: ProbeDist,
        seed: u64,
    },
}

impl TraceEstimator {
    /// One Rademacher probe.
    pub fn hutchinson(seed: u64) -> Self {
        Self::Hutchinson {
            probes: 1,
            dist: ProbeDist::Rademacher,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Hutchinson { probes: 0, .. } => {
                Err(Error::Config("hutchinson needs at least one probe".into()))
            }
            _ => Ok(()),
        }
    }
}

/// How a single field evaluation should estimate the trace.
#[derive(Debug, Clone, Copy)]
pub enum TraceMode<'a> {
    Exact,
    Probes(&'a [Tensor]),
}

pub fn sample_probe(dist: ProbeDist, shape: &[usize], rng: &mut Rng) -> Tensor {
    match dist {
        ProbeDist::Gaussian => rng::normal_tensor(rng, shape),
        ProbeDist::Rademacher => {
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng::rademacher(rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("probe shape")
        }
    }
}

pub fn sample_probes(dist: ProbeDist, count: usize, shape: &[usize], rng: &mut Rng) -> Vec<Tensor> {
    (0..count).map(|_| sample_probe(dist, shape, rng)).collect()
}

fn row_dot(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
        .collect()
}

fn check_exact_dim(d: usize) -> Result<()> {
    if d > EXACT_TRACE_LIMIT {
        Err(Error::TraceDimension {
            dim: d,
            limit: EXACT_TRACE_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// Evaluates `v(t, x)` and its per-row trace from a single forward pass.
pub fn field_and_trace<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    x: &Tensor,
    mode: TraceMode<'_>,
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let v = field.forward(&tape, &[t], &xv)?;
    let n = x.rows();
    let d = x.cols();
    let mut trace = vec![0.0; n];
    match mode {
        TraceMode::Exact => {
            check_exact_dim(d)?;
            for j in 0..d {
                let mut seed = Tensor::zeros(x.shape());
                for r in 0..n {
                    seed.row_mut(r)[j] = 1.0;
                }
                let g = tape.pullback(&v, &seed)?.get_or_zeros(&xv);
                for (r, tr) in trace.iter_mut().enumerate() {
                    *tr += g.row(r)[j];
                }
            }
        }
        TraceMode::Probes(probes) => {
            for eps in probes {
                let g = tape.pullback(&v, eps)?.get_or_zeros(&xv);
                for (tr, q) in trace.iter_mut().zip(row_dot(&g, eps)) {
                    *tr += q;
                }
            }
            let k = probes.len() as f64;
            trace.iter_mut().for_each(|tr| *tr /= k);
        }
    }
    let value = (*v.value()).clone();
    Ok((value, Tensor::vector(trace)))
}

/// `Σ_d e_dᵀ J e_d` via `D` basis-vector pullbacks.
pub fn exact_trace<F: VectorField + ?Sized>(field: &F, t: f64, x: &Tensor) -> Result<Tensor> {
    Ok(field_and_trace(field, t, x, TraceMode::Exact)?.1)
}

/// Per-probe Hutchinson estimates `εᵀ J ε`, one tensor of row values per
/// probe.
pub fn hutchinson_samples<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    x: &Tensor,
    probes: &[Tensor],
) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let v = field.forward(&tape, &[t], &xv)?;
    probes
        .iter()
        .map(|eps| {
            let g = tape.pullback(&v, eps)?.get_or_zeros(&xv);
            Ok(Tensor::vector(row_dot(&g, eps)))
        })
        .collect()
}

/// Mean over `probes` draws of `εᵀ J ε`, reproducible per seed.
pub fn hutchinson_trace<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    x: &Tensor,
    probes: usize,
    dist: ProbeDist,
    seed: u64,
) -> Result<Tensor> {
    if probes == 0 {
        return Err(Error::Config("hutchinson needs at least one probe".into()));
    }
    let mut rng = rng::seeded(seed);
    let eps = sample_probes(dist, probes, x.shape(), &mut rng);
    Ok(field_and_trace(field, t, x, TraceMode::Probes(&eps))?.1)
}

/// Trace through the configured estimator.
pub fn estimate_trace<F: VectorField + ?Sized>(
    field: &F,
    t: f64,
    x: &Tensor,
    est: &TraceEstimator,
) -> Result<Tensor> {
    match *est {
        TraceEstimator::Exact => exact_trace(field, t, x),
        TraceEstimator::Hutchinson { probes, dist, seed } => {
            hutchinson_trace(field, t, x, probes, dist, seed)
        }
    }
}

/// Differentiable `(v(t, x), Tr J)` recorded on `tape` through
/// Jacobian-vector products.
pub fn taped_trace<F: VectorField + ?Sized>(
    field: &F,
    tape: &Tape,
    times: &[f64],
    x: &Var,
    mode: TraceMode<'_>,
) -> Result<(Var, Var)> {
    let shape = x.shape();
    let (n, d) = (shape[0], shape[1]);
    let mut value: Option<Var> = None;
    let mut total: Option<Var> = None;
    let mut add = |term: Var| -> Result<()> {
        total = Some(match total.take() {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
        Ok(())
    };
    match mode {
        TraceMode::Exact => {
            check_exact_dim(d)?;
            for j in 0..d {
                let mut basis = Tensor::zeros(&shape);
                for r in 0..n {
                    basis.row_mut(r)[j] = 1.0;
                }
                let e = tape.constant(basis)?;
                let (v, jv) = field.forward_jvp(tape, times, x, &e)?;
                add(jv.slice_cols(j, j + 1)?.sum_rows()?)?;
                value.get_or_insert(v);
            }
        }
        TraceMode::Probes(probes) => {
            for eps in probes {
                let e = tape.constant(eps.clone())?;
                let (v, jv) = field.forward_jvp(tape, times, x, &e)?;
                add(jv.mul(&e)?.sum_rows()?.scale(1.0 / probes.len() as f64)?)?;
                value.get_or_insert(v);
            }
        }
    }
    match (value, total) {
        (Some(v), Some(tr)) => Ok((v, tr)),
        _ => Err(Error::Config("trace estimate needs at least one probe".into())),
    }
}
