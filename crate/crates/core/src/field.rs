//! Time-conditioned vector fields `v(t, x)` and the learnable Gaussian prior.
//!
//! [`MlpVectorField`] is the trainable network used for both the forward
//! field and the reverse field of a dual flow; the two are built from the same
//! [`MlpConfig`] and differ only in their parameters. Every field can record
//! its evaluation on a [`Tape`] together with a forward-mode tangent, which is
//! how likelihood training differentiates the Jacobian trace with respect to
//! the weights using first-order reverse mode only.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::autodiff::{Gradients, Tape, Var, Variable};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// A map `(t, x) -> dx/dt` on `R^D` that can record itself on a tape.
///
/// `times` holds either one time shared by every row of `x` or one time per
/// row.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var>;

    /// Returns `(v(t, x), J·tangent)` where `J = ∂v/∂x`, both recorded on the
    /// tape so they stay differentiable with respect to any bound parameters.
    fn forward_jvp(&self, tape: &Tape, times: &[f64], x: &Var, tangent: &Var)
        -> Result<(Var, Var)>;

    /// Plain evaluation at a single time.
    fn eval(&self, t: f64, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&tape, &[t], &xv)?;
        let value = out.value();
        Ok((*value).clone())
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
        (**self).forward(tape, times, x)
    }

    fn forward_jvp(
        &self,
        tape: &Tape,
        times: &[f64],
        x: &Var,
        tangent: &Var,
    ) -> Result<(Var, Var)> {
        (**self).forward_jvp(tape, times, x, tangent)
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    const SLACK: f64 = 1e-12;
    if (-SLACK..=1.0 + SLACK).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t })
    }
}

/// Sinusoidal embedding `[sin(2π f_k t), cos(2π f_k t)]` with `f_k = 2^k`.
pub fn time_embed(t: f64, size: usize) -> Result<Tensor> {
    if !size.is_multiple_of(2) {
        return Err(Error::OddEmbedding { dim: size });
    }
    let mut out = Vec::with_capacity(size);
    push_embedding(&mut out, t, size);
    Ok(Tensor::vector(out))
}

fn push_embedding(out: &mut Vec<f64>, t: f64, size: usize) {
    let mut freq = 1.0;
    for _ in 0..size / 2 {
        let angle = 2.0 * PI * freq * t;
        out.push(math::sin(angle));
        out.push(math::cos(angle));
        freq *= 2.0;
    }
}

/// Embeds one time per row (or one shared time) into an `[n, size]` matrix.
fn embed_rows(times: &[f64], rows: usize, size: usize) -> Result<Tensor> {
    if times.len() != 1 && times.len() != rows {
        return Err(Error::Shape {
            op: "time_embed",
            lhs: vec![rows],
            rhs: vec![times.len()],
        });
    }
    for &t in times {
        check_time(t)?;
    }
    let mut data = Vec::with_capacity(rows * size);
    if times.len() == 1 {
        let mut one = Vec::with_capacity(size);
        push_embedding(&mut one, times[0], size);
        for _ in 0..rows {
            data.extend_from_slice(&one);
        }
    } else {
        for &t in times {
            push_embedding(&mut data, t, size);
        }
    }
    Tensor::matrix(rows, size, data)
}

/// Layer layout of an [`MlpVectorField`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    /// Multiplier on the output layer's initial weights. Zero starts the
    /// flow at the identity map.
    pub final_init_scale: f64,
}

impl MlpConfig {
    /// Widths `[D+8, 64, 64, D]` with a zero output layer.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: vec![64, 64],
            time_embed: 8,
            final_init_scale: 0.0,
        }
    }

    /// `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim + self.time_embed];
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        if !self.time_embed.is_multiple_of(2) {
            return Err(Error::OddEmbedding {
                dim: self.time_embed,
            });
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !self.final_init_scale.is_finite() {
            return Err(Error::Config("final_init_scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Variable,
    pub bias: Variable,
}

/// Tanh MLP on `[x, embed(t)]` producing a vector in `R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpVectorField {
    config: MlpConfig,
    layers: Vec<Linear>,
}

/// Parameters of an [`MlpVectorField`] bound onto a tape.
pub struct MlpBinding {
    dim: usize,
    time_embed: usize,
    layers: Vec<(Var, Var)>,
}

impl MlpVectorField {
    /// Weights uniform in `±sqrt(3 / fan_in)`, biases zero; the output layer
    /// is further scaled by `final_init_scale`.
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let widths = config.widths();
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = math::sqrt(3.0 / fan_in as f64);
                let scale = if i + 1 == n_layers {
                    config.final_init_scale
                } else {
                    1.0
                };
                let data = (0..fan_in * fan_out)
                    .map(|_| scale * rng::uniform_range(&mut rng, -bound, bound))
                    .collect();
                Linear {
                    weight: Variable::new(Tensor::matrix(fan_in, fan_out, data).unwrap()),
                    bias: Variable::new(Tensor::zeros(&[fan_out])),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn bind(&self, tape: &Tape) -> Result<MlpBinding> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((tape.param(&l.weight)?, tape.param(&l.bias)?)))
            .collect::<Result<_>>()?;
        Ok(MlpBinding {
            dim: self.config.dim,
            time_embed: self.config.time_embed,
            layers,
        })
    }

    fn bind_frozen(&self, tape: &Tape) -> Result<MlpBinding> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok((
                    tape.constant(l.weight.value().clone())?,
                    tape.constant(l.bias.value().clone())?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MlpBinding {
            dim: self.config.dim,
            time_embed: self.config.time_embed,
            layers,
        })
    }

    pub fn accumulate_grads(&mut self, binding: &MlpBinding, grads: &Gradients) -> Result<()> {
        for (layer, (w, b)) in self.layers.iter_mut().zip(&binding.layers) {
            grads.accumulate_into(w, &mut layer.weight)?;
            grads.accumulate_into(b, &mut layer.bias)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Variable> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// `("layers.{i}.weight", ..)`, `("layers.{i}.bias", ..)` in layer order.
    pub fn named_parameters(&self) -> Vec<(String, &Variable)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layers.{i}.weight"), &l.weight),
                    (format!("layers.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Replaces a parameter by name; the shape must match the layout.
    pub fn set_parameter(&mut self, name: &str, value: Tensor) -> Result<()> {
        let target = self
            .layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layers.{i}.weight"), &mut l.weight),
                    (format!("layers.{i}.bias"), &mut l.bias),
                ]
            })
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        target.set_value(value)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.value().len() + l.bias.value().len())
            .sum()
    }
}

impl MlpBinding {
    fn input(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != self.dim {
            return Err(Error::Shape {
                op: "eval_field",
                lhs: vec![self.dim],
                rhs: xs,
            });
        }
        let emb = tape.constant(embed_rows(times, xs[0], self.time_embed)?)?;
        if self.time_embed == 0 {
            Ok(x.clone())
        } else {
            x.concat(&emb)
        }
    }

    pub fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
        let mut h = self.input(tape, times, x)?;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.affine(w, b)?;
            if i < last {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    pub fn forward_jvp(
        &self,
        tape: &Tape,
        times: &[f64],
        x: &Var,
        tangent: &Var,
    ) -> Result<(Var, Var)> {
        if tangent.shape() != x.shape() {
            return Err(Error::Shape {
                op: "forward_jvp",
                lhs: x.shape(),
                rhs: tangent.shape(),
            });
        }
        let mut h = self.input(tape, times, x)?;
        let last = self.layers.len() - 1;
        let mut dh: Option<Var> = None;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            // The time embedding carries no tangent, so the first layer only
            // sees the x-rows of its weight.
            let dpre = match &dh {
                None => tangent.matmul(&w.slice_rows(0, self.dim)?)?,
                Some(d) => d.matmul(w)?,
            };
            h = h.affine(w, b)?;
            if i < last {
                h = h.tanh()?;
                let deriv = h.square()?.scale(-1.0)?.add_scalar(1.0)?;
                dh = Some(deriv.mul(&dpre)?);
            } else {
                dh = Some(dpre);
            }
        }
        Ok((h, dh.expect("at least one layer")))
    }
}

impl VectorField for MlpVectorField {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
        self.bind_frozen(tape)?.forward(tape, times, x)
    }

    fn forward_jvp(
        &self,
        tape: &Tape,
        times: &[f64],
        x: &Var,
        tangent: &Var,
    ) -> Result<(Var, Var)> {
        self.bind_frozen(tape)?.forward_jvp(tape, times, x, tangent)
    }
}

/// A model bound to a tape, usable wherever a [`VectorField`] is expected.
pub struct Bound<'a> {
    pub binding: &'a MlpBinding,
}

impl VectorField for Bound<'_> {
    fn dim(&self) -> usize {
        self.binding.dim
    }

    fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
        self.binding.forward(tape, times, x)
    }

    fn forward_jvp(
        &self,
        tape: &Tape,
        times: &[f64],
        x: &Var,
        tangent: &Var,
    ) -> Result<(Var, Var)> {
        self.binding.forward_jvp(tape, times, x, tangent)
    }
}

/// Diagonal Gaussian `N(μ, σ² I)` parameterized by `μ` and `log σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    pub mean: Variable,
    pub log_std: Variable,
}

pub struct PriorBinding {
    mean: Var,
    log_std: Var,
}

impl GaussianPrior {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Variable::new(Tensor::zeros(&[dim])),
            log_std: Variable::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::Shape {
                op: "prior",
                lhs: vec![mean.len()],
                rhs: vec![log_std.len()],
            });
        }
        Ok(Self {
            mean: Variable::new(Tensor::vector(mean)),
            log_std: Variable::new(Tensor::vector(log_std)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.value().len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.value().data().iter().map(|&l| math::exp(l)).collect()
    }

    /// Per-row `Σ_d [−½ log 2π − log σ_d − (x_d − μ_d)² / (2σ_d²)]`.
    pub fn log_pdf(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if x.ndim() != 2 || x.cols() != d {
            return Err(Error::Shape {
                op: "prior_log_pdf",
                lhs: vec![d],
                rhs: x.shape().to_vec(),
            });
        }
        let mu = self.mean.value().data();
        let ls = self.log_std.value().data();
        let norm: f64 = -0.5 * d as f64 * math::LN_2PI - ls.iter().sum::<f64>();
        let out = (0..x.rows())
            .map(|r| {
                let quad: f64 = x
                    .row(r)
                    .iter()
                    .zip(mu.iter().zip(ls))
                    .map(|(&xi, (&m, &l))| {
                        let z = (xi - m) * math::exp(-l);
                        z * z
                    })
                    .sum();
                norm - 0.5 * quad
            })
            .collect();
        Ok(Tensor::vector(out))
    }

    /// `μ + σ ⊙ ε` with standard normal `ε`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor {
        let d = self.dim();
        let mu = self.mean.value().data();
        let sd = self.std();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                data.push(mu[j] + sd[j] * rng::normal(rng));
            }
        }
        Tensor::matrix(n, d, data).expect("sample shape")
    }

    pub fn sample_seeded(&self, n: usize, seed: u64) -> Tensor {
        self.sample(n, &mut rng::seeded(seed))
    }

    pub fn bind(&self, tape: &Tape) -> Result<PriorBinding> {
        Ok(PriorBinding {
            mean: tape.param(&self.mean)?,
            log_std: tape.param(&self.log_std)?,
        })
    }

    pub fn accumulate_grads(&mut self, binding: &PriorBinding, grads: &Gradients) -> Result<()> {
        grads.accumulate_into(&binding.mean, &mut self.mean)?;
        grads.accumulate_into(&binding.log_std, &mut self.log_std)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Variable> {
        vec![&mut self.mean, &mut self.log_std]
    }

    pub fn zero_grads(&mut self) {
        self.mean.zero_grad();
        self.log_std.zero_grad();
    }
}

impl PriorBinding {
    /// Differentiable counterpart of [`GaussianPrior::log_pdf`].
    pub fn log_pdf(&self, x: &Var) -> Result<Var> {
        let d = self.mean.shape()[0] as f64;
        let inv_std = self.log_std.neg()?.exp()?;
        let z = x.sub(&self.mean)?.mul(&inv_std)?;
        let quad = z.square()?.sum_rows()?.scale(-0.5)?;
        let norm = self.log_std.sum()?.neg()?.add_scalar(-0.5 * d * math::LN_2PI)?;
        quad.add(&norm)
    }
}

/// Closed-form fields for oracles and tests.
pub mod analytic {
    use super::*;

    /// `v(t, x) = A x`, independent of time.
    #[derive(Debug, Clone)]
    pub struct LinearField {
        /// Stored transposed so a batch evaluates as `X Aᵀ`.
        a_t: Tensor,
    }

    impl LinearField {
        pub fn new(a: &Tensor) -> Result<Self> {
            if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
                return Err(Error::Shape {
                    op: "linear_field",
                    lhs: a.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let d = a.shape()[0];
            let mut t = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    t[j * d + i] = a.at(i, j);
                }
            }
            Ok(Self {
                a_t: Tensor::matrix(d, d, t)?,
            })
        }

        /// `v = a·x` in `dim` dimensions.
        pub fn scaled_identity(dim: usize, a: f64) -> Self {
            let mut m = vec![0.0; dim * dim];
            for i in 0..dim {
                m[i * dim + i] = a;
            }
            Self {
                a_t: Tensor::matrix(dim, dim, m).unwrap(),
            }
        }

        pub fn trace(&self) -> f64 {
            let d = self.a_t.rows();
            (0..d).map(|i| self.a_t.at(i, i)).sum()
        }
    }

    impl VectorField for LinearField {
        fn dim(&self) -> usize {
            self.a_t.rows()
        }

        fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
            times.iter().try_for_each(|&t| check_time(t))?;
            x.matmul(&tape.constant(self.a_t.clone())?)
        }

        fn forward_jvp(
            &self,
            tape: &Tape,
            times: &[f64],
            x: &Var,
            tangent: &Var,
        ) -> Result<(Var, Var)> {
            let a = tape.constant(self.a_t.clone())?;
            times.iter().try_for_each(|&t| check_time(t))?;
            Ok((x.matmul(&a)?, tangent.matmul(&a)?))
        }
    }

    /// `v(t, x) = c`, the same vector at every point.
    #[derive(Debug, Clone)]
    pub struct ConstantField {
        value: Tensor,
    }

    impl ConstantField {
        pub fn new(value: Vec<f64>) -> Self {
            Self {
                value: Tensor::vector(value),
            }
        }
    }

    impl VectorField for ConstantField {
        fn dim(&self) -> usize {
            self.value.len()
        }

        fn forward(&self, tape: &Tape, times: &[f64], x: &Var) -> Result<Var> {
            times.iter().try_for_each(|&t| check_time(t))?;
            let c = tape.constant(self.value.clone())?;
            // x·0 + c keeps the batch shape and the dependency on x.
            x.scale(0.0)?.add(&c)
        }

        fn forward_jvp(
            &self,
            tape: &Tape,
            times: &[f64],
            x: &Var,
            tangent: &Var,
        ) -> Result<(Var, Var)> {
            Ok((self.forward(tape, times, x)?, tangent.scale(0.0)?))
        }
    }
}
