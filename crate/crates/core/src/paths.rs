//! Gaussian conditional probability paths `p_t(x | z) = N(μ_t(z), σ_t² I)`
//! and their conditional vector fields.
//!
//! | path       | q(z)          | μ_t(z)                          | σ_t           |
//! |------------|---------------|---------------------------------|---------------|
//! | FM         | q(x₁)         | t x₁                            | t σ_min − t + 1 |
//! | Rectified  | q(x₀) q(x₁)   | t x₁ + (1 − t) x₀               | 0             |
//! | VP (trig)  | q(x₀) q(x₁)   | cos(πt/2) x₀ + sin(πt/2) x₁     | 0             |
//! | I-CFM      | q(x₀) q(x₁)   | t x₁ + (1 − t) x₀               | σ             |

use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::field::check_time;
use crate::math;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathSpec {
    /// Conditioned on the data point only; starts from `N(0, I)`.
    Fm { sigma_min: f64 },
    Rectified,
    VpTrig,
    Icfm { sigma: f64 },
}

/// Conditioning vector `z`: the data point, plus the source point for paths
/// that couple both ends.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub x0: Option<&'a [f64]>,
    pub x1: &'a [f64],
}

impl<'a> Conditioning<'a> {
    pub fn data(x1: &'a [f64]) -> Self {
        Self { x0: None, x1 }
    }

    pub fn pair(x0: &'a [f64], x1: &'a [f64]) -> Self {
        Self { x0: Some(x0), x1 }
    }
}

/// Mean and scale of the path at one time, with time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub dmu: Vec<f64>,
    pub dsigma: f64,
}

impl PathSpec {
    pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
    pub const DEFAULT_ICFM_SIGMA: f64 = 0.1;

    pub fn fm() -> Self {
        Self::Fm {
            sigma_min: Self::DEFAULT_SIGMA_MIN,
        }
    }

    pub fn icfm() -> Self {
        Self::Icfm {
            sigma: Self::DEFAULT_ICFM_SIGMA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fm { .. } => "fm",
            Self::Rectified => "rectified",
            Self::VpTrig => "vptrig",
            Self::Icfm { .. } => "icfm",
        }
    }

    /// Whether `z` includes a source point `x₀`.
    pub fn couples_source(&self) -> bool {
        !matches!(self, Self::Fm { .. })
    }

    /// True when `σ_t = 0` for every `t`.
    pub fn zero_variance(&self) -> bool {
        match self {
            Self::Fm { .. } => false,
            Self::Rectified | Self::VpTrig => true,
            Self::Icfm { sigma } => *sigma == 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fm { sigma_min } if !(0.0..1.0).contains(&sigma_min) => Err(Error::Config(
                alloc::format!("fm sigma_min must lie in [0, 1), got {sigma_min}"),
            )),
            Self::Icfm { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(Error::Config(
                alloc::format!("icfm sigma must be non-negative, got {sigma}"),
            )),
            _ => Ok(()),
        }
    }

    /// Largest `t` the training sampler may draw: FM with `σ_min = 0`
    /// collapses at `t = 1`.
    pub fn t_max(&self) -> f64 {
        match self {
            Self::Fm { sigma_min } if *sigma_min == 0.0 => 1.0 - 1e-6,
            _ => 1.0,
        }
    }

    pub fn mu_sigma(&self, t: f64, z: Conditioning<'_>) -> Result<PathPoint> {
        check_time(t)?;
        let x1 = z.x1;
        let x0 = || -> Result<&[f64]> {
            let x0 = z.x0.ok_or_else(|| {
                Error::Config(alloc::format!("{} path needs a source point", self.name()))
            })?;
            if x0.len() != x1.len() {
                return Err(Error::Shape {
                    op: "mu_sigma",
                    lhs: alloc::vec![x1.len()],
                    rhs: alloc::vec![x0.len()],
                });
            }
            Ok(x0)
        };
        let point = match *self {
            Self::Fm { sigma_min } => PathPoint {
                mu: x1.iter().map(|v| t * v).collect(),
                sigma: t * sigma_min - t + 1.0,
                dmu: x1.to_vec(),
                dsigma: sigma_min - 1.0,
            },
            Self::Rectified | Self::Icfm { .. } => {
                let x0 = x0()?;
                let sigma = match *self {
                    Self::Icfm { sigma } => sigma,
                    _ => 0.0,
                };
                PathPoint {
                    mu: x0.iter().zip(x1).map(|(a, b)| t * b + (1.0 - t) * a).collect(),
                    sigma,
                    dmu: x0.iter().zip(x1).map(|(a, b)| b - a).collect(),
                    dsigma: 0.0,
                }
            }
            Self::VpTrig => {
                let x0 = x0()?;
                let (c, s) = (math::cos(FRAC_PI_2 * t), math::sin(FRAC_PI_2 * t));
                PathPoint {
                    mu: x0.iter().zip(x1).map(|(a, b)| c * a + s * b).collect(),
                    sigma: 0.0,
                    dmu: x0
                        .iter()
                        .zip(x1)
                        .map(|(a, b)| FRAC_PI_2 * (c * b - s * a))
                        .collect(),
                    dsigma: 0.0,
                }
            }
        };
        Ok(point)
    }

    /// `x_t = μ_t(z) + σ_t ε` for a given standard-normal `ε`.
    pub fn sample_xt_with(&self, t: f64, z: Conditioning<'_>, eps: &[f64]) -> Result<Vec<f64>> {
        let p = self.mu_sigma(t, z)?;
        if eps.len() != p.mu.len() {
            return Err(Error::Shape {
                op: "sample_xt",
                lhs: alloc::vec![p.mu.len()],
                rhs: alloc::vec![eps.len()],
            });
        }
        Ok(p.mu.iter().zip(eps).map(|(m, e)| m + p.sigma * e).collect())
    }

    pub fn sample_xt(&self, t: f64, z: Conditioning<'_>, rng: &mut Rng) -> Result<Vec<f64>> {
        let eps: Vec<f64> = (0..z.x1.len()).map(|_| rng::normal(rng)).collect();
        self.sample_xt_with(t, z, &eps)
    }

    /// `u_t(x | z) = (x − μ_t) σ'_t / σ_t + μ'_t`; paths with `σ ≡ 0` use
    /// `u = μ'_t`.
    pub fn cond_vector_field(&self, t: f64, x: &[f64], z: Conditioning<'_>) -> Result<Vec<f64>> {
        let p = self.mu_sigma(t, z)?;
        if x.len() != p.mu.len() {
            return Err(Error::Shape {
                op: "cond_vector_field",
                lhs: alloc::vec![p.mu.len()],
                rhs: alloc::vec![x.len()],
            });
        }
        if self.zero_variance() || p.dsigma == 0.0 {
            return Ok(p.dmu);
        }
        if p.sigma == 0.0 {
            return Err(Error::DegenerateSigma { t });
        }
        let ratio = p.dsigma / p.sigma;
        Ok(x.iter()
            .zip(p.mu.iter().zip(&p.dmu))
            .map(|(xi, (m, dm))| (xi - m) * ratio + dm)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fm_endpoint_without_noise() {
        let x1 = [3.0, -1.0];
        let p = PathSpec::Fm { sigma_min: 0.0 }
            .mu_sigma(1.0, Conditioning::data(&x1))
            .unwrap();
        assert_eq!(p.mu, x1.to_vec());
        assert_eq!(p.sigma, 0.0);
    }

    #[test]
    fn fm_start_is_standard_normal() {
        let x1 = [3.0, -1.0];
        let p = PathSpec::Fm { sigma_min: 0.0 }
            .mu_sigma(0.0, Conditioning::data(&x1))
            .unwrap();
        assert_eq!(p.mu, vec![0.0, 0.0]);
        assert_eq!(p.sigma, 1.0);
    }

    #[test]
    fn rectified_midpoint() {
        let (x0, x1) = ([0.0, 0.0], [2.0, 4.0]);
        let p = PathSpec::Rectified
            .mu_sigma(0.5, Conditioning::pair(&x0, &x1))
            .unwrap();
        assert_eq!(p.mu, vec![1.0, 2.0]);
        assert_eq!(p.sigma, 0.0);
    }

    #[test]
    fn vptrig_endpoints() {
        let (x0, x1) = ([1.0, -2.0], [5.0, 7.0]);
        let z = Conditioning::pair(&x0, &x1);
        let p0 = PathSpec::VpTrig.mu_sigma(0.0, z).unwrap();
        let p1 = PathSpec::VpTrig.mu_sigma(1.0, z).unwrap();
        assert_eq!(p0.mu, x0.to_vec());
        for (a, b) in p1.mu.iter().zip(&x1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_variance_sample_is_mean() {
        let (x0, x1) = ([0.5, 0.5], [1.0, 3.0]);
        let z = Conditioning::pair(&x0, &x1);
        let xt = PathSpec::Rectified.sample_xt(0.3, z, &mut rng::seeded(1)).unwrap();
        let mu = PathSpec::Rectified.mu_sigma(0.3, z).unwrap().mu;
        assert_eq!(xt, mu);
    }

    #[test]
    fn rectified_field_is_displacement() {
        let (x0, x1) = ([0.0, 0.0], [1.0, 2.0]);
        for t in [0.0, 0.25, 0.9, 1.0] {
            let u = PathSpec::Rectified
                .cond_vector_field(t, &[7.0, -3.0], Conditioning::pair(&x0, &x1))
                .unwrap();
            assert_eq!(u, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn fm_field_at_start() {
        let u = PathSpec::Fm { sigma_min: 0.0 }
            .cond_vector_field(0.0, &[1.0, 0.0], Conditioning::data(&[3.0, 0.0]))
            .unwrap();
        assert_eq!(u, vec![2.0, 0.0]);
    }

    #[test]
    fn icfm_field_ignores_position() {
        let (x0, x1) = ([0.5, -1.0], [2.0, 2.0]);
        let path = PathSpec::Icfm { sigma: 0.1 };
        let u = path
            .cond_vector_field(0.6, &[100.0, -40.0], Conditioning::pair(&x0, &x1))
            .unwrap();
        assert_eq!(u, vec![1.5, 3.0]);
    }

    #[test]
    fn fm_collapse_at_one_rejected() {
        let err = PathSpec::Fm { sigma_min: 0.0 }
            .cond_vector_field(1.0, &[1.0], Conditioning::data(&[1.0]))
            .unwrap_err();
        assert_eq!(err, Error::DegenerateSigma { t: 1.0 });
    }

    #[test]
    fn time_outside_interval_rejected() {
        let err = PathSpec::Rectified
            .mu_sigma(1.2, Conditioning::pair(&[0.0], &[1.0]))
            .unwrap_err();
        assert_eq!(err, Error::TimeOutOfRange { t: 1.2 });
    }

    #[test]
    fn coupled_paths_need_source() {
        assert!(PathSpec::icfm().mu_sigma(0.5, Conditioning::data(&[1.0])).is_err());
    }

    #[test]
    fn icfm_sample_spread() {
        let (x0, x1) = ([0.0], [1.0]);
        let path = PathSpec::Icfm { sigma: 0.1 };
        let mut rng = rng::seeded(4);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| path.sample_xt(0.4, Conditioning::pair(&x0, &x1), &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        assert!((math::sqrt(var) - 0.1).abs() < 0.002);
    }
}
