//! Minibatch Adam optimization of one objective over an in-memory dataset.

use alloc::vec::Vec;

use crate::anomaly::Strategy;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::field::{Bound, GaussianPrior, MlpConfig, MlpVectorField};
use crate::objectives::{self, DfmVariant};
use crate::ode::SolverConfig;
use crate::optim::{Adam, AdamConfig};
use crate::paths::PathSpec;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::trace::TraceEstimator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Mle,
    Cfm(PathSpec),
    Dfm(DfmVariant),
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mle => "mle",
            Self::Cfm(p) => p.name(),
            Self::Dfm(_) => "dfm",
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, Self::Dfm(_))
    }
}

/// Output-layer scale used for DFM when none is given. The cosine loss has
/// a stationary point at the all-zero field, so DFM cannot start from the
/// identity flow.
pub const DFM_FINAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub model: MlpConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fixed-step solver for the MLE objective.
    pub train_solver: SolverConfig,
    /// Trace estimator for the MLE objective.
    pub trace: TraceEstimator,
    /// Refit the prior to the pulled-back training data after training
    /// (flow-matching objectives only; MLE learns its prior by gradient).
    pub calibrate_prior: Option<SolverConfig>,
    /// Field used to pull data back for density estimation.
    pub strategy: Strategy,
}

impl TrainConfig {
    pub fn new(objective: Objective, dim: usize) -> Self {
        let mut model = MlpConfig::new(dim);
        if objective.is_dual() {
            model.final_init_scale = DFM_FINAL_INIT_SCALE;
        }
        Self {
            objective,
            model,
            steps: 2000,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            train_solver: SolverConfig::euler(4),
            trace: TraceEstimator::hutchinson(0),
            calibrate_prior: match objective {
                Objective::Mle => None,
                _ => Some(SolverConfig::euler(4)),
            },
            strategy: if objective.is_dual() {
                Strategy::ReverseModel
            } else {
                Strategy::ForwardModel
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        self.trace.validate()?;
        if let Objective::Cfm(p) = self.objective {
            p.validate()?;
        }
        if self.objective == Objective::Mle && !self.train_solver.is_fixed_step() {
            return Err(Error::Config("training requires fixed-step solver".into()));
        }
        self.train_solver.validate()?;
        if let Some(s) = &self.calibrate_prior {
            s.validate()?;
        }
        if self.strategy == Strategy::ReverseModel && !self.objective.is_dual() {
            return Err(Error::Config(
                "the reverse-model strategy needs a dual objective".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub theta: MlpVectorField,
    pub lambda: Option<MlpVectorField>,
    pub prior: GaussianPrior,
    pub optimizer: Adam,
    pub step: usize,
    pub losses: Vec<f64>,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let theta = MlpVectorField::new(config.model.clone(), config.seed)?;
        let lambda = if config.objective.is_dual() {
            Some(MlpVectorField::new(config.model.clone(), config.seed.wrapping_add(1))?)
        } else {
            None
        };
        Ok(Self {
            prior: GaussianPrior::standard(config.model.dim),
            optimizer: Adam::new(config.adam),
            rng: rng::seeded(config.seed.wrapping_add(2)),
            step: 0,
            losses: Vec::new(),
            theta,
            lambda,
            config,
        })
    }

    /// The field that defines densities under the configured strategy.
    pub fn density_field(&self) -> &MlpVectorField {
        match (self.config.strategy, &self.lambda) {
            (Strategy::ReverseModel, Some(l)) => l,
            _ => &self.theta,
        }
    }

    fn minibatch(&mut self, data: &Tensor) -> Tensor {
        let n = data.rows();
        let idx: Vec<usize> = (0..self.config.batch_size)
            .map(|_| rng::index(&mut self.rng, n))
            .collect();
        data.select_rows(&idx)
    }

    /// One optimizer step on a fresh minibatch; returns the loss.
    pub fn step(&mut self, data: &Tensor) -> Result<f64> {
        if data.ndim() != 2 || data.rows() == 0 || data.cols() != self.config.model.dim {
            return Err(Error::Shape {
                op: "train",
                lhs: alloc::vec![self.config.model.dim],
                rhs: data.shape().to_vec(),
            });
        }
        let step = self.step;
        let loss = self.try_step(data).map_err(|e| match e {
            Error::NonFinite { .. } | Error::FieldNotFinite { .. } => Error::NonFiniteLoss { step },
            e => e,
        })?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    fn try_step(&mut self, data: &Tensor) -> Result<f64> {
        let x = self.minibatch(data);
        let tape = Tape::new();
        let theta_b = self.theta.bind(&tape)?;
        let theta_f = Bound { binding: &theta_b };
        self.theta.zero_grads();
        match self.config.objective {
            Objective::Mle => {
                self.prior.zero_grads();
                let prior_b = self.prior.bind(&tape)?;
                let trace = match self.config.trace {
                    TraceEstimator::Hutchinson { probes, dist, .. } => TraceEstimator::Hutchinson {
                        probes,
                        dist,
                        seed: rng::next_seed(&mut self.rng),
                    },
                    t => t,
                };
                let loss = objectives::mle_loss(
                    &tape,
                    &theta_f,
                    &prior_b,
                    &x,
                    &self.config.train_solver,
                    &trace,
                )?;
                let value = finite_loss(loss.value().item(), self.step)?;
                let grads = tape.backward(&loss)?;
                self.theta.accumulate_grads(&theta_b, &grads)?;
                self.prior.accumulate_grads(&prior_b, &grads)?;
                let mut params = self.theta.parameters_mut();
                params.extend(self.prior.parameters_mut());
                self.optimizer.update(params)?;
                Ok(value)
            }
            Objective::Cfm(path) => {
                let loss = objectives::cfm_loss(&tape, &theta_f, &path, &x, &mut self.rng)?;
                let value = finite_loss(loss.value().item(), self.step)?;
                let grads = tape.backward(&loss)?;
                self.theta.accumulate_grads(&theta_b, &grads)?;
                self.optimizer.update(self.theta.parameters_mut())?;
                Ok(value)
            }
            Objective::Dfm(variant) => {
                let lambda = self.lambda.as_mut().expect("dual objective has a reverse model");
                lambda.zero_grads();
                let lambda_b = lambda.bind(&tape)?;
                let lambda_f = Bound { binding: &lambda_b };
                let n = x.rows();
                let y = self.prior.sample(n, &mut self.rng);
                let times: Vec<f64> = (0..n).map(|_| rng::uniform(&mut self.rng)).collect();
                let loss =
                    objectives::dfm_loss(&tape, &theta_f, &lambda_f, &x, &y, &times, variant)?;
                let value = finite_loss(loss.value().item(), self.step)?;
                let grads = tape.backward(&loss)?;
                self.theta.accumulate_grads(&theta_b, &grads)?;
                lambda.accumulate_grads(&lambda_b, &grads)?;
                let mut params = self.theta.parameters_mut();
                params.extend(lambda.parameters_mut());
                self.optimizer.update(params)?;
                Ok(value)
            }
        }
    }

    /// Post-training prior refit, when configured.
    pub fn finish(&mut self, data: &Tensor) -> Result<()> {
        if let Some(solver) = self.config.calibrate_prior {
            self.prior = objectives::calibrate_prior(self.density_field(), data, &solver)?;
        }
        Ok(())
    }
}

fn finite_loss(value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Runs `config.steps` optimizer steps and the prior refit, reporting each
/// step's loss to `on_step`.
pub fn train_with(
    config: TrainConfig,
    data: &Tensor,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    for _ in 0..state.config.steps {
        let loss = state.step(data)?;
        on_step(state.step - 1, loss);
    }
    state.finish(data)?;
    Ok(state)
}

pub fn train(config: TrainConfig, data: &Tensor) -> Result<TrainState> {
    train_with(config, data, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_data(n: usize, shift: f64) -> Tensor {
        let mut r = rng::seeded(5);
        rng::normal_tensor(&mut r, &[n, 1]).map(|v| 0.5 * v + shift)
    }

    fn small(objective: Objective) -> TrainConfig {
        let mut cfg = TrainConfig::new(objective, 1);
        cfg.model.hidden = alloc::vec![16];
        cfg.batch_size = 32;
        cfg.steps = 5;
        cfg
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = small(Objective::Cfm(PathSpec::icfm()));
        cfg.adam.lr = 0.0;
        let data = gaussian_data(64, 1.0);
        let init = MlpVectorField::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut cfg_nc = cfg.clone();
        cfg_nc.calibrate_prior = None;
        let st = train(cfg_nc, &data).unwrap();
        for ((_, a), (_, b)) in st.theta.named_parameters().iter().zip(init.named_parameters()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn same_seed_same_history() {
        let data = gaussian_data(64, 1.0);
        for obj in [
            Objective::Mle,
            Objective::Cfm(PathSpec::fm()),
            Objective::Dfm(DfmVariant::CosPair),
        ] {
            let a = train(small(obj), &data).unwrap();
            let b = train(small(obj), &data).unwrap();
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.theta, b.theta);
        }
    }

    #[test]
    fn mle_with_adaptive_solver_rejected() {
        let mut cfg = small(Objective::Mle);
        cfg.train_solver = SolverConfig::dopri5(1e-3, 1e-3);
        assert_eq!(
            TrainState::new(cfg).unwrap_err(),
            Error::Config("training requires fixed-step solver".into())
        );
    }

    #[test]
    fn dfm_has_reverse_model() {
        let st = TrainState::new(small(Objective::Dfm(DfmVariant::CosPair))).unwrap();
        assert!(st.lambda.is_some());
        assert!(TrainState::new(small(Objective::Mle)).unwrap().lambda.is_none());
    }

    #[test]
    fn nan_data_aborts_with_step() {
        let cfg = small(Objective::Cfm(PathSpec::icfm()));
        let data = Tensor::filled(&[8, 1], f64::NAN);
        let err = TrainState::new(cfg).unwrap().step(&data).unwrap_err();
        assert_eq!(err, Error::NonFiniteLoss { step: 0 });
    }
}
