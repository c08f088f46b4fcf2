//! Checkpoints: `manifest.json` plus one little-endian `f64` blob per
//! tensor. Serialization is deterministic, so save → load → save reproduces
//! every byte.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use dualflow_core::data::Normalizer;
use dualflow_core::field::{GaussianPrior, MlpVectorField};
use dualflow_core::rng::Rng;
use dualflow_core::train::TrainState;
use dualflow_core::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::series::{f64_bytes, f64_from_bytes};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dim: usize,
    step: usize,
    rng: RngState,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    /// 32-byte ChaCha key, hex.
    seed: String,
    stream: u64,
    /// Position in the keystream; decimal because it exceeds 64 bits.
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub dim: usize,
    pub step: usize,
    pub rng: Rng,
    pub theta: MlpVectorField,
    pub lambda: Option<MlpVectorField>,
    pub prior: GaussianPrior,
    /// Column statistics applied to inputs before the flow sees them.
    pub normalizer: Option<Normalizer>,
}

fn rng_state(rng: &Rng) -> RngState {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<Rng, CliError> {
    let bad = || CliError::Data("checkpoint rng state is malformed".into());
    if s.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

impl Checkpoint {
    pub fn from_state(config: RunConfig, state: &TrainState, normalizer: Option<Normalizer>) -> Self {
        Self {
            config,
            dim: state.config.model.dim,
            step: state.step,
            rng: state.rng.clone(),
            theta: state.theta.clone(),
            lambda: state.lambda.clone(),
            prior: state.prior.clone(),
            normalizer,
        }
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .theta
            .named_parameters()
            .into_iter()
            .map(|(n, v)| (format!("theta.{n}"), v.value().clone()))
            .collect();
        if let Some(l) = &self.lambda {
            out.extend(
                l.named_parameters()
                    .into_iter()
                    .map(|(n, v)| (format!("lambda.{n}"), v.value().clone())),
            );
        }
        out.push(("prior.mean".into(), self.prior.mean.value().clone()));
        out.push(("prior.log_std".into(), self.prior.log_std.value().clone()));
        if let Some(n) = &self.normalizer {
            out.push(("normalizer.mean".into(), Tensor::vector(n.mean.clone())));
            out.push(("normalizer.std".into(), Tensor::vector(n.std.clone())));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut entries = Vec::new();
        for (name, t) in self.tensors() {
            let file = format!("{name}.bin");
            fs::write(dir.join(&file), f64_bytes(t.data()))
                .with_context(|| format!("writing tensor {name}"))?;
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                file,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            step: self.step,
            rng: rng_state(&self.rng),
            config: self.config.clone(),
            tensors: entries,
        };
        fs::write(
            dir.join(MANIFEST),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )
        .with_context(|| format!("writing {}", dir.join(MANIFEST).display()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("malformed checkpoint manifest: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            ))
            .into());
        }
        let mut tensors = std::collections::BTreeMap::new();
        for e in &m.tensors {
            let bytes = fs::read(dir.join(&e.file))
                .with_context(|| format!("reading tensor {}", e.name))?;
            let data = f64_from_bytes(&bytes)
                .filter(|d| d.len() == e.shape.iter().product::<usize>())
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "tensor {}: blob of {} bytes does not hold shape {:?}",
                        e.name,
                        bytes.len(),
                        e.shape
                    ))
                })?;
            tensors.insert(e.name.clone(), (e.shape.clone(), data));
        }
        let has_normalizer = tensors.contains_key("normalizer.mean");
        let mut take = |name: &str, expected: &[usize]| -> Result<Tensor> {
            let (shape, data) = tensors
                .remove(name)
                .ok_or_else(|| CliError::Data(format!("checkpoint is missing tensor {name}")))?;
            if shape != expected {
                return Err(CliError::Data(format!(
                    "checkpoint tensor {name} has shape {shape:?} but the model expects {expected:?}"
                ))
                .into());
            }
            Ok(Tensor::new(shape, data)?)
        };

        let model = m.config.model_config(m.dim);
        let load_model = |prefix: &str, take: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>| {
            let mut f = MlpVectorField::new(model.clone(), 0)?;
            let names: Vec<(String, Vec<usize>)> = f
                .named_parameters()
                .into_iter()
                .map(|(n, v)| (n, v.value().shape().to_vec()))
                .collect();
            for (n, shape) in names {
                let t = take(&format!("{prefix}.{n}"), &shape)?;
                f.set_parameter(&n, t)?;
            }
            Ok::<_, anyhow::Error>(f)
        };
        let theta = load_model("theta", &mut take)?;
        let lambda = if m.config.objective().is_dual() {
            Some(load_model("lambda", &mut take)?)
        } else {
            None
        };
        let mean = take("prior.mean", &[m.dim])?;
        let log_std = take("prior.log_std", &[m.dim])?;
        let prior = GaussianPrior::new(mean.into_data(), log_std.into_data())?;
        let normalizer = if has_normalizer {
            let mean = take("normalizer.mean", &[m.dim])?.into_data();
            let std = take("normalizer.std", &[m.dim])?.into_data();
            Some(Normalizer { mean, std })
        } else {
            None
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(CliError::Data(format!("checkpoint has unexpected tensor {extra}")).into());
        }
        Ok(Self {
            rng: restore_rng(&m.rng)?,
            config: m.config,
            dim: m.dim,
            step: m.step,
            theta,
            lambda,
            prior,
            normalizer,
        })
    }

    /// Maps raw inputs into the model's coordinates.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match &self.normalizer {
            Some(n) => n.apply(x)?,
            None => x.clone(),
        })
    }

    /// `Σ log σ` of the normalizer: subtract from a normalized-space log
    /// density to get the raw-space one.
    pub fn log_scale(&self) -> f64 {
        self.normalizer
            .as_ref()
            .map(|n| n.std.iter().map(|s| s.ln()).sum())
            .unwrap_or(0.0)
    }

    /// Maps model coordinates back to raw inputs.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        if let Some(n) = &self.normalizer {
            for r in 0..out.rows() {
                for ((v, m), s) in out.row_mut(r).iter_mut().zip(&n.mean).zip(&n.std) {
                    *v = *v * s + m;
                }
            }
        }
        out
    }
}
