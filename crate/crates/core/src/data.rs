//! Datasets: two-moons, synthetic multichannel telemetry with planted
//! anomalies, sliding windows and z-scoring.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math;
use crate::rng;
use crate::tensor::Tensor;

/// A multichannel series with optional per-timestep anomaly flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// `[T, C]`.
    pub values: Tensor,
    pub labels: Option<Vec<u8>>,
    pub entity: String,
}

impl RawSeries {
    pub fn new(values: Tensor, labels: Option<Vec<u8>>, entity: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::Shape {
                op: "series",
                lhs: vec![0, 0],
                rhs: values.shape().to_vec(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != values.rows() {
                return Err(Error::LabelLength {
                    series: values.rows(),
                    labels: l.len(),
                });
            }
        }
        Ok(Self {
            values,
            labels,
            entity: entity.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Timesteps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values.slice_rows(start, end),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            entity: self.entity.clone(),
        }
    }

    /// Joins series with equal channel counts end to end.
    pub fn concat(parts: &[RawSeries]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptySeries)?;
        let c = first.channels();
        let mut values = Vec::new();
        let mut labels = Some(Vec::new());
        for p in parts {
            if p.channels() != c {
                return Err(first.values.mismatch("concat_series", &p.values));
            }
            values.extend_from_slice(p.values.data());
            labels = match (labels, &p.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        let t = values.len() / c.max(1);
        Self::new(Tensor::matrix(t, c, values)?, labels, first.entity.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    /// `[T, w·C]`; row `i` holds timesteps `i−w+1 ..= i` oldest first.
    pub windows: Tensor,
    pub labels: Option<Vec<u8>>,
    pub window: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One window per timestep, padding the front with copies of timestep 0.
/// A window's label is the label of its last timestep.
pub fn window(series: &RawSeries, w: usize) -> Result<WindowedDataset> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if w == 0 {
        return Err(Error::Config("window size must be at least 1".into()));
    }
    let (t, c) = (series.len(), series.channels());
    let mut data = Vec::with_capacity(t * w * c);
    for i in 0..t {
        for k in 0..w {
            let src = (i + k + 1).saturating_sub(w);
            data.extend_from_slice(series.values.row(src));
        }
    }
    Ok(WindowedDataset {
        windows: Tensor::matrix(t, w * c, data)?,
        labels: series.labels.clone(),
        window: w,
    })
}

/// Two interleaved unit half-circles with isotropic Gaussian noise. Each
/// point picks its moon by a fair coin.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Tensor {
    gen_two_moons_labelled(n, noise_std, seed).0
}

/// As [`gen_two_moons`], also returning which moon (0 upper, 1 lower) each
/// point came from.
pub fn gen_two_moons_labelled(n: usize, noise_std: f64, seed: u64) -> (Tensor, Vec<u8>) {
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut class = Vec::with_capacity(n);
    for _ in 0..n {
        let lower = rng::uniform(&mut r) < 0.5;
        let theta = PI * rng::uniform(&mut r);
        let (x, y) = if lower {
            (1.0 - math::cos(theta), 0.5 - math::sin(theta))
        } else {
            (math::cos(theta), math::sin(theta))
        };
        data.push(x + noise_std * rng::normal(&mut r));
        data.push(y + noise_std * rng::normal(&mut r));
        class.push(lower as u8);
    }
    (Tensor::matrix(n, 2, data).unwrap(), class)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetrySpec {
    pub length: usize,
    pub channels: usize,
    /// Fraction of eligible timesteps covered by anomaly segments.
    pub anomaly_rate: f64,
    /// Leading fraction of the series kept free of anomalies.
    pub clean_fraction: f64,
    pub seed: u64,
}

impl TelemetrySpec {
    pub fn new(length: usize, channels: usize, anomaly_rate: f64, seed: u64) -> Self {
        Self {
            length,
            channels,
            anomaly_rate,
            clean_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 16 {
            return Err(Error::Config("telemetry needs at least 16 timesteps".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("telemetry needs at least one channel".into()));
        }
        if !(0.0..=0.2).contains(&self.anomaly_rate) {
            return Err(Error::Config("anomaly_rate must lie in [0, 0.2]".into()));
        }
        if !(0.0..1.0).contains(&self.clean_fraction) {
            return Err(Error::Config("clean_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const SHIFT_SIGMAS: f64 = 4.0;
pub const BURST_FACTOR: f64 = 5.0;
const SEGMENT_MIN: usize = 50;
const SEGMENT_MAX: usize = 150;
const NOISE_STD: f64 = 0.5;

/// Sum of two sinusoids plus AR(1) noise per channel, with contiguous
/// anomaly segments of level shifts (`+4σ` of the channel) or noise bursts
/// (`×5`) on a random subset of at least half the channels.
pub fn gen_telemetry(spec: &TelemetrySpec) -> Result<RawSeries> {
    spec.validate()?;
    let (t_len, c) = (spec.length, spec.channels);
    let mut r = rng::seeded(spec.seed);

    let mut signal = vec![0.0; t_len * c];
    let mut noise = vec![0.0; t_len * c];
    for ch in 0..c {
        let waves: Vec<(f64, f64, f64)> = (0..2)
            .map(|k| {
                let amp = if k == 0 { 0.8 } else { 0.4 } * rng::uniform_range(&mut r, 0.75, 1.25);
                let period = rng::uniform_range(&mut r, 20.0, 200.0);
                (amp, period, rng::uniform_range(&mut r, 0.0, 2.0 * PI))
            })
            .collect();
        let phi = rng::uniform_range(&mut r, 0.7, 0.9);
        let innov = NOISE_STD * math::sqrt(1.0 - phi * phi);
        let mut e = NOISE_STD * rng::normal(&mut r);
        for i in 0..t_len {
            let s: f64 = waves
                .iter()
                .map(|&(a, p, ph)| a * math::sin(2.0 * PI * i as f64 / p + ph))
                .sum();
            signal[i * c + ch] = s;
            noise[i * c + ch] = e;
            e = phi * e + innov * rng::normal(&mut r);
        }
    }

    let mut std = vec![0.0; c];
    for (ch, s) in std.iter_mut().enumerate() {
        let vals: Vec<f64> = (0..t_len).map(|i| signal[i * c + ch] + noise[i * c + ch]).collect();
        let mean = vals.iter().sum::<f64>() / t_len as f64;
        *s = math::sqrt(vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t_len as f64);
    }

    let clean = (spec.clean_fraction * t_len as f64) as usize;
    let eligible = t_len - clean;
    let target = libm::round(spec.anomaly_rate * eligible as f64) as usize;
    let mut labels = vec![0u8; t_len];
    let mut shift = vec![0.0; t_len * c];
    let mut gain = vec![1.0; t_len * c];
    let seg_max = SEGMENT_MAX.min((eligible / 4).max(1));
    let seg_min = SEGMENT_MIN.min(seg_max);
    let mut marked = 0;
    let mut attempts = 0;
    while marked < target && attempts < 10_000 {
        attempts += 1;
        let len = seg_min + rng::index(&mut r, seg_max - seg_min + 1);
        // Short tails would make near-invisible segments, so the last one may
        // overshoot the target by up to one minimum length.
        let len = len.min((target - marked).max(seg_min)).min(eligible);
        let start = clean + rng::index(&mut r, eligible - len + 1);
        // Keep a gap so segments stay distinct.
        let lo = start.saturating_sub(10).max(clean);
        let hi = (start + len + 10).min(t_len);
        if labels[lo..hi].contains(&1) {
            continue;
        }
        let k = c.div_ceil(2) + rng::index(&mut r, c - c.div_ceil(2) + 1);
        let mut chans: Vec<usize> = (0..c).collect();
        for i in 0..k {
            let j = i + rng::index(&mut r, c - i);
            chans.swap(i, j);
        }
        let burst = rng::uniform(&mut r) < 0.5;
        for i in start..start + len {
            labels[i] = 1;
            for &ch in &chans[..k] {
                if burst {
                    gain[i * c + ch] = BURST_FACTOR;
                } else {
                    shift[i * c + ch] = SHIFT_SIGMAS * std[ch];
                }
            }
        }
        marked += len;
    }

    let values = (0..t_len * c)
        .map(|k| signal[k] + gain[k] * noise[k] + shift[k])
        .collect();
    RawSeries::new(Tensor::matrix(t_len, c, values)?, Some(labels), "synthetic")
}

/// Per-column z-scoring statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let n = x.rows();
        if n == 0 || x.ndim() != 2 {
            return Err(Error::EmptySeries);
        }
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| math::sqrt(s / n as f64).max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "normalize",
                lhs: vec![self.mean.len()],
                rhs: x.shape().to_vec(),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Z-scores `train` and every tensor in `others` with `train`'s statistics.
pub fn normalize(train: &Tensor, others: &[&Tensor]) -> Result<(Tensor, Vec<Tensor>, Normalizer)> {
    let norm = Normalizer::fit(train)?;
    let t = norm.apply(train)?;
    let rest = others.iter().map(|o| norm.apply(o)).collect::<Result<_>>()?;
    Ok((t, rest, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[f64], c: usize, labels: Option<Vec<u8>>) -> RawSeries {
        RawSeries::new(Tensor::matrix(v.len() / c, c, v.to_vec()).unwrap(), labels, "t").unwrap()
    }

    #[test]
    fn window_replication_padding() {
        let w = window(&series(&[1.0, 2.0, 3.0], 1, None), 3).unwrap();
        assert_eq!(w.windows.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn window_of_one_is_identity() {
        let s = series(&[1.0, 2.0, 3.0, 4.0], 2, None);
        assert_eq!(window(&s, 1).unwrap().windows, s.values);
    }

    #[test]
    fn window_label_is_last_timestep() {
        let w = window(&series(&[0.0, 0.0, 0.0], 1, Some(vec![0, 1, 0])), 2).unwrap();
        assert_eq!(w.labels, Some(vec![0, 1, 0]));
    }

    #[test]
    fn empty_series_rejected() {
        let s = RawSeries::new(Tensor::zeros(&[0, 2]), None, "e").unwrap();
        assert_eq!(window(&s, 2).unwrap_err(), Error::EmptySeries);
    }

    #[test]
    fn label_length_checked() {
        let err = RawSeries::new(Tensor::zeros(&[4, 2]), Some(vec![0; 3]), "x").unwrap_err();
        assert_eq!(err, Error::LabelLength { series: 4, labels: 3 });
    }

    #[test]
    fn noiseless_moons_on_circles() {
        let (x, class) = gen_two_moons_labelled(500, 0.0, 3);
        for (r, &k) in class.iter().enumerate() {
            let (a, b) = (x.at(r, 0), x.at(r, 1));
            let (cx, cy) = if k == 1 { (1.0, 0.5) } else { (0.0, 0.0) };
            let rad = math::sqrt((a - cx) * (a - cx) + (b - cy) * (b - cy));
            assert!((rad - 1.0).abs() < 1e-12);
            if k == 1 {
                assert!(b <= 0.5 + 1e-12);
            } else {
                assert!(b >= -1e-12);
            }
        }
    }

    #[test]
    fn moons_reproducible() {
        assert_eq!(gen_two_moons(100, 0.1, 7), gen_two_moons(100, 0.1, 7));
    }

    #[test]
    fn telemetry_without_anomalies() {
        let s = gen_telemetry(&TelemetrySpec::new(500, 3, 0.0, 1)).unwrap();
        assert!(s.labels.unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn telemetry_clean_prefix() {
        let mut spec = TelemetrySpec::new(10_000, 3, 0.1, 2);
        spec.clean_fraction = 0.6;
        let s = gen_telemetry(&spec).unwrap();
        let l = s.labels.unwrap();
        assert!(l[..6000].iter().all(|&v| v == 0));
        let frac = l[6000..].iter().filter(|&&v| v == 1).count() as f64 / 4000.0;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
    }

    #[test]
    fn telemetry_bounds_checked() {
        assert!(gen_telemetry(&TelemetrySpec::new(15, 2, 0.0, 0)).is_err());
        assert!(gen_telemetry(&TelemetrySpec::new(100, 2, 0.3, 0)).is_err());
    }

    #[test]
    fn constant_column_normalizes_to_zero() {
        let x = Tensor::matrix(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap();
        let (t, _, n) = normalize(&x, &[]).unwrap();
        assert_eq!(n.std[0], STD_FLOOR);
        assert!((0..3).all(|r| t.at(r, 0) == 0.0));
    }

    #[test]
    fn other_sets_use_train_statistics() {
        let train = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let test = Tensor::matrix(2, 1, vec![10.0, 12.0]).unwrap();
        let (_, rest, _) = normalize(&train, &[&test]).unwrap();
        assert_eq!(rest[0].data(), &[9.0, 11.0]);
    }
}
