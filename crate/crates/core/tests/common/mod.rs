#![allow(dead_code)]

use dualflow_core::rng::{self, Rng};
use dualflow_core::Tensor;

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform_range(rng, lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central difference refined by one Richardson step, so the truncation
/// error is O(h⁴) and the comparison is limited by rounding alone.
pub fn numeric_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let mut d = |step: f64| {
            probe.data_mut()[i] = x0 + step;
            let up = f(&probe);
            probe.data_mut()[i] = x0 - step;
            let down = f(&probe);
            probe.data_mut()[i] = x0;
            (up - down) / (2.0 * step)
        };
        let (coarse, fine) = (d(h), d(h / 2.0));
        g.data_mut()[i] = (4.0 * fine - coarse) / 3.0;
    }
    g
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all entries.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
