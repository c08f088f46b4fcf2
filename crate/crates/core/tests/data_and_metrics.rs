mod common;

use dualflow_core::anomaly::{self, Sweep};
use dualflow_core::data::{self, RawSeries, TelemetrySpec};
use dualflow_core::field::GaussianPrior;
use dualflow_core::objectives::DfmVariant;
use dualflow_core::rng;
use dualflow_core::train::{Objective, TrainConfig, TrainState};
use proptest::prelude::*;

fn series(t: usize, c: usize, seed: u64, labels: Option<Vec<u8>>) -> RawSeries {
    RawSeries::new(rng::normal_tensor(&mut rng::seeded(seed), &[t, c]), labels, "s").unwrap()
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u32..25, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(0u8..2, n),
        )
    })
    .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
}

/// Every distinct threshold tried by brute force.
fn brute_sweep(scores: &[f64], labels: &[u8], adjust: bool) -> (f64, f64) {
    let mut best = (-1.0, -1.0);
    for &th in scores {
        let mut p = anomaly::predict(scores, th);
        if adjust {
            p = anomaly::point_adjust(&p, labels);
        }
        let (prec, rec) = anomaly::precision_recall(&p, labels);
        let f = anomaly::f1(prec, rec);
        if f > best.0 || (f == best.0 && prec > best.1) {
            best = (f, prec);
        }
    }
    best
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn windows_preserve_length_and_pad_the_front(t in 1usize..40, c in 1usize..4, w in 1usize..10, seed in 0u64..100) {
        let labels: Vec<u8> = (0..t).map(|i| (i % 3 == 0) as u8).collect();
        let s = series(t, c, seed, Some(labels.clone()));
        let d = data::window(&s, w).unwrap();
        prop_assert_eq!(d.windows.shape(), &[t, w * c]);
        prop_assert_eq!(d.labels.as_ref(), Some(&labels));
        for k in 0..w {
            prop_assert_eq!(&d.windows.row(0)[k * c..(k + 1) * c], s.values.row(0));
        }
        for i in 0..t {
            for k in 0..w {
                let src = (i + k + 1).saturating_sub(w);
                prop_assert_eq!(&d.windows.row(i)[k * c..(k + 1) * c], s.values.row(src));
            }
        }
    }

    #[test]
    fn metrics_agree_with_brute_force((scores, labels) in labelled()) {
        prop_assert!(close(anomaly::auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels)));
        for adjust in [false, true] {
            let s = if adjust {
                anomaly::sweep_threshold_adjusted(&scores, &labels).unwrap()
            } else {
                anomaly::sweep_threshold(&scores, &labels).unwrap()
            };
            let (f, p) = brute_sweep(&scores, &labels, adjust);
            prop_assert!(close(s.f1, f) && close(s.precision, p), "adjust={} {:?} vs {} {}", adjust, s, f, p);
        }
    }

    #[test]
    fn metrics_ignore_increasing_transforms((scores, labels) in labelled(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
        let moved: Vec<f64> = scores.iter().map(|s| (s / 4.0).exp() * a + b).collect();
        prop_assert_eq!(anomaly::auc(&scores, &labels).unwrap(), anomaly::auc(&moved, &labels).unwrap());
        let same = |x: Sweep, y: Sweep| x.precision == y.precision && x.recall == y.recall && x.f1 == y.f1;
        let (s1, s2) = (anomaly::sweep_threshold(&scores, &labels).unwrap(), anomaly::sweep_threshold(&moved, &labels).unwrap());
        prop_assert!(same(s1, s2));
        prop_assert_eq!((s1.threshold / 4.0).exp() * a + b, s2.threshold);
        let (s1, s2) = (
            anomaly::sweep_threshold_adjusted(&scores, &labels).unwrap(),
            anomaly::sweep_threshold_adjusted(&moved, &labels).unwrap(),
        );
        prop_assert!(same(s1, s2));
    }

    #[test]
    fn point_adjust_only_fills_detected_segments(
        pred in prop::collection::vec(any::<bool>(), 1..80),
        seed in 0u64..1000,
    ) {
        let mut r = rng::seeded(seed);
        let labels: Vec<u8> = (0..pred.len()).map(|_| (rng::uniform(&mut r) < 0.4) as u8).collect();
        let adj = anomaly::point_adjust(&pred, &labels);
        for i in 0..pred.len() {
            if labels[i] == 0 {
                prop_assert_eq!(adj[i], pred[i]);
            } else if pred[i] {
                prop_assert!(adj[i]);
            }
        }
        if labels.contains(&1) {
            let (_, r0) = anomaly::precision_recall(&pred, &labels);
            let (_, r1) = anomaly::precision_recall(&adj, &labels);
            prop_assert!(r1 >= r0);
        }
        prop_assert_eq!(anomaly::point_adjust(&adj, &labels), adj);
    }
}

#[test]
fn auc_extremes() {
    let labels = [0, 0, 1, 1];
    assert_eq!(anomaly::auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    assert_eq!(anomaly::auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 0.0);
    assert_eq!(anomaly::auc(&[1.0; 4], &labels).unwrap(), 0.5);
    assert!(anomaly::auc(&[1.0, 2.0], &[0, 0]).is_err());
}

#[test]
fn infinite_scores_rank_first() {
    let s = anomaly::sweep_threshold(&[0.1, f64::INFINITY, 0.3], &[0, 1, 0]).unwrap();
    assert_eq!((s.precision, s.recall), (1.0, 1.0));
}

#[test]
fn telemetry_training_split_can_be_clean() {
    let mut spec = TelemetrySpec::new(20_000, 5, 0.05, 0);
    spec.clean_fraction = 0.6;
    let s = data::gen_telemetry(&spec).unwrap();
    let labels = s.labels.as_ref().unwrap();
    assert_eq!(s.values.shape(), &[20_000, 5]);
    assert!(labels[..12_000].iter().all(|&l| l == 0));
    let rate = labels[12_000..].iter().map(|&l| l as f64).sum::<f64>() / 8_000.0;
    assert!((0.03..=0.08).contains(&rate), "{rate}");
    assert_eq!(data::gen_telemetry(&spec).unwrap(), s);
}

#[test]
fn telemetry_anomalies_stand_out_from_their_surroundings() {
    let s = data::gen_telemetry(&TelemetrySpec::new(20_000, 5, 0.05, 3)).unwrap();
    let labels = s.labels.unwrap();
    // Level shifts and noise bursts both raise the squared norm of the
    // affected timesteps.
    let energy = |i: usize| -> f64 { s.values.row(i).iter().map(|v| v * v).sum() };
    let mean = |pick: u8| {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == pick).collect();
        idx.iter().map(|&i| energy(i)).sum::<f64>() / idx.len() as f64
    };
    assert!(mean(1) > 2.0 * mean(0), "{} vs {}", mean(1), mean(0));
}

#[test]
fn two_moons_lie_on_two_arcs() {
    let (x, moon) = data::gen_two_moons_labelled(4000, 0.0, 1);
    let upper = moon.iter().filter(|&&m| m == 0).count() as f64 / 4000.0;
    assert!((0.45..=0.55).contains(&upper), "{upper}");
    for (r, m) in moon.iter().enumerate() {
        let (a, b) = (x.at(r, 0), x.at(r, 1));
        let radius = if *m == 0 {
            (a * a + b * b).sqrt()
        } else {
            ((a - 1.0).powi(2) + (b - 0.5).powi(2)).sqrt()
        };
        assert!((radius - 1.0).abs() < 1e-12);
    }
    assert_eq!(data::gen_two_moons(10, 0.05, 9), data::gen_two_moons(10, 0.05, 9));
}

#[test]
fn normalization_uses_training_statistics() {
    let train = rng::normal_tensor(&mut rng::seeded(1), &[5000, 3]).map(|v| 4.0 + 2.0 * v);
    let (z, others, n) = data::normalize(&train, &[&train]).unwrap();
    assert_eq!(others[0], z);
    for c in 0..3 {
        let col: Vec<f64> = (0..z.rows()).map(|r| z.at(r, c)).collect();
        let (m, s) = common::mean_std(&col);
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-3);
        assert!((n.mean[c] - 4.0).abs() < 0.1);
    }
}

#[test]
fn prior_log_density_averages_to_minus_entropy() {
    let prior = GaussianPrior::new(vec![1.0, -2.0, 0.5], vec![0.3, -0.7, 0.0]).unwrap();
    let x = prior.sample_seeded(100_000, 4);
    let avg = prior.log_pdf(&x).unwrap().sum() / 100_000.0;
    let entropy = 1.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + (0.3 - 0.7 + 0.0);
    assert!((avg + entropy).abs() <= 0.01 * entropy.abs(), "{avg} vs {}", -entropy);
}

#[test]
fn forward_and_reverse_fields_share_an_architecture() {
    let s = TrainState::new(TrainConfig::new(Objective::Dfm(DfmVariant::CosPair), 4)).unwrap();
    let lambda = s.lambda.as_ref().unwrap();
    assert_eq!(s.theta.config(), lambda.config());
    let shapes = |f: &dualflow_core::field::MlpVectorField| -> Vec<(String, Vec<usize>)> {
        f.named_parameters()
            .into_iter()
            .map(|(n, v)| (n, v.value().shape().to_vec()))
            .collect()
    };
    assert_eq!(shapes(&s.theta), shapes(lambda));
    assert_ne!(s.theta, *lambda);
}
