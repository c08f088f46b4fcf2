mod common;

use common::{max_rel_err, numeric_grad, uniform};
use dualflow_core::field::{GaussianPrior, MlpConfig, MlpVectorField, VectorField};
use dualflow_core::rng::{self, Rng};
use dualflow_core::trace::{taped_trace, TraceMode};
use dualflow_core::{vjp, Result, Tape, Tensor, Var};
use proptest::prelude::*;

const PRIMITIVE_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-5;
/// Denominator floor for relative errors, so entries whose true gradient
/// is zero are compared against rounding noise rather than against zero.
const REL_FLOOR: f64 = 1e-3;

type Op = fn(&Tape, &[Var]) -> Result<Var>;
type Case<'a> = (&'a str, Op, Vec<(&'a [usize], Domain)>);

#[derive(Clone, Copy)]
enum Domain {
    Any,
    /// Magnitudes in `[0.5, 2]`, for log, sqrt and division.
    Positive,
    /// `[-2, 2]` but kept `0.05` away from zero, for kinks.
    AwayFromZero,
}

fn sample(rng: &mut Rng, shape: &[usize], dom: Domain) -> Tensor {
    match dom {
        Domain::Any => uniform(rng, shape, -2.0, 2.0),
        Domain::Positive => uniform(rng, shape, 0.5, 2.0),
        Domain::AwayFromZero => {
            let mut t = uniform(rng, shape, 0.05, 2.0);
            for v in t.data_mut() {
                if rng::uniform(rng) < 0.5 {
                    *v = -*v;
                }
            }
            t
        }
    }
}

/// `Σ w ⊙ op(inputs)`: contracts the whole Jacobian with a random cotangent.
fn contracted(op: Op, inputs: &[Tensor], w: &Tensor) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = op(&tape, &vars).unwrap();
    out.value().zip_map(w, |a, b| a * b).unwrap().sum()
}

fn check_op(name: &str, op: Op, shapes: &[(&[usize], Domain)], seed: u64) -> f64 {
    let mut rng = rng::seeded(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|(s, d)| sample(&mut rng, s, *d)).collect();

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = op(&tape, &vars).unwrap();
    let w = uniform(&mut rng, out.value().shape(), -1.0, 1.0);
    let loss = out.mul(&tape.constant(w.clone()).unwrap()).unwrap().sum().unwrap();
    let grads = tape.backward(&loss).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let numeric = numeric_grad(
            &mut |x| {
                let mut ins = inputs.clone();
                ins[k] = x.clone();
                contracted(op, &ins, &w)
            },
            &inputs[k],
            1e-3,
        );
        let e = max_rel_err(&analytic, &numeric, REL_FLOOR);
        assert!(e <= PRIMITIVE_TOL, "{name} input {k}: relative error {e:e}");
        worst = worst.max(e);
    }
    worst
}

#[test]
fn primitives_match_finite_differences() {
    use Domain::*;
    let m: &[usize] = &[3, 4];
    let col: &[usize] = &[4];
    let rowv: &[usize] = &[3];
    let cases: Vec<Case> = vec![
        ("add", |_, v| v[0].add(&v[1]), vec![(m, Any), (m, Any)]),
        ("add_broadcast", |_, v| v[0].add(&v[1]), vec![(m, Any), (col, Any)]),
        ("sub", |_, v| v[0].sub(&v[1]), vec![(m, Any), (m, Any)]),
        ("sub_broadcast", |_, v| v[0].sub(&v[1]), vec![(m, Any), (col, Any)]),
        ("mul", |_, v| v[0].mul(&v[1]), vec![(m, Any), (m, Any)]),
        ("mul_broadcast", |_, v| v[0].mul(&v[1]), vec![(m, Any), (col, Any)]),
        ("div", |_, v| v[0].div(&v[1]), vec![(m, Any), (m, Positive)]),
        ("neg", |_, v| v[0].neg(), vec![(m, Any)]),
        ("scale", |_, v| v[0].scale(-1.7), vec![(m, Any)]),
        ("add_scalar", |_, v| v[0].add_scalar(0.3), vec![(m, Any)]),
        ("matmul", |_, v| v[0].matmul(&v[1]), vec![(m, Any), (&[4, 2], Any)]),
        ("affine", |_, v| v[0].affine(&v[1], &v[2]), vec![(m, Any), (&[4, 2], Any), (&[2], Any)]),
        ("tanh", |_, v| v[0].tanh(), vec![(m, Any)]),
        ("softplus", |_, v| v[0].softplus(), vec![(m, Any)]),
        ("exp", |_, v| v[0].exp(), vec![(m, Any)]),
        ("log", |_, v| v[0].log(), vec![(m, Positive)]),
        ("square", |_, v| v[0].square(), vec![(m, Any)]),
        ("sqrt", |_, v| v[0].sqrt(), vec![(m, Positive)]),
        ("sum", |_, v| v[0].sum(), vec![(m, Any)]),
        ("mean", |_, v| v[0].mean(), vec![(m, Any)]),
        ("sum_rows", |_, v| v[0].sum_rows(), vec![(m, Any)]),
        ("concat", |_, v| v[0].concat(&v[1]), vec![(m, Any), (&[3, 2], Any)]),
        ("slice_cols", |_, v| v[0].slice_cols(1, 3), vec![(m, Any)]),
        ("slice_rows", |_, v| v[0].slice_rows(1, 3), vec![(m, Any)]),
        ("row_norm", |_, v| v[0].row_norm(), vec![(m, Any)]),
        ("clamp_min", |_, v| v[0].clamp_min(0.0), vec![(m, AwayFromZero)]),
        ("scale_rows", |_, v| v[0].scale_rows(&v[1]), vec![(m, Any), (rowv, Any)]),
        ("div_rows", |_, v| v[0].div_rows(&v[1]), vec![(m, Any), (rowv, Positive)]),
        (
            "composite",
            |_, v| v[0].tanh()?.mul(&v[1])?.add(&v[0].square()?)?.row_norm(),
            vec![(m, Any), (m, Any)],
        ),
    ];
    for (i, (name, op, shapes)) in cases.into_iter().enumerate() {
        for seed in 0..3 {
            check_op(name, op, &shapes, 100 * i as u64 + seed);
        }
    }
}

fn model(seed: u64, dim: usize) -> MlpVectorField {
    let mut cfg = MlpConfig::new(dim);
    cfg.hidden = vec![16, 16];
    cfg.final_init_scale = 1.0;
    MlpVectorField::new(cfg, seed).unwrap()
}

/// Loss whose gradient reaches both the field value and its tangent map,
/// the two quantities the training objectives consume.
fn model_loss(f: &MlpVectorField, tape: &Tape, times: &[f64], x: &Var, w: &Tensor) -> Var {
    let bound = f.bind(tape).unwrap();
    let tangent = tape.constant(Tensor::filled(&x.shape(), 0.5)).unwrap();
    let (v, jv) = bound.forward_jvp(tape, times, x, &tangent).unwrap();
    let c = tape.constant(w.clone()).unwrap();
    v.mul(&c).unwrap().add(&jv.square().unwrap()).unwrap().sum().unwrap()
}

#[test]
fn models_match_finite_differences_in_inputs_and_weights() {
    let dim = 3;
    let times = [0.1, 0.5, 0.9, 0.3];
    // The forward and reverse fields share one architecture; check two draws.
    for seed in [1, 2] {
        let f = model(seed, dim);
        let mut rng = rng::seeded(40 + seed);
        let x = uniform(&mut rng, &[4, dim], -2.0, 2.0);
        let w = uniform(&mut rng, &[4, dim], -1.0, 1.0);

        let eval = |f: &MlpVectorField, x: &Tensor| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            model_loss(f, &tape, &times, &xv, &w).value().item()
        };

        let tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let bound = f.bind(&tape).unwrap();
        let tangent = tape.constant(Tensor::filled(&[4, dim], 0.5)).unwrap();
        let (v, jv) = bound.forward_jvp(&tape, &times, &xv, &tangent).unwrap();
        let loss = v
            .mul(&tape.constant(w.clone()).unwrap())
            .unwrap()
            .add(&jv.square().unwrap())
            .unwrap()
            .sum()
            .unwrap();
        let grads = tape.backward(&loss).unwrap();

        let gx = numeric_grad(&mut |x| eval(&f, x), &x, 1e-3);
        let e = max_rel_err(&grads.get_or_zeros(&xv), &gx, REL_FLOOR);
        assert!(e <= MODEL_TOL, "input gradient: {e:e}");

        let mut g = f.clone();
        g.zero_grads();
        g.accumulate_grads(&bound, &grads).unwrap();
        for (name, p) in g.named_parameters() {
            let numeric = numeric_grad(
                &mut |val| {
                    let mut h = f.clone();
                    h.set_parameter(&name, val.clone()).unwrap();
                    eval(&h, &x)
                },
                p.value(),
                1e-3,
            );
            let e = max_rel_err(p.grad(), &numeric, REL_FLOOR);
            assert!(e <= MODEL_TOL, "{name}: {e:e}");
        }
    }
}

#[test]
fn exact_taped_trace_matches_finite_differences() {
    let f = model(7, 3);
    let mut rng = rng::seeded(8);
    let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    let trace_sum = |x: &Tensor| {
        let tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let (_, tr) = taped_trace(&f, &tape, &[0.4], &xv, TraceMode::Exact).unwrap();
        tr.sum().unwrap().value().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone()).unwrap();
    let (_, tr) = taped_trace(&f, &tape, &[0.4], &xv, TraceMode::Exact).unwrap();
    let loss = tr.sum().unwrap();
    let grads = tape.backward(&loss).unwrap();
    let numeric = numeric_grad(&mut |x| trace_sum(x), &x, 1e-3);
    let e = max_rel_err(&grads.get_or_zeros(&xv), &numeric, REL_FLOOR);
    assert!(e <= MODEL_TOL, "{e:e}");
}

#[test]
fn prior_log_pdf_gradients() {
    let mut rng = rng::seeded(3);
    let mean = uniform(&mut rng, &[3], -1.0, 1.0);
    let log_std = uniform(&mut rng, &[3], -0.5, 0.5);
    let x = uniform(&mut rng, &[5, 3], -2.0, 2.0);
    let value = |mean: &Tensor, log_std: &Tensor| {
        let p = GaussianPrior::new(mean.data().to_vec(), log_std.data().to_vec()).unwrap();
        p.log_pdf(&x).unwrap().sum()
    };
    let mut prior = GaussianPrior::new(mean.data().to_vec(), log_std.data().to_vec()).unwrap();
    let tape = Tape::new();
    let b = prior.bind(&tape).unwrap();
    let loss = b.log_pdf(&tape.constant(x.clone()).unwrap()).unwrap().sum().unwrap();
    let grads = tape.backward(&loss).unwrap();
    prior.accumulate_grads(&b, &grads).unwrap();
    let gm = numeric_grad(&mut |m| value(m, &log_std), &mean, 1e-3);
    let gs = numeric_grad(&mut |s| value(&mean, s), &log_std, 1e-3);
    assert!(max_rel_err(prior.mean.grad(), &gm, REL_FLOOR) <= PRIMITIVE_TOL);
    assert!(max_rel_err(prior.log_std.grad(), &gs, REL_FLOOR) <= PRIMITIVE_TOL);
}

#[test]
fn vjp_with_basis_vectors_stacks_to_the_jacobian() {
    let dim = 4;
    let f = model(11, dim);
    let mut rng = rng::seeded(12);
    let x = uniform(&mut rng, &[1, dim], -1.5, 1.5);
    let t = 0.35;

    let mut rows = Vec::new();
    for d in 0..dim {
        let mut e = Tensor::zeros(&[1, dim]);
        e.data_mut()[d] = 1.0;
        let row = vjp(|tape, xv| f.forward(tape, &[t], xv), &x, &e).unwrap();
        rows.extend_from_slice(row.data());
    }
    let jac = Tensor::matrix(dim, dim, rows).unwrap();

    let mut fd = Tensor::zeros(&[dim, dim]);
    for d in 0..dim {
        let g = numeric_grad(&mut |x| f.eval(t, x).unwrap().data()[d], &x, 1e-3);
        fd.row_mut(d).copy_from_slice(g.data());
    }
    let e = max_rel_err(&jac, &fd, REL_FLOOR);
    assert!(e <= MODEL_TOL, "{e:e}");
}

fn grads_of_scaled(a: f64, x: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone()).unwrap();
    let yv = tape.leaf(y.clone()).unwrap();
    let loss = xv
        .tanh()
        .unwrap()
        .mul(&yv)
        .unwrap()
        .add(&xv.square().unwrap())
        .unwrap()
        .row_norm()
        .unwrap()
        .sum()
        .unwrap()
        .scale(a)
        .unwrap();
    let g = tape.backward(&loss).unwrap();
    (g.get_or_zeros(&xv), g.get_or_zeros(&yv))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(a in -5.0f64..5.0, seed in 0u64..1000) {
        let mut rng = rng::seeded(seed);
        let x = uniform(&mut rng, &[3, 2], -2.0, 2.0);
        let y = uniform(&mut rng, &[3, 2], -2.0, 2.0);
        let (gx1, gy1) = grads_of_scaled(1.0, &x, &y);
        let (gxa, gya) = grads_of_scaled(a, &x, &y);
        for (g1, ga) in [(gx1, gxa), (gy1, gya)] {
            for (u, v) in g1.data().iter().zip(ga.data()) {
                prop_assert!((a * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
    }
}
