use diffcore::gradcheck::{numeric_grad, relative_error};
use diffcore::{DiffError, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|x| x.abs() + 0.5)
}

/// Checks the reverse-pass gradient of `f` w.r.t. every input against central
/// differences. `f` must map its inputs to a scalar.
fn check<F>(inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap();
        let numeric = numeric_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                f(&tape, &vars).item().unwrap()
            },
            x,
            STEP,
        );
        for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = relative_error(*a, *n, FLOOR);
            assert!(err <= RTOL, "input {k}[{i}]: analytic {a} vs numeric {n} (rel {err})");
        }
    }
}

/// Weighted sum so that every output entry has a distinct sensitivity.
fn probe_sum<'t>(tape: &'t Tape, y: Var<'t>) -> Var<'t> {
    let n = y.value().numel();
    let w = Tensor::new(
        &y.shape(),
        (0..n).map(|i| ((i as f64) * 0.37).sin() + 1.1).collect(),
    )
    .unwrap();
    y.mul(tape.constant(w)).unwrap().sum()
}

#[test]
fn matmul_gradient_matches_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let tape = Tape::new();
    let (va, vb) = (tape.input(a.clone()), tape.input(b.clone()));
    let loss = va.matmul(vb).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let expected = Tensor::ones(&[3, 2]).matmul(&b.transpose().unwrap()).unwrap();
    assert!(grads.wrt(va).unwrap().max_abs_diff(&expected) < 1e-12);
    check(&[a, b], |_, v| v[0].matmul(v[1]).unwrap().sum());
}

#[test]
fn matmul_shape_error() {
    let tape = Tape::new();
    let a = tape.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(a), Err(DiffError::Shape { .. })));
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 4]);
    let same = random(&mut rng, &[2, 3, 4]);
    let row = random(&mut rng, &[4]);
    let suffix = random(&mut rng, &[3, 4]);
    let scalar = random(&mut rng, &[1]);
    check(&[x.clone(), same.clone()], |t, v| {
        probe_sum(t, v[0].add(v[1]).unwrap())
    });
    check(&[x.clone(), same.clone()], |t, v| {
        probe_sum(t, v[0].sub(v[1]).unwrap())
    });
    check(&[x.clone(), same], |t, v| probe_sum(t, v[0].mul(v[1]).unwrap()));
    check(&[x.clone(), row], |t, v| probe_sum(t, v[0].mul(v[1]).unwrap()));
    check(&[x.clone(), suffix], |t, v| {
        probe_sum(t, v[0].sub(v[1]).unwrap())
    });
    check(&[x, scalar], |t, v| probe_sum(t, v[0].mul(v[1]).unwrap()));
}

#[test]
fn broadcast_rejects_non_suffix() {
    let tape = Tape::new();
    let a = tape.input(Tensor::zeros(&[2, 3]));
    let b = tape.input(Tensor::zeros(&[2]));
    assert!(a.add(b).is_err());
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 5]);
    let p = positive(&mut rng, &[3, 5]);
    check(&[x.clone()], |t, v| probe_sum(t, v[0].tanh()));
    check(&[x.clone()], |t, v| probe_sum(t, v[0].sigmoid()));
    check(&[x.clone()], |t, v| probe_sum(t, v[0].exp()));
    check(&[x.clone()], |t, v| probe_sum(t, v[0].scale(-2.5).add_scalar(0.3)));
    check(&[x.clone()], |t, v| probe_sum(t, v[0].rsub_scalar(1.0)));
    // relu / abs are checked away from their kink
    check(&[p.clone()], |t, v| probe_sum(t, v[0].relu()));
    check(&[p.map(|x| -x)], |t, v| probe_sum(t, v[0].relu().add_scalar(1.0)));
    check(&[x.map(|v| if v.abs() < 0.1 { 0.5 } else { v })], |t, v| {
        probe_sum(t, v[0].abs())
    });
    check(&[p.clone()], |t, v| probe_sum(t, v[0].powf(-0.5)));
    check(&[p], |t, v| probe_sum(t, v[0].powf(2.5)));
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 4]);
    let y = random(&mut rng, &[2, 3, 2]);
    check(&[x.clone()], |t, v| probe_sum(t, v[0].transpose().unwrap()));
    check(&[x.clone()], |t, v| probe_sum(t, v[0].permute01().unwrap()));
    check(&[x.clone()], |t, v| probe_sum(t, v[0].reshape(&[6, 4]).unwrap()));
    check(&[x.clone(), y], |t, v| {
        probe_sum(t, Var::concat(&[v[0], v[1], v[0]]).unwrap())
    });
    check(&[x.clone()], |t, v| probe_sum(t, v[0].slice_last(1, 2).unwrap()));
    check(&[x.clone()], |_, v| v[0].mean());
    check(&[x.clone()], |t, v| probe_sum(t, v[0].sum_last().unwrap()));
    check(&[x], |t, v| probe_sum(t, v[0].max_last().unwrap()));
}

#[test]
fn batched_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 2, 4]);
    let b = random(&mut rng, &[3, 4, 5]);
    check(&[a.clone(), b], |t, v| probe_sum(t, v[0].bmm(v[1]).unwrap()));
    let bias = random(&mut rng, &[3, 4]);
    check(&[a.clone(), bias], |t, v| {
        probe_sum(t, v[0].add_rows(v[1]).unwrap())
    });
    let rs = random(&mut rng, &[3, 2]);
    check(&[a.clone(), rs], |t, v| {
        probe_sum(t, v[0].scale_rows(v[1]).unwrap())
    });
    let cs = random(&mut rng, &[3, 4]);
    check(&[a, cs], |t, v| probe_sum(t, v[0].scale_cols(v[1]).unwrap()));
}

#[test]
fn softmax_layer_norm_cosine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[4, 5]);
    check(&[x.clone()], |t, v| probe_sum(t, v[0].softmax_last()));
    let gain = random(&mut rng, &[5]);
    let bias = random(&mut rng, &[5]);
    check(&[x.clone(), gain, bias], |t, v| {
        probe_sum(t, v[0].layer_norm(v[1], v[2], 1e-5).unwrap())
    });
    check(&[x], |t, v| probe_sum(t, v[0].cosine_rows().unwrap()));
}

#[test]
fn mask_stops_gradient_at_dropped_entries() {
    let tape = Tape::new();
    let x = tape.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let loss = x.mask(vec![true, false, true]).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 1.0]);
    assert_eq!(loss.item().unwrap(), 4.0);
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap());
    let y = x.softmax_last().value();
    assert_eq!(y.row(0), &[0.5, 0.5]);
    // e^1 / (e^1 + e^2) = 1 / (1 + e)
    let expected = 1.0 / (1.0 + std::f64::consts::E);
    assert!((y.row(1)[0] - expected).abs() < 1e-15);
    assert!((y.row(1)[0] - 0.26894).abs() < 1e-5);
    assert!((y.row(1)[1] - 0.73106).abs() < 1e-5);

    let c = tape.constant(Tensor::full(&[1, 3], 123.4));
    for v in c.softmax_last().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::ones(&[2]));
    let zeros = tape.constant(Tensor::zeros(&[2]));

    let c = tape.constant(Tensor::full(&[2], 7.0));
    let y = c.layer_norm(ones, zeros, 1e-5).unwrap().value();
    assert_eq!(y.data(), &[0.0, 0.0]);

    let x = tape.constant(Tensor::new(&[2], vec![-1.0, 1.0]).unwrap());
    let y = x.layer_norm(ones, zeros, 1e-14).unwrap().value();
    assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

    let bias = tape.constant(Tensor::new(&[2], vec![0.3, -0.4]).unwrap());
    let y = x
        .layer_norm(tape.constant(Tensor::zeros(&[2])), bias, 1e-5)
        .unwrap()
        .value();
    assert_eq!(y.data(), &[0.3, -0.4]);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let p = store
        .add("p", Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap())
        .unwrap();

    let tape = Tape::new();
    let loss = tape.param(&store, p).sum();
    tape.backward(loss).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).data(), &[1.0; 4]);

    // accumulates until zero_grad
    let tape = Tape::new();
    let loss = tape.param(&store, p).sum();
    tape.backward(loss).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).data(), &[2.0; 4]);

    store.zero_grad();
    let tape = Tape::new();
    let v = tape.param(&store, p);
    let loss = v.mul(v).unwrap().sum();
    tape.backward(loss).unwrap().accumulate_into(&mut store);
    assert_eq!(store.grad(p).data(), &[2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.backward(x.tanh()),
        Err(DiffError::NotScalar { .. })
    ));
}

#[test]
#[cfg(debug_assertions)]
fn non_finite_values_are_reported() {
    let tape = Tape::new();
    let x = tape.input(Tensor::new(&[1], vec![-1.0]).unwrap());
    let loss = x.powf(0.5).sum();
    assert_eq!(tape.first_non_finite(), Some("powf"));
    assert!(tape.backward(loss).is_err());
}

#[test]
fn evaluation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[8, 16]);
    let b = random(&mut rng, &[16, 8]);
    let run = || {
        let tape = Tape::new();
        let out = tape
            .constant(a.clone())
            .matmul(tape.constant(b.clone()))
            .unwrap()
            .tanh()
            .softmax_last();
        out.value().data().to_vec()
    };
    let (x, y) = (run(), run());
    assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let tape = Tape::new();
        let x = Tensor::from_rows(&rows).unwrap();
        let y = tape.constant(x.clone()).softmax_last().value();
        let ys = tape.constant(x.map(|v| v + shift)).softmax_last().value();
        for r in 0..rows.len() {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        prop_assert!(y.max_abs_diff(&ys) <= 1e-12);
    }

    #[test]
    fn layer_norm_standardises(xs in proptest::collection::vec(-50.0f64..50.0, 2..40)) {
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let d = xs.len();
        let tape = Tape::new();
        let y = tape
            .constant(Tensor::new(&[d], xs).unwrap())
            .layer_norm(tape.constant(Tensor::ones(&[d])), tape.constant(Tensor::zeros(&[d])), 1e-12)
            .unwrap()
            .value();
        let mean = y.data().iter().sum::<f64>() / d as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!((var - 1.0).abs() <= 1e-8);
    }
}
