use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64> + 'a;

/// Max relative error (in the 2-norm) between analytic gradients and central
/// differences of a scalar function of several tensors.
fn max_rel_err(inputs: &[Tensor<f64>], f: &Build<'_>) -> f64 {
    let mut tape = Tape::new(true);
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(&out).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new(false);
        let vs: Vec<_> = ins.iter().map(|x| t.leaf(x.clone())).collect();
        f(&mut t, &vs).value().data()[0]
    };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut num = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            num[j] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn probe(tape: &mut Tape<f64>, y: &Var<f64>) -> Var<f64> {
    let w = rand(y.shape(), 99);
    tape.weighted_sum(y, w).unwrap()
}

#[test]
fn conv2d_gradients() {
    for k in [1, 3, 5] {
        let ins = [rand(&[2, 3, 5, 4], 1), rand(&[4, 3, k, k], 2), rand(&[4], 3)];
        let err = max_rel_err(&ins, &|t, v| {
            let y = t.conv2d(&v[0], &v[1], Some(&v[2])).unwrap();
            probe(t, &y)
        });
        assert!(err < 1e-7, "k={k}: {err}");
    }
}

#[test]
fn conv_transpose_gradients_and_shape() {
    let ins = [rand(&[2, 3, 3, 4], 4), rand(&[3, 2, 3, 3], 5), rand(&[2], 6)];
    let err = max_rel_err(&ins, &|t, v| {
        let y = t.conv_transpose2d(&v[0], &v[1], Some(&v[2]), 2, 1, 1).unwrap();
        assert_eq!(y.shape(), [2, 2, 6, 8]);
        probe(t, &y)
    });
    assert!(err < 1e-7, "{err}");
}

#[test]
fn pooling_activations_and_structure_gradients() {
    let x = rand(&[2, 4, 4, 6], 7);
    let cases: Vec<(&str, Box<Build<'static>>)> = vec![
        ("pool", Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| {
            let y = t.max_pool2(&v[0]).unwrap();
            probe(t, &y)
        })),
        ("sigmoid", Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| {
            let y = t.sigmoid(&v[0]);
            probe(t, &y)
        })),
        ("tanh", Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| {
            let y = t.tanh(&v[0]);
            probe(t, &y)
        })),
        ("relu", Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| {
            let y = t.relu(&v[0]);
            probe(t, &y)
        })),
        ("concat+narrow", Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| {
            let a = t.narrow_channels(&v[0], 1, 2).unwrap();
            let y = t.concat_channels(&[&v[0], &a, &v[0]]).unwrap();
            let y = t.narrow_batch(&y, 1, 1).unwrap();
            probe(t, &y)
        })),
        ("time shift", Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| {
            let a = t.time_shift(&v[0], 2, 1).unwrap();
            let b = t.time_shift(&v[0], 2, -1).unwrap();
            let y = t.add(&a, &b).unwrap();
            probe(t, &y)
        })),
    ];
    for (name, f) in cases {
        let err = max_rel_err(std::slice::from_ref(&x), f.as_ref());
        assert!(err < 1e-7, "{name}: {err}");
    }
}

#[test]
fn batch_norm_gradients_in_both_modes() {
    let ins = [rand(&[3, 2, 3, 3], 8), rand(&[2], 9), rand(&[2], 10)];
    let err = max_rel_err(&ins, &|t, v| {
        let y = t.batch_norm(&v[0], &v[1], &v[2], None, 1e-5).unwrap().y;
        probe(t, &y)
    });
    assert!(err < 1e-6, "batch stats: {err}");
    let (m, s) = (vec![0.1, -0.2], vec![0.5, 2.0]);
    let err = max_rel_err(&ins, &|t, v| {
        let y = t.batch_norm(&v[0], &v[1], &v[2], Some((&m, &s)), 1e-5).unwrap().y;
        probe(t, &y)
    });
    assert!(err < 1e-7, "running stats: {err}");
}

#[test]
fn lstm_pointwise_gradients_with_and_without_previous_cell() {
    let ins = [rand(&[2, 8, 3, 3], 11), rand(&[2, 2, 3, 3], 12)];
    let err = max_rel_err(&ins, &|t, v| {
        let y = t.lstm_pointwise(&v[0], Some(&v[1])).unwrap();
        probe(t, &y)
    });
    assert!(err < 1e-7, "{err}");
    let err = max_rel_err(&ins[..1], &|t, v| {
        let y = t.lstm_pointwise(&v[0], None).unwrap();
        probe(t, &y)
    });
    assert!(err < 1e-7, "{err}");
}

#[test]
fn cross_entropy_closed_form_and_gradient() {
    let mut t = Tape::<f64>::new(false);
    let uniform = t.leaf(Tensor::zeros(&[2, 14, 3, 3]));
    let labels: Vec<u8> = (0..18).map(|i| (i % 14) as u8).collect();
    let loss = t.softmax_cross_entropy(&uniform, &labels).unwrap();
    assert!((loss.value().data()[0] - 14f64.ln()).abs() < 1e-12);

    let ins = [rand(&[2, 5, 2, 3], 13)];
    let labels: Vec<u8> = (0..12).map(|i| (i * 7 % 5) as u8).collect();
    let err = max_rel_err(&ins, &|t, v| t.softmax_cross_entropy(&v[0], &labels).unwrap());
    assert!(err < 1e-7, "{err}");
}

#[test]
fn shared_leaf_accumulates_gradients() {
    let mut t = Tape::<f64>::new(true);
    let x = t.leaf(Tensor::full(&[1, 1, 1, 2], 3.0));
    let y = t.add(&x, &x).unwrap();
    let loss = t.weighted_sum(&y, Tensor::full(&[1, 1, 1, 2], 1.0)).unwrap();
    let g = t.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn disabled_tape_records_nothing() {
    let mut t = Tape::<f32>::new(false);
    let x = t.leaf(Tensor::full(&[1, 2, 2, 2], 1.0));
    let y = t.relu(&x);
    assert!(!y.is_tracked());
    assert!(t.is_empty());
}
