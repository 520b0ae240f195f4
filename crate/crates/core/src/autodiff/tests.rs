use super::*;
use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Gradient check of a single-input scalar function built on a fresh tape.
fn check_unary(
    shape: &[usize],
    x0: Vec<f64>,
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
) -> f64 {
    let eval = |x: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_vec(shape, x.to_vec()));
        let root = build(&mut tape, p);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_vec(shape, x0.clone()));
    let root = build(&mut tape, p);
    let grads = tape.backward(root).unwrap();
    let numeric = central_difference(eval, &x0, FD_STEP);
    max_relative_error(grads.get(p).unwrap().data(), &numeric)
}

/// Same for two inputs; returns the worse of the two errors.
fn check_binary(
    shapes: (&[usize], &[usize]),
    x0: (Vec<f64>, Vec<f64>),
    build: impl Fn(&mut Tape, NodeId, NodeId) -> NodeId,
) -> f64 {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::from_vec(shapes.0, x0.0.clone()));
    let b = tape.param(Tensor::from_vec(shapes.1, x0.1.clone()));
    let root = build(&mut tape, a, b);
    let grads = tape.backward(root).unwrap();

    let num_a = central_difference(
        |x| {
            let mut t = Tape::new();
            let a = t.param(Tensor::from_vec(shapes.0, x.to_vec()));
            let b = t.constant(Tensor::from_vec(shapes.1, x0.1.clone()));
            let r = build(&mut t, a, b);
            t.value(r).item()
        },
        &x0.0,
        FD_STEP,
    );
    let num_b = central_difference(
        |x| {
            let mut t = Tape::new();
            let a = t.constant(Tensor::from_vec(shapes.0, x0.0.clone()));
            let b = t.param(Tensor::from_vec(shapes.1, x.to_vec()));
            let r = build(&mut t, a, b);
            t.value(r).item()
        },
        &x0.1,
        FD_STEP,
    );
    max_relative_error(grads.get(a).unwrap().data(), &num_a)
        .max(max_relative_error(grads.get(b).unwrap().data(), &num_b))
}

/// Reduce any node to a scalar with a fixed random weighting so every
/// output element carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::from_vec(&shape, random_vec(&mut rng, n)));
    tape.dot(x, w).unwrap()
}

#[test]
fn add_is_elementwise() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
    let z = tape.add(x, y).unwrap();
    assert_eq!(tape.value(z).data(), &[11.0, 22.0, 33.0]);
}

#[test]
fn matmul_shape_rule() {
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::zeros(&[128, 131]));
    let v = tape.constant(Tensor::zeros(&[131]));
    let out = tape.matmul(w, v).unwrap();
    assert_eq!(tape.value(out).shape(), &[128]);

    let bad = tape.constant(Tensor::zeros(&[130]));
    let err = tape.matmul(w, bad).unwrap_err();
    match err {
        AutodiffError::ShapeMismatch { op, shapes } => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![128, 131], vec![130]]);
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err_message_names_op(&tape.matmul(w, bad).unwrap_err(), "matmul"));
}

fn err_message_names_op(err: &AutodiffError, op: &str) -> bool {
    err.to_string().contains(op)
}

#[test]
fn record_rejects_unknown_nodes_and_bad_arity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.0));
    assert_eq!(
        tape.record(Primitive::Add, &[x, NodeId(7)]).unwrap_err(),
        AutodiffError::UnknownNode(7)
    );
    assert!(matches!(
        tape.record(Primitive::Add, &[x]),
        Err(AutodiffError::Arity { .. })
    ));
    assert!(matches!(
        tape.record(Primitive::Concat, &[]),
        Err(AutodiffError::Arity { .. })
    ));
}

#[test]
fn square_norm_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let root = tape.dot(x, x).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn relu_dead_region_and_kink_have_zero_gradient() {
    for v in [-5.0, 0.0] {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(v));
        let r = tape.relu(x).unwrap();
        let grads = tape.backward(r).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.backward(r).unwrap().get(x).unwrap().item(), 1.0);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(
        tape.backward(x).unwrap_err(),
        AutodiffError::NonScalarRoot(vec![2])
    );
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]));
    let root = tape.sum(x).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    assert!(grads.get(root).is_none());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = tape.param(Tensor::vector(vec![3.0, 4.0]));
    let p = tape.mul(c, x).unwrap();
    let root = tape.sum(p).unwrap();
    let grads = tape.backward(root).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tol = 1e-4;
    for trial in 0..5u64 {
        let seed = 100 + trial;
        let a = random_vec(&mut rng, 12);
        let b = random_vec(&mut rng, 12);
        let pos: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..2.0)).collect();
        let m34 = random_vec(&mut rng, 12);
        let m45 = random_vec(&mut rng, 20);
        let v4 = random_vec(&mut rng, 4);
        let v3a = random_vec(&mut rng, 3);
        let v3b = random_vec(&mut rng, 3);

        let s34: &[usize] = &[3, 4];
        let errs = [
            ("add", check_binary((s34, s34), (a.clone(), b.clone()), |t, x, y| {
                let r = t.add(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("sub", check_binary((s34, s34), (a.clone(), b.clone()), |t, x, y| {
                let r = t.sub(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("mul", check_binary((s34, s34), (a.clone(), b.clone()), |t, x, y| {
                let r = t.mul(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("div", check_binary((s34, s34), (a.clone(), pos.clone()), |t, x, y| {
                let r = t.div(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("add_row", check_binary((s34, &[4]), (a.clone(), v4.clone()), |t, x, y| {
                let r = t.add_row(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("broadcast_rows", check_unary(&[4], v4.clone(), |t, x| {
                let r = t.broadcast_rows(x, 3).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("scale", check_unary(s34, a.clone(), |t, x| {
                let r = t.scale(x, -2.5).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("add_scalar", check_unary(s34, a.clone(), |t, x| {
                let r = t.add_scalar(x, 0.7).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("mul_scalar", check_binary((s34, &[]), (a.clone(), vec![0.3]), |t, x, s| {
                let r = t.mul_scalar(x, s).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("matmul_mm", check_binary((s34, &[4, 5]), (m34.clone(), m45.clone()), |t, x, y| {
                let r = t.matmul(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("matmul_mv", check_binary((s34, &[4]), (m34.clone(), v4.clone()), |t, x, y| {
                let r = t.matmul(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("relu", check_unary(s34, a.clone(), |t, x| {
                let r = t.relu(x).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("softmax", check_unary(s34, a.clone(), |t, x| {
                let r = t.softmax(x).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("log_softmax", check_unary(s34, a.clone(), |t, x| {
                let r = t.log_softmax(x).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("ln", check_unary(s34, pos.clone(), |t, x| {
                let r = t.ln(x).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("sin", check_unary(&[], vec![a[0]], |t, x| t.sin(x).unwrap())),
            ("cos", check_unary(&[], vec![a[1]], |t, x| t.cos(x).unwrap())),
            ("sqrt", check_unary(&[], vec![pos[0]], |t, x| t.sqrt(x).unwrap())),
            ("sum", check_unary(s34, a.clone(), |t, x| {
                let sq = t.mul(x, x).unwrap();
                t.sum(sq).unwrap()
            })),
            ("mean", check_unary(s34, a.clone(), |t, x| {
                let sq = t.mul(x, x).unwrap();
                t.mean(sq).unwrap()
            })),
            ("sum_rows", check_unary(s34, a.clone(), |t, x| {
                let r = t.sum_rows(x).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("concat", check_binary((s34, &[3, 2]), (a.clone(), b[..6].to_vec()), |t, x, y| {
                let r = t.concat(&[x, y]).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("reshape", check_unary(s34, a.clone(), |t, x| {
                let r = t.reshape(x, &[2, 6]).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("cross", check_binary((&[3], &[3]), (v3a.clone(), v3b.clone()), |t, x, y| {
                let r = t.cross(x, y).unwrap();
                weighted_sum(t, r, seed)
            })),
            ("normalize", check_unary(&[3], v3a.clone(), |t, x| {
                let r = t.normalize(x).unwrap();
                weighted_sum(t, r, seed)
            })),
        ];
        for (name, err) in errs {
            assert!(err < tol, "{name}: relative error {err:e} (trial {trial})");
        }
    }
}

/// 4-layer ReLU MLP evaluated on a small batch, scalar output.
fn mlp_loss(tape: &mut Tape, weights: &[NodeId], biases: &[NodeId], input: NodeId) -> NodeId {
    let mut h = input;
    for (i, (w, b)) in weights.iter().zip(biases).enumerate() {
        let z = tape.matmul(h, *w).unwrap();
        let z = tape.add_row(z, *b).unwrap();
        h = if i + 1 < weights.len() { tape.relu(z).unwrap() } else { z };
    }
    let lsm = tape.log_softmax(h).unwrap();
    tape.mean(lsm).unwrap()
}

#[test]
fn four_layer_mlp_matches_finite_differences() {
    let dims = [5usize, 16, 16, 16, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut flat: Vec<f64> = Vec::new();
    let mut layout = Vec::new();
    for w in dims.windows(2) {
        layout.push((flat.len(), w[0], w[1]));
        flat.extend(random_vec(&mut rng, w[0] * w[1]).iter().map(|v| v * 0.8));
        flat.extend(random_vec(&mut rng, w[1]).iter().map(|v| v * 0.1));
    }
    let input = Tensor::matrix(6, 5, random_vec(&mut rng, 30));

    let build = |tape: &mut Tape, params: &[f64]| {
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for &(off, i, o) in &layout {
            ws.push(tape.param(Tensor::matrix(i, o, params[off..off + i * o].to_vec())));
            bs.push(tape.param(Tensor::vector(params[off + i * o..off + i * o + o].to_vec())));
        }
        let x = tape.constant(input.clone());
        let root = mlp_loss(tape, &ws, &bs, x);
        (ws, bs, root)
    };

    let mut tape = Tape::new();
    let (ws, bs, root) = build(&mut tape, &flat);
    let grads = tape.backward(root).unwrap();
    let mut analytic = Vec::new();
    for (w, b) in ws.iter().zip(&bs) {
        analytic.extend_from_slice(grads.get(*w).unwrap().data());
        analytic.extend_from_slice(grads.get(*b).unwrap().data());
    }
    let numeric = central_difference(
        |p| {
            let mut t = Tape::new();
            let (_, _, r) = build(&mut t, p);
            t.value(r).item()
        },
        &flat,
        FD_STEP,
    );
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn gradients_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(8, 6, random_vec(&mut rng, 48)));
        let x = tape.constant(Tensor::matrix(10, 8, random_vec(&mut rng, 80)));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.relu(h).unwrap();
        let s = tape.softmax(h).unwrap();
        let root = tape.mean(s).unwrap();
        tape.backward(root).unwrap().take(w).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn softmax_with_large_logits_is_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1000.0, 999.0, -1000.0]));
    let s = tape.softmax(x).unwrap();
    let ls = tape.log_softmax(x).unwrap();
    assert!(tape.value(s).is_finite());
    assert!(tape.value(ls).is_finite());
    assert!((tape.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn normalize_rejects_zero_vector() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 3]));
    assert!(matches!(tape.normalize(x), Err(AutodiffError::Domain { .. })));
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_simplex(
        logits in proptest::collection::vec(-30.0f64..30.0, 6),
        shift in -50.0f64..50.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(logits.clone()));
        let shifted = tape.add_scalar(x, shift).unwrap();
        let p = tape.softmax(x).unwrap();
        let q = tape.softmax(shifted).unwrap();
        let p = tape.value(p).data();
        let q = tape.value(q).data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in p.iter().zip(q) {
            prop_assert!(*a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_is_linear(
        x0 in proptest::collection::vec(-2.0f64..2.0, 4),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        // f = sum(x^2), g = sum(sin x)
        let grad_of = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::vector(x0.clone()));
            let f = tape.dot(x, x).unwrap();
            let s = tape.sin(x).unwrap();
            let g = tape.sum(s).unwrap();
            let fa = tape.scale(f, a).unwrap();
            let gb = tape.scale(g, b).unwrap();
            let root = tape.add(fa, gb).unwrap();
            tape.backward(root).unwrap().take(x).unwrap().into_data()
        };
        let combined = grad_of(alpha, beta);
        let f = grad_of(1.0, 0.0);
        let g = grad_of(0.0, 1.0);
        for i in 0..4 {
            prop_assert!((combined[i] - (alpha * f[i] + beta * g[i])).abs() < 1e-12);
        }
    }
}

mod adam {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::new(AdamConfig::with_lr(0.01), [("w", 1)]);
        let mut w = [0.5];
        state.step(&mut [&mut w], &[&[1.0]]).unwrap();
        let expected = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new(AdamConfig::with_lr(0.1), [("a", 3), ("b", 2)]);
        let mut a = [1.0, -2.0, 3.0];
        let mut b = [4.0, 5.0];
        state
            .step(&mut [&mut a, &mut b], &[&[0.0; 3], &[0.0; 2]])
            .unwrap();
        assert_eq!(a, [1.0, -2.0, 3.0]);
        assert_eq!(b, [4.0, 5.0]);
        assert_eq!(state.step_count(), 1);
    }

    /// Textbook scalar Adam, kept separate from the vectorized update.
    fn reference_adam(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn ten_steps_on_a_parabola_follow_reference() {
        let reference = reference_adam(1.0, 0.1, 10);
        let mut state = AdamState::new(AdamConfig::with_lr(0.1), [("w", 1)]);
        let mut w = [1.0];
        let mut prev = w[0];
        for expected in reference {
            let g = [2.0 * w[0]];
            state.step(&mut [&mut w], &[&g]).unwrap();
            assert!(w[0] < prev);
            assert!(w[0] > 0.0);
            assert!((w[0] - expected).abs() < 1e-14);
            prev = w[0];
        }
        assert_eq!(state.step_count(), 10);
    }

    #[test]
    fn non_finite_gradient_names_group_and_changes_nothing() {
        let mut state = AdamState::new(AdamConfig::default(), [("weights", 2), ("latent", 1)]);
        let mut a = [1.0, 2.0];
        let mut b = [3.0];
        let err = state
            .step(&mut [&mut a, &mut b], &[&[0.1, 0.2], &[f64::NAN]])
            .unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient { group: "latent".into() });
        assert_eq!(a, [1.0, 2.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn moments_match_parameter_shape() {
        let state = AdamState::new(AdamConfig::default(), [("w", 7)]);
        assert_eq!(state.first_moment(0).len(), 7);
        assert_eq!(state.second_moment(0).len(), 7);
    }
}
