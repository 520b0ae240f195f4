use super::*;
use crate::gradcheck::{central_difference_at, max_relative_error};
use rand::seq::index::sample;
use std::f64::consts::LN_2;

fn random_points(n: usize, seed: u64, extent: f64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [0; 3].map(|_| rng.gen_range(-extent..extent)))
        .collect()
}

fn random_labels(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect()
}

fn one_hot(labels: &[u8], on: f64) -> Vec<[f64; NUM_CLASSES]> {
    let off = (1.0 - on) / (NUM_CLASSES - 1) as f64;
    labels
        .iter()
        .map(|l| {
            let mut p = [off; NUM_CLASSES];
            p[*l as usize] = on;
            p
        })
        .collect()
}

/// Total loss `CE + Dice + λ‖z‖²` recorded on a tape.
fn tape_total(model: &ModelState, z: &[f64], points: &[[f64; 3]], labels: &[u8], trainable: bool) -> (Tape, NodeId, ModelNodes, NodeId) {
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, trainable);
    let zn = tape.param(Tensor::vector(z.to_vec()));
    let terms = model.latent_terms(&mut tape, &nodes, zn).unwrap();
    let x = tape.constant(Tensor::matrix(points.len(), 3, points.iter().flatten().copied().collect()));
    let logits = model.tape_logits(&mut tape, &nodes, terms, x).unwrap();
    let data = tape_data_loss(&mut tape, logits, labels).unwrap();
    let pen = tape_latent_penalty(&mut tape, zn, LATENT_REG).unwrap();
    let root = tape.add(data, pen).unwrap();
    (tape, root, nodes, zn)
}

/// Independent evaluation of the total loss through the tape-free forward.
fn plain_total(model: &ModelState, z: &[f64], points: &[[f64; 3]], labels: &[u8]) -> f64 {
    let probs = model.probs(points, z).unwrap();
    let data = cross_entropy(&probs, labels).unwrap() + soft_dice(&probs, labels).unwrap();
    loss_total(data, z, LATENT_REG)
}

#[test]
fn forward_is_a_probability_vector() {
    let model = init_model(3);
    for (i, x) in random_points(50, 1, 100.0).into_iter().enumerate() {
        let z = init_latent(128, i as u64);
        let p = model.forward(x, &z).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fresh_model_is_near_uniform() {
    let model = init_model(11);
    let z = init_latent(128, 2);
    let probs = model.probs(&random_points(1000, 5, 100.0), &z).unwrap();
    for k in 0..NUM_CLASSES {
        let mean = probs.iter().map(|p| p[k]).sum::<f64>() / probs.len() as f64;
        assert!((mean - 1.0 / 6.0).abs() < 0.15, "class {k}: {mean}");
    }
}

#[test]
fn batch_forward_equals_single_forwards() {
    let model = init_model(4);
    let z = init_latent(128, 9);
    // spans several inference chunks
    let points = random_points(5000, 2, 90.0);
    let batch = model.probs(&points, &z).unwrap();
    for (x, p) in points.iter().zip(&batch).step_by(37) {
        let single = model.forward(*x, &z).unwrap();
        for k in 0..NUM_CLASSES {
            assert!((single[k] - p[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn tape_forward_matches_plain_forward() {
    let model = init_model(8);
    let z = init_latent(128, 1);
    let points = random_points(40, 3, 80.0);
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, false);
    let zn = tape.constant(Tensor::vector(z.clone()));
    let terms = model.latent_terms(&mut tape, &nodes, zn).unwrap();
    let x = tape.constant(Tensor::matrix(40, 3, points.iter().flatten().copied().collect()));
    let logits = model.tape_logits(&mut tape, &nodes, terms, x).unwrap();
    let plain = model.logits(&points, &z).unwrap();
    for (a, b) in tape.value(logits).data().iter().zip(&plain) {
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn wrong_latent_dimension_is_rejected() {
    let model = init_model(0);
    assert_eq!(
        model.forward([0.0; 3], &[0.0; 127]).unwrap_err(),
        ModelError::LatentDim { expected: 128, got: 127 }
    );
}

#[test]
fn argmax_ties_take_lowest_class() {
    assert_eq!(argmax(&[0.2, 0.4, 0.4, 0.0]), 1);
    assert_eq!(argmax(&[0.5; 6]), 0);
}

#[test]
fn initialization_is_seeded() {
    assert_eq!(init_model(5), init_model(5));
    assert_ne!(init_model(5), init_model(6));
    assert_eq!(init_latent(128, 1), init_latent(128, 1));
    assert_ne!(init_latent(128, 1), init_latent(128, 2));
}

#[test]
fn latent_draws_have_requested_spread() {
    let draws = init_latent(10_000, 77);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((var.sqrt() - 0.01).abs() < 0.001, "std {}", var.sqrt());
}

#[test]
fn cross_entropy_examples() {
    let labels = [2, 4];
    assert!(cross_entropy(&one_hot(&labels, 1.0), &labels).unwrap().abs() < 1e-15);
    let uniform = vec![[1.0 / 6.0; 6]; 3];
    assert!((cross_entropy(&uniform, &[0, 1, 5]).unwrap() - 6f64.ln()).abs() < 1e-12);
    let mixed = [one_hot(&[1], 0.5)[0], one_hot(&[3], 0.25)[0]];
    let expected = (LN_2 + 4f64.ln()) / 2.0;
    assert!((cross_entropy(&mixed, &[1, 3]).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 1.03972).abs() < 1e-5);
    assert_eq!(cross_entropy(&[], &[]).unwrap_err(), ModelError::EmptyBatch);
}

#[test]
fn soft_dice_examples() {
    let labels = random_labels(100, 4);
    assert!(soft_dice(&one_hot(&labels, 1.0), &labels).unwrap() <= 1e-6);

    let wrong: Vec<u8> = labels.iter().map(|l| (l + 1) % 6).collect();
    assert!(soft_dice(&one_hot(&wrong, 1.0), &labels).unwrap() > 1.0 - 1e-6);

    // Four points, class 1 at two of them, class 0 at the rest, uniform probs.
    let labels = [1, 1, 0, 0];
    let probs = vec![[1.0 / 6.0; 6]; 4];
    let s = DICE_SMOOTHING;
    let per_class = (2.0 * (2.0 / 6.0) + s) / (4.0 / 6.0 + 2.0 + s);
    let expected = 1.0 - per_class;
    assert!((soft_dice(&probs, &labels).unwrap() - expected).abs() < 1e-15);
    assert!((expected - 0.75).abs() < 1e-6);
    assert!(matches!(soft_dice(&[], &[]), Err(ModelError::EmptyBatch)));
}

#[test]
fn total_loss_examples() {
    assert_eq!(loss_total(0.7, &[0.0; 128], LATENT_REG), 0.7);
    let z = vec![1.0; 100];
    assert!((loss_total(0.5, &z, 1e-4) - 0.51).abs() < 1e-15);
}

#[test]
fn tape_losses_match_plain_losses() {
    let model = init_model(21);
    let z = init_latent(128, 4);
    let points = random_points(64, 8, 90.0);
    let labels = random_labels(64, 9);
    let (tape, root, _, _) = tape_total(&model, &z, &points, &labels, false);
    let plain = plain_total(&model, &z, &points, &labels);
    assert!((tape.value(root).item() - plain).abs() < 1e-12);
}

#[test]
fn latent_gradient_contains_regularizer() {
    // With a frozen network, d/dz of λ‖z‖² alone is 2λz.
    let mut tape = Tape::new();
    let z: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let zn = tape.param(Tensor::vector(z.clone()));
    let root = tape_latent_penalty(&mut tape, zn, 0.3).unwrap();
    let g = tape.backward(root).unwrap();
    for (g, z) in g.get(zn).unwrap().data().iter().zip(&z) {
        assert!((g - 0.6 * z).abs() < 1e-14);
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let points = random_points(48, 31, 90.0);
    let labels = random_labels(48, 32);
    for seed in 0..3 {
        let model = init_model(seed);
        let z: Vec<f64> = init_latent(128, seed + 100).iter().map(|v| v * 50.0).collect();
        let (tape, root, nodes, zn) = tape_total(&model, &z, &points, &labels, true);
        let grads = tape.backward(root).unwrap();

        // latent code: every component
        let analytic = grads.get(zn).unwrap().data().to_vec();
        let idx: Vec<usize> = (0..z.len()).collect();
        let numeric = central_difference_at(|zz| plain_total(&model, zz, &points, &labels), &z, &idx, 1e-6);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: latent rel err {err}");

        // network: a random subset of every parameter block
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (block, ((name, t), id)) in model.named_params().into_iter().zip(nodes.ids()).enumerate() {
            let picks: Vec<usize> = sample(&mut rng, t.len(), t.len().min(4)).into_vec();
            let analytic: Vec<f64> = picks.iter().map(|i| grads.get(id).unwrap().data()[*i]).collect();
            let numeric = central_difference_at(
                |vals| {
                    let mut m = model.clone();
                    m.param_slices_mut()[block].copy_from_slice(vals);
                    plain_total(&m, &z, &points, &labels)
                },
                t.data(),
                &picks,
                // coordinate weights see inputs of up to ~90 mm; a smaller
                // step keeps the probe from straddling a ReLU kink
                if name.ends_with("w_x") { 1e-7 } else { 1e-5 },
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: {name} rel err {err} {analytic:?} {numeric:?}");
        }
    }
}

#[test]
fn losses_ignore_batch_order() {
    let model = init_model(2);
    let z = init_latent(128, 2);
    let points = random_points(64, 1, 90.0);
    let labels = random_labels(64, 2);
    let mut order: Vec<usize> = (0..64).collect();
    order.reverse();
    order.swap(3, 40);
    let p2: Vec<_> = order.iter().map(|i| points[*i]).collect();
    let l2: Vec<_> = order.iter().map(|i| labels[*i]).collect();
    let a = model.probs(&points, &z).unwrap();
    let b = model.probs(&p2, &z).unwrap();
    assert!((cross_entropy(&a, &labels).unwrap() - cross_entropy(&b, &l2).unwrap()).abs() < 1e-12);
    assert!((soft_dice(&a, &labels).unwrap() - soft_dice(&b, &l2).unwrap()).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let model = init_model(12);
    let codebook = LatentCodebook::init(vec!["case_000".into(), "case_001".into()], 128, LATENT_REG, 3);
    let ckpt = Checkpoint { model, codebook };
    let mut bytes = Vec::new();
    write_checkpoint(&ckpt, &mut bytes).unwrap();
    let loaded = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(loaded, ckpt.quantized());
    let mut again = Vec::new();
    write_checkpoint(&loaded, &mut again).unwrap();
    assert_eq!(bytes, again);

    let x = [12.0, -30.5, 44.0];
    let z = loaded.codebook.get("case_001").unwrap();
    let reference = ckpt.quantized();
    assert_eq!(
        loaded.model.forward(x, z).unwrap(),
        reference.model.forward(x, reference.codebook.get("case_001").unwrap()).unwrap()
    );
}

#[test]
fn checkpoint_rejects_corruption() {
    let ckpt = Checkpoint {
        model: init_model(1),
        codebook: LatentCodebook::init(vec!["a".into()], 128, LATENT_REG, 0),
    };
    let mut bytes = Vec::new();
    write_checkpoint(&ckpt, &mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(bad.as_slice()), Err(CheckpointError::BadMagic)));
    let truncated = &bytes[..bytes.len() - 4];
    assert!(matches!(read_checkpoint(truncated), Err(CheckpointError::Inconsistent(_))));
    let mut relabeled = bytes.clone();
    let at = relabeled.windows(8).position(|w| w == b"\"LV-myo\"").unwrap();
    relabeled[at + 4..at + 7].copy_from_slice(b"MYO");
    assert!(matches!(read_checkpoint(relabeled.as_slice()), Err(CheckpointError::ClassOrder { .. })));
}

#[test]
fn activation_pattern_is_per_point() {
    let model = init_model(3);
    let z = vec![0.01; model.arch.latent_dim];
    let points = random_points(37, 8, 60.0);
    let per_point = model.arch.width * model.arch.hidden_layers;
    let all = model.activation_pattern(&points, &z).unwrap();
    assert_eq!(all.len(), points.len() * per_point);
    for (i, p) in points.iter().enumerate() {
        let one = model.activation_pattern(&[*p], &z).unwrap();
        assert_eq!(one, all[i * per_point..(i + 1) * per_point]);
    }
    let active = all.iter().filter(|a| **a).count();
    assert!(active > 0 && active < all.len());
    assert!(model.activation_pattern(&points, &[0.0; 3]).is_err());
}
