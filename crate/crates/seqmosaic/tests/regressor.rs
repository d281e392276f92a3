//! Regressor forward/backward against composed references, plus training
//! behaviour and checkpoint round-trips.

mod common;

use common::TempDir;
use seqmosaic::fusion::{fuse, FrameTriple};
use seqmosaic::homography::ThreePointDelta;
use seqmosaic::pig;
use seqmosaic::regressor::{
    backward, checkpoint, euclidean_loss, forward, global_mean_pool, max_pool2, momentum_step,
    ncc_descriptor, record_to_sample, relu_forward, train, RegressorModel, TrainConfig,
};
use seqmosaic::rng::Rng;
use seqmosaic::tensor::Tensor;

fn toy_triple(patch: usize, seed: u64) -> FrameTriple {
    let mut rng = Rng::new(seed);
    let mk = |rng: &mut Rng| Tensor::from_fn(&[1, patch, patch], |_| rng.uniform(0.0, 1.0));
    FrameTriple::new(mk(&mut rng), mk(&mut rng), mk(&mut rng)).unwrap()
}

fn randomized_model(patch: usize, seed: u64) -> RegressorModel {
    // nonzero output layer so the full pathway matters
    let mut model = RegressorModel::new(patch, 4, seed).unwrap();
    let mut rng = Rng::stream(seed, 999);
    let mut params = model.params_vec();
    let n = params.len();
    for p in &mut params[n - 6 * 65..] {
        *p = rng.uniform(-0.2, 0.2);
    }
    model.set_params_vec(&params).unwrap();
    model
}

/// Reference forward pass composed from the public kernel operations,
/// independent of the model's own cached pipeline.
fn reference_forward(model: &RegressorModel, triple: &FrameTriple) -> [f64; 6] {
    let stem = |input: &Tensor| -> Tensor {
        let mut x = input.clone();
        for (i, layer) in model.conv_layers().iter().enumerate() {
            x = relu_forward(&layer.forward(&x).unwrap());
            if i == 1 || i == 3 {
                x = max_pool2(&x).unwrap().0;
            }
        }
        x
    };
    let fq = stem(&triple.query);
    let fk = stem(&triple.key);
    let fv = stem(&triple.value);
    let radius = seqmosaic::regressor::corr_radius(model.patch() / 4);
    let ncc = ncc_descriptor(&fq, &fv, radius, seqmosaic::regressor::NCC_SCALE).unwrap();
    let fused = fuse(
        model.fusion_head(),
        &FrameTriple::new(fq, fk, fv).unwrap(),
    )
    .unwrap();
    let mut head_in = global_mean_pool(&fused);
    head_in.extend_from_slice(&ncc.values);
    let h: Vec<f64> = model
        .fc1()
        .forward(&head_in)
        .unwrap()
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    let out = model.fc2().forward(&h).unwrap();
    let mut pred = [0.0; 6];
    pred.copy_from_slice(&out);
    pred
}

#[test]
fn forward_matches_composed_reference() {
    let model = randomized_model(8, 41);
    for seed in 0..5 {
        let triple = toy_triple(8, 100 + seed);
        let got = forward(&model, &triple).unwrap().to_flat();
        let expected = reference_forward(&model, &triple);
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
    }
}

#[test]
fn euclidean_loss_matches_direct_sum() {
    let mut rng = Rng::new(42);
    for _ in 0..100 {
        let a: Vec<f64> = (0..6).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let pa = ThreePointDelta::from_flat(a.clone().try_into().unwrap());
        let pb = ThreePointDelta::from_flat(b.clone().try_into().unwrap());
        let direct: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 2.0;
        assert!((euclidean_loss(&pa, &pb) - direct).abs() < 1e-12);
    }
}

#[test]
fn final_layer_gradient_is_residual_times_hidden() {
    let model = randomized_model(8, 43);
    let triple = toy_triple(8, 44);
    let truth = ThreePointDelta::from_flat([1.0, -2.0, 0.5, 3.0, -1.0, 2.0]);
    let (_, grads) = backward(&model, &triple, &truth).unwrap();

    let pred = forward(&model, &triple).unwrap().to_flat();
    let (_, hidden) = seqmosaic::regressor::debug_head_features(&model, &triple).unwrap();
    for o in 0..6 {
        let residual = pred[o] - truth.to_flat()[o];
        assert!((grads.fc2_b[o] - residual).abs() < 1e-12);
        for k in 0..hidden.len() {
            let expected = residual * hidden[k];
            assert!((grads.fc2_w.at2(o, k) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn momentum_step_with_zero_rate_changes_nothing() {
    let mut params = vec![1.0, -2.0, 3.0];
    let mut velocity = vec![0.0; 3];
    for _ in 0..10 {
        momentum_step(&mut params, &mut velocity, &[5.0, -1.0, 2.0], 0.0, 0.9);
    }
    assert_eq!(params, vec![1.0, -2.0, 3.0]);
    assert_eq!(velocity, vec![0.0; 3]);
}

#[test]
fn full_batch_descent_is_monotone_at_small_rate() {
    // descent sanity: with a small enough step the full-batch loss cannot
    // increase over the first steps
    let patch = 16;
    let frame = pig::procedural_texture(patch, patch, 50, 0);
    let mut rng = Rng::new(51);
    let records: Vec<pig::PigRecord> = (0..4)
        .map(|_| pig::perturb(&frame, pig::sample_params(&mut rng)).unwrap())
        .collect();
    let samples: Vec<_> = records.iter().map(|r| record_to_sample(r, patch).unwrap()).collect();

    let mut model = RegressorModel::new(patch, 4, 52).unwrap();
    let mut params = model.params_vec();
    let mut velocity = vec![0.0; params.len()];
    let mean_loss = |m: &RegressorModel| -> f64 {
        samples
            .iter()
            .map(|(t, d)| euclidean_loss(&forward(m, t).unwrap(), d))
            .sum::<f64>()
            / samples.len() as f64
    };
    let mut prev = mean_loss(&model);
    for _ in 0..10 {
        let mut grads = vec![0.0; params.len()];
        for (t, d) in &samples {
            let (_, g) = backward(&model, t, d).unwrap();
            for (dst, src) in grads.iter_mut().zip(g.to_vec()) {
                *dst += src;
            }
        }
        for g in &mut grads {
            *g /= samples.len() as f64;
        }
        // momentum 0 isolates the descent property
        momentum_step(&mut params, &mut velocity, &grads, 1e-6, 0.0);
        model.set_params_vec(&params).unwrap();
        let loss = mean_loss(&model);
        assert!(loss <= prev + 1e-12, "loss rose: {prev} -> {loss}");
        prev = loss;
    }
}

#[test]
fn training_reduces_holdout_error_quickly() {
    // miniature version of the training-sanity run; the first ~50 updates
    // mostly grow the zero-initialized output layer, so the budget must
    // reach past that
    let patch = 32;
    let build = |count: usize, first: usize| -> Vec<pig::PigRecord> {
        (0..count)
            .map(|i| {
                let idx = first + i;
                let base = pig::procedural_texture(patch, patch, 60, 0x100 + idx as u64);
                let params = pig::sample_params(&mut Rng::stream(60, 0x9000 + idx as u64));
                pig::perturb(&base, params).unwrap()
            })
            .collect()
    };
    let train_set = build(128, 0);
    let eval_set = build(32, 128);
    let cfg = TrainConfig {
        patch,
        epochs: 1000,
        max_iters: Some(150),
        seed: 61,
        ..TrainConfig::default()
    };
    let model = RegressorModel::new(patch, 4, 61).unwrap();
    let (_, log) = train(model, &train_set, &cfg, &eval_set).unwrap();
    let first = log.rows.first().unwrap().holdout_corner_error_px;
    let last = log.rows.last().unwrap().holdout_corner_error_px;
    assert!(
        last < first * 0.85,
        "holdout error should drop >15%: {first} -> {last}"
    );
}

#[test]
fn save_load_preserves_forward_outputs_bit_exactly() {
    let dir = TempDir::new("ckpt");
    let model = randomized_model(8, 70);
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params_vec(), model.params_vec());
    for seed in 0..5 {
        let triple = toy_triple(8, 200 + seed);
        let a = forward(&model, &triple).unwrap().to_flat();
        let b = forward(&loaded, &triple).unwrap().to_flat();
        assert_eq!(a, b);
    }
}

#[test]
fn sample_targets_match_record_truth() {
    let frame = pig::procedural_texture(64, 64, 80, 0);
    let params = pig::PigParams::new(0.1, 5.0, -4.0).unwrap();
    let rec = pig::perturb(&frame, params).unwrap();
    let (_, target) = record_to_sample(&rec, 64).unwrap();
    // frames equal patch size: the target is exactly the truth's deltas on
    // the frame rectangle
    let pc = seqmosaic::homography::PatchCorners::of_frame(64, 64);
    let expected = seqmosaic::homography::deltas_from_affine(&pc, &rec.truth);
    for (a, b) in target.deltas.iter().zip(expected.deltas) {
        assert!((a.0 - b.0).abs() < 1e-12);
        assert!((a.1 - b.1).abs() < 1e-12);
    }
}
