//! Fusion head against the brute-force oracle.

mod common;

use common::{fusion_oracle, random_tensor, random_triple};
use seqmosaic::fusion::{
    fuse, fuse_backward, pairwise_embedded, pairwise_gaussian, FrameTriple, FusionHead,
    Neighborhood,
};
use seqmosaic::rng::Rng;
use seqmosaic::tensor::Tensor;

#[test]
fn pairwise_gaussian_matches_direct_exp_dot() {
    let mut rng = Rng::new(21);
    for _ in 0..100 {
        let v: Vec<f64> = (0..4).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let k: Vec<f64> = (0..4).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let got = pairwise_gaussian(&v, &k).unwrap();
        let dot: f64 = v.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((got - dot.exp()).abs() <= 1e-12 * dot.exp());
    }
}

#[test]
fn pairwise_embedded_matches_two_step_oracle() {
    let mut rng = Rng::new(22);
    let head = FusionHead::glorot(4, 3, Neighborhood::EightNeighbor, &mut rng);
    for _ in 0..100 {
        let v: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = pairwise_embedded(&head, &v, &k).unwrap();
        // embed by hand, then apply the plain pairwise function
        let embed = |m: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..m.shape()[0])
                .map(|r| (0..4).map(|c| m.data()[r * 4 + c] * x[c]).sum())
                .collect()
        };
        let expected = pairwise_gaussian(&embed(head.w_theta(), &v), &embed(head.w_phi(), &k)).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected);
    }
}

#[test]
fn fuse_matches_brute_force_oracle_both_modes() {
    let mut rng = Rng::new(23);
    for mode in [Neighborhood::EightNeighbor, Neighborhood::AllPositions] {
        for _ in 0..20 {
            let c = 1 + rng.index(4);
            let h = 2 + rng.index(4);
            let w = 2 + rng.index(4);
            let head = FusionHead::glorot(c, 1 + rng.index(c), mode, &mut rng);
            let triple = random_triple(c, h, w, &mut rng);
            let got = fuse(&head, &triple).unwrap();
            let expected = fusion_oracle(&head, &triple, 0.0);
            assert!(
                got.max_abs_diff(&expected) < 1e-10,
                "mode {mode:?} c={c} {h}x{w}"
            );
        }
    }
}

#[test]
fn fuse_is_invariant_to_exponent_shifts() {
    // adding a constant to every embedded dot product at a position must not
    // change the output; exercised by shifting the oracle's exponents
    let mut rng = Rng::new(24);
    let head = FusionHead::glorot(3, 2, Neighborhood::EightNeighbor, &mut rng);
    let triple = random_triple(3, 4, 4, &mut rng);
    let got = fuse(&head, &triple).unwrap();
    for shift in [-3.0, 0.7, 5.0] {
        let shifted = fusion_oracle(&head, &triple, shift);
        assert!(got.max_abs_diff(&shifted) < 1e-12);
    }
}

#[test]
fn single_position_backward_matches_closed_form() {
    // one spatial position with identity embeddings: y = q ⊙ q, so
    // dL/dq = 2 u ⊙ q and every other gradient is zero except through W_g
    let head = FusionHead::identity(3, Neighborhood::EightNeighbor);
    let q = Tensor::new(&[3, 1, 1], vec![1.5, -0.5, 2.0]).unwrap();
    let triple = FrameTriple::new(q.clone(), q.clone(), q.clone()).unwrap();
    let upstream = Tensor::new(&[3, 1, 1], vec![1.0, 2.0, -1.0]).unwrap();
    let grads = fuse_backward(&head, &triple, &upstream).unwrap();
    for i in 0..3 {
        let expected = 2.0 * upstream.data()[i] * q.data()[i];
        assert!((grads.query.data()[i] - expected).abs() < 1e-12);
    }
    // the affinity is constant (single neighbour), so value/key gradients die
    assert!(grads.value.data().iter().all(|&g| g.abs() < 1e-12));
    assert!(grads.key.data().iter().all(|&g| g.abs() < 1e-12));
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = Rng::new(25);
    let head = FusionHead::glorot(3, 2, Neighborhood::EightNeighbor, &mut rng);
    let triple = random_triple(3, 3, 4, &mut rng);
    let probe = random_tensor(&[3, 3, 4], &mut rng, -1.0, 1.0);
    let grads = fuse_backward(&head, &triple, &probe).unwrap();

    // finite differences through the public forward path, on the query
    let h = 1e-5;
    let loss = |t: &FrameTriple| -> f64 {
        fuse(&head, t)
            .unwrap()
            .data()
            .iter()
            .zip(probe.data())
            .map(|(y, p)| y * p)
            .sum()
    };
    for i in 0..triple.query.len() {
        let mut plus = triple.clone();
        plus.query.data_mut()[i] += h;
        let mut minus = triple.clone();
        minus.query.data_mut()[i] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grads.query.data()[i];
        let rel = (numeric - analytic).abs() / 1.0f64.max(numeric.abs()).max(analytic.abs());
        assert!(rel < 1e-4, "query[{i}]: {analytic} vs {numeric}");
    }
}

#[test]
fn output_shape_is_preserved() {
    let mut rng = Rng::new(26);
    for (c, h, w) in [(1, 1, 1), (2, 1, 5), (4, 6, 6)] {
        let head = FusionHead::glorot(c, 1.max(c / 2), Neighborhood::EightNeighbor, &mut rng);
        let triple = random_triple(c, h, w, &mut rng);
        let out = fuse(&head, &triple).unwrap();
        assert_eq!(out.shape(), &[c, h, w]);
    }
}
