//! Metric identities and drift behaviour.

mod common;

use seqmosaic::frame::ImageFrame;
use seqmosaic::homography::{AffineTransform, PatchCorners};
use seqmosaic::metrics::{ape, drift_curve, mre, rmse};
use seqmosaic::mosaic::accumulate;
use seqmosaic::rng::Rng;

fn random_image(w: usize, h: usize, rng: &mut Rng) -> ImageFrame {
    ImageFrame::from_fn(w, h, |_, _| rng.next_f64())
}

#[test]
fn mre_matches_per_corner_distance_oracle() {
    let mut rng = Rng::new(71);
    let reference = PatchCorners::rect(0.0, 0.0, 63.0, 63.0).unwrap();
    let mut rels = vec![AffineTransform::IDENTITY];
    for _ in 0..10 {
        rels.push(AffineTransform::rigid_about(
            rng.uniform(-0.1, 0.1),
            rng.uniform(-5.0, 5.0),
            rng.uniform(-5.0, 5.0),
            (31.5, 31.5),
        ));
    }
    let truth = accumulate(&rels).unwrap();
    // perturbed prediction
    let mut pred_rels = rels.clone();
    for r in pred_rels.iter_mut().skip(1) {
        r.tx += rng.uniform(-0.5, 0.5);
        r.ty += rng.uniform(-0.5, 0.5);
    }
    let pred = accumulate(&pred_rels).unwrap();
    let (per_frame, mean) = mre(&pred, &truth, &reference).unwrap();

    // direct evaluation
    let mut expected = Vec::new();
    for t in 1..rels.len() {
        let mut sum = 0.0;
        for &c in reference.corners() {
            let p = pred.global()[t].apply(c);
            let q = truth.global()[t].apply(c);
            sum += ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        }
        expected.push(sum / 4.0);
    }
    for (a, b) in per_frame.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let expected_mean = expected.iter().sum::<f64>() / expected.len() as f64;
    assert!((mean - expected_mean).abs() < 1e-12);
}

#[test]
fn mre_is_invariant_under_shared_rigid_anchor() {
    let mut rng = Rng::new(72);
    let reference = PatchCorners::rect(0.0, 0.0, 31.0, 31.0).unwrap();
    let mut rels_truth = vec![AffineTransform::IDENTITY];
    let mut rels_pred = vec![AffineTransform::IDENTITY];
    for _ in 0..8 {
        let step = AffineTransform::rigid_about(
            rng.uniform(-0.1, 0.1),
            rng.uniform(-4.0, 4.0),
            rng.uniform(-4.0, 4.0),
            (15.5, 15.5),
        );
        rels_truth.push(step);
        let mut noisy = step;
        noisy.tx += rng.uniform(-0.4, 0.4);
        rels_pred.push(noisy);
    }
    let (_, base_mean) = mre(
        &accumulate(&rels_pred).unwrap(),
        &accumulate(&rels_truth).unwrap(),
        &reference,
    )
    .unwrap();

    // re-anchor frame 0 of BOTH chains with the same rigid map
    let anchor = AffineTransform::rigid_about(0.4, 11.0, -6.0, (0.0, 0.0));
    let re_anchor = |rels: &[AffineTransform]| {
        let chain = accumulate(rels).unwrap();
        let globals: Vec<AffineTransform> =
            chain.global().iter().map(|g| anchor.compose(g)).collect();
        globals
    };
    let ga = re_anchor(&rels_pred);
    let gb = re_anchor(&rels_truth);
    // direct corner comparison of the re-anchored chains
    let mut sum = 0.0;
    for t in 1..ga.len() {
        let mut frame_sum = 0.0;
        for &c in reference.corners() {
            let p = ga[t].apply(c);
            let q = gb[t].apply(c);
            frame_sum += ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        }
        sum += frame_sum / 4.0;
    }
    let anchored_mean = sum / (ga.len() - 1) as f64;
    assert!((anchored_mean - base_mean).abs() < 1e-9);
}

#[test]
fn ape_bounded_by_rmse_and_both_match_oracles() {
    let mut rng = Rng::new(73);
    for _ in 0..200 {
        let a = random_image(12, 9, &mut rng);
        let b = random_image(12, 9, &mut rng);
        let mask = vec![true; 12 * 9];
        let r = rmse(&a, &b, &mask).unwrap();
        let p = ape(&a, &b, &mask).unwrap();
        assert!(p <= r + 1e-15, "ape {p} > rmse {r}");

        // direct two-pass oracles
        let n = mask.len() as f64;
        let sq: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ab: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        assert!((r - sq.sqrt()).abs() < 1e-12);
        assert!((p - ab).abs() < 1e-12);
    }
}

#[test]
fn partial_masks_select_pixels() {
    let a = ImageFrame::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
    let b = ImageFrame::from_vec(2, 2, vec![1.0, 1.0, 0.5, 0.75]).unwrap();
    let mask = vec![true, false, false, true];
    // only pixels 0 (diff 1.0) and 3 (diff 0.5) count
    assert!((ape(&a, &b, &mask).unwrap() - 0.75).abs() < 1e-15);
    assert!((rmse(&a, &b, &mask).unwrap() - (0.625f64).sqrt()).abs() < 1e-15);
}

#[test]
fn drift_curve_flags_injected_error_from_injection_point_on() {
    let frames: Vec<ImageFrame> = {
        let mut rng = Rng::new(74);
        (0..12).map(|_| random_image(64, 64, &mut rng)).collect()
    };
    let mut rels = vec![AffineTransform::IDENTITY];
    for _ in 1..12 {
        rels.push(AffineTransform::translation(2.0, 1.0));
    }
    let truth = accumulate(&rels).unwrap();
    // inject a 5 px translation error at frame 6
    let inject_at = 6;
    let mut bad = rels.clone();
    bad[inject_at] = AffineTransform::translation(5.0, 0.0).compose(&bad[inject_at]);
    let pred = accumulate(&bad).unwrap();
    let report = drift_curve(&pred, &truth, &frames).unwrap();
    assert_eq!(report.per_frame.len(), 11);
    for row in &report.per_frame {
        if row.frame < inject_at {
            assert_eq!(row.corner_error_px, 0.0, "frame {}", row.frame);
            assert!(row.rmse < 1e-12);
        } else {
            assert!(
                row.corner_error_px >= 4.99,
                "frame {}: {}",
                row.frame,
                row.corner_error_px
            );
            assert!(row.rmse > 0.0);
        }
    }
}

#[test]
fn drift_curve_zero_for_identical_chains() {
    let frames: Vec<ImageFrame> = {
        let mut rng = Rng::new(75);
        (0..5).map(|_| random_image(64, 64, &mut rng)).collect()
    };
    let mut rels = vec![AffineTransform::IDENTITY];
    for t in 1..5 {
        rels.push(AffineTransform::rigid_about(
            0.02 * t as f64,
            1.5,
            -1.0,
            (31.5, 31.5),
        ));
    }
    let chain = accumulate(&rels).unwrap();
    let report = drift_curve(&chain, &chain, &frames).unwrap();
    assert_eq!(report.per_frame.len(), 4);
    assert_eq!(report.mean_corner_error_px, 0.0);
    for row in &report.per_frame {
        assert_eq!(row.corner_error_px, 0.0);
        assert!(row.rmse < 1e-12);
        assert!(row.ape < 1e-12);
    }
}

#[test]
fn metrics_csv_has_per_frame_rows_and_mean() {
    let dir = common::TempDir::new("metrics_csv");
    let frames: Vec<ImageFrame> = {
        let mut rng = Rng::new(76);
        (0..4).map(|_| random_image(64, 64, &mut rng)).collect()
    };
    let rels = vec![
        AffineTransform::IDENTITY,
        AffineTransform::translation(1.0, 0.0),
        AffineTransform::translation(1.0, 0.0),
        AffineTransform::translation(1.0, 0.0),
    ];
    let chain = accumulate(&rels).unwrap();
    let report = drift_curve(&chain, &chain, &frames).unwrap();
    let path = dir.join("metrics.csv");
    seqmosaic::metrics::write_metrics_csv(&path, &report).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,mre_px,rmse_255,ape_255");
    assert_eq!(lines.len(), 1 + 3 + 1); // header + per-frame + mean
    assert!(lines.last().unwrap().starts_with("mean,"));
}
