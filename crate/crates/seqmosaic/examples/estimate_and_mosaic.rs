//! The full pipeline: generate a sequence, train a regressor, estimate the
//! per-frame transforms, compare against ground truth, and render mosaics
//! from both chains.
//!
//! Takes a couple of minutes; all outputs land in a temp directory.
//!
//! ```bash
//! cargo run --release --example estimate_and_mosaic
//! ```

use seqmosaic::metrics::drift_curve;
use seqmosaic::mosaic::{accumulate, render, Blend};
use seqmosaic::pig::{self, Motion, SequenceSpec, TextureSource};
use seqmosaic::regressor::{estimate_sequence, train, RegressorModel, TrainConfig};
use seqmosaic::rng::Rng;
use seqmosaic::ImageFrame;

fn main() -> seqmosaic::Result<()> {
    let dir = std::env::temp_dir().join("seqmosaic_estimate_and_mosaic");
    std::fs::create_dir_all(&dir).ok();

    // a circular sweep over a vessel-like texture
    let spec = SequenceSpec {
        motion: Motion::Circular,
        frames: 30,
        size: 96,
        seed: 5,
        texture: TextureSource::ProceduralVessels,
    };
    let generated = pig::generate_sequence(&spec)?;
    let frames: Vec<ImageFrame> = generated.iter().map(|f| f.image.clone()).collect();
    let truth_rel: Vec<_> = generated.iter().map(|f| f.relative).collect();
    println!("generated {} frames of {} px", frames.len(), spec.size);

    // train a regressor on perturbed pairs of the same texture family
    let cfg = TrainConfig {
        patch: 64,
        epochs: 1000,
        max_iters: Some(200),
        seed: 9,
        ..TrainConfig::default()
    };
    let build = |count: usize, first: usize| -> Vec<pig::PigRecord> {
        (0..count)
            .map(|i| {
                let idx = first + i;
                let base = pig::procedural_texture(cfg.patch, cfg.patch, cfg.seed, 0x7000_0000 + idx as u64);
                let params = pig::sample_params(&mut Rng::stream(cfg.seed, 0x8000_0000 + idx as u64));
                pig::perturb(&base, params).expect("valid perturbation")
            })
            .collect()
    };
    println!("training the regressor ({} iterations)...", cfg.max_iters.unwrap());
    let model = RegressorModel::new(cfg.patch, cfg.key_offset, cfg.seed)?;
    let (model, log) = train(model, &build(256, 0), &cfg, &build(32, 256))?;
    println!(
        "holdout corner error after training: {:.2} px",
        log.rows.last().unwrap().holdout_corner_error_px
    );

    // estimate relative transforms for the sequence and score the drift
    let estimated = estimate_sequence(&model, &frames)?;
    let pred_chain = accumulate(&estimated)?;
    let truth_chain = accumulate(&truth_rel)?;
    let report = drift_curve(&pred_chain, &truth_chain, &frames)?;
    println!(
        "drift vs ground truth: mean MRE {:.2} px, mean RMSE {:.2}, mean APE {:.2} (x255)",
        report.mean_corner_error_px,
        report.mean_rmse * 255.0,
        report.mean_ape * 255.0
    );
    println!(
        "per-frame estimation error compounds along the chain: frame 1 drifts {:.2} px, frame {} drifts {:.2} px",
        report.per_frame.first().unwrap().corner_error_px,
        report.per_frame.last().unwrap().frame,
        report.per_frame.last().unwrap().corner_error_px
    );

    // render the mosaic from both chains
    let est_canvas = render(&frames, &pred_chain, Blend::Average)?;
    let true_canvas = render(&frames, &truth_chain, Blend::Average)?;
    let est_path = dir.join("mosaic_estimated.pgm");
    let true_path = dir.join("mosaic_truth.pgm");
    est_canvas.image.write_pgm(&est_path)?;
    true_canvas.image.write_pgm(&true_path)?;
    println!(
        "estimated mosaic {}x{} -> {}",
        est_canvas.image.width(),
        est_canvas.image.height(),
        est_path.display()
    );
    println!(
        "ground-truth mosaic {}x{} -> {}",
        true_canvas.image.width(),
        true_canvas.image.height(),
        true_path.display()
    );
    Ok(())
}
