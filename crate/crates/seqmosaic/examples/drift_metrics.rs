//! Drift-error accumulation: corrupt one relative transform in a chain and
//! watch the corner error persist through every later frame.
//!
//! ```bash
//! cargo run --release --example drift_metrics
//! ```

use seqmosaic::metrics::drift_curve;
use seqmosaic::mosaic::accumulate;
use seqmosaic::pig::{generate_sequence, Motion, SequenceSpec, TextureSource};
use seqmosaic::AffineTransform;

fn main() -> seqmosaic::Result<()> {
    let generated = generate_sequence(&SequenceSpec {
        motion: Motion::Circular,
        frames: 20,
        size: 96,
        seed: 11,
        texture: TextureSource::ProceduralVessels,
    })?;
    let frames: Vec<_> = generated.iter().map(|f| f.image.clone()).collect();
    let truth_rel: Vec<_> = generated.iter().map(|f| f.relative).collect();

    // corrupt the relative transform of frame 10 by 3 px
    let inject_at = 10;
    let mut pred_rel = truth_rel.clone();
    pred_rel[inject_at] = AffineTransform::translation(3.0, 0.0).compose(&pred_rel[inject_at]);

    let truth = accumulate(&truth_rel)?;
    let pred = accumulate(&pred_rel)?;
    let report = drift_curve(&pred, &truth, &frames)?;

    println!("injected a 3 px translation error at frame {inject_at}");
    println!("frame  corner_err_px  rmse_255  ape_255");
    for row in &report.per_frame {
        println!(
            "{:>5} {:>14.4} {:>9.3} {:>8.3}",
            row.frame,
            row.corner_error_px,
            row.rmse * 255.0,
            row.ape * 255.0
        );
    }
    println!(
        "means: MRE {:.4} px, RMSE {:.3}, APE {:.3} (x255)",
        report.mean_corner_error_px,
        report.mean_rmse * 255.0,
        report.mean_ape * 255.0
    );
    Ok(())
}
