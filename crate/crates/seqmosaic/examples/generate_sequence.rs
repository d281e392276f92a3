//! Generate synthetic frame sequences with exact ground-truth motion.
//!
//! Writes one directory per motion type (frames as PGM plus `truth.csv`)
//! and prints where the camera path ends up relative to its start.
//!
//! ```bash
//! cargo run --release --example generate_sequence
//! ```

use seqmosaic::pig::{generate_sequence, Motion, SequenceSpec, TextureSource};
use seqmosaic::AffineTransform;

fn main() -> seqmosaic::Result<()> {
    let base = std::env::temp_dir().join("seqmosaic_generate_sequence");
    for motion in [Motion::Circular, Motion::Spiral, Motion::Freehand] {
        let spec = SequenceSpec {
            motion,
            frames: 40,
            size: 96,
            seed: 7,
            texture: TextureSource::ProceduralVessels,
        };
        let frames = generate_sequence(&spec)?;

        // accumulate the per-step motion into the final camera pose
        let mut pose = AffineTransform::IDENTITY;
        let mut max_step = 0.0f64;
        for frame in &frames {
            pose = pose.compose(&frame.relative);
            max_step = max_step
                .max(frame.params.dx().abs())
                .max(frame.params.dy().abs());
        }
        let end_distance = (pose.tx * pose.tx + pose.ty * pose.ty).sqrt();

        let dir = base.join(motion.to_string());
        seqmosaic::pig::write_sequence(&dir, &frames)?;
        println!(
            "{motion:<9} {} frames, max |step| {max_step:5.2} px, path ends {end_distance:6.2} px from start -> {}",
            frames.len(),
            dir.display()
        );
    }
    Ok(())
}
