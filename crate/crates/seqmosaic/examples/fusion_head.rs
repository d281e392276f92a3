//! Inspect the non-local fusion head: attention weights over the
//! 8-neighbourhood, their normalization, and the fused output.
//!
//! ```bash
//! cargo run --release --example fusion_head
//! ```

use seqmosaic::fusion::{attention_weights, fuse, FrameTriple, FusionHead, Neighborhood};
use seqmosaic::rng::Rng;
use seqmosaic::tensor::Tensor;

fn main() -> seqmosaic::Result<()> {
    let mut rng = Rng::new(3);
    let (channels, h, w) = (4, 5, 5);
    let head = FusionHead::glorot(channels, 2, Neighborhood::EightNeighbor, &mut rng);

    let mk = |rng: &mut Rng| Tensor::from_fn(&[channels, h, w], |_| rng.uniform(-1.0, 1.0));
    let triple = FrameTriple::new(mk(&mut rng), mk(&mut rng), mk(&mut rng))?;

    // weights at the centre position form a probability vector over the
    // in-bounds neighbours
    let center = (h / 2) * w + w / 2;
    let weights = attention_weights(&head, &triple, center)?;
    println!("attention at position ({}, {}):", w / 2, h / 2);
    let mut sum = 0.0;
    for (j, weight) in &weights {
        println!("  neighbour ({}, {}): {weight:.4}", j % w, j / w);
        sum += weight;
    }
    println!("  sum = {sum:.12}");

    let fused = fuse(&head, &triple)?;
    println!(
        "fused output shape {:?}, value range [{:.4}, {:.4}]",
        fused.shape(),
        fused.data().iter().fold(f64::MAX, |m, &v| m.min(v)),
        fused.data().iter().fold(f64::MIN, |m, &v| m.max(v)),
    );

    // corner positions see fewer neighbours; the normalization adapts
    let corner_weights = attention_weights(&head, &triple, 0)?;
    println!(
        "corner position attends over {} neighbours (vs {} at the centre)",
        corner_weights.len(),
        weights.len()
    );
    Ok(())
}
