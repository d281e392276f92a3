//! Train the corner-displacement regressor on synthetically perturbed pairs
//! and save a checkpoint.
//!
//! Uses a reduced dataset (192 pairs instead of 512) so the run finishes in
//! about a minute; the same call scales to the full setup.
//!
//! ```bash
//! cargo run --release --example train_regressor
//! ```

use seqmosaic::pig::{perturb, procedural_texture, sample_params, PigRecord};
use seqmosaic::regressor::{checkpoint, train, RegressorModel, TrainConfig};
use seqmosaic::rng::Rng;

fn records(seed: u64, patch: usize, count: usize, first: usize) -> Vec<PigRecord> {
    (0..count)
        .map(|i| {
            let idx = first + i;
            let base = procedural_texture(patch, patch, seed, 0x7000_0000 + idx as u64);
            let params = sample_params(&mut Rng::stream(seed, 0x8000_0000 + idx as u64));
            perturb(&base, params).expect("valid perturbation")
        })
        .collect()
}

fn main() -> seqmosaic::Result<()> {
    let cfg = TrainConfig {
        epochs: 1000,
        max_iters: Some(150),
        seed: 42,
        ..TrainConfig::default()
    };
    println!(
        "training: lr {}, momentum {}, batch {}, {} iterations, patch {}",
        cfg.lr,
        cfg.momentum,
        cfg.batch,
        cfg.max_iters.unwrap(),
        cfg.patch
    );

    let train_set = records(cfg.seed, cfg.patch, 192, 0);
    let holdout = records(cfg.seed, cfg.patch, 32, 192);
    let model = RegressorModel::new(cfg.patch, cfg.key_offset, cfg.seed)?;
    let started = std::time::Instant::now();
    let (model, log) = train(model, &train_set, &cfg, &holdout)?;
    println!("finished {} iterations in {:?}", log.iterations, started.elapsed());

    println!("epoch  iters  train_loss  holdout_corner_err_px");
    for row in &log.rows {
        println!(
            "{:>5} {:>6} {:>11.3} {:>13.3}",
            row.epoch, row.iterations, row.train_loss, row.holdout_corner_error_px
        );
    }
    let first = log.rows.first().unwrap().holdout_corner_error_px;
    let last = log.rows.last().unwrap().holdout_corner_error_px;
    println!("holdout corner error reduced by {:.1}%", (1.0 - last / first) * 100.0);

    let path = std::env::temp_dir().join("seqmosaic_train_regressor.ckpt");
    checkpoint::save(&model, &path)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}
