//! Command-line interface.
//!
//! Subcommands: `generate`, `train`, `estimate`, `mosaic`, `evaluate`,
//! `gradcheck`. Flags are plain `--key value` (or `--key=value`) pairs; an
//! optional `--config FILE` supplies `key=value` defaults that explicit
//! flags override. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::read_pgm_dir;
use crate::gradcheck;
use crate::mosaic::{self, Blend};
use crate::pig::{self, Motion, PigRecord, SequenceSpec, TextureSource};
use crate::regressor::{self, checkpoint, RegressorModel, TrainConfig};
use crate::rng::Rng;

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Run the CLI and return the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run 'seqmosaic --help' for usage");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> CliResult<i32> {
    let Some(command) = args.first() else {
        print_global_help();
        return usage("missing subcommand");
    };
    match command.as_str() {
        "--help" | "-h" | "help" => {
            print_global_help();
            Ok(0)
        }
        "generate" => cmd_generate(&args[1..]).map(|_| 0),
        "train" => cmd_train(&args[1..]).map(|_| 0),
        "estimate" => cmd_estimate(&args[1..]).map(|_| 0),
        "mosaic" => cmd_mosaic(&args[1..]).map(|_| 0),
        "evaluate" => cmd_evaluate(&args[1..]).map(|_| 0),
        "gradcheck" => cmd_gradcheck(&args[1..]),
        other => usage(format!("unknown subcommand {other:?}")),
    }
}

fn print_global_help() {
    println!(
        "seqmosaic - sequential image mosaicing with a learned homography regressor

usage: seqmosaic <command> [--key value ...]

commands:
  generate   write a synthetic frame sequence with exact ground truth
  train      train the corner-displacement regressor on perturbed pairs
  estimate   predict per-frame relative transforms for a frame directory
  mosaic     compose frames into one canvas using a homography CSV
  evaluate   drift metrics (MRE, RMSE, APE) of predicted vs true transforms
  gradcheck  finite-difference verification of every analytic gradient

'seqmosaic <command> --help' lists the flags of each command."
    );
}

// --- flag machinery --------------------------------------------------------

struct Flag {
    name: &'static str,
    value: &'static str,
    default: Option<&'static str>,
    required: bool,
    help: &'static str,
}

struct CommandDef {
    name: &'static str,
    about: &'static str,
    flags: &'static [Flag],
}

const CONFIG_FLAG: Flag = Flag {
    name: "config",
    value: "FILE",
    default: None,
    required: false,
    help: "key=value file supplying defaults for any flag of this command",
};

fn print_command_help(def: &CommandDef) {
    println!("seqmosaic {} - {}\n", def.name, def.about);
    println!("usage: seqmosaic {} [flags]\n\nflags:", def.name);
    for f in def.flags.iter().chain(std::iter::once(&CONFIG_FLAG)) {
        let left = format!("--{} <{}>", f.name, f.value);
        let mut line = format!("  {left:<24} {}", f.help);
        if let Some(d) = f.default {
            line.push_str(&format!(" [default: {d}]"));
        }
        if f.required {
            line.push_str(" [required]");
        }
        println!("{line}");
    }
}

/// Parse `--key value` / `--key=value` pairs against a command definition,
/// layering: explicit flag > config file entry > built-in default.
fn parse_flags(def: &CommandDef, args: &[String]) -> CliResult<Option<BTreeMap<String, String>>> {
    let known = |name: &str| name == "config" || def.flags.iter().any(|f| f.name == name);
    let mut given: BTreeMap<String, String> = BTreeMap::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            print_command_help(def);
            return Ok(None);
        }
        let Some(stripped) = arg.strip_prefix("--") else {
            return usage(format!("unexpected argument {arg:?}"));
        };
        let (name, value) = match stripped.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let Some(v) = it.next() else {
                    return usage(format!("flag --{stripped} needs a value"));
                };
                (stripped.to_string(), v.clone())
            }
        };
        if !known(&name) {
            return usage(format!("unknown flag --{name} for 'seqmosaic {}'", def.name));
        }
        if given.insert(name.clone(), value).is_some() {
            return usage(format!("flag --{name} given twice"));
        }
    }

    let mut resolved = given.clone();
    if let Some(cfg_path) = given.get("config") {
        for (k, v) in read_config_file(Path::new(cfg_path))? {
            if !known(&k) {
                return usage(format!("config entry {k:?} is not a flag of 'seqmosaic {}'", def.name));
            }
            resolved.entry(k).or_insert(v);
        }
    }
    for f in def.flags {
        if !resolved.contains_key(f.name) {
            if let Some(d) = f.default {
                resolved.insert(f.name.to_string(), d.to_string());
            } else if f.required {
                return usage(format!("missing required flag --{}", f.name));
            }
        }
    }
    Ok(Some(resolved))
}

fn read_config_file(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Run(Error::Format(format!(
                "{}: line {} is not key=value",
                path.display(),
                ln + 1
            ))));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn get_usize(map: &BTreeMap<String, String>, name: &str) -> CliResult<usize> {
    let v = &map[name];
    v.parse()
        .map_err(|_| CliError::Usage(format!("--{name} expects an unsigned integer, got {v:?}")))
}

fn get_u64(map: &BTreeMap<String, String>, name: &str) -> CliResult<u64> {
    let v = &map[name];
    v.parse()
        .map_err(|_| CliError::Usage(format!("--{name} expects an unsigned integer, got {v:?}")))
}

fn get_f64(map: &BTreeMap<String, String>, name: &str) -> CliResult<f64> {
    let v = &map[name];
    v.parse()
        .map_err(|_| CliError::Usage(format!("--{name} expects a number, got {v:?}")))
}

// --- generate ---------------------------------------------------------------

const GENERATE: CommandDef = CommandDef {
    name: "generate",
    about: "write a synthetic frame sequence (PGM frames + truth.csv) with exact ground truth",
    flags: &[
        Flag { name: "out", value: "DIR", default: None, required: true, help: "output directory" },
        Flag { name: "motion", value: "KIND", default: Some("circular"), required: false, help: "camera path: circular, spiral or freehand (freehand steps stay within +-8 deg rotation and +-15 px translation)" },
        Flag { name: "frames", value: "N", default: Some("50"), required: false, help: "frame count (>= 2)" },
        Flag { name: "size", value: "PX", default: Some("128"), required: false, help: "square frame extent in pixels (>= 64)" },
        Flag { name: "seed", value: "S", default: Some("0"), required: false, help: "seed for the texture and the freehand path" },
        Flag { name: "texture", value: "SRC", default: Some("procedural"), required: false, help: "'procedural' or a path to a PGM used as the world texture" },
    ],
};

fn cmd_generate(args: &[String]) -> CliResult<()> {
    let Some(flags) = parse_flags(&GENERATE, args)? else {
        return Ok(());
    };
    let motion = match flags["motion"].as_str() {
        "circular" => Motion::Circular,
        "spiral" => Motion::Spiral,
        "freehand" => Motion::Freehand,
        other => return usage(format!("--motion must be circular, spiral or freehand, got {other:?}")),
    };
    let frames = get_usize(&flags, "frames")?;
    let size = get_usize(&flags, "size")?;
    let seed = get_u64(&flags, "seed")?;
    if frames < 2 {
        return usage(format!("--frames must be at least 2, got {frames}"));
    }
    if size < 64 {
        return usage(format!("--size must be at least 64, got {size}"));
    }
    let texture = match flags["texture"].as_str() {
        "procedural" => TextureSource::ProceduralVessels,
        path => TextureSource::FromFile(PathBuf::from(path)),
    };
    let spec = SequenceSpec {
        motion,
        frames,
        size,
        seed,
        texture,
    };
    let out_dir = PathBuf::from(&flags["out"]);
    let generated = pig::generate_sequence(&spec)?;
    pig::write_sequence(&out_dir, &generated)?;
    println!(
        "wrote {} frames ({}x{}, {} motion, seed {}) and truth.csv to {}",
        generated.len(),
        size,
        size,
        motion,
        seed,
        out_dir.display()
    );
    Ok(())
}

// --- train ------------------------------------------------------------------

const TRAIN: CommandDef = CommandDef {
    name: "train",
    about: "train the corner-displacement regressor on synthetically perturbed pairs",
    flags: &[
        Flag { name: "out", value: "FILE", default: None, required: true, help: "checkpoint output path" },
        Flag { name: "log", value: "FILE", default: None, required: false, help: "training log CSV [default: <out>.log.csv]" },
        Flag { name: "pairs", value: "N", default: Some("512"), required: false, help: "training pair count" },
        Flag { name: "holdout", value: "N", default: Some("64"), required: false, help: "held-out pair count (evaluated, never trained on)" },
        Flag { name: "patch", value: "PX", default: Some("64"), required: false, help: "input patch extent (multiple of 4)" },
        Flag { name: "frames", value: "DIR", default: None, required: false, help: "optional PGM directory supplying base frames; procedural textures otherwise" },
        Flag { name: "lr", value: "RATE", default: Some("0.0001"), required: false, help: "learning rate" },
        Flag { name: "momentum", value: "MU", default: Some("0.9"), required: false, help: "SGD momentum" },
        Flag { name: "batch", value: "N", default: Some("16"), required: false, help: "minibatch size" },
        Flag { name: "epochs", value: "N", default: Some("50"), required: false, help: "training epochs" },
        Flag { name: "max-iters", value: "N", default: None, required: false, help: "stop after this many minibatch updates" },
        Flag { name: "key-offset", value: "K", default: Some("4"), required: false, help: "key frame distance used at estimation time" },
        Flag { name: "seed", value: "S", default: Some("0"), required: false, help: "seed for data, init and shuffling" },
    ],
};

/// Perturbed pairs from seeded textures (or frames on disk), one independent
/// seed stream per record index.
fn build_records(
    count: usize,
    first_index: usize,
    patch: usize,
    seed: u64,
    bases: Option<&[crate::frame::ImageFrame]>,
) -> Result<Vec<PigRecord>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let idx = first_index + i;
            let base = match bases {
                Some(frames) => frames[idx % frames.len()].clone(),
                None => pig::procedural_texture(patch, patch, seed, 0x7000_0000 + idx as u64),
            };
            let params = pig::sample_params(&mut Rng::stream(seed, 0x8000_0000 + idx as u64));
            pig::perturb(&base, params)
        })
        .collect()
}

fn cmd_train(args: &[String]) -> CliResult<()> {
    let Some(flags) = parse_flags(&TRAIN, args)? else {
        return Ok(());
    };
    let pairs = get_usize(&flags, "pairs")?;
    let holdout = get_usize(&flags, "holdout")?;
    if pairs == 0 {
        return usage("--pairs must be at least 1");
    }
    let cfg = TrainConfig {
        lr: get_f64(&flags, "lr")?,
        momentum: get_f64(&flags, "momentum")?,
        batch: get_usize(&flags, "batch")?,
        epochs: get_usize(&flags, "epochs")?,
        seed: get_u64(&flags, "seed")?,
        patch: get_usize(&flags, "patch")?,
        key_offset: get_usize(&flags, "key-offset")?,
        max_iters: match flags.get("max-iters") {
            Some(_) => Some(get_usize(&flags, "max-iters")?),
            None => None,
        },
    };
    cfg.validate().map_err(CliError::Run)?;

    let bases = match flags.get("frames") {
        Some(dir) => Some(read_pgm_dir(Path::new(dir))?),
        None => None,
    };
    let train_set = build_records(pairs, 0, cfg.patch, cfg.seed, bases.as_deref())?;
    let eval_set = build_records(holdout, pairs, cfg.patch, cfg.seed, bases.as_deref())?;

    let model = RegressorModel::new(cfg.patch, cfg.key_offset, cfg.seed)?;
    let (model, log) = regressor::train(model, &train_set, &cfg, &eval_set)?;

    let out = PathBuf::from(&flags["out"]);
    checkpoint::save(&model, &out)?;
    let log_path = match flags.get("log") {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(format!("{}.log.csv", out.display())),
    };
    log.write_csv(&log_path)?;

    let first = log.rows.first();
    let last = log.rows.last();
    println!(
        "trained {} iterations on {} pairs (patch {}, lr {}, momentum {}, batch {})",
        log.iterations, pairs, cfg.patch, cfg.lr, cfg.momentum, cfg.batch
    );
    if let (Some(first), Some(last)) = (first, last) {
        println!(
            "holdout mean corner error: {:.4} px -> {:.4} px over {} held-out pairs",
            first.holdout_corner_error_px, last.holdout_corner_error_px, holdout
        );
    }
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

// --- estimate ----------------------------------------------------------------

const ESTIMATE: CommandDef = CommandDef {
    name: "estimate",
    about: "predict relative transforms for every frame of a directory",
    flags: &[
        Flag { name: "frames", value: "DIR", default: None, required: true, help: "directory of PGM frames (lexicographic order)" },
        Flag { name: "model", value: "FILE", default: None, required: true, help: "checkpoint from 'seqmosaic train'" },
        Flag { name: "out", value: "FILE", default: Some("homographies.csv"), required: false, help: "output CSV of relative transforms" },
        Flag { name: "key-offset", value: "K", default: None, required: false, help: "override the checkpoint's key frame distance" },
    ],
};

fn cmd_estimate(args: &[String]) -> CliResult<()> {
    let Some(flags) = parse_flags(&ESTIMATE, args)? else {
        return Ok(());
    };
    let frames = read_pgm_dir(Path::new(&flags["frames"]))?;
    let mut model = checkpoint::load(Path::new(&flags["model"]))?;
    if flags.contains_key("key-offset") {
        model = model.with_key_offset(get_usize(&flags, "key-offset")?)?;
    }
    let relative = regressor::estimate_sequence(&model, &frames)?;
    let out = PathBuf::from(&flags["out"]);
    mosaic::write_homography_csv(&out, &relative)?;
    println!(
        "estimated {} relative transforms (key offset {}) -> {}",
        relative.len(),
        model.key_offset(),
        out.display()
    );
    Ok(())
}

// --- mosaic -------------------------------------------------------------------

const MOSAIC: CommandDef = CommandDef {
    name: "mosaic",
    about: "compose frames onto one canvas using a homography CSV",
    flags: &[
        Flag { name: "frames", value: "DIR", default: None, required: true, help: "directory of PGM frames" },
        Flag { name: "homographies", value: "FILE", default: None, required: true, help: "relative transform CSV (estimate output or truth.csv)" },
        Flag { name: "out", value: "FILE", default: Some("mosaic.pgm"), required: false, help: "output PGM" },
        Flag { name: "blend", value: "MODE", default: Some("average"), required: false, help: "overlap blending: average or last-writer" },
    ],
};

fn cmd_mosaic(args: &[String]) -> CliResult<()> {
    let Some(flags) = parse_flags(&MOSAIC, args)? else {
        return Ok(());
    };
    let blend = match flags["blend"].as_str() {
        "average" => Blend::Average,
        "last-writer" => Blend::LastWriter,
        other => return usage(format!("--blend must be average or last-writer, got {other:?}")),
    };
    let frames = read_pgm_dir(Path::new(&flags["frames"]))?;
    let relative = mosaic::read_homography_csv(Path::new(&flags["homographies"]))?;
    if relative.len() != frames.len() {
        return Err(CliError::Run(Error::Dimension(format!(
            "{} frames but {} transforms",
            frames.len(),
            relative.len()
        ))));
    }
    let chain = mosaic::accumulate(&relative)?;
    let canvas = mosaic::render(&frames, &chain, blend)?;
    let out = PathBuf::from(&flags["out"]);
    canvas.image.write_pgm(&out)?;
    println!(
        "rendered {} frames onto a {}x{} canvas -> {}",
        frames.len(),
        canvas.image.width(),
        canvas.image.height(),
        out.display()
    );
    Ok(())
}

// --- evaluate -----------------------------------------------------------------

const EVALUATE: CommandDef = CommandDef {
    name: "evaluate",
    about: "drift metrics of predicted transforms against ground truth",
    flags: &[
        Flag { name: "frames", value: "DIR", default: None, required: true, help: "directory of PGM frames" },
        Flag { name: "pred", value: "FILE", default: None, required: true, help: "predicted relative transform CSV" },
        Flag { name: "truth", value: "FILE", default: None, required: true, help: "ground-truth CSV (truth.csv or homography CSV)" },
        Flag { name: "out", value: "FILE", default: Some("metrics.csv"), required: false, help: "output metrics CSV" },
    ],
};

fn cmd_evaluate(args: &[String]) -> CliResult<()> {
    let Some(flags) = parse_flags(&EVALUATE, args)? else {
        return Ok(());
    };
    let frames = read_pgm_dir(Path::new(&flags["frames"]))?;
    let pred = mosaic::read_homography_csv(Path::new(&flags["pred"]))?;
    let truth = mosaic::read_homography_csv(Path::new(&flags["truth"]))?;
    if pred.len() != frames.len() || truth.len() != frames.len() {
        return Err(CliError::Run(Error::Dimension(format!(
            "{} frames, {} predicted transforms, {} true transforms",
            frames.len(),
            pred.len(),
            truth.len()
        ))));
    }
    let pred_chain = mosaic::accumulate(&pred)?;
    let truth_chain = mosaic::accumulate(&truth)?;
    let report = crate::metrics::drift_curve(&pred_chain, &truth_chain, &frames)?;
    let out = PathBuf::from(&flags["out"]);
    crate::metrics::write_metrics_csv(&out, &report)?;
    println!(
        "evaluated {} frames: mean MRE {:.4} px, mean RMSE {:.4}, mean APE {:.4} (x255) -> {}",
        frames.len(),
        report.mean_corner_error_px,
        report.mean_rmse * 255.0,
        report.mean_ape * 255.0,
        out.display()
    );
    Ok(())
}

// --- gradcheck ------------------------------------------------------------------

const GRADCHECK: CommandDef = CommandDef {
    name: "gradcheck",
    about: "verify every analytic gradient against central finite differences",
    flags: &[Flag {
        name: "seed",
        value: "S",
        default: Some("1"),
        required: false,
        help: "seed for the checked instances",
    }],
};

fn cmd_gradcheck(args: &[String]) -> CliResult<i32> {
    let Some(flags) = parse_flags(&GRADCHECK, args)? else {
        return Ok(0);
    };
    let seed = get_u64(&flags, "seed")?;
    let report = gradcheck::run_suite(seed)?;
    print!("{}", report.summary());
    Ok(if report.passed { 0 } else { 3 })
}
