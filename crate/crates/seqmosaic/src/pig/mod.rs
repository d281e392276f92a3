//! Synthetic training data with ground truth known by construction.
//!
//! A generated pair is a frame plus a rigidly perturbed copy: rotation by a
//! bounded angle about the frame centre and a bounded translation, with the
//! exact perturbation recorded. Colour input is reduced to grayscale with the
//! lightness formula `(max + min) / 2` so the regressor never sees chroma.
//! Full synthetic sequences follow spiral, circular or freehand camera paths
//! whose per-step motion stays inside the same perturbation box.

mod texture;

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::fsutil::write_atomic;
use crate::homography::AffineTransform;
use crate::rng::Rng;
use crate::tensor::{bilinear_sample, OutOfBounds};

/// Largest admissible rotation, 8 degrees in radians.
pub const MAX_ROTATION_RAD: f64 = 8.0 * std::f64::consts::PI / 180.0;
/// Largest admissible translation per axis, in pixels.
pub const MAX_TRANSLATION_PX: f64 = 15.0;

const RANGE_SLACK: f64 = 1e-12;

/// A bounded rigid perturbation: rotation `alpha` (radians) and translation
/// (dx, dy) in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PigParams {
    alpha: f64,
    dx: f64,
    dy: f64,
}

impl PigParams {
    pub fn new(alpha: f64, dx: f64, dy: f64) -> Result<Self> {
        if !(alpha.is_finite() && dx.is_finite() && dy.is_finite()) {
            return Err(Error::Range("perturbation parameters must be finite".into()));
        }
        if alpha.abs() > MAX_ROTATION_RAD + RANGE_SLACK {
            return Err(Error::Range(format!(
                "rotation {alpha} rad exceeds +-{MAX_ROTATION_RAD} rad"
            )));
        }
        if dx.abs() > MAX_TRANSLATION_PX + RANGE_SLACK || dy.abs() > MAX_TRANSLATION_PX + RANGE_SLACK {
            return Err(Error::Range(format!(
                "translation ({dx}, {dy}) exceeds +-{MAX_TRANSLATION_PX} px"
            )));
        }
        Ok(PigParams { alpha, dx, dy })
    }

    pub fn zero() -> Self {
        PigParams {
            alpha: 0.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }
}

/// A perturbed training pair with its exact ground truth.
#[derive(Debug, Clone)]
pub struct PigRecord {
    pub frame_a: ImageFrame,
    pub frame_b: ImageFrame,
    pub params: PigParams,
    /// Maps frame_a coordinates onto frame_b coordinates;
    /// `frame_b = warp(frame_a, truth)`.
    pub truth: AffineTransform,
}

/// Camera path of a generated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    /// Outward sweep, emulating a widening scan.
    Spiral,
    /// Closed loop returning to the start.
    Circular,
    /// Seeded random walk with rotation, emulating exploratory handheld motion.
    Freehand,
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Motion::Spiral => write!(f, "spiral"),
            Motion::Circular => write!(f, "circular"),
            Motion::Freehand => write!(f, "freehand"),
        }
    }
}

/// Where the world texture behind a sequence comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextureSource {
    /// Seeded vessel-like procedural texture.
    ProceduralVessels,
    /// A PGM file, mirror-tiled to cover the camera path.
    FromFile(PathBuf),
}

/// Parameters of a synthetic sequence.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub motion: Motion,
    pub frames: usize,
    /// Square frame extent in pixels.
    pub size: usize,
    pub seed: u64,
    pub texture: TextureSource,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Range(format!(
                "sequence needs at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.size < 64 {
            return Err(Error::Range(format!(
                "frame size must be at least 64 px, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// One frame of a generated sequence.
#[derive(Debug, Clone)]
pub struct GeneratedFrame {
    pub image: ImageFrame,
    /// Maps this frame's coordinates onto the previous frame's coordinates;
    /// identity for frame 0.
    pub relative: AffineTransform,
    /// The rigid parameters behind `relative`; zeros for frame 0.
    pub params: PigParams,
}

/// Lightness grayscale conversion: `(max(R,G,B) + min(R,G,B)) / 2`.
pub fn to_grayscale(r: f64, g: f64, b: f64) -> Result<f64> {
    for (name, v) in [("r", r), ("g", g), ("b", b)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!(
                "colour component {name} = {v} outside [0, 1]"
            )));
        }
    }
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    Ok((max + min) / 2.0)
}

/// Centre of a frame's pixel rectangle.
pub fn frame_center(frame: &ImageFrame) -> (f64, f64) {
    (
        (frame.width() - 1) as f64 / 2.0,
        (frame.height() - 1) as f64 / 2.0,
    )
}

/// The rigid transform a perturbation induces on a frame: rotation about the
/// frame centre, then translation.
pub fn params_to_transform(params: PigParams, center: (f64, f64)) -> AffineTransform {
    AffineTransform::rigid_about(params.alpha, params.dx, params.dy, center)
}

/// Recover (alpha, dx, dy) from a rigid transform built by
/// [`params_to_transform`] with the same centre.
pub fn transform_to_params(t: &AffineTransform, center: (f64, f64)) -> Result<PigParams> {
    let alpha = t.b.atan2(t.a);
    let (cx, cy) = center;
    let dx = t.tx - cx + (t.a * cx + t.b * cy);
    let dy = t.ty - cy + (t.c * cx + t.d * cy);
    PigParams::new(alpha, dx, dy)
}

/// Apply a perturbation to a frame, recording the exact ground truth.
/// Sampling outside the source clamps to the border, so intensities stay in
/// the source range.
pub fn perturb(frame: &ImageFrame, params: PigParams) -> Result<PigRecord> {
    // re-validate: PigParams is range-checked at construction, but a record's
    // truth must never silently leave the declared box
    let params = PigParams::new(params.alpha, params.dx, params.dy)?;
    let truth = params_to_transform(params, frame_center(frame));
    let frame_b = crate::homography::warp(frame, &truth, frame.width(), frame.height(), OutOfBounds::Clamp)?;
    Ok(PigRecord {
        frame_a: frame.clone(),
        frame_b,
        params,
        truth,
    })
}

/// Draw perturbation parameters uniformly over the admissible box.
pub fn sample_params(rng: &mut Rng) -> PigParams {
    PigParams {
        alpha: rng.uniform(-MAX_ROTATION_RAD, MAX_ROTATION_RAD),
        dx: rng.uniform(-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX),
        dy: rng.uniform(-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX),
    }
}

/// Generate a full synthetic sequence with exact per-frame relative motion.
///
/// Frames are rendered from one seeded world texture, so consecutive frames
/// are resampled views of the same scene rather than a degrading warp chain.
/// Every relative step stays inside the perturbation box; circular paths
/// close, spirals sweep outward, freehand wanders.
pub fn generate_sequence(spec: &SequenceSpec) -> Result<Vec<GeneratedFrame>> {
    spec.validate()?;
    let n = spec.frames;
    let size = spec.size;
    let center = (
        (size - 1) as f64 / 2.0,
        (size - 1) as f64 / 2.0,
    );

    let step_params = plan_steps(spec)?;
    debug_assert_eq!(step_params.len(), n - 1);

    // camera poses: pose[t] maps frame-t coordinates onto frame-0 coordinates
    let mut poses = Vec::with_capacity(n);
    poses.push(AffineTransform::IDENTITY);
    for p in &step_params {
        let rel = params_to_transform(*p, center);
        let prev = *poses.last().unwrap();
        poses.push(prev.compose(&rel));
    }

    // world raster sized to cover every frame's footprint
    let mut min_x = f64::MAX;
    let mut min_y = f64::MAX;
    let mut max_x = f64::MIN;
    let mut max_y = f64::MIN;
    let extent = (size - 1) as f64;
    for pose in &poses {
        for corner in [(0.0, 0.0), (extent, 0.0), (extent, extent), (0.0, extent)] {
            let (x, y) = pose.apply(corner);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    let margin = 4.0;
    let origin = (min_x.floor() - margin, min_y.floor() - margin);
    let world_w = (max_x.ceil() - origin.0 + margin + 1.0) as usize;
    let world_h = (max_y.ceil() - origin.1 + margin + 1.0) as usize;
    let world = build_world(spec, world_w, world_h)?;

    let mut frames = Vec::with_capacity(n);
    for (t, pose) in poses.iter().enumerate() {
        let image = ImageFrame::from_fn(size, size, |x, y| {
            let (wx, wy) = pose.apply((x as f64, y as f64));
            bilinear_sample(&world, wx - origin.0, wy - origin.1, OutOfBounds::Clamp)
        });
        let (relative, params) = if t == 0 {
            (AffineTransform::IDENTITY, PigParams::zero())
        } else {
            (params_to_transform(step_params[t - 1], center), step_params[t - 1])
        };
        frames.push(GeneratedFrame {
            image,
            relative,
            params,
        });
    }
    Ok(frames)
}

/// Per-step rigid parameters for each motion type.
fn plan_steps(spec: &SequenceSpec) -> Result<Vec<PigParams>> {
    let n = spec.frames;
    let size = spec.size as f64;
    let steps = n - 1;
    let mut out = Vec::with_capacity(steps);
    match spec.motion {
        Motion::Circular => {
            let chord_limit = 0.95 * MAX_TRANSLATION_PX / (2.0 * (std::f64::consts::PI / steps as f64).sin());
            let radius = (0.38 * size).min(chord_limit);
            let pos = |t: usize| {
                let theta = std::f64::consts::TAU * t as f64 / steps as f64;
                (radius * (theta.cos() - 1.0), radius * theta.sin())
            };
            for t in 1..n {
                let (x0, y0) = pos(t - 1);
                let (x1, y1) = pos(t);
                out.push(PigParams::new(0.0, x1 - x0, y1 - y0)?);
            }
        }
        Motion::Spiral => {
            let turns = 1.5 * std::f64::consts::TAU;
            let step_limit = 0.95 * MAX_TRANSLATION_PX * steps as f64 / (1.0 + turns * turns).sqrt();
            let radius = (0.42 * size).min(step_limit);
            let pos = |t: usize| {
                let f = t as f64 / steps as f64;
                let theta = turns * f;
                (radius * f * theta.cos(), radius * f * theta.sin())
            };
            for t in 1..n {
                let (x0, y0) = pos(t - 1);
                let (x1, y1) = pos(t);
                out.push(PigParams::new(0.0, x1 - x0, y1 - y0)?);
            }
        }
        Motion::Freehand => {
            let mut rng = Rng::stream(spec.seed, 1);
            for _ in 1..n {
                out.push(sample_params(&mut rng));
            }
        }
    }
    Ok(out)
}

fn build_world(spec: &SequenceSpec, width: usize, height: usize) -> Result<ImageFrame> {
    match &spec.texture {
        TextureSource::ProceduralVessels => {
            Ok(texture::vessel_texture(width, height, &mut Rng::stream(spec.seed, 2)))
        }
        TextureSource::FromFile(path) => {
            let src = ImageFrame::read_pgm(path)?;
            Ok(mirror_tile(&src, width, height))
        }
    }
}

/// Cover a `width` x `height` raster with mirrored copies of `src`.
fn mirror_tile(src: &ImageFrame, width: usize, height: usize) -> ImageFrame {
    let mirror = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * n - 2;
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    ImageFrame::from_fn(width, height, |x, y| {
        src.get(mirror(x, src.width()), mirror(y, src.height()))
    })
}

/// Seeded vessel-like texture, exposed for dataset construction.
pub fn procedural_texture(width: usize, height: usize, seed: u64, stream: u64) -> ImageFrame {
    texture::vessel_texture(width, height, &mut Rng::stream(seed, stream))
}

// --- file interface -------------------------------------------------------

pub const TRUTH_CSV_HEADER: &str = "frame,a,b,tx,c,d,ty,alpha_rad,dx,dy";

/// Write `frame_%04d.pgm` plus `truth.csv` into `dir`.
pub fn write_sequence(dir: impl AsRef<Path>, frames: &[GeneratedFrame]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, frame) in frames.iter().enumerate() {
        frame.image.write_pgm(dir.join(format!("frame_{t:04}.pgm")))?;
    }
    write_truth_csv(dir.join("truth.csv"), frames)
}

/// Ground-truth CSV: one row per frame, frame 0 is the identity.
pub fn write_truth_csv(path: impl AsRef<Path>, frames: &[GeneratedFrame]) -> Result<()> {
    let mut text = String::from(TRUTH_CSV_HEADER);
    text.push('\n');
    for (t, frame) in frames.iter().enumerate() {
        let [a, b, tx, c, d, ty] = frame.relative.to_row();
        let p = frame.params;
        text.push_str(&format!(
            "{t},{a},{b},{tx},{c},{d},{ty},{},{},{}\n",
            p.alpha(),
            p.dx(),
            p.dy()
        ));
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Read a ground-truth CSV back into relative transforms and parameters.
pub fn read_truth_csv(path: impl AsRef<Path>) -> Result<Vec<(AffineTransform, PigParams)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty truth CSV", path.display())))?;
    if header.trim() != TRUTH_CSV_HEADER {
        return Err(Error::Format(format!(
            "{}: unexpected truth CSV header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!(
                "{}: row {} has {} fields, expected 10",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad frame index {:?}", path.display(), fields[0])))?;
        if frame != i {
            return Err(Error::Format(format!(
                "{}: frame indices must be sequential, got {frame} at row {}",
                path.display(),
                i + 1
            )));
        }
        let mut nums = [0.0; 9];
        for (k, f) in fields[1..].iter().enumerate() {
            nums[k] = f
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {f:?}", path.display())))?;
        }
        let t = AffineTransform::from_row([nums[0], nums[1], nums[2], nums[3], nums[4], nums[5]]);
        let params = PigParams::new(nums[6], nums[7], nums[8])?;
        rows.push((t, params));
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}
