//! Sequential compositing: accumulate relative transforms into global ones
//! and render every frame onto a shared canvas.
//!
//! Convention: `relative[t]` maps frame-t coordinates onto frame-(t-1)
//! coordinates, so the accumulated `global[t] = global[t-1] ∘ relative[t]`
//! maps frame-t coordinates onto frame-0 coordinates, where the canvas
//! lives. Also provides the least-squares correspondence estimator used as
//! a ground-truth reference for transform recovery.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::fsutil::write_atomic;
use crate::homography::AffineTransform;
use crate::tensor::{bilinear_sample, OutOfBounds};

/// Relative transforms plus their left-composed global accumulation.
#[derive(Debug, Clone)]
pub struct HomographyChain {
    relative: Vec<AffineTransform>,
    global: Vec<AffineTransform>,
}

impl HomographyChain {
    pub fn relative(&self) -> &[AffineTransform] {
        &self.relative
    }

    pub fn global(&self) -> &[AffineTransform] {
        &self.global
    }

    pub fn len(&self) -> usize {
        self.relative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relative.is_empty()
    }
}

/// Fold relative transforms into global ones. The list must start with the
/// identity and every member must be invertible.
pub fn accumulate(relative: &[AffineTransform]) -> Result<HomographyChain> {
    if relative.is_empty() {
        return Err(Error::Range("cannot accumulate an empty transform list".into()));
    }
    if relative[0].max_abs_diff(&AffineTransform::IDENTITY) > 1e-12 {
        return Err(Error::Range(
            "the first relative transform must be the identity".into(),
        ));
    }
    let mut global: Vec<AffineTransform> = Vec::with_capacity(relative.len());
    for (t, rel) in relative.iter().enumerate() {
        if !rel.is_invertible() {
            return Err(Error::Degenerate(format!(
                "relative transform {t} is singular"
            )));
        }
        let g = if t == 0 {
            AffineTransform::IDENTITY
        } else {
            global[t - 1].compose(rel)
        };
        global.push(g);
    }
    Ok(HomographyChain {
        relative: relative.to_vec(),
        global,
    })
}

/// Least-squares affine fit from point correspondences `a[i] -> b[i]`.
///
/// With three exact correspondences this reproduces the generating affine to
/// solver precision; extra (possibly noisy) points are fit in the
/// least-squares sense via the normal equations.
pub fn oracle_estimate(corners_a: &[(f64, f64)], corners_b: &[(f64, f64)]) -> Result<AffineTransform> {
    if corners_a.len() != corners_b.len() {
        return Err(Error::Dimension(format!(
            "correspondence lists differ in length: {} vs {}",
            corners_a.len(),
            corners_b.len()
        )));
    }
    if corners_a.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            corners_a.len()
        )));
    }
    // normal equations of min Σ |L p + t - q|^2, solved separately per row
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs_x = [0.0f64; 3];
    let mut rhs_y = [0.0f64; 3];
    for (&(x, y), &(xp, yp)) in corners_a.iter().zip(corners_b) {
        let row = [x, y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            rhs_x[i] += row[i] * xp;
            rhs_y[i] += row[i] * yp;
        }
    }
    let span = corners_a
        .iter()
        .flat_map(|p| [p.0.abs(), p.1.abs()])
        .fold(1.0f64, f64::max);
    let det = det3(&m);
    if det.abs() <= 1e-9 * span.powi(4) * corners_a.len() as f64 {
        return Err(Error::Degenerate(
            "correspondences are collinear; affine fit is underdetermined".into(),
        ));
    }
    let xs = crate::homography::solve3(m, rhs_x)?;
    let ys = crate::homography::solve3(m, rhs_y)?;
    Ok(AffineTransform {
        a: xs[0],
        b: xs[1],
        tx: xs[2],
        c: ys[0],
        d: ys[1],
        ty: ys[2],
    })
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// How overlapping frames combine on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blend {
    /// Mean of all covering frames; order-independent.
    Average,
    /// The latest covering frame wins.
    LastWriter,
}

/// A rendered mosaic: intensities, per-pixel coverage counts, and the
/// translation from canvas pixels to frame-0 coordinates.
#[derive(Debug, Clone)]
pub struct MosaicCanvas {
    pub image: ImageFrame,
    /// Number of frames covering each pixel.
    pub weight: Vec<f64>,
    /// Frame-0 coordinates of canvas pixel (0, 0).
    pub origin_offset: (f64, f64),
}

/// Render all frames through their global transforms onto one canvas. The
/// canvas bounding box is the union of the warped frame corner boxes.
pub fn render(frames: &[ImageFrame], chain: &HomographyChain, blend: Blend) -> Result<MosaicCanvas> {
    if frames.len() != chain.len() {
        return Err(Error::Dimension(format!(
            "{} frames but {} transforms",
            frames.len(),
            chain.len()
        )));
    }
    let mut min_x = f64::MAX;
    let mut min_y = f64::MAX;
    let mut max_x = f64::MIN;
    let mut max_y = f64::MIN;
    let mut frame_boxes = Vec::with_capacity(frames.len());
    for (frame, g) in frames.iter().zip(chain.global()) {
        let w = (frame.width() - 1) as f64;
        let h = (frame.height() - 1) as f64;
        let mut fx0 = f64::MAX;
        let mut fy0 = f64::MAX;
        let mut fx1 = f64::MIN;
        let mut fy1 = f64::MIN;
        for corner in [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)] {
            let (x, y) = g.apply(corner);
            fx0 = fx0.min(x);
            fy0 = fy0.min(y);
            fx1 = fx1.max(x);
            fy1 = fy1.max(y);
        }
        frame_boxes.push((fx0, fy0, fx1, fy1));
        min_x = min_x.min(fx0);
        min_y = min_y.min(fy0);
        max_x = max_x.max(fx1);
        max_y = max_y.max(fy1);
    }
    let origin = (min_x.floor(), min_y.floor());
    let canvas_w = (max_x.ceil() - origin.0) as usize + 1;
    let canvas_h = (max_y.ceil() - origin.1) as usize + 1;

    let inverses: Vec<AffineTransform> = chain
        .global()
        .iter()
        .map(|g| g.invert())
        .collect::<Result<_>>()?;

    // each output row is independent; frames accumulate in index order per
    // pixel, so the result does not depend on scheduling
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..canvas_h)
        .into_par_iter()
        .map(|cy| {
            let y0 = origin.1 + cy as f64;
            let mut value = vec![0.0; canvas_w];
            let mut weight = vec![0.0; canvas_w];
            for (t, frame) in frames.iter().enumerate() {
                let (fx0, fy0, fx1, fy1) = frame_boxes[t];
                if y0 < fy0.floor() || y0 > fy1.ceil() {
                    continue;
                }
                let inv = &inverses[t];
                let x_lo = ((fx0.floor() - origin.0).max(0.0)) as usize;
                let x_hi = ((fx1.ceil() - origin.0) as usize).min(canvas_w - 1);
                let max_qx = (frame.width() - 1) as f64;
                let max_qy = (frame.height() - 1) as f64;
                for cx in x_lo..=x_hi {
                    let p = (origin.0 + cx as f64, y0);
                    let q = inv.apply(p);
                    if q.0 < 0.0 || q.0 > max_qx || q.1 < 0.0 || q.1 > max_qy {
                        continue;
                    }
                    let s = bilinear_sample(frame, q.0, q.1, OutOfBounds::Zero);
                    match blend {
                        Blend::Average => {
                            value[cx] += s;
                            weight[cx] += 1.0;
                        }
                        Blend::LastWriter => {
                            value[cx] = s;
                            weight[cx] += 1.0;
                        }
                    }
                }
            }
            if matches!(blend, Blend::Average) {
                for (v, &w) in value.iter_mut().zip(&weight) {
                    if w > 0.0 {
                        *v /= w;
                    }
                }
            }
            (value, weight)
        })
        .collect();

    let mut image = ImageFrame::new(canvas_w, canvas_h);
    let mut weight = vec![0.0; canvas_w * canvas_h];
    for (cy, (vals, wts)) in rows.into_iter().enumerate() {
        image.data_mut()[cy * canvas_w..(cy + 1) * canvas_w].copy_from_slice(&vals);
        weight[cy * canvas_w..(cy + 1) * canvas_w].copy_from_slice(&wts);
    }
    Ok(MosaicCanvas {
        image,
        weight,
        origin_offset: origin,
    })
}

// --- file interface -------------------------------------------------------

pub const HOMOGRAPHY_CSV_HEADER: &str = "frame,a,b,tx,c,d,ty";

/// Write relative transforms, one row per frame, frame 0 first.
pub fn write_homography_csv(path: impl AsRef<Path>, relative: &[AffineTransform]) -> Result<()> {
    let mut text = String::from(HOMOGRAPHY_CSV_HEADER);
    text.push('\n');
    for (t, rel) in relative.iter().enumerate() {
        let [a, b, tx, c, d, ty] = rel.to_row();
        text.push_str(&format!("{t},{a},{b},{tx},{c},{d},{ty}\n"));
    }
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Read relative transforms from a CSV written by [`write_homography_csv`]
/// or from a ground-truth CSV (whose extra parameter columns are ignored).
pub fn read_homography_csv(path: impl AsRef<Path>) -> Result<Vec<AffineTransform>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty CSV", path.display())))?
        .trim();
    let plain = header == HOMOGRAPHY_CSV_HEADER;
    let with_params = header == crate::pig::TRUTH_CSV_HEADER;
    if !plain && !with_params {
        return Err(Error::Format(format!(
            "{}: unexpected CSV header {header:?}",
            path.display()
        )));
    }
    let expected_fields = if plain { 7 } else { 10 };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_fields {
            return Err(Error::Format(format!(
                "{}: row {} has {} fields, expected {expected_fields}",
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
        let mut row = [0.0f64; 6];
        for (k, f) in fields[1..7].iter().enumerate() {
            row[k] = f
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad number {f:?}", path.display())))?;
        }
        out.push(AffineTransform::from_row(row));
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}
