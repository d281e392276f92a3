//! Drift and photometric error metrics.
//!
//! MRE compares predicted and ground-truth global transforms by the mean
//! Euclidean distance of the four warped frame corners, in pixels. RMSE and
//! APE compare the two warped copies of each frame photometrically over the
//! pixels both copies cover. Intensities live in [0, 1]; the CSV output
//! scales RMSE and APE by 255 for readability against 8-bit conventions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::fsutil::write_atomic;
use crate::homography::PatchCorners;
use crate::mosaic::HomographyChain;
use crate::tensor::{bilinear_sample, OutOfBounds};

/// Per-frame drift record.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameErrors {
    pub frame: usize,
    pub corner_error_px: f64,
    /// Root-mean-square intensity error over the overlap, in [0, 1].
    pub rmse: f64,
    /// Mean absolute intensity error over the overlap, in [0, 1].
    pub ape: f64,
}

/// Drift curve plus summary means; one row per frame from 1 on.
#[derive(Debug, Clone)]
pub struct DriftReport {
    pub per_frame: Vec<FrameErrors>,
    pub mean_corner_error_px: f64,
    pub mean_rmse: f64,
    pub mean_ape: f64,
}

/// Mean residual corner error per frame, plus the mean over frames.
///
/// For each frame t >= 1 the error is the mean over the four `reference`
/// corners of the distance between the predicted and true global images of
/// that corner.
pub fn mre(
    pred: &HomographyChain,
    truth: &HomographyChain,
    reference: &PatchCorners,
) -> Result<(Vec<f64>, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "chain lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut per_frame = Vec::with_capacity(pred.len().saturating_sub(1));
    for t in 1..pred.len() {
        let gp = &pred.global()[t];
        let gt = &truth.global()[t];
        let mut sum = 0.0;
        for &corner in reference.corners() {
            let (px, py) = gp.apply(corner);
            let (tx, ty) = gt.apply(corner);
            sum += ((px - tx).powi(2) + (py - ty).powi(2)).sqrt();
        }
        per_frame.push(sum / 4.0);
    }
    let mean = if per_frame.is_empty() {
        0.0
    } else {
        per_frame.iter().sum::<f64>() / per_frame.len() as f64
    };
    Ok((per_frame, mean))
}

fn check_mask(a: &ImageFrame, b: &ImageFrame, mask: &[bool]) -> Result<usize> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Dimension(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if mask.len() != a.data().len() {
        return Err(Error::Dimension(format!(
            "mask of {} entries for {} pixels",
            mask.len(),
            a.data().len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(n)
}

/// Root-mean-square intensity difference over the masked pixels.
pub fn rmse(a: &ImageFrame, b: &ImageFrame, mask: &[bool]) -> Result<f64> {
    let n = check_mask(a, b, mask)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|((&x, &y), _)| (x - y) * (x - y))
        .sum();
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute intensity difference over the masked pixels.
pub fn ape(a: &ImageFrame, b: &ImageFrame, mask: &[bool]) -> Result<f64> {
    let n = check_mask(a, b, mask)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|((&x, &y), _)| (x - y).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Assemble the full drift report: per frame, the corner error between the
/// chains plus RMSE/APE between the frame warped by the predicted global
/// transform and by the true one, over the pixels both warps cover.
pub fn drift_curve(
    pred: &HomographyChain,
    truth: &HomographyChain,
    frames: &[ImageFrame],
) -> Result<DriftReport> {
    if frames.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} frames but chains of length {}",
            frames.len(),
            pred.len()
        )));
    }
    let reference = PatchCorners::of_frame(frames[0].width(), frames[0].height());
    let (corner_errors, mean_corner) = mre(pred, truth, &reference)?;

    let mut per_frame = Vec::with_capacity(corner_errors.len());
    let mut rmse_sum = 0.0;
    let mut ape_sum = 0.0;
    for t in 1..frames.len() {
        let (r, a) = photometric_pair(&frames[t], &pred.global()[t], &truth.global()[t])?;
        rmse_sum += r;
        ape_sum += a;
        per_frame.push(FrameErrors {
            frame: t,
            corner_error_px: corner_errors[t - 1],
            rmse: r,
            ape: a,
        });
    }
    let n = per_frame.len().max(1) as f64;
    Ok(DriftReport {
        per_frame,
        mean_corner_error_px: mean_corner,
        mean_rmse: rmse_sum / n,
        mean_ape: ape_sum / n,
    })
}

/// Warp one frame by two competing global transforms onto a shared canvas
/// and compare the copies where both land.
fn photometric_pair(
    frame: &ImageFrame,
    pred_g: &crate::homography::AffineTransform,
    truth_g: &crate::homography::AffineTransform,
) -> Result<(f64, f64)> {
    let w = (frame.width() - 1) as f64;
    let h = (frame.height() - 1) as f64;
    let mut min_x = f64::MAX;
    let mut min_y = f64::MAX;
    let mut max_x = f64::MIN;
    let mut max_y = f64::MIN;
    for g in [pred_g, truth_g] {
        for corner in [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)] {
            let (x, y) = g.apply(corner);
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    let origin = (min_x.floor(), min_y.floor());
    let canvas_w = (max_x.ceil() - origin.0) as usize + 1;
    let canvas_h = (max_y.ceil() - origin.1) as usize + 1;

    let inv_pred = pred_g.invert()?;
    let inv_truth = truth_g.invert()?;
    let mut warped_pred = ImageFrame::new(canvas_w, canvas_h);
    let mut warped_truth = ImageFrame::new(canvas_w, canvas_h);
    let mut mask = vec![false; canvas_w * canvas_h];
    for cy in 0..canvas_h {
        for cx in 0..canvas_w {
            let p = (origin.0 + cx as f64, origin.1 + cy as f64);
            let qp = inv_pred.apply(p);
            let qt = inv_truth.apply(p);
            let inside_p = qp.0 >= 0.0 && qp.0 <= w && qp.1 >= 0.0 && qp.1 <= h;
            let inside_t = qt.0 >= 0.0 && qt.0 <= w && qt.1 >= 0.0 && qt.1 <= h;
            if inside_p {
                warped_pred.set(cx, cy, bilinear_sample(frame, qp.0, qp.1, OutOfBounds::Zero));
            }
            if inside_t {
                warped_truth.set(cx, cy, bilinear_sample(frame, qt.0, qt.1, OutOfBounds::Zero));
            }
            mask[cy * canvas_w + cx] = inside_p && inside_t;
        }
    }
    Ok((
        rmse(&warped_pred, &warped_truth, &mask)?,
        ape(&warped_pred, &warped_truth, &mask)?,
    ))
}

// --- file interface -------------------------------------------------------

pub const METRICS_CSV_HEADER: &str = "frame,mre_px,rmse_255,ape_255";

/// Metrics CSV: one row per frame from 1 on, then a summary `mean` row.
/// RMSE and APE are scaled by 255.
pub fn write_metrics_csv(path: impl AsRef<Path>, report: &DriftReport) -> Result<()> {
    let mut text = String::from(METRICS_CSV_HEADER);
    text.push('\n');
    for row in &report.per_frame {
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.frame,
            row.corner_error_px,
            row.rmse * 255.0,
            row.ape * 255.0
        ));
    }
    text.push_str(&format!(
        "mean,{},{},{}\n",
        report.mean_corner_error_px,
        report.mean_rmse * 255.0,
        report.mean_ape * 255.0
    ));
    write_atomic(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homography::AffineTransform;
    use crate::mosaic::accumulate;

    fn chain_of(rels: &[AffineTransform]) -> HomographyChain {
        accumulate(rels).unwrap()
    }

    #[test]
    fn mre_zero_for_equal_chains() {
        let rels = [
            AffineTransform::IDENTITY,
            AffineTransform::translation(2.0, 1.0),
            AffineTransform::rigid_about(0.05, 1.0, -2.0, (32.0, 32.0)),
        ];
        let chain = chain_of(&rels);
        let reference = PatchCorners::rect(0.0, 0.0, 63.0, 63.0).unwrap();
        let (per_frame, mean) = mre(&chain, &chain, &reference).unwrap();
        assert_eq!(per_frame, vec![0.0, 0.0]);
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn mre_three_four_five() {
        let truth = chain_of(&[AffineTransform::IDENTITY, AffineTransform::IDENTITY]);
        let pred = chain_of(&[AffineTransform::IDENTITY, AffineTransform::translation(3.0, 4.0)]);
        let reference = PatchCorners::rect(0.0, 0.0, 63.0, 63.0).unwrap();
        let (per_frame, mean) = mre(&pred, &truth, &reference).unwrap();
        assert_eq!(per_frame, vec![5.0]);
        assert_eq!(mean, 5.0);
    }

    #[test]
    fn mre_rejects_length_mismatch() {
        let a = chain_of(&[AffineTransform::IDENTITY]);
        let b = chain_of(&[AffineTransform::IDENTITY, AffineTransform::IDENTITY]);
        let reference = PatchCorners::rect(0.0, 0.0, 7.0, 7.0).unwrap();
        assert!(matches!(mre(&a, &b, &reference), Err(Error::Dimension(_))));
    }

    #[test]
    fn rmse_and_ape_trivial_cases() {
        let a = ImageFrame::from_fn(8, 8, |_, _| 0.0);
        let b = ImageFrame::from_fn(8, 8, |_, _| 1.0);
        let mask = vec![true; 64];
        assert_eq!(rmse(&a, &a, &mask).unwrap(), 0.0);
        assert_eq!(ape(&a, &a, &mask).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b, &mask).unwrap(), 1.0);
        let c = ImageFrame::from_fn(8, 8, |_, _| 0.25);
        let d = ImageFrame::from_fn(8, 8, |_, _| 0.75);
        assert!((ape(&c, &d, &mask).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let a = ImageFrame::new(4, 4);
        let mask = vec![false; 16];
        assert!(matches!(rmse(&a, &a, &mask), Err(Error::EmptyOverlap)));
        assert!(matches!(ape(&a, &a, &mask), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = ImageFrame::from_fn(6, 6, |x, y| (x as f64 * 0.13 + y as f64 * 0.07) % 1.0);
        let b = ImageFrame::from_fn(6, 6, |x, y| (x as f64 * 0.05 + y as f64 * 0.11) % 1.0);
        let mask = vec![true; 36];
        assert_eq!(rmse(&a, &b, &mask).unwrap(), rmse(&b, &a, &mask).unwrap());
        assert_eq!(ape(&a, &b, &mask).unwrap(), ape(&b, &a, &mask).unwrap());
    }

    #[test]
    fn drift_report_shape_and_zero_case() {
        let frames: Vec<ImageFrame> = (0..4)
            .map(|i| ImageFrame::from_fn(64, 64, |x, y| ((x + y + i) % 9) as f64 / 9.0))
            .collect();
        let rels = [
            AffineTransform::IDENTITY,
            AffineTransform::translation(1.0, 0.0),
            AffineTransform::translation(0.0, 1.0),
            AffineTransform::translation(-1.0, 2.0),
        ];
        let chain = chain_of(&rels);
        let report = drift_curve(&chain, &chain, &frames).unwrap();
        assert_eq!(report.per_frame.len(), 3);
        for row in &report.per_frame {
            assert_eq!(row.corner_error_px, 0.0);
            assert!(row.rmse < 1e-12);
            assert!(row.ape < 1e-12);
        }
    }
}
