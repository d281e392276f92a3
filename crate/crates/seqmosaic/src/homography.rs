//! Three-point homography parameterization, affine algebra and image warping.
//!
//! A planar transform between frames is carried as a 6-DoF affine map. Its
//! compact wire form is the displacement of three corners of a reference
//! rectangle ([`ThreePointDelta`]); three point correspondences determine the
//! affine exactly, and the fourth corner follows from the parallelogram
//! identity, which affine maps preserve.

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::tensor::{bilinear_sample, OutOfBounds};

/// Determinants below this are treated as singular.
const SINGULAR_EPS: f64 = 1e-12;

/// 2x3 affine map `[x'; y'] = [[a, b], [c, d]] [x; y] + [tx; ty]`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        c: 0.0,
        d: 1.0,
        ty: 0.0,
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            a: 1.0,
            b: 0.0,
            tx,
            c: 0.0,
            d: 1.0,
            ty,
        }
    }

    /// Rigid map rotating by `alpha` about `center` then translating by
    /// (dx, dy). The rotation matrix is `[[cos a, sin a], [-sin a, cos a]]`.
    pub fn rigid_about(alpha: f64, dx: f64, dy: f64, center: (f64, f64)) -> Self {
        let (sin, cos) = alpha.sin_cos();
        let (cx, cy) = center;
        // x' = R (x - c) + c + d
        AffineTransform {
            a: cos,
            b: sin,
            tx: cx - (cos * cx + sin * cy) + dx,
            c: -sin,
            d: cos,
            ty: cy - (-sin * cx + cos * cy) + dy,
        }
    }

    #[inline]
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a * p.0 + self.b * p.1 + self.tx,
            self.c * p.0 + self.d * p.1 + self.ty,
        )
    }

    /// Determinant of the linear part.
    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > SINGULAR_EPS
    }

    /// `self` after `inner`: `(self ∘ inner)(p) = self(inner(p))`.
    pub fn compose(&self, inner: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a: self.a * inner.a + self.b * inner.c,
            b: self.a * inner.b + self.b * inner.d,
            tx: self.a * inner.tx + self.b * inner.ty + self.tx,
            c: self.c * inner.a + self.d * inner.c,
            d: self.c * inner.b + self.d * inner.d,
            ty: self.c * inner.tx + self.d * inner.ty + self.ty,
        }
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.det();
        if det.abs() <= SINGULAR_EPS {
            return Err(Error::Degenerate(format!(
                "affine transform is singular (det = {det:e})"
            )));
        }
        let ia = self.d / det;
        let ib = -self.b / det;
        let ic = -self.c / det;
        let id = self.a / det;
        Ok(AffineTransform {
            a: ia,
            b: ib,
            tx: -(ia * self.tx + ib * self.ty),
            c: ic,
            d: id,
            ty: -(ic * self.tx + id * self.ty),
        })
    }

    /// CSV row order: a, b, tx, c, d, ty.
    pub fn to_row(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    pub fn from_row(row: [f64; 6]) -> Self {
        AffineTransform {
            a: row[0],
            b: row[1],
            tx: row[2],
            c: row[3],
            d: row[4],
            ty: row[5],
        }
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        self.to_row()
            .iter()
            .zip(other.to_row())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

/// Displacements (dx_i, dy_i) of the first three corners of a reference
/// rectangle, the compact parameterization of an [`AffineTransform`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreePointDelta {
    pub deltas: [(f64, f64); 3],
}

impl ThreePointDelta {
    pub fn zero() -> Self {
        ThreePointDelta {
            deltas: [(0.0, 0.0); 3],
        }
    }

    /// Flat layout (dx1, dx2, dx3, dy1, dy2, dy3), the regressor output order.
    pub fn to_flat(&self) -> [f64; 6] {
        [
            self.deltas[0].0,
            self.deltas[1].0,
            self.deltas[2].0,
            self.deltas[0].1,
            self.deltas[1].1,
            self.deltas[2].1,
        ]
    }

    pub fn from_flat(flat: [f64; 6]) -> Self {
        ThreePointDelta {
            deltas: [
                (flat[0], flat[3]),
                (flat[1], flat[4]),
                (flat[2], flat[5]),
            ],
        }
    }
}

/// Corners of an axis-aligned rectangle, ordered top-left, top-right,
/// bottom-right, bottom-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchCorners {
    corners: [(f64, f64); 4],
}

impl PatchCorners {
    /// Rectangle spanning [x0, x1] x [y0, y1]; both spans must be nonzero.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) || !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::Degenerate(format!(
                "patch corners must span a nondegenerate rectangle, got [{x0}, {x1}] x [{y0}, {y1}]"
            )));
        }
        Ok(PatchCorners {
            corners: [(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
        })
    }

    /// Full-frame rectangle (0, 0) .. (width-1, height-1).
    pub fn of_frame(width: usize, height: usize) -> Self {
        Self::rect(0.0, 0.0, (width - 1) as f64, (height - 1) as f64)
            .expect("frame extents must be >= 2 pixels")
    }

    pub fn corners(&self) -> &[(f64, f64); 4] {
        &self.corners
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.corners[0].0 + self.corners[2].0) / 2.0,
            (self.corners[0].1 + self.corners[2].1) / 2.0,
        )
    }
}

/// Solve for the affine mapping each of the first three reference corners
/// onto `corner + delta`. The solved transform reproduces the three target
/// corners exactly (up to solver round-off).
pub fn affine_from_deltas(reference: &PatchCorners, delta: &ThreePointDelta) -> Result<AffineTransform> {
    let pts = &reference.corners;
    let src = [pts[0], pts[1], pts[2]];
    let dst = [
        (pts[0].0 + delta.deltas[0].0, pts[0].1 + delta.deltas[0].1),
        (pts[1].0 + delta.deltas[1].0, pts[1].1 + delta.deltas[1].1),
        (pts[2].0 + delta.deltas[2].0, pts[2].1 + delta.deltas[2].1),
    ];
    affine_from_three_points(&src, &dst)
}

/// Exact affine from three point correspondences.
pub(crate) fn affine_from_three_points(
    src: &[(f64, f64); 3],
    dst: &[(f64, f64); 3],
) -> Result<AffineTransform> {
    // twice the signed area of the source triangle
    let det = (src[1].0 - src[0].0) * (src[2].1 - src[0].1)
        - (src[2].0 - src[0].0) * (src[1].1 - src[0].1);
    let span = src
        .iter()
        .flat_map(|p| [p.0.abs(), p.1.abs()])
        .fold(1.0f64, f64::max);
    if det.abs() <= 1e-9 * span * span {
        return Err(Error::Degenerate(
            "reference corners are collinear; affine is underdetermined".into(),
        ));
    }
    let m = [
        [src[0].0, src[0].1, 1.0],
        [src[1].0, src[1].1, 1.0],
        [src[2].0, src[2].1, 1.0],
    ];
    let xs = solve3(m, [dst[0].0, dst[1].0, dst[2].0])?;
    let ys = solve3(m, [dst[0].1, dst[1].1, dst[2].1])?;
    Ok(AffineTransform {
        a: xs[0],
        b: xs[1],
        tx: xs[2],
        c: ys[0],
        d: ys[1],
        ty: ys[2],
    })
}

/// 3x3 linear solve with partial pivoting.
pub(crate) fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Result<[f64; 3]> {
    let mut aug = [
        [m[0][0], m[0][1], m[0][2], rhs[0]],
        [m[1][0], m[1][1], m[1][2], rhs[1]],
        [m[2][0], m[2][1], m[2][2], rhs[2]],
    ];
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
            .unwrap();
        if aug[pivot_row][col].abs() <= SINGULAR_EPS {
            return Err(Error::Degenerate("singular 3x3 system".into()));
        }
        aug.swap(col, pivot_row);
        for row in (col + 1)..3 {
            let factor = aug[row][col] / aug[col][col];
            for k in col..4 {
                aug[row][k] -= factor * aug[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = aug[row][3];
        for k in (row + 1)..3 {
            acc -= aug[row][k] * x[k];
        }
        x[row] = acc / aug[row][row];
    }
    Ok(x)
}

/// Corner displacements of `t` on the first three reference corners; the
/// exact inverse of [`affine_from_deltas`].
pub fn deltas_from_affine(reference: &PatchCorners, t: &AffineTransform) -> ThreePointDelta {
    let mut deltas = [(0.0, 0.0); 3];
    for (i, d) in deltas.iter_mut().enumerate() {
        let p = reference.corners[i];
        let q = t.apply(p);
        *d = (q.0 - p.0, q.1 - p.1);
    }
    ThreePointDelta { deltas }
}

/// Image of the fourth reference corner under `t`. Equals
/// `t(c1) + t(c3) - t(c2)` because affine maps preserve the parallelogram
/// identity.
pub fn fourth_corner(reference: &PatchCorners, t: &AffineTransform) -> (f64, f64) {
    t.apply(reference.corners[3])
}

/// Inverse-warp `img` by `t` onto an `out_w` x `out_h` canvas:
/// `output(p) = bilinear_sample(img, t^-1(p))`.
pub fn warp(
    img: &ImageFrame,
    t: &AffineTransform,
    out_w: usize,
    out_h: usize,
    oob: OutOfBounds,
) -> Result<ImageFrame> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension("warp output extents must be >= 1".into()));
    }
    let inv = t.invert()?;
    let mut out = ImageFrame::new(out_w, out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let q = inv.apply((x as f64, y as f64));
            out.set(x, y, bilinear_sample(img, q.0, q.1, oob));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_rejects_degenerate_spans() {
        assert!(PatchCorners::rect(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(PatchCorners::rect(2.0, 2.0, 1.0, 5.0).is_err());
    }

    #[test]
    fn parallelogram_identity_holds_for_rectangles() {
        let pc = PatchCorners::rect(3.0, 4.0, 10.0, 20.0).unwrap();
        let c = pc.corners();
        assert_eq!(c[3].0, c[0].0 + c[2].0 - c[1].0);
        assert_eq!(c[3].1, c[0].1 + c[2].1 - c[1].1);
    }

    #[test]
    fn zero_deltas_give_identity() {
        let pc = PatchCorners::rect(0.0, 0.0, 63.0, 63.0).unwrap();
        let t = affine_from_deltas(&pc, &ThreePointDelta::zero()).unwrap();
        assert!(t.max_abs_diff(&AffineTransform::IDENTITY) < 1e-12);
    }

    #[test]
    fn uniform_deltas_give_translation() {
        let pc = PatchCorners::rect(0.0, 0.0, 63.0, 63.0).unwrap();
        let d = ThreePointDelta {
            deltas: [(5.0, 0.0); 3],
        };
        let t = affine_from_deltas(&pc, &d).unwrap();
        assert!(t.max_abs_diff(&AffineTransform::translation(5.0, 0.0)) < 1e-12);
    }

    #[test]
    fn collinear_reference_is_degenerate() {
        let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        let dst = src;
        assert!(matches!(
            affine_from_three_points(&src, &dst),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn identity_and_translation_deltas() {
        let pc = PatchCorners::rect(0.0, 0.0, 31.0, 31.0).unwrap();
        let d = deltas_from_affine(&pc, &AffineTransform::IDENTITY);
        assert_eq!(d, ThreePointDelta::zero());
        let d = deltas_from_affine(&pc, &AffineTransform::translation(3.0, -2.0));
        for (dx, dy) in d.deltas {
            assert_eq!((dx, dy), (3.0, -2.0));
        }
    }

    #[test]
    fn compose_with_identity_and_inverse_rotations() {
        let t = AffineTransform::rigid_about(0.3, 4.0, -1.0, (10.0, 10.0));
        assert!(AffineTransform::IDENTITY.compose(&t).max_abs_diff(&t) < 1e-15);
        let r = AffineTransform::rigid_about(0.25, 0.0, 0.0, (0.0, 0.0));
        let rinv = AffineTransform::rigid_about(-0.25, 0.0, 0.0, (0.0, 0.0));
        assert!(r.compose(&rinv).max_abs_diff(&AffineTransform::IDENTITY) < 1e-15);
    }

    #[test]
    fn invert_rejects_singular() {
        let t = AffineTransform {
            a: 1.0,
            b: 2.0,
            tx: 0.0,
            c: 2.0,
            d: 4.0,
            ty: 0.0,
        };
        assert!(matches!(t.invert(), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fourth_corner_trivial_cases() {
        let pc = PatchCorners::rect(0.0, 0.0, 7.0, 5.0).unwrap();
        assert_eq!(fourth_corner(&pc, &AffineTransform::IDENTITY), (0.0, 5.0));
        assert_eq!(
            fourth_corner(&pc, &AffineTransform::translation(2.0, 3.0)),
            (2.0, 8.0)
        );
    }

    #[test]
    fn warp_identity_preserves_image() {
        let img = ImageFrame::from_fn(9, 7, |x, y| (x as f64 * 0.1 + y as f64 * 0.05).fract());
        let out = warp(&img, &AffineTransform::IDENTITY, 9, 7, OutOfBounds::Zero).unwrap();
        assert!(img.max_abs_diff(&out).unwrap() <= 1e-12);
    }

    #[test]
    fn warp_translation_on_constant_image() {
        let img = ImageFrame::from_fn(8, 8, |_, _| 0.75);
        let out = warp(
            &img,
            &AffineTransform::translation(1.0, 0.0),
            8,
            8,
            OutOfBounds::Zero,
        )
        .unwrap();
        // interior: every pixel except the x = 0 column maps inside the source
        for y in 0..8 {
            for x in 1..8 {
                assert!((out.get(x, y) - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_rejects_singular_and_empty_output() {
        let img = ImageFrame::new(4, 4);
        let singular = AffineTransform {
            a: 0.0,
            b: 0.0,
            tx: 0.0,
            c: 0.0,
            d: 0.0,
            ty: 0.0,
        };
        assert!(warp(&img, &singular, 4, 4, OutOfBounds::Zero).is_err());
        assert!(warp(&img, &AffineTransform::IDENTITY, 0, 4, OutOfBounds::Zero).is_err());
    }
}
