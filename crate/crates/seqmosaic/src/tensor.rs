//! Dense numeric kernels: small tensors, matrix multiply, 2D convolution,
//! softmax and bilinear sampling.
//!
//! Everything is 64-bit and evaluated in a fixed row-major accumulation
//! order, so results are bit-reproducible run to run. Convolution uses the
//! cross-correlation convention (no kernel flip) throughout the crate.

use crate::error::{Error, Result};
use crate::frame::ImageFrame;

/// Dense row-major array of up to 4 dimensions (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wrap a buffer. The shape product must equal the buffer length and
    /// every extent must be at least 1.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Dimension(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension("tensor extents must be >= 1".into()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect()).expect("from_fn: invalid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value at a rank-2 index.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Value at a rank-3 index.
    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    /// Value at a rank-4 index.
    #[inline]
    pub fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((i * self.shape[1] + j) * self.shape[2] + k) * self.shape[3] + l]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product of a [M, K] and b [K, N].
///
/// Accumulation runs k-innermost per output element, a fixed order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (kk, &av) in arow.iter().enumerate() {
                acc += av * b.data[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// Zero padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the spatial extent is preserved.
    SameZero,
    /// No padding; output shrinks by kernel-1.
    Valid,
}

/// 2D cross-correlation of `input` [C, H, W] with `kernel` [F, C, kh, kw].
///
/// Kernel extents must be odd. Accumulation order is channel, then kernel
/// row, then kernel column.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: Padding) -> Result<Tensor> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d needs input [C,H,W] and kernel [F,C,kh,kw], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (f, kc, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input has {c}, kernel expects {kc}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Dimension(format!(
            "conv2d kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    let (oh, ow) = match padding {
        Padding::SameZero => (h, w),
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::Dimension(format!(
                    "conv2d valid padding: input {h}x{w} smaller than kernel {kh}x{kw}"
                )));
            }
            (h - kh + 1, w - kw + 1)
        }
    };
    // top-left input coordinate feeding output (0, 0)
    let (y_off, x_off) = match padding {
        Padding::SameZero => (-((kh / 2) as isize), -((kw / 2) as isize)),
        Padding::Valid => (0, 0),
    };

    let mut out = vec![0.0; f * oh * ow];
    for fo in 0..f {
        let out_plane = &mut out[fo * oh * ow..(fo + 1) * oh * ow];
        for ci in 0..c {
            let in_plane = &input.data[ci * h * w..(ci + 1) * h * w];
            for dy in 0..kh {
                for dx in 0..kw {
                    let wgt = kernel.at4(fo, ci, dy, dx);
                    if wgt == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy as isize + y_off + dy as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        // clip the x range so ix = ox + x_off + dx stays in bounds
                        let shift = x_off + dx as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        for ox in ox_lo..ox_hi {
                            out_row[ox] += wgt * in_row[(ox as isize + shift) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[f, oh, ow], out)
}

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::Dimension(format!(
            "softmax needs a rank-1 tensor, got {:?}",
            v.shape()
        )));
    }
    let mut out = v.data.clone();
    softmax_slice(&mut out)?;
    Tensor::new(v.shape(), out)
}

/// In-place softmax over a slice, with max subtraction.
pub(crate) fn softmax_slice(v: &mut [f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Rectified linear unit, elementwise.
pub fn relu(t: &Tensor) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Behaviour of [`bilinear_sample`] outside the valid pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutOfBounds {
    /// Return 0 outside [0, W-1] x [0, H-1].
    Zero,
    /// Clamp coordinates onto the valid rectangle.
    Clamp,
}

/// Bilinear interpolation of the four pixel neighbours of (x, y).
///
/// Coordinates are in pixels with (0, 0) at the centre of the top-left
/// pixel. Exact on integer lattice points.
pub fn bilinear_sample(img: &ImageFrame, x: f64, y: f64, oob: OutOfBounds) -> f64 {
    let w = img.width();
    let h = img.height();
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let (x, y) = match oob {
        OutOfBounds::Zero => {
            if x < 0.0 || x > max_x || y < 0.0 || y > max_y || x.is_nan() || y.is_nan() {
                return 0.0;
            }
            (x, y)
        }
        OutOfBounds::Clamp => (x.clamp(0.0, max_x), y.clamp(0.0, max_y)),
    };
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let ix0 = x0 as usize;
    let iy0 = y0 as usize;
    let ix1 = (ix0 + 1).min(w - 1);
    let iy1 = (iy0 + 1).min(h - 1);
    let p00 = img.get(ix0, iy0);
    let p10 = img.get(ix1, iy0);
    let p01 = img.get(ix0, iy1);
    let p11 = img.get(ix1, iy1);
    (1.0 - fy) * ((1.0 - fx) * p00 + fx * p10) + fy * ((1.0 - fx) * p01 + fx * p11)
}
