//! Single-channel image frames and PGM/PPM file I/O.
//!
//! An [`ImageFrame`] is a row-major raster of 64-bit intensities, row 0 at
//! the top. Values are conventionally in [0, 1]; the 8-bit PGM writer clamps
//! to that range and rounds half-up.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Grayscale raster with 64-bit intensities.
#[derive(Clone, PartialEq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl fmt::Debug for ImageFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageFrame({}x{})", self.width, self.height)
    }
}

impl ImageFrame {
    /// All-zero frame. Both extents must be nonzero.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "frame extents must be nonzero");
        ImageFrame {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Build a frame by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = ImageFrame::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    /// Wrap an existing row-major buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Dimension(format!(
                "frame buffer of {} values does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(ImageFrame { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Elementwise map into a new frame.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ImageFrame {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Maximum absolute pixel difference; frames must share dimensions.
    pub fn max_abs_diff(&self, other: &ImageFrame) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dimension(format!(
                "cannot compare {}x{} with {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Encode as binary PGM (P5, 8-bit). Intensities are clamped to [0, 1]
    /// and rounded half-up onto 0..=255.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend(self.data.iter().map(|&v| quantize_u8(v)));
        out
    }

    /// Write as binary PGM, atomically (temp file + rename).
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_pgm_bytes())
    }

    /// Parse a binary PGM (P5) byte buffer. Maxval up to 255 is accepted and
    /// rescaled onto [0, 1].
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut p = PnmParser::new(bytes);
        p.expect_magic(b"P5")?;
        let width = p.next_number()? as usize;
        let height = p.next_number()? as usize;
        let maxval = p.next_number()?;
        if width == 0 || height == 0 {
            return Err(Error::Format("PGM with zero extent".into()));
        }
        if !(1..=255).contains(&maxval) {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        p.skip_single_whitespace()?;
        let raster = p.rest();
        let need = width * height;
        if raster.len() < need {
            return Err(Error::Format(format!(
                "PGM raster truncated: need {} bytes, have {}",
                need,
                raster.len()
            )));
        }
        let scale = 1.0 / maxval as f64;
        let data = raster[..need].iter().map(|&b| b as f64 * scale).collect();
        ImageFrame::from_vec(width, height, data)
    }

    /// Read a binary PGM file.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Read every `.pgm` file of a directory in lexicographic name order.
pub fn read_pgm_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageFrame>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<std::path::PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!(
            "{}: no .pgm frames found",
            dir.display()
        )));
    }
    names.iter().map(ImageFrame::read_pgm).collect()
}

/// Parse a binary PPM (P6) byte buffer into per-pixel RGB triples in [0, 1].
pub fn read_ppm_rgb(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<[f64; 3]>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut p = PnmParser::new(&bytes);
    p.expect_magic(b"P6")?;
    let width = p.next_number()? as usize;
    let height = p.next_number()? as usize;
    let maxval = p.next_number()?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    p.skip_single_whitespace()?;
    let raster = p.rest();
    let need = width * height * 3;
    if raster.len() < need {
        return Err(Error::Format(format!(
            "PPM raster truncated: need {} bytes, have {}",
            need,
            raster.len()
        )));
    }
    let scale = 1.0 / maxval as f64;
    let pixels = raster[..need]
        .chunks_exact(3)
        .map(|c| [c[0] as f64 * scale, c[1] as f64 * scale, c[2] as f64 * scale])
        .collect();
    Ok((width, height, pixels))
}

/// Minimal PNM header tokenizer: whitespace separated numbers, `#` comments.
struct PnmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PnmParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        PnmParser { bytes, pos: 0 }
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes.len() < magic.len() || &self.bytes[..magic.len()] != magic {
            return Err(Error::Format(format!(
                "not a {} file",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = magic.len();
        Ok(())
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn next_number(&mut self) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("expected number in PNM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad number in PNM header".into()))
    }

    /// Exactly one whitespace byte separates the header from the raster.
    fn skip_single_whitespace(&mut self) -> Result<()> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Format("missing whitespace before PNM raster".into()))
        }
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
