//! Gel image data model and Netpbm graymap (PGM) I/O.
//!
//! Densities are stored with a fixed polarity: `0` means no stain and
//! `max_density` means the strongest stain. File polarity is only handled at
//! load time through the `dark_is_stain` flag.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("malformed PGM: {0}")]
    Format(String),
    #[error("sample {value} at index {index} exceeds maxval {max}")]
    Range { index: usize, value: u32, max: u16 },
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid image dimensions: {0}")]
    Dimension(String),
}

/// Integer pixel position, origin top-left; `x` runs along the pH axis and
/// `y` along the mass axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct PixelCoord {
    pub x: usize,
    pub y: usize,
}

impl PixelCoord {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Nearest pixel to a continuous position, rounding half up per axis.
    /// Negative positions clamp to 0.
    pub fn round_from(x: f64, y: f64) -> Self {
        let r = |v: f64| (v + 0.5).floor().max(0.0) as usize;
        Self::new(r(x), r(y))
    }
}

impl From<[usize; 2]> for PixelCoord {
    fn from([x, y]: [usize; 2]) -> Self {
        Self { x, y }
    }
}

impl From<PixelCoord> for [usize; 2] {
    fn from(p: PixelCoord) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for PixelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Rectangular grid of stain densities, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GelImage {
    width: usize,
    height: usize,
    max_density: u16,
    data: Vec<u16>,
}

impl GelImage {
    pub fn new(
        width: usize,
        height: usize,
        max_density: u16,
        data: Vec<u16>,
    ) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Dimension(format!("{width}x{height}")));
        }
        if max_density == 0 {
            return Err(ImageError::Dimension("max_density must be >= 1".into()));
        }
        if data.len() != width * height {
            return Err(ImageError::Dimension(format!(
                "{} samples for {width}x{height}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > max_density) {
            return Err(ImageError::Range {
                index,
                value: value.into(),
                max: max_density,
            });
        }
        Ok(Self {
            width,
            height,
            max_density,
            data,
        })
    }

    /// An image with every pixel set to `value` (clamped to `max_density`).
    pub fn filled(
        width: usize,
        height: usize,
        max_density: u16,
        value: u16,
    ) -> Result<Self, ImageError> {
        Self::new(
            width,
            height,
            max_density,
            vec![value.min(max_density); width * height],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn max_density(&self) -> u16 {
        self.max_density
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn density_at(&self, coord: PixelCoord) -> Result<u16, ImageError> {
        if coord.x >= self.width || coord.y >= self.height {
            return Err(ImageError::OutOfBounds {
                x: coord.x,
                y: coord.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(self.data[coord.y * self.width + coord.x])
    }

    /// Unchecked-by-`Result` accessor for hot loops; panics when out of bounds.
    #[inline]
    pub(crate) fn at(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Swaps polarity: every value `v` becomes `max_density - v`.
    pub fn inverted(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| self.max_density - v).collect(),
            ..self.clone()
        }
    }
}

/// Free-function form of [`GelImage::density_at`].
pub fn density_at(image: &GelImage, coord: PixelCoord) -> Result<u16, ImageError> {
    image.density_at(coord)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PgmFormat {
    /// ASCII samples.
    Plain,
    /// Binary samples, big-endian when 16 bit.
    #[default]
    Raw,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_ws_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ImageError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Format(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Format(format!("{what} out of range")))
    }
}

/// Parses a P2 or P5 graymap.
///
/// With `dark_is_stain` set the stored density is `maxval - sample`, which is
/// the right choice for scans where stained protein appears dark.
pub fn load_pgm(bytes: &[u8], dark_is_stain: bool) -> Result<GelImage, ImageError> {
    let format = match bytes.get(..2) {
        Some(b"P2") => PgmFormat::Plain,
        Some(b"P5") => PgmFormat::Raw,
        _ => return Err(ImageError::Format("bad magic number".into())),
    };
    let mut reader = HeaderReader { bytes, pos: 2 };
    if !reader
        .bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(ImageError::Format("bad magic number".into()));
    }
    let width = reader.number("width")? as usize;
    let height = reader.number("height")? as usize;
    let maxval = reader.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageError::Format(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(ImageError::Format(format!(
            "maxval {maxval} not in 1..=65535"
        )));
    }
    let maxval = maxval as u16;
    let count = width
        .checked_mul(height)
        .ok_or_else(|| ImageError::Format("dimensions overflow".into()))?;

    let mut samples = Vec::with_capacity(count);
    match format {
        PgmFormat::Plain => {
            for _ in 0..count {
                reader.skip_ws_and_comments();
                if reader.pos >= bytes.len() {
                    return Err(ImageError::Format(format!(
                        "truncated: {} of {count} samples",
                        samples.len()
                    )));
                }
                samples.push(reader.number("sample")?);
            }
        }
        PgmFormat::Raw => {
            // exactly one whitespace byte separates maxval from the raster
            if !bytes.get(reader.pos).is_some_and(u8::is_ascii_whitespace) {
                return Err(ImageError::Format("missing raster separator".into()));
            }
            let raster = &bytes[reader.pos + 1..];
            let bytes_per = if maxval < 256 { 1 } else { 2 };
            if raster.len() < count * bytes_per {
                return Err(ImageError::Format(format!(
                    "truncated: {} raster bytes, need {}",
                    raster.len(),
                    count * bytes_per
                )));
            }
            if bytes_per == 1 {
                samples.extend(raster[..count].iter().map(|&b| u32::from(b)));
            } else {
                samples.extend(
                    raster[..count * 2]
                        .chunks_exact(2)
                        .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]]))),
                );
            }
        }
    }

    let mut data = Vec::with_capacity(count);
    for (index, value) in samples.into_iter().enumerate() {
        if value > u32::from(maxval) {
            return Err(ImageError::Range {
                index,
                value,
                max: maxval,
            });
        }
        let v = value as u16;
        data.push(if dark_is_stain { maxval - v } else { v });
    }
    GelImage::new(width, height, maxval, data)
}

/// Encodes the stored densities as-is (no polarity change).
pub fn save_pgm(image: &GelImage, format: PgmFormat) -> Vec<u8> {
    let header = |magic: &str| {
        format!(
            "{magic}\n{} {}\n{}\n",
            image.width, image.height, image.max_density
        )
    };
    match format {
        PgmFormat::Plain => {
            let mut out = header("P2");
            for row in image.data.chunks(image.width) {
                let line: Vec<String> = row.iter().map(u16::to_string).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
        PgmFormat::Raw => {
            let mut out = header("P5").into_bytes();
            if image.max_density < 256 {
                out.extend(image.data.iter().map(|&v| v as u8));
            } else {
                for &v in &image.data {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            out
        }
    }
}
