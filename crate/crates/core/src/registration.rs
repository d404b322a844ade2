//! Two-landmark affine normalization.
//!
//! Two reference spots give four scalar constraints, so the map is restricted
//! to independent scaling and translation along each axis:
//! `x' = sx * x + tx`, `y' = sy * y + ty`. Resampling uses inverse mapping:
//! every output pixel pulls its value from the source image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{GelImage, ImageError, PixelCoord};

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("reference points {a} and {b} share a row or a column")]
    DegenerateReferences { a: PixelCoord, b: PixelCoord },
    #[error("affine scale factors must be nonzero and finite (sx={sx}, sy={sy})")]
    InvalidScale { sx: f64, sy: f64 },
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// The two landmark pixels `A` and `B`. They must differ in both coordinates,
/// otherwise one axis of the map is undetermined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPair", into = "RawPair")]
pub struct ReferencePair {
    a: PixelCoord,
    b: PixelCoord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    a: PixelCoord,
    b: PixelCoord,
}

impl TryFrom<RawPair> for ReferencePair {
    type Error = RegistrationError;
    fn try_from(raw: RawPair) -> Result<Self, Self::Error> {
        Self::new(raw.a, raw.b)
    }
}

impl From<ReferencePair> for RawPair {
    fn from(p: ReferencePair) -> Self {
        Self { a: p.a, b: p.b }
    }
}

impl ReferencePair {
    pub fn new(a: PixelCoord, b: PixelCoord) -> Result<Self, RegistrationError> {
        if a.x == b.x || a.y == b.y {
            return Err(RegistrationError::DegenerateReferences { a, b });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> PixelCoord {
        self.a
    }

    pub fn b(&self) -> PixelCoord {
        self.b
    }

    /// Shifts both points by the same integer offset. Fails if a point would
    /// leave the nonnegative quadrant.
    pub fn translated(&self, dx: i64, dy: i64) -> Option<Self> {
        let shift = |p: PixelCoord| {
            let x = usize::try_from(p.x as i64 + dx).ok()?;
            let y = usize::try_from(p.y as i64 + dy).ok()?;
            Some(PixelCoord::new(x, y))
        };
        Some(Self {
            a: shift(self.a)?,
            b: shift(self.b)?,
        })
    }
}

/// `f(x) = M x + b` with diagonal `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMap", into = "RawMap")]
pub struct AffineMap {
    sx: f64,
    sy: f64,
    tx: f64,
    ty: f64,
}

#[derive(Serialize, Deserialize)]
struct RawMap {
    sx: f64,
    sy: f64,
    tx: f64,
    ty: f64,
}

impl TryFrom<RawMap> for AffineMap {
    type Error = RegistrationError;
    fn try_from(m: RawMap) -> Result<Self, Self::Error> {
        Self::new(m.sx, m.sy, m.tx, m.ty)
    }
}

impl From<AffineMap> for RawMap {
    fn from(m: AffineMap) -> Self {
        Self {
            sx: m.sx,
            sy: m.sy,
            tx: m.tx,
            ty: m.ty,
        }
    }
}

impl AffineMap {
    pub const IDENTITY: Self = Self {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Result<Self, RegistrationError> {
        let ok = |s: f64| s != 0.0 && s.is_finite();
        if !ok(sx) || !ok(sy) || !tx.is_finite() || !ty.is_finite() {
            return Err(RegistrationError::InvalidScale { sx, sy });
        }
        Ok(Self { sx, sy, tx, ty })
    }

    pub fn sx(&self) -> f64 {
        self.sx
    }

    pub fn sy(&self) -> f64 {
        self.sy
    }

    pub fn tx(&self) -> f64 {
        self.tx
    }

    pub fn ty(&self) -> f64 {
        self.ty
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.sx * x + self.tx, self.sy * y + self.ty)
    }

    pub fn invert(&self) -> Self {
        Self {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            tx: -self.tx / self.sx,
            ty: -self.ty / self.sy,
        }
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &AffineMap) -> Self {
        Self {
            sx: self.sx * inner.sx,
            sy: self.sy * inner.sy,
            tx: self.sx * inner.tx + self.tx,
            ty: self.sy * inner.ty + self.ty,
        }
    }
}

pub fn apply_map(map: &AffineMap, point: (f64, f64)) -> (f64, f64) {
    map.apply(point)
}

pub fn invert_map(map: &AffineMap) -> AffineMap {
    map.invert()
}

/// Solves for the map sending `src.A` to `dst.A` and `src.B` to `dst.B`.
pub fn solve_affine(
    src: &ReferencePair,
    dst: &ReferencePair,
) -> Result<AffineMap, RegistrationError> {
    for pair in [src, dst] {
        ReferencePair::new(pair.a, pair.b)?;
    }
    let axis = |sa: usize, sb: usize, da: usize, db: usize| {
        let scale = (db as f64 - da as f64) / (sb as f64 - sa as f64);
        (scale, da as f64 - scale * sa as f64)
    };
    let (sx, tx) = axis(src.a.x, src.b.x, dst.a.x, dst.b.x);
    let (sy, ty) = axis(src.a.y, src.b.y, dst.a.y, dst.b.y);
    AffineMap::new(sx, sy, tx, ty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub fill: u16,
}

impl RoiSpec {
    pub fn new(width: usize, height: usize, fill: u16) -> Result<Self, RegistrationError> {
        if width == 0 || height == 0 {
            return Err(RegistrationError::Dimension(format!(
                "ROI {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            fill,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpKind {
    #[default]
    Bilinear,
    /// Truncated Gaussian kernel over a `(2 * radius + 1)^2` neighbourhood.
    Gaussian { radius: usize, sigma: f64 },
}

impl InterpKind {
    pub const DEFAULT_GAUSSIAN: Self = Self::Gaussian {
        radius: 2,
        sigma: 1.0,
    };

    pub fn validate(&self) -> Result<(), RegistrationError> {
        match *self {
            Self::Bilinear => Ok(()),
            Self::Gaussian { radius, sigma } if radius >= 1 && sigma > 0.0 => Ok(()),
            Self::Gaussian { radius, sigma } => Err(RegistrationError::Dimension(format!(
                "gaussian kernel needs radius >= 1 and sigma > 0 (got {radius}, {sigma})"
            ))),
        }
    }
}

/// Source position split into integer pixel index and fractional offset in `[0, 1)`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    base: i64,
    frac: f64,
}

impl Tap {
    fn from_coord(u: f64) -> Self {
        let base = u.floor();
        Self {
            base: base as i64,
            frac: u - base,
        }
    }
}

const NODE_EPS: f64 = 1e-9;

struct Sampler<'a> {
    image: &'a GelImage,
    interp: InterpKind,
    fill: f64,
    gauss_denominator: f64,
}

impl<'a> Sampler<'a> {
    fn new(image: &'a GelImage, interp: InterpKind, fill: u16) -> Self {
        let gauss_denominator = match interp {
            InterpKind::Gaussian { sigma, .. } => 2.0 * sigma * sigma,
            InterpKind::Bilinear => 1.0,
        };
        Self {
            image,
            interp,
            fill: f64::from(fill.min(image.max_density())),
            gauss_denominator,
        }
    }

    fn pixel_or_fill(&self, x: i64, y: i64) -> f64 {
        if self.image.contains(x, y) {
            f64::from(self.image.at(x as usize, y as usize))
        } else {
            self.fill
        }
    }

    fn sample(&self, tx: Tap, ty: Tap) -> f64 {
        match self.interp {
            InterpKind::Bilinear => self.bilinear(tx, ty),
            InterpKind::Gaussian { radius, .. } => self.gaussian(tx, ty, radius as i64),
        }
    }

    fn bilinear(&self, tx: Tap, ty: Tap) -> f64 {
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - ty.frac), (1, ty.frac)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - tx.frac), (1, tx.frac)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * self.pixel_or_fill(tx.base + dx, ty.base + dy);
            }
        }
        acc
    }

    fn gaussian(&self, tx: Tap, ty: Tap, radius: i64) -> f64 {
        let node = |t: Tap| {
            if t.frac < NODE_EPS {
                Some(t.base)
            } else if t.frac > 1.0 - NODE_EPS {
                Some(t.base + 1)
            } else {
                None
            }
        };
        // interpolating: reproduce the pixel exactly at pixel centres
        if let (Some(x), Some(y)) = (node(tx), node(ty)) {
            return self.pixel_or_fill(x, y);
        }
        let cx = tx.base + i64::from(tx.frac >= 0.5);
        let cy = ty.base + i64::from(ty.frac >= 0.5);
        if !self.image.contains(cx, cy) {
            return self.fill;
        }
        let mut weighted = 0.0;
        let mut total = 0.0;
        for y in (cy - radius)..=(cy + radius) {
            let dy = (y - ty.base) as f64 - ty.frac;
            for x in (cx - radius)..=(cx + radius) {
                if !self.image.contains(x, y) {
                    continue;
                }
                let dx = (x - tx.base) as f64 - tx.frac;
                let w = (-(dx * dx + dy * dy) / self.gauss_denominator).exp();
                weighted += w * f64::from(self.image.at(x as usize, y as usize));
                total += w;
            }
        }
        weighted / total
    }
}

fn quantize(value: f64, max: u16) -> u16 {
    (value + 0.5).floor().clamp(0.0, f64::from(max)) as u16
}

fn render_grid(
    image: &GelImage,
    cols: &[Tap],
    rows: &[Tap],
    interp: InterpKind,
    fill: u16,
) -> Result<GelImage, RegistrationError> {
    interp.validate()?;
    let sampler = Sampler::new(image, interp, fill);
    let mut data = Vec::with_capacity(cols.len() * rows.len());
    for &ty in rows {
        for &tx in cols {
            data.push(quantize(sampler.sample(tx, ty), image.max_density()));
        }
    }
    Ok(GelImage::new(
        cols.len(),
        rows.len(),
        image.max_density(),
        data,
    )?)
}

/// Warps `image` by `map` into an `out_width x out_height` canvas.
///
/// Output pixel `p` takes the source value at `map⁻¹(p)`; source positions
/// outside the image read as `fill`. Values are rounded half up and clamped.
pub fn resample(
    image: &GelImage,
    map: &AffineMap,
    out_width: usize,
    out_height: usize,
    interp: InterpKind,
    fill: u16,
) -> Result<GelImage, RegistrationError> {
    if out_width == 0 || out_height == 0 {
        return Err(RegistrationError::Dimension(format!(
            "output {out_width}x{out_height}"
        )));
    }
    let inv = map.invert();
    let cols: Vec<Tap> = (0..out_width)
        .map(|x| Tap::from_coord(inv.sx * x as f64 + inv.tx))
        .collect();
    let rows: Vec<Tap> = (0..out_height)
        .map(|y| Tap::from_coord(inv.sy * y as f64 + inv.ty))
        .collect();
    render_grid(image, &cols, &rows, interp, fill)
}

/// Top-left corner of the ROI centred (floor rule) on the midpoint of the
/// canonical references. May be negative.
pub fn roi_origin(canonical: &ReferencePair, roi: &RoiSpec) -> (i64, i64) {
    let mx = (canonical.a.x + canonical.b.x) / 2;
    let my = (canonical.a.y + canonical.b.y) / 2;
    (
        mx as i64 - (roi.width / 2) as i64,
        my as i64 - (roi.height / 2) as i64,
    )
}

/// The canonical references expressed in the pixel frame of a normalized ROI.
pub fn refs_in_roi_frame(canonical: &ReferencePair, roi: &RoiSpec) -> Option<ReferencePair> {
    let (ox, oy) = roi_origin(canonical, roi);
    canonical.translated(-ox, -oy)
}

/// Crops the ROI out of an image that is already in the canonical frame.
pub fn extract_roi(image: &GelImage, canonical: &ReferencePair, roi: &RoiSpec) -> GelImage {
    let (ox, oy) = roi_origin(canonical, roi);
    let fill = roi.fill.min(image.max_density());
    let mut data = Vec::with_capacity(roi.width * roi.height);
    for y in 0..roi.height as i64 {
        for x in 0..roi.width as i64 {
            let (sx, sy) = (ox + x, oy + y);
            data.push(if image.contains(sx, sy) {
                image.at(sx as usize, sy as usize)
            } else {
                fill
            });
        }
    }
    GelImage::new(roi.width, roi.height, image.max_density(), data)
        .expect("ROI dimensions validated at construction")
}

fn anchored_taps(count: usize, origin: i64, src: (usize, usize), dst: (usize, usize)) -> Vec<Tap> {
    let ratio = (src.1 as f64 - src.0 as f64) / (dst.1 as f64 - dst.0 as f64);
    (0..count as i64)
        .map(|q| {
            let offset = (q + origin - dst.0 as i64) as f64 * ratio;
            let whole = offset.floor();
            Tap {
                base: src.0 as i64 + whole as i64,
                frac: offset - whole,
            }
        })
        .collect()
}

/// Maps `image` into the canonical frame defined by `canonical` and returns
/// the fixed-size comparison rectangle.
///
/// The ROI window is sampled directly: ROI pixel `q` corresponds to canonical
/// position `q + roi_origin`, which is pulled back through
/// `solve_affine(image_refs, canonical)`. Sampling positions are measured from
/// the integer anchor `image_refs.a`, so co-translating an image and its
/// references by whole pixels leaves the output unchanged bit for bit.
pub fn normalize(
    image: &GelImage,
    image_refs: &ReferencePair,
    canonical: &ReferencePair,
    roi: &RoiSpec,
    interp: InterpKind,
) -> Result<GelImage, RegistrationError> {
    ReferencePair::new(image_refs.a, image_refs.b)?;
    ReferencePair::new(canonical.a, canonical.b)?;
    RoiSpec::new(roi.width, roi.height, roi.fill)?;
    let (ox, oy) = roi_origin(canonical, roi);
    let cols = anchored_taps(
        roi.width,
        ox,
        (image_refs.a.x, image_refs.b.x),
        (canonical.a.x, canonical.b.x),
    );
    let rows = anchored_taps(
        roi.height,
        oy,
        (image_refs.a.y, image_refs.b.y),
        (canonical.a.y, canonical.b.y),
    );
    render_grid(image, &cols, &rows, interp, roi.fill)
}
