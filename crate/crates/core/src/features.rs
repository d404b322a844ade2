//! Spot segmentation and the two vector representations of a normalized ROI:
//! every pixel in row-major order, or the summed densities of K chosen spots.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{GelImage, ImageError, PixelCoord};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("no spot at {0}: seed density is zero")]
    SpotNotFound(PixelCoord),
    #[error("chosen-spot representation needs at least one seed")]
    EmptySpotList,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("segmentation fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("no vectors to scale")]
    Empty,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// A segmented spot: the 4-connected set of pixels around `peak` whose
/// density is at least a fraction of the peak density.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotRegion {
    pub seed: PixelCoord,
    pub peak: PixelCoord,
    pub peak_density: u16,
    /// Row-major sorted.
    pub pixels: Vec<PixelCoord>,
    /// Density-weighted centre of mass.
    pub centroid: (f64, f64),
}

impl SpotRegion {
    /// Centroid rounded to the nearest pixel.
    pub fn center_pixel(&self) -> PixelCoord {
        PixelCoord::round_from(self.centroid.0, self.centroid.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// All ROI pixels.
    Whole,
    /// Densities of chosen spots.
    Spots,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Whole => "whole",
            Self::Spots => "spots",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub mode: Representation,
    pub source_id: String,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn neighbors8(image: &GelImage, p: PixelCoord) -> impl Iterator<Item = PixelCoord> + '_ {
    NEIGHBORS_8.iter().filter_map(move |&(dx, dy)| {
        let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
        image
            .contains(x, y)
            .then(|| PixelCoord::new(x as usize, y as usize))
    })
}

fn check_fraction(fraction: f64) -> Result<(), FeatureError> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(FeatureError::InvalidFraction(fraction))
    }
}

/// Walks uphill from `seed` to a local peak, then flood fills (4-connected)
/// every pixel with density `>= fraction * peak`.
pub fn segment_spot(
    image: &GelImage,
    seed: PixelCoord,
    fraction: f64,
) -> Result<SpotRegion, FeatureError> {
    check_fraction(fraction)?;
    if image.density_at(seed)? == 0 {
        return Err(FeatureError::SpotNotFound(seed));
    }

    let mut peak = seed;
    loop {
        // neighbours come in row-major order, so `>` keeps the lowest index on ties
        let mut best = peak;
        for n in neighbors8(image, peak) {
            if image.at(n.x, n.y) > image.at(best.x, best.y) {
                best = n;
            }
        }
        if best == peak {
            break;
        }
        peak = best;
    }

    let peak_density = image.at(peak.x, peak.y);
    let cutoff = fraction * f64::from(peak_density);
    let (w, h) = (image.width(), image.height());
    let mut visited = vec![false; w * h];
    let mut queue = VecDeque::from([peak]);
    visited[peak.y * w + peak.x] = true;
    let mut pixels = Vec::new();
    while let Some(p) = queue.pop_front() {
        pixels.push(p);
        let (x, y) = (p.x as i64, p.y as i64);
        for (nx, ny) in [(x, y - 1), (x - 1, y), (x + 1, y), (x, y + 1)] {
            if !image.contains(nx, ny) {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if !visited[ny * w + nx] && f64::from(image.at(nx, ny)) >= cutoff {
                visited[ny * w + nx] = true;
                queue.push_back(PixelCoord::new(nx, ny));
            }
        }
    }
    pixels.sort_unstable_by_key(|p| (p.y, p.x));

    let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
    for p in &pixels {
        let v = f64::from(image.at(p.x, p.y));
        mx += v * p.x as f64;
        my += v * p.y as f64;
        mass += v;
    }
    Ok(SpotRegion {
        seed,
        peak,
        peak_density,
        pixels,
        centroid: (mx / mass, my / mass),
    })
}

/// The reference pixel of the spot containing `seed`.
pub fn spot_center(
    image: &GelImage,
    seed: PixelCoord,
    fraction: f64,
) -> Result<PixelCoord, FeatureError> {
    Ok(segment_spot(image, seed, fraction)?.center_pixel())
}

/// Sum of the densities over the region.
pub fn spot_density(image: &GelImage, region: &SpotRegion) -> Result<f64, FeatureError> {
    let mut total: u64 = 0;
    for &p in &region.pixels {
        total += u64::from(image.density_at(p)?);
    }
    Ok(total as f64)
}

/// Finds local maxima of at least `min_peak`, suppresses weaker peaks within
/// `min_distance` pixels of a stronger one and segments each survivor at half
/// maximum. Strongest spots come first.
pub fn detect_spots(image: &GelImage, min_peak: u16, min_distance: f64) -> Vec<SpotRegion> {
    let min_peak = min_peak.max(1);
    let w = image.width();
    let mut candidates = Vec::new();
    for (index, &v) in image.data().iter().enumerate() {
        if v < min_peak {
            continue;
        }
        let p = PixelCoord::new(index % w, index / w);
        let is_max = neighbors8(image, p).all(|n| {
            let nv = image.at(n.x, n.y);
            v > nv || (v == nv && index < n.y * w + n.x)
        });
        if is_max {
            candidates.push((v, index, p));
        }
    }
    candidates.sort_by_key(|&(v, index, _)| (std::cmp::Reverse(v), index));

    let limit = min_distance * min_distance;
    let mut kept: Vec<PixelCoord> = Vec::new();
    for &(_, _, p) in &candidates {
        let clear = kept.iter().all(|k| {
            let dx = k.x as f64 - p.x as f64;
            let dy = k.y as f64 - p.y as f64;
            dx * dx + dy * dy > limit
        });
        if clear {
            kept.push(p);
        }
    }
    kept.into_iter()
        .map(|p| segment_spot(image, p, 0.5).expect("peak density is at least 1"))
        .collect()
}

/// Every pixel of the ROI in row-major order.
pub fn vectorize_whole(roi: &GelImage, source_id: impl Into<String>) -> FeatureVector {
    FeatureVector {
        values: roi.data().iter().map(|&v| f64::from(v)).collect(),
        mode: Representation::Whole,
        source_id: source_id.into(),
    }
}

/// Summed density of the spot under each seed, in seed order. A seed on
/// unstained background fails the whole sample.
pub fn vectorize_spots(
    roi: &GelImage,
    seeds: &[PixelCoord],
    fraction: f64,
    source_id: impl Into<String>,
) -> Result<FeatureVector, FeatureError> {
    if seeds.is_empty() {
        return Err(FeatureError::EmptySpotList);
    }
    let values = seeds
        .iter()
        .map(|&seed| spot_density(roi, &segment_spot(roi, seed, fraction)?))
        .collect::<Result<_, _>>()?;
    Ok(FeatureVector {
        values,
        mode: Representation::Spots,
        source_id: source_id.into(),
    })
}

/// Per-component min-max scaling fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Self, FeatureError> {
        let first = vectors.first().ok_or(FeatureError::Empty)?.as_ref();
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for v in vectors {
            let v = v.as_ref();
            if v.len() != min.len() {
                return Err(FeatureError::DimensionMismatch {
                    expected: min.len(),
                    found: v.len(),
                });
            }
            for ((lo, hi), &x) in min.iter_mut().zip(max.iter_mut()).zip(v) {
                *lo = lo.min(x);
                *hi = hi.max(x);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Constant training components map to 0.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if x.len() != self.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect())
    }
}

/// Fits a [`Scaler`] on `vectors` and returns the scaled set with it.
pub fn scale_features<V: AsRef<[f64]>>(
    vectors: &[V],
) -> Result<(Vec<Vec<f64>>, Scaler), FeatureError> {
    let scaler = Scaler::fit(vectors)?;
    let scaled = vectors
        .iter()
        .map(|v| scaler.transform(v.as_ref()))
        .collect::<Result<_, _>>()?;
    Ok((scaled, scaler))
}
