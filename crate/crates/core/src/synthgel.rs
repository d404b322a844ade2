//! Synthetic gel cohorts with known ground truth.
//!
//! Each spot contributes a Gaussian quantity profile; the summed quantity field
//! goes through a piecewise-linear stain response that rises up to a
//! saturation threshold and falls beyond it (negative staining), so heavily
//! loaded spots render with a hollow centre. Disease is modelled as a
//! multiplicative shift of a named subset of spot quantities, and every sample
//! is distorted by a random per-axis affine jitter plus sensor noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{GelImage, PixelCoord};
use crate::registration::{AffineMap, ReferencePair, RegistrationError};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("canvas must be at least 1x1 (got {width}x{height})")]
    Dimension { width: usize, height: usize },
    #[error("reference spot {0:?} is not among the base spots")]
    MissingReference(String),
    #[error("disease delta names unknown spot {0:?}")]
    UnknownSpot(String),
    #[error("invalid cohort parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotSpec {
    pub name: String,
    /// Continuous `(x, y)` in canonical pixel coordinates.
    pub center: (f64, f64),
    pub quantity: f64,
    pub sigma: f64,
}

impl SpotSpec {
    pub fn new(name: impl Into<String>, center: (f64, f64), quantity: f64, sigma: f64) -> Self {
        Self {
            name: name.into(),
            center,
            quantity,
            sigma,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(self.quantity >= 0.0 && self.quantity.is_finite()) {
            return Err(SynthError::Invalid(format!(
                "spot {}: quantity {}",
                self.name, self.quantity
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(SynthError::Invalid(format!(
                "spot {}: sigma {}",
                self.name, self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainModel {
    /// Quantity at which stain density saturates and starts to fall.
    pub threshold: f64,
    pub peak_density: f64,
    /// Quantity excess over the threshold that drives density back to zero.
    pub decay_width: f64,
}

impl StainModel {
    fn validate(&self, max_density: u16) -> Result<(), SynthError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.threshold) || !positive(self.peak_density) || !positive(self.decay_width)
        {
            return Err(SynthError::Invalid(format!("stain model {self:?}")));
        }
        if self.peak_density > f64::from(max_density) {
            return Err(SynthError::Invalid(format!(
                "peak density {} above max density {max_density}",
                self.peak_density
            )));
        }
        Ok(())
    }
}

impl Default for StainModel {
    fn default() -> Self {
        Self {
            threshold: 100.0,
            peak_density: 240.0,
            decay_width: 100.0,
        }
    }
}

/// Stain density produced by protein quantity `q`.
pub fn stain_response(q: f64, model: &StainModel) -> f64 {
    let StainModel {
        threshold: t,
        peak_density: d,
        decay_width: w,
    } = *model;
    if q <= t {
        d / t * q
    } else {
        (d - d / w * (q - t)).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub scale_x: [f64; 2],
    pub scale_y: [f64; 2],
    pub translate_x: [f64; 2],
    pub translate_y: [f64; 2],
    /// Standard deviation of additive pixel noise as a fraction of max density.
    pub noise_sigma: f64,
    /// Master seed of a cohort.
    pub seed: u64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            scale_x: [0.9, 1.1],
            scale_y: [0.9, 1.1],
            translate_x: [-10.0, 10.0],
            translate_y: [-10.0, 10.0],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl JitterSpec {
    /// No distortion and no noise.
    pub fn none(seed: u64) -> Self {
        Self {
            scale_x: [1.0, 1.0],
            scale_y: [1.0, 1.0],
            translate_x: [0.0, 0.0],
            translate_y: [0.0, 0.0],
            noise_sigma: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        for (name, [lo, hi]) in [("scale_x", self.scale_x), ("scale_y", self.scale_y)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(SynthError::Invalid(format!("{name} range [{lo}, {hi}]")));
            }
        }
        for (name, [lo, hi]) in [
            ("translate_x", self.translate_x),
            ("translate_y", self.translate_y),
        ] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(SynthError::Invalid(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::Invalid(format!(
                "noise_sigma {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(master: u64, index: u64) -> u64 {
    splitmix64(master.wrapping_add(splitmix64(index)))
}

/// Renders spots onto a `width x height` canvas.
///
/// `noise_sigma` is relative to `max_density`. The output is a pure function
/// of the arguments.
pub fn render_gel(
    spots: &[SpotSpec],
    stain: &StainModel,
    width: usize,
    height: usize,
    max_density: u16,
    noise_sigma: f64,
    seed: u64,
) -> Result<GelImage, SynthError> {
    if width == 0 || height == 0 {
        return Err(SynthError::Dimension { width, height });
    }
    let mut quantity = vec![0.0f64; width * height];
    for spot in spots {
        spot.validate()?;
        if spot.quantity == 0.0 {
            continue;
        }
        // beyond 10 sigma the profile is below 1e-21 of the spot quantity
        let reach = 10.0 * spot.sigma;
        let (cx, cy) = spot.center;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().max(-1.0) + 1.0).min(width as f64) as usize;
        let y1 = ((cy + reach).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
        let denom = 2.0 * spot.sigma * spot.sigma;
        for y in y0..y1 {
            let dy = y as f64 - cy;
            let row = &mut quantity[y * width..(y + 1) * width];
            for (x, q) in row.iter_mut().enumerate().take(x1).skip(x0) {
                let dx = x as f64 - cx;
                *q += spot.quantity * (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }

    let max = f64::from(max_density);
    let noise = (noise_sigma > 0.0).then(|| {
        Normal::new(0.0, noise_sigma * max).expect("noise sigma validated finite and positive")
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = quantity
        .into_iter()
        .map(|q| {
            let mut v = stain_response(q, stain);
            if let Some(noise) = &noise {
                v += noise.sample(&mut rng);
            }
            (v + 0.5).floor().clamp(0.0, max) as u16
        })
        .collect();
    Ok(GelImage::new(width, height, max_density, data).expect("dimensions checked"))
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Applies a random per-axis affine distortion to every spot centre.
///
/// Returns the moved spots and the exact map that moved them.
pub fn jitter_spots(
    spots: &[SpotSpec],
    jitter: &JitterSpec,
    seed: u64,
) -> Result<(Vec<SpotSpec>, AffineMap), SynthError> {
    jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sx = draw(&mut rng, jitter.scale_x);
    let sy = draw(&mut rng, jitter.scale_y);
    let tx = draw(&mut rng, jitter.translate_x);
    let ty = draw(&mut rng, jitter.translate_y);
    let map = AffineMap::new(sx, sy, tx, ty)?;
    Ok((move_spots(spots, &map), map))
}

pub fn move_spots(spots: &[SpotSpec], map: &AffineMap) -> Vec<SpotSpec> {
    spots
        .iter()
        .map(|s| SpotSpec {
            center: map.apply(s.center),
            ..s.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_normal: usize,
    pub n_disease: usize,
    pub spots: Vec<SpotSpec>,
    /// Spot name to quantity multiplier applied to disease samples.
    #[serde(default)]
    pub disease_deltas: BTreeMap<String, f64>,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_max_density")]
    pub max_density: u16,
    #[serde(default)]
    pub stain: StainModel,
    #[serde(default)]
    pub jitter: JitterSpec,
    /// Names of the spots whose centres become the A and B landmarks.
    pub reference_spots: [String; 2],
}

fn default_max_density() -> u16 {
    255
}

impl CohortSpec {
    /// A 20 + 20 cohort on a 256x256 canvas with 12 spots. Reference spots
    /// are "BD-1" and "CA-3"; disease raises "CA-1", "CA-2" and "CA-4";
    /// "BD-2" is a stable spot of mid intensity. Every quantity stays below
    /// the stain threshold, so the references are the two darkest spots.
    pub fn default_study(seed: u64) -> Self {
        let spot =
            |name: &str, x: f64, y: f64, q: f64, sigma: f64| SpotSpec::new(name, (x, y), q, sigma);
        Self {
            n_normal: 20,
            n_disease: 20,
            spots: vec![
                spot("BD-1", 72.0, 80.0, 95.0, 4.0),
                spot("CA-3", 182.0, 170.0, 95.0, 4.0),
                spot("CA-1", 100.0, 100.0, 35.0, 3.5),
                spot("CA-2", 150.0, 95.0, 30.0, 3.5),
                spot("CA-4", 120.0, 150.0, 40.0, 4.0),
                spot("BD-2", 160.0, 135.0, 50.0, 3.5),
                spot("AP-1", 95.0, 135.0, 45.0, 3.5),
                spot("AP-2", 130.0, 122.0, 25.0, 3.0),
                spot("HP-1", 175.0, 110.0, 55.0, 4.0),
                spot("HP-2", 85.0, 170.0, 40.0, 3.5),
                spot("TF-1", 145.0, 175.0, 35.0, 3.5),
                spot("TF-2", 125.0, 75.0, 60.0, 4.0),
            ],
            disease_deltas: [("CA-1", 2.0), ("CA-2", 2.5), ("CA-4", 1.8)]
                .into_iter()
                .map(|(n, m)| (n.to_string(), m))
                .collect(),
            width: 256,
            height: 256,
            max_density: 255,
            stain: StainModel::default(),
            jitter: JitterSpec {
                seed,
                ..JitterSpec::default()
            },
            reference_spots: ["BD-1".into(), "CA-3".into()],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Dimension {
                width: self.width,
                height: self.height,
            });
        }
        self.stain.validate(self.max_density)?;
        self.jitter.validate()?;
        for s in &self.spots {
            s.validate()?;
        }
        for name in &self.reference_spots {
            if self.spot(name).is_none() {
                return Err(SynthError::MissingReference(name.clone()));
            }
        }
        if self.reference_spots[0] == self.reference_spots[1] {
            return Err(SynthError::Invalid(
                "reference spots must be two different spots".into(),
            ));
        }
        for (name, &m) in &self.disease_deltas {
            if self.spot(name).is_none() {
                return Err(SynthError::UnknownSpot(name.clone()));
            }
            if !(m >= 0.0 && m.is_finite()) {
                return Err(SynthError::Invalid(format!("multiplier {m} for {name}")));
            }
        }
        if self.n_normal + self.n_disease == 0 {
            return Err(SynthError::Invalid("empty cohort".into()));
        }
        Ok(())
    }

    pub fn spot(&self, name: &str) -> Option<&SpotSpec> {
        self.spots.iter().find(|s| s.name == name)
    }

    /// Landmark pixels of the undistorted template.
    pub fn template_refs(&self) -> Result<ReferencePair, SynthError> {
        self.refs_for(&self.spots)
    }

    fn refs_for(&self, spots: &[SpotSpec]) -> Result<ReferencePair, SynthError> {
        let center = |name: &String| {
            spots
                .iter()
                .find(|s| &s.name == name)
                .map(|s| PixelCoord::round_from(s.center.0, s.center.1))
                .ok_or_else(|| SynthError::MissingReference(name.clone()))
        };
        Ok(ReferencePair::new(
            center(&self.reference_spots[0])?,
            center(&self.reference_spots[1])?,
        )?)
    }

    fn diseased_spots(&self) -> Vec<SpotSpec> {
        self.spots
            .iter()
            .map(|s| SpotSpec {
                quantity: s.quantity * self.disease_deltas.get(&s.name).copied().unwrap_or(1.0),
                ..s.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSample {
    pub id: String,
    pub image: GelImage,
    /// `+1` disease, `-1` normal.
    pub label: i8,
    /// Jittered reference-spot centres, rounded to the nearest pixel.
    pub refs: ReferencePair,
    /// Map from template coordinates to this sample's coordinates.
    pub truth: AffineMap,
}

/// Renders a full cohort: disease samples first (ids `d000`, ...), then
/// normal samples (`n000`, ...).
pub fn make_cohort(spec: &CohortSpec) -> Result<Vec<CohortSample>, SynthError> {
    spec.validate()?;
    let diseased = spec.diseased_spots();
    let plan = (0..spec.n_disease)
        .map(|i| (format!("d{i:03}"), 1i8, &diseased))
        .chain((0..spec.n_normal).map(|i| (format!("n{i:03}"), -1i8, &spec.spots)));
    plan.enumerate()
        .map(|(index, (id, label, spots))| {
            let seed = sample_seed(spec.jitter.seed, index as u64);
            let (moved, truth) = jitter_spots(spots, &spec.jitter, seed)?;
            let image = render_gel(
                &moved,
                &spec.stain,
                spec.width,
                spec.height,
                spec.max_density,
                spec.jitter.noise_sigma,
                splitmix64(seed),
            )?;
            Ok(CohortSample {
                id,
                image,
                label,
                refs: spec.refs_for(&moved)?,
                truth,
            })
        })
        .collect()
}
