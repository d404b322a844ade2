//! Manifest-driven study pipeline.
//!
//! A study runs in stages, each reading the previous stage's files from the
//! output directory so that any stage can be rerun or inspected on its own:
//!
//! | stage       | reads                          | writes                               |
//! |-------------|--------------------------------|--------------------------------------|
//! | `synth`     | manifest `synth` block         | `images/*.pgm`, `labels.tsv`, `truth.json` |
//! | `refs`      | images, optional annotations   | `refs.json`                          |
//! | `normalize` | images, `refs.json`            | `normalized/*.pgm`                   |
//! | `featurize` | `normalized/*.pgm`, labels     | `features-<mode>.json`               |
//! | `train`     | features                       | `model-<mode>.svm`                   |
//! | `predict`   | features, model                | `predictions-<mode>.tsv`             |
//! | `eval`      | features                       | `report.json`, `report.txt`          |
//!
//! Normalized images are written with density polarity (bright = stain).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    detect_spots, vectorize_spots, vectorize_whole, FeatureError, FeatureVector, Representation,
};
use crate::imagecore::{load_pgm, save_pgm, GelImage, ImageError, PgmFormat, PixelCoord};
use crate::registration::{
    normalize, roi_origin, AffineMap, InterpKind, ReferencePair, RegistrationError, RoiSpec,
};
use crate::svm::{
    cross_validate, parse_model, serialize_model, train_smo, Dataset, EvalReport, Kernel, SvmError,
    SvmParams,
};
use crate::synthgel::{make_cohort, CohortSpec, SynthError};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("manifest key `{key}`: {msg}")]
    Schema { key: String, msg: String },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<StudyError>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Svm(#[from] SvmError),
}

impl StudyError {
    fn schema(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Schema {
            key: key.into(),
            msg: msg.into(),
        }
    }

    fn file(path: &Path, source: std::io::Error) -> Self {
        Self::File {
            path: path.to_path_buf(),
            source,
        }
    }

    fn in_sample(id: &str) -> impl FnOnce(StudyError) -> StudyError + '_ {
        move |e| Self::Sample {
            id: id.to_string(),
            source: Box::new(e),
        }
    }

    /// 1 for invalid input (manifest, annotations, labels), 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema { .. } | Self::Parse { .. } | Self::Invalid(_) => 1,
            Self::Sample { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

type Result<T, E = StudyError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeChoice {
    #[default]
    Whole,
    Spots,
    /// Both representations side by side.
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentationConfig {
    #[serde(default)]
    pub mode: ModeChoice,
    /// Spot seeds in canonical-frame coordinates.
    #[serde(default)]
    pub seeds: Vec<PixelCoord>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

fn default_fraction() -> f64 {
    0.5
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            mode: ModeChoice::Whole,
            seeds: Vec::new(),
            fraction: default_fraction(),
        }
    }
}

impl RepresentationConfig {
    pub fn modes(&self) -> Vec<Representation> {
        match self.mode {
            ModeChoice::Whole => vec![Representation::Whole],
            ModeChoice::Spots => vec![Representation::Spots],
            ModeChoice::Compare => vec![Representation::Whole, Representation::Spots],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    #[default]
    Linear,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub c: f64,
    pub tol: f64,
    pub max_passes: usize,
    pub kernel: KernelChoice,
    /// RBF width; `1 / dim` when absent.
    pub gamma: Option<f64>,
    pub scale: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        let p = SvmParams::default();
        Self {
            c: p.c,
            tol: p.tol,
            max_passes: p.max_passes,
            kernel: KernelChoice::Linear,
            gamma: None,
            scale: true,
        }
    }
}

impl SvmConfig {
    pub fn params_for(&self, dim: usize) -> SvmParams {
        SvmParams {
            c: self.c,
            tol: self.tol,
            max_passes: self.max_passes,
            kernel: match (self.kernel, self.gamma) {
                (KernelChoice::Linear, _) => Kernel::Linear,
                (KernelChoice::Rbf, Some(gamma)) => Kernel::Rbf { gamma },
                (KernelChoice::Rbf, None) => Kernel::rbf_for_dim(dim),
            },
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// Peak finding used when an image has no annotated references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub min_peak: u16,
    pub min_distance: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            min_peak: 25,
            min_distance: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CanonicalSource {
    Refs(ReferencePair),
    /// References of the named image. When `None`: the synthetic template's
    /// references, or else the first image (by id).
    Template(Option<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyManifest {
    /// Free-text label of the condition under study.
    pub study: String,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
    pub image_dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub synth: Option<CohortSpec>,
    pub canonical: CanonicalSource,
    pub roi: RoiSpec,
    pub interp: InterpKind,
    pub representation: RepresentationConfig,
    pub svm: SvmConfig,
    pub cv: CvConfig,
    pub seed: u64,
    pub dark_is_stain: bool,
    pub detection: DetectionConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    study: Option<String>,
    image_dir: Option<PathBuf>,
    labels: Option<PathBuf>,
    annotations: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    synth: Option<serde_json::Value>,
    canonical_refs: Option<serde_json::Value>,
    template: Option<String>,
    roi: RoiSpec,
    #[serde(default)]
    interp: InterpKind,
    #[serde(default)]
    representation: RepresentationConfig,
    #[serde(default)]
    svm: SvmConfig,
    #[serde(default)]
    cv: CvConfig,
    #[serde(default)]
    seed: u64,
    #[serde(default = "yes")]
    dark_is_stain: bool,
    #[serde(default)]
    detection: DetectionConfig,
}

fn yes() -> bool {
    true
}

/// Deserializes `value`, naming the offending key (dotted path under
/// `prefix`) on failure.
fn typed<T: serde::de::DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner().to_string();
        let mut key: Vec<String> = Vec::new();
        if !prefix.is_empty() {
            key.push(prefix.to_string());
        }
        if path != "." {
            key.push(path);
        }
        // The path stops at the parent object when a field is absent.
        if let Some(field) = inner
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            key.push(field.to_string());
        }
        let key = if key.is_empty() {
            "(root)".to_string()
        } else {
            key.join(".")
        };
        StudyError::schema(key, inner)
    })
}

/// Parses and validates a manifest, filling defaults. Relative paths stay
/// relative to `base_dir` (the current directory here; see [`load_manifest`]).
pub fn parse_manifest(bytes: &[u8]) -> Result<StudyManifest> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| StudyError::schema("(root)", format!("not valid JSON: {e}")))?;
    if !value.is_object() {
        return Err(StudyError::schema(
            "(root)",
            "manifest must be a JSON object",
        ));
    }
    let raw: RawManifest = typed(value, "")?;

    let synth = match raw.synth {
        None => None,
        Some(serde_json::Value::String(preset)) if preset == "default" => {
            Some(CohortSpec::default_study(raw.seed))
        }
        Some(serde_json::Value::String(other)) => {
            return Err(StudyError::schema(
                "synth",
                format!("unknown preset {other:?} (only \"default\")"),
            ))
        }
        Some(v) => {
            let mut spec: CohortSpec = typed(v, "synth")?;
            spec.jitter.seed = raw.seed;
            spec.validate()
                .map_err(|e| StudyError::schema("synth", e.to_string()))?;
            Some(spec)
        }
    };
    if synth.is_none() && raw.image_dir.is_none() {
        return Err(StudyError::schema(
            "image_dir",
            "required unless a synth block is given",
        ));
    }

    let canonical = match (raw.canonical_refs, raw.template) {
        (Some(_), Some(_)) => {
            return Err(StudyError::schema(
                "template",
                "give either canonical_refs or template, not both",
            ))
        }
        (Some(v), None) => CanonicalSource::Refs(typed(v, "canonical_refs")?),
        (None, template) => CanonicalSource::Template(template),
    };

    if raw.roi.width == 0 {
        return Err(StudyError::schema("roi.width", "must be at least 1"));
    }
    if raw.roi.height == 0 {
        return Err(StudyError::schema("roi.height", "must be at least 1"));
    }
    raw.interp
        .validate()
        .map_err(|e| StudyError::schema("interp", e.to_string()))?;

    let rep = &raw.representation;
    if rep.mode != ModeChoice::Whole && rep.seeds.is_empty() {
        return Err(StudyError::schema(
            "representation.seeds",
            "chosen-spot representation needs at least one seed",
        ));
    }
    if !(rep.fraction > 0.0 && rep.fraction <= 1.0) {
        return Err(StudyError::schema(
            "representation.fraction",
            "must lie in (0, 1]",
        ));
    }
    let svm = &raw.svm;
    if !(svm.c > 0.0 && svm.c.is_finite()) {
        return Err(StudyError::schema("svm.c", "must be positive"));
    }
    if !(svm.tol > 0.0 && svm.tol.is_finite()) {
        return Err(StudyError::schema("svm.tol", "must be positive"));
    }
    if svm.max_passes == 0 {
        return Err(StudyError::schema("svm.max_passes", "must be at least 1"));
    }
    if svm.gamma.is_some_and(|g| !(g > 0.0 && g.is_finite())) {
        return Err(StudyError::schema("svm.gamma", "must be positive"));
    }
    if raw.cv.k < 2 {
        return Err(StudyError::schema("cv.k", "must be at least 2"));
    }
    if raw.detection.min_peak == 0 {
        return Err(StudyError::schema("detection.min_peak", "must be positive"));
    }

    Ok(StudyManifest {
        study: raw.study.unwrap_or_else(|| "unnamed study".into()),
        base_dir: PathBuf::new(),
        image_dir: raw.image_dir,
        labels: raw.labels,
        annotations: raw.annotations,
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        synth,
        canonical,
        roi: raw.roi,
        interp: raw.interp,
        representation: raw.representation,
        svm: raw.svm,
        cv: raw.cv,
        seed: raw.seed,
        dark_is_stain: raw.dark_is_stain,
        detection: raw.detection,
    })
}

/// Reads a manifest file; relative paths inside resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<StudyManifest> {
    let bytes = fs::read(path).map_err(|e| StudyError::file(path, e))?;
    let mut manifest = parse_manifest(&bytes)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

impl StudyManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    /// Overrides the master seed (also the synthetic cohort seed).
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(spec) = &mut self.synth {
            spec.jitter.seed = seed;
        }
    }

    fn source_image_dir(&self) -> Result<PathBuf> {
        if self.synth.is_some() {
            return Ok(self.out("images"));
        }
        self.image_dir
            .as_ref()
            .map(|d| self.resolve(d))
            .ok_or_else(|| StudyError::schema("image_dir", "missing"))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| StudyError::file(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StudyError::file(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| StudyError::file(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| StudyError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Pretty JSON with sorted object keys.
fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("plain data serializes");
    let mut out = serde_json::to_vec_pretty(&value).expect("plain data serializes");
    out.push(b'\n');
    out
}

pub fn read_pgm_file(path: &Path, dark_is_stain: bool) -> Result<GelImage> {
    load_pgm(&read(path)?, dark_is_stain).map_err(|e| StudyError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// `(id, path)` of every `.pgm` file in `dir`, sorted by id.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| StudyError::file(dir, e))?;
    let mut images = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| StudyError::file(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("pgm"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                images.push((stem.to_string(), path.clone()));
            }
        }
    }
    images.sort();
    if images.is_empty() {
        return Err(StudyError::Invalid(format!(
            "no .pgm images in {}",
            dir.display()
        )));
    }
    Ok(images)
}

/// Parses a labels file: one `id<TAB>±1` per line; blank lines and lines
/// starting with `#` are skipped.
pub fn parse_labels(text: &str) -> Result<BTreeMap<String, i8>, String> {
    let mut labels = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected id<TAB>label", n + 1))?;
        let label = match label.trim() {
            "+1" | "1" => 1,
            "-1" => -1,
            other => return Err(format!("line {}: label {other:?} is not +1 or -1", n + 1)),
        };
        if labels.insert(id.to_string(), label).is_some() {
            return Err(format!("line {}: duplicate id {id:?}", n + 1));
        }
    }
    Ok(labels)
}

pub fn format_labels<'a>(labels: impl IntoIterator<Item = (&'a str, i8)>) -> String {
    labels
        .into_iter()
        .map(|(id, l)| format!("{id}\t{l:+}\n"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    #[serde(flatten)]
    pub refs: ReferencePair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i8>,
}

/// Reference points per image id, plus optionally the canonical references.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<ReferencePair>,
    #[serde(default)]
    pub images: BTreeMap<String, ImageAnnotation>,
}

impl AnnotationFile {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| StudyError::Parse {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
        let file: Self = typed(value, "annotations").map_err(|e| StudyError::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        for (id, a) in &file.images {
            if let Some(l) = a.label {
                if l != 1 && l != -1 {
                    return Err(StudyError::Parse {
                        path: path.to_path_buf(),
                        msg: format!("image {id}: label {l} is not +1 or -1"),
                    });
                }
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub label: i8,
    pub refs: ReferencePair,
    pub map: AffineMap,
}

/// Writes a synthetic cohort: images (in the manifest's file polarity),
/// labels and the ground-truth maps.
pub fn run_synth(m: &StudyManifest) -> Result<usize> {
    let spec = m
        .synth
        .as_ref()
        .ok_or_else(|| StudyError::schema("synth", "no synth block in manifest"))?;
    let cohort = make_cohort(spec)?;
    let dir = m.out("images");
    fs::create_dir_all(&dir).map_err(|e| StudyError::file(&dir, e))?;
    let mut truth = BTreeMap::new();
    for s in &cohort {
        let image = if m.dark_is_stain {
            s.image.inverted()
        } else {
            s.image.clone()
        };
        write(
            &dir.join(format!("{}.pgm", s.id)),
            &save_pgm(&image, PgmFormat::Raw),
        )?;
        truth.insert(
            s.id.clone(),
            TruthRecord {
                label: s.label,
                refs: s.refs,
                map: s.truth,
            },
        );
    }
    let labels = format_labels(cohort.iter().map(|s| (s.id.as_str(), s.label)));
    write(&m.out("labels.tsv"), labels.as_bytes())?;
    write(&m.out("truth.json"), &json_bytes(&truth))?;
    info!("synthesized {} images into {}", cohort.len(), dir.display());
    Ok(cohort.len())
}

/// The two strongest detected spots, ordered by column, each reduced to its
/// centre pixel.
pub fn detect_references(image: &GelImage, detection: &DetectionConfig) -> Result<ReferencePair> {
    let spots = detect_spots(image, detection.min_peak, detection.min_distance);
    if spots.len() < 2 {
        return Err(StudyError::Invalid(format!(
            "found {} spot(s) above {}; need two reference spots",
            spots.len(),
            detection.min_peak
        )));
    }
    let mut pair = [spots[0].center_pixel(), spots[1].center_pixel()];
    pair.sort_by_key(|p| (p.x, p.y));
    Ok(ReferencePair::new(pair[0], pair[1])?)
}

fn all_labels(
    m: &StudyManifest,
    annotations: Option<&AnnotationFile>,
) -> Result<BTreeMap<String, i8>> {
    let path = match (&m.labels, m.synth.is_some()) {
        (Some(p), _) => Some(m.resolve(p)),
        (None, true) => Some(m.out("labels.tsv")),
        (None, false) => None,
    };
    let mut labels = match path {
        Some(path) => {
            let text = String::from_utf8(read(&path)?).map_err(|e| StudyError::Parse {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            parse_labels(&text).map_err(|msg| StudyError::Parse { path, msg })?
        }
        None => BTreeMap::new(),
    };
    if let Some(a) = annotations {
        for (id, ann) in &a.images {
            if let Some(l) = ann.label {
                labels.insert(id.clone(), l);
            }
        }
    }
    Ok(labels)
}

/// Resolves reference points for every image (annotations first, detection
/// otherwise) and the canonical references; writes `refs.json`.
pub fn run_refs(m: &StudyManifest) -> Result<AnnotationFile> {
    let images = list_images(&m.source_image_dir()?)?;
    let given = match &m.annotations {
        Some(p) => Some(AnnotationFile::load(&m.resolve(p))?),
        None => None,
    };
    let labels = all_labels(m, given.as_ref())?;

    let mut resolved = AnnotationFile::default();
    for (id, path) in &images {
        let refs = match given.as_ref().and_then(|a| a.images.get(id)) {
            Some(ann) => ann.refs,
            None => {
                let image = read_pgm_file(path, m.dark_is_stain)?;
                let refs =
                    detect_references(&image, &m.detection).map_err(StudyError::in_sample(id))?;
                if given.is_some() {
                    warn!(
                        "{id}: no annotation, using detected references {} {}",
                        refs.a(),
                        refs.b()
                    );
                }
                refs
            }
        };
        resolved.images.insert(
            id.clone(),
            ImageAnnotation {
                refs,
                label: labels.get(id).copied(),
            },
        );
    }
    if given.is_none() {
        warn!("no annotation file: references auto-detected as the two strongest spots");
    }

    resolved.canonical = Some(match &m.canonical {
        CanonicalSource::Refs(r) => *r,
        CanonicalSource::Template(name) => {
            if let Some(c) = given.as_ref().and_then(|a| a.canonical) {
                c
            } else if let (None, Some(spec)) = (name, &m.synth) {
                spec.template_refs()?
            } else {
                let id = name.clone().unwrap_or_else(|| images[0].0.clone());
                resolved
                    .images
                    .get(&id)
                    .map(|a| a.refs)
                    .ok_or_else(|| StudyError::schema("template", format!("no image {id:?}")))?
            }
        }
    });
    write(&m.out("refs.json"), &json_bytes(&resolved))?;
    Ok(resolved)
}

fn load_refs(m: &StudyManifest) -> Result<(AnnotationFile, ReferencePair)> {
    let refs = AnnotationFile::load(&m.out("refs.json"))?;
    let canonical = refs.canonical.ok_or_else(|| StudyError::Parse {
        path: m.out("refs.json"),
        msg: "no canonical references".into(),
    })?;
    Ok((refs, canonical))
}

/// Maps every image into the canonical frame and writes the ROIs.
pub fn run_normalize(m: &StudyManifest) -> Result<usize> {
    let images = list_images(&m.source_image_dir()?)?;
    let (refs, canonical) = load_refs(m)?;
    let dir = m.out("normalized");
    for (id, path) in &images {
        let ann = refs.images.get(id).ok_or_else(|| {
            StudyError::in_sample(id)(StudyError::Invalid(
                "no reference points in refs.json".into(),
            ))
        })?;
        let image = read_pgm_file(path, m.dark_is_stain)?;
        let roi = normalize(&image, &ann.refs, &canonical, &m.roi, m.interp)
            .map_err(|e| StudyError::in_sample(id)(e.into()))?;
        write(
            &dir.join(format!("{id}.pgm")),
            &save_pgm(&roi, PgmFormat::Raw),
        )?;
    }
    Ok(images.len())
}

/// Spot seeds moved from canonical coordinates into the ROI frame.
pub fn seeds_in_roi(
    seeds: &[PixelCoord],
    canonical: &ReferencePair,
    roi: &RoiSpec,
) -> Result<Vec<PixelCoord>> {
    let (ox, oy) = roi_origin(canonical, roi);
    seeds
        .iter()
        .map(|s| {
            let (x, y) = (s.x as i64 - ox, s.y as i64 - oy);
            if x < 0 || y < 0 || x >= roi.width as i64 || y >= roi.height as i64 {
                Err(StudyError::schema(
                    "representation.seeds",
                    format!("seed {s} lies outside the ROI"),
                ))
            } else {
                Ok(PixelCoord::new(x as usize, y as usize))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i8>,
    pub values: Vec<f64>,
}

/// Contents of `features-<mode>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMatrix {
    pub mode: Representation,
    pub dim: usize,
    pub samples: Vec<FeatureRow>,
}

impl FeatureMatrix {
    pub fn from_vectors(
        vectors: Vec<FeatureVector>,
        labels: &BTreeMap<String, i8>,
    ) -> Result<Self> {
        let mode = vectors
            .first()
            .map(|v| v.mode)
            .ok_or_else(|| StudyError::Invalid("no feature vectors".into()))?;
        let dim = vectors[0].dim();
        let samples = vectors
            .into_iter()
            .map(|v| {
                if v.dim() != dim {
                    return Err(StudyError::in_sample(&v.source_id)(
                        FeatureError::DimensionMismatch {
                            expected: dim,
                            found: v.dim(),
                        }
                        .into(),
                    ));
                }
                Ok(FeatureRow {
                    label: labels.get(&v.source_id).copied(),
                    id: v.source_id,
                    values: v.values,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { mode, dim, samples })
    }

    /// Every sample must carry a label.
    pub fn dataset(&self) -> Result<Dataset> {
        let labels = self
            .samples
            .iter()
            .map(|s| {
                s.label.ok_or_else(|| {
                    StudyError::in_sample(&s.id)(StudyError::Invalid("no label".into()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(
            self.samples.iter().map(|s| s.values.clone()).collect(),
            labels,
        )?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let matrix: Self = read_json(path)?;
        if let Some(s) = matrix.samples.iter().find(|s| s.values.len() != matrix.dim) {
            return Err(StudyError::Parse {
                path: path.to_path_buf(),
                msg: format!(
                    "sample {}: {} values, dim {}",
                    s.id,
                    s.values.len(),
                    matrix.dim
                ),
            });
        }
        Ok(matrix)
    }
}

fn features_path(m: &StudyManifest, mode: Representation) -> PathBuf {
    m.out(&format!("features-{}.json", mode.name()))
}

/// Vectorizes every normalized ROI in each configured representation.
pub fn run_featurize(m: &StudyManifest, modes: &[Representation]) -> Result<Vec<FeatureMatrix>> {
    let (refs, canonical) = load_refs(m)?;
    let labels: BTreeMap<String, i8> = refs
        .images
        .iter()
        .filter_map(|(id, a)| a.label.map(|l| (id.clone(), l)))
        .collect();
    let images = list_images(&m.out("normalized"))?;
    let rois = images
        .iter()
        .map(|(id, path)| Ok((id.clone(), read_pgm_file(path, false)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut matrices = Vec::new();
    for &mode in modes {
        let vectors = match mode {
            Representation::Whole => rois
                .iter()
                .map(|(id, roi)| vectorize_whole(roi, id.clone()))
                .collect(),
            Representation::Spots => {
                let seeds = seeds_in_roi(&m.representation.seeds, &canonical, &m.roi)?;
                rois.iter()
                    .map(|(id, roi)| {
                        vectorize_spots(roi, &seeds, m.representation.fraction, id.clone())
                            .map_err(|e| StudyError::in_sample(id)(e.into()))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let matrix = FeatureMatrix::from_vectors(vectors, &labels)?;
        write(&features_path(m, mode), &json_bytes(&matrix))?;
        matrices.push(matrix);
    }
    Ok(matrices)
}

fn model_path(m: &StudyManifest, mode: Representation) -> PathBuf {
    m.out(&format!("model-{}.svm", mode.name()))
}

/// Trains the final classifier of each mode on all labelled samples.
pub fn run_train(m: &StudyManifest, modes: &[Representation]) -> Result<()> {
    for &mode in modes {
        let matrix = FeatureMatrix::load(&features_path(m, mode))?;
        let dataset = matrix.dataset()?;
        let model = train_smo(&dataset, &m.svm.params_for(matrix.dim))?;
        write(&model_path(m, mode), &serialize_model(&model))?;
        info!(
            "{}: trained on {} samples, {} support vectors",
            mode.name(),
            dataset.len(),
            model.support.len()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub decision: f64,
    pub predicted: i8,
}

/// Applies the saved model of each mode to its feature file.
pub fn run_predict(m: &StudyManifest, modes: &[Representation]) -> Result<Vec<Vec<Prediction>>> {
    let mut all = Vec::new();
    for &mode in modes {
        let path = model_path(m, mode);
        let model = parse_model(&read(&path)?).map_err(|e| StudyError::Parse {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let matrix = FeatureMatrix::load(&features_path(m, mode))?;
        let mut out = String::from("id\tdecision\tpredicted\n");
        let mut predictions = Vec::new();
        for s in &matrix.samples {
            let decision = model
                .decision_value(&s.values)
                .map_err(|e| StudyError::in_sample(&s.id)(e.into()))?;
            let predicted = crate::svm::label_of(decision);
            writeln!(out, "{}\t{decision:?}\t{predicted:+}", s.id).expect("string write");
            predictions.push(Prediction {
                id: s.id.clone(),
                decision,
                predicted,
            });
        }
        write(
            &m.out(&format!("predictions-{}.tsv", mode.name())),
            out.as_bytes(),
        )?;
        all.push(predictions);
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub dim: usize,
    #[serde(flatten)]
    pub eval: EvalReport,
}

/// Cross-validation results of one study, one entry per representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub seed: u64,
    pub samples: usize,
    pub k: usize,
    pub modes: BTreeMap<String, ModeReport>,
}

impl StudyReport {
    pub fn mode(&self, mode: Representation) -> Option<&EvalReport> {
        self.modes.get(mode.name()).map(|r| &r.eval)
    }
}

pub fn report_json(report: &StudyReport) -> Vec<u8> {
    json_bytes(report)
}

pub fn report_table(report: &StudyReport) -> String {
    let mut out = format!(
        "study: {}\nsamples: {}  folds: {}  seed: {}\n\n",
        report.study, report.samples, report.k, report.seed
    );
    writeln!(
        out,
        "{:<8} {:>8} {:>9} {:>12} {:>12}",
        "mode", "dim", "accuracy", "sensitivity", "specificity"
    )
    .expect("string write");
    for (name, r) in &report.modes {
        writeln!(
            out,
            "{:<8} {:>8} {:>9.4} {:>12.4} {:>12.4}",
            name, r.dim, r.eval.accuracy, r.eval.sensitivity, r.eval.specificity
        )
        .expect("string write");
    }
    out
}

/// Writes `report.json` and `report.txt`; returns the JSON bytes.
pub fn write_report(m: &StudyManifest, report: &StudyReport) -> Result<Vec<u8>> {
    let json = report_json(report);
    write(&m.out("report.json"), &json)?;
    write(&m.out("report.txt"), report_table(report).as_bytes())?;
    Ok(json)
}

/// Stratified k-fold evaluation of each mode's feature file.
pub fn run_eval(m: &StudyManifest, modes: &[Representation]) -> Result<StudyReport> {
    let mut report = StudyReport {
        study: m.study.clone(),
        seed: m.seed,
        samples: 0,
        k: m.cv.k,
        modes: BTreeMap::new(),
    };
    for &mode in modes {
        let matrix = FeatureMatrix::load(&features_path(m, mode))?;
        let dataset = matrix.dataset()?;
        report.samples = dataset.len();
        let eval = cross_validate(&dataset, m.cv.k, &m.svm.params_for(matrix.dim), m.seed)?;
        report.modes.insert(
            mode.name().to_string(),
            ModeReport {
                dim: matrix.dim,
                eval,
            },
        );
    }
    write_report(m, &report)?;
    Ok(report)
}

/// All stages in order: synth (when configured), refs, normalize,
/// featurize, eval, train, predict.
pub fn run_pipeline(m: &StudyManifest) -> Result<StudyReport> {
    let modes = m.representation.modes();
    if m.synth.is_some() {
        run_synth(m)?;
    }
    run_refs(m)?;
    run_normalize(m)?;
    run_featurize(m, &modes)?;
    let report = run_eval(m, &modes)?;
    run_train(m, &modes)?;
    run_predict(m, &modes)?;
    Ok(report)
}
