//! Diagnosis from 2D gel electrophoresis images.
//!
//! The pipeline normalizes every gel against two landmark spots with a
//! per-axis affine map, cuts a fixed-size rectangle around the landmarks,
//! turns it into a vector (all pixels, or the densities of chosen spots) and
//! trains a soft-margin SVM whose decision boundary is the diagnostic cut-off.
//!
//! - [`imagecore`]: image model and PGM I/O
//! - [`synthgel`]: synthetic cohorts with negative staining
//! - [`registration`]: affine solve, resampling, ROI extraction
//! - [`features`]: spot segmentation and vectorization
//! - [`svm`]: SMO training, cross-validation, model files
//! - [`study`]: manifest-driven pipeline and reports

pub mod features;
pub mod imagecore;
pub mod registration;
pub mod study;
pub mod svm;
pub mod synthgel;

pub use features::{FeatureVector, Representation, Scaler, SpotRegion};
pub use imagecore::{GelImage, PgmFormat, PixelCoord};
pub use registration::{AffineMap, InterpKind, ReferencePair, RoiSpec};
pub use svm::{Dataset, EvalReport, Kernel, SvmModel, SvmParams};
pub use synthgel::{CohortSpec, JitterSpec, SpotSpec, StainModel};
