//! Soft-margin binary SVM trained with a deterministic SMO variant.
//!
//! The decision function is `f(x) = Σ αᵢ yᵢ K(xᵢ, x) + b`; labels are `+1`
//! (disease) and `-1` (normal) and `f(x) = 0` is classified as `+1`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureVector, Scaler};

#[derive(Debug, Error, PartialEq)]
pub enum SvmError {
    #[error("training data needs both labels")]
    SingleClassData,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {0} is not +1 or -1")]
    InvalidLabel(i64),
    #[error("{vectors} vectors but {labels} labels")]
    CountMismatch { vectors: usize, labels: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cross-validation: {0}")]
    Fold(String),
    #[error("model file line {line}: {msg}")]
    Format { line: usize, msg: String },
}

impl From<FeatureError> for SvmError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::DimensionMismatch { expected, found } => {
                Self::DimensionMismatch { expected, found }
            }
            other => Self::InvalidParameter(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    /// RBF kernel with the conventional `gamma = 1 / dim`.
    pub fn rbf_for_dim(dim: usize) -> Self {
        Kernel::Rbf {
            gamma: 1.0 / dim.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    /// Upper bound on full sweeps over the training set.
    pub max_passes: usize,
    pub kernel: Kernel,
    /// Fit min-max scaling on the training set and store it in the model.
    pub scale: bool,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-3,
            max_passes: 200,
            kernel: Kernel::Linear,
            scale: false,
        }
    }
}

impl SvmParams {
    fn validate(&self) -> Result<(), SvmError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::InvalidParameter(format!("C = {}", self.c)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(SvmError::InvalidParameter(format!("tol = {}", self.tol)));
        }
        if self.max_passes == 0 {
            return Err(SvmError::InvalidParameter("max_passes = 0".into()));
        }
        if let Kernel::Rbf { gamma } = self.kernel {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(SvmError::InvalidParameter(format!("gamma = {gamma}")));
            }
        }
        Ok(())
    }
}

/// Labelled vectors of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    vectors: Vec<Vec<f64>>,
    labels: Vec<i8>,
}

impl Dataset {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<i8>) -> Result<Self, SvmError> {
        if vectors.len() != labels.len() {
            return Err(SvmError::CountMismatch {
                vectors: vectors.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
            return Err(SvmError::InvalidLabel(bad.into()));
        }
        if let Some(first) = vectors.first() {
            if let Some(v) = vectors.iter().find(|v| v.len() != first.len()) {
                return Err(SvmError::DimensionMismatch {
                    expected: first.len(),
                    found: v.len(),
                });
            }
        }
        Ok(Self { vectors, labels })
    }

    pub fn from_features(features: &[FeatureVector], labels: Vec<i8>) -> Result<Self, SvmError> {
        Self::new(features.iter().map(|f| f.values.clone()).collect(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Same vectors with the labels replaced.
    pub fn relabeled(&self, labels: Vec<i8>) -> Result<Self, SvmError> {
        Self::new(self.vectors.clone(), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportVector {
    pub label: i8,
    pub alpha: f64,
    /// Stored after scaling, in the space the kernel sees.
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    pub bias: f64,
    pub dim: usize,
    /// One multiplier per training point. A parsed model only carries the
    /// support-vector multipliers.
    pub alphas: Vec<f64>,
    pub support: Vec<SupportVector>,
    pub scaler: Option<Scaler>,
}

impl SvmModel {
    fn prepare(&self, x: &[f64]) -> Result<Vec<f64>, SvmError> {
        if x.len() != self.dim {
            return Err(SvmError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        match &self.scaler {
            Some(s) => Ok(s.transform(x)?),
            None => Ok(x.to_vec()),
        }
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64, SvmError> {
        let x = self.prepare(x)?;
        Ok(self
            .support
            .iter()
            .map(|sv| sv.alpha * f64::from(sv.label) * self.kernel.eval(&sv.x, &x))
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> Result<i8, SvmError> {
        Ok(label_of(self.decision_value(x)?))
    }

    /// Separating hyperplane `(w, b)` in input coordinates, linear kernel only.
    pub fn linear_weights(&self) -> Option<(Vec<f64>, f64)> {
        if self.kernel != Kernel::Linear {
            return None;
        }
        let mut w = vec![0.0; self.dim];
        for sv in &self.support {
            for (wj, xj) in w.iter_mut().zip(&sv.x) {
                *wj += sv.alpha * f64::from(sv.label) * xj;
            }
        }
        let mut b = self.bias;
        if let Some(s) = &self.scaler {
            for (j, wj) in w.iter_mut().enumerate() {
                let range = s.max[j] - s.min[j];
                if range > 0.0 {
                    *wj /= range;
                    b -= *wj * s.min[j];
                } else {
                    *wj = 0.0;
                }
            }
        }
        Some((w, b))
    }
}

/// `+1` for nonnegative decision values.
pub fn label_of(decision: f64) -> i8 {
    if decision >= 0.0 {
        1
    } else {
        -1
    }
}

pub fn decision_value(model: &SvmModel, x: &[f64]) -> Result<f64, SvmError> {
    model.decision_value(x)
}

pub fn predict(model: &SvmModel, x: &[f64]) -> Result<i8, SvmError> {
    model.predict(x)
}

/// `Σ αᵢ - ½ ΣΣ αᵢ αⱼ yᵢ yⱼ K(xᵢ, xⱼ)` over the dataset the model was trained on.
pub fn dual_objective(model: &SvmModel, dataset: &Dataset) -> Result<f64, SvmError> {
    if model.alphas.len() != dataset.len() {
        return Err(SvmError::DimensionMismatch {
            expected: model.alphas.len(),
            found: dataset.len(),
        });
    }
    let xs = dataset
        .vectors
        .iter()
        .map(|x| model.prepare(x))
        .collect::<Result<Vec<_>, _>>()?;
    let active: Vec<usize> = (0..xs.len()).filter(|&i| model.alphas[i] != 0.0).collect();
    let mut quad = 0.0;
    for &i in &active {
        for &j in &active {
            quad += model.alphas[i]
                * model.alphas[j]
                * f64::from(dataset.labels[i] * dataset.labels[j])
                * model.kernel.eval(&xs[i], &xs[j]);
        }
    }
    Ok(model.alphas.iter().sum::<f64>() - 0.5 * quad)
}

const ALPHA_EPS: f64 = 1e-8;

struct Smo<'a> {
    xs: &'a [Vec<f64>],
    y: Vec<f64>,
    kernel: Kernel,
    c: f64,
    tol: f64,
    diag: Vec<f64>,
    alpha: Vec<f64>,
    bias: f64,
    errors: Vec<f64>,
}

impl<'a> Smo<'a> {
    fn new(xs: &'a [Vec<f64>], labels: &[i8], params: &SvmParams) -> Self {
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        Self {
            diag: xs.iter().map(|x| params.kernel.eval(x, x)).collect(),
            errors: y.iter().map(|v| -v).collect(),
            alpha: vec![0.0; xs.len()],
            bias: 0.0,
            xs,
            y,
            kernel: params.kernel,
            c: params.c,
            tol: params.tol,
        }
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.xs
            .iter()
            .map(|x| self.kernel.eval(&self.xs[i], x))
            .collect()
    }

    fn violates_kkt(&self, i: usize) -> bool {
        let r = self.y[i] * self.errors[i];
        (r < -self.tol && self.alpha[i] < self.c) || (r > self.tol && self.alpha[i] > 0.0)
    }

    fn is_free(&self, i: usize) -> bool {
        self.alpha[i] > 0.0 && self.alpha[i] < self.c
    }

    fn snap(&self, a: f64) -> f64 {
        if a < 1e-12 * self.c {
            0.0
        } else if a > self.c * (1.0 - 1e-12) {
            self.c
        } else {
            a
        }
    }

    /// Jointly optimizes `alpha[i]` and `alpha[j]`; false when no progress.
    fn take_step(&mut self, i: usize, j: usize, row_i: &[f64]) -> bool {
        if i == j {
            return false;
        }
        let (ai, aj) = (self.alpha[i], self.alpha[j]);
        let (yi, yj) = (self.y[i], self.y[j]);
        let (ei, ej) = (self.errors[i], self.errors[j]);
        let s = yi * yj;
        let (lo, hi) = if yi != yj {
            ((aj - ai).max(0.0), (self.c + aj - ai).min(self.c))
        } else {
            ((ai + aj - self.c).max(0.0), (ai + aj).min(self.c))
        };
        if hi - lo < 1e-12 {
            return false;
        }
        let (kii, kjj, kij) = (self.diag[i], self.diag[j], row_i[j]);
        let eta = kii + kjj - 2.0 * kij;
        let mut aj_new = if eta > 1e-12 {
            (aj + yj * (ei - ej) / eta).clamp(lo, hi)
        } else {
            // objective is linear or concave-up along the constraint line:
            // compare its value at both ends (minimization form)
            let b = self.bias;
            let fi = yi * (ei - b) - ai * kii - s * aj * kij;
            let fj = yj * (ej - b) - s * ai * kij - aj * kjj;
            let psi = |a: f64| {
                let a1 = ai + s * (aj - a);
                a1 * fi + a * fj + 0.5 * a1 * a1 * kii + 0.5 * a * a * kjj + s * a * a1 * kij
            };
            let (plo, phi) = (psi(lo), psi(hi));
            if plo < phi - 1e-12 {
                lo
            } else if plo > phi + 1e-12 {
                hi
            } else {
                aj
            }
        };
        aj_new = self.snap(aj_new);
        if (aj_new - aj).abs() <= ALPHA_EPS {
            return false;
        }
        let ai_new = self.snap(ai + s * (aj - aj_new));
        let (dai, daj) = (ai_new - ai, aj_new - aj);

        let b1 = self.bias - ei - yi * dai * kii - yj * daj * kij;
        let b2 = self.bias - ej - yi * dai * kij - yj * daj * kjj;
        let b_new = if ai_new > 0.0 && ai_new < self.c {
            b1
        } else if aj_new > 0.0 && aj_new < self.c {
            b2
        } else {
            0.5 * (b1 + b2)
        };

        let row_j = self.row(j);
        let db = b_new - self.bias;
        for (k, e) in self.errors.iter_mut().enumerate() {
            *e += yi * dai * row_i[k] + yj * daj * row_j[k] + db;
        }
        self.alpha[i] = ai_new;
        self.alpha[j] = aj_new;
        self.bias = b_new;
        true
    }

    fn examine(&mut self, i: usize) -> bool {
        if !self.violates_kkt(i) {
            return false;
        }
        let row_i = self.row(i);
        let ei = self.errors[i];
        let mut best: Option<(usize, f64)> = None;
        for j in (0..self.xs.len()).filter(|&j| j != i && self.is_free(j)) {
            let gap = (ei - self.errors[j]).abs();
            if best.is_none_or(|(_, g)| gap > g) {
                best = Some((j, gap));
            }
        }
        if let Some((j, _)) = best {
            if self.take_step(i, j, &row_i) {
                return true;
            }
        }
        let tried = best.map(|(j, _)| j);
        (0..self.xs.len())
            .filter(|&j| Some(j) != tried)
            .any(|j| self.take_step(i, j, &row_i))
    }

    /// Recomputes the error cache from scratch and places the bias at the
    /// centre of its KKT-feasible interval (or averages it over free vectors).
    fn refine_bias(&mut self) {
        let n = self.xs.len();
        let mut margin = vec![0.0; n];
        for j in (0..n).filter(|&j| self.alpha[j] > 0.0) {
            let row = self.row(j);
            for (m, k) in margin.iter_mut().zip(row) {
                *m += self.alpha[j] * self.y[j] * k;
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| self.is_free(i)).collect();
        self.bias = if free.is_empty() {
            let (mut lower, mut upper) = (f64::NEG_INFINITY, f64::INFINITY);
            for (i, m) in margin.iter().enumerate() {
                let target = self.y[i] - m;
                let at_upper = self.alpha[i] >= self.c;
                if (self.y[i] > 0.0) != at_upper {
                    lower = lower.max(target);
                } else {
                    upper = upper.min(target);
                }
            }
            match (lower.is_finite(), upper.is_finite()) {
                (true, true) => 0.5 * (lower + upper),
                (true, false) => lower,
                (false, true) => upper,
                (false, false) => 0.0,
            }
        } else {
            free.iter().map(|&i| self.y[i] - margin[i]).sum::<f64>() / free.len() as f64
        };
        for ((e, m), y) in self.errors.iter_mut().zip(&margin).zip(&self.y) {
            *e = m + self.bias - y;
        }
    }
}

/// Trains a soft-margin SVM.
///
/// Each sweep visits the points in index order. A KKT violator is paired with
/// the free multiplier maximizing `|Eᵢ - Eⱼ|` (lowest index on ties); if that
/// makes no progress every other index is tried in order. Training stops at
/// the first sweep that changes nothing after a bias refresh, or after
/// `max_passes` sweeps.
pub fn train_smo(dataset: &Dataset, params: &SvmParams) -> Result<SvmModel, SvmError> {
    params.validate()?;
    let has = |l: i8| dataset.labels.contains(&l);
    if !has(1) || !has(-1) {
        return Err(SvmError::SingleClassData);
    }
    let scaler = if params.scale {
        Some(Scaler::fit(&dataset.vectors)?)
    } else {
        None
    };
    let xs: Vec<Vec<f64>> = match &scaler {
        Some(s) => dataset
            .vectors
            .iter()
            .map(|x| s.transform(x))
            .collect::<Result<_, _>>()?,
        None => dataset.vectors.clone(),
    };

    let mut smo = Smo::new(&xs, &dataset.labels, params);
    let mut refreshed = false;
    for _ in 0..params.max_passes {
        let mut changed = 0;
        for i in 0..xs.len() {
            if smo.examine(i) {
                changed += 1;
            }
        }
        if changed == 0 {
            if refreshed {
                break;
            }
            smo.refine_bias();
            refreshed = true;
        } else {
            refreshed = false;
        }
    }
    if !refreshed {
        smo.refine_bias();
    }

    let support = (0..xs.len())
        .filter(|&i| smo.alpha[i] > 0.0)
        .map(|i| SupportVector {
            label: dataset.labels[i],
            alpha: smo.alpha[i],
            x: xs[i].clone(),
        })
        .collect();
    Ok(SvmModel {
        kernel: params.kernel,
        c: params.c,
        bias: smo.bias,
        dim: dataset.dim(),
        alphas: smo.alpha,
        support,
        scaler,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub false_positive: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: i8, predicted: i8) {
        match (truth, predicted) {
            (1, 1) => self.true_positive += 1,
            (1, _) => self.false_negative += 1,
            (_, -1) => self.true_negative += 1,
            _ => self.false_positive += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_negative + self.true_negative + self.false_positive
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.true_positive + self.true_negative, self.total())
    }

    /// True +1 rate.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// True -1 rate.
    pub fn specificity(&self) -> f64 {
        ratio(self.true_negative, self.true_negative + self.false_positive)
    }

    fn add(&mut self, other: &Confusion) {
        self.true_positive += other.true_positive;
        self.false_negative += other.false_negative;
        self.true_negative += other.true_negative;
        self.false_positive += other.false_positive;
    }
}

// empty denominators report 0 so that JSON reports never carry NaN
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Confusion,
    pub folds: Vec<FoldReport>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let mut confusion = Confusion::default();
        for f in &folds {
            confusion.add(&f.confusion);
        }
        Self {
            accuracy: confusion.accuracy(),
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            confusion,
            folds,
        }
    }
}

/// Seeded stratified fold assignment: each class is shuffled and dealt
/// round-robin, negatives continuing where positives stopped.
pub fn stratified_folds(labels: &[i8], k: usize, seed: u64) -> Result<Vec<usize>, SvmError> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(SvmError::Fold(format!("k = {k} with {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; n];
    let mut dealt = 0;
    for class in [1i8, -1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(SvmError::Fold(format!(
                "class {class:+} has {} sample(s); every training fold needs both classes",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(assignment)
}

/// Stratified k-fold cross-validation.
pub fn cross_validate(
    dataset: &Dataset,
    k: usize,
    params: &SvmParams,
    seed: u64,
) -> Result<EvalReport, SvmError> {
    let assignment = stratified_folds(&dataset.labels, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..dataset.len()).partition(|&i| assignment[i] == fold);
        let model = train_smo(&dataset.subset(&train), params)?;
        let mut confusion = Confusion::default();
        for &i in &test {
            confusion.record(dataset.labels[i], model.predict(&dataset.vectors[i])?);
        }
        folds.push(FoldReport {
            fold,
            train_size: train.len(),
            test_size: test.len(),
            accuracy: confusion.accuracy(),
            confusion,
        });
    }
    Ok(EvalReport::from_folds(folds))
}

const MODEL_MAGIC: &str = "gelvec-svm v1";

fn push_row(out: &mut String, values: &[f64]) {
    for v in values {
        out.push_str(&format!(" {v:?}"));
    }
    out.push('\n');
}

/// Line-based text encoding; floats use the shortest round-trip form.
///
/// ```text
/// gelvec-svm v1
/// linear | rbf <gamma>
/// <C> <b> <dim> <n_sv>
/// <label> <alpha> <x_1> ... <x_dim>      (n_sv lines)
/// scaling none | scaling minmax
/// min <v_1> ... <v_dim>                 (minmax only)
/// max <v_1> ... <v_dim>                 (minmax only)
/// ```
pub fn serialize_model(model: &SvmModel) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(MODEL_MAGIC);
    out.push('\n');
    match model.kernel {
        Kernel::Linear => out.push_str("linear\n"),
        Kernel::Rbf { gamma } => out.push_str(&format!("rbf {gamma:?}\n")),
    }
    out.push_str(&format!(
        "{:?} {:?} {} {}\n",
        model.c,
        model.bias,
        model.dim,
        model.support.len()
    ));
    for sv in &model.support {
        out.push_str(&format!("{:+} {:?}", sv.label, sv.alpha));
        push_row(&mut out, &sv.x);
    }
    match &model.scaler {
        None => out.push_str("scaling none\n"),
        Some(s) => {
            out.push_str("scaling minmax\n");
            out.push_str("min");
            push_row(&mut out, &s.min);
            out.push_str("max");
            push_row(&mut out, &s.max);
        }
    }
    out.into_bytes()
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str), SvmError> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .ok_or_else(|| SvmError::Format {
                line: 0,
                msg: format!("truncated: expected {what}"),
            })
    }
}

fn parse_num<T: std::str::FromStr>(
    token: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, SvmError> {
    token
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| SvmError::Format {
            line,
            msg: format!("bad or missing {what}"),
        })
}

fn parse_row(
    tokens: std::str::SplitWhitespace<'_>,
    dim: usize,
    line: usize,
) -> Result<Vec<f64>, SvmError> {
    let row = tokens
        .map(|t| parse_num::<f64>(Some(t), line, "component"))
        .collect::<Result<Vec<_>, _>>()?;
    if row.len() != dim {
        return Err(SvmError::Format {
            line,
            msg: format!("{} components, expected {dim}", row.len()),
        });
    }
    Ok(row)
}

pub fn parse_model(bytes: &[u8]) -> Result<SvmModel, SvmError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SvmError::Format {
        line: 0,
        msg: e.to_string(),
    })?;
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, magic) = lines.next("header")?;
    if magic != MODEL_MAGIC {
        return Err(SvmError::Format {
            line: n,
            msg: format!("expected {MODEL_MAGIC:?}"),
        });
    }
    let (n, kernel_line) = lines.next("kernel")?;
    let mut tokens = kernel_line.split_whitespace();
    let kernel = match tokens.next() {
        Some("linear") => Kernel::Linear,
        Some("rbf") => Kernel::Rbf {
            gamma: parse_num(tokens.next(), n, "gamma")?,
        },
        _ => {
            return Err(SvmError::Format {
                line: n,
                msg: "unknown kernel".into(),
            })
        }
    };
    let (n, params) = lines.next("parameters")?;
    let mut tokens = params.split_whitespace();
    let c: f64 = parse_num(tokens.next(), n, "C")?;
    let bias: f64 = parse_num(tokens.next(), n, "bias")?;
    let dim: usize = parse_num(tokens.next(), n, "dim")?;
    let n_sv: usize = parse_num(tokens.next(), n, "support vector count")?;

    let mut support = Vec::with_capacity(n_sv.min(1 << 16));
    for _ in 0..n_sv {
        let (n, row) = lines.next("support vector")?;
        let mut tokens = row.split_whitespace();
        let label: i8 = parse_num(tokens.next(), n, "label")?;
        if label != 1 && label != -1 {
            return Err(SvmError::Format {
                line: n,
                msg: format!("label {label}"),
            });
        }
        let alpha: f64 = parse_num(tokens.next(), n, "alpha")?;
        let x = parse_row(tokens, dim, n)?;
        support.push(SupportVector { label, alpha, x });
    }

    let (n, scaling) = lines.next("scaling")?;
    let scaler = match scaling.trim() {
        "scaling none" => None,
        "scaling minmax" => {
            let mut bound = |tag: &str| -> Result<Vec<f64>, SvmError> {
                let (n, row) = lines.next(tag)?;
                let mut tokens = row.split_whitespace();
                if tokens.next() != Some(tag) {
                    return Err(SvmError::Format {
                        line: n,
                        msg: format!("expected {tag:?} row"),
                    });
                }
                parse_row(tokens, dim, n)
            };
            let min = bound("min")?;
            let max = bound("max")?;
            Some(Scaler { min, max })
        }
        _ => {
            return Err(SvmError::Format {
                line: n,
                msg: "expected scaling line".into(),
            })
        }
    };
    Ok(SvmModel {
        kernel,
        c,
        bias,
        dim,
        alphas: support.iter().map(|sv| sv.alpha).collect(),
        support,
        scaler,
    })
}
