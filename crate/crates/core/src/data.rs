//! Synthetic domain-shift data, SSDA splits, the strong augmentation ladder
//! and minibatch composition.
//!
//! Two generators are provided: rotated two-moons (K = 2) and affine-shifted
//! Gaussian blobs (any K). Splits are stratified per class and standardized
//! with source statistics only. Labels of the unlabeled target pool are kept
//! private to [`UnlabeledSet`] and never copied into a [`Batch`].

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("affine map is singular (determinant {0:e})")]
    SingularAffine(f64),
    #[error("class {class} has {available} target samples but the split needs {needed}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("unlabeled target pool has {unlabeled} samples; need at least 10x the {labeled} labeled target samples")]
    TooFewUnlabeled { unlabeled: usize, labeled: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

/// Row-major feature matrix with integer labels. May be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            features: Vec::new(),
            dim,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn push(&mut self, x: &[f64], y: usize) {
        self.features.extend_from_slice(x);
        self.labels.push(y);
    }

    /// Feature matrix; `None` when the set is empty.
    pub fn to_tensor(&self) -> Option<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.features.clone()).ok()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Unlabeled target pool. Ground-truth labels stay private for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Vec<f64>,
    dim: usize,
    hidden_labels: Vec<usize>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.hidden_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Ground truth for diagnostics and export. Training never calls this.
    pub fn diagnostic_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    /// Overwrites the hidden labels (used by leakage canary tests).
    pub fn replace_diagnostic_labels(&mut self, labels: Vec<usize>) {
        assert_eq!(labels.len(), self.len());
        self.hidden_labels = labels;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DomainShift {
    /// Rotation by `theta` radians about `center`.
    Rotation { theta: f64, center: Vec<f64> },
    /// `x ↦ matrix·x + translation`, matrix row-major `d×d`.
    Affine {
        matrix: Vec<f64>,
        translation: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: LabeledSet,
    pub target: LabeledSet,
    pub num_classes: usize,
    pub shift: DomainShift,
    pub noise_std: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(std: f64) -> Result<Normal<f64>, DataError> {
    Normal::new(0.0, std).map_err(|e| DataError::InvalidParameter(format!("noise std {std}: {e}")))
}

/// Moon centroid: mean of the outer arc (0, 2/π) and inner arc (1, 0.5 − 2/π).
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

fn draw_moons(n: usize, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> LabeledSet {
    let mut set = LabeledSet::empty(2);
    for i in 0..n {
        let class = i % 2;
        let t = rng.random_range(0.0..PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        set.push(&[x + noise.sample(rng), y + noise.sample(rng)], class);
    }
    set
}

/// Two interleaving half-circles; target draws are rotated by `theta` about
/// the moons' centroid.
pub fn generate_two_moons_domains(
    n_per_domain: usize,
    theta: f64,
    noise_std: f64,
    seed: u64,
) -> Result<DomainPair, DataError> {
    if n_per_domain < 8 {
        return Err(DataError::InvalidParameter(format!(
            "n_per_domain must be at least 4·K = 8, got {n_per_domain}"
        )));
    }
    if !(0.0..=PI).contains(&theta) {
        return Err(DataError::InvalidParameter(format!("theta {theta} outside [0, π]")));
    }
    let noise = normal(noise_std)?;
    let source = draw_moons(n_per_domain, &noise, &mut stream_rng(seed, 0));
    let mut target = draw_moons(n_per_domain, &noise, &mut stream_rng(seed, 1));
    let (s, c) = theta.sin_cos();
    let [cx, cy] = MOONS_CENTER;
    for row in target.features.chunks_mut(2) {
        let (dx, dy) = (row[0] - cx, row[1] - cy);
        row[0] = cx + c * dx - s * dy;
        row[1] = cy + s * dx + c * dy;
    }
    Ok(DomainPair {
        source,
        target,
        num_classes: 2,
        shift: DomainShift::Rotation {
            theta,
            center: MOONS_CENTER.to_vec(),
        },
        noise_std,
    })
}

/// Affine shift applied to target samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub matrix: Vec<f64>,
    pub translation: Vec<f64>,
}

impl Affine {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Tensor::identity(d).into_data(),
            translation: vec![0.0; d],
        }
    }

    /// Rotation by `degrees` in the first two coordinates plus a translation.
    pub fn planar_rotation(d: usize, degrees: f64, translation: Vec<f64>) -> Self {
        let mut m = Tensor::identity(d).into_data();
        if d >= 2 {
            let (s, c) = degrees.to_radians().sin_cos();
            m[0] = c;
            m[1] = -s;
            m[d] = s;
            m[d + 1] = c;
        }
        Self {
            matrix: m,
            translation,
        }
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| {
                self.translation[i]
                    + (0..d).map(|j| self.matrix[i * d + j] * x[j]).sum::<f64>()
            })
            .collect()
    }

    /// Determinant by partial-pivot elimination.
    pub fn determinant(&self) -> f64 {
        let d = self.dim();
        let mut a = self.matrix.clone();
        let mut det = 1.0;
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
                .unwrap();
            if a[pivot * d + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for j in 0..d {
                    a.swap(pivot * d + j, col * d + j);
                }
                det = -det;
            }
            let p = a[col * d + col];
            det *= p;
            for i in col + 1..d {
                let f = a[i * d + col] / p;
                for j in col..d {
                    a[i * d + j] -= f * a[col * d + j];
                }
            }
        }
        det
    }
}

/// Radius of the circle the blob means sit on.
pub const BLOB_RADIUS: f64 = 3.0;

/// Mean of class `k` among `classes` blobs in `d` dimensions.
pub fn blob_mean(k: usize, classes: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    if d == 1 {
        m[0] = BLOB_RADIUS * k as f64;
    } else {
        let a = 2.0 * PI * k as f64 / classes as f64;
        m[0] = BLOB_RADIUS * a.cos();
        m[1] = BLOB_RADIUS * a.sin();
    }
    m
}

fn draw_blobs(k: usize, n: usize, d: usize, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> LabeledSet {
    let means: Vec<Vec<f64>> = (0..k).map(|c| blob_mean(c, k, d)).collect();
    let mut set = LabeledSet::empty(d);
    for i in 0..n {
        let class = i % k;
        let x: Vec<f64> = means[class].iter().map(|m| m + noise.sample(rng)).collect();
        set.push(&x, class);
    }
    set
}

/// `K` isotropic Gaussian blobs; target samples are fresh draws mapped through `affine`.
pub fn generate_blob_shift_domains(
    num_classes: usize,
    n_per_domain: usize,
    dim: usize,
    affine: &Affine,
    noise_std: f64,
    seed: u64,
) -> Result<DomainPair, DataError> {
    if num_classes < 2 {
        return Err(DataError::InvalidParameter("blob generator needs K ≥ 2".into()));
    }
    if dim == 0 || affine.dim() != dim || affine.matrix.len() != dim * dim {
        return Err(DataError::InvalidParameter(format!(
            "affine map must be {dim}×{dim} with a length-{dim} translation"
        )));
    }
    if n_per_domain < 4 * num_classes {
        return Err(DataError::InvalidParameter(format!(
            "n_per_domain must be at least 4·K = {}",
            4 * num_classes
        )));
    }
    let det = affine.determinant();
    if det.abs() < 1e-12 {
        return Err(DataError::SingularAffine(det));
    }
    let noise = normal(noise_std)?;
    let source = draw_blobs(num_classes, n_per_domain, dim, &noise, &mut stream_rng(seed, 0));
    let mut target = draw_blobs(num_classes, n_per_domain, dim, &noise, &mut stream_rng(seed, 1));
    for row in target.features.chunks_mut(dim) {
        let mapped = affine.apply(row);
        row.copy_from_slice(&mapped);
    }
    Ok(DomainPair {
        source,
        target,
        num_classes,
        shift: DomainShift::Affine {
            matrix: affine.matrix.clone(),
            translation: affine.translation.clone(),
        },
        noise_std,
    })
}

/// Per-feature affine normalization fitted on the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn fit(set: &LabeledSet) -> Self {
        let d = set.dim;
        let n = set.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in 0..set.len() {
            mean.iter_mut().zip(set.row(i)).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for i in 0..set.len() {
            for (j, x) in set.row(i).iter().enumerate() {
                var[j] += (x - mean[j]).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, features: &mut [f64]) {
        let d = self.mean.len();
        for row in features.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsdaSplit {
    pub source: LabeledSet,
    pub target_labeled: LabeledSet,
    pub target_unlabeled: UnlabeledSet,
    pub target_val: LabeledSet,
    pub target_test: LabeledSet,
    pub num_classes: usize,
    pub standardization: Standardization,
}

impl SsdaSplit {
    pub fn dim(&self) -> usize {
        self.source.dim
    }
}

/// Stratified, seeded split of the target domain into k-shot labeled,
/// unlabeled, validation and test sets. Everything is standardized with
/// source statistics.
pub fn make_ssda_split(
    pair: &DomainPair,
    shots: usize,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<SsdaSplit, DataError> {
    if shots == 0 {
        return Err(DataError::InvalidParameter("shots must be at least 1".into()));
    }
    for (name, f) in [("val_fraction", val_fraction), ("test_fraction", test_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(DataError::InvalidParameter(format!("{name} {f} outside [0, 1)")));
        }
    }
    let k = pair.num_classes;
    let d = pair.source.dim;
    let mut rng = stream_rng(seed, 2);

    let mut roles = vec![Role::TargetUnlabeled; pair.target.len()];
    for class in 0..k {
        let mut members: Vec<usize> = (0..pair.target.len())
            .filter(|&i| pair.target.labels[i] == class)
            .collect();
        let n = members.len();
        let n_val = (val_fraction * n as f64).round() as usize;
        let n_test = (test_fraction * n as f64).round() as usize;
        let needed = shots + n_val + n_test + 1;
        if n < needed {
            return Err(DataError::InsufficientSamples {
                class,
                needed,
                available: n,
            });
        }
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            roles[i] = if pos < shots {
                Role::TargetLabeled
            } else if pos < shots + n_val {
                Role::TargetVal
            } else if pos < shots + n_val + n_test {
                Role::TargetTest
            } else {
                Role::TargetUnlabeled
            };
        }
    }

    let standardization = Standardization::fit(&pair.source);
    let mut source = pair.source.clone();
    standardization.apply(&mut source.features);
    let mut target = pair.target.clone();
    standardization.apply(&mut target.features);

    let mut split = SsdaSplit {
        source,
        target_labeled: LabeledSet::empty(d),
        target_unlabeled: UnlabeledSet {
            features: Vec::new(),
            dim: d,
            hidden_labels: Vec::new(),
        },
        target_val: LabeledSet::empty(d),
        target_test: LabeledSet::empty(d),
        num_classes: k,
        standardization,
    };
    for (i, role) in roles.iter().enumerate() {
        split.push(*role, target.row(i), target.labels[i]);
    }
    check_unlabeled_ratio(&split)?;
    Ok(split)
}

fn check_unlabeled_ratio(split: &SsdaSplit) -> Result<(), DataError> {
    let labeled = split.target_labeled.len();
    let unlabeled = split.target_unlabeled.len();
    if unlabeled < 10 * labeled {
        return Err(DataError::TooFewUnlabeled { unlabeled, labeled });
    }
    Ok(())
}

/// Replaces `num_mislabeled` labeled-target labels with a uniformly drawn
/// wrong class.
pub fn corrupt_target_labels(
    split: &SsdaSplit,
    num_mislabeled: usize,
    seed: u64,
) -> Result<SsdaSplit, DataError> {
    let n = split.target_labeled.len();
    if num_mislabeled > n {
        return Err(DataError::InvalidParameter(format!(
            "cannot mislabel {num_mislabeled} of {n} labeled target samples"
        )));
    }
    let mut out = split.clone();
    if num_mislabeled == 0 {
        return Ok(out);
    }
    let mut rng = stream_rng(seed, 3);
    let k = split.num_classes;
    for i in rand::seq::index::sample(&mut rng, n, num_mislabeled).into_iter() {
        let original = out.target_labeled.labels[i];
        let draw = rng.random_range(0..k - 1);
        out.target_labeled.labels[i] = if draw >= original { draw + 1 } else { draw };
    }
    Ok(out)
}

/// Strong augmentation settings. Level 0 is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub level: u8,
    pub noise_std: f64,
    pub dropout: f64,
    pub scale_range: (f64, f64),
    pub rotate: bool,
    /// Rotation angle is drawn from `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
}

impl AugmentationPolicy {
    pub const MAX_LEVEL: u8 = 3;

    /// Preset ladder; every knob is nondecreasing in the level.
    pub fn level(level: u8) -> Self {
        match level {
            0 => Self {
                level,
                noise_std: 0.0,
                dropout: 0.0,
                scale_range: (1.0, 1.0),
                rotate: false,
                max_angle: 0.0,
            },
            1 => Self {
                level,
                noise_std: 0.1,
                dropout: 0.0,
                scale_range: (0.9, 1.1),
                rotate: false,
                max_angle: 0.0,
            },
            2 => Self {
                level,
                noise_std: 0.2,
                dropout: 0.05,
                scale_range: (0.8, 1.2),
                rotate: true,
                max_angle: PI / 12.0,
            },
            _ => Self {
                level: Self::MAX_LEVEL,
                noise_std: 0.35,
                dropout: 0.1,
                scale_range: (0.7, 1.3),
                rotate: true,
                max_angle: PI / 6.0,
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0
            && self.dropout == 0.0
            && self.scale_range == (1.0, 1.0)
            && !(self.rotate && self.max_angle > 0.0)
    }
}

/// Noise, then feature dropout, then a global scale, then an optional planar
/// rotation of a random feature pair.
pub fn augment<R: Rng + ?Sized>(x: &[f64], policy: &AugmentationPolicy, rng: &mut R) -> Vec<f64> {
    if policy.is_identity() {
        return x.to_vec();
    }
    let mut out = x.to_vec();
    if policy.noise_std > 0.0 {
        let noise = Normal::new(0.0, policy.noise_std).expect("positive std");
        out.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    if policy.dropout > 0.0 {
        let kept = out.clone();
        let mut dropped = 0;
        for v in out.iter_mut() {
            if rng.random::<f64>() < policy.dropout {
                *v = 0.0;
                dropped += 1;
            }
        }
        // A fully dropped row becomes the zero vector, which the cosine
        // kernel rejects; below p = 1 one random feature is kept.
        if dropped == out.len() && policy.dropout < 1.0 && !out.is_empty() {
            let j = rng.random_range(0..out.len());
            out[j] = kept[j];
        }
    }
    let (lo, hi) = policy.scale_range;
    if hi > lo {
        let s = rng.random_range(lo..=hi);
        out.iter_mut().for_each(|v| *v *= s);
    } else if lo != 1.0 {
        out.iter_mut().for_each(|v| *v *= lo);
    }
    if policy.rotate && policy.max_angle > 0.0 && out.len() >= 2 {
        let i = rng.random_range(0..out.len());
        let mut j = rng.random_range(0..out.len() - 1);
        if j >= i {
            j += 1;
        }
        let a = rng.random_range(-policy.max_angle..=policy.max_angle);
        let (s, c) = a.sin_cos();
        let (xi, xj) = (out[i], out[j]);
        out[i] = c * xi - s * xj;
        out[j] = s * xi + c * xj;
    }
    out
}

/// How `B` is divided between the two labeled streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabeledMode {
    /// `B/2` source + `B/2` labeled target.
    #[default]
    Half,
    /// `B` source + `B` labeled target.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub mu: usize,
    pub labeled_mode: LabeledMode,
    pub policy: AugmentationPolicy,
}

impl BatchConfig {
    pub fn per_stream(&self) -> usize {
        match self.labeled_mode {
            LabeledMode::Half => self.batch_size / 2,
            LabeledMode::Full => self.batch_size,
        }
    }

    pub fn unlabeled(&self) -> usize {
        self.mu * self.batch_size
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.batch_size == 0 || (self.labeled_mode == LabeledMode::Half && self.batch_size % 2 != 0) {
            return Err(DataError::InvalidParameter(format!(
                "batch size {} must be positive (and even when split in halves)",
                self.batch_size
            )));
        }
        if self.mu == 0 {
            return Err(DataError::InvalidParameter("mu must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training minibatch. Carries no unlabeled-target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
    pub target_y: Vec<usize>,
    /// Positions in the unlabeled pool, aligned with the rows below.
    pub unlabeled_index: Vec<usize>,
    pub unlabeled_orig: Tensor,
    pub unlabeled_strong: Tensor,
}

/// Epoch-style cursor over a shuffled index range.
#[derive(Debug, Clone)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws minibatches: source and unlabeled streams via shuffled cursors,
/// labeled target with replacement.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    config: BatchConfig,
    source: Cursor,
    unlabeled: Cursor,
}

impl MinibatchSampler {
    pub fn new(split: &SsdaSplit, config: BatchConfig) -> Result<Self, DataError> {
        config.validate()?;
        if split.source.is_empty() || split.target_labeled.is_empty() || split.target_unlabeled.is_empty() {
            return Err(DataError::InvalidParameter(
                "source, labeled target and unlabeled target sets must be non-empty".into(),
            ));
        }
        Ok(Self {
            source: Cursor::new(split.source.len()),
            unlabeled: Cursor::new(split.target_unlabeled.len()),
            config,
        })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, split: &SsdaSplit, rng: &mut R) -> Batch {
        let per = self.config.per_stream();
        let d = split.dim();

        let mut source = LabeledSet::empty(d);
        for _ in 0..per {
            let i = self.source.next(rng);
            source.push(split.source.row(i), split.source.labels[i]);
        }
        let mut target = LabeledSet::empty(d);
        for _ in 0..per {
            let i = rng.random_range(0..split.target_labeled.len());
            target.push(split.target_labeled.row(i), split.target_labeled.labels[i]);
        }

        let n_u = self.config.unlabeled();
        let mut unlabeled_index = Vec::with_capacity(n_u);
        let mut orig = Vec::with_capacity(n_u * d);
        let mut strong = Vec::with_capacity(n_u * d);
        for _ in 0..n_u {
            let i = self.unlabeled.next(rng);
            let x = split.target_unlabeled.row(i);
            unlabeled_index.push(i);
            orig.extend_from_slice(x);
            strong.extend(augment(x, &self.config.policy, rng));
        }

        Batch {
            source_x: source.to_tensor().expect("non-empty"),
            source_y: source.labels,
            target_x: target.to_tensor().expect("non-empty"),
            target_y: target.labels,
            unlabeled_index,
            unlabeled_orig: Tensor::matrix(n_u, d, orig).expect("non-empty"),
            unlabeled_strong: Tensor::matrix(n_u, d, strong).expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    TargetLabeled,
    TargetUnlabeled,
    TargetVal,
    TargetTest,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Source,
        Role::TargetLabeled,
        Role::TargetUnlabeled,
        Role::TargetVal,
        Role::TargetTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::TargetLabeled => "target_labeled",
            Role::TargetUnlabeled => "target_unlabeled",
            Role::TargetVal => "target_val",
            Role::TargetTest => "target_test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl SsdaSplit {
    fn push(&mut self, role: Role, x: &[f64], y: usize) {
        match role {
            Role::Source => self.source.push(x, y),
            Role::TargetLabeled => self.target_labeled.push(x, y),
            Role::TargetVal => self.target_val.push(x, y),
            Role::TargetTest => self.target_test.push(x, y),
            Role::TargetUnlabeled => {
                self.target_unlabeled.features.extend_from_slice(x);
                self.target_unlabeled.hidden_labels.push(y);
            }
        }
    }

    fn rows_of(&self, role: Role) -> Vec<(&[f64], usize)> {
        let set = match role {
            Role::Source => &self.source,
            Role::TargetLabeled => &self.target_labeled,
            Role::TargetVal => &self.target_val,
            Role::TargetTest => &self.target_test,
            Role::TargetUnlabeled => {
                let u = &self.target_unlabeled;
                return (0..u.len()).map(|i| (u.row(i), u.hidden_labels[i])).collect();
            }
        };
        (0..set.len()).map(|i| (set.row(i), set.labels[i])).collect()
    }

    /// Writes `feature_0..feature_{d-1},label,domain,role`, one row per
    /// sample, in role order (source, labeled, unlabeled, val, test).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let d = self.dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..d).map(|j| format!("feature_{j}")).collect();
        header.extend(["label", "domain", "role"].map(String::from));
        w.write_record(&header)?;
        for role in Role::ALL {
            let domain = if role == Role::Source { "source" } else { "target" };
            for (x, y) in self.rows_of(role) {
                let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                rec.push(y.to_string());
                rec.push(domain.to_string());
                rec.push(role.as_str().to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a split written by [`SsdaSplit::write_csv`]. The values are taken
    /// as already standardized.
    pub fn read_csv<R: Read>(reader: R) -> Result<SsdaSplit, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let d = headers.len().checked_sub(3).filter(|&d| d > 0).ok_or_else(|| {
            DataError::Csv("expected feature columns followed by label,domain,role".into())
        })?;
        for j in 0..d {
            if headers.get(j) != Some(&format!("feature_{j}")) {
                return Err(DataError::Csv(format!("column {j} should be feature_{j}")));
            }
        }
        let mut split = SsdaSplit {
            source: LabeledSet::empty(d),
            target_labeled: LabeledSet::empty(d),
            target_unlabeled: UnlabeledSet {
                features: Vec::new(),
                dim: d,
                hidden_labels: Vec::new(),
            },
            target_val: LabeledSet::empty(d),
            target_test: LabeledSet::empty(d),
            num_classes: 0,
            standardization: Standardization::identity(d),
        };
        let mut max_label = 0;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| DataError::Csv(format!("row {}: {what}", line + 2));
            let x: Vec<f64> = (0..d)
                .map(|j| rec[j].parse::<f64>().map_err(|_| bad("unparseable feature")))
                .collect::<Result<_, _>>()?;
            let y: usize = rec[d].parse().map_err(|_| bad("unparseable label"))?;
            let role = Role::parse(&rec[d + 2]).ok_or_else(|| bad("unknown role"))?;
            max_label = max_label.max(y);
            split.push(role, &x, y);
        }
        split.num_classes = max_label + 1;
        Ok(split)
    }
}
