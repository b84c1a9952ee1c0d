//! Class centroids in logit space, the EMA source memory bank, and the two
//! pseudo-labeling strategies (classifier argmax and bank-seeded k-means).

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::model::argmax_rows;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CentroidError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature width {got} does not match centroid width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("k-means pseudo-labels need every class in the bank; class {0} is uninitialized")]
    StrategyUnavailable(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Running per-class source centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    centroids: Tensor,
    initialized: Vec<bool>,
    rho: f64,
}

impl CentroidBank {
    pub fn new(num_classes: usize, dim: usize, rho: f64) -> Self {
        Self {
            centroids: Tensor::zeros(vec![num_classes, dim]),
            initialized: vec![false; num_classes],
            rho,
        }
    }

    /// Rebuilds a bank from stored state (checkpoint loading).
    pub fn from_parts(centroids: Tensor, initialized: Vec<bool>, rho: f64) -> Result<Self, CentroidError> {
        if centroids.rows() != initialized.len() {
            return Err(CentroidError::WidthMismatch {
                expected: centroids.rows(),
                got: initialized.len(),
            });
        }
        Ok(Self {
            centroids,
            initialized,
            rho,
        })
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn fully_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn num_classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `new = ρ·batch + (1−ρ)·old` for present classes. A class seen for the
    /// first time takes the batch centroid outright.
    pub fn ema_update(&mut self, batch: &Tensor, present: &[bool]) -> Result<(), CentroidError> {
        if batch.cols() != self.centroids.cols() || batch.rows() != self.num_classes() {
            return Err(CentroidError::WidthMismatch {
                expected: self.centroids.cols(),
                got: batch.cols(),
            });
        }
        let rho = self.rho;
        for k in 0..self.num_classes() {
            if !present[k] {
                continue;
            }
            let fresh = batch.row(k);
            let first = !self.initialized[k];
            for (old, new) in self.centroids.row_mut(k).iter_mut().zip(fresh) {
                *old = if first {
                    *new
                } else {
                    rho * new + (1.0 - rho) * *old
                };
            }
            self.initialized[k] = true;
        }
        Ok(())
    }
}

/// Per-class means of a batch of features, kept live on the tape.
#[derive(Debug, Clone)]
pub struct BatchCentroids<'t> {
    pub centroids: Var<'t>,
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

/// Per-class arithmetic mean of feature rows. Classes without members get a
/// zero row and `present = false`.
pub fn batch_centroids<'t>(
    features: &Var<'t>,
    labels: &[usize],
    num_classes: usize,
) -> Result<BatchCentroids<'t>, CentroidError> {
    let n = features.value().rows();
    if labels.len() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "batch_centroids",
            left: features.shape(),
            right: vec![labels.len()],
        }
        .into());
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(CentroidError::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        counts[y] += 1;
    }
    // Averaging matrix M [K×n]: M[k,i] = 1/count_k when label_i = k.
    let mut avg = Tensor::zeros(vec![num_classes, n]);
    for (i, &y) in labels.iter().enumerate() {
        avg.data_mut()[y * n + i] = 1.0 / counts[y] as f64;
    }
    let centroids = features.tape().constant(avg).matmul(features)?;
    Ok(BatchCentroids {
        centroids,
        present: counts.iter().map(|&c| c > 0).collect(),
        counts,
    })
}

/// Constant-valued counterpart of [`batch_centroids`], for the source side
/// that feeds the bank.
pub fn batch_centroid_values(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<(Tensor, Vec<bool>), CentroidError> {
    let d = features.cols();
    let mut sums = Tensor::zeros(vec![num_classes, d]);
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(CentroidError::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(k).iter_mut().for_each(|s| *s /= c as f64);
        }
    }
    Ok((sums, counts.iter().map(|&c| c > 0).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// Max softmax probability; 1.0 for the k-means strategy.
    pub confidence: Vec<f64>,
}

pub fn pseudo_labels_argmax(logits: &Tensor) -> PseudoLabels {
    let labels = argmax_rows(logits);
    let confidence = (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|v| (v - max).exp()).sum::<f64>()
        })
        .collect();
    PseudoLabels { labels, confidence }
}

/// Result of a bank-seeded Lloyd run. The centroids are kept so later steps
/// can label new features against them.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansLabels {
    pub pseudo: PseudoLabels,
    pub centroids: Tensor,
}

/// Lloyd's algorithm seeded from the bank, `iters` iterations. Cluster `k`
/// keeps class identity `k`; an emptied cluster keeps its previous centre.
pub fn pseudo_labels_kmeans(
    features: &Tensor,
    bank: &CentroidBank,
    iters: usize,
) -> Result<KMeansLabels, CentroidError> {
    if let Some(k) = bank.initialized().iter().position(|&b| !b) {
        return Err(CentroidError::StrategyUnavailable(k));
    }
    let k = bank.num_classes();
    let d = features.cols();
    if d != bank.centroids().cols() {
        return Err(CentroidError::WidthMismatch {
            expected: bank.centroids().cols(),
            got: d,
        });
    }
    let mut centres = bank.centroids().clone();
    let mut labels = assign_nearest(features, &centres);
    for _ in 0..iters {
        let mut sums = Tensor::zeros(vec![k, d]);
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
            }
        }
        let next = assign_nearest(features, &centres);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(KMeansLabels {
        pseudo: PseudoLabels {
            confidence: vec![1.0; labels.len()],
            labels,
        },
        centroids: centres,
    })
}

/// Index of the nearest centre (squared Euclidean), lowest index on ties.
pub fn assign_nearest(features: &Tensor, centres: &Tensor) -> Vec<usize> {
    (0..features.rows())
        .map(|i| {
            let x = features.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..centres.rows() {
                let d: f64 = x
                    .iter()
                    .zip(centres.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}
