//! Training objectives: supervised cross-entropy, inter-domain centroid
//! contrastive alignment, instance contrastive alignment, their weighted sum,
//! and the L1 / L2 / FixMatch consistency baselines.
//!
//! All contrastive terms use the kernel `h(u, v) = exp(cos(u, v) / τ)` over
//! raw classifier logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var, NORM_FLOOR};
use crate::centroids::{BatchCentroids, CentroidBank};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at row {row} out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("instance contrastive loss needs at least 2 unlabeled rows, got {0}")]
    TooFewRows(usize),
    #[error("no class has both a target centroid and an initialized source centroid")]
    EmptyAlignment,
    #[error("degenerate vector with norm {0:e}")]
    DegenerateVector(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which contrastive term each coefficient multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientConvention {
    /// `L_sup + α·L_ins + β·L_clu` (training-loop listing).
    #[default]
    AlphaInstance,
    /// `L_sup + α·L_clu + β·L_ins` (objective as written in closed form).
    AlphaCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub rho: f64,
    pub fixmatch_threshold: f64,
    pub convention: CoefficientConvention,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 4.0,
            beta: 1.0,
            tau: 5.0,
            rho: 0.1,
            fixmatch_threshold: 0.95,
            convention: CoefficientConvention::AlphaInstance,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(format!(
                "alpha and beta must be non-negative, got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.fixmatch_threshold > 0.0 && self.fixmatch_threshold < 1.0) {
            return Err(format!(
                "fixmatch_threshold must lie in (0, 1), got {}",
                self.fixmatch_threshold
            ));
        }
        Ok(())
    }

    /// `(weight on L_ins, weight on L_clu)` under the configured convention.
    pub fn weights(&self) -> (f64, f64) {
        match self.convention {
            CoefficientConvention::AlphaInstance => (self.alpha, self.beta),
            CoefficientConvention::AlphaCluster => (self.beta, self.alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_clu: f64,
    pub l_ins: f64,
    pub l_total: f64,
    pub classes_used: usize,
}

/// `exp(cos(u, v) / τ)`.
pub fn similarity_h(u: &[f64], v: &[f64], tau: f64) -> Result<f64, LossError> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for n in [nu, nv] {
        if !(n >= NORM_FLOOR) {
            return Err(LossError::DegenerateVector(n));
        }
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv) / tau).exp())
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn supervised_loss<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>, LossError> {
    let k = logits.value().cols();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(LossError::LabelOutOfRange {
            row,
            label,
            classes: k,
        });
    }
    Ok(logits.log_softmax().pick_per_row(labels)?.mean().scale(-1.0))
}

/// Inter-domain alignment term and the number of classes it averaged over.
#[derive(Debug, Clone, Copy)]
pub struct ClusterAlignment<'t> {
    pub loss: Var<'t>,
    pub classes_used: usize,
}

/// Centroid-level NT-Xent between batch target centroids and the source bank.
///
/// For every class `i` present in the target batch whose source centroid is
/// initialized, the positive is `(Cᵢᵗ, Cᵢˢ)` and the negatives are every other
/// usable centroid of both domains. Unusable classes are skipped both as
/// anchors and as negatives. The bank is a constant on the tape.
pub fn inter_domain_contrastive_loss<'t>(
    target: &BatchCentroids<'t>,
    bank: &CentroidBank,
    tau: f64,
) -> Result<ClusterAlignment<'t>, LossError> {
    let tape = target.centroids.tape();
    let target_rows: Vec<usize> = (0..target.present.len()).filter(|&k| target.present[k]).collect();
    let source_rows: Vec<usize> = (0..bank.num_classes()).filter(|&k| bank.is_initialized(k)).collect();
    let anchors: Vec<usize> = target_rows
        .iter()
        .enumerate()
        .filter(|(_, &k)| bank.is_initialized(k))
        .map(|(pos, _)| pos)
        .collect();
    if anchors.is_empty() {
        return Err(LossError::EmptyAlignment);
    }

    let t = target.centroids.select_rows(&target_rows)?;
    let s = tape.constant(bank.centroids().select_rows(&source_rows)?);
    let (p, q) = (target_rows.len(), source_rows.len());

    let cos_ts = t.cosine_similarity_matrix(&s)?;
    let cos_tt = t.cosine_similarity_matrix(&t)?;

    // positive_mask[a, b] = 1 where source row b is the anchor's own class.
    let mut positive_mask = Tensor::zeros(vec![p, q]);
    for (a, &k) in target_rows.iter().enumerate() {
        if let Some(b) = source_rows.iter().position(|&s| s == k) {
            positive_mask.data_mut()[a * q + b] = 1.0;
        }
    }
    let off_diag = Tensor::identity(p).map(|v| 1.0 - v);

    let denominator = cos_ts
        .scale(1.0 / tau)
        .exp()
        .sum_rows()?
        .add(&cos_tt.scale(1.0 / tau).exp().mul(&tape.constant(off_diag))?.sum_rows()?)?;
    let positive = cos_ts.mul(&tape.constant(positive_mask))?.sum_rows()?.scale(1.0 / tau);
    let per_class = denominator.ln().sub(&positive)?.select_rows(&anchors)?;
    Ok(ClusterAlignment {
        loss: per_class.mean(),
        classes_used: anchors.len(),
    })
}

/// Instance-level NT-Xent between strongly augmented logits (anchors) and
/// original-view logits (positives). The original branch is detached here so
/// no gradient reaches it.
///
/// Denominator for anchor `i`: `Σ_r h(s̃ᵢ, o_r) + Σ_{r≠i} h(s̃ᵢ, s̃_r)`.
pub fn instance_contrastive_loss<'t>(
    strong: &Var<'t>,
    orig: &Var<'t>,
    tau: f64,
) -> Result<Var<'t>, LossError> {
    let b = strong.value().rows();
    if b < 2 {
        return Err(LossError::TooFewRows(b));
    }
    let orig = orig.stop_gradient();
    let tape = strong.tape();
    let cos_so = strong.cosine_similarity_matrix(&orig)?;
    let cos_ss = strong.cosine_similarity_matrix(strong)?;
    let off_diag = Tensor::identity(b).map(|v| 1.0 - v);
    let denominator = cos_so
        .scale(1.0 / tau)
        .exp()
        .sum_rows()?
        .add(&cos_ss.scale(1.0 / tau).exp().mul(&tape.constant(off_diag))?.sum_rows()?)?;
    let positive = cos_so
        .mul(&tape.constant(Tensor::identity(b)))?
        .sum_rows()?
        .scale(1.0 / tau);
    Ok(denominator.ln().sub(&positive)?.mean())
}

/// Mean absolute difference between softmax rows; original branch detached.
pub fn l1_consistency<'t>(strong: &Var<'t>, orig: &Var<'t>) -> Result<Var<'t>, LossError> {
    let p = strong.softmax();
    let q = orig.stop_gradient().softmax();
    Ok(p.sub(&q)?.abs().mean())
}

/// Mean squared difference between softmax rows; original branch detached.
pub fn l2_consistency<'t>(strong: &Var<'t>, orig: &Var<'t>) -> Result<Var<'t>, LossError> {
    let p = strong.softmax();
    let q = orig.stop_gradient().softmax();
    Ok(p.sub(&q)?.square().mean())
}

/// Cross-entropy of the strong branch against hard pseudo-labels from the
/// original branch, averaged over rows whose original max probability is at
/// least `threshold`. Zero when no row qualifies.
pub fn fixmatch_consistency<'t>(
    strong: &Var<'t>,
    orig: &Var<'t>,
    threshold: f64,
) -> Result<Var<'t>, LossError> {
    let pseudo = crate::centroids::pseudo_labels_argmax(&orig.to_tensor());
    let confident: Vec<usize> = (0..pseudo.labels.len())
        .filter(|&i| pseudo.confidence[i] >= threshold)
        .collect();
    if confident.is_empty() {
        return Ok(strong.tape().constant(Tensor::scalar(0.0)));
    }
    let labels: Vec<usize> = confident.iter().map(|&i| pseudo.labels[i]).collect();
    let rows = strong.select_rows(&confident)?;
    supervised_loss(&rows, &labels)
}

/// `L_sup + w_ins·L_ins + w_clu·L_clu` with weights from [`Hyperparams::weights`].
pub fn total_loss<'t>(
    l_sup: &Var<'t>,
    l_clu: &Var<'t>,
    l_ins: &Var<'t>,
    hp: &Hyperparams,
) -> Result<Var<'t>, LossError> {
    let (w_ins, w_clu) = hp.weights();
    Ok(l_sup.add(&l_ins.scale(w_ins))?.add(&l_clu.scale(w_clu))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::centroids::batch_centroids;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const E: f64 = std::f64::consts::E;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn bank_from(c: &Tensor, init: &[bool]) -> CentroidBank {
        let mut bank = CentroidBank::new(c.rows(), c.cols(), 0.5);
        bank.ema_update(c, init).unwrap();
        bank
    }

    /// Explicit double-loop over every kernel term.
    fn instance_oracle(strong: &Tensor, orig: &Tensor, tau: f64) -> f64 {
        let b = strong.rows();
        let mut total = 0.0;
        for i in 0..b {
            let pos = similarity_h(strong.row(i), orig.row(i), tau).unwrap();
            let mut den = 0.0;
            for r in 0..b {
                den += similarity_h(strong.row(i), orig.row(r), tau).unwrap();
            }
            for r in 0..b {
                if r != i {
                    den += similarity_h(strong.row(i), strong.row(r), tau).unwrap();
                }
            }
            total += -(pos / den).ln();
        }
        total / b as f64
    }

    fn cluster_oracle(target: &Tensor, present: &[bool], source: &Tensor, init: &[bool], tau: f64) -> f64 {
        let k = present.len();
        let mut total = 0.0;
        let mut used = 0;
        for i in 0..k {
            if !(present[i] && init[i]) {
                continue;
            }
            let pos = similarity_h(target.row(i), source.row(i), tau).unwrap();
            let mut den = pos;
            for r in 0..k {
                if r == i {
                    continue;
                }
                if init[r] {
                    den += similarity_h(target.row(i), source.row(r), tau).unwrap();
                }
                if present[r] {
                    den += similarity_h(target.row(i), target.row(r), tau).unwrap();
                }
            }
            total += -(pos / den).ln();
            used += 1;
        }
        total / used as f64
    }

    #[test]
    fn kernel_values() {
        assert!((similarity_h(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap() - E).abs() < 1e-12);
        assert_eq!(similarity_h(&[1.0, 0.0], &[0.0, 3.0], 1.0).unwrap(), 1.0);
        let h = similarity_h(&[0.3, -0.4], &[0.3, -0.4], 5.0).unwrap();
        assert!((h - 1.22140276).abs() < 1e-8);
        assert!(matches!(
            similarity_h(&[0.0, 0.0], &[1.0, 0.0], 1.0),
            Err(LossError::DegenerateVector(_))
        ));
    }

    #[test]
    fn supervised_cases() {
        let tape = Tape::new();
        let u = supervised_loss(&tape.constant(Tensor::full(vec![4, 3], 0.2)), &[0, 1, 2, 0]).unwrap();
        assert!((u.item() - 3f64.ln()).abs() < 1e-12);

        let sat = supervised_loss(&tape.constant(rows(&[&[50.0, 0.0, 0.0]])), &[0]).unwrap();
        assert!(sat.item() < 1e-8);

        let l = supervised_loss(&tape.constant(rows(&[&[1.0, 0.0]])), &[0]).unwrap();
        let oracle = -(E / (E + 1.0)).ln();
        assert!((l.item() - oracle).abs() < 1e-12);
        assert!((l.item() - 0.31326169).abs() < 1e-8);

        assert_eq!(
            supervised_loss(&tape.constant(rows(&[&[1.0, 0.0]])), &[2]).unwrap_err(),
            LossError::LabelOutOfRange { row: 0, label: 2, classes: 2 }
        );
    }

    #[test]
    fn cluster_all_equal_gives_log_2k_minus_1() {
        for k in 2..=5 {
            let c = Tensor::full(vec![k, k], 0.7);
            let tape = Tape::new();
            let bc = batch_centroids(&tape.constant(c.clone()), &(0..k).collect::<Vec<_>>(), k).unwrap();
            let out = inter_domain_contrastive_loss(&bc, &bank_from(&c, &vec![true; k]), 5.0).unwrap();
            assert!((out.loss.item() - ((2 * k - 1) as f64).ln()).abs() < 1e-10);
            assert_eq!(out.classes_used, k);
        }
    }

    #[test]
    fn cluster_orthonormal_k2() {
        let c = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let tape = Tape::new();
        let bc = batch_centroids(&tape.constant(c.clone()), &[0, 1], 2).unwrap();
        let out = inter_domain_contrastive_loss(&bc, &bank_from(&c, &[true, true]), 1.0).unwrap();
        let expected = -(E / (E + 2.0)).ln();
        assert!((out.loss.item() - expected).abs() < 1e-12);
        assert!((out.loss.item() - 0.55144471).abs() < 1e-8);
    }

    #[test]
    fn cluster_skips_absent_classes() {
        let tape = Tape::new();
        let feats = rows(&[&[1.0, 0.2, 0.1], &[0.9, 0.0, 0.3]]);
        let bc = batch_centroids(&tape.constant(feats), &[0, 0], 3).unwrap();
        let source = rows(&[&[0.5, 0.5, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let bank = bank_from(&source, &[true, true, true]);
        let out = inter_domain_contrastive_loss(&bc, &bank, 1.0).unwrap();
        assert_eq!(out.classes_used, 1);
        let oracle = cluster_oracle(&bc.centroids.to_tensor(), &bc.present, &source, &[true; 3], 1.0);
        assert!((out.loss.item() - oracle).abs() < 1e-12);

        let partial = bank_from(&source, &[false, true, true]);
        assert_eq!(
            inter_domain_contrastive_loss(&bc, &partial, 1.0).unwrap_err(),
            LossError::EmptyAlignment
        );
    }

    #[test]
    fn instance_cases() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::full(vec![2, 3], 1.1));
        let l = instance_contrastive_loss(&same, &same, 5.0).unwrap();
        assert!((l.item() - 3f64.ln()).abs() < 1e-12);

        let eye = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = instance_contrastive_loss(&eye, &eye, 1.0).unwrap();
        assert!((l.item() - 0.55144471).abs() < 1e-8);

        let one = tape.constant(rows(&[&[1.0, 0.0]]));
        assert_eq!(
            instance_contrastive_loss(&one, &one, 1.0).unwrap_err(),
            LossError::TooFewRows(1)
        );
    }

    #[test]
    fn instance_gradient_never_reaches_original_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let tape = Tape::new();
        let s = tape.param(rand(4, 3));
        let o = tape.param(rand(4, 3));
        let g = instance_contrastive_loss(&s, &o, 0.5).unwrap().backward().unwrap();
        assert!(g.get(&o).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(&s).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn consistency_baselines() {
        let tape = Tape::new();
        let a = tape.constant(rows(&[&[0.3, -1.0], &[2.0, 0.5]]));
        assert_eq!(l1_consistency(&a, &a).unwrap().item(), 0.0);
        assert_eq!(l2_consistency(&a, &a).unwrap().item(), 0.0);

        // Saturated rows: softmax ≈ [1,0] vs [0,1].
        let p = tape.constant(rows(&[&[800.0, 0.0]]));
        let q = tape.constant(rows(&[&[0.0, 800.0]]));
        assert!((l1_consistency(&p, &q).unwrap().item() - 1.0).abs() < 1e-12);
        assert!((l2_consistency(&p, &q).unwrap().item() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let o = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let softmax = |t: &Tensor| {
            let mut out = t.clone();
            for r in 0..t.rows() {
                let z: f64 = t.row(r).iter().map(|v| v.exp()).sum();
                out.row_mut(r).iter_mut().for_each(|v| *v = v.exp() / z);
            }
            out
        };
        let (ps, po) = (softmax(&s), softmax(&o));
        let l1: f64 = ps.data().iter().zip(po.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0;
        let l2: f64 = ps.data().iter().zip(po.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 12.0;
        let (sv, ov) = (tape.constant(s), tape.constant(o));
        assert!((l1_consistency(&sv, &ov).unwrap().item() - l1).abs() < 1e-14);
        assert!((l2_consistency(&sv, &ov).unwrap().item() - l2).abs() < 1e-14);
    }

    #[test]
    fn fixmatch_cases() {
        let tape = Tape::new();
        let flat = tape.constant(Tensor::full(vec![3, 2], 0.0));
        assert_eq!(fixmatch_consistency(&flat, &flat, 0.95).unwrap().item(), 0.0);

        let orig = tape.constant(rows(&[&[9.0, 0.0]]));
        let strong = tape.constant(rows(&[&[60.0, 0.0]]));
        assert!(fixmatch_consistency(&strong, &orig, 0.95).unwrap().item() < 1e-12);

        // Rows 0 and 2 are confident (labels 1 and 0); row 1 is not.
        let orig = rows(&[&[0.0, 5.0], &[0.1, 0.0], &[4.0, 0.0]]);
        let strong = rows(&[&[0.5, -0.5], &[3.0, 1.0], &[0.2, 0.7]]);
        let got = fixmatch_consistency(&tape.constant(strong.clone()), &tape.constant(orig.clone()), 0.9)
            .unwrap()
            .item();
        let mut sum = 0.0;
        let mut n = 0;
        for r in 0..3 {
            let o = orig.row(r);
            let z: f64 = o.iter().map(|v| v.exp()).sum();
            let (label, conf) = if o[1] > o[0] { (1, o[1].exp() / z) } else { (0, o[0].exp() / z) };
            if conf >= 0.9 {
                let s = strong.row(r);
                let zs: f64 = s.iter().map(|v| v.exp()).sum();
                sum += -(s[label].exp() / zs).ln();
                n += 1;
            }
        }
        assert_eq!(n, 2);
        assert!((got - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic_and_conventions() {
        let tape = Tape::new();
        let (s, c, i) = (
            tape.constant(Tensor::scalar(1.0)),
            tape.constant(Tensor::scalar(0.5)),
            tape.constant(Tensor::scalar(0.25)),
        );
        let hp = Hyperparams::default();
        assert_eq!((hp.alpha, hp.beta, hp.tau), (4.0, 1.0, 5.0));
        assert_eq!(total_loss(&s, &c, &i, &hp).unwrap().item(), 2.5);
        let zero = Hyperparams { alpha: 0.0, beta: 0.0, ..hp.clone() };
        assert_eq!(total_loss(&s, &c, &i, &zero).unwrap().item(), 1.0);
        let swapped = Hyperparams { convention: CoefficientConvention::AlphaCluster, ..hp };
        assert_eq!(total_loss(&s, &c, &i, &swapped).unwrap().item(), 1.0 + 4.0 * 0.5 + 0.25);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { rho: 1.5, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { fixmatch_threshold: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn losses_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut rand = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let strong = rand(4, 3);
        let orig = rand(4, 3);
        let r = grad_check(
            |t, p| Ok(instance_contrastive_loss(&p[0], &t.constant(orig.clone()), 1.0).map_err(to_ad)?),
            &[strong.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let feats = rand(6, 3);
        let labels = [0, 1, 2, 0, 1, 1];
        let source = rand(3, 3);
        let bank = bank_from(&source, &[true; 3]);
        let r = grad_check(
            |_, p| {
                let bc = batch_centroids(&p[0], &labels, 3).map_err(|e| match e {
                    crate::centroids::CentroidError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                Ok(inter_domain_contrastive_loss(&bc, &bank, 0.5).map_err(to_ad)?.loss)
            },
            &[feats],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn to_ad(e: LossError) -> AutodiffError {
        match e {
            LossError::Autodiff(a) => a,
            other => panic!("{other}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn nonzero_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-2.0f64..2.0, rows * cols)
                .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
                .prop_filter("rows need non-trivial norm", |t| {
                    (0..t.rows()).all(|r| t.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-4)
                })
        }

        fn instance_case() -> impl Strategy<Value = (Tensor, Tensor, f64)> {
            (2usize..=8, 2usize..=5, prop::sample::select(vec![0.5, 1.0, 5.0])).prop_flat_map(|(b, k, tau)| {
                (nonzero_matrix(b, k), nonzero_matrix(b, k), Just(tau))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn instance_matches_oracle((s, o, tau) in instance_case()) {
                let tape = Tape::new();
                let got = instance_contrastive_loss(&tape.constant(s.clone()), &tape.constant(o.clone()), tau).unwrap();
                prop_assert!((got.item() - instance_oracle(&s, &o, tau)).abs() < 1e-10);
                prop_assert!(got.item() > 0.0);
            }

            #[test]
            fn instance_is_permutation_invariant((s, o, tau) in instance_case(), seed in 0u64..100) {
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..s.rows()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let tape = Tape::new();
                let a = instance_contrastive_loss(&tape.constant(s.clone()), &tape.constant(o.clone()), tau).unwrap();
                let b = instance_contrastive_loss(
                    &tape.constant(s.select_rows(&order).unwrap()),
                    &tape.constant(o.select_rows(&order).unwrap()),
                    tau,
                ).unwrap();
                prop_assert!((a.item() - b.item()).abs() < 1e-12);
            }

            #[test]
            fn instance_is_row_scale_invariant((s, o, tau) in instance_case(), row in 0usize..8, c in prop::sample::select(vec![0.1, 10.0, 3.7])) {
                let row = row % s.rows();
                let mut scaled = s.clone();
                scaled.row_mut(row).iter_mut().for_each(|v| *v *= c);
                let tape = Tape::new();
                let a = instance_contrastive_loss(&tape.constant(s), &tape.constant(o.clone()), tau).unwrap();
                let b = instance_contrastive_loss(&tape.constant(scaled), &tape.constant(o), tau).unwrap();
                prop_assert!((a.item() - b.item()).abs() < 1e-10);
            }

            #[test]
            fn cluster_matches_oracle(
                k in 2usize..=5,
                seed in 0u64..10_000,
                tau in prop::sample::select(vec![0.5, 1.0, 5.0]),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let target = Tensor::matrix(k, k, (0..k * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
                let source = Tensor::matrix(k, k, (0..k * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
                let present: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
                let init: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
                let labels: Vec<usize> = (0..k).filter(|&i| present[i]).collect();
                let feats = target.select_rows(&labels);
                let bank = bank_from(&source, &init);
                let tape = Tape::new();
                let result = match feats {
                    Ok(f) => batch_centroids(&tape.constant(f), &labels, k)
                        .map_err(|_| LossError::EmptyAlignment)
                        .and_then(|bc| inter_domain_contrastive_loss(&bc, &bank, tau)),
                    Err(_) => Err(LossError::EmptyAlignment),
                };
                let usable = (0..k).any(|i| present[i] && init[i]);
                match result {
                    Ok(out) => {
                        prop_assert!(usable);
                        let mut full = Tensor::zeros(vec![k, k]);
                        for &i in &labels {
                            full.row_mut(i).copy_from_slice(target.row(i));
                        }
                        let oracle = cluster_oracle(&full, &present, bank.centroids(), &init, tau);
                        prop_assert!((out.loss.item() - oracle).abs() < 1e-10);
                    }
                    Err(e) => {
                        prop_assert_eq!(e, LossError::EmptyAlignment);
                        prop_assert!(!usable);
                    }
                }
            }

            #[test]
            fn lowering_positive_similarity_raises_instance_loss(seed in 0u64..1000) {
                // Only orig row 0 moves, rotating away from strong row 0 inside a
                // plane orthogonal to row 1, so anchor 1's terms are unchanged.
                let s = rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]]);
                let t = (seed as f64 / 1000.0) * 1.2;
                let close = rows(&[&[t.cos(), t.sin(), 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]]);
                let far = rows(&[&[(t + 0.3).cos(), (t + 0.3).sin(), 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]]);
                let tape = Tape::new();
                let sv = tape.constant(s);
                let a = instance_contrastive_loss(&sv, &tape.constant(close), 1.0).unwrap().item();
                let b = instance_contrastive_loss(&sv, &tape.constant(far), 1.0).unwrap().item();
                prop_assert!(b > a);
            }
        }
    }
}
