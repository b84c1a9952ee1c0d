//! The training loop: batch sampling, loss assembly, SGD with momentum under a
//! cosine schedule, and best-validation model selection.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::centroids::{
    assign_nearest, batch_centroid_values, batch_centroids, pseudo_labels_argmax, pseudo_labels_kmeans,
    CentroidBank, CentroidError,
};
use crate::data::{AugmentationPolicy, BatchConfig, DataError, LabeledMode, LabeledSet, MinibatchSampler, SsdaSplit};
use crate::losses::{
    fixmatch_consistency, inter_domain_contrastive_loss, instance_contrastive_loss, l1_consistency, l2_consistency,
    supervised_loss, total_loss, CoefficientConvention, Hyperparams, LossBreakdown, LossError,
};
use crate::model::{Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for {param} at step {step}")]
    NonFiniteGradient { step: usize, param: String },
    #[error("run diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        history: Box<TrainHistory>,
    },
    #[error("cannot evaluate on an empty set")]
    EmptyEvaluation,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Centroid(#[from] CentroidError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Loss(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CLDA")]
    Clda,
    #[serde(rename = "S+T")]
    SourceTarget,
    #[serde(rename = "CLDA-no-instance")]
    CldaNoInstance,
    #[serde(rename = "CLDA-no-interdomain")]
    CldaNoInterdomain,
    #[serde(rename = "L1")]
    L1,
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "FIXMATCH")]
    FixMatch,
    #[serde(rename = "CLDA-KMEANS")]
    CldaKmeans,
}

/// The term scaled by the instance weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceTerm {
    None,
    Contrastive,
    L1,
    L2,
    FixMatch,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Clda,
        Variant::SourceTarget,
        Variant::CldaNoInstance,
        Variant::CldaNoInterdomain,
        Variant::L1,
        Variant::L2,
        Variant::FixMatch,
        Variant::CldaKmeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clda => "CLDA",
            Variant::SourceTarget => "S+T",
            Variant::CldaNoInstance => "CLDA-no-instance",
            Variant::CldaNoInterdomain => "CLDA-no-interdomain",
            Variant::L1 => "L1",
            Variant::L2 => "L2",
            Variant::FixMatch => "FIXMATCH",
            Variant::CldaKmeans => "CLDA-KMEANS",
        }
    }

    pub fn instance_term(self) -> InstanceTerm {
        match self {
            Variant::Clda | Variant::CldaNoInterdomain | Variant::CldaKmeans => InstanceTerm::Contrastive,
            Variant::L1 => InstanceTerm::L1,
            Variant::L2 => InstanceTerm::L2,
            Variant::FixMatch => InstanceTerm::FixMatch,
            Variant::SourceTarget | Variant::CldaNoInstance => InstanceTerm::None,
        }
    }

    /// Whether the inter-domain term is active. The consistency baselines
    /// drop it unless `consistency_keeps_clu` is set.
    pub fn uses_cluster_term(self, consistency_keeps_clu: bool) -> bool {
        match self {
            Variant::Clda | Variant::CldaNoInstance | Variant::CldaKmeans => true,
            Variant::L1 | Variant::L2 | Variant::FixMatch => consistency_keeps_clu,
            Variant::SourceTarget | Variant::CldaNoInterdomain => false,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelStrategy {
    #[default]
    Argmax,
    Kmeans,
}

/// Every knob of one training run. Hyperparameters sit flat so config files
/// can write `train.alpha = 4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub rho: f64,
    pub fixmatch_threshold: f64,
    pub convention: CoefficientConvention,
    pub batch_size: usize,
    pub mu: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aug_level: u8,
    pub labeled_mode: LabeledMode,
    /// Overridden to `kmeans` by the CLDA-KMEANS variant.
    pub pseudo_labels: PseudoLabelStrategy,
    pub kmeans_every: usize,
    pub kmeans_iters: usize,
    /// Keep the inter-domain term in the L1 / L2 / FIXMATCH baselines.
    pub consistency_keeps_clu: bool,
    pub hidden_dims: Vec<usize>,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        Self {
            variant: Variant::Clda,
            alpha: hp.alpha,
            beta: hp.beta,
            tau: hp.tau,
            rho: hp.rho,
            fixmatch_threshold: hp.fixmatch_threshold,
            convention: hp.convention,
            batch_size: 32,
            mu: 4,
            total_steps: 2000,
            eval_every: 100,
            seed: 0,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            aug_level: 2,
            labeled_mode: LabeledMode::Half,
            pseudo_labels: PseudoLabelStrategy::Argmax,
            kmeans_every: 50,
            kmeans_iters: 10,
            consistency_keeps_clu: false,
            hidden_dims: vec![64, 64],
            init_scale: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            rho: self.rho,
            fixmatch_threshold: self.fixmatch_threshold,
            convention: self.convention,
        }
    }

    pub fn strategy(&self) -> PseudoLabelStrategy {
        if self.variant == Variant::CldaKmeans {
            PseudoLabelStrategy::Kmeans
        } else {
            self.pseudo_labels
        }
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.batch_size,
            mu: self.mu,
            labeled_mode: self.labeled_mode,
            policy: AugmentationPolicy::level(self.aug_level),
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.hyperparams().validate().map_err(TrainError::InvalidConfig)?;
        self.batch_config().validate()?;
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.eval_every == 0 || self.eval_every > self.total_steps {
            return bad(format!("eval_every must lie in [1, total_steps], got {}", self.eval_every));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.aug_level > AugmentationPolicy::MAX_LEVEL {
            return bad(format!("aug_level must be at most {}", AugmentationPolicy::MAX_LEVEL));
        }
        if self.kmeans_every == 0 {
            return bad("kmeans_every must be positive".into());
        }
        if self.variant.instance_term() == InstanceTerm::Contrastive && self.mu * self.batch_size < 2 {
            return bad("instance contrastive term needs at least 2 unlabeled rows".into());
        }
        Ok(())
    }
}

/// `base_lr · ½(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
}

impl OptimizerState {
    pub fn new(model: &Model, base_lr: f64, momentum: f64, weight_decay: f64, total_steps: usize) -> Self {
        Self {
            velocity: model.parameters().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            base_lr,
            momentum,
            weight_decay,
            total_steps,
        }
    }
}

/// `g' = g + wd·w; v ← m·v + g'; w ← w − lr·v`. Leaves the model untouched
/// when any gradient entry is non-finite.
pub fn sgd_momentum_step(
    model: &mut Model,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    step: usize,
) -> Result<(), TrainError> {
    let names = model.parameter_names();
    if grads.len() != names.len() {
        return Err(TrainError::InvalidConfig(format!(
            "expected {} gradients, got {}",
            names.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient {
            step,
            param: names[i].clone(),
        });
    }
    for ((w, g), v) in model.parameters_mut().into_iter().zip(grads).zip(&mut state.velocity) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = gi + state.weight_decay * *wi;
            *vi = state.momentum * *vi + g;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Fraction of rows whose prediction matches the label.
pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<f64, TrainError> {
    let x = set.to_tensor().ok_or(TrainError::EmptyEvaluation)?;
    let pred = model.predict(&x)?;
    let correct = pred.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Highest validation accuracy; the earliest evaluation wins ties.
    pub best: Option<EvalRecord>,
}

impl TrainHistory {
    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// `step,lr,l_sup,l_clu,l_ins,l_total,classes_used`, full precision.
    pub fn loss_trace_csv(&self) -> String {
        let mut out = String::from("step,lr,l_sup,l_clu,l_ins,l_total,classes_used\n");
        for r in &self.steps {
            let l = &r.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.lr, l.l_sup, l.l_clu, l.l_ins, l.l_total, l.classes_used
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub model: Model,
    /// Bank at the best validation evaluation.
    pub bank: CentroidBank,
    pub final_model: Model,
    pub history: TrainHistory,
}

/// Cached centres from the last k-means refresh.
struct KmeansState {
    centres: Option<Tensor>,
}

/// Pseudo-labels for the unlabeled batch, from the original view only.
fn pseudo_labels(
    config: &TrainConfig,
    step: usize,
    orig: &Tensor,
    bank: &CentroidBank,
    kmeans: &mut KmeansState,
) -> Result<Vec<usize>, TrainError> {
    if config.strategy() == PseudoLabelStrategy::Argmax {
        return Ok(pseudo_labels_argmax(orig).labels);
    }
    let refresh = step % config.kmeans_every == 0 || kmeans.centres.is_none();
    if refresh && bank.fully_initialized() {
        let run = pseudo_labels_kmeans(orig, bank, config.kmeans_iters)?;
        kmeans.centres = Some(run.centroids);
        return Ok(run.pseudo.labels);
    }
    Ok(match &kmeans.centres {
        Some(c) => assign_nearest(orig, c),
        None => pseudo_labels_argmax(orig).labels,
    })
}

/// Runs `config.total_steps` optimizer steps on `split`.
pub fn train(config: &TrainConfig, split: &SsdaSplit) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if split.target_val.is_empty() || split.target_test.is_empty() {
        return Err(TrainError::InvalidConfig(
            "validation and test sets must be non-empty".into(),
        ));
    }
    let k = split.num_classes;
    let hp = config.hyperparams();
    let mut model = Model::init(&config.model_config(split.dim(), k))?;
    let mut bank = CentroidBank::new(k, k, hp.rho);
    let mut opt = OptimizerState::new(&model, config.lr, config.momentum, config.weight_decay, config.total_steps);
    let mut sampler = MinibatchSampler::new(split, config.batch_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(10);

    let instance = config.variant.instance_term();
    let use_clu = config.variant.uses_cluster_term(config.consistency_keeps_clu);
    let mut kmeans = KmeansState { centres: None };
    let mut history = TrainHistory::default();
    let mut best_model = model.clone();
    let mut best_bank = bank.clone();

    for step in 0..config.total_steps {
        let lr = cosine_lr(step, config.total_steps, config.lr);
        // Sampled for every variant so the stream stays aligned across them.
        let batch = sampler.sample(split, &mut rng);

        let tape = Tape::new();
        let net = model.bind(&tape);
        let n_src = batch.source_y.len();
        let labeled_x = tape.constant(batch.source_x.clone()).concat_rows(&tape.constant(batch.target_x.clone()))?;
        let labeled_logits = net.forward(&labeled_x)?;
        let labels: Vec<usize> = batch.source_y.iter().chain(&batch.target_y).copied().collect();
        let l_sup = supervised_loss(&labeled_logits, &labels)?;

        let zero = tape.constant(Tensor::scalar(0.0));
        let mut l_ins = zero;
        let mut l_clu = zero;
        let mut classes_used = 0;

        if instance != InstanceTerm::None || use_clu {
            let orig = net.forward(&tape.constant(batch.unlabeled_orig.clone()))?;
            if instance != InstanceTerm::None {
                let strong = net.forward(&tape.constant(batch.unlabeled_strong.clone()))?;
                l_ins = match instance {
                    InstanceTerm::Contrastive => instance_contrastive_loss(&strong, &orig, hp.tau)?,
                    InstanceTerm::L1 => l1_consistency(&strong, &orig)?,
                    InstanceTerm::L2 => l2_consistency(&strong, &orig)?,
                    InstanceTerm::FixMatch => fixmatch_consistency(&strong, &orig, hp.fixmatch_threshold)?,
                    InstanceTerm::None => unreachable!(),
                };
            }
            let orig_values = orig.to_tensor();
            let pseudo = pseudo_labels(config, step, &orig_values, &bank, &mut kmeans)?;
            let target_centroids = batch_centroids(&orig, &pseudo, k)?;

            let source_logits = labeled_logits.value().select_rows(&(0..n_src).collect::<Vec<_>>())?;
            let (src_centroids, present) = batch_centroid_values(&source_logits, &batch.source_y, k)?;
            bank.ema_update(&src_centroids, &present)?;

            if use_clu {
                match inter_domain_contrastive_loss(&target_centroids, &bank, hp.tau) {
                    Ok(a) => {
                        l_clu = a.loss;
                        classes_used = a.classes_used;
                    }
                    Err(LossError::EmptyAlignment) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        } else {
            let source_logits = labeled_logits.value().select_rows(&(0..n_src).collect::<Vec<_>>())?;
            let (src_centroids, present) = batch_centroid_values(&source_logits, &batch.source_y, k)?;
            bank.ema_update(&src_centroids, &present)?;
        }

        let total = total_loss(&l_sup, &l_clu, &l_ins, &hp)?;
        let losses = LossBreakdown {
            l_sup: l_sup.item(),
            l_clu: l_clu.item(),
            l_ins: l_ins.item(),
            l_total: total.item(),
            classes_used,
        };
        history.steps.push(StepRecord { step, lr, losses });
        if !losses.l_total.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: format!("non-finite loss {}", losses.l_total),
                history: Box::new(history),
            });
        }

        let grads = total.backward()?;
        let grads: Vec<Tensor> = net
            .params()
            .iter()
            .map(|p| grads.get(p).cloned().expect("trainable parameter"))
            .collect();
        drop(tape);
        if let Err(e) = sgd_momentum_step(&mut model, &grads, &mut opt, lr, step) {
            return Err(TrainError::Diverged {
                step,
                reason: e.to_string(),
                history: Box::new(history),
            });
        }

        let done = step + 1;
        if done % config.eval_every == 0 {
            let record = EvalRecord {
                step: done,
                val_accuracy: evaluate(&model, &split.target_val)?,
                test_accuracy: evaluate(&model, &split.target_test)?,
            };
            history.evals.push(record);
            if history.best.is_none_or(|b| record.val_accuracy > b.val_accuracy) {
                history.best = Some(record);
                best_model = model.clone();
                best_bank = bank.clone();
            }
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        bank: best_bank,
        final_model: model,
        history,
    })
}
