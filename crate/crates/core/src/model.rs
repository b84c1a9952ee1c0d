//! Feature extractor `G` (a relu MLP) and linear task classifier `F`.
//!
//! The classifier's raw logits double as the contrastive feature space, so
//! there is no separate projection head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![64, 64],
            num_classes,
            init_scale: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be a non-empty list of positive widths");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Closed-form parameter count: Σ (fan_in·fan_out + fan_out) over all layers.
    pub fn parameter_count(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Affine layer `x·W + b` with `W` stored `[fan_in × fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = (0..fan_in * fan_out)
            .map(|_| {
                if scale > 0.0 {
                    rng.random_range(-scale..=scale)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, weight).expect("positive dims"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
}

impl Model {
    /// Uniform `[-init_scale, init_scale]` weights, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fan_in = config.input_dim;
        let mut extractor = Vec::with_capacity(config.hidden_dims.len());
        for &width in &config.hidden_dims {
            extractor.push(Linear::init(fan_in, width, config.init_scale, &mut rng));
            fan_in = width;
        }
        let classifier = Linear::init(fan_in, config.num_classes, config.init_scale, &mut rng);
        Ok(Self {
            extractor,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].fan_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Parameters in a fixed order: extractor layers (weight, bias), then classifier.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Stable names matching the order of [`Model::parameters`].
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.extractor.len() {
            names.push(format!("extractor.{i}.weight"));
            names.push(format!("extractor.{i}.bias"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    /// Registers every parameter on `tape` as trainable.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        self.register(tape, true)
    }

    /// Registers the parameters as constants (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        self.register(tape, false)
    }

    fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundModel {
            extractor: self
                .extractor
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias)))
                .collect(),
            classifier: (put(&self.classifier.weight), put(&self.classifier.bias)),
        }
    }

    /// Logits for a batch, without gradient bookkeeping.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let out = bound.forward(&tape.constant(x.clone()))?;
        Ok(out.to_tensor())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

/// Model parameters registered on a specific tape.
pub struct BoundModel<'t> {
    extractor: Vec<(Var<'t>, Var<'t>)>,
    classifier: (Var<'t>, Var<'t>),
}

impl<'t> BoundModel<'t> {
    /// Rebuilds a bound model from handles in [`Model::parameters`] order.
    pub fn from_params(params: &[Var<'t>]) -> Result<Self, ModelError> {
        if params.len() < 4 || params.len() % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "expected an even number (≥ 4) of parameter handles, got {}",
                params.len()
            )));
        }
        let mut pairs: Vec<(Var<'t>, Var<'t>)> = params.chunks(2).map(|c| (c[0], c[1])).collect();
        let classifier = pairs.pop().expect("non-empty");
        Ok(Self {
            extractor: pairs,
            classifier,
        })
    }

    /// `G(x)`: alternating affine and relu, ending on the last hidden activation.
    pub fn extract_features(&self, x: &Var<'t>) -> Result<Var<'t>, ModelError> {
        let mut h = *x;
        for (w, b) in &self.extractor {
            h = h.matmul(w)?.add_row_vector(b)?.relu();
        }
        Ok(h)
    }

    /// `F(features)`: raw logits, no softmax.
    pub fn classify(&self, features: &Var<'t>) -> Result<Var<'t>, ModelError> {
        let (w, b) = &self.classifier;
        Ok(features.matmul(w)?.add_row_vector(b)?)
    }

    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>, ModelError> {
        self.classify(&self.extract_features(x)?)
    }

    /// Handles in the same order as [`Model::parameters`].
    pub fn params(&self) -> Vec<Var<'t>> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

/// Per-row argmax; ties go to the smallest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
