//! The fusion classifier, the comparison baselines and their checkpoints.

pub mod baselines;
pub mod checkpoint;
pub mod fusion;
pub mod layers;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use baselines::{BaselineConfig, BaselineKind, BaselineModel};
pub use checkpoint::Checkpoint;
pub use fusion::{FusionConfig, FusionModel, ModelParams};
pub use layers::{Dropout, Module, ParamKind};

use crate::dataset::{Batch, Dims};
use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Output of a forward pass. `latents` holds the two pre-fusion encoder
/// outputs when the architecture has them.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub latents: Option<(Var, Var)>,
}

/// Serializable architecture choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelSpec {
    Fusion(FusionConfig),
    Baseline(BaselineConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Fusion(FusionConfig::default())
    }
}

impl ModelSpec {
    pub fn baseline(kind: BaselineKind) -> Self {
        ModelSpec::Baseline(BaselineConfig::for_kind(kind))
    }

    /// Short identifier used in reports: `ours` or the baseline kind.
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Fusion(_) => "ours",
            ModelSpec::Baseline(b) => b.kind.name(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Fusion(c) => c.validate(),
            ModelSpec::Baseline(c) => c.validate(),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Fusion(FusionModel),
    Baseline(BaselineModel),
}

/// A built model: architecture plus parameters for fixed input dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub net: Net,
}

impl Model {
    pub fn build(spec: &ModelSpec, dims: Dims, seed: u64) -> Result<Self> {
        let net = match spec {
            ModelSpec::Fusion(c) => Net::Fusion(FusionModel::new(c.clone(), &dims, seed)?),
            ModelSpec::Baseline(c) => Net::Baseline(BaselineModel::new(c.clone(), &dims, seed)?),
        };
        Ok(Self { dims, net })
    }

    pub fn spec(&self) -> ModelSpec {
        match &self.net {
            Net::Fusion(m) => ModelSpec::Fusion(m.config.clone()),
            Net::Baseline(m) => ModelSpec::Baseline(m.config.clone()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, dropout: &mut Dropout<'_>) -> Result<Forward> {
        let (s, i) = (batch.sensor.cols(), batch.image.cols());
        if s != self.dims.sensor || i != self.dims.image {
            return Err(Error::Shape(format!(
                "batch has sensor/image widths {s}/{i}, model expects {}/{}",
                self.dims.sensor, self.dims.image
            )));
        }
        match &self.net {
            Net::Fusion(m) => m.forward(tape, batch, dropout),
            Net::Baseline(m) => m.forward(tape, batch, dropout),
        }
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict_proba(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &mut Dropout::eval())?;
        Ok(softmax_rows(tape.value(out.logits)))
    }

    /// Gradients aligned with `visit` order; parameters the loss did not
    /// reach get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t, _| {
            out.push(grads.param(t).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())));
        });
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _, _| out.push(name));
        out
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        match &self.net {
            Net::Fusion(m) => m.visit(prefix, f),
            Net::Baseline(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        match &mut self.net {
            Net::Fusion(m) => m.visit_mut(prefix, f),
            Net::Baseline(m) => m.visit_mut(prefix, f),
        }
    }
}
