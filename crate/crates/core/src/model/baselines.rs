//! Comparison architectures trained with the same stack as the fusion model.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    fan_in_uniform, image_with_token, join, mean_pool_matrix, repeat_matrix, Dropout, EncoderBlock, LayerNorm,
    Linear, Module, MultiHeadAttention, ParamKind,
};
use super::Forward;
use crate::dataset::{Batch, Dims};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    TransformerConcat,
    Perceiver,
    PerceiverioClassic,
    SensorOnly,
    ImageOnly,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::TransformerConcat,
        BaselineKind::Perceiver,
        BaselineKind::PerceiverioClassic,
        BaselineKind::SensorOnly,
        BaselineKind::ImageOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::TransformerConcat => "transformer_concat",
            BaselineKind::Perceiver => "perceiver",
            BaselineKind::PerceiverioClassic => "perceiverio_classic",
            BaselineKind::SensorOnly => "sensor_only",
            BaselineKind::ImageOnly => "image_only",
        }
    }

    pub fn is_multimodal(self) -> bool {
        !matches!(self, BaselineKind::SensorOnly | BaselineKind::ImageOnly)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub latent_dim: usize,
    pub dropout: f64,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Latent array length (perceiver kinds).
    pub num_latents: usize,
    /// Encoder width (unimodal kinds) and decoder width (perceiverio_classic).
    pub hidden_dim: usize,
    pub layernorm_eps: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::TransformerConcat,
            latent_dim: 32,
            dropout: 0.4,
            num_layers: 1,
            num_heads: 2,
            num_latents: 4,
            hidden_dim: 64,
            layernorm_eps: 1e-5,
        }
    }
}

impl BaselineConfig {
    pub fn for_kind(kind: BaselineKind) -> Self {
        Self { kind, ..Self::default() }
    }

    /// Width of the token stream the attention blocks see.
    fn width(&self) -> usize {
        if self.kind.is_multimodal() {
            self.latent_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.width();
        if width == 0 || self.num_heads == 0 || width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{}: width {width} must be a positive multiple of num_heads {}",
                self.kind, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if matches!(self.kind, BaselineKind::Perceiver | BaselineKind::PerceiverioClassic) && self.num_latents == 0 {
            return Err(Error::Config("num_latents must be positive".into()));
        }
        if self.kind == BaselineKind::PerceiverioClassic && self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Fields that `kind` does not read and that differ from the defaults.
    pub fn ignored_fields(&self) -> Vec<&'static str> {
        let d = Self::default();
        let mut out = Vec::new();
        let perceiver = matches!(self.kind, BaselineKind::Perceiver | BaselineKind::PerceiverioClassic);
        if !perceiver && self.num_latents != d.num_latents {
            out.push("num_latents");
        }
        if matches!(self.kind, BaselineKind::TransformerConcat | BaselineKind::Perceiver) && self.hidden_dim != d.hidden_dim {
            out.push("hidden_dim");
        }
        if !self.kind.is_multimodal() && self.latent_dim != d.latent_dim {
            out.push("latent_dim");
        }
        out
    }
}

fn blocks(n: usize, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Vec<EncoderBlock> {
    (0..n).map(|_| EncoderBlock::new(dim, heads, rng)).collect()
}

fn run_blocks(
    blocks: &[EncoderBlock],
    tape: &mut Tape,
    mut x: Var,
    batch: usize,
    tokens: usize,
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, x, batch, tokens, eps, dropout)?;
    }
    Ok(x)
}

fn visit_blocks<'a>(blocks: &'a [EncoderBlock], prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
    for (i, b) in blocks.iter().enumerate() {
        b.visit(&join(prefix, &format!("blocks.{i}")), f);
    }
}

fn visit_blocks_mut(blocks: &mut [EncoderBlock], prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
    for (i, b) in blocks.iter_mut().enumerate() {
        b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
    }
}

/// `[s; i] → linear → encoder blocks → classifier`, one token per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConcat {
    pub input_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub classifier: Linear,
    pub missing_image: Tensor,
}

/// Learned latents cross-attending to one input token, refined by
/// self-attention. Shared by the perceiver baselines.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEncoder {
    pub input_proj: Linear,
    pub latents: Tensor,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
}

impl LatentEncoder {
    fn new(input: usize, cfg: &BaselineConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.latent_dim;
        Self {
            input_proj: Linear::new(input, d, true, rng),
            latents: fan_in_uniform(cfg.num_latents, d, d, rng),
            cross_attention: MultiHeadAttention::new(d, cfg.num_heads, true, true, rng),
            cross_norm: LayerNorm::new(d),
            blocks: blocks(cfg.num_layers, d, cfg.num_heads, rng),
        }
    }

    /// Returns the `batch·num_latents × latent_dim` latent array.
    fn forward(&self, tape: &mut Tape, input: Var, cfg: &BaselineConfig, dropout: &mut Dropout<'_>) -> Result<Var> {
        let batch = tape.value(input).rows();
        let n = cfg.num_latents;
        let x = self.input_proj.forward(tape, input)?;
        let x = dropout.apply(tape, x)?;
        let rep = tape.constant(repeat_matrix(batch, n));
        let lat = tape.param(&self.latents);
        let lat = tape.matmul(rep, lat)?;
        let attended = self.cross_attention.forward(tape, lat, x, batch, n, 1)?;
        let attended = dropout.apply(tape, attended)?;
        let lat = tape.add(lat, attended)?;
        let lat = self.cross_norm.forward(tape, lat, cfg.layernorm_eps)?;
        run_blocks(&self.blocks, tape, lat, batch, n, cfg.layernorm_eps, dropout)
    }
}

impl Module for LatentEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.input_proj.visit(&join(prefix, "input_proj"), f);
        f(join(prefix, "latents"), &self.latents, ParamKind::Embedding);
        self.cross_attention.visit(&join(prefix, "cross_attention"), f);
        self.cross_norm.visit(&join(prefix, "cross_norm"), f);
        visit_blocks(&self.blocks, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.input_proj.visit_mut(&join(prefix, "input_proj"), f);
        f(join(prefix, "latents"), &mut self.latents, ParamKind::Embedding);
        self.cross_attention.visit_mut(&join(prefix, "cross_attention"), f);
        self.cross_norm.visit_mut(&join(prefix, "cross_norm"), f);
        visit_blocks_mut(&mut self.blocks, prefix, f);
    }
}

/// Latents over `[s; i]`, mean-pooled before classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Perceiver {
    pub encoder: LatentEncoder,
    pub classifier: Linear,
    pub missing_image: Tensor,
}

/// One latent encoder per modality; flattened latents are concatenated and
/// decoded by an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceiverIoClassic {
    pub sensor_encoder: LatentEncoder,
    pub image_encoder: LatentEncoder,
    pub decoder: Linear,
    pub classifier: Linear,
    pub missing_image: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Sensor,
    Image,
}

/// Single-modality ablation: `linear → ReLU → dropout → LayerNorm →
/// encoder blocks → classifier`. The other modality is never read.
#[derive(Clone, Debug, PartialEq)]
pub struct Unimodal {
    pub modality: Modality,
    pub input_proj: Linear,
    pub input_norm: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub classifier: Linear,
    /// Present only for the image modality.
    pub missing_image: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineNet {
    TransformerConcat(TransformerConcat),
    Perceiver(Perceiver),
    PerceiverIoClassic(PerceiverIoClassic),
    Unimodal(Unimodal),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub net: BaselineNet,
}

impl BaselineModel {
    pub fn new(config: BaselineConfig, dims: &Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let rng = &mut rng;
        let c = &config;
        let k = dims.classes;
        let concat = dims.sensor + dims.image;
        let net = match c.kind {
            BaselineKind::TransformerConcat => BaselineNet::TransformerConcat(TransformerConcat {
                input_proj: Linear::new(concat, c.latent_dim, true, rng),
                blocks: blocks(c.num_layers, c.latent_dim, c.num_heads, rng),
                classifier: Linear::new(c.latent_dim, k, true, rng),
                missing_image: Tensor::zeros(1, dims.image),
            }),
            BaselineKind::Perceiver => BaselineNet::Perceiver(Perceiver {
                encoder: LatentEncoder::new(concat, c, rng),
                classifier: Linear::new(c.latent_dim, k, true, rng),
                missing_image: Tensor::zeros(1, dims.image),
            }),
            BaselineKind::PerceiverioClassic => {
                let flat = c.num_latents * c.latent_dim;
                BaselineNet::PerceiverIoClassic(PerceiverIoClassic {
                    sensor_encoder: LatentEncoder::new(dims.sensor, c, rng),
                    image_encoder: LatentEncoder::new(dims.image, c, rng),
                    decoder: Linear::new(2 * flat, c.hidden_dim, true, rng),
                    classifier: Linear::new(c.hidden_dim, k, true, rng),
                    missing_image: Tensor::zeros(1, dims.image),
                })
            }
            BaselineKind::SensorOnly | BaselineKind::ImageOnly => {
                let (modality, input) = if c.kind == BaselineKind::SensorOnly {
                    (Modality::Sensor, dims.sensor)
                } else {
                    (Modality::Image, dims.image)
                };
                BaselineNet::Unimodal(Unimodal {
                    modality,
                    input_proj: Linear::new(input, c.hidden_dim, true, rng),
                    input_norm: LayerNorm::new(c.hidden_dim),
                    blocks: blocks(c.num_layers, c.hidden_dim, c.num_heads, rng),
                    classifier: Linear::new(c.hidden_dim, k, true, rng),
                    missing_image: (modality == Modality::Image).then(|| Tensor::zeros(1, dims.image)),
                })
            }
        };
        Ok(Self { config, net })
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, dropout: &mut Dropout<'_>) -> Result<Forward> {
        let c = &self.config;
        let eps = c.layernorm_eps;
        let mut dropout = dropout.with_p(c.dropout);
        let dropout = &mut dropout;
        let n = batch.len();
        let logits = match &self.net {
            BaselineNet::TransformerConcat(m) => {
                let s = tape.constant(batch.sensor.clone());
                let i = image_with_token(tape, &batch.image, &batch.image_present, &m.missing_image)?;
                let x = tape.concat_cols(&[s, i])?;
                let x = m.input_proj.forward(tape, x)?;
                let x = dropout.apply(tape, x)?;
                let x = run_blocks(&m.blocks, tape, x, n, 1, eps, dropout)?;
                m.classifier.forward(tape, x)?
            }
            BaselineNet::Perceiver(m) => {
                let s = tape.constant(batch.sensor.clone());
                let i = image_with_token(tape, &batch.image, &batch.image_present, &m.missing_image)?;
                let x = tape.concat_cols(&[s, i])?;
                let lat = m.encoder.forward(tape, x, c, dropout)?;
                let pool = tape.constant(mean_pool_matrix(n, c.num_latents));
                let pooled = tape.matmul(pool, lat)?;
                m.classifier.forward(tape, pooled)?
            }
            BaselineNet::PerceiverIoClassic(m) => {
                let flat = c.num_latents * c.latent_dim;
                let s = tape.constant(batch.sensor.clone());
                let i = image_with_token(tape, &batch.image, &batch.image_present, &m.missing_image)?;
                let ls = m.sensor_encoder.forward(tape, s, c, dropout)?;
                let li = m.image_encoder.forward(tape, i, c, dropout)?;
                let ls = tape.reshape(ls, n, flat)?;
                let li = tape.reshape(li, n, flat)?;
                let z = tape.concat_cols(&[ls, li])?;
                let h = m.decoder.forward(tape, z)?;
                let h = tape.relu(h);
                let h = dropout.apply(tape, h)?;
                m.classifier.forward(tape, h)?
            }
            BaselineNet::Unimodal(m) => {
                let x = match (m.modality, &m.missing_image) {
                    (Modality::Image, Some(token)) => {
                        image_with_token(tape, &batch.image, &batch.image_present, token)?
                    }
                    _ => tape.constant(batch.sensor.clone()),
                };
                let h = m.input_proj.forward(tape, x)?;
                let h = tape.relu(h);
                let h = dropout.apply(tape, h)?;
                let h = m.input_norm.forward(tape, h, eps)?;
                let h = run_blocks(&m.blocks, tape, h, n, 1, eps, dropout)?;
                m.classifier.forward(tape, h)?
            }
        };
        Ok(Forward { logits, latents: None })
    }
}

impl Module for BaselineModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        match &self.net {
            BaselineNet::TransformerConcat(m) => {
                m.input_proj.visit(&join(prefix, "input_proj"), f);
                visit_blocks(&m.blocks, prefix, f);
                m.classifier.visit(&join(prefix, "classifier"), f);
                f(join(prefix, "missing_image"), &m.missing_image, ParamKind::Embedding);
            }
            BaselineNet::Perceiver(m) => {
                m.encoder.visit(&join(prefix, "encoder"), f);
                m.classifier.visit(&join(prefix, "classifier"), f);
                f(join(prefix, "missing_image"), &m.missing_image, ParamKind::Embedding);
            }
            BaselineNet::PerceiverIoClassic(m) => {
                m.sensor_encoder.visit(&join(prefix, "sensor_encoder"), f);
                m.image_encoder.visit(&join(prefix, "image_encoder"), f);
                m.decoder.visit(&join(prefix, "decoder"), f);
                m.classifier.visit(&join(prefix, "classifier"), f);
                f(join(prefix, "missing_image"), &m.missing_image, ParamKind::Embedding);
            }
            BaselineNet::Unimodal(m) => {
                m.input_proj.visit(&join(prefix, "input_proj"), f);
                m.input_norm.visit(&join(prefix, "input_norm"), f);
                visit_blocks(&m.blocks, prefix, f);
                m.classifier.visit(&join(prefix, "classifier"), f);
                if let Some(t) = &m.missing_image {
                    f(join(prefix, "missing_image"), t, ParamKind::Embedding);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        match &mut self.net {
            BaselineNet::TransformerConcat(m) => {
                m.input_proj.visit_mut(&join(prefix, "input_proj"), f);
                visit_blocks_mut(&mut m.blocks, prefix, f);
                m.classifier.visit_mut(&join(prefix, "classifier"), f);
                f(join(prefix, "missing_image"), &mut m.missing_image, ParamKind::Embedding);
            }
            BaselineNet::Perceiver(m) => {
                m.encoder.visit_mut(&join(prefix, "encoder"), f);
                m.classifier.visit_mut(&join(prefix, "classifier"), f);
                f(join(prefix, "missing_image"), &mut m.missing_image, ParamKind::Embedding);
            }
            BaselineNet::PerceiverIoClassic(m) => {
                m.sensor_encoder.visit_mut(&join(prefix, "sensor_encoder"), f);
                m.image_encoder.visit_mut(&join(prefix, "image_encoder"), f);
                m.decoder.visit_mut(&join(prefix, "decoder"), f);
                m.classifier.visit_mut(&join(prefix, "classifier"), f);
                f(join(prefix, "missing_image"), &mut m.missing_image, ParamKind::Embedding);
            }
            BaselineNet::Unimodal(m) => {
                m.input_proj.visit_mut(&join(prefix, "input_proj"), f);
                m.input_norm.visit_mut(&join(prefix, "input_norm"), f);
                visit_blocks_mut(&mut m.blocks, prefix, f);
                m.classifier.visit_mut(&join(prefix, "classifier"), f);
                if let Some(t) = &mut m.missing_image {
                    f(join(prefix, "missing_image"), t, ParamKind::Embedding);
                }
            }
        }
    }
}
