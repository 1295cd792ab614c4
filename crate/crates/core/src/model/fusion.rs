//! Dual linear encoders, sensor-to-image cross-attention, FFN and MLP head.
//!
//! Each sample contributes a single sensor token (the query) and a single
//! image token (key and value). With one key the attention weights are
//! identically 1, so the attended value is the projected image token; the
//! multi-head machinery is kept so the block matches the general form.

use serde::{Deserialize, Serialize};

use super::layers::{image_with_token, join, Dropout, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, ParamKind};
use super::Forward;
use crate::dataset::{Batch, Dims};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_latent: usize,
    pub num_heads: usize,
    pub head_hidden: usize,
    /// Encoder dropout probability.
    pub dropout: f64,
    pub layernorm_eps: f64,
    /// Output projection after the attention heads.
    pub attention_output_proj: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_latent: 64,
            num_heads: 2,
            head_hidden: 64,
            dropout: 0.4,
            layernorm_eps: 1e-5,
            attention_output_proj: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_latent == 0 || self.num_heads == 0 || self.d_latent % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_latent ({}) must be a positive multiple of num_heads ({})",
                self.d_latent, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub sensor_proj: Linear,
    pub image_proj: Linear,
    pub sensor_norm: LayerNorm,
    pub image_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub attention: MultiHeadAttention,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub head: HeadParams,
    /// Stand-in image features (`1 × d_image`) for samples without an image.
    pub missing_image: Tensor,
}

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases, unit layer-norm gains and
    /// a zero missing-image token.
    pub fn init(cfg: &FusionConfig, dims: &Dims, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::Init);
        let d = cfg.d_latent;
        let encoder = EncoderParams {
            sensor_proj: Linear::new(dims.sensor, d, true, &mut rng),
            image_proj: Linear::new(dims.image, d, true, &mut rng),
            sensor_norm: LayerNorm::new(d),
            image_norm: LayerNorm::new(d),
        };
        let fusion = FusionParams {
            attention: MultiHeadAttention::new(d, cfg.num_heads, false, cfg.attention_output_proj, &mut rng),
            ffn: FeedForward::new(d, 2, false, &mut rng),
        };
        let head = HeadParams {
            hidden: Linear::new(d, cfg.head_hidden, false, &mut rng),
            out: Linear::new(cfg.head_hidden, dims.classes, false, &mut rng),
        };
        Self { encoder, fusion, head, missing_image: Tensor::zeros(1, dims.image) }
    }
}

impl Module for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        let e = &self.encoder;
        e.sensor_proj.visit(&join(prefix, "encoder.sensor_proj"), f);
        e.image_proj.visit(&join(prefix, "encoder.image_proj"), f);
        e.sensor_norm.visit(&join(prefix, "encoder.sensor_norm"), f);
        e.image_norm.visit(&join(prefix, "encoder.image_norm"), f);
        self.fusion.attention.visit(&join(prefix, "fusion.attention"), f);
        self.fusion.ffn.visit(&join(prefix, "fusion.ffn"), f);
        self.head.hidden.visit(&join(prefix, "head.hidden"), f);
        self.head.out.visit(&join(prefix, "head.out"), f);
        f(join(prefix, "missing_image"), &self.missing_image, ParamKind::Embedding);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        let e = &mut self.encoder;
        e.sensor_proj.visit_mut(&join(prefix, "encoder.sensor_proj"), f);
        e.image_proj.visit_mut(&join(prefix, "encoder.image_proj"), f);
        e.sensor_norm.visit_mut(&join(prefix, "encoder.sensor_norm"), f);
        e.image_norm.visit_mut(&join(prefix, "encoder.image_norm"), f);
        self.fusion.attention.visit_mut(&join(prefix, "fusion.attention"), f);
        self.fusion.ffn.visit_mut(&join(prefix, "fusion.ffn"), f);
        self.head.hidden.visit_mut(&join(prefix, "head.hidden"), f);
        self.head.out.visit_mut(&join(prefix, "head.out"), f);
        f(join(prefix, "missing_image"), &mut self.missing_image, ParamKind::Embedding);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub params: ModelParams,
}

impl FusionModel {
    pub fn new(config: FusionConfig, dims: &Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, dims, seed);
        Ok(Self { config, params })
    }

    /// `z = LayerNorm(Dropout(ReLU(W·x + b)))` for each modality, batched.
    pub fn encode(&self, tape: &mut Tape, batch: &Batch, dropout: &mut Dropout<'_>) -> Result<(Var, Var)> {
        let e = &self.params.encoder;
        let eps = self.config.layernorm_eps;
        let mut dropout = dropout.with_p(self.config.dropout);

        let s = tape.constant(batch.sensor.clone());
        let zs = e.sensor_proj.forward(tape, s)?;
        let zs = tape.relu(zs);
        let zs = dropout.apply(tape, zs)?;
        let zs = e.sensor_norm.forward(tape, zs, eps)?;

        let i = image_with_token(tape, &batch.image, &batch.image_present, &self.params.missing_image)?;
        let zi = e.image_proj.forward(tape, i)?;
        let zi = tape.relu(zi);
        let zi = dropout.apply(tape, zi)?;
        let zi = e.image_norm.forward(tape, zi, eps)?;
        Ok((zs, zi))
    }

    /// `z_fused = CrossAttn(z_s, z_i, z_i) + z_s`, `z_out = FFN(z_fused) + z_fused`.
    pub fn fuse(&self, tape: &mut Tape, zs: Var, zi: Var) -> Result<Var> {
        let (bs, bi) = (tape.value(zs).shape(), tape.value(zi).shape());
        if bs != bi {
            return Err(crate::tensor::shape_error("fuse", bs, bi));
        }
        let f = &self.params.fusion;
        let attended = f.attention.forward(tape, zs, zi, bs.0, 1, 1)?;
        let fused = tape.add(attended, zs)?;
        let refined = f.ffn.forward(tape, fused)?;
        tape.add(refined, fused)
    }

    /// Logits `W_out·ReLU(W_hidden·z)`; probabilities are their row softmax.
    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.params.head.hidden.forward(tape, z)?;
        let h = tape.relu(h);
        self.params.head.out.forward(tape, h)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, dropout: &mut Dropout<'_>) -> Result<Forward> {
        let (zs, zi) = self.encode(tape, batch, dropout)?;
        let z = self.fuse(tape, zs, zi)?;
        let logits = self.classify(tape, z)?;
        Ok(Forward { logits, latents: Some((zs, zi)) })
    }
}

impl Module for FusionModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.params.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.params.visit_mut(prefix, f);
    }
}
