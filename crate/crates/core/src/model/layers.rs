//! Parameter containers and the building blocks shared by every model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// What a parameter is, which decides whether weight decay touches it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    /// Learned inputs: latent arrays and the missing-image token.
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Anything holding named parameters. Visiting order is stable and defines
/// the layout used by the optimizer and checkpoints.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, _| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform on `±sqrt(3 / fan_in)`, i.e. standard deviation `1/sqrt(fan_in)`.
pub fn fan_in_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

/// Affine map `x·Wᵀ + b` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: fan_in_uniform(output, input, input, rng),
            bias: bias.then(|| Tensor::zeros(1, output)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul_nt(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, ParamKind::Bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b, ParamKind::Bias);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gain: Tensor::ones(1, dim), bias: Tensor::zeros(1, dim) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layernorm(x, g, b, eps)
    }
}

impl Module for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "gain"), &self.gain, ParamKind::Norm);
        f(join(prefix, "bias"), &self.bias, ParamKind::Norm);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "gain"), &mut self.gain, ParamKind::Norm);
        f(join(prefix, "bias"), &mut self.bias, ParamKind::Norm);
    }
}

/// Inverted dropout: a seeded keep-mask scaled by `1/(1-p)` in training,
/// identity otherwise.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn train(p: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn with_p(&mut self, p: f64) -> Dropout<'_> {
        Dropout { p, rng: self.rng.as_deref_mut() }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p <= 0.0 {
            return Ok(x);
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = 1.0 - self.p;
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.apply_mask(x, Tensor::from_vec(rows, cols, data)?)
    }
}

/// Multi-head scaled dot-product attention over per-sample token groups.
///
/// Queries arrive as `batch·n_q × d` and keys/values as `batch·n_kv × d`,
/// with sample `b` owning rows `b·n .. (b+1)·n` of each. Tokens attend only
/// within their own sample. Scores are scaled by `1/sqrt(d_head)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, bias: bool, output_proj: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::new(dim, dim, bias, rng),
            // A key bias adds the same score to every key of a query and
            // cancels in the softmax.
            key: Linear::new(dim, dim, false, rng),
            value: Linear::new(dim, dim, bias, rng),
            output: output_proj.then(|| Linear::new(dim, dim, bias, rng)),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys_values: Var,
        batch: usize,
        n_q: usize,
        n_kv: usize,
    ) -> Result<Var> {
        let (q_rows, kv_rows) = (tape.value(queries).rows(), tape.value(keys_values).rows());
        if q_rows != batch * n_q || kv_rows != batch * n_kv {
            return Err(Error::Shape(format!(
                "attention: {q_rows} query rows and {kv_rows} key rows for batch {batch} with {n_q}/{n_kv} tokens"
            )));
        }
        let v = self.value.forward(tape, keys_values)?;
        if n_kv == 1 {
            // Softmax over a single key is exactly 1: every query receives
            // its sample's value row and Q, K get zero gradient.
            let v = if n_q == 1 {
                v
            } else {
                let spread = tape.constant(repeat_rows_matrix(batch, n_q));
                tape.matmul(spread, v)?
            };
            return match &self.output {
                Some(proj) => proj.forward(tape, v),
                None => Ok(v),
            };
        }
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys_values)?;
        let dim = tape.value(q).cols();
        let d_head = dim / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                tape.slice_cols(q, h * d_head, d_head)?,
                tape.slice_cols(k, h * d_head, d_head)?,
                tape.slice_cols(v, h * d_head, d_head)?,
            );
            let mut per_sample = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = tape.slice_rows(qh, b * n_q, n_q)?;
                let kb = tape.slice_rows(kh, b * n_kv, n_kv)?;
                let vb = tape.slice_rows(vh, b * n_kv, n_kv)?;
                let scores = tape.matmul_nt(qb, kb)?;
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows(scores);
                per_sample.push(tape.matmul(weights, vb)?);
            }
            heads.push(tape.concat_rows(&per_sample)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        match &self.output {
            Some(proj) => proj.forward(tape, merged),
            None => Ok(merged),
        }
    }

    /// Attention weights of every head, one `n_q × n_kv` block per sample,
    /// stacked as `(heads·batch·n_q) × n_kv`. Used to inspect the
    /// normalization of the attention rows.
    pub fn attention_weights(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys_values: Var,
        batch: usize,
        n_q: usize,
        n_kv: usize,
    ) -> Result<Tensor> {
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys_values)?;
        let d_head = tape.value(q).cols() / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let mut blocks = Vec::new();
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * d_head, d_head)?;
            let kh = tape.slice_cols(k, h * d_head, d_head)?;
            for b in 0..batch {
                let qb = tape.slice_rows(qh, b * n_q, n_q)?;
                let kb = tape.slice_rows(kh, b * n_kv, n_kv)?;
                let s = tape.matmul_nt(qb, kb)?;
                let s = tape.scale(s, scale);
                blocks.push(tape.softmax_rows(s));
            }
        }
        let all = tape.concat_rows(&blocks)?;
        Ok(tape.value(all).clone())
    }
}

impl Module for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        if let Some(o) = &self.output {
            o.visit(&join(prefix, "output"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        if let Some(o) = &mut self.output {
            o.visit_mut(&join(prefix, "output"), f);
        }
    }
}

/// `W₂·ReLU(W₁·x)` with a hidden width of `ratio·dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, ratio: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self { expand: Linear::new(dim, ratio * dim, bias, rng), contract: Linear::new(ratio * dim, dim, bias, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, x)?;
        let h = tape.relu(h);
        self.contract.forward(tape, h)
    }
}

impl Module for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.contract.visit(&join(prefix, "contract"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.contract.visit_mut(&join(prefix, "contract"), f);
    }
}

/// Post-norm transformer encoder block over per-sample token groups:
/// `x ← LN(x + Drop(MHA(x)))`, `x ← LN(x + Drop(FFN(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(dim, heads, true, true, rng),
            norm1: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, 2, true, rng),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        batch: usize,
        tokens: usize,
        eps: f64,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, x, x, batch, tokens, tokens)?;
        let a = dropout.apply(tape, a)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, x, eps)?;
        let f = self.ffn.forward(tape, x)?;
        let f = dropout.apply(tape, f)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, x, eps)
    }
}

impl Module for EncoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Image input with missing rows replaced by a learned `1 × d_image` token:
/// `X_present + m·token`, where `m` flags the missing rows.
pub fn image_with_token(tape: &mut Tape, image: &Tensor, present: &[bool], token: &Tensor) -> Result<Var> {
    let x = tape.constant(image.clone());
    let indicator: Vec<f64> = present.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    let m = tape.constant(Tensor::column(&indicator));
    let t = tape.param(token);
    let fill = tape.matmul(m, t)?;
    tape.add(x, fill)
}

/// `batch × batch·tokens` matrix that averages each sample's token rows
/// when applied as `P · X`.
pub fn mean_pool_matrix(batch: usize, tokens: usize) -> Tensor {
    let mut p = Tensor::zeros(batch, batch * tokens);
    for b in 0..batch {
        for t in 0..tokens {
            p.set(b, b * tokens + t, 1.0 / tokens as f64);
        }
    }
    p
}

/// `batch·tokens × batch` matrix copying row `b` to rows
/// `b·tokens .. (b+1)·tokens`.
fn repeat_rows_matrix(batch: usize, tokens: usize) -> Tensor {
    let mut r = Tensor::zeros(batch * tokens, batch);
    for b in 0..batch {
        for t in 0..tokens {
            r.set(b * tokens + t, b, 1.0);
        }
    }
    r
}

/// `batch·tokens × tokens` matrix stacking one copy of a `tokens × d`
/// array per sample when applied as `R · L`.
pub fn repeat_matrix(batch: usize, tokens: usize) -> Tensor {
    let mut r = Tensor::zeros(batch * tokens, tokens);
    for b in 0..batch {
        for t in 0..tokens {
            r.set(b * tokens + t, t, 1.0);
        }
    }
    r
}
