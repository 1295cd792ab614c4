//! Central finite differences against reverse-mode gradients for every
//! parameter of every architecture, on toy dimensions.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Dims};
use crate::error::Result;
use crate::loss::{total_loss, BtConfig};
use crate::model::{BaselineConfig, BaselineKind, Dropout, FusionConfig, Model, ModelSpec, Module};
use crate::rng::{self, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub const TOY_DIMS: Dims = Dims { sensor: 4, image: 6, classes: 5 };
pub const TOY_BATCH: usize = 3;
pub const TOY_LATENT: usize = 8;

/// `|a − n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub model: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Toy-sized specs for the fusion model and all baselines.
pub fn toy_specs() -> Vec<ModelSpec> {
    let mut specs = vec![ModelSpec::Fusion(FusionConfig { d_latent: TOY_LATENT, head_hidden: TOY_LATENT, ..FusionConfig::default() })];
    specs.extend(BaselineKind::ALL.iter().map(|&kind| {
        ModelSpec::Baseline(BaselineConfig { kind, latent_dim: TOY_LATENT, hidden_dim: TOY_LATENT, ..BaselineConfig::default() })
    }));
    specs
}

/// Random toy batch; the last sample has no image so the missing-image
/// token is exercised.
pub fn toy_batch(seed: u64) -> Batch {
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let mut draw = |rows, cols| {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(rows, cols, data).expect("sized buffer")
    };
    let sensor = draw(TOY_BATCH, TOY_DIMS.sensor);
    let mut image = draw(TOY_BATCH, TOY_DIMS.image);
    image.row_slice_mut(TOY_BATCH - 1).fill(0.0);
    let mut image_present = vec![true; TOY_BATCH];
    image_present[TOY_BATCH - 1] = false;
    Batch { sensor, image, image_present, labels: vec![0, 3, 1] }
}

fn loss_cfg() -> BtConfig {
    BtConfig { lambda0: 0.5, ..BtConfig::default() }
}

/// Eval-mode training objective: CE, plus the weighted correlation term
/// when the model exposes encoder latents.
fn objective(model: &Model, batch: &Batch) -> Result<(Tape, crate::tape::Var)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, &mut Dropout::eval())?;
    let parts = total_loss(&mut tape, out.logits, &batch.labels, out.latents, 0, &loss_cfg())?;
    Ok((tape, parts.total))
}

fn loss_value(model: &Model, batch: &Batch) -> Result<f64> {
    let (tape, total) = objective(model, batch)?;
    tape.value(total).item()
}

/// Sets one parameter element and returns its previous value.
fn set_param(model: &mut Model, target: usize, elem: usize, value: f64) -> f64 {
    let mut idx = 0;
    let mut old = 0.0;
    model.visit_mut("", &mut |_, t, _| {
        if idx == target {
            old = std::mem::replace(&mut t.data_mut()[elem], value);
        }
        idx += 1;
    });
    old
}

pub fn check_model(spec: &ModelSpec, seed: u64) -> Result<GradcheckReport> {
    let mut model = Model::build(spec, TOY_DIMS, seed)?;
    // Randomize everything (norm gains, biases and tokens start at
    // constants that would hide indexing mistakes).
    let mut rng = rng::stream(seed, Stream::Dropout);
    model.visit_mut("", &mut |_, t, _| {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += 0.3 * z;
        }
    });
    let batch = toy_batch(seed);
    let (tape, total) = objective(&model, &batch)?;
    let grads = model.collect_grads(&tape.backward(total)?);
    let names = model.param_names();

    let mut worst = (0.0, String::new());
    let mut n_params = 0;
    for (pi, (g, name)) in grads.iter().zip(&names).enumerate() {
        for e in 0..g.len() {
            let original = set_param(&mut model, pi, e, f64::NAN);
            set_param(&mut model, pi, e, original + STEP);
            let up = loss_value(&model, &batch)?;
            set_param(&mut model, pi, e, original - STEP);
            let down = loss_value(&model, &batch)?;
            set_param(&mut model, pi, e, original);
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(g.data()[e], numeric);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{e}]"));
            }
            n_params += 1;
        }
    }
    Ok(GradcheckReport { model: spec.name().to_string(), n_params, max_rel_error: worst.0, worst_param: worst.1 })
}

pub fn run_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    toy_specs().iter().map(|s| check_model(s, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_architecture_matches_finite_differences() {
        for report in run_suite(0).unwrap() {
            assert!(report.passed(), "{report:?}");
        }
    }
}
