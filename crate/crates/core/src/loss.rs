//! Cross-entropy plus the adaptive Barlow Twins term on the two encoder
//! outputs, weighted by an epoch-decayed coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{barlow_twins_value, Tape, Var};
use crate::tensor::{shape_error, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BtConfig {
    /// Target value for the diagonal of the cross-correlation matrix.
    pub tau: f64,
    /// Weight of the off-diagonal decorrelation term.
    pub alpha: f64,
    pub lambda0: f64,
    pub decay_base: f64,
    pub decay_every: usize,
    /// Variance floor for batch standardization.
    pub eps: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self { tau: 0.3, alpha: 0.05, lambda0: 0.01, decay_base: 0.98, decay_every: 5, eps: 1e-5 }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        for (name, v) in [("alpha", self.alpha), ("lambda0", self.lambda0), ("decay_base", self.decay_base)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// `λ(t) = λ₀ · base^⌊t / every⌋`.
pub fn lambda_schedule(epoch: usize, cfg: &BtConfig) -> f64 {
    let steps = (epoch / cfg.decay_every.max(1)) as i32;
    cfg.lambda0 * cfg.decay_base.powi(steps)
}

/// Feature-wise cross-correlation of two standardized batches.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub c: Tensor,
    pub batch_size: usize,
}

/// Per-column standardization with population batch statistics.
/// Columns whose variance falls below `eps` map to zero.
pub fn standardize_batch(z: &Tensor, eps: f64) -> Result<Tensor> {
    if z.rows() < 2 {
        return Err(Error::Contract(format!("standardize_batch needs at least 2 rows, got {}", z.rows())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(z.clone());
    let y = tape.standardize_cols(x, eps);
    Ok(tape.value(y).clone())
}

/// `C[j][k] = (1/N) Σ_n a[n][j]·b[n][k]`.
pub fn cross_correlation(a: &Tensor, b: &Tensor) -> Result<CorrelationMatrix> {
    if a.shape() != b.shape() {
        return Err(shape_error("cross_correlation", a.shape(), b.shape()));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::Contract("cross_correlation of an empty batch".into()));
    }
    let c = a.matmul_tn(b)?.map(|v| v / n as f64);
    Ok(CorrelationMatrix { c, batch_size: n })
}

/// `Σ_j (C_jj − τ)² + α Σ_{j≠k} C_jk²`.
pub fn barlow_twins_loss(c: &Tensor, tau: f64, alpha: f64) -> Result<f64> {
    if c.rows() != c.cols() {
        return Err(Error::Shape(format!("barlow_twins_loss: {}x{} is not square", c.rows(), c.cols())));
    }
    Ok(barlow_twins_value(c, tau, alpha))
}

/// Differentiable Barlow Twins term on raw encoder outputs.
pub fn barlow_twins_term(tape: &mut Tape, zs: Var, zi: Var, cfg: &BtConfig) -> Result<Var> {
    let (ss, si) = (tape.value(zs).shape(), tape.value(zi).shape());
    if ss != si {
        return Err(shape_error("barlow_twins_term", ss, si));
    }
    if ss.0 < 2 {
        return Err(Error::Contract(format!("Barlow Twins term needs a batch of at least 2, got {}", ss.0)));
    }
    let a = tape.standardize_cols(zs, cfg.eps);
    let b = tape.standardize_cols(zi, cfg.eps);
    let at = tape.transpose(a);
    let c = tape.matmul(at, b)?;
    let c = tape.scale(c, 1.0 / ss.0 as f64);
    tape.barlow_twins(c, cfg.tau, cfg.alpha)
}

/// Loss value plus its breakdown for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: f64,
    /// Raw Barlow Twins value before weighting; 0 when skipped.
    pub bt: f64,
    pub lambda: f64,
    /// Set when the batch was too small for the correlation term.
    pub bt_skipped: bool,
}

/// `CE + λ(epoch)·BT`. The Barlow Twins term needs `latents` and a batch of
/// at least two; otherwise only CE is used and `bt_skipped` is set when
/// latents were supplied.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    latents: Option<(Var, Var)>,
    epoch: usize,
    cfg: &BtConfig,
) -> Result<LossParts> {
    let ce = tape.cross_entropy(logits, labels)?;
    let ce_value = tape.value(ce).item()?;
    let lambda = lambda_schedule(epoch, cfg);
    let Some((zs, zi)) = latents else {
        return Ok(LossParts { total: ce, ce: ce_value, bt: 0.0, lambda, bt_skipped: false });
    };
    if labels.len() < 2 {
        return Ok(LossParts { total: ce, ce: ce_value, bt: 0.0, lambda, bt_skipped: true });
    }
    let bt = barlow_twins_term(tape, zs, zi, cfg)?;
    let bt_value = tape.value(bt).item()?;
    let weighted = tape.scale(bt, lambda);
    let total = tape.add(ce, weighted)?;
    Ok(LossParts { total, ce: ce_value, bt: bt_value, lambda, bt_skipped: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_two_point_column() {
        let z = Tensor::column(&[1.0, 3.0]);
        let out = standardize_batch(&z, 1e-5).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-4 && (out.get(1, 0) - 1.0).abs() < 1e-4);
        let flat = standardize_batch(&Tensor::column(&[5.0, 5.0, 5.0]), 1e-5).unwrap();
        assert_eq!(flat.data(), &[0.0, 0.0, 0.0]);
        assert!(standardize_batch(&Tensor::row(&[1.0, 2.0]), 1e-5).is_err());
    }

    #[test]
    fn closed_form_bt_values() {
        let mut eye = Tensor::zeros(64, 64);
        for j in 0..64 {
            eye.set(j, j, 1.0);
        }
        assert_eq!(barlow_twins_loss(&eye, 1.0, 0.7).unwrap(), 0.0);
        // 64 diagonal terms of (1 - 0.1)^2.
        let expected = 64.0 * 0.81;
        assert!((barlow_twins_loss(&eye, 0.1, 0.05).unwrap() - expected).abs() < 1e-9);
        let zero = Tensor::zeros(64, 64);
        assert!((barlow_twins_loss(&zero, 0.1, 0.05).unwrap() - 0.64).abs() < 1e-12);
    }

    #[test]
    fn lambda_steps_every_five_epochs() {
        let cfg = BtConfig::default();
        assert_eq!(lambda_schedule(0, &cfg), 0.01);
        assert_eq!(lambda_schedule(4, &cfg), 0.01);
        assert!((lambda_schedule(10, &cfg) - 0.009604).abs() < 1e-12);
    }

    #[test]
    fn disabled_regularizer_leaves_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[&[0.1, 0.4], &[0.3, -0.2], &[1.0, 0.0]]));
        let zs = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 1.0], &[3.0, -1.0]]));
        let zi = tape.leaf(Tensor::from_rows(&[&[0.5, 2.0], &[1.0, 0.0], &[-3.0, 1.0]]));
        let cfg = BtConfig { lambda0: 0.0, ..BtConfig::default() };
        let parts = total_loss(&mut tape, logits, &[0, 1, 0], Some((zs, zi)), 3, &cfg).unwrap();
        assert_eq!(tape.value(parts.total).item().unwrap(), parts.ce);
    }

    #[test]
    fn singleton_batch_skips_bt() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::row(&[0.0; 5]));
        let zs = tape.leaf(Tensor::row(&[1.0, 2.0]));
        let zi = tape.leaf(Tensor::row(&[3.0, 4.0]));
        let parts = total_loss(&mut tape, logits, &[2], Some((zs, zi)), 0, &BtConfig::default()).unwrap();
        assert!(parts.bt_skipped);
        assert!((parts.ce - 5f64.ln()).abs() < 1e-12);
    }
}
