use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Replicas per original; the replicas replace the originals.
    pub replication: usize,
    pub noise_sigma: f64,
    pub feature_dropout_p: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { replication: 15, noise_sigma: 0.15, feature_dropout_p: 0.30, scale_range: (0.7, 1.3), seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replication < 1 {
            return Err(Error::Config("augment.replication must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.feature_dropout_p) {
            return Err(Error::Config(format!(
                "augment.feature_dropout_p must lie in [0, 1), got {}",
                self.feature_dropout_p
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("augment.noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("augment.scale_range ({lo}, {hi}) is not an interval")));
        }
        Ok(())
    }
}

/// Expands `samples` into `replication` perturbed copies each, grouped by
/// original: `out[i * r .. (i + 1) * r]` are the replicas of `samples[i]`.
///
/// Every vector of a replica gets, in order: additive Gaussian noise,
/// zeroing of exactly `⌊p·d⌋` distinct features, and one uniform scale
/// factor.
pub fn augment(samples: &[Sample], cfg: &AugmentConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Augment);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(samples.len() * cfg.replication);
    for s in samples {
        for _ in 0..cfg.replication {
            let sensor = perturb(&s.sensor, cfg, &noise, &mut rng);
            let image = s.image.as_ref().map(|img| perturb(img, cfg, &noise, &mut rng));
            out.push(Sample { sensor, image, label: s.label, site_id: s.site_id.clone() });
        }
    }
    Ok(out)
}

fn perturb(x: &[f64], cfg: &AugmentConfig, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().map(|&value| value + noise.sample(rng)).collect();
    let drop = (cfg.feature_dropout_p * v.len() as f64).floor() as usize;
    if drop > 0 {
        for i in sample_indices(rng, v.len(), drop) {
            v[i] = 0.0;
        }
    }
    let (lo, hi) = cfg.scale_range;
    let factor = rng.random_range(lo..=hi);
    for value in v.iter_mut() {
        *value *= factor;
    }
    v
}
