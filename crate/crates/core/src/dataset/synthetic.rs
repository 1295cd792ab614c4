//! Class-conditional Gaussian data with controllable cross-modal structure.
//!
//! Each observation is driven by three latent blocks of `LATENT` dims:
//! a shared block `h` seen by both modalities, a sensor-only block `a` and
//! an image-only block `b`. The class mean of `h` is scaled by
//! `redundancy`; the means of `a` and `b` are scaled by `complementarity`
//! and depend on the class only through a coarse grouping:
//!
//! ```text
//! class          0  1  2  3  4
//! sensor group   0  0  1  1  2
//! image group    0  1  1  2  2
//! ```
//!
//! Neither grouping identifies the class alone, but the pair does, so with
//! `complementarity > 0` the fused input strictly dominates either
//! modality. With `complementarity = 0` both modalities are noisy linear
//! views of the same `h` and carry the same information.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stratified_split, Dims, Sample, SplitDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const LATENT: usize = 8;
/// Distance scale of class means relative to unit latent noise.
const SIGNAL: f64 = 2.0;
/// Observation noise, as a fraction of the latent noise level.
const OBSERVATION_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub d_s: usize,
    pub d_i: usize,
    pub n_classes: usize,
    pub redundancy: f64,
    pub complementarity: f64,
    /// Standard deviation of the latent noise.
    pub noise: f64,
    pub seed: u64,
    /// Train/val/test proportions (normalized).
    pub split: [f64; 3],
    /// Fraction of samples whose image is withheld.
    pub missing_image_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 700,
            d_s: 28,
            d_i: 512,
            n_classes: 5,
            redundancy: 0.2,
            complementarity: 0.5,
            noise: 1.0,
            seed: 0,
            split: [0.70, 0.15, 0.15],
            missing_image_fraction: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("redundancy", self.redundancy)?;
        unit("complementarity", self.complementarity)?;
        unit("missing_image_fraction", self.missing_image_fraction)?;
        if self.redundancy + self.complementarity > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "redundancy + complementarity must not exceed 1, got {} + {}",
                self.redundancy, self.complementarity
            )));
        }
        if self.d_s == 0 || self.d_i == 0 {
            return Err(Error::Config("d_s and d_i must be positive".into()));
        }
        if !(2..=crate::dataset::NUM_CLASSES).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "n_classes must lie in 2..={}, got {}",
                crate::dataset::NUM_CLASSES,
                self.n_classes
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.n_samples < 3 * self.n_classes {
            return Err(Error::Config(format!(
                "n_samples must be at least {} (three per class)",
                3 * self.n_classes
            )));
        }
        Ok(())
    }
}

fn sensor_group(class: usize) -> usize {
    class / 2
}

fn image_group(class: usize) -> usize {
    class.div_ceil(2)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let mut gaussian = |n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect::<Vec<f64>>()
    };

    let k = spec.n_classes;
    let groups = image_group(k - 1) + 1;
    let shared_means: Vec<Vec<f64>> = (0..k).map(|_| gaussian(LATENT, SIGNAL)).collect();
    let sensor_means: Vec<Vec<f64>> = (0..groups).map(|_| gaussian(LATENT, SIGNAL)).collect();
    let image_means: Vec<Vec<f64>> = (0..groups).map(|_| gaussian(LATENT, SIGNAL)).collect();
    // Column-major projections from the 2·LATENT driving factors.
    let proj_scale = 1.0 / ((2 * LATENT) as f64).sqrt();
    let sensor_proj = gaussian(spec.d_s * 2 * LATENT, proj_scale);
    let image_proj = gaussian(spec.d_i * 2 * LATENT, proj_scale);

    let latent_noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let obs_noise =
        Normal::new(0.0, spec.noise * OBSERVATION_NOISE).map_err(|e| Error::Config(e.to_string()))?;

    let mut samples = Vec::with_capacity(spec.n_samples);
    for idx in 0..spec.n_samples {
        let label = idx % k;
        let mut draw = |mean: &[f64], weight: f64| -> Vec<f64> {
            mean.iter().map(|m| weight * m + latent_noise.sample(&mut rng)).collect()
        };
        let h = draw(&shared_means[label], spec.redundancy);
        let a = draw(&sensor_means[sensor_group(label)], spec.complementarity);
        let b = draw(&image_means[image_group(label)], spec.complementarity);

        let mut project = |proj: &[f64], dim: usize, exclusive: &[f64]| -> Vec<f64> {
            (0..dim)
                .map(|row| {
                    let coeffs = &proj[row * 2 * LATENT..(row + 1) * 2 * LATENT];
                    let mixed: f64 = coeffs[..LATENT].iter().zip(&h).map(|(c, v)| c * v).sum::<f64>()
                        + coeffs[LATENT..].iter().zip(exclusive).map(|(c, v)| c * v).sum::<f64>();
                    mixed + obs_noise.sample(&mut rng)
                })
                .collect()
        };
        let sensor = project(&sensor_proj, spec.d_s, &a);
        let image = project(&image_proj, spec.d_i, &b);
        let missing = spec.missing_image_fraction > 0.0 && rng.random::<f64>() < spec.missing_image_fraction;
        samples.push(Sample {
            sensor,
            image: (!missing).then_some(image),
            label,
            site_id: format!("syn-{idx:05}"),
        });
    }
    let dims = Dims { sensor: spec.d_s, image: spec.d_i, classes: crate::dataset::NUM_CLASSES };
    stratified_split(&samples, dims, spec.split, spec.seed)
}
