use serde::{Deserialize, Serialize};

use super::{Sample, SplitDataset};

/// Per-feature sensor standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation of each sensor feature.
    /// Constant features keep a unit scale.
    pub fn fit(samples: &[Sample], dim: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(&s.sensor) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(&s.sensor).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| v / n).map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let sensor = sample
            .sensor
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        Sample { sensor, ..sample.clone() }
    }

    pub fn apply_all(&self, samples: &[Sample]) -> Vec<Sample> {
        samples.iter().map(|s| self.apply(s)).collect()
    }

    pub fn apply_dataset(&self, data: &SplitDataset) -> SplitDataset {
        SplitDataset {
            dims: data.dims,
            train: self.apply_all(&data.train),
            val: self.apply_all(&data.val),
            test: self.apply_all(&data.test),
        }
    }
}
