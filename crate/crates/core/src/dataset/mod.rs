//! Samples, splits and the data pipeline that feeds training.

mod augment;
mod csv_io;
mod split;
mod standardize;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use split::stratified_split;
pub use standardize::Standardizer;
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Climatic metrics per observation.
pub const SENSOR_DIM: usize = 28;
/// Pre-extracted image feature width.
pub const IMAGE_DIM: usize = 512;
/// Degradation severity classes 0..=4.
pub const NUM_CLASSES: usize = 5;

/// Input widths of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub sensor: usize,
    pub image: usize,
    pub classes: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self { sensor: SENSOR_DIM, image: IMAGE_DIM, classes: NUM_CLASSES }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sensor: Vec<f64>,
    /// `None` when the image modality is missing for this observation.
    pub image: Option<Vec<f64>>,
    pub label: usize,
    pub site_id: String,
}

impl Sample {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.sensor.len() != dims.sensor {
            return Err(Error::Contract(format!(
                "sample {}: sensor has {} values, expected {}",
                self.site_id,
                self.sensor.len(),
                dims.sensor
            )));
        }
        if self.sensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sensor values of sample {}", self.site_id)));
        }
        if let Some(image) = &self.image {
            if image.len() != dims.image {
                return Err(Error::Contract(format!(
                    "sample {}: image has {} values, expected {}",
                    self.site_id,
                    image.len(),
                    dims.image
                )));
            }
            if image.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("image values of sample {}", self.site_id)));
            }
        }
        if self.label >= dims.classes {
            return Err(Error::Contract(format!(
                "sample {}: label {} out of range 0..{}",
                self.site_id, self.label, dims.classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub dims: Dims,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class sample counts of one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        class_counts(self.split(split), self.dims.classes)
    }
}

pub fn class_counts(samples: &[Sample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        counts[s.label] += 1;
    }
    counts
}

/// Stacked model inputs for a group of samples. Missing images are zero rows
/// flagged in `image_present`; the model substitutes its own token for them.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sensor: Tensor,
    pub image: Tensor,
    pub image_present: Vec<bool>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], dims: &Dims) -> Self {
        let n = samples.len();
        let mut sensor = Tensor::zeros(n, dims.sensor);
        let mut image = Tensor::zeros(n, dims.image);
        let mut image_present = Vec::with_capacity(n);
        for (r, s) in samples.iter().enumerate() {
            sensor.row_slice_mut(r).copy_from_slice(&s.sensor);
            if let Some(img) = &s.image {
                image.row_slice_mut(r).copy_from_slice(img);
            }
            image_present.push(s.image.is_some());
        }
        let labels = samples.iter().map(|s| s.label).collect();
        Self { sensor, image, image_present, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
