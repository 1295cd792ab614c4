//! JSON checkpoints of named parameter arrays. Floats are written in
//! shortest round-trip form, so loading restores every bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, Module};
use crate::dataset::{Dims, Standardizer};
use crate::error::{Error, Result};

pub const FORMAT: &str = "heritage-fusion-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub dims: Dims,
    /// Sensor standardization fitted on the training split.
    pub standardizer: Standardizer,
    pub seed: u64,
    /// Best validation accuracy, used as the ensemble weight numerator.
    pub val_accuracy: f64,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(model: &Model, standardizer: Standardizer, seed: u64, val_accuracy: f64) -> Self {
        let mut params = Vec::new();
        model.visit("", &mut |name, t, _| {
            params.push(NamedArray { name, rows: t.rows(), cols: t.cols(), data: t.data().to_vec() });
        });
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            spec: model.spec(),
            dims: model.dims,
            standardizer,
            seed,
            val_accuracy,
            params,
        }
    }

    /// Rebuilds the model and fills every parameter by name.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Contract(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let mut model = Model::build(&self.spec, self.dims, self.seed)?;
        let mut by_name: HashMap<&str, &NamedArray> = HashMap::new();
        for p in &self.params {
            if by_name.insert(&p.name, p).is_some() {
                return Err(Error::Contract(format!("checkpoint repeats parameter `{}`", p.name)));
            }
        }
        let mut problem = None;
        let mut used = 0;
        model.visit_mut("", &mut |name, t, _| {
            if problem.is_some() {
                return;
            }
            match by_name.get(name.as_str()) {
                None => problem = Some(format!("checkpoint lacks parameter `{name}`")),
                Some(p) if (p.rows, p.cols) != t.shape() || p.data.len() != p.rows * p.cols => {
                    problem = Some(format!(
                        "parameter `{name}` is {}x{} in checkpoint, model expects {}x{}",
                        p.rows,
                        p.cols,
                        t.rows(),
                        t.cols()
                    ))
                }
                Some(p) => {
                    t.data_mut().copy_from_slice(&p.data);
                    used += 1;
                }
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Contract(msg));
        }
        if used != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, model uses {used}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaselineKind;

    fn dims() -> Dims {
        Dims { sensor: 4, image: 6, classes: 5 }
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_architecture() {
        let mut specs = vec![ModelSpec::default()];
        specs.extend(BaselineKind::ALL.iter().map(|&k| ModelSpec::baseline(k)));
        for spec in specs {
            let model = Model::build(&spec, dims(), 7).unwrap();
            let ck = Checkpoint::new(&model, Standardizer::identity(4), 7, 0.5);
            let text = serde_json::to_string(&ck).unwrap();
            let back: Checkpoint = serde_json::from_str(&text).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_model().unwrap(), model, "{spec}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = Model::build(&ModelSpec::default(), dims(), 1).unwrap();
        let mut ck = Checkpoint::new(&model, Standardizer::identity(4), 1, 0.0);
        ck.params[0].rows += 1;
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::new(&model, Standardizer::identity(4), 1, 0.0);
        ck.params.pop();
        assert!(ck.to_model().is_err());
    }
}
