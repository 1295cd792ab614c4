//! Single runs and seed ensembles: AdamW, plateau learning-rate reduction,
//! early stopping on validation accuracy and best-epoch checkpointing.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentConfig, Batch, Sample, SplitDataset, Standardizer};
use crate::error::{Error, Result};
use crate::loss::{total_loss, BtConfig};
use crate::model::{Checkpoint, Dropout, Model, ModelSpec};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel;
use crate::rng::{self, Stream};
use crate::tape::{softmax_rows, Tape};

/// Improvements smaller than this count as ties.
const IMPROVEMENT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Base seed; ensemble member `k` uses `seed + k`.
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub bt: BtConfig,
    /// `None` trains on the standardized originals. The config's own seed
    /// is added to the run seed.
    pub augment: Option<AugmentConfig>,
    /// Keep per-step loss components in the record.
    pub record_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 8,
            max_epochs: 30,
            early_stop_patience: 5,
            plateau_factor: 0.5,
            plateau_patience: 3,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            bt: BtConfig::default(),
            augment: Some(AugmentConfig::default()),
            record_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config(format!("plateau_factor must lie in (0, 1], got {}", self.plateau_factor)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("early_stop_patience", self.early_stop_patience),
            ("plateau_patience", self.plateau_patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        self.bt.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub bt: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted means over the epoch.
    pub train_ce: f64,
    pub train_bt: f64,
    pub train_total: f64,
    pub lambda: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Batches that skipped the correlation term (size 1).
    pub bt_skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the retained parameters; 0 if none ran.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Last epoch run; 0 if none ran.
    pub stopped_epoch: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepLog>,
}

/// Result of one seed: best-epoch parameters plus what is needed to use
/// them on raw data.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub standardizer: Standardizer,
    pub record: TrainRecord,
}

impl TrainedModel {
    pub fn seed(&self) -> u64 {
        self.record.seed
    }

    pub fn val_accuracy(&self) -> f64 {
        self.record.best_val_accuracy
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, self.standardizer.clone(), self.seed(), self.val_accuracy())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let record = TrainRecord { seed: ck.seed, best_val_accuracy: ck.val_accuracy, ..TrainRecord::default() };
        Ok(Self { model: ck.to_model()?, standardizer: ck.standardizer.clone(), record })
    }
}

/// Execution knobs that do not affect results.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for independent runs; `None` = one per core.
    pub jobs: Option<usize>,
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

/// Mean cross-entropy and accuracy in eval mode on already standardized
/// samples.
pub fn evaluate_split(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &model.dims);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, &mut Dropout::eval())?;
    let loss = tape.cross_entropy(out.logits, &batch.labels)?;
    let loss = tape.value(loss).item()?;
    let probs = softmax_rows(tape.value(out.logits));
    let correct = (0..probs.rows())
        .filter(|&r| crate::evaluation::argmax(probs.row_slice(r)) == batch.labels[r])
        .count();
    Ok((loss, correct as f64 / samples.len() as f64))
}

pub fn train_one(spec: &ModelSpec, cfg: &TrainConfig, data: &SplitDataset, progress: bool) -> Result<TrainedModel> {
    spec.validate()?;
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Contract("training needs nonempty train and val splits".into()));
    }
    let seed = cfg.seed;
    let dims = data.dims;
    let mut model = Model::build(spec, dims, seed)?;
    let standardizer = Standardizer::fit(&data.train, dims.sensor);
    let val = standardizer.apply_all(&data.val);
    let train = standardizer.apply_all(&data.train);
    let train = match &cfg.augment {
        Some(a) => augment(&train, &AugmentConfig { seed: seed.wrapping_add(a.seed), ..a.clone() })?,
        None => train,
    };

    let mut record = TrainRecord { seed, ..TrainRecord::default() };
    let mut best = model.clone();
    if cfg.max_epochs == 0 {
        record.best_val_accuracy = evaluate_split(&model, &val)?.1;
        return Ok(TrainedModel { model, standardizer, record });
    }

    let mut shuffle_rng = rng::stream(seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(seed, Stream::Dropout);
    let mut optimizer = AdamW::new(cfg.adamw());
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let (mut since_acc, mut since_loss) = (0, 0);
    let mut step = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut ce_sum, mut bt_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut skipped = 0;
        let mut lambda = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&refs, &dims);
            let mut tape = Tape::new();
            let mut dropout = Dropout::train(0.0, &mut dropout_rng);
            let out = model.forward(&mut tape, &batch, &mut dropout)?;
            let latents = if cfg.bt.lambda0 > 0.0 { out.latents } else { None };
            let parts = total_loss(&mut tape, out.logits, &batch.labels, latents, epoch, &cfg.bt)?;
            let total = tape.value(parts.total).item()?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {}, step {step}", epoch + 1)));
            }
            lambda = parts.lambda;
            skipped += usize::from(parts.bt_skipped);
            let n = batch.len() as f64;
            ce_sum += parts.ce * n;
            bt_sum += parts.bt * n;
            total_sum += total * n;
            if cfg.record_steps {
                record.steps.push(StepLog { epoch: epoch + 1, step, ce: parts.ce, bt: parts.bt, lambda, total });
            }
            let grads = tape.backward(parts.total)?;
            let grads = model.collect_grads(&grads);
            optimizer.step(&mut model, &grads, lr)?;
            step += 1;
        }

        let (val_loss, val_accuracy) = evaluate_split(&model, &val)?;
        let n = train.len() as f64;
        record.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_ce: ce_sum / n,
            train_bt: bt_sum / n,
            train_total: total_sum / n,
            lambda,
            val_loss,
            val_accuracy,
            lr,
            bt_skipped: skipped,
        });
        if progress {
            eprintln!(
                "[{} seed {seed}] epoch {:>2}  loss {:.4}  val_loss {:.4}  val_acc {:.3}  lr {:.2e}",
                spec.name(),
                epoch + 1,
                total_sum / n,
                val_loss,
                val_accuracy,
                lr
            );
        }

        if val_accuracy > best_acc + IMPROVEMENT_TOL {
            best_acc = val_accuracy;
            best = model.clone();
            record.best_epoch = epoch + 1;
            since_acc = 0;
        } else {
            since_acc += 1;
        }
        if val_loss < best_loss - IMPROVEMENT_TOL {
            best_loss = val_loss;
            since_loss = 0;
        } else {
            since_loss += 1;
            if since_loss >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                since_loss = 0;
            }
        }
        record.stopped_epoch = epoch + 1;
        if since_acc >= cfg.early_stop_patience {
            break;
        }
    }
    record.best_val_accuracy = best_acc;
    Ok(TrainedModel { model: best, standardizer, record })
}

/// Trains seeds `cfg.seed + 0 .. cfg.seed + n_seeds`, returned in seed
/// order whatever the degree of parallelism.
pub fn train_ensemble(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    data: &SplitDataset,
    n_seeds: usize,
    opts: RunOptions,
) -> Result<Vec<TrainedModel>> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let runs = parallel::map_jobs(&seeds, opts.jobs, |&seed| {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        train_one(spec, &cfg, data, opts.progress).map_err(|e| Error::SeedRun { seed, source: Box::new(e) })
    })?;
    runs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::model::Module;

    fn tiny() -> SplitDataset {
        generate_synthetic(&SyntheticSpec { n_samples: 60, d_s: 5, d_i: 7, ..SyntheticSpec::default() }).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { max_epochs: 3, augment: Some(AugmentConfig { replication: 2, ..AugmentConfig::default() }), ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let data = tiny();
        let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let run = train_one(&ModelSpec::default(), &cfg, &data, false).unwrap();
        assert_eq!(run.model, Model::build(&ModelSpec::default(), data.dims, 0).unwrap());
        assert!(run.record.epochs.is_empty());
        assert_eq!(run.record.stopped_epoch, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        let data = tiny();
        let a = train_one(&ModelSpec::default(), &quick(), &data, false).unwrap();
        let b = train_one(&ModelSpec::default(), &quick(), &data, false).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.model, b.model);
        assert!(a.model.num_params() > 0);
    }

    #[test]
    fn ensemble_is_ordered_by_seed() {
        let data = tiny();
        let runs = train_ensemble(&ModelSpec::default(), &quick(), &data, 3, RunOptions::default()).unwrap();
        let seeds: Vec<u64> = runs.iter().map(TrainedModel::seed).collect();
        assert_eq!(seeds, vec![0, 1, 2]);
        let single = train_one(&ModelSpec::default(), &TrainConfig { seed: 1, ..quick() }, &data, false).unwrap();
        assert_eq!(runs[1].record, single.record);
    }
}
