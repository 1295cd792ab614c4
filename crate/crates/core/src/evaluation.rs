//! Classification metrics and validation-weighted ensembles.

use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainedModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    /// Classes where some metric had a zero denominator and was set to 0.
    pub zero_division: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let n = y_true.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(k);
    let mut zero_division = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        if precision.is_none() || recall.is_none() {
            zero_division.push(c);
        }
        per_class.push(ClassMetrics {
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            support,
            predicted,
        });
    }
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n as f64
    };
    let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        n_samples: n,
        accuracy: trace as f64 / n as f64,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        confusion,
        per_class,
        zero_division,
    })
}

/// Confusion matrix as CSV with a `true\predicted` corner cell.
pub fn confusion_csv(report: &MetricsReport) -> String {
    let k = report.confusion.len();
    let mut out = String::from("true\\predicted");
    for c in 0..k {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `w_k = acc_k / Σ_j acc_j`.
pub fn ensemble_weights(val_accuracies: &[f64]) -> Result<Vec<f64>> {
    if val_accuracies.is_empty() {
        return Err(Error::Contract("ensemble_weights needs at least one accuracy".into()));
    }
    if let Some(bad) = val_accuracies.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::Contract(format!("validation accuracy {bad} is not a finite non-negative value")));
    }
    let total: f64 = val_accuracies.iter().sum();
    if total == 0.0 {
        return Err(Error::Contract("all validation accuracies are zero; ensemble weights undefined".into()));
    }
    Ok(val_accuracies.iter().map(|a| a / total).collect())
}

/// Weighted sum of per-member probability matrices.
pub fn combine_probabilities(members: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if members.len() != weights.len() || members.is_empty() {
        return Err(Error::Contract(format!(
            "{} member outputs for {} weights",
            members.len(),
            weights.len()
        )));
    }
    let shape = members[0].shape();
    let mut out = Tensor::zeros(shape.0, shape.1);
    for (m, &w) in members.iter().zip(weights) {
        if m.shape() != shape {
            return Err(crate::tensor::shape_error("combine_probabilities", shape, m.shape()));
        }
        for (o, &p) in out.data_mut().iter_mut().zip(m.data()) {
            *o += w * p;
        }
    }
    Ok(out)
}

pub fn predict_labels(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|r| argmax(probs.row_slice(r))).collect()
}

/// Ensemble probabilities and labels for raw (unstandardized) samples.
/// Each member applies its own sensor standardization.
pub fn ensemble_predict(models: &[TrainedModel], weights: &[f64], samples: &[Sample]) -> Result<(Tensor, Vec<usize>)> {
    if models.len() != weights.len() {
        return Err(Error::Contract(format!("{} models for {} weights", models.len(), weights.len())));
    }
    for m in models {
        for s in samples {
            s.validate(&m.model.dims)?;
        }
    }
    let outputs = models
        .iter()
        .map(|m| {
            let standardized = m.standardizer.apply_all(samples);
            let refs: Vec<&Sample> = standardized.iter().collect();
            m.model.predict_proba(&Batch::from_samples(&refs, &m.model.dims))
        })
        .collect::<Result<Vec<_>>>()?;
    let probs = combine_probabilities(&outputs, weights)?;
    let labels = predict_labels(&probs);
    Ok((probs, labels))
}

/// Ensemble and per-seed results of a set of trained runs on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEvaluation {
    pub seeds: Vec<u64>,
    pub val_accuracies: Vec<f64>,
    pub weights: Vec<f64>,
    /// Accuracy of each member on its own.
    pub seed_accuracies: Vec<f64>,
    pub seed_mean_accuracy: f64,
    /// Population standard deviation of `seed_accuracies`.
    pub seed_std_accuracy: f64,
    /// Spread (max − min) of member validation accuracies.
    pub val_accuracy_spread: f64,
    pub metrics: MetricsReport,
}

pub fn evaluate_ensemble(models: &[TrainedModel], samples: &[Sample]) -> Result<EnsembleEvaluation> {
    let first = models.first().ok_or_else(|| Error::Contract("empty ensemble".into()))?;
    let classes = first.model.dims.classes;
    let y_true: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let val_accuracies: Vec<f64> = models.iter().map(TrainedModel::val_accuracy).collect();
    let weights = ensemble_weights(&val_accuracies)?;
    let seed_accuracies = models
        .iter()
        .map(|m| {
            let (_, pred) = ensemble_predict(std::slice::from_ref(m), &[1.0], samples)?;
            Ok(compute_metrics(&y_true, &pred, classes)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (_, pred) = ensemble_predict(models, &weights, samples)?;
    let metrics = compute_metrics(&y_true, &pred, classes)?;
    let n = seed_accuracies.len() as f64;
    let mean = seed_accuracies.iter().sum::<f64>() / n;
    let var = seed_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let max = val_accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = val_accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(EnsembleEvaluation {
        seeds: models.iter().map(TrainedModel::seed).collect(),
        val_accuracies,
        weights,
        seed_accuracies,
        seed_mean_accuracy: mean,
        seed_std_accuracy: var.sqrt(),
        val_accuracy_spread: max - min,
        metrics,
    })
}
