use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::model::batch::IGNORE;

/// Cross-entropy of one logit row against `label`, with the softmax.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = logits.mapv(|v| (v - max).exp());
    let sum = probs.sum();
    probs /= sum;
    let loss = -(logits[label] - max - sum.ln());
    (loss, probs)
}

/// Mean cross-entropy over rows whose label is not [`IGNORE`]. With class
/// weights, each row's term is scaled by the weight of its gold class; the
/// divisor stays the number of contributing rows.
pub fn compute_loss(logits: ArrayView2<f64>, labels: &[i64], class_weights: Option<&[f64]>) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows, {} labels", logits.nrows(), labels.len())));
    }
    let classes = logits.ncols();
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &label) in logits.outer_iter().zip(labels) {
        if label == IGNORE {
            continue;
        }
        if label < 0 || label as usize >= classes {
            return Err(Error::Shape(format!("label {label} outside {classes} classes")));
        }
        let w = class_weight(class_weights, label as usize);
        total += w * cross_entropy(row, label as usize).0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("no position contributes to the loss".into()));
    }
    Ok(total / count as f64)
}

pub(crate) fn class_weight(weights: Option<&[f64]>, class: usize) -> f64 {
    weights.and_then(|w| w.get(class).copied()).unwrap_or(1.0)
}
