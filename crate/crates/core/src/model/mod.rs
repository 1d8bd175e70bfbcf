//! A small pre-norm transformer encoder with a tied MLM head and a
//! classification head on the `[CLS]` position.

pub mod batch;
pub mod forward;
pub mod lm;
pub mod loss;
pub mod params;
pub mod train;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

pub use batch::{mask_for_mlm, masked_lm_batch, Batch, Sampler, IGNORE};
pub use lm::{pseudo_log_likelihood, MaskedLm};
pub use loss::compute_loss;
pub use params::{ModelConfig, TransformerParams};
pub use train::{gradients, Adam, AdamConfig, GradientSet, LossKind, ParamId, TrainableSet};

use crate::error::Result;
use crate::peft::Composed;
use forward::Net;

/// MLM logits, `batch x width x vocab`. Padding positions are zero.
pub fn forward_mlm(view: &Composed<'_>, batch: &Batch) -> Result<Array3<f64>> {
    batch.validate()?;
    let net = Net::new(view);
    let v = view.config().vocab_size;
    let (b, width) = batch.tokens.dim();
    let rows: Vec<Result<Array2<f64>>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let ids = batch.row(i);
            let cache = net.forward(&ids)?;
            let positions: Vec<usize> = (0..ids.len()).collect();
            Ok(net.mlm_logits(&cache, &positions))
        })
        .collect();
    let mut out = Array3::zeros((b, width, v));
    for (i, r) in rows.into_iter().enumerate() {
        let r = r?;
        for (j, row) in r.outer_iter().enumerate() {
            out.slice_mut(ndarray::s![i, j, ..]).assign(&row);
        }
    }
    Ok(out)
}

/// Classification logits from the `[CLS]` representation, `batch x classes`.
pub fn forward_cls(view: &Composed<'_>, batch: &Batch) -> Result<Array2<f64>> {
    batch.validate()?;
    let net = Net::new(view);
    let c = view.config().num_classes;
    let rows: Vec<Result<ndarray::Array1<f64>>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let cache = net.forward(&batch.row(i))?;
            Ok(net.cls_logits(&cache))
        })
        .collect();
    let mut out = Array2::zeros((batch.len(), c));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r?);
    }
    Ok(out)
}

/// Argmax class per row (first index on ties).
pub fn predict(view: &Composed<'_>, seqs: &[Vec<crate::corpus::TokenId>]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let logits = forward_cls(view, &Batch::inputs(chunk)?)?;
        for row in logits.outer_iter() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}
