use ndarray::Array2;
use rayon::prelude::*;

use crate::corpus::{is_special, TokenId, MASK};
use crate::error::{Error, Result};
use crate::model::forward::{log_softmax_rows, Net};
use crate::peft::Composed;

/// Anything that can score tokens under masking. The composed transformer is
/// the real implementation; metric tests plug in rigged scorers.
pub trait MaskedLm: Sync {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the vocabulary at `rows` of `seq`, one output
    /// row per requested position.
    fn log_probs(&self, seq: &[TokenId], rows: &[usize]) -> Result<Array2<f64>>;
}

impl MaskedLm for Composed<'_> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn log_probs(&self, seq: &[TokenId], rows: &[usize]) -> Result<Array2<f64>> {
        if let Some(&r) = rows.iter().find(|&&r| r >= seq.len()) {
            return Err(Error::Shape(format!("row {r} outside sequence of {}", seq.len())));
        }
        let net = Net::new(self);
        let cache = net.forward(seq)?;
        Ok(log_softmax_rows(&net.mlm_logits(&cache, rows)))
    }
}

/// Sum over `positions` of the log-probability of the true token when that
/// position alone is replaced by `[MASK]`.
pub fn pseudo_log_likelihood<M: MaskedLm + ?Sized>(lm: &M, seq: &[TokenId], positions: &[usize]) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Empty("pseudo-log-likelihood needs at least one position".into()));
    }
    for &p in positions {
        if p >= seq.len() || is_special(seq[p]) {
            return Err(Error::Shape(format!("position {p} is not a non-special token")));
        }
    }
    let terms: Vec<Result<f64>> = positions
        .par_iter()
        .map(|&p| {
            let mut masked = seq.to_vec();
            masked[p] = MASK;
            let lp = lm.log_probs(&masked, &[p])?;
            Ok(lp[[0, seq[p] as usize]])
        })
        .collect();
    terms.into_iter().sum()
}
