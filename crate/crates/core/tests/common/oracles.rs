//! Brute-force counting oracles for the bias metrics, and a scorer whose
//! log-probabilities are exact small integers.

use ndarray::Array2;
use peft_debias::corpus::{Gender, LabeledCorpus, LabeledExample, ProtectedAnnotation, TokenId, CLS, MASK};
use peft_debias::error::Result;
use peft_debias::model::MaskedLm;

pub fn gender_corpus(rows: &[(usize, bool)], classes: usize) -> LabeledCorpus {
    let examples = rows
        .iter()
        .map(|&(label, female)| LabeledExample {
            ids: vec![CLS],
            label,
            protected: ProtectedAnnotation::gender(if female { Gender::Female } else { Gender::Male }),
        })
        .collect();
    LabeledCorpus::new((0..classes).map(|i| format!("occ{i}")).collect(), examples).unwrap()
}

/// Gaps by scanning the raw rows once per (occupation, group) cell.
pub fn oracle_tpr(rows: &[(usize, bool)], preds: &[usize], classes: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let tpr = |y: usize, female: bool| {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i] == (y, female)).collect();
        if idx.is_empty() {
            None
        } else {
            Some(idx.iter().filter(|&&i| preds[i] == y).count() as f64 / idx.len() as f64)
        }
    };
    let gaps: Vec<Option<f64>> = (0..classes)
        .map(|y| match (tpr(y, true), tpr(y, false)) {
            (Some(f), Some(m)) => Some(f - m),
            _ => None,
        })
        .collect();
    let defined: Vec<f64> = gaps.iter().flatten().copied().collect();
    let agg = (!defined.is_empty()).then(|| (defined.iter().map(|g| g * g).sum::<f64>() / defined.len() as f64).sqrt());
    (gaps, agg)
}

pub const IDENTS: [&str; 5] = ["asian", "black", "white", "latino", "arab"];

pub fn race_corpus(rows: &[(usize, u8)]) -> LabeledCorpus {
    let examples = rows
        .iter()
        .map(|&(label, bits)| LabeledExample {
            ids: vec![CLS],
            label,
            protected: ProtectedAnnotation::mentions(
                IDENTS.iter().enumerate().filter(|(k, _)| bits >> k & 1 == 1).map(|(_, z)| *z),
            ),
        })
        .collect();
    LabeledCorpus::new(vec!["none".into(), "hate".into()], examples).unwrap()
}

pub fn oracle_fprd(rows: &[(usize, u8)], preds: &[usize]) -> Option<(f64, Vec<Option<f64>>, f64)> {
    let neg: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].0 == 0).collect();
    if neg.is_empty() {
        return None;
    }
    let rate = |idx: &[usize]| idx.iter().filter(|&&i| preds[i] == 1).count() as f64 / idx.len() as f64;
    let overall = rate(&neg);
    let terms: Vec<Option<f64>> = (0..IDENTS.len())
        .map(|k| {
            let sub: Vec<usize> = neg.iter().copied().filter(|&i| rows[i].1 >> k & 1 == 1).collect();
            (!sub.is_empty()).then(|| (rate(&sub) - overall).abs())
        })
        .collect();
    let total = terms.iter().flatten().sum();
    Some((overall, terms, total))
}

/// Log-probability of `t` at any masked row is `-(t + sum of weights of the
/// visible tokens)`, with small integer weights so every sum is exact.
pub struct Rigged {
    pub weight: Vec<i64>,
}

pub const V: usize = 24;

impl Rigged {
    fn visible_cost(&self, seq: &[TokenId]) -> i64 {
        seq.iter().filter(|&&t| t != MASK).map(|&t| self.weight[t as usize]).sum()
    }
}

impl MaskedLm for Rigged {
    fn vocab_size(&self) -> usize {
        V
    }

    fn log_probs(&self, seq: &[TokenId], rows: &[usize]) -> Result<Array2<f64>> {
        let c = self.visible_cost(seq);
        Ok(Array2::from_shape_fn((rows.len(), V), |(_, t)| -((t as i64 + c) as f64)))
    }
}

/// Direct evaluation of the rigged model's pseudo-log-likelihood.
pub fn oracle_pll(lm: &Rigged, seq: &[TokenId], positions: &[usize]) -> i64 {
    let all: i64 = seq.iter().map(|&t| lm.weight[t as usize]).sum();
    positions
        .iter()
        .map(|&p| -(seq[p] as i64 + all - lm.weight[seq[p] as usize]))
        .sum()
}

/// SS LM and SS Score by counting, on integer option scores.
pub fn oracle_stereoset(scores: &[[i64; 3]]) -> (f64, f64) {
    let (mut lm, mut half_points) = (0usize, 0usize);
    for s in scores {
        if s[0] > s[2] || s[1] > s[2] {
            lm += 1;
        }
        half_points += if s[0] > s[1] { 2 } else if s[0] == s[1] { 1 } else { 0 };
    }
    let n = scores.len() as f64;
    (100.0 * lm as f64 / n, 100.0 * (half_points as f64 / 2.0) / n)
}

pub fn oracle_neutral(preds: &[usize], neutral: usize) -> f64 {
    let mut n = 0usize;
    for &x in preds {
        if x == neutral {
            n += 1;
        }
    }
    n as f64 / preds.len() as f64
}
