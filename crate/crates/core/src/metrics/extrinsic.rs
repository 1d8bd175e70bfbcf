//! Task metrics and group-rate bias metrics over predictions.

use serde::{Deserialize, Serialize};

use crate::corpus::{Gender, LabeledCorpus};
use crate::error::{Error, Result};

fn check_len(predictions: &[usize], gold: &LabeledCorpus) -> Result<()> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} examples",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no gold examples".into()));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], gold: &LabeledCorpus) -> Result<f64> {
    check_len(predictions, gold)?;
    let hits = predictions
        .iter()
        .zip(&gold.examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// F1 of the `positive` class; 0 when it is never predicted and never gold.
pub fn binary_f1(predictions: &[usize], gold: &LabeledCorpus, positive: usize) -> Result<f64> {
    check_len(predictions, gold)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, e) in predictions.iter().zip(&gold.examples) {
        match (p == positive, e.label == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationGap {
    pub occupation: String,
    pub tpr_female: Option<f64>,
    pub tpr_male: Option<f64>,
    /// Female minus male TPR; absent when either group has no gold example.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprGap {
    pub per_occupation: Vec<OccupationGap>,
    /// Root mean square over the occupations with a defined gap.
    pub aggregate: f64,
}

pub fn tpr_gap(predictions: &[usize], gold: &LabeledCorpus) -> Result<TprGap> {
    check_len(predictions, gold)?;
    let c = gold.num_classes();
    // [class][female, male] -> (hits, total)
    let mut counts = vec![[(0usize, 0usize); 2]; c];
    for (i, (&p, e)) in predictions.iter().zip(&gold.examples).enumerate() {
        let g = match e.protected.gender {
            Some(Gender::Female) => 0,
            Some(Gender::Male) => 1,
            None => return Err(Error::Invalid(format!("example {i} has no gender annotation"))),
        };
        let cell = &mut counts[e.label][g];
        cell.1 += 1;
        if p == e.label {
            cell.0 += 1;
        }
    }
    let rate = |(h, n): (usize, usize)| (n > 0).then(|| h as f64 / n as f64);
    let per_occupation: Vec<OccupationGap> = counts
        .iter()
        .enumerate()
        .map(|(y, cell)| {
            let (f, m) = (rate(cell[0]), rate(cell[1]));
            OccupationGap {
                occupation: gold.label_names[y].clone(),
                tpr_female: f,
                tpr_male: m,
                gap: f.zip(m).map(|(f, m)| f - m),
            }
        })
        .collect();
    let gaps: Vec<f64> = per_occupation.iter().filter_map(|o| o.gap).collect();
    if gaps.is_empty() {
        return Err(Error::Empty("no occupation has gold examples of both genders".into()));
    }
    let aggregate = (gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt();
    Ok(TprGap {
        per_occupation,
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifierTerm {
    pub identifier: String,
    pub negatives: usize,
    pub fpr: Option<f64>,
    /// |FPR of this identifier's gold negatives - overall FPR|; absent when
    /// the identifier has no gold-negative mention.
    pub term: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fprd {
    pub overall_fpr: f64,
    pub per_identifier: Vec<IdentifierTerm>,
    /// Sum of the defined terms.
    pub total: f64,
}

pub fn fprd(predictions: &[usize], gold: &LabeledCorpus, identifiers: &[String], positive: usize) -> Result<Fprd> {
    check_len(predictions, gold)?;
    let negatives: Vec<(bool, &std::collections::BTreeSet<String>)> = predictions
        .iter()
        .zip(&gold.examples)
        .filter(|(_, e)| e.label != positive)
        .map(|(&p, e)| (p == positive, &e.protected.race_mentions))
        .collect();
    if negatives.is_empty() {
        return Err(Error::Empty("no gold-negative example".into()));
    }
    let fp = |it: &mut dyn Iterator<Item = bool>| {
        let (mut f, mut n) = (0usize, 0usize);
        for x in it {
            n += 1;
            f += x as usize;
        }
        (f, n)
    };
    let (f, n) = fp(&mut negatives.iter().map(|(x, _)| *x));
    let overall_fpr = f as f64 / n as f64;
    let per_identifier: Vec<IdentifierTerm> = identifiers
        .iter()
        .map(|z| {
            let (f, n) = fp(&mut negatives.iter().filter(|(_, m)| m.contains(z)).map(|(x, _)| *x));
            let fpr = (n > 0).then(|| f as f64 / n as f64);
            IdentifierTerm {
                identifier: z.clone(),
                negatives: n,
                fpr,
                term: fpr.map(|r| (r - overall_fpr).abs()),
            }
        })
        .collect();
    let total = per_identifier.iter().filter_map(|t| t.term).sum();
    Ok(Fprd {
        overall_fpr,
        per_identifier,
        total,
    })
}

/// Fraction of NLI predictions equal to `neutral`.
pub fn bias_nli_fn(predictions: &[usize], neutral: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("no NLI predictions".into()));
    }
    Ok(predictions.iter().filter(|&&p| p == neutral).count() as f64 / predictions.len() as f64)
}
