use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{is_special, TokenId, MASK, PAD, SPECIAL_TOKENS};
use crate::error::{Error, Result};

/// Label value for positions that are not predicted.
pub const IGNORE: i64 = -1;

/// Right-padded token matrix. Attention is true exactly on the real tokens,
/// which always form a prefix of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Array2<TokenId>,
    pub attention: Array2<bool>,
    pub mlm_labels: Option<Array2<i64>>,
    pub class_labels: Option<Vec<usize>>,
}

impl Batch {
    fn padded(seqs: &[&[TokenId]]) -> Result<(Array2<TokenId>, Array2<bool>)> {
        if seqs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if width == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("batch holds an empty sequence".into()));
        }
        let mut tokens = Array2::from_elem((seqs.len(), width), PAD);
        let mut attention = Array2::from_elem((seqs.len(), width), false);
        for (i, s) in seqs.iter().enumerate() {
            for (j, &id) in s.iter().enumerate() {
                tokens[[i, j]] = id;
                attention[[i, j]] = true;
            }
        }
        Ok((tokens, attention))
    }

    pub fn inputs(seqs: &[Vec<TokenId>]) -> Result<Self> {
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let (tokens, attention) = Self::padded(&refs)?;
        Ok(Self {
            tokens,
            attention,
            mlm_labels: None,
            class_labels: None,
        })
    }

    /// Masked sequences paired with their per-position labels.
    pub fn mlm(examples: &[(Vec<TokenId>, Vec<i64>)]) -> Result<Self> {
        let refs: Vec<&[TokenId]> = examples.iter().map(|(s, _)| s.as_slice()).collect();
        let (tokens, attention) = Self::padded(&refs)?;
        let mut labels = Array2::from_elem(tokens.dim(), IGNORE);
        for (i, (seq, lab)) in examples.iter().enumerate() {
            if lab.len() != seq.len() {
                return Err(Error::Shape(format!(
                    "row {i}: {} labels for {} tokens",
                    lab.len(),
                    seq.len()
                )));
            }
            for (j, &l) in lab.iter().enumerate() {
                labels[[i, j]] = l;
            }
        }
        let b = Self {
            tokens,
            attention,
            mlm_labels: Some(labels),
            class_labels: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn classification(seqs: &[Vec<TokenId>], labels: &[usize]) -> Result<Self> {
        if seqs.len() != labels.len() {
            return Err(Error::Shape(format!("{} rows, {} labels", seqs.len(), labels.len())));
        }
        let mut b = Self::inputs(seqs)?;
        b.class_labels = Some(labels.to_vec());
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.attention.row(i).iter().take_while(|&&a| a).count()
    }

    /// The real tokens of row `i`.
    pub fn row(&self, i: usize) -> Vec<TokenId> {
        let n = self.row_len(i);
        self.tokens.row(i).iter().take(n).copied().collect()
    }

    pub fn row_mlm_labels(&self, i: usize) -> Option<Vec<i64>> {
        let n = self.row_len(i);
        self.mlm_labels
            .as_ref()
            .map(|l| l.row(i).iter().take(n).copied().collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.dim() != self.attention.dim() {
            return Err(Error::Shape("token and attention shapes differ".into()));
        }
        for (i, row) in self.attention.outer_iter().enumerate() {
            let n = self.row_len(i);
            if n == 0 || row.iter().skip(n).any(|&a| a) {
                return Err(Error::Shape(format!("row {i}: attention mask is not a non-empty prefix")));
            }
        }
        if let Some(labels) = &self.mlm_labels {
            if labels.dim() != self.tokens.dim() {
                return Err(Error::Shape("label and token shapes differ".into()));
            }
            for ((idx, &l), &a) in labels.indexed_iter().zip(self.attention.iter()) {
                if !a && l != IGNORE {
                    return Err(Error::Shape(format!("padding position {idx:?} carries a label")));
                }
                if l < IGNORE {
                    return Err(Error::Shape(format!("invalid label {l} at {idx:?}")));
                }
            }
        }
        if let Some(c) = &self.class_labels {
            if c.len() != self.len() {
                return Err(Error::Shape("one class label per row required".into()));
            }
        }
        Ok(())
    }

    /// Attention over the composed input when `prompt_len` soft prompts are
    /// prepended: `prompt_len` leading trues, then the token mask.
    pub fn effective_attention(&self, prompt_len: usize) -> Array2<bool> {
        let (b, s) = self.attention.dim();
        let mut m = Array2::from_elem((b, s + prompt_len), false);
        for i in 0..b {
            for j in 0..prompt_len {
                m[[i, j]] = true;
            }
            for j in 0..s {
                m[[i, prompt_len + j]] = self.attention[[i, j]];
            }
        }
        m
    }
}

/// BERT-style masking. Each non-special position is selected with
/// probability `mask_prob`; a selected position becomes `[MASK]` (80%), a
/// uniformly random non-special id (10%) or stays put (10%). Labels hold the
/// original id at selected positions and [`IGNORE`] elsewhere.
///
/// Draw order is pinned: one uniform per candidate for selection, one more
/// per selected position for the action, plus one id draw for replacements.
pub fn mask_for_mlm<R: Rng>(
    seq: &[TokenId],
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<i64>) {
    let mut masked = seq.to_vec();
    let mut labels = vec![IGNORE; seq.len()];
    let first = SPECIAL_TOKENS.len() as TokenId;
    for (i, &id) in seq.iter().enumerate() {
        if is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= mask_prob {
            continue;
        }
        labels[i] = id as i64;
        let action = rng.random::<f64>();
        if action < 0.8 {
            masked[i] = MASK;
        } else if action < 0.9 {
            masked[i] = rng.random_range(first..vocab_size as TokenId);
        }
    }
    (masked, labels)
}

/// Masks every sequence with [`mask_for_mlm`] and batches the result. A draw
/// that selects nothing anywhere in the batch is repeated, so the batch
/// always has a contributing position unless no row has a candidate.
pub fn masked_lm_batch<R: Rng>(
    seqs: &[Vec<TokenId>],
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if !seqs.iter().flatten().any(|&t| !is_special(t)) {
        return Err(Error::Empty("no maskable token in batch".into()));
    }
    loop {
        let examples: Vec<(Vec<TokenId>, Vec<i64>)> = seqs
            .iter()
            .map(|s| mask_for_mlm(s, mask_prob, vocab_size, rng))
            .collect();
        if examples.iter().any(|(_, l)| l.iter().any(|&x| x != IGNORE)) {
            return Batch::mlm(&examples);
        }
    }
}

/// Epoch-wise shuffled minibatch indices over `n` items.
#[derive(Debug, Clone)]
pub struct Sampler {
    order: Vec<usize>,
    next: usize,
    batch_size: usize,
}

impl Sampler {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Empty("sampler needs items and a positive batch size".into()));
        }
        Ok(Self {
            order: (0..n).collect(),
            next: n,
            batch_size: batch_size.min(n),
        })
    }

    /// Next batch of indices; reshuffles when the current epoch runs out.
    pub fn next_batch<R: Rng>(&mut self, rng: &mut R) -> Vec<usize> {
        if self.next + self.batch_size > self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        let out = self.order[self.next..self.next + self.batch_size].to_vec();
        self.next += self.batch_size;
        out
    }
}
