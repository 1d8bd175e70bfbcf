//! Counterfactual data augmentation: attribute-word rotation along a bias axis.

use std::collections::HashMap;

use crate::corpus::{BiasAxis, Corpus, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Token-level view of a bias axis: every attribute id mapped to its tuple
/// and position.
#[derive(Debug, Clone)]
pub struct AttributeTable {
    arity: usize,
    tuples: Vec<Vec<TokenId>>,
    position: HashMap<TokenId, (usize, usize)>,
}

impl AttributeTable {
    pub fn new(axis: &BiasAxis, vocab: &Vocabulary) -> Result<Self> {
        let tuples = axis.token_tuples(vocab)?;
        let mut position = HashMap::new();
        for (t, tuple) in tuples.iter().enumerate() {
            for (i, &id) in tuple.iter().enumerate() {
                position.insert(id, (t, i));
            }
        }
        Ok(Self {
            arity: axis.arity(),
            tuples,
            position,
        })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn lookup(&self, id: TokenId) -> Option<(usize, usize)> {
        self.position.get(&id).copied()
    }

    pub fn contains_attribute(&self, seq: &[TokenId]) -> bool {
        seq.iter().any(|id| self.position.contains_key(id))
    }

    /// Every attribute word moved `offset` places along its tuple.
    pub fn rotate(&self, seq: &[TokenId], offset: usize) -> Vec<TokenId> {
        seq.iter()
            .map(|&id| match self.position.get(&id) {
                Some(&(t, i)) => self.tuples[t][(i + offset) % self.arity],
                None => id,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CdaConfig {
    pub two_sided: bool,
    pub axis: BiasAxis,
}

impl CdaConfig {
    pub fn new(axis: BiasAxis) -> Self {
        Self {
            two_sided: true,
            axis,
        }
    }
}

/// The `k - 1` rotations of `seq` for an arity-`k` axis, or nothing when the
/// sequence holds no attribute word.
pub fn counterfactuals(seq: &[TokenId], table: &AttributeTable) -> Vec<Vec<TokenId>> {
    if !table.contains_attribute(seq) {
        return Vec::new();
    }
    (1..table.arity()).map(|j| table.rotate(seq, j)).collect()
}

/// Each document followed immediately by its counterfactuals. One-sided CDA
/// drops originals that have counterfactuals.
pub fn augment_corpus(corpus: &Corpus, cfg: &CdaConfig, vocab: &Vocabulary) -> Result<Corpus> {
    if cfg.axis.tuples.is_empty() {
        return Err(Error::Axis("empty axis".into()));
    }
    let table = AttributeTable::new(&cfg.axis, vocab)?;
    Ok(augment_with(corpus, &table, cfg.two_sided))
}

pub fn augment_with(corpus: &Corpus, table: &AttributeTable, two_sided: bool) -> Corpus {
    let mut documents = Vec::with_capacity(corpus.len() * table.arity());
    for doc in &corpus.documents {
        let variants = counterfactuals(doc, table);
        if two_sided || variants.is_empty() {
            documents.push(doc.clone());
        }
        documents.extend(variants);
    }
    Corpus {
        documents,
        provenance: corpus.provenance.clone(),
    }
}
