//! CDA invariants on one token sequence.

use peft_debias::cda::{counterfactuals, AttributeTable};
use peft_debias::corpus::{TokenId, Vocabulary};
use peft_debias::synthetic::{gender_axis, race_axis};

pub const FILLERS: [&str; 8] = ["the", "is", "a", "nurse", "said", "people", "at", "market"];

pub struct Tables {
    pub vocab: Vocabulary,
    pub gender: AttributeTable,
    pub race: AttributeTable,
}

pub fn tables() -> Tables {
    let (g, r) = (gender_axis(), race_axis());
    let words = g.words().chain(r.words()).chain(FILLERS).map(String::from).collect::<Vec<_>>();
    let vocab = Vocabulary::from_words(words).unwrap();
    let gender = AttributeTable::new(&g, &vocab).unwrap();
    let race = AttributeTable::new(&r, &vocab).unwrap();
    Tables { vocab, gender, race }
}

/// Length kept, non-attribute tokens untouched, attribute tokens moved within
/// their tuple, and rotation of exact order `arity`.
pub fn check_rotation(seq: &[TokenId], table: &AttributeTable) -> Result<(), String> {
    let k = table.arity();
    let variants = counterfactuals(seq, table);
    let has_attr = table.contains_attribute(seq);
    if variants.len() != if has_attr { k - 1 } else { 0 } {
        return Err(format!("{} counterfactuals for arity {k}", variants.len()));
    }
    let mut cur = seq.to_vec();
    for step in 1..=k {
        cur = table.rotate(&cur, 1);
        if cur.len() != seq.len() {
            return Err("length changed".into());
        }
        for (j, (&a, &b)) in seq.iter().zip(&cur).enumerate() {
            match table.lookup(a) {
                None if a != b => return Err(format!("non-attribute token at {j} changed")),
                Some((t, i)) => {
                    if table.lookup(b) != Some((t, (i + step) % k)) {
                        return Err(format!("attribute at {j} left its tuple or slot"));
                    }
                    if step < k && a == b {
                        return Err(format!("attribute at {j} fixed after {step} rotation(s)"));
                    }
                }
                None => {}
            }
        }
        if step < k && has_attr && cur == seq {
            return Err(format!("rotation order divides {step}"));
        }
        if step < k && has_attr && cur != variants[step - 1] {
            return Err(format!("counterfactual {step} is not the {step}-fold rotation"));
        }
    }
    if cur != seq {
        return Err(format!("{k} rotations do not restore the sentence"));
    }
    Ok(())
}
