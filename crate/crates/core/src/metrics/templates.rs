//! Identity-template test sets and the line formats of the probe files.

use crate::corpus::{encode_records, read_lines, LabeledCorpus, LabeledRecord, ProtectedAnnotation, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::intrinsic::{MinimalPair, StereoInstance};
use std::path::Path;

pub const IDENT: &str = "IDENT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub label: String,
    pub text: String,
}

impl Template {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let t = Self {
            label: label.into(),
            text: text.into(),
        };
        let slots = t.text.matches(IDENT).count();
        if slots != 1 {
            return Err(Error::Invalid(format!(
                "template `{}` has {slots} {IDENT} slots, expected 1",
                t.text
            )));
        }
        Ok(t)
    }

    pub fn fill(&self, identifier: &str) -> String {
        self.text.replacen(IDENT, identifier, 1)
    }
}

fn parse_error(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// `label<TAB>text-with-IDENT` per line.
pub fn parse_templates(text: &str, source: &str) -> Result<Vec<Template>> {
    content_lines(text)
        .map(|(n, line)| {
            let (label, body) = line
                .split_once('\t')
                .ok_or_else(|| parse_error(source, n, "expected `label<TAB>text`"))?;
            Template::new(label.trim(), body.trim()).map_err(|e| parse_error(source, n, e.to_string()))
        })
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>> {
    parse_templates(&read_lines(path)?.join("\n"), &path.display().to_string())
}

/// One identifier per line.
pub fn load_identifiers(path: &Path) -> Result<Vec<String>> {
    let text = read_lines(path)?.join("\n");
    let ids: Vec<String> = content_lines(&text).map(|(_, l)| l.trim().to_string()).collect();
    if ids.is_empty() {
        return Err(Error::Empty(format!("no identifiers in {}", path.display())));
    }
    Ok(ids)
}

/// Templates x identifiers, template-major; each instance mentions exactly
/// its identifier.
pub fn iptts_records(templates: &[Template], identifiers: &[String]) -> Vec<LabeledRecord> {
    templates
        .iter()
        .flat_map(|t| {
            identifiers.iter().map(move |z| LabeledRecord {
                label: t.label.clone(),
                protected: ProtectedAnnotation::mentions([z.clone()]),
                text: t.fill(z),
                text_b: None,
            })
        })
        .collect()
}

pub fn generate_iptts(
    templates: &[Template],
    identifiers: &[String],
    label_names: Vec<String>,
    vocab: &Vocabulary,
) -> Result<LabeledCorpus> {
    encode_records(&iptts_records(templates, identifiers), label_names, vocab)
}

/// `sent_more<TAB>sent_less` per line.
pub fn parse_pairs(text: &str, source: &str, vocab: &Vocabulary) -> Result<Vec<MinimalPair>> {
    content_lines(text)
        .map(|(n, line)| {
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| parse_error(source, n, "expected `sent_more<TAB>sent_less`"))?;
            Ok(MinimalPair::from_texts(a, b, vocab))
        })
        .collect()
}

pub fn load_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<MinimalPair>> {
    parse_pairs(&read_lines(path)?.join("\n"), &path.display().to_string(), vocab)
}

/// `context-with-BLANK<TAB>stereotype<TAB>anti-stereotype<TAB>unrelated` per
/// line.
pub fn parse_stereo(text: &str, source: &str, vocab: &Vocabulary) -> Result<Vec<StereoInstance>> {
    content_lines(text)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(parse_error(source, n, format!("expected 4 fields, got {}", f.len())));
            }
            StereoInstance::from_texts(f[0], [f[1], f[2], f[3]], vocab).map_err(|e| parse_error(source, n, e.to_string()))
        })
        .collect()
}

pub fn load_stereo(path: &Path, vocab: &Vocabulary) -> Result<Vec<StereoInstance>> {
    parse_stereo(&read_lines(path)?.join("\n"), &path.display().to_string(), vocab)
}
