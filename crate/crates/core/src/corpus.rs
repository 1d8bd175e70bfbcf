//! Text normalization, word-level tokenization, vocabularies, corpora and
//! bias-axis attribute lists.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIAL_TOKENS.len()
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)\S*").expect("valid regex"))
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").expect("valid regex"))
}

/// Lowercases, strips URLs and @-mentions, and collapses whitespace.
///
/// Stripping runs to a fixpoint so that removing one match can never expose
/// another (`http:/@x/y` would otherwise leave a fresh URL behind).
pub fn normalize_text(raw: &str) -> String {
    let mut text = raw.to_lowercase();
    loop {
        let stripped = mention_re().replace_all(&text, "");
        let stripped = url_re().replace_all(&stripped, "").into_owned();
        if stripped == text {
            break;
        }
        text = stripped;
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits text into words: runs of alphanumerics (plus `'`, `_`) and single
/// punctuation characters.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        let wordy = ch.is_alphanumeric() || ch == '\'' || ch == '_';
        if wordy {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !ch.is_whitespace() {
            out.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit word list. Specials are prepended;
    /// duplicates and words spelled like specials are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words.into_iter().map(Into::into));
        Self::from_tokens(id_to_token)
    }

    fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Invalid(format!(
                    "vocabulary id {i} must be the special token {special}"
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.id_to_token.len()
    }

    /// One token per line, in id order.
    pub fn to_lines(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }
}

/// Counts words over `texts` and keeps those seen at least `min_freq` times,
/// ordered by frequency (descending) then lexicographically.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Vocabulary> {
    let min_freq = min_freq.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in texts {
        for w in split_words(text.as_ref()) {
            if SPECIAL_TOKENS.contains(&w) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary { min_freq });
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_words(kept.into_iter().map(|(w, _)| w.to_string()))
}

/// Word ids without the surrounding `[CLS]`/`[SEP]`.
pub fn encode_words(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    split_words(text).into_iter().map(|w| vocab.id_or_unk(w)).collect()
}

/// `[CLS] w1 .. wn [SEP]`; unknown words become `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(text.len() / 4 + 2);
    ids.push(CLS);
    ids.extend(encode_words(text, vocab));
    ids.push(SEP);
    ids
}

/// `[CLS] a [SEP] b [SEP]`, the sentence-pair layout used for NLI.
pub fn tokenize_pair(first: &str, second: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut ids = tokenize(first, vocab);
    ids.extend(encode_words(second, vocab));
    ids.push(SEP);
    ids
}

/// Joins the non-special tokens with single spaces.
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !is_special(id))
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisName {
    Gender,
    Race,
}

impl AxisName {
    pub fn arity(self) -> usize {
        match self {
            AxisName::Gender => 2,
            AxisName::Race => 3,
        }
    }
}

impl fmt::Display for AxisName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AxisName::Gender => "gender",
            AxisName::Race => "race",
        })
    }
}

/// A protected dimension and its attribute-word tuples. Position within a
/// tuple identifies the group (for gender: index 0 male, index 1 female).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasAxis {
    pub name: AxisName,
    pub tuples: Vec<Vec<String>>,
}

impl BiasAxis {
    pub fn new(name: AxisName, tuples: Vec<Vec<String>>) -> Result<Self> {
        let axis = Self { name, tuples };
        axis.validate()?;
        Ok(axis)
    }

    pub fn arity(&self) -> usize {
        self.name.arity()
    }

    fn validate(&self) -> Result<()> {
        if self.tuples.is_empty() {
            return Err(Error::Axis("no attribute tuples".into()));
        }
        let k = self.arity();
        let mut seen = BTreeSet::new();
        for tuple in &self.tuples {
            if tuple.len() != k {
                return Err(Error::Axis(format!(
                    "tuple ({}) has arity {}, expected {k} for the {} axis",
                    tuple.join(", "),
                    tuple.len(),
                    self.name
                )));
            }
            for w in tuple {
                if w.is_empty() || *w != w.to_lowercase() || split_words(w).len() != 1 {
                    return Err(Error::Axis(format!("`{w}` is not a single lowercase word")));
                }
                if !seen.insert(w.as_str()) {
                    return Err(Error::Axis(format!("`{w}` appears more than once")));
                }
            }
        }
        Ok(())
    }

    /// `(tuple index, position in tuple)` for a surface form.
    pub fn locate(&self, word: &str) -> Option<(usize, usize)> {
        self.tuples
            .iter()
            .enumerate()
            .find_map(|(t, tuple)| tuple.iter().position(|w| w == word).map(|i| (t, i)))
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tuples.iter().flatten().map(String::as_str)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut tuples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tuple: Vec<String> = line.split(',').map(|w| w.trim().to_string()).collect();
            if tuple.len() < 2 || tuple.iter().any(String::is_empty) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: lineno + 1,
                    msg: format!("expected comma-separated attribute words, got `{line}`"),
                });
            }
            tuples.push(tuple);
        }
        let first = tuples
            .first()
            .ok_or_else(|| Error::Axis(format!("{source}: no attribute tuples")))?;
        let name = match first.len() {
            2 => AxisName::Gender,
            3 => AxisName::Race,
            k => return Err(Error::Axis(format!("{source}: unsupported tuple arity {k}"))),
        };
        Self::new(name, tuples)
    }

    pub fn to_lines(&self) -> String {
        self.tuples.iter().map(|t| t.join(",") + "\n").collect()
    }

    /// Ids of every tuple, in tuple order. Fails if a word is missing.
    pub fn token_tuples(&self, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
        self.tuples
            .iter()
            .map(|tuple| {
                tuple
                    .iter()
                    .map(|w| {
                        vocab
                            .id(w)
                            .ok_or_else(|| Error::Axis(format!("attribute word `{w}` not in vocabulary")))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Reads an attribute-word file: one comma-separated tuple per line, `#`
/// comments allowed. Arity 2 is a gender axis, arity 3 a race axis.
pub fn load_bias_axis(path: &Path) -> Result<BiasAxis> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    BiasAxis::parse(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Vec<TokenId>>,
    pub provenance: Option<PathBuf>,
}

impl Corpus {
    pub fn new(documents: Vec<Vec<TokenId>>, vocab: &Vocabulary) -> Result<Self> {
        let corpus = Self {
            documents,
            provenance: None,
        };
        corpus.validate(vocab)?;
        Ok(corpus)
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary) -> Result<Self> {
        let docs = texts
            .iter()
            .map(|t| normalize_text(t.as_ref()))
            .filter(|t| !t.is_empty())
            .map(|t| tokenize(&t, vocab))
            .collect();
        Self::new(docs, vocab)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (i, doc) in self.documents.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::Invalid(format!("document {i} is empty")));
            }
            if let Some(bad) = doc.iter().find(|&&id| !vocab.contains_id(id)) {
                return Err(Error::Invalid(format!("document {i} has out-of-range id {bad}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Deterministic train / held-out split: the last `fraction` of documents
    /// (at least one when the corpus has two or more) is held out.
    pub fn split_heldout(&self, fraction: f64) -> (Corpus, Corpus) {
        let (a, b) = split_tail(&self.documents, fraction);
        (
            Corpus {
                documents: a,
                provenance: self.provenance.clone(),
            },
            Corpus {
                documents: b,
                provenance: self.provenance.clone(),
            },
        )
    }
}

pub(crate) fn split_tail<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let mut held = ((n as f64) * fraction).round() as usize;
    if n >= 2 {
        held = held.clamp(1, n - 1);
    } else {
        held = 0;
    }
    let cut = n - held;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Reads one document per line, normalizing and tokenizing each.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
    let texts = read_lines(path)?;
    let mut corpus = Corpus::from_texts(&texts, vocab)?;
    corpus.provenance = Some(path.to_path_buf());
    Ok(corpus)
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn flipped(self) -> Self {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedAnnotation {
    pub gender: Option<Gender>,
    pub race_mentions: BTreeSet<String>,
}

impl ProtectedAnnotation {
    pub fn gender(g: Gender) -> Self {
        Self {
            gender: Some(g),
            race_mentions: BTreeSet::new(),
        }
    }

    pub fn mentions<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            gender: None,
            race_mentions: ids.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.gender.is_none() && self.race_mentions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub ids: Vec<TokenId>,
    pub label: usize,
    pub protected: ProtectedAnnotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub label_names: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl LabeledCorpus {
    pub fn new(label_names: Vec<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        let c = Self {
            label_names,
            examples,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.label >= c {
                return Err(Error::Invalid(format!("example {i}: label {} not below {c}", ex.label)));
            }
            if ex.ids.is_empty() {
                return Err(Error::Invalid(format!("example {i} is empty")));
            }
        }
        Ok(())
    }

    /// Which bias axis the annotations describe, if they are uniform.
    pub fn annotated_axis(&self) -> Option<AxisName> {
        let gender = self.examples.iter().any(|e| e.protected.gender.is_some());
        let race = self.examples.iter().any(|e| !e.protected.race_mentions.is_empty());
        match (gender, race) {
            (true, false) => Some(AxisName::Gender),
            (false, true) => Some(AxisName::Race),
            _ => None,
        }
    }

    pub fn split_heldout(&self, fraction: f64) -> (LabeledCorpus, LabeledCorpus) {
        let (a, b) = split_tail(&self.examples, fraction);
        (
            LabeledCorpus {
                label_names: self.label_names.clone(),
                examples: a,
            },
            LabeledCorpus {
                label_names: self.label_names.clone(),
                examples: b,
            },
        )
    }

    pub fn unlabeled(&self) -> Corpus {
        Corpus {
            documents: self.examples.iter().map(|e| e.ids.clone()).collect(),
            provenance: None,
        }
    }
}

/// A labeled example as stored on disk, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledRecord {
    pub label: String,
    pub protected: ProtectedAnnotation,
    pub text: String,
    pub text_b: Option<String>,
}

impl LabeledRecord {
    /// `label<TAB>gender<TAB>mentions<TAB>text[<TAB>text_b]`; `-` marks an
    /// empty gender or mention field, mentions are comma separated.
    pub fn to_line(&self) -> String {
        let gender = match self.protected.gender {
            Some(Gender::Male) => "male",
            Some(Gender::Female) => "female",
            None => "-",
        };
        let mentions = if self.protected.race_mentions.is_empty() {
            "-".to_string()
        } else {
            self.protected.race_mentions.iter().cloned().collect::<Vec<_>>().join(",")
        };
        let mut line = format!("{}\t{gender}\t{mentions}\t{}", self.label, self.text);
        if let Some(b) = &self.text_b {
            line.push('\t');
            line.push_str(b);
        }
        line
    }

    pub fn parse_line(line: &str, source: &str, lineno: usize) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(err(format!("expected 4 or 5 tab-separated fields, got {}", fields.len())));
        }
        let gender = match fields[1] {
            "male" => Some(Gender::Male),
            "female" => Some(Gender::Female),
            "-" | "" => None,
            other => return Err(err(format!("unknown gender `{other}`"))),
        };
        let race_mentions = match fields[2] {
            "-" | "" => BTreeSet::new(),
            m => m.split(',').map(|s| s.trim().to_string()).collect(),
        };
        Ok(Self {
            label: fields[0].to_string(),
            protected: ProtectedAnnotation {
                gender,
                race_mentions,
            },
            text: fields[3].to_string(),
            text_b: fields.get(4).map(|s| s.to_string()),
        })
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let a = normalize_text(&self.text);
        match &self.text_b {
            Some(b) => tokenize_pair(&a, &normalize_text(b), vocab),
            None => tokenize(&a, vocab),
        }
    }
}

/// Reads a labeled TSV file. A leading `#labels: a,b,c` line fixes the label
/// order; otherwise labels are sorted by name.
pub fn load_labeled(path: &Path, vocab: &Vocabulary) -> Result<LabeledCorpus> {
    let source = path.display().to_string();
    let lines = read_lines(path)?;
    let mut label_names: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if let Some(rest) = line.strip_prefix("#labels:") {
            label_names = Some(rest.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        records.push(LabeledRecord::parse_line(line, &source, i + 1)?);
    }
    let label_names = label_names.unwrap_or_else(|| {
        records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    encode_records(&records, label_names, vocab)
}

pub fn encode_records(
    records: &[LabeledRecord],
    label_names: Vec<String>,
    vocab: &Vocabulary,
) -> Result<LabeledCorpus> {
    let index: HashMap<&str, usize> =
        label_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let label = *index
            .get(r.label.as_str())
            .ok_or_else(|| Error::Invalid(format!("label `{}` not in label set", r.label)))?;
        examples.push(LabeledExample {
            ids: r.encode(vocab),
            label,
            protected: r.protected.clone(),
        });
    }
    LabeledCorpus::new(label_names, examples)
}

pub fn write_labeled(path: &Path, label_names: &[String], records: &[LabeledRecord]) -> Result<()> {
    let mut out = format!("#labels: {}\n", label_names.join(","));
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
