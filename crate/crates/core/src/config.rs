//! Experiment configuration: a TOML file plus `key=value` overrides.
//!
//! Relative paths resolve against the file's directory at parse time, so the
//! echoed configuration is self-contained and parses back to an identical
//! value.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::AxisName;
use crate::error::{Error, Result};
use crate::peft::PeftKind;

pub const CONFIG_SCHEMA: u32 = 1;

/// What the upstream phase does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No upstream phase: plain fine-tuning.
    Ft,
    /// Upstream MLM on augmented text over the whole backbone.
    FullDebias,
    Adapter,
    Prompt,
    Lora,
    Sft,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ft,
        Method::FullDebias,
        Method::Adapter,
        Method::Prompt,
        Method::Lora,
        Method::Sft,
    ];

    pub fn peft_kind(self) -> PeftKind {
        match self {
            Method::Adapter => PeftKind::Adapter,
            Method::Prompt => PeftKind::Prompt,
            Method::Lora => PeftKind::LoRA,
            Method::Sft => PeftKind::Sft,
            Method::Ft | Method::FullDebias => PeftKind::None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::FullDebias => "full-debias",
            Method::Adapter => "adapter",
            Method::Prompt => "prompt",
            Method::Lora => "lora",
            Method::Sft => "sft",
        }
    }

    /// Row label in summary tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Ft => "FT",
            Method::FullDebias => "Full-Debias",
            other => other.peft_kind().display_name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMetric {
    Acc,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: PathBuf,
    /// Pretrained backbone checkpoint.
    pub backbone: PathBuf,
    pub axis_file: PathBuf,
    /// Unlabeled text for the upstream phase, one document per line.
    pub upstream_corpus: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpstreamConfig {
    pub lr: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub budget_fraction: f64,
    pub sft_dense_steps: usize,
    pub sft_dense_lr: Option<f64>,
    pub two_sided: bool,
    pub heldout: f64,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            steps: 1000,
            eval_interval: 100,
            batch_size: 16,
            mask_prob: 0.15,
            budget_fraction: 0.01,
            sft_dense_steps: 1000,
            sft_dense_lr: None,
            two_sided: true,
            heldout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// One weight per class in label order; empty means unweighted.
    pub class_weights: Vec<f64>,
    pub metric: TaskMetric,
    /// Positive class for F1 and false-positive rates.
    pub positive_label: Option<String>,
    pub heldout: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 32,
            epochs: 10,
            class_weights: Vec::new(),
            metric: TaskMetric::Acc,
            positive_label: None,
            heldout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub stereoset: Option<PathBuf>,
    pub crows: Option<PathBuf>,
    pub iptts_templates: Option<PathBuf>,
    pub identifiers: Option<PathBuf>,
    /// Bias-NLI pairs whose unbiased answer is `neutral_label`.
    pub nli: Option<PathBuf>,
    pub neutral_label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Upstream module checkpoint from another run.
    pub peft: Option<PathBuf>,
    pub source_run: Option<String>,
    pub allow_axis_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    pub name: String,
    pub method: Method,
    pub axis: AxisName,
    pub task: String,
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub upstream: UpstreamConfig,
    #[serde(default)]
    pub downstream: DownstreamConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

fn schema() -> u32 {
    CONFIG_SCHEMA
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn de_error(e: toml::de::Error, text: &str, source: &str) -> Error {
    let msg = e.message().to_string();
    let line = e.span().map_or(0, |s| line_of(text, s.start));
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        let key = rest.split('`').next().unwrap_or_default();
        return Error::UnknownKey(format!("{key}` ({source}:{line})"));
    }
    Error::Parse {
        path: source.to_string(),
        line,
        msg,
    }
}

/// A `key=value` override. Dotted keys address tables; the value is parsed
/// as a TOML value and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn parse_str(text: &str, source: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| de_error(e, text, source))?;
        // Validate the file on its own first so errors carry file lines.
        let _: ExperimentConfig = toml::from_str(text).map_err(|e| de_error(e, text, source))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| Error::Serialization(e.to_string()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&merged).map_err(|e| de_error(e, &merged, &format!("{source} (after overrides)")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != CONFIG_SCHEMA {
            return bad(format!("unsupported config schema {}", self.schema));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("run name `{}` must be a non-empty path component", self.name));
        }
        let u = &self.upstream;
        let d = &self.downstream;
        if !(u.lr > 0.0 && d.lr > 0.0 && u.sft_dense_lr.is_none_or(|x| x > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if u.eval_interval == 0 || (u.steps > 0 && u.eval_interval > u.steps) {
            return bad(format!(
                "eval_interval {} must be in 1..=steps ({})",
                u.eval_interval, u.steps
            ));
        }
        if u.batch_size == 0 || d.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(u.mask_prob > 0.0 && u.mask_prob < 1.0) {
            return bad(format!("mask_prob {} outside (0, 1)", u.mask_prob));
        }
        if !(u.budget_fraction > 0.0 && u.budget_fraction < 1.0) {
            return bad(format!("budget_fraction {} outside (0, 1)", u.budget_fraction));
        }
        for (name, h) in [("upstream", u.heldout), ("downstream", d.heldout)] {
            if !(h > 0.0 && h < 1.0) {
                return bad(format!("{name}.heldout {h} outside (0, 1)"));
            }
        }
        if d.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("class weights must be positive".into());
        }
        if self.method == Method::Sft && u.sft_dense_steps == 0 {
            return bad("sft needs sft_dense_steps >= 1".into());
        }
        if self.transfer.peft.is_some() && self.method.peft_kind() == PeftKind::None {
            return bad(format!("transfer needs a PEFT method, not {}", self.method));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.vocab, &mut d.backbone, &mut d.axis_file, &mut d.upstream_corpus, &mut d.train, &mut d.test] {
            fix(p);
        }
        let e = &mut self.eval;
        for p in [
            &mut e.stereoset,
            &mut e.crows,
            &mut e.iptts_templates,
            &mut e.identifiers,
            &mut e.nli,
            &mut self.transfer.peft,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// The resolved configuration as TOML; parses back to `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Reads `path`, applies `overrides` in order, resolves relative paths
/// against the file's directory and validates.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::parse_str(&text, &path.display().to_string(), overrides)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
    cfg.resolve_paths(&base);
    Ok(cfg)
}

/// A transfer pairing: PEFT runs of `source` reused on `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPair {
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Experiment configs x methods x seeds, plus transfer pairings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub experiments: Vec<PathBuf>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "one_seed")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub transfer: Vec<TransferPair>,
    /// Applied to every cell, before the per-cell method and seed.
    #[serde(default)]
    pub overrides: Vec<String>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn one_seed() -> Vec<u64> {
    vec![13]
}

/// Reads a grid file; relative paths resolve against its directory.
pub fn parse_grid(path: &Path) -> Result<GridConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut g: GridConfig = toml::from_str(&text).map_err(|e| de_error(e, &text, &source))?;
    if g.experiments.is_empty() || g.methods.is_empty() || g.seeds.is_empty() {
        return Err(Error::Config(format!("{source}: grid needs experiments, methods and seeds")));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = std::path::absolute(&base).map_err(|e| Error::io(&base, e))?;
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    g.experiments.iter_mut().for_each(fix);
    for t in &mut g.transfer {
        fix(&mut t.source);
        fix(&mut t.target);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "adapter-gender"
method = "adapter"
axis = "gender"
task = "bios"
seed = 13

[data]
vocab = "vocab.txt"
backbone = "backbone.ckpt"
axis_file = "gender.txt"
upstream_corpus = "upstream.txt"
train = "train.tsv"
test = "test.tsv"
"#;

    fn parse(text: &str, o: &[&str]) -> Result<ExperimentConfig> {
        let o: Vec<String> = o.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::parse_str(text, "exp.toml", &o)
    }

    #[test]
    fn defaults_resolve() {
        let c = parse(MINIMAL, &[]).unwrap();
        assert_eq!(c.upstream.lr, 1e-5);
        assert_eq!(c.upstream.budget_fraction, 0.01);
        assert_eq!(c.downstream.batch_size, 32);
        assert_eq!(c.downstream.epochs, 10);
        assert_eq!(c.method, Method::Adapter);
    }

    #[test]
    fn overrides_take_precedence() {
        let c = parse(MINIMAL, &["seed=7", "upstream.lr=0.001", "downstream.class_weights=[1.0, 10.0]", "method=sft"])
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.upstream.lr, 1e-3);
        assert_eq!(c.downstream.class_weights, vec![1.0, 10.0]);
        assert_eq!(c.method, Method::Sft);
        assert!(parse(MINIMAL, &["seed"]).is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = MINIMAL.replace("[data]", "learning_rte = 3\n[data]");
        let e = parse(&text, &[]).unwrap_err();
        assert!(matches!(e, Error::UnknownKey(_)), "{e:?}");
        assert!(e.to_string().contains("learning_rte"), "{e}");
        assert!(e.to_string().contains("exp.toml:8"), "{e}");
        let e = parse(MINIMAL, &["upstream.learning_rte=1"]).unwrap_err();
        assert!(e.to_string().contains("learning_rte"), "{e}");
    }

    #[test]
    fn type_and_syntax_errors_carry_lines() {
        let e = parse(&MINIMAL.replace("seed = 13", "seed = \"x\""), &[]).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 6, .. }), "{e:?}");
        let e = parse(&MINIMAL.replace("task = \"bios\"", "task = "), &[]).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 5, .. }), "{e:?}");
    }

    #[test]
    fn validation() {
        assert!(parse(MINIMAL, &["upstream.eval_interval=5000"]).is_err());
        assert!(parse(MINIMAL, &["upstream.lr=0"]).is_err());
        assert!(parse(MINIMAL, &["name=a/b"]).is_err());
        assert!(parse(MINIMAL, &["method=ft", "transfer.peft=x.ckpt"]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let c = parse_config(&path, &["eval.crows=pairs.tsv".into(), "upstream.lr=0.1".into()]).unwrap();
        assert!(c.data.vocab.is_absolute());
        assert_eq!(c.eval.crows.as_deref(), Some(dir.path().join("pairs.tsv").as_path()));
        let echo = c.to_toml().unwrap();
        let echo_path = dir.path().join("sub").join("resolved.toml");
        std::fs::create_dir_all(echo_path.parent().unwrap()).unwrap();
        std::fs::write(&echo_path, &echo).unwrap();
        let back = parse_config(&echo_path, &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn grid_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.toml");
        std::fs::write(&path, "experiments = [\"bios.toml\"]\n[[transfer]]\nsource = \"bios.toml\"\ntarget = \"nli.toml\"\n").unwrap();
        let g = parse_grid(&path).unwrap();
        assert_eq!(g.methods.len(), 6);
        assert_eq!(g.seeds, vec![13]);
        assert_eq!(g.experiments[0], g.transfer[0].source);
        assert!(g.transfer[0].target.is_absolute());
        std::fs::write(&path, "experiments = []\n").unwrap();
        assert!(parse_grid(&path).is_err());
        std::fs::write(&path, "experiments = [\"a\"]\njobs = 3\n").unwrap();
        assert!(matches!(parse_grid(&path), Err(Error::UnknownKey(_))));
    }
}
