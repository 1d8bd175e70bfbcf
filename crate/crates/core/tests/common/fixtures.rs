//! A scaled-down synthetic suite for end-to-end tests.

use std::path::Path;

use peft_debias::config::{parse_config, ExperimentConfig};
use peft_debias::error::Error;
use peft_debias::synthetic::{prepare_fixtures, Fixtures, PretrainSettings, SuiteConfig};

pub const QUICK: [&str; 5] = [
    "upstream.steps=30",
    "upstream.eval_interval=10",
    "upstream.sft_dense_steps=10",
    "upstream.lr=0.003",
    "downstream.epochs=2",
];

pub fn small_fixtures(dir: &Path) -> Fixtures {
    let suite = SuiteConfig {
        pretrain_docs: 400,
        upstream_docs: 200,
        train: 128,
        test: 96,
        ..SuiteConfig::default()
    };
    let pre = PretrainSettings {
        steps: 60,
        ..PretrainSettings::default()
    };
    prepare_fixtures(dir, &suite, &pre).unwrap()
}

pub fn quick_config(path: &Path, extra: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = QUICK.iter().chain(extra).map(|s| s.to_string()).collect();
    parse_config(path, &overrides).unwrap()
}

/// The innermost error under any stage wrappers.
pub fn root_cause(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => root_cause(source),
        other => other,
    }
}
