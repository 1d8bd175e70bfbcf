//! The two-phase procedure end to end: upstream debiasing, downstream
//! fine-tuning with the module frozen, evaluation, and per-run artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cda::{augment_with, AttributeTable};
use crate::checkpoint::{load_backbone, load_peft, save_backbone, save_peft};
use crate::config::{ExperimentConfig, GridConfig, Method, TaskMetric, UpstreamConfig, DownstreamConfig};
use crate::corpus::{
    load_bias_axis, load_corpus, load_labeled, AxisName, BiasAxis, Corpus, LabeledCorpus, TokenId, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, bias_nli_fn, binary_f1, crows_score, emit_report, fprd, generate_iptts, stereoset_scores, summary_table,
    tpr_gap, MetricReport, MinimalPair, RunMeta, StereoInstance,
};
use crate::metrics::templates::{load_identifiers, load_pairs, load_stereo, load_templates};
use crate::model::batch::{masked_lm_batch, Batch, Sampler};
use crate::model::params::{ModelConfig, TransformerParams};
use crate::model::train::{loss_value, train_step, Adam, AdamConfig, LossKind, TrainableSet};
use crate::model::predict;
use crate::peft::{init_peft, sft_select_mask, trainable_set, Composed, PeftKind, PeftParams, Phase, SftSelectConfig};

/// `(step or epoch, value)` pairs in evaluation order.
pub type Curve = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    MinLoss,
    MaxMetric,
}

/// Step of the best point; ties go to the earliest. `None` for an empty
/// curve.
pub fn select_checkpoint(curve: &[(usize, f64)], criterion: Criterion) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(step, v) in curve {
        let better = match best {
            None => true,
            Some((_, b)) => match criterion {
                Criterion::MinLoss => v < b,
                Criterion::MaxMetric => v > b,
            },
        };
        if better {
            best = Some((step, v));
        }
    }
    best.map(|(s, _)| s)
}

pub fn curve_tsv(value_name: &str, curve: &[(usize, f64)]) -> String {
    let mut out = format!("step\t{value_name}\n");
    for (s, v) in curve {
        let _ = writeln!(out, "{s}\t{v}");
    }
    out
}

/// Independent generator for one stage of one seeded run.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_UPSTREAM: u64 = 1;
const STREAM_DOWNSTREAM: u64 = 2;
const STREAM_HELDOUT: u64 = 3;
const STREAM_SFT: u64 = 4;

/// A trained artifact with its evaluation curve and the chosen point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained<T> {
    pub params: T,
    pub curve: Curve,
    pub selected: usize,
}

/// CDA-augmented train and held-out documents. The split is by document
/// index before augmentation, so counterfactuals of a held-out document
/// stay held out.
pub fn augmented_split(corpus: &Corpus, axis: &BiasAxis, vocab: &Vocabulary, cfg: &UpstreamConfig) -> Result<(Corpus, Corpus)> {
    if corpus.is_empty() {
        return Err(Error::Empty("upstream corpus has no documents".into()));
    }
    let table = AttributeTable::new(axis, vocab)?;
    let (train, held) = corpus.split_heldout(cfg.heldout);
    if held.is_empty() {
        return Err(Error::Empty("upstream corpus too small for a held-out slice".into()));
    }
    Ok((augment_with(&train, &table, cfg.two_sided), augment_with(&held, &table, cfg.two_sided)))
}

/// Masked once with its own stream so every evaluation sees the same
/// targets.
fn heldout_batch(docs: &[Vec<TokenId>], cfg: &UpstreamConfig, vocab_size: usize, seed: u64) -> Result<Batch> {
    masked_lm_batch(docs, cfg.mask_prob, vocab_size, &mut stage_rng(seed, STREAM_HELDOUT))
}

/// MLM training of whatever `trainable` selects, with held-out evaluation
/// at step 0 and every `eval_interval` steps. Returns the curve and a
/// snapshot of the trained vector at each evaluation.
#[allow(clippy::too_many_arguments)]
fn train_mlm<R: Rng>(
    backbone: &mut TransformerParams,
    mut peft: Option<&mut PeftParams>,
    trainable: &TrainableSet,
    docs: &[Vec<TokenId>],
    heldout: &Batch,
    cfg: &UpstreamConfig,
    lr: f64,
    rng: &mut R,
) -> Result<(Curve, Vec<Vec<f64>>)> {
    let on_peft = trainable.any_peft();
    let snapshot = |b: &TransformerParams, p: Option<&PeftParams>| {
        if on_peft {
            p.expect("peft trainable").data.clone()
        } else {
            b.data.clone()
        }
    };
    let eval = |b: &TransformerParams, p: Option<&PeftParams>, step: usize| -> Result<f64> {
        let loss = loss_value(&Composed::new(b, p)?, heldout, &LossKind::Mlm)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        Ok(loss)
    };
    let mut curve = vec![(0, eval(backbone, peft.as_deref(), 0)?)];
    let mut snaps = vec![snapshot(backbone, peft.as_deref())];
    if cfg.steps == 0 {
        return Ok((curve, snaps));
    }
    let mut adam = Adam::new(
        AdamConfig::with_lr(lr),
        backbone.num_params(),
        peft.as_deref().map_or(0, PeftParams::num_params),
    );
    let mut sampler = Sampler::new(docs.len(), cfg.batch_size)?;
    let v = backbone.config.vocab_size;
    for step in 1..=cfg.steps {
        let seqs: Vec<Vec<TokenId>> = sampler.next_batch(rng).iter().map(|&i| docs[i].clone()).collect();
        let batch = masked_lm_batch(&seqs, cfg.mask_prob, v, rng)?;
        let loss = train_step(backbone, peft.as_deref_mut(), &batch, &LossKind::Mlm, trainable, &mut adam)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            curve.push((step, eval(backbone, peft.as_deref(), step)?));
            snaps.push(snapshot(backbone, peft.as_deref()));
        }
    }
    Ok((curve, snaps))
}

fn pick(curve: &Curve, snaps: Vec<Vec<f64>>, criterion: Criterion) -> (usize, Vec<f64>) {
    let step = select_checkpoint(curve, criterion).expect("curve starts with step 0");
    let i = curve.iter().position(|&(s, _)| s == step).expect("selected step is on the curve");
    (step, snaps.into_iter().nth(i).expect("one snapshot per point"))
}

/// Upstream debiasing: CDA along `axis`, then MLM training of a fresh module
/// of `kind` with the backbone frozen. Returns the lowest held-out loss
/// checkpoint.
pub fn upstream_debias<R: Rng>(
    backbone: &TransformerParams,
    kind: PeftKind,
    corpus: &Corpus,
    axis: &BiasAxis,
    vocab: &Vocabulary,
    cfg: &UpstreamConfig,
    seed: u64,
    rng: &mut R,
) -> Result<Trained<PeftParams>> {
    if kind == PeftKind::None {
        return Err(Error::Config(
            "upstream debiasing needs a PEFT kind; full-backbone debiasing is full_debias_upstream".into(),
        ));
    }
    let (train, held) = augmented_split(corpus, axis, vocab, cfg)?;
    let heldout = heldout_batch(&held.documents, cfg, backbone.config.vocab_size, seed)?;
    let mut peft = if kind == PeftKind::Sft {
        let select = SftSelectConfig {
            budget_fraction: cfg.budget_fraction,
            steps: cfg.sft_dense_steps,
            lr: cfg.sft_dense_lr.unwrap_or(cfg.lr),
            batch_size: cfg.batch_size,
            mask_prob: cfg.mask_prob,
        };
        sft_select_mask(backbone, &train.documents, &select, &mut stage_rng(seed, STREAM_SFT))?
    } else {
        init_peft(kind, backbone, cfg.budget_fraction, rng)?
    };
    let mut work = backbone.clone();
    let trainable = trainable_set(&work, Some(&peft), Phase::Upstream);
    let (curve, snaps) = train_mlm(&mut work, Some(&mut peft), &trainable, &train.documents, &heldout, cfg, cfg.lr, rng)?;
    if work.data != backbone.data {
        return Err(Error::Invalid("upstream training wrote to the frozen backbone".into()));
    }
    let (selected, data) = pick(&curve, snaps, Criterion::MinLoss);
    peft.data = data;
    Ok(Trained {
        params: peft,
        curve,
        selected,
    })
}

/// The Full-Debias baseline: the same CDA + MLM objective over every
/// backbone coordinate. Returns a new backbone.
pub fn full_debias_upstream<R: Rng>(
    backbone: &TransformerParams,
    corpus: &Corpus,
    axis: &BiasAxis,
    vocab: &Vocabulary,
    cfg: &UpstreamConfig,
    seed: u64,
    rng: &mut R,
) -> Result<Trained<TransformerParams>> {
    let (train, held) = augmented_split(corpus, axis, vocab, cfg)?;
    let heldout = heldout_batch(&held.documents, cfg, backbone.config.vocab_size, seed)?;
    let mut work = backbone.clone();
    let trainable = TrainableSet::whole_backbone(&work, 0);
    let (curve, snaps) = train_mlm(&mut work, None, &trainable, &train.documents, &heldout, cfg, cfg.lr, rng)?;
    let (selected, data) = pick(&curve, snaps, Criterion::MinLoss);
    work.data = data;
    Ok(Trained {
        params: work,
        curve,
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

/// MLM pretraining from random init. Used to build desk-scale backbones.
pub fn pretrain_backbone(cfg: &PretrainConfig, corpus: &Corpus) -> Result<(TransformerParams, Curve)> {
    let mut rng = stage_rng(cfg.seed, 0);
    let mut params = TransformerParams::init(cfg.model, &mut rng)?;
    let up = UpstreamConfig {
        lr: cfg.lr,
        steps: cfg.steps,
        eval_interval: (cfg.steps / 10).max(1),
        batch_size: cfg.batch_size,
        mask_prob: cfg.mask_prob,
        ..UpstreamConfig::default()
    };
    let (train, held) = corpus.split_heldout(up.heldout);
    let heldout = heldout_batch(&held.documents, &up, cfg.model.vocab_size, cfg.seed)?;
    let trainable = TrainableSet::whole_backbone(&params, 0);
    let (curve, _) = train_mlm(&mut params, None, &trainable, &train.documents, &heldout, &up, cfg.lr, &mut rng)?;
    Ok((params, curve))
}

/// Index of the positive class: the configured label, else class 1 of a
/// binary task.
pub fn positive_class(label_names: &[String], cfg: &DownstreamConfig) -> Result<Option<usize>> {
    match &cfg.positive_label {
        Some(name) => label_names
            .iter()
            .position(|l| l == name)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("positive label `{name}` is not a task label"))),
        None => Ok((label_names.len() == 2).then_some(1)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub trained: Trained<TransformerParams>,
    pub warnings: Vec<String>,
}

/// Downstream fine-tuning of backbone and task head with `peft` injected and
/// frozen. The last `heldout` fraction of `data` selects the epoch with the
/// best task metric (epoch 0 is the starting model). A backbone whose head
/// has a different label count gets a fresh head first.
pub fn downstream_finetune<R: Rng>(
    backbone: &TransformerParams,
    peft: Option<&PeftParams>,
    data: &LabeledCorpus,
    cfg: &DownstreamConfig,
    rng: &mut R,
) -> Result<Finetuned> {
    let c = data.num_classes();
    if c < 2 {
        return Err(Error::Invalid(format!("task has {c} labels")));
    }
    if !cfg.class_weights.is_empty() && cfg.class_weights.len() != c {
        return Err(Error::Config(format!("{} class weights for {c} labels", cfg.class_weights.len())));
    }
    let mut warnings = Vec::new();
    let counts = data.examples.iter().fold(vec![0usize; c], |mut acc, e| {
        acc[e.label] += 1;
        acc
    });
    for (name, _) in data.label_names.iter().zip(&counts).filter(|(_, &n)| n == 0) {
        warnings.push(format!("label `{name}` has no training example"));
    }
    let positive = positive_class(&data.label_names, cfg)?;
    let mut work = if backbone.config.num_classes == c {
        backbone.clone()
    } else {
        backbone.with_task_head(c, rng)?
    };
    let mut frozen = peft.cloned();
    let (train, held) = data.split_heldout(cfg.heldout);
    if train.is_empty() || held.is_empty() {
        return Err(Error::Empty("task corpus too small for a held-out slice".into()));
    }
    let held_seqs: Vec<Vec<TokenId>> = held.examples.iter().map(|e| e.ids.clone()).collect();
    let metric = |b: &TransformerParams, p: Option<&PeftParams>| -> Result<f64> {
        let preds = predict(&Composed::new(b, p)?, &held_seqs)?;
        match cfg.metric {
            TaskMetric::Acc => accuracy(&preds, &held),
            TaskMetric::F1 => {
                let pos = positive.ok_or_else(|| Error::Config("F1 selection needs a positive label".into()))?;
                binary_f1(&preds, &held, pos)
            }
        }
    };
    let mut curve = vec![(0, metric(&work, frozen.as_ref())?)];
    let mut snaps = vec![work.data.clone()];
    let loss = LossKind::Classification {
        class_weights: (!cfg.class_weights.is_empty()).then(|| cfg.class_weights.clone()),
    };
    let trainable = trainable_set(&work, frozen.as_ref(), Phase::Downstream);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), work.num_params(), trainable.peft.len());
    let mut sampler = Sampler::new(train.len(), cfg.batch_size)?;
    let per_epoch = (train.len() / cfg.batch_size.min(train.len())).max(1);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        for _ in 0..per_epoch {
            step += 1;
            let idx = sampler.next_batch(rng);
            let seqs: Vec<Vec<TokenId>> = idx.iter().map(|&i| train.examples[i].ids.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.examples[i].label).collect();
            let batch = Batch::classification(&seqs, &labels)?;
            let l = train_step(&mut work, frozen.as_mut(), &batch, &loss, &trainable, &mut adam)?;
            if !l.is_finite() || !work.all_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
        }
        curve.push((epoch, metric(&work, frozen.as_ref())?));
        snaps.push(work.data.clone());
    }
    if frozen.as_ref() != peft {
        return Err(Error::Invalid("downstream training wrote to the frozen module".into()));
    }
    let (selected, data) = pick(&curve, snaps, Criterion::MaxMetric);
    work.data = data;
    Ok(Finetuned {
        trained: Trained {
            params: work,
            curve,
            selected,
        },
        warnings,
    })
}

/// Refuses a module trained for one axis on a task annotated for another.
pub fn check_transfer_axis(module: Option<AxisName>, task: Option<AxisName>, allow: bool) -> Result<()> {
    match (module, task) {
        (Some(m), Some(t)) if m != t && !allow => Err(Error::AxisMismatch {
            module: m.to_string(),
            task: t.to_string(),
        }),
        _ => Ok(()),
    }
}

/// Probe sets and template sets for one run, already tokenized.
#[derive(Debug, Clone, Default)]
pub struct EvalSuite {
    pub stereoset: Vec<StereoInstance>,
    pub crows: Vec<MinimalPair>,
    pub iptts: Option<LabeledCorpus>,
    pub identifiers: Vec<String>,
    pub nli: Option<LabeledCorpus>,
    pub neutral: Option<usize>,
}

impl EvalSuite {
    pub fn load(cfg: &ExperimentConfig, vocab: &Vocabulary, label_names: &[String]) -> Result<Self> {
        let e = &cfg.eval;
        let mut suite = EvalSuite::default();
        if let Some(p) = &e.stereoset {
            suite.stereoset = load_stereo(p, vocab)?;
        }
        if let Some(p) = &e.crows {
            suite.crows = load_pairs(p, vocab)?;
        }
        if let Some(p) = &e.identifiers {
            suite.identifiers = load_identifiers(p)?;
        }
        if let Some(p) = &e.iptts_templates {
            if suite.identifiers.is_empty() {
                return Err(Error::Config("identity templates need an identifier list".into()));
            }
            let templates = load_templates(p)?;
            suite.iptts = Some(generate_iptts(&templates, &suite.identifiers, label_names.to_vec(), vocab)?);
        }
        if let Some(p) = &e.nli {
            let nli = load_labeled(p, vocab)?;
            if nli.label_names != label_names {
                return Err(Error::Config(format!(
                    "{}: labels {:?} differ from the task's {:?}",
                    p.display(),
                    nli.label_names,
                    label_names
                )));
            }
            suite.nli = Some(nli);
            let name = e
                .neutral_label
                .as_deref()
                .ok_or_else(|| Error::Config("eval.nli needs eval.neutral_label".into()))?;
            suite.neutral = Some(
                label_names
                    .iter()
                    .position(|l| l == name)
                    .ok_or_else(|| Error::Config(format!("neutral label `{name}` is not a task label")))?,
            );
        }
        Ok(suite)
    }
}

fn sequences(c: &LabeledCorpus) -> Vec<Vec<TokenId>> {
    c.examples.iter().map(|e| e.ids.clone()).collect()
}

/// Intrinsic metrics on the upstream model, extrinsic metrics on the final
/// model over `test`.
pub fn evaluate(
    upstream: &Composed<'_>,
    model: &Composed<'_>,
    test: &LabeledCorpus,
    suite: &EvalSuite,
    positive: Option<usize>,
    report: &mut MetricReport,
) -> Result<()> {
    if !suite.stereoset.is_empty() {
        let s = stereoset_scores(upstream, &suite.stereoset)?;
        report.ss_lm = Some(s.lm_score);
        report.ss_score = Some(s.ss_score);
    }
    if !suite.crows.is_empty() {
        report.crows = Some(crows_score(upstream, &suite.crows)?);
    }
    let preds = predict(model, &sequences(test))?;
    report.acc = Some(accuracy(&preds, test)?);
    if let Some(pos) = positive {
        report.f1 = Some(binary_f1(&preds, test, pos)?);
    }
    match test.annotated_axis() {
        Some(AxisName::Gender) if suite.nli.is_none() => {
            let g = tpr_gap(&preds, test)?;
            report.tpr_gap = Some(g.aggregate);
            report.tpr_gap_by_occupation = g.per_occupation;
        }
        Some(AxisName::Race) => {
            let pos = positive.ok_or_else(|| Error::Config("FPRD needs a positive label".into()))?;
            let ids = if suite.identifiers.is_empty() {
                let all: std::collections::BTreeSet<&String> =
                    test.examples.iter().flat_map(|e| &e.protected.race_mentions).collect();
                all.into_iter().cloned().collect()
            } else {
                suite.identifiers.clone()
            };
            let f = fprd(&preds, test, &ids, pos)?;
            report.fprd = Some(f.total);
            report.fprd_by_identifier = f.per_identifier;
            if let Some(iptts) = &suite.iptts {
                let f = fprd(&predict(model, &sequences(iptts))?, iptts, &ids, pos)?;
                report.fprd_iptts = Some(f.total);
                report.fprd_iptts_by_identifier = f.per_identifier;
            }
        }
        _ => {}
    }
    if let (Some(nli), Some(neutral)) = (&suite.nli, suite.neutral) {
        report.fn_neutral = Some(bias_nli_fn(&predict(model, &sequences(nli))?, neutral)?);
    }
    Ok(())
}

/// What one experiment leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    /// The upstream module (PEFT methods) or debiased backbone (Full-Debias).
    pub upstream_checkpoint: Option<PathBuf>,
    pub downstream_checkpoint: PathBuf,
    pub upstream_curve: Curve,
    pub downstream_curve: Curve,
    pub report: MetricReport,
    pub warnings: Vec<String>,
}

pub const CONFIG_ECHO: &str = "config.toml";
pub const UPSTREAM_CKPT: &str = "upstream.ckpt";
pub const DOWNSTREAM_CKPT: &str = "downstream.ckpt";
pub const UPSTREAM_CURVE: &str = "upstream_curve.tsv";
pub const DOWNSTREAM_CURVE: &str = "downstream_curve.tsv";

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// The run directory of `cfg` under `root`.
pub fn run_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    root.join(&cfg.name)
}

/// Inputs every stage needs, loaded and checked.
pub struct RunInputs {
    pub vocab: Vocabulary,
    pub backbone: TransformerParams,
    pub axis: BiasAxis,
    pub train: LabeledCorpus,
    pub test: LabeledCorpus,
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<RunInputs> {
    let load = || -> Result<RunInputs> {
        cfg.validate()?;
        let vocab = Vocabulary::load(&cfg.data.vocab)?;
        let (backbone, _) = load_backbone(&cfg.data.backbone)?;
        if backbone.config.vocab_size != vocab.len() {
            return Err(Error::Shape(format!(
                "backbone has {} embeddings for a vocabulary of {}",
                backbone.config.vocab_size,
                vocab.len()
            )));
        }
        let axis = load_bias_axis(&cfg.data.axis_file)?;
        if axis.name != cfg.axis {
            return Err(Error::Config(format!("axis file describes {}, config says {}", axis.name, cfg.axis)));
        }
        let train = load_labeled(&cfg.data.train, &vocab)?;
        let test = load_labeled(&cfg.data.test, &vocab)?;
        if test.label_names != train.label_names {
            return Err(Error::Config("train and test label sets differ".into()));
        }
        Ok(RunInputs {
            vocab,
            backbone,
            axis,
            train,
            test,
        })
    };
    load().map_err(|e| e.in_stage("load"))
}

fn prepare_dir(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let dir = run_dir(cfg, root);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(dir.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    Ok(dir)
}

/// The upstream stage. Trains (or, for transfer runs, checks and copies)
/// the module, or the debiased backbone for Full-Debias, into the run
/// directory. Returns the checkpoint and curve; FT has neither.
pub fn stage_upstream(cfg: &ExperimentConfig, inputs: &RunInputs, root: &Path) -> Result<(Option<PathBuf>, Curve)> {
    let run = || -> Result<(Option<PathBuf>, Curve)> {
        let dir = prepare_dir(cfg, root)?;
        let path = dir.join(UPSTREAM_CKPT);
        let mut rng = stage_rng(cfg.seed, STREAM_UPSTREAM);
        let curve = match (cfg.method, &cfg.transfer.peft) {
            (Method::Ft, _) => return Ok((None, Vec::new())),
            (_, Some(source)) => {
                let (ck, _) = load_peft(source)?;
                if ck.peft.kind != cfg.method.peft_kind() {
                    return Err(Error::Config(format!(
                        "{} holds a {} module, config asks for {}",
                        source.display(),
                        ck.peft.kind,
                        cfg.method
                    )));
                }
                ck.peft.check_compatible(&inputs.backbone)?;
                let task_axis = inputs.train.annotated_axis().or(Some(cfg.axis));
                check_transfer_axis(ck.axis, task_axis, cfg.transfer.allow_axis_mismatch)?;
                save_peft(&path, &ck.peft, ck.axis, None)?;
                Vec::new()
            }
            (method, None) => {
                let corpus = load_corpus(&cfg.data.upstream_corpus, &inputs.vocab)?;
                let (b, v, a) = (&inputs.backbone, &inputs.vocab, &inputs.axis);
                if method == Method::FullDebias {
                    let t = full_debias_upstream(b, &corpus, a, v, &cfg.upstream, cfg.seed, &mut rng)?;
                    save_backbone(&path, &t.params, Some(&rng))?;
                    t.curve
                } else {
                    let t = upstream_debias(b, method.peft_kind(), &corpus, a, v, &cfg.upstream, cfg.seed, &mut rng)?;
                    save_peft(&path, &t.params, Some(cfg.axis), Some(&rng))?;
                    t.curve
                }
            }
        };
        if !curve.is_empty() {
            write_text(dir.join(UPSTREAM_CURVE), &curve_tsv("heldout_mlm_loss", &curve))?;
        }
        Ok((Some(path), curve))
    };
    run().map_err(|e| e.in_stage(if cfg.transfer.peft.is_some() { "transfer" } else { "upstream" }))
}

/// Backbone and module the downstream stage starts from.
fn upstream_result(cfg: &ExperimentConfig, inputs: &RunInputs, dir: &Path) -> Result<(TransformerParams, Option<PeftParams>)> {
    let path = dir.join(UPSTREAM_CKPT);
    match cfg.method {
        Method::Ft => Ok((inputs.backbone.clone(), None)),
        Method::FullDebias => Ok((load_backbone(&path)?.0, None)),
        _ => {
            let (ck, _) = load_peft(&path)?;
            Ok((inputs.backbone.clone(), Some(ck.peft)))
        }
    }
}

/// The downstream stage: fine-tunes from the upstream result in the run
/// directory and writes the selected model.
pub fn stage_downstream(cfg: &ExperimentConfig, inputs: &RunInputs, root: &Path) -> Result<(PathBuf, Curve, Vec<String>)> {
    let run = || -> Result<(PathBuf, Curve, Vec<String>)> {
        let dir = prepare_dir(cfg, root)?;
        let (base, peft) = upstream_result(cfg, inputs, &dir)?;
        let mut rng = stage_rng(cfg.seed, STREAM_DOWNSTREAM);
        let tuned = downstream_finetune(&base, peft.as_ref(), &inputs.train, &cfg.downstream, &mut rng)?;
        let path = dir.join(DOWNSTREAM_CKPT);
        save_backbone(&path, &tuned.trained.params, Some(&rng))?;
        let metric = match cfg.downstream.metric {
            TaskMetric::Acc => "heldout_acc",
            TaskMetric::F1 => "heldout_f1",
        };
        write_text(dir.join(DOWNSTREAM_CURVE), &curve_tsv(metric, &tuned.trained.curve))?;
        Ok((path, tuned.trained.curve, tuned.warnings))
    };
    run().map_err(|e| e.in_stage("downstream"))
}

/// The evaluation stage: scores the upstream model intrinsically and the
/// downstream model extrinsically, and writes the report.
pub fn stage_evaluate(cfg: &ExperimentConfig, inputs: &RunInputs, root: &Path) -> Result<MetricReport> {
    let run = || -> Result<MetricReport> {
        let dir = run_dir(cfg, root);
        let (base, peft) = upstream_result(cfg, inputs, &dir)?;
        let (model, _) = load_backbone(&dir.join(DOWNSTREAM_CKPT))?;
        let suite = EvalSuite::load(cfg, &inputs.vocab, &inputs.train.label_names)?;
        let positive = positive_class(&inputs.train.label_names, &cfg.downstream)?;
        let mut report = MetricReport::new(RunMeta {
            name: cfg.name.clone(),
            method: cfg.method.to_string(),
            axis: Some(cfg.axis),
            task: cfg.task.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            transfer_from: cfg
                .transfer
                .peft
                .as_ref()
                .map(|p| cfg.transfer.source_run.clone().unwrap_or_else(|| p.display().to_string())),
        });
        let up_view = Composed::new(&base, peft.as_ref())?;
        let final_view = Composed::new(&model, peft.as_ref())?;
        evaluate(&up_view, &final_view, &inputs.test, &suite, positive, &mut report)?;
        emit_report(&report, &dir)?;
        Ok(report)
    };
    run().map_err(|e| e.in_stage("evaluate"))
}

/// Upstream, downstream and evaluation into `root/<name>`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunArtifacts> {
    let inputs = load_inputs(cfg)?;
    let (upstream_checkpoint, upstream_curve) = stage_upstream(cfg, &inputs, root)?;
    let (downstream_checkpoint, downstream_curve, warnings) = stage_downstream(cfg, &inputs, root)?;
    let report = stage_evaluate(cfg, &inputs, root)?;
    Ok(RunArtifacts {
        dir: run_dir(cfg, root),
        upstream_checkpoint,
        downstream_checkpoint,
        upstream_curve,
        downstream_curve,
        report,
        warnings,
    })
}

/// `cfg` run with the module in `peft` instead of an upstream phase.
pub fn transfer_run(peft: &Path, cfg: &ExperimentConfig, root: &Path) -> Result<RunArtifacts> {
    let mut cfg = cfg.clone();
    cfg.transfer.peft = Some(peft.to_path_buf());
    run_experiment(&cfg, root)
}

/// One cell of a grid: a resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    /// Experiment name (task) the cell belongs to, for table rows.
    pub experiment: String,
    pub config: ExperimentConfig,
}

/// Expands a grid into cells: every experiment x method x seed, then every
/// transfer target x PEFT method x seed together with the target's FT
/// baseline. The second list depends on the first.
pub fn expand_grid(grid: &GridConfig, root: &Path) -> Result<(Vec<GridCell>, Vec<GridCell>)> {
    let mut first = Vec::new();
    let mut bases = BTreeMap::new();
    for path in &grid.experiments {
        let base = crate::config::parse_config(path, &grid.overrides)?;
        for &method in &grid.methods {
            for &seed in &grid.seeds {
                let mut c = base.clone();
                c.method = method;
                c.seed = seed;
                c.name = format!("{}-{}-s{seed}", base.name, method);
                c.validate()?;
                first.push(GridCell {
                    experiment: base.name.clone(),
                    config: c,
                });
            }
        }
        bases.insert(path.clone(), base);
    }
    let mut second = Vec::new();
    for t in &grid.transfer {
        let source = bases
            .get(&t.source)
            .ok_or_else(|| Error::Config(format!("transfer source {} is not a grid experiment", t.source.display())))?;
        let target = crate::config::parse_config(&t.target, &grid.overrides)?;
        let label = format!("{}<-{}", target.name, source.name);
        for &seed in &grid.seeds {
            let mut c = target.clone();
            c.method = Method::Ft;
            c.seed = seed;
            c.name = format!("{}-ft-s{seed}", target.name);
            second.push(GridCell {
                experiment: target.name.clone(),
                config: c,
            });
        }
        for &method in grid.methods.iter().filter(|m| m.peft_kind() != PeftKind::None) {
            for &seed in &grid.seeds {
                let src = format!("{}-{}-s{seed}", source.name, method);
                let mut c = target.clone();
                c.method = method;
                c.seed = seed;
                c.name = format!("{}-{}-from-{}-s{seed}", target.name, method, source.name);
                c.transfer.peft = Some(root.join(&src).join(UPSTREAM_CKPT));
                c.transfer.source_run = Some(src);
                c.validate()?;
                second.push(GridCell {
                    experiment: label.clone(),
                    config: c,
                });
            }
        }
    }
    Ok((first, second))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub cells: Vec<(GridCell, MetricReport)>,
    pub summary_path: PathBuf,
    pub table_path: PathBuf,
    pub occupations_path: PathBuf,
}

fn run_cells(cells: &[GridCell], root: &Path) -> Vec<Result<MetricReport>> {
    cells
        .par_iter()
        .map(|c| {
            run_experiment(&c.config, root)
                .map(|a| a.report)
                .map_err(|e| Error::Invalid(format!("{}: {e}", c.config.name)))
        })
        .collect()
}

/// Runs every cell with at most `jobs` experiments in flight and writes the
/// combined tables into `root`.
pub fn run_grid(grid: &GridConfig, root: &Path, jobs: usize) -> Result<GridOutcome> {
    let (first, second) = expand_grid(grid, root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut cells = Vec::new();
    for batch in [first, second] {
        let results = pool.install(|| run_cells(&batch, root));
        let mut failures = Vec::new();
        for (cell, r) in batch.into_iter().zip(results) {
            match r {
                Ok(report) => cells.push((cell, report)),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if !failures.is_empty() {
            return Err(Error::Invalid(format!("{} grid cell(s) failed:\n  {}", failures.len(), failures.join("\n  "))).in_stage("grid"));
        }
    }
    let reports: Vec<MetricReport> = cells.iter().map(|(_, r)| r.clone()).collect();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let summary_path = root.join("summary.tsv");
    write_text(summary_path.clone(), &summary_table(&reports))?;
    let table_path = root.join("table.tsv");
    write_text(table_path.clone(), &mean_table(&cells))?;
    let occupations_path = root.join("tpr_gap_by_occupation.tsv");
    write_text(occupations_path.clone(), &occupation_long_table(&cells))?;
    Ok(GridOutcome {
        cells,
        summary_path,
        table_path,
        occupations_path,
    })
}

/// Seed-averaged metrics per (experiment, method), one row each, in grid
/// order.
pub fn mean_table(cells: &[(GridCell, MetricReport)]) -> String {
    let mut groups: Vec<((String, Method), Vec<&MetricReport>)> = Vec::new();
    for (cell, r) in cells {
        let key = (cell.experiment.clone(), cell.config.method);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = format!("experiment\tmethod\tseeds\t{}\n", crate::metrics::COLUMNS.join("\t"));
    for ((exp, method), rs) in groups {
        let cols: Vec<String> = (0..crate::metrics::COLUMNS.len())
            .map(|i| {
                let vals: Vec<f64> = rs.iter().filter_map(|r| r.values()[i]).collect();
                if vals.len() == rs.len() && !vals.is_empty() {
                    format!("{:.4}", vals.iter().sum::<f64>() / vals.len() as f64)
                } else {
                    "-".to_string()
                }
            })
            .collect();
        let _ = writeln!(out, "{exp}\t{}\t{}\t{}", method.display_name(), rs.len(), cols.join("\t"));
    }
    out
}

/// Per-occupation TPR gaps of every gender run, long format for plotting.
pub fn occupation_long_table(cells: &[(GridCell, MetricReport)]) -> String {
    let mut out = String::from("experiment\tmethod\tseed\toccupation\ttpr_female\ttpr_male\tgap\n");
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for (cell, r) in cells {
        for g in &r.tpr_gap_by_occupation {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                cell.experiment,
                cell.config.method.display_name(),
                cell.config.seed,
                g.occupation,
                na(g.tpr_female),
                na(g.tpr_male),
                na(g.gap)
            );
        }
    }
    out
}
