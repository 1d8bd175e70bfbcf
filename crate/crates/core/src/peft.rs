//! Parameter-efficient modules: bottleneck adapters, soft prompts, low-rank
//! updates on the query/value projections, and sparse backbone deltas.
//!
//! Every kind is stored as one flat vector described by a [`Layout`], so
//! optimizers, checkpoints and gradient checks treat them uniformly. Each
//! kind is the identity at initialization: adapter up-projections, LoRA `B`
//! factors and sparse deltas start at zero.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Layout, ModelConfig, TensorId, TransformerParams};
use crate::corpus::{TokenId, SPECIAL_TOKENS};
use crate::model::batch::{masked_lm_batch, Sampler};
use crate::model::train::{train_step, Adam, AdamConfig, LossKind, TrainableSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PeftKind {
    #[serde(rename = "adapter")]
    Adapter,
    #[serde(rename = "prompt")]
    Prompt,
    #[serde(rename = "lora")]
    LoRA,
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "none")]
    None,
}

impl PeftKind {
    pub const ALL: [PeftKind; 4] = [PeftKind::Adapter, PeftKind::Prompt, PeftKind::LoRA, PeftKind::Sft];

    pub fn as_str(self) -> &'static str {
        match self {
            PeftKind::Adapter => "adapter",
            PeftKind::Prompt => "prompt",
            PeftKind::LoRA => "lora",
            PeftKind::Sft => "sft",
            PeftKind::None => "none",
        }
    }

    /// Row label used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            PeftKind::Adapter => "Adapter",
            PeftKind::Prompt => "Prompt",
            PeftKind::LoRA => "LoRa",
            PeftKind::Sft => "SFT",
            PeftKind::None => "FT",
        }
    }
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adapter" => Ok(PeftKind::Adapter),
            "prompt" => Ok(PeftKind::Prompt),
            "lora" => Ok(PeftKind::LoRA),
            "sft" => Ok(PeftKind::Sft),
            "none" | "ft" => Ok(PeftKind::None),
            other => Err(Error::Config(format!("unknown PEFT kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterIds {
    pub down: TensorId,
    pub down_b: TensorId,
    pub up: TensorId,
    pub up_b: TensorId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraIds {
    pub q_a: TensorId,
    pub q_b: TensorId,
    pub v_a: TensorId,
    pub v_b: TensorId,
}

/// One trained (or freshly initialized) PEFT module.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftParams {
    pub kind: PeftKind,
    /// Bottleneck width, prompt length, LoRA rank, or sparse mask size.
    pub size: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub lora_alpha: f64,
    pub layout: Layout,
    pub data: Vec<f64>,
    /// Sorted backbone coordinates owned by a sparse module; empty otherwise.
    pub sft_mask: Vec<usize>,
}

pub fn peft_layout(kind: PeftKind, num_layers: usize, d: usize, size: usize) -> Result<Layout> {
    let mut l = Layout::default();
    match kind {
        PeftKind::Adapter => {
            for i in 0..num_layers {
                l.push(format!("layer{i}.adapter.down"), d, size);
                l.push(format!("layer{i}.adapter.down_bias"), 1, size);
                l.push(format!("layer{i}.adapter.up"), size, d);
                l.push(format!("layer{i}.adapter.up_bias"), 1, d);
            }
        }
        PeftKind::Prompt => {
            l.push("prompt", size, d);
        }
        PeftKind::LoRA => {
            for i in 0..num_layers {
                l.push(format!("layer{i}.lora.q_a"), d, size);
                l.push(format!("layer{i}.lora.q_b"), size, d);
                l.push(format!("layer{i}.lora.v_a"), d, size);
                l.push(format!("layer{i}.lora.v_b"), size, d);
            }
        }
        PeftKind::Sft => {
            l.push("sft.delta", 1, size);
        }
        PeftKind::None => return Err(Error::Config("no PEFT layout for kind `none`".into())),
    }
    Ok(l)
}

/// Trainable coordinates of a module with the given hyperparameter.
pub fn param_count(kind: PeftKind, num_layers: usize, d: usize, size: usize) -> usize {
    match kind {
        PeftKind::Adapter => num_layers * (2 * d * size + size + d),
        PeftKind::Prompt => size * d,
        PeftKind::LoRA => 2 * num_layers * 2 * d * size,
        PeftKind::Sft => size,
        PeftKind::None => 0,
    }
}

/// Exact trainable-coordinate count of a module.
pub fn count_params(peft: &PeftParams) -> usize {
    peft.data.len()
}

/// Largest hyperparameter whose count stays within `fraction` of the
/// backbone; falls back to the next size up when that lands below half the
/// target but still within 1.5x.
pub fn size_for_budget(kind: PeftKind, cfg: &ModelConfig, backbone: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Budget(format!("budget fraction {fraction} outside (0, 1)")));
    }
    let target = fraction * backbone as f64;
    let count = |n: usize| param_count(kind, cfg.num_layers, cfg.hidden, n) as f64;
    if kind == PeftKind::Sft {
        return Ok(target.round().max(1.0) as usize);
    }
    let mut n = 0;
    while count(n + 1) <= target {
        n += 1;
    }
    if n == 0 || count(n) < 0.5 * target {
        n += 1;
    }
    let c = count(n);
    if c > 1.5 * target || c < 0.5 * target {
        return Err(Error::Budget(format!(
            "{kind}: smallest feasible size {n} gives {c} parameters, target {target:.0}"
        )));
    }
    Ok(n)
}

impl PeftParams {
    fn empty(kind: PeftKind, cfg: &ModelConfig, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config(format!("{kind}: size must be >= 1")));
        }
        let layout = peft_layout(kind, cfg.num_layers, cfg.hidden, size)?;
        let data = vec![0.0; layout.len()];
        Ok(Self {
            kind,
            size,
            num_layers: cfg.num_layers,
            hidden: cfg.hidden,
            lora_alpha: size as f64,
            layout,
            data,
            sft_mask: Vec::new(),
        })
    }

    /// A module of explicit size, identity at init.
    pub fn with_size<R: Rng>(kind: PeftKind, backbone: &TransformerParams, size: usize, rng: &mut R) -> Result<Self> {
        let cfg = &backbone.config;
        let mut p = Self::empty(kind, cfg, size)?;
        let d = cfg.hidden;
        let proj = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
        match kind {
            PeftKind::Adapter => {
                for l in 0..cfg.num_layers {
                    let ids = p.adapter_ids(l);
                    for x in &mut p.data[p.layout.range(ids.down)] {
                        *x = proj.sample(rng);
                    }
                }
            }
            PeftKind::LoRA => {
                for l in 0..cfg.num_layers {
                    let ids = p.lora_ids(l);
                    for id in [ids.q_a, ids.v_a] {
                        let range = p.layout.range(id);
                        for x in &mut p.data[range] {
                            *x = proj.sample(rng);
                        }
                    }
                }
            }
            PeftKind::Prompt => {
                if size + 2 > cfg.max_len {
                    return Err(Error::Budget(format!("{size} prompts do not fit {} positions", cfg.max_len)));
                }
                let emb = backbone.layout.mat(&backbone.data, backbone.ids.tok_emb);
                let first = SPECIAL_TOKENS.len();
                for i in 0..size {
                    let tok = rng.random_range(first..cfg.vocab_size);
                    let start = i * d;
                    p.data[start..start + d].copy_from_slice(emb.row(tok).as_slice().expect("row-major"));
                }
            }
            PeftKind::Sft => {
                return Err(Error::Config("sparse modules are built by sft_select_mask".into()));
            }
            PeftKind::None => unreachable!("rejected by empty()"),
        }
        Ok(p)
    }

    /// A sparse module owning `mask` (backbone coordinates) with zero delta.
    pub fn sparse(cfg: &ModelConfig, backbone_len: usize, mask: Vec<usize>) -> Result<Self> {
        let mut sorted = mask;
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.last().is_some_and(|&c| c >= backbone_len) {
            return Err(Error::Shape("sparse mask coordinate beyond backbone".into()));
        }
        let mut p = Self::empty(PeftKind::Sft, cfg, sorted.len())?;
        p.sft_mask = sorted;
        Ok(p)
    }

    pub fn adapter_ids(&self, layer: usize) -> AdapterIds {
        debug_assert_eq!(self.kind, PeftKind::Adapter);
        AdapterIds {
            down: 4 * layer,
            down_b: 4 * layer + 1,
            up: 4 * layer + 2,
            up_b: 4 * layer + 3,
        }
    }

    pub fn lora_ids(&self, layer: usize) -> LoraIds {
        debug_assert_eq!(self.kind, PeftKind::LoRA);
        LoraIds {
            q_a: 4 * layer,
            q_b: 4 * layer + 1,
            v_a: 4 * layer + 2,
            v_b: 4 * layer + 3,
        }
    }

    /// `alpha / r`; 1 with the default `alpha = r`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.size as f64
    }

    pub fn prompt_len(&self) -> usize {
        if self.kind == PeftKind::Prompt {
            self.size
        } else {
            0
        }
    }

    pub fn prompts(&self) -> ArrayView2<'_, f64> {
        self.layout.mat(&self.data, 0)
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn checksum(&self) -> String {
        let mut bytes: Vec<f64> = self.data.clone();
        bytes.extend(self.sft_mask.iter().map(|&c| c as f64));
        crate::model::params::checksum(&bytes)
    }

    pub fn check_compatible(&self, backbone: &TransformerParams) -> Result<()> {
        let cfg = &backbone.config;
        if self.num_layers != cfg.num_layers || self.hidden != cfg.hidden {
            return Err(Error::Shape(format!(
                "{} module built for {} layers x {} hidden, backbone has {} x {}",
                self.kind, self.num_layers, self.hidden, cfg.num_layers, cfg.hidden
            )));
        }
        let expected = peft_layout(self.kind, self.num_layers, self.hidden, self.size)?;
        if expected != self.layout || self.data.len() != expected.len() {
            return Err(Error::Shape(format!("{} module layout is inconsistent", self.kind)));
        }
        if self.kind == PeftKind::Sft {
            if self.sft_mask.len() != self.size {
                return Err(Error::Shape("sparse mask size differs from delta length".into()));
            }
            if self.sft_mask.last().is_some_and(|&c| c >= backbone.num_params()) {
                return Err(Error::Shape("sparse mask coordinate beyond backbone".into()));
            }
        }
        Ok(())
    }

    /// Backbone coordinates this module owns (only sparse modules own any).
    pub fn owned_backbone_coords(&self) -> BTreeSet<usize> {
        self.sft_mask.iter().copied().collect()
    }
}

/// A freshly initialized module sized to `budget_fraction` of the backbone.
pub fn init_peft<R: Rng>(
    kind: PeftKind,
    backbone: &TransformerParams,
    budget_fraction: f64,
    rng: &mut R,
) -> Result<PeftParams> {
    match kind {
        PeftKind::None => Err(Error::Config("init_peft needs a PEFT kind, got `none`".into())),
        PeftKind::Sft => Err(Error::Config("sparse modules are built by sft_select_mask".into())),
        _ => {
            let size = size_for_budget(kind, &backbone.config, backbone.num_params(), budget_fraction)?;
            PeftParams::with_size(kind, backbone, size, rng)
        }
    }
}

/// A backbone with a PEFT module routed into its forward pass. Injection
/// never mutates the backbone; sparse deltas are applied to a private copy.
#[derive(Debug, Clone)]
pub struct Composed<'a> {
    pub backbone: &'a TransformerParams,
    pub peft: Option<&'a PeftParams>,
    effective: Cow<'a, [f64]>,
    /// Diagnostic mode: prompt vectors exist but no position may attend to
    /// them, and tokens keep their unshifted position embeddings.
    pub isolate_prompt: bool,
}

impl<'a> Composed<'a> {
    pub fn plain(backbone: &'a TransformerParams) -> Self {
        Self {
            backbone,
            peft: None,
            effective: Cow::Borrowed(&backbone.data),
            isolate_prompt: false,
        }
    }

    pub fn new(backbone: &'a TransformerParams, peft: Option<&'a PeftParams>) -> Result<Self> {
        match peft {
            Some(p) => inject(p, backbone),
            None => Ok(Self::plain(backbone)),
        }
    }

    pub fn effective_weights(&self) -> &[f64] {
        &self.effective
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn prompt_len(&self) -> usize {
        self.peft.map_or(0, PeftParams::prompt_len)
    }

    /// The same view with prompts isolated (see `isolate_prompt`).
    pub fn isolated(mut self) -> Self {
        self.isolate_prompt = true;
        self
    }

    /// Drops the module, returning the plain backbone view.
    pub fn eject(self) -> Composed<'a> {
        Composed::plain(self.backbone)
    }
}

pub fn inject<'a>(peft: &'a PeftParams, backbone: &'a TransformerParams) -> Result<Composed<'a>> {
    peft.check_compatible(backbone)?;
    let effective = if peft.kind == PeftKind::Sft {
        let mut w = backbone.data.clone();
        for (&c, &delta) in peft.sft_mask.iter().zip(&peft.data) {
            w[c] += delta;
        }
        Cow::Owned(w)
    } else {
        Cow::Borrowed(backbone.data.as_slice())
    };
    Ok(Composed {
        backbone,
        peft: Some(peft),
        effective,
        isolate_prompt: false,
    })
}

/// Training phase of the two-stage procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Upstream,
    Downstream,
}

/// Coordinates each phase may change.
///
/// Upstream trains the module alone (for a sparse module, its delta, which
/// lives on the masked backbone coordinates); with no module nothing is
/// trainable. Downstream trains the backbone and task head and freezes the
/// module; a sparse module additionally freezes its masked coordinates.
pub fn trainable_set(backbone: &TransformerParams, peft: Option<&PeftParams>, phase: Phase) -> TrainableSet {
    let peft_len = peft.map_or(0, PeftParams::num_params);
    match phase {
        Phase::Upstream => TrainableSet {
            backbone: vec![false; backbone.num_params()],
            peft: vec![peft.is_some(); peft_len],
        },
        Phase::Downstream => {
            let mut set = TrainableSet::whole_backbone(backbone, peft_len);
            if let Some(p) = peft.filter(|p| p.kind == PeftKind::Sft) {
                for &c in &p.sft_mask {
                    set.backbone[c] = false;
                }
            }
            set
        }
    }
}

/// Dense phase settings for sparse-mask selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftSelectConfig {
    pub budget_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
}

/// Coordinates eligible for a sparse mask: everything except the
/// classification head, which belongs to the downstream task.
pub fn sft_eligible(backbone: &TransformerParams) -> Vec<usize> {
    let head = backbone.ids.head();
    let excluded: Vec<std::ops::Range<usize>> = head.iter().map(|&t| backbone.layout.range(t)).collect();
    (0..backbone.num_params())
        .filter(|c| !excluded.iter().any(|r| r.contains(c)))
        .collect()
}

/// The `k` coordinates with largest |after - before|, ties to the lowest
/// index, returned sorted.
pub fn top_k_changed(before: &[f64], after: &[f64], eligible: &[usize], k: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = eligible.iter().map(|&c| ((after[c] - before[c]).abs(), c)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut mask: Vec<usize> = ranked.into_iter().take(k).map(|(_, c)| c).collect();
    mask.sort_unstable();
    mask
}

/// Selects a sparse mask by dense MLM training of a copy of the backbone on
/// `documents` (already augmented), keeping the coordinates that moved most,
/// and rewinding: the result has zero delta and `backbone` is untouched.
pub fn sft_select_mask<R: Rng>(
    backbone: &TransformerParams,
    documents: &[Vec<TokenId>],
    cfg: &SftSelectConfig,
    rng: &mut R,
) -> Result<PeftParams> {
    if cfg.steps == 0 {
        return Err(Error::Config("sparse-mask selection needs at least one dense step".into()));
    }
    let eligible = sft_eligible(backbone);
    let k = size_for_budget(PeftKind::Sft, &backbone.config, backbone.num_params(), cfg.budget_fraction)?;
    if k > eligible.len() {
        return Err(Error::Budget(format!("mask of {k} exceeds {} eligible coordinates", eligible.len())));
    }
    let mut copy = backbone.clone();
    let mut trainable = TrainableSet::frozen(copy.num_params(), 0);
    for &c in &eligible {
        trainable.backbone[c] = true;
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), copy.num_params(), 0);
    let mut sampler = Sampler::new(documents.len(), cfg.batch_size)?;
    let v = copy.config.vocab_size;
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(rng);
        let seqs: Vec<Vec<TokenId>> = idx.iter().map(|&i| documents[i].clone()).collect();
        let batch = masked_lm_batch(&seqs, cfg.mask_prob, v, rng)?;
        let loss = train_step(&mut copy, None, &batch, &LossKind::Mlm, &trainable, &mut adam)?;
        if !loss.is_finite() || !copy.all_finite() {
            return Err(Error::Divergence { step, loss });
        }
    }
    let mask = top_k_changed(&backbone.data, &copy.data, &eligible, k);
    PeftParams::sparse(&backbone.config, backbone.num_params(), mask)
}
