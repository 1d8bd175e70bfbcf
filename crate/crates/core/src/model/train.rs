//! Exact gradients over a composed model, trainable-coordinate sets and the
//! Adam optimizer.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::batch::{Batch, IGNORE};
use crate::model::forward::{GradBuffers, Net};
use crate::model::loss::{class_weight, cross_entropy};
use crate::model::params::{Layout, TensorId, TransformerParams};
use crate::peft::{Composed, PeftKind, PeftParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Mlm,
    Classification { class_weights: Option<Vec<f64>> },
}

impl LossKind {
    pub fn classification() -> Self {
        LossKind::Classification { class_weights: None }
    }
}

/// Which coordinates may change: one flag per backbone coordinate and one
/// per PEFT coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    pub backbone: Vec<bool>,
    pub peft: Vec<bool>,
}

/// A whole tensor, in the backbone or in the PEFT module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Backbone(TensorId),
    Peft(TensorId),
}

impl TrainableSet {
    pub fn frozen(backbone_len: usize, peft_len: usize) -> Self {
        Self {
            backbone: vec![false; backbone_len],
            peft: vec![false; peft_len],
        }
    }

    pub fn whole_backbone(params: &TransformerParams, peft_len: usize) -> Self {
        Self {
            backbone: vec![true; params.num_params()],
            peft: vec![false; peft_len],
        }
    }

    pub fn from_ids(
        backbone: &Layout,
        peft: Option<&Layout>,
        ids: impl IntoIterator<Item = ParamId>,
    ) -> Self {
        let mut set = Self::frozen(backbone.len(), peft.map_or(0, Layout::len));
        for id in ids {
            match id {
                ParamId::Backbone(t) => set.backbone[backbone.range(t)].fill(true),
                ParamId::Peft(t) => {
                    let l = peft.expect("peft layout for a PEFT id");
                    set.peft[l.range(t)].fill(true);
                }
            }
        }
        set
    }

    pub fn is_empty(&self) -> bool {
        !self.backbone.iter().chain(&self.peft).any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.backbone.iter().chain(&self.peft).filter(|&&b| b).count()
    }

    pub fn any_backbone(&self) -> bool {
        self.backbone.iter().any(|&b| b)
    }

    pub fn any_peft(&self) -> bool {
        self.peft.iter().any(|&b| b)
    }

    /// Tensors with at least one trainable coordinate.
    pub fn touched_ids(&self, backbone: &Layout, peft: Option<&Layout>) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = (0..backbone.tensors().len())
            .filter(|&t| self.backbone[backbone.range(t)].iter().any(|&b| b))
            .map(ParamId::Backbone)
            .collect();
        if let Some(l) = peft {
            out.extend(
                (0..l.tensors().len())
                    .filter(|&t| self.peft[l.range(t)].iter().any(|&b| b))
                    .map(ParamId::Peft),
            );
        }
        out
    }
}

/// Loss value plus gradients shaped like the backbone and the PEFT module.
/// Coordinates outside the trainable set are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub loss: f64,
    pub backbone: Vec<f64>,
    pub peft: Vec<f64>,
}

impl GradientSet {
    pub fn all_finite(&self) -> bool {
        self.loss.is_finite() && self.backbone.iter().chain(&self.peft).all(|g| g.is_finite())
    }
}

/// Rows per parallel work unit; fixed so the reduction order never depends
/// on the thread count.
const CHUNK: usize = 4;

struct RowResult {
    loss_sum: f64,
    count: usize,
    grads: GradBuffers,
}

/// Loss and exact gradients of [`crate::model::compute_loss`] with respect to
/// the trainable coordinates.
pub fn gradients(
    view: &Composed<'_>,
    batch: &Batch,
    loss: &LossKind,
    trainable: &TrainableSet,
) -> Result<GradientSet> {
    batch.validate()?;
    if trainable.is_empty() {
        return Err(Error::Invalid("trainable set is empty".into()));
    }
    let backbone_len = view.backbone.num_params();
    let peft_len = view.peft.map_or(0, PeftParams::num_params);
    if trainable.backbone.len() != backbone_len || trainable.peft.len() != peft_len {
        return Err(Error::Shape("trainable set does not match the composed model".into()));
    }
    let is_sft = view.peft.is_some_and(|p| p.kind == PeftKind::Sft);
    let need_backbone = trainable.any_backbone() || (is_sft && trainable.any_peft());
    let need_peft = trainable.any_peft() && !is_sft;

    let net = Net::new(view);
    let rows: Vec<usize> = (0..batch.len()).collect();
    let chunks: Vec<Result<RowResult>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = RowResult {
                loss_sum: 0.0,
                count: 0,
                grads: GradBuffers {
                    backbone: need_backbone.then(|| vec![0.0; backbone_len]),
                    peft: need_peft.then(|| vec![0.0; peft_len]),
                },
            };
            for &i in chunk {
                row_backward(&net, batch, i, loss, &mut acc)?;
            }
            Ok(acc)
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut gb = vec![0.0; backbone_len];
    let mut gp = vec![0.0; peft_len];
    for c in chunks {
        let c = c?;
        loss_sum += c.loss_sum;
        count += c.count;
        if let Some(b) = c.grads.backbone {
            gb.iter_mut().zip(&b).for_each(|(a, x)| *a += x);
        }
        if let Some(p) = c.grads.peft {
            gp.iter_mut().zip(&p).for_each(|(a, x)| *a += x);
        }
    }
    if count == 0 {
        return Err(Error::Empty("no position contributes to the loss".into()));
    }
    let scale = 1.0 / count as f64;
    if is_sft {
        let mask = &view.peft.unwrap().sft_mask;
        for (g, &c) in gp.iter_mut().zip(mask) {
            *g = gb[c];
        }
    }
    for (g, &t) in gb.iter_mut().zip(&trainable.backbone) {
        *g = if t { *g * scale } else { 0.0 };
    }
    for (g, &t) in gp.iter_mut().zip(&trainable.peft) {
        *g = if t { *g * scale } else { 0.0 };
    }
    Ok(GradientSet {
        loss: loss_sum * scale,
        backbone: gb,
        peft: gp,
    })
}

fn row_backward(net: &Net<'_>, batch: &Batch, i: usize, loss: &LossKind, acc: &mut RowResult) -> Result<()> {
    let ids = batch.row(i);
    let cache = net.forward(&ids)?;
    match loss {
        LossKind::Mlm => {
            let labels = batch
                .row_mlm_labels(i)
                .ok_or_else(|| Error::Shape("MLM loss needs MLM labels".into()))?;
            let rows: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != IGNORE).collect();
            if rows.is_empty() {
                return Ok(());
            }
            let logits = net.mlm_logits(&cache, &rows);
            let vocab = logits.ncols();
            let mut dlogits = Array2::zeros((rows.len(), vocab));
            for (r, &j) in rows.iter().enumerate() {
                let label = labels[j] as usize;
                if label >= vocab {
                    return Err(Error::Shape(format!("label {label} outside vocabulary")));
                }
                let (l, probs) = cross_entropy(logits.row(r), label);
                acc.loss_sum += l;
                acc.count += 1;
                let mut d = dlogits.row_mut(r);
                d.assign(&probs);
                d[label] -= 1.0;
            }
            net.backward_mlm(&cache, &rows, &dlogits, &mut acc.grads);
        }
        LossKind::Classification { class_weights } => {
            let labels = batch
                .class_labels
                .as_ref()
                .ok_or_else(|| Error::Shape("classification loss needs class labels".into()))?;
            let label = labels[i];
            let logits = net.cls_logits(&cache);
            if label >= logits.len() {
                return Err(Error::Shape(format!("label {label} outside {} classes", logits.len())));
            }
            let w = class_weight(class_weights.as_deref(), label);
            let (l, mut d) = cross_entropy(logits.view(), label);
            acc.loss_sum += w * l;
            acc.count += 1;
            d[label] -= 1.0;
            d *= w;
            net.backward_cls(&cache, &d, &mut acc.grads);
        }
    }
    Ok(())
}

/// Loss only, no gradients.
pub fn loss_value(view: &Composed<'_>, batch: &Batch, loss: &LossKind) -> Result<f64> {
    batch.validate()?;
    let net = Net::new(view);
    let rows: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<Result<(f64, usize)>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            let mut count = 0;
            for &i in chunk {
                let ids = batch.row(i);
                let cache = net.forward(&ids)?;
                match loss {
                    LossKind::Mlm => {
                        let labels = batch
                            .row_mlm_labels(i)
                            .ok_or_else(|| Error::Shape("MLM loss needs MLM labels".into()))?;
                        let rows: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != IGNORE).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let logits = net.mlm_logits(&cache, &rows);
                        for (r, &j) in rows.iter().enumerate() {
                            sum += cross_entropy(logits.row(r), labels[j] as usize).0;
                            count += 1;
                        }
                    }
                    LossKind::Classification { class_weights } => {
                        let label = batch.class_labels.as_ref().ok_or_else(|| {
                            Error::Shape("classification loss needs class labels".into())
                        })?[i];
                        let logits = net.cls_logits(&cache);
                        sum += class_weight(class_weights.as_deref(), label) * cross_entropy(logits.view(), label).0;
                        count += 1;
                    }
                }
            }
            Ok((sum, count))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0;
    for p in parts {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::Empty("no position contributes to the loss".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a backbone vector and a PEFT vector. Coordinates outside the
/// trainable set are never written.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m_backbone: Vec<f64>,
    v_backbone: Vec<f64>,
    m_peft: Vec<f64>,
    v_peft: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, backbone_len: usize, peft_len: usize) -> Self {
        Self {
            config,
            step: 0,
            m_backbone: vec![0.0; backbone_len],
            v_backbone: vec![0.0; backbone_len],
            m_peft: vec![0.0; peft_len],
            v_peft: vec![0.0; peft_len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(
        &mut self,
        backbone: &mut [f64],
        peft: &mut [f64],
        grads: &GradientSet,
        trainable: &TrainableSet,
    ) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let apply = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], mask: &[bool]| {
            for i in 0..w.len() {
                if !mask[i] {
                    continue;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        };
        apply(backbone, &grads.backbone, &mut self.m_backbone, &mut self.v_backbone, &trainable.backbone);
        apply(peft, &grads.peft, &mut self.m_peft, &mut self.v_peft, &trainable.peft);
    }
}

/// One optimizer step: gradients on the composed model, then Adam on the
/// trainable coordinates. Returns the pre-update loss.
pub fn train_step(
    backbone: &mut TransformerParams,
    mut peft: Option<&mut PeftParams>,
    batch: &Batch,
    loss: &LossKind,
    trainable: &TrainableSet,
    adam: &mut Adam,
) -> Result<f64> {
    let grads = {
        let view = Composed::new(backbone, peft.as_deref())?;
        gradients(&view, batch, loss, trainable)?
    };
    let mut empty: [f64; 0] = [];
    let peft_data: &mut [f64] = match peft.as_deref_mut() {
        Some(p) => &mut p.data,
        None => &mut empty,
    };
    adam.update(&mut backbone.data, peft_data, &grads, trainable);
    Ok(grads.loss)
}
