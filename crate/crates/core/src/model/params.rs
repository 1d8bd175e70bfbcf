use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named 2-D block inside a flat parameter vector. Vectors are stored as
/// `1 x n` rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

pub type TensorId = usize;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> TensorId {
        let spec = TensorSpec {
            name: name.into(),
            rows,
            cols,
            offset: self.len,
        };
        self.len += spec.len();
        self.tensors.push(spec);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn range(&self, id: TensorId) -> Range<usize> {
        self.tensors[id].range()
    }

    /// The tensor owning a flat coordinate.
    pub fn tensor_of(&self, coord: usize) -> Option<TensorId> {
        let idx = self.tensors.partition_point(|t| t.offset + t.len() <= coord);
        (idx < self.tensors.len() && coord >= self.tensors[idx].offset).then_some(idx)
    }

    pub fn mat<'a>(&self, data: &'a [f64], id: TensorId) -> ArrayView2<'a, f64> {
        let t = &self.tensors[id];
        ArrayView2::from_shape((t.rows, t.cols), &data[t.range()]).expect("layout shape")
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64], id: TensorId) -> ArrayViewMut2<'a, f64> {
        let t = &self.tensors[id];
        ArrayViewMut2::from_shape((t.rows, t.cols), &mut data[t.range()]).expect("layout shape")
    }

    pub fn vec<'a>(&self, data: &'a [f64], id: TensorId) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range(id)])
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64], id: TensorId) -> ArrayViewMut1<'a, f64> {
        let r = self.range(id);
        ArrayViewMut1::from(&mut data[r])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// The desk-scale default: 2 layers, width 64, 2 heads, FFN 128, 64 positions.
    pub fn toy(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            heads: 2,
            ffn: 128,
            vocab_size,
            max_len: 64,
            num_classes,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.hidden,
            self.heads,
            self.ffn,
            self.vocab_size,
            self.max_len,
            self.num_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < crate::corpus::SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config("vocabulary too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Tensor ids of the backbone, in layout order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneIds {
    pub tok_emb: TensorId,
    pub pos_emb: TensorId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: TensorId,
    pub lnf_b: TensorId,
    pub mlm_bias: TensorId,
    pub cls_w: TensorId,
    pub cls_b: TensorId,
}

impl BackboneIds {
    /// The task head (`cls_w`, `cls_b`).
    pub fn head(&self) -> [TensorId; 2] {
        [self.cls_w, self.cls_b]
    }

    pub fn layer_norm_gains(&self) -> Vec<TensorId> {
        let mut v: Vec<TensorId> = self.layers.iter().flat_map(|l| [l.ln1_g, l.ln2_g]).collect();
        v.push(self.lnf_g);
        v
    }
}

pub fn backbone_layout(cfg: &ModelConfig) -> (Layout, BackboneIds) {
    let d = cfg.hidden;
    let mut l = Layout::default();
    let tok_emb = l.push("tok_emb", cfg.vocab_size, d);
    let pos_emb = l.push("pos_emb", cfg.max_len, d);
    let layers = (0..cfg.num_layers)
        .map(|i| LayerIds {
            ln1_g: l.push(format!("layer{i}.ln1.gain"), 1, d),
            ln1_b: l.push(format!("layer{i}.ln1.bias"), 1, d),
            wq: l.push(format!("layer{i}.attn.wq"), d, d),
            wk: l.push(format!("layer{i}.attn.wk"), d, d),
            wv: l.push(format!("layer{i}.attn.wv"), d, d),
            wo: l.push(format!("layer{i}.attn.wo"), d, d),
            ln2_g: l.push(format!("layer{i}.ln2.gain"), 1, d),
            ln2_b: l.push(format!("layer{i}.ln2.bias"), 1, d),
            w1: l.push(format!("layer{i}.ffn.w1"), d, cfg.ffn),
            b1: l.push(format!("layer{i}.ffn.b1"), 1, cfg.ffn),
            w2: l.push(format!("layer{i}.ffn.w2"), cfg.ffn, d),
            b2: l.push(format!("layer{i}.ffn.b2"), 1, d),
        })
        .collect();
    let lnf_g = l.push("final_ln.gain", 1, d);
    let lnf_b = l.push("final_ln.bias", 1, d);
    let mlm_bias = l.push("mlm_head.bias", 1, cfg.vocab_size);
    let cls_w = l.push("cls_head.weight", d, cfg.num_classes);
    let cls_b = l.push("cls_head.bias", 1, cfg.num_classes);
    (
        l,
        BackboneIds {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            mlm_bias,
            cls_w,
            cls_b,
        },
    )
}

/// The full backbone: embeddings, encoder layers, final norm, MLM head bias
/// (the MLM projection is tied to `tok_emb`) and the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub layout: Layout,
    pub ids: BackboneIds,
    pub data: Vec<f64>,
}

pub const INIT_STD: f64 = 0.02;

impl TransformerParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, ids) = backbone_layout(&config);
        let data = vec![0.0; layout.len()];
        Ok(Self {
            config,
            layout,
            ids,
            data,
        })
    }

    /// Normal(0, 0.02) weights and embeddings, unit norm gains, zero biases.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    pub fn init_with_std<R: Rng>(config: ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let gains = p.ids.layer_norm_gains();
        for (id, spec) in p.layout.tensors().iter().enumerate() {
            let range = spec.range();
            if gains.contains(&id) {
                p.data[range].fill(1.0);
            } else if spec.rows > 1 {
                for x in &mut p.data[range] {
                    *x = normal.sample(rng);
                }
            }
        }
        Ok(p)
    }

    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "backbone expects {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    /// The same body with a freshly drawn head for `num_classes` labels.
    /// Every non-head coordinate keeps its index.
    pub fn with_task_head<R: Rng>(&self, num_classes: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(ModelConfig {
            num_classes,
            ..self.config
        })?;
        let body = self.layout.range(self.ids.cls_w).start;
        p.data[..body].copy_from_slice(&self.data[..body]);
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        for x in &mut p.data[p.layout.range(p.ids.cls_w)] {
            *x = normal.sample(rng);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn checksum(&self) -> String {
        checksum(&self.data)
    }
}

/// SHA-256 over the little-endian bytes of a parameter vector.
pub fn checksum(data: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for x in data {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
