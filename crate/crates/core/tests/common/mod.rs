#![allow(dead_code)]

pub mod cda;
pub mod fd;
pub mod fixtures;
pub mod oracles;

use peft_debias::corpus::TokenId;
use peft_debias::model::{Batch, ModelConfig, TransformerParams};
use peft_debias::peft::{PeftKind, PeftParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// d=8, one layer, two heads: small enough to finite-difference every
/// coordinate.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        ffn: 16,
        vocab_size: 20,
        max_len: 16,
        num_classes: 3,
    }
}

/// Parameters with every entry randomized (including norm gains and
/// biases), so no coordinate sits at a symmetric point.
pub fn random_params(cfg: ModelConfig, seed: u64) -> TransformerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = TransformerParams::zeros(cfg).unwrap();
    let gains = p.ids.layer_norm_gains();
    for (id, spec) in p.layout.tensors().iter().enumerate() {
        for x in &mut p.data[spec.range()] {
            *x = if gains.contains(&id) {
                1.0 + rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    p
}

pub fn random_peft(kind: PeftKind, backbone: &TransformerParams, seed: u64) -> PeftParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = match kind {
        PeftKind::Sft => {
            let n = backbone.num_params();
            let mask: Vec<usize> = (0..40).map(|_| rng.random_range(0..n)).collect();
            PeftParams::sparse(&backbone.config, n, mask).unwrap()
        }
        PeftKind::Adapter => PeftParams::with_size(kind, backbone, 3, &mut rng).unwrap(),
        PeftKind::Prompt => PeftParams::with_size(kind, backbone, 2, &mut rng).unwrap(),
        PeftKind::LoRA => PeftParams::with_size(kind, backbone, 2, &mut rng).unwrap(),
        PeftKind::None => unreachable!(),
    };
    for x in &mut p.data {
        *x = rng.random_range(-0.5..0.5);
    }
    p
}

pub fn random_seqs(cfg: &ModelConfig, seed: u64, rows: usize) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| {
            let n = rng.random_range(3..7);
            let mut s = vec![peft_debias::corpus::CLS];
            s.extend((0..n).map(|_| rng.random_range(5..cfg.vocab_size as TokenId)));
            s.push(peft_debias::corpus::SEP);
            s
        })
        .collect()
}

pub fn mlm_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let seqs = random_seqs(cfg, seed, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let examples: Vec<(Vec<TokenId>, Vec<i64>)> = seqs
        .into_iter()
        .map(|s| {
            let mut labels = vec![-1i64; s.len()];
            let mut masked = s.clone();
            for j in 1..s.len() - 1 {
                if rng.random::<f64>() < 0.5 {
                    labels[j] = s[j] as i64;
                    masked[j] = peft_debias::corpus::MASK;
                }
            }
            labels[1] = s[1] as i64;
            (masked, labels)
        })
        .collect();
    Batch::mlm(&examples).unwrap()
}

pub fn cls_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let seqs = random_seqs(cfg, seed, 4);
    let labels: Vec<usize> = (0..seqs.len()).map(|i| i % cfg.num_classes).collect();
    Batch::classification(&seqs, &labels).unwrap()
}
