//! A loop-only reimplementation of the encoder, looked up by tensor name,
//! checked against the vectorized forward pass. Also identity-at-init and
//! pseudo-log-likelihood sanity checks.

mod common;

use common::*;
use ndarray::Array2;
use peft_debias::corpus::{TokenId, CLS, MASK, SEP};
use peft_debias::error::Result;
use peft_debias::model::params::Layout;
use peft_debias::model::{forward_cls, forward_mlm, pseudo_log_likelihood, Batch, MaskedLm, ModelConfig, TransformerParams};
use peft_debias::peft::{init_peft, inject, Composed, PeftKind, PeftParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn get(layout: &Layout, data: &[f64], name: &str) -> Mat {
    let id = layout.find(name).unwrap_or_else(|| panic!("no tensor {name}"));
    let spec = layout.spec(id);
    (0..spec.rows)
        .map(|r| data[spec.offset + r * spec.cols..spec.offset + (r + 1) * spec.cols].to_vec())
        .collect()
}

fn row(layout: &Layout, data: &[f64], name: &str) -> Vec<f64> {
    get(layout, data, name).remove(0)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Final hidden states (prompt rows included) for one sequence.
fn reference_hidden(params: &TransformerParams, peft: Option<&PeftParams>, ids: &[TokenId], isolate: bool) -> Mat {
    let cfg = params.config;
    let lay = &params.layout;
    let mut w = params.data.clone();
    if let Some(p) = peft.filter(|p| p.kind == PeftKind::Sft) {
        for (&c, &dv) in p.sft_mask.iter().zip(&p.data) {
            w[c] += dv;
        }
    }
    let pl = |name: &str| {
        let p = peft.unwrap();
        get(&p.layout, &p.data, name)
    };
    let kind = peft.map_or(PeftKind::None, |p| p.kind);

    let tok = get(lay, &w, "tok_emb");
    let pos = get(lay, &w, "pos_emb");
    let prompts = if kind == PeftKind::Prompt { pl("prompt") } else { vec![] };
    let p = prompts.len();
    let mut x: Mat = Vec::new();
    for (i, pr) in prompts.iter().enumerate() {
        x.push(pr.iter().zip(&pos[i]).map(|(a, b)| a + b).collect());
    }
    for (j, &id) in ids.iter().enumerate() {
        let at = if isolate { j } else { p + j };
        x.push(tok[id as usize].iter().zip(&pos[at]).map(|(a, b)| a + b).collect());
    }
    let t = x.len();
    let dh = cfg.hidden / cfg.heads;

    for l in 0..cfg.num_layers {
        let n = |s: &str| format!("layer{l}.{s}");
        let h = norm(&x, &row(lay, &w, &n("ln1.gain")), &row(lay, &w, &n("ln1.bias")));
        let mut q = matmul(&h, &get(lay, &w, &n("attn.wq")));
        let k = matmul(&h, &get(lay, &w, &n("attn.wk")));
        let mut v = matmul(&h, &get(lay, &w, &n("attn.wv")));
        if kind == PeftKind::LoRA {
            let scale = peft.unwrap().lora_alpha / peft.unwrap().size as f64;
            let dq = matmul(&matmul(&h, &pl(&n("lora.q_a"))), &pl(&n("lora.q_b")));
            let dv = matmul(&matmul(&h, &pl(&n("lora.v_a"))), &pl(&n("lora.v_b")));
            for i in 0..t {
                for j in 0..cfg.hidden {
                    q[i][j] += scale * dq[i][j];
                    v[i][j] += scale * dv[i][j];
                }
            }
        }
        let mut ctx = vec![vec![0.0; cfg.hidden]; t];
        for head in 0..cfg.heads {
            let off = head * dh;
            for i in 0..t {
                let mut scores = vec![f64::NEG_INFINITY; t];
                for (j, s) in scores.iter_mut().enumerate() {
                    if isolate && j < p {
                        continue;
                    }
                    *s = (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dh as f64).sqrt();
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..t {
                    for c in 0..dh {
                        ctx[i][off + c] += e[j] / z * v[j][off + c];
                    }
                }
            }
        }
        let x1 = add(&x, &matmul(&ctx, &get(lay, &w, &n("attn.wo"))));
        let h2 = norm(&x1, &row(lay, &w, &n("ln2.gain")), &row(lay, &w, &n("ln2.bias")));
        let mut a = add_bias(&matmul(&h2, &get(lay, &w, &n("ffn.w1"))), &row(lay, &w, &n("ffn.b1")));
        for r in &mut a {
            for u in r.iter_mut() {
                *u = gelu(*u);
            }
        }
        let f = add_bias(&matmul(&a, &get(lay, &w, &n("ffn.w2"))), &row(lay, &w, &n("ffn.b2")));
        x = add(&x1, &f);
        if kind == PeftKind::Adapter {
            let mut z = add_bias(&matmul(&x, &pl(&n("adapter.down"))), &pl(&n("adapter.down_bias"))[0]);
            for r in &mut z {
                for u in r.iter_mut() {
                    *u = u.max(0.0);
                }
            }
            let up = add_bias(&matmul(&z, &pl(&n("adapter.up"))), &pl(&n("adapter.up_bias"))[0]);
            x = add(&x, &up);
        }
    }
    norm(&x, &row(lay, &w, "final_ln.gain"), &row(lay, &w, "final_ln.bias"))
}

fn reference_mlm(params: &TransformerParams, peft: Option<&PeftParams>, ids: &[TokenId], isolate: bool) -> Mat {
    let h = reference_hidden(params, peft, ids, isolate);
    let p = h.len() - ids.len();
    let mut eff = params.data.clone();
    if let Some(pf) = peft.filter(|pf| pf.kind == PeftKind::Sft) {
        for (&c, &dv) in pf.sft_mask.iter().zip(&pf.data) {
            eff[c] += dv;
        }
    }
    let tok = get(&params.layout, &eff, "tok_emb");
    let bias_eff = row(&params.layout, &eff, "mlm_head.bias");
    let mut out = Vec::new();
    for hr in &h[p..] {
        out.push(
            tok.iter()
                .zip(&bias_eff)
                .map(|(e, b)| e.iter().zip(hr).map(|(x, y)| x * y).sum::<f64>() + b)
                .collect(),
        );
    }
    out
}

fn reference_cls(params: &TransformerParams, peft: Option<&PeftParams>, ids: &[TokenId]) -> Vec<f64> {
    let mut eff = params.data.clone();
    if let Some(p) = peft.filter(|p| p.kind == PeftKind::Sft) {
        for (&c, &dv) in p.sft_mask.iter().zip(&p.data) {
            eff[c] += dv;
        }
    }
    let h = reference_hidden(params, peft, ids, false);
    let p = h.len() - ids.len();
    let wc = get(&params.layout, &eff, "cls_head.weight");
    let bc = row(&params.layout, &eff, "cls_head.bias");
    (0..bc.len())
        .map(|c| bc[c] + (0..h[p].len()).map(|j| h[p][j] * wc[j][c]).sum::<f64>())
        .collect()
}

fn assert_close(a: f64, b: f64, what: &str) {
    let tol = 1e-6 * a.abs().max(b.abs()).max(1.0);
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
}

fn compare(kind: PeftKind, seed: u64) {
    let cfg = tiny_config();
    let backbone = random_params(cfg, seed);
    let peft = (kind != PeftKind::None).then(|| random_peft(kind, &backbone, seed + 9));
    let view = Composed::new(&backbone, peft.as_ref()).unwrap();
    let seqs = random_seqs(&cfg, seed + 1, 4);
    let batch = Batch::inputs(&seqs).unwrap();
    let mlm = forward_mlm(&view, &batch).unwrap();
    let cls = forward_cls(&view, &batch).unwrap();
    assert_eq!(mlm.dim(), (4, batch.tokens.ncols(), cfg.vocab_size));
    for (i, s) in seqs.iter().enumerate() {
        let want = reference_mlm(&backbone, peft.as_ref(), s, false);
        for (j, r) in want.iter().enumerate() {
            for (c, &x) in r.iter().enumerate() {
                assert_close(mlm[[i, j, c]], x, &format!("{kind} mlm [{i},{j},{c}]"));
            }
        }
        for j in s.len()..batch.tokens.ncols() {
            assert!(mlm.slice(ndarray::s![i, j, ..]).iter().all(|&v| v == 0.0));
        }
        for (c, &x) in reference_cls(&backbone, peft.as_ref(), s).iter().enumerate() {
            assert_close(cls[[i, c]], x, &format!("{kind} cls [{i},{c}]"));
        }
    }
}

#[test]
fn matches_reference_without_module() {
    compare(PeftKind::None, 21);
}

#[test]
fn matches_reference_with_each_module() {
    for kind in [PeftKind::Adapter, PeftKind::Prompt, PeftKind::LoRA, PeftKind::Sft] {
        compare(kind, 31);
    }
}

#[test]
fn isolated_prompt_matches_reference() {
    let cfg = tiny_config();
    let backbone = random_params(cfg, 4);
    let peft = random_peft(PeftKind::Prompt, &backbone, 5);
    let view = inject(&peft, &backbone).unwrap().isolated();
    let seq = vec![CLS, 7, 9, 11, SEP];
    let got = view.log_probs(&seq, &[1, 2]).unwrap();
    let want = reference_mlm(&backbone, Some(&peft), &seq, true);
    for (r, j) in [1usize, 2].iter().enumerate() {
        let lse = want[*j].iter().map(|v| v.exp()).sum::<f64>().ln();
        for c in 0..cfg.vocab_size {
            assert_close(got[[r, c]], want[*j][c] - lse, "isolated");
        }
    }
}

fn toy_backbone() -> TransformerParams {
    TransformerParams::init(ModelConfig::toy(60, 2), &mut ChaCha8Rng::seed_from_u64(12)).unwrap()
}

#[test]
fn fresh_modules_leave_outputs_unchanged() {
    let backbone = toy_backbone();
    let seqs = vec![vec![CLS, 10, 11, 12, SEP], vec![CLS, 40, SEP]];
    let batch = Batch::inputs(&seqs).unwrap();
    let plain = Composed::plain(&backbone);
    let base_mlm = forward_mlm(&plain, &batch).unwrap();
    let base_cls = forward_cls(&plain, &batch).unwrap();
    for kind in [PeftKind::Adapter, PeftKind::LoRA] {
        let peft = init_peft(kind, &backbone, 0.01, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let view = inject(&peft, &backbone).unwrap();
        assert_eq!(forward_mlm(&view, &batch).unwrap(), base_mlm, "{kind}");
        assert_eq!(forward_cls(&view, &batch).unwrap(), base_cls, "{kind}");
    }
    let sft = PeftParams::sparse(&backbone.config, backbone.num_params(), vec![0, 5, 900]).unwrap();
    let view = inject(&sft, &backbone).unwrap();
    assert_eq!(forward_mlm(&view, &batch).unwrap(), base_mlm);

    let prompt = init_peft(PeftKind::Prompt, &backbone, 0.01, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let view = inject(&prompt, &backbone).unwrap().isolated();
    for s in &seqs {
        let rows: Vec<usize> = (0..s.len()).collect();
        let a = view.log_probs(s, &rows).unwrap();
        let b = plain.log_probs(s, &rows).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-6, "{x} {y}");
        }
    }
}

#[test]
fn zero_parameters_give_uniform_logits() {
    let cfg = tiny_config();
    let zeros = TransformerParams::zeros(cfg).unwrap();
    let view = Composed::plain(&zeros);
    let seq = vec![CLS, 6, 7, SEP];
    let lp = view.log_probs(&seq, &[0, 1, 2, 3]).unwrap();
    let want = -(cfg.vocab_size as f64).ln();
    assert!(lp.iter().all(|&v| (v - want).abs() < 1e-12));
    let pll = pseudo_log_likelihood(&view, &seq, &[1, 2]).unwrap();
    assert!((pll - 2.0 * want).abs() < 1e-12);
}

/// Uniform over ids `5..5+m` at a masked position; refuses anything else so
/// the one-position-at-a-time masking contract is checked too.
struct Rigged {
    m: usize,
}

impl MaskedLm for Rigged {
    fn vocab_size(&self) -> usize {
        5 + self.m
    }

    fn log_probs(&self, seq: &[TokenId], rows: &[usize]) -> Result<Array2<f64>> {
        assert_eq!(seq.iter().filter(|&&t| t == MASK).count(), 1);
        let mut out = Array2::from_elem((rows.len(), self.vocab_size()), f64::NEG_INFINITY);
        for (i, &r) in rows.iter().enumerate() {
            assert_eq!(seq[r], MASK);
            for c in 5..self.vocab_size() {
                out[[i, c]] = -(self.m as f64).ln();
            }
        }
        Ok(out)
    }
}

#[test]
fn pseudo_log_likelihood_of_rigged_scorer() {
    let lm = Rigged { m: 7 };
    let seq = vec![CLS, 5, 8, 11, 6, SEP];
    let pll = pseudo_log_likelihood(&lm, &seq, &[1, 2, 3, 4]).unwrap();
    assert!((pll + 4.0 * 7f64.ln()).abs() < 1e-12);
    assert!(pseudo_log_likelihood(&lm, &seq, &[]).is_err());
    assert!(pseudo_log_likelihood(&lm, &seq, &[0]).is_err());
}
