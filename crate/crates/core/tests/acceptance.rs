//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1-6, 8 and 9 are deterministic and fail the target when red.
//! Criterion 7 (directional end-to-end grid) is reported but only fails the
//! target under `ACCEPTANCE_STRICT=1`; `ACCEPTANCE_SKIP_GRID=1` skips it.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::cda::{check_rotation, tables};
use common::fd::{fd_check, TOL};
use common::fixtures::{quick_config, small_fixtures};
use common::oracles::*;
use common::{cls_batch, mlm_batch, random_seqs, tiny_config};
use peft_debias::config::GridConfig;
use peft_debias::corpus::{TokenId, CLS, SEP};
use peft_debias::metrics::{
    bias_nli_fn, crows_score, fprd, stereoset_from_scores, tpr_gap, MetricReport, MinimalPair,
};
use peft_debias::model::train::train_step;
use peft_debias::model::{
    forward_cls, forward_mlm, masked_lm_batch, Adam, AdamConfig, Batch, LossKind, MaskedLm, ModelConfig,
    TransformerParams,
};
use peft_debias::peft::{
    count_params, init_peft, inject, sft_select_mask, trainable_set, Composed, PeftKind, Phase,
    SftSelectConfig,
};
use peft_debias::pipeline::*;
use peft_debias::synthetic::{desk_model, prepare_fixtures, PretrainSettings, SuiteConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

const KINDS: [PeftKind; 4] = [PeftKind::Adapter, PeftKind::Prompt, PeftKind::LoRA, PeftKind::Sft];

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for kind in [PeftKind::None, PeftKind::Adapter, PeftKind::Prompt, PeftKind::LoRA, PeftKind::Sft] {
        for (name, loss, batch) in [
            ("mlm", LossKind::Mlm, mlm_batch(&cfg, 5)),
            ("cls", LossKind::classification(), cls_batch(&cfg, 6)),
        ] {
            let r = fd_check(kind, loss, &batch, 17);
            checked += r.checked;
            if r.worst >= worst.0 {
                worst = (r.worst, format!("{kind}/{name} {}", r.worst_at));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < TOL && elapsed < Duration::from_secs(60),
        format!(
            "{checked} coordinates, worst relative error {:.2e} (< {TOL:e}) at {}, {:.1}s (< 60s)",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn identity_at_init() -> Outcome {
    let backbone = TransformerParams::init(ModelConfig::toy(60, 3), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let seqs = random_seqs(&backbone.config, 4, 6);
    let batch = Batch::inputs(&seqs).unwrap();
    let plain = Composed::plain(&backbone);
    let (mlm, cls) = (forward_mlm(&plain, &batch).unwrap(), forward_cls(&plain, &batch).unwrap());
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sft = {
        let docs = random_seqs(&backbone.config, 9, 32);
        let cfg = SftSelectConfig {
            budget_fraction: 0.01,
            steps: 3,
            lr: 1e-2,
            batch_size: 8,
            mask_prob: 0.15,
        };
        sft_select_mask(&backbone, &docs, &cfg, &mut rng).unwrap()
    };
    for peft in [
        init_peft(PeftKind::Adapter, &backbone, 0.01, &mut rng).unwrap(),
        init_peft(PeftKind::LoRA, &backbone, 0.01, &mut rng).unwrap(),
        sft,
    ] {
        let view = inject(&peft, &backbone).unwrap();
        let same = forward_mlm(&view, &batch).unwrap() == mlm && forward_cls(&view, &batch).unwrap() == cls;
        pass &= same;
        notes.push(format!("{} {}", peft.kind, if same { "bit-identical" } else { "DIFFERS" }));
    }
    let prompt = init_peft(PeftKind::Prompt, &backbone, 0.01, &mut rng).unwrap();
    let view = inject(&prompt, &backbone).unwrap().isolated();
    let mut max_diff = 0.0f64;
    for s in &seqs {
        let rows: Vec<usize> = (0..s.len()).collect();
        let (a, b) = (view.log_probs(s, &rows).unwrap(), plain.log_probs(s, &rows).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    pass &= max_diff <= 1e-6;
    notes.push(format!("prompt (isolated) max |diff| {max_diff:.1e} (<= 1e-6)"));
    outcome(pass, notes.join(", "))
}

fn freeze_contracts() -> Outcome {
    let backbone0 = TransformerParams::init(ModelConfig::toy(60, 3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let docs = random_seqs(&backbone0.config, 21, 64);
    let labels: Vec<usize> = (0..docs.len()).map(|i| i % 3).collect();
    let mut notes = Vec::new();
    let mut pass = true;
    for kind in KINDS {
        let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 40);
        let mut backbone = backbone0.clone();
        let mut peft = match kind {
            PeftKind::Sft => {
                let cfg = SftSelectConfig {
                    budget_fraction: 0.01,
                    steps: 5,
                    lr: 1e-2,
                    batch_size: 16,
                    mask_prob: 0.15,
                };
                sft_select_mask(&backbone, &docs, &cfg, &mut rng).unwrap()
            }
            _ => init_peft(kind, &backbone, 0.01, &mut rng).unwrap(),
        };
        let theta = backbone.checksum();
        let phi0 = peft.checksum();
        let set = trainable_set(&backbone, Some(&peft), Phase::Upstream);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), backbone.num_params(), peft.num_params());
        for _ in 0..200 {
            let idx: Vec<usize> = (0..16).map(|_| rng.random_range(0..docs.len())).collect();
            let seqs: Vec<Vec<TokenId>> = idx.iter().map(|&i| docs[i].clone()).collect();
            let batch = masked_lm_batch(&seqs, 0.15, backbone.config.vocab_size, &mut rng).unwrap();
            train_step(&mut backbone, Some(&mut peft), &batch, &LossKind::Mlm, &set, &mut adam).unwrap();
        }
        let up_ok = backbone.checksum() == theta && peft.checksum() != phi0;

        let phi = peft.checksum();
        let set = trainable_set(&backbone, Some(&peft), Phase::Downstream);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), backbone.num_params(), peft.num_params());
        for _epoch in 0..2 {
            for chunk in (0..docs.len()).collect::<Vec<_>>().chunks(16) {
                let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|&i| docs[i].clone()).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let batch = Batch::classification(&seqs, &ys).unwrap();
                train_step(&mut backbone, Some(&mut peft), &batch, &LossKind::classification(), &set, &mut adam).unwrap();
            }
        }
        let down_ok = peft.checksum() == phi && backbone.checksum() != theta;
        pass &= up_ok && down_ok;
        notes.push(format!(
            "{kind}: backbone after 200 upstream steps {}, module after 2 epochs {}",
            if up_ok { "unchanged" } else { "CHANGED" },
            if down_ok { "unchanged" } else { "CHANGED" }
        ));
    }
    outcome(pass, notes.join("; "))
}

fn budget() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (label, cfg) in [("toy default", ModelConfig::toy(200, 2)), ("desk suite", desk_model(200))] {
        let backbone = TransformerParams::init(cfg, &mut rng).unwrap();
        let n = backbone.num_params() as f64;
        for kind in KINDS {
            let peft = match kind {
                PeftKind::Sft => {
                    let docs = random_seqs(&cfg, 3, 32);
                    let c = SftSelectConfig {
                        budget_fraction: 0.01,
                        steps: 2,
                        lr: 1e-2,
                        batch_size: 8,
                        mask_prob: 0.15,
                    };
                    sft_select_mask(&backbone, &docs, &c, &mut rng).unwrap()
                }
                _ => init_peft(kind, &backbone, 0.01, &mut rng).unwrap(),
            };
            let frac = count_params(&peft) as f64 / n;
            pass &= (0.005..=0.015).contains(&frac);
            notes.push(format!("{label} {kind} {:.2}%", 100.0 * frac));
        }
    }
    outcome(pass, format!("{} (want 0.50%..1.50%)", notes.join(", ")))
}

fn cda_properties() -> Outcome {
    let t = tables();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = Vec::new();
    let (mut with_gender, mut with_race) = (0, 0);
    for i in 0..1000 {
        let n = rng.random_range(1..24);
        let seq: Vec<TokenId> = (0..n).map(|_| rng.random_range(5..t.vocab.len() as TokenId)).collect();
        with_gender += t.gender.contains_attribute(&seq) as usize;
        with_race += t.race.contains_attribute(&seq) as usize;
        for (axis, table) in [("gender", &t.gender), ("race", &t.race)] {
            if let Err(e) = check_rotation(&seq, table) {
                failures.push(format!("sentence {i} {axis}: {e}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "1000 sentences ({with_gender} with gender words, {with_race} with race words), {} violations{}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches: BTreeMap<&str, usize> = BTreeMap::new();
    let mut bump = |name: &'static str, ok: bool| {
        *mismatches.entry(name).or_default() += (!ok) as usize;
    };
    let idents: Vec<String> = IDENTS.iter().map(|s| s.to_string()).collect();
    for _ in 0..100 {
        let n = rng.random_range(1..=1000);
        let c = rng.random_range(2..7);
        let rows: Vec<(usize, bool)> = (0..n).map(|_| (rng.random_range(0..c), rng.random())).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (gaps, agg) = oracle_tpr(&rows, &preds, c);
        bump(
            "tpr_gap",
            match tpr_gap(&preds, &gender_corpus(&rows, c)) {
                Ok(r) => r.per_occupation.iter().map(|o| o.gap).collect::<Vec<_>>() == gaps && Some(r.aggregate) == agg,
                Err(_) => agg.is_none(),
            },
        );

        let rows: Vec<(usize, u8)> = (0..n).map(|_| (rng.random_range(0..2), rng.random_range(0..32))).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        bump(
            "fprd",
            match (fprd(&preds, &race_corpus(&rows), &idents, 1), oracle_fprd(&rows, &preds)) {
                (Ok(r), Some((overall, terms, total))) => {
                    r.overall_fpr == overall
                        && r.per_identifier.iter().map(|t| t.term).collect::<Vec<_>>() == terms
                        && r.total == total
                }
                (Err(_), None) => true,
                _ => false,
            },
        );

        let scores: Vec<[i64; 3]> = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-20..20))).collect();
        let f: Vec<[f64; 3]> = scores.iter().map(|s| s.map(|x| x as f64)).collect();
        let r = stereoset_from_scores(&f).unwrap();
        bump("stereoset_scores", (r.lm_score, r.ss_score) == oracle_stereoset(&scores));

        let nli: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        bump("bias_nli_fn", bias_nli_fn(&nli, 1).unwrap() == oracle_neutral(&nli, 1));

        let lm = Rigged {
            weight: (0..V).map(|_| rng.random_range(0..4)).collect(),
        };
        let pairs: Vec<MinimalPair> = (0..rng.random_range(1..40))
            .map(|_| {
                let len = rng.random_range(2..6);
                let mut s: Vec<TokenId> = vec![CLS];
                s.extend((0..len).map(|_| rng.random_range(5..V as TokenId)));
                s.push(SEP);
                let mut other = s.clone();
                let at = rng.random_range(1..s.len() - 1);
                other[at] = rng.random_range(5..V as TokenId);
                other.insert(1, 5);
                MinimalPair::new(s, other)
            })
            .collect();
        let credit: f64 = pairs
            .iter()
            .map(|p| {
                let (a, b) = (oracle_pll(&lm, &p.sent_more, &p.shared_more), oracle_pll(&lm, &p.sent_less, &p.shared_less));
                if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                }
            })
            .sum();
        bump("crows_score", crows_score(&lm, &pairs).unwrap() == 100.0 * credit / pairs.len() as f64);
    }
    let anchors = stereoset_from_scores(&[[-1.0, -2.0, -9.0], [-2.0, -1.0, -9.0]]).unwrap().ss_score == 50.0
        && bias_nli_fn(&[1, 1, 1], 1).unwrap() == 1.0
        && tpr_gap(&[0, 1, 0, 1], &gender_corpus(&[(0, true), (1, true), (0, false), (1, false)], 2))
            .unwrap()
            .aggregate
            == 0.0
        && fprd(&[0, 0], &race_corpus(&[(0, 1), (0, 2)]), &IDENTS.map(String::from), 1).unwrap().total == 0.0;
    let bad: Vec<String> = mismatches.iter().filter(|(_, &n)| n > 0).map(|(k, n)| format!("{k} {n}/100")).collect();
    outcome(
        bad.is_empty() && anchors,
        format!(
            "100 randomized trials each of {}: {}; ideal-value anchors {}",
            mismatches.keys().copied().collect::<Vec<_>>().join(", "),
            if bad.is_empty() { "all exact".to_string() } else { format!("mismatches {}", bad.join(", ")) },
            if anchors { "hold" } else { "BROKEN" }
        ),
    )
}

/// Strictly better than FT: on the seed mean, or (flake policy) on a
/// majority of paired seeds.
fn beats(ft: &[(u64, f64)], other: &[(u64, f64)], lower_is_better: bool) -> (bool, String) {
    let mean = |v: &[(u64, f64)]| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64;
    let better = |a: f64, b: f64| if lower_is_better { a < b } else { a > b };
    let wins = other
        .iter()
        .filter(|(s, x)| ft.iter().find(|(t, _)| t == s).is_some_and(|&(_, f)| better(*x, f)))
        .count();
    let (m_ft, m) = (mean(ft), mean(other));
    let by_mean = better(m, m_ft);
    let majority = other.len() >= 2 && wins + 1 >= other.len() && wins * 2 > other.len();
    let verdict = if by_mean {
        "pass"
    } else if majority {
        "pass by flake policy"
    } else {
        "FAIL"
    };
    (by_mean || majority, format!("{m:.4} vs FT {m_ft:.4}, {wins}/{} seeds better: {verdict}", other.len()))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let fx = prepare_fixtures(&dir.path().join("fx"), &SuiteConfig::default(), &PretrainSettings::default()).unwrap();
    let grid: GridConfig = peft_debias::config::parse_grid(&fx.grid).unwrap();
    let out = run_grid(&grid, &dir.path().join("runs"), 1).unwrap();

    let mut cells: BTreeMap<(String, String), Vec<(u64, MetricReport)>> = BTreeMap::new();
    for (cell, r) in &out.cells {
        cells
            .entry((cell.experiment.clone(), cell.config.method.display_name().to_string()))
            .or_default()
            .push((cell.config.seed, r.clone()));
    }
    let series = |exp: &str, method: &str, get: fn(&MetricReport) -> Option<f64>| -> Vec<(u64, f64)> {
        cells
            .get(&(exp.to_string(), method.to_string()))
            .map(|v| v.iter().map(|(s, r)| (*s, get(r).expect("metric present"))).collect())
            .unwrap_or_default()
    };
    let peft_names = ["Adapter", "Prompt", "LoRa", "SFT"];
    let mut lines = Vec::new();

    let mut a_pass = true;
    for (exp, base) in [("bios", "bios"), ("hate", "hate"), ("nli<-bios", "nli")] {
        let ft = series(base, "FT", |r| r.acc);
        for m in peft_names {
            for (seed, acc) in series(exp, m, |r| r.acc) {
                let f = ft.iter().find(|p| p.0 == seed).expect("paired FT run").1;
                let ok = (acc - f).abs() <= 0.05;
                a_pass &= ok;
                if !ok {
                    lines.push(format!("    (a) {exp} {m} seed {seed}: ACC {acc:.4} vs FT {f:.4}"));
                }
            }
        }
    }
    lines.insert(0, format!("    (a) every PEFT run within 5pp of FT accuracy: {}", if a_pass { "pass" } else { "FAIL" }));

    let mut b_pass = true;
    for (exp, metric, get) in [
        ("bios", "TPR-GAP", (|r: &MetricReport| r.tpr_gap) as fn(&MetricReport) -> Option<f64>),
        ("hate", "FPRD", |r: &MetricReport| r.fprd),
    ] {
        let ft = series(exp, "FT", get);
        for m in ["Full-Debias", "Adapter", "Prompt", "LoRa", "SFT"] {
            let (ok, note) = beats(&ft, &series(exp, m, get), true);
            b_pass &= ok;
            lines.push(format!("    (b) {exp} {metric} {m}: {note}"));
        }
    }
    let mut c_pass = true;
    let ft = series("nli", "FT", |r| r.fn_neutral);
    for m in peft_names {
        let (ok, note) = beats(&ft, &series("nli<-bios", m, |r| r.fn_neutral), false);
        c_pass &= ok;
        lines.push(format!("    (c) nli<-bios FN {m}: {note}"));
    }
    let elapsed = start.elapsed();
    let time_ok = elapsed < Duration::from_secs(15 * 60);
    let pass = a_pass && b_pass && c_pass && time_ok;
    let verdict = |b: bool| if b { "pass" } else { "FAIL" };
    outcome(
        pass,
        format!(
            "{} runs in {:.0}s (target < 900s {}); (a) {}, (b) {}, (c) {}\n{}",
            out.cells.len(),
            elapsed.as_secs_f64(),
            verdict(time_ok),
            verdict(a_pass),
            verdict(b_pass),
            verdict(c_pass),
            lines.join("\n")
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixtures(&dir.path().join("fx"));
    let mut differing = Vec::new();
    for (task, method) in [(&fx.bios, "sft"), (&fx.hate, "prompt"), (&fx.bios, "full-debias")] {
        let cfg = quick_config(task, &[&format!("method={method}")]);
        let a = run_experiment(&cfg, &dir.path().join("a")).unwrap();
        let b = run_experiment(&cfg, &dir.path().join("b")).unwrap();
        for name in [UPSTREAM_CKPT, DOWNSTREAM_CKPT, "report.json", UPSTREAM_CURVE, DOWNSTREAM_CURVE] {
            if std::fs::read(a.dir.join(name)).unwrap() != std::fs::read(b.dir.join(name)).unwrap() {
                differing.push(format!("{}/{name}", cfg.name));
            }
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "SFT, Prompt and Full-Debias runs repeated: reports, checkpoints and curves byte-identical".into()
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

fn selection() -> Outcome {
    let cases: [(&[(usize, f64)], Criterion, Option<usize>); 7] = [
        (&[(0, 3.0), (1000, 2.5), (2000, 2.7), (3000, 2.6)], Criterion::MinLoss, Some(1000)),
        (&[(0, 0.61), (1, 0.74), (2, 0.80), (3, 0.79)], Criterion::MaxMetric, Some(2)),
        (&[(0, 2.0), (100, 1.0), (200, 1.0)], Criterion::MinLoss, Some(100)),
        (&[(0, 0.5), (1, 0.9), (2, 0.9)], Criterion::MaxMetric, Some(1)),
        (&[(0, 1.0), (5, 1.0)], Criterion::MinLoss, Some(0)),
        (&[(7, 0.3)], Criterion::MaxMetric, Some(7)),
        (&[], Criterion::MinLoss, None),
    ];
    let wrong: Vec<String> = cases
        .iter()
        .enumerate()
        .filter_map(|(i, (c, k, want))| {
            let got = select_checkpoint(c, *k);
            (got != *want).then(|| format!("case {i}: got {got:?}, want {want:?}"))
        })
        .collect();
    outcome(
        wrong.is_empty(),
        format!("{} min-loss / max-metric / tie-to-earliest cases: {}", cases.len(), if wrong.is_empty() { "exact".into() } else { wrong.join("; ") }),
    )
}

fn main() {
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    let skip_grid = std::env::var_os("ACCEPTANCE_SKIP_GRID").is_some_and(|v| v == "1");
    let criteria: Vec<(u8, &str, Box<dyn FnOnce() -> Outcome>)> = vec![
        (1, "gradient correctness", Box::new(gradients)),
        (2, "identity at init", Box::new(identity_at_init)),
        (3, "freeze contracts", Box::new(freeze_contracts)),
        (4, "parameter budget", Box::new(budget)),
        (5, "CDA properties", Box::new(cda_properties)),
        (6, "metric oracles", Box::new(metric_oracles)),
        (7, "end-to-end directional check", Box::new(end_to_end)),
        (8, "determinism", Box::new(determinism)),
        (9, "checkpoint selection", Box::new(selection)),
    ];
    let mut hard_failures = 0;
    for (n, name, check) in criteria {
        if n == 7 && skip_grid {
            println!("criterion {n} [SKIP] {name}: ACCEPTANCE_SKIP_GRID=1");
            continue;
        }
        let o = guarded(check);
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass && (n != 7 || strict) {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
