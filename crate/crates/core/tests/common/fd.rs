//! Central finite differences against the analytic backward pass.

use super::*;
use peft_debias::model::train::loss_value;
use peft_debias::model::{gradients, Batch, LossKind, TrainableSet, TransformerParams};
use peft_debias::peft::{Composed, PeftKind, PeftParams};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
/// Denominator floor: gradients below this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

fn loss_of(backbone: &TransformerParams, peft: Option<&PeftParams>, batch: &Batch, loss: &LossKind) -> f64 {
    let view = Composed::new(backbone, peft).unwrap();
    loss_value(&view, batch, loss).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Every coordinate of backbone and module trainable.
pub fn fd_check(kind: PeftKind, loss: LossKind, batch: &Batch, seed: u64) -> FdReport {
    let cfg = tiny_config();
    let mut backbone = random_params(cfg, seed);
    let mut peft = (kind != PeftKind::None).then(|| random_peft(kind, &backbone, seed + 1));
    let peft_len = peft.as_ref().map_or(0, |p| p.num_params());
    let trainable = TrainableSet {
        backbone: vec![true; backbone.num_params()],
        peft: vec![true; peft_len],
    };
    let analytic = {
        let view = Composed::new(&backbone, peft.as_ref()).unwrap();
        gradients(&view, batch, &loss, &trainable).unwrap()
    };
    assert!(analytic.all_finite());

    let mut report = FdReport {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for i in 0..backbone.num_params() {
        let orig = backbone.data[i];
        backbone.data[i] = orig + EPS;
        let up = loss_of(&backbone, peft.as_ref(), batch, &loss);
        backbone.data[i] = orig - EPS;
        let down = loss_of(&backbone, peft.as_ref(), batch, &loss);
        backbone.data[i] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let e = rel_err(analytic.backbone[i], numeric);
        report.checked += 1;
        if e > report.worst {
            let t = backbone.layout.tensor_of(i).unwrap();
            report.worst = e;
            report.worst_at = format!(
                "backbone {} (analytic {:e}, numeric {:e})",
                backbone.layout.spec(t).name,
                analytic.backbone[i],
                numeric
            );
        }
    }
    if let Some(p) = peft.as_mut() {
        for i in 0..p.num_params() {
            let orig = p.data[i];
            p.data[i] = orig + EPS;
            let up = loss_of(&backbone, Some(p), batch, &loss);
            p.data[i] = orig - EPS;
            let down = loss_of(&backbone, Some(p), batch, &loss);
            p.data[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let e = rel_err(analytic.peft[i], numeric);
            report.checked += 1;
            if e > report.worst {
                let t = p.layout.tensor_of(i).unwrap();
                report.worst = e;
                report.worst_at = format!(
                    "{kind} {} (analytic {:e}, numeric {:e})",
                    p.layout.spec(t).name,
                    analytic.peft[i],
                    numeric
                );
            }
        }
    }
    report
}
