//! The per-run metric report: JSON with the table column names, plus TSV
//! breakdown tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::AxisName;
use crate::error::{Error, Result};
use crate::metrics::extrinsic::{IdentifierTerm, OccupationGap};

pub const REPORT_SCHEMA: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub name: String,
    pub method: String,
    pub axis: Option<AxisName>,
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    /// Run whose module was reused, for transfer runs.
    pub transfer_from: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub schema: u32,
    pub run: RunMeta,
    #[serde(rename = "SS LM")]
    pub ss_lm: Option<f64>,
    #[serde(rename = "SS Score")]
    pub ss_score: Option<f64>,
    #[serde(rename = "CrowS")]
    pub crows: Option<f64>,
    #[serde(rename = "ACC")]
    pub acc: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
    #[serde(rename = "TPR-GAP")]
    pub tpr_gap: Option<f64>,
    #[serde(rename = "FPRD")]
    pub fprd: Option<f64>,
    #[serde(rename = "FPRD_IPTTS")]
    pub fprd_iptts: Option<f64>,
    #[serde(rename = "FN")]
    pub fn_neutral: Option<f64>,
    pub tpr_gap_by_occupation: Vec<OccupationGap>,
    pub fprd_by_identifier: Vec<IdentifierTerm>,
    pub fprd_iptts_by_identifier: Vec<IdentifierTerm>,
}

/// Column names and accessors, in table order.
pub const COLUMNS: [&str; 9] = ["SS LM", "SS Score", "CrowS", "ACC", "F1", "TPR-GAP", "FPRD", "FPRD_IPTTS", "FN"];

impl MetricReport {
    pub fn new(run: RunMeta) -> Self {
        Self {
            schema: REPORT_SCHEMA,
            run,
            ..Self::default()
        }
    }

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.ss_lm,
            self.ss_score,
            self.crows,
            self.acc,
            self.f1,
            self.tpr_gap,
            self.fprd,
            self.fprd_iptts,
            self.fn_neutral,
        ]
    }

    /// Percentages (SS, CrowS) in [0, 100], ACC/F1/FN in [0, 1], gaps and
    /// differences non-negative, all finite; at least one value present.
    pub fn validate(&self) -> Result<()> {
        if self.schema != REPORT_SCHEMA {
            return Err(Error::Serialization(format!("unsupported report schema {}", self.schema)));
        }
        let v = self.values();
        if v.iter().all(Option::is_none) {
            return Err(Error::Invalid("report holds no metric".into()));
        }
        for (i, (name, x)) in COLUMNS.iter().zip(v).enumerate() {
            let Some(x) = x else { continue };
            let ok = x.is_finite()
                && match i {
                    0..=2 => (0.0..=100.0).contains(&x),
                    3 | 4 | 8 => (0.0..=1.0).contains(&x),
                    _ => x >= 0.0,
                };
            if !ok {
                return Err(Error::Invalid(format!("{name} = {x} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    /// One row per defined column, for terminal display.
    pub fn render(&self) -> String {
        let mut out = format!("run {} ({}, {}, seed {})\n", self.run.name, self.run.method, self.run.task, self.run.seed);
        for (name, v) in COLUMNS.iter().zip(self.values()) {
            let _ = writeln!(out, "  {name:<11} {}", fmt_cell(v));
        }
        out
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn occupation_tsv(rows: &[OccupationGap]) -> String {
    let mut out = String::from("occupation\ttpr_female\ttpr_male\tgap\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.occupation, opt(r.tpr_female), opt(r.tpr_male), opt(r.gap));
    }
    out
}

pub fn identifier_tsv(rows: &[IdentifierTerm]) -> String {
    let mut out = String::from("identifier\tnegatives\tfpr\tterm\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.identifier, r.negatives, opt(r.fpr), opt(r.term));
    }
    out
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes `report.json` and the non-empty breakdown tables into `dir`;
/// returns the report path.
pub fn emit_report(report: &MetricReport, dir: &Path) -> Result<PathBuf> {
    let json = report.to_json()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !report.tpr_gap_by_occupation.is_empty() {
        write(dir.join("tpr_gap_by_occupation.tsv"), &occupation_tsv(&report.tpr_gap_by_occupation))?;
    }
    if !report.fprd_by_identifier.is_empty() {
        write(dir.join("fprd_by_identifier.tsv"), &identifier_tsv(&report.fprd_by_identifier))?;
    }
    if !report.fprd_iptts_by_identifier.is_empty() {
        write(
            dir.join("fprd_iptts_by_identifier.tsv"),
            &identifier_tsv(&report.fprd_iptts_by_identifier),
        )?;
    }
    let path = dir.join(REPORT_FILE);
    write(path.clone(), &format!("{json}\n"))?;
    Ok(path)
}

/// Table with one row per report and one column per metric, tab separated.
pub fn summary_table(reports: &[MetricReport]) -> String {
    let mut out = format!("run\tmethod\ttask\tseed\t{}\n", COLUMNS.join("\t"));
    for r in reports {
        let cells: Vec<String> = r.values().iter().map(|&v| fmt_cell(v)).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.run.name,
            r.run.method,
            r.run.task,
            r.run.seed,
            cells.join("\t")
        );
    }
    out
}
