//! Intrinsic bias probes (CrowS-Pairs-style, StereoSet-style), extrinsic
//! group-rate metrics (TPR-GAP, FPRD, Bias-NLI FN), template generators and
//! the per-run report.

pub mod extrinsic;
pub mod intrinsic;
pub mod report;
pub mod templates;

pub use extrinsic::{accuracy, bias_nli_fn, binary_f1, fprd, tpr_gap, Fprd, IdentifierTerm, OccupationGap, TprGap};
pub use intrinsic::{
    crows_credits, crows_score, option_scores, stereoset_from_scores, stereoset_scores, MinimalPair, StereoInstance,
    StereoScores,
};
pub use report::{emit_report, summary_table, MetricReport, RunMeta, COLUMNS};
pub use templates::{generate_iptts, iptts_records, parse_templates, Template};
