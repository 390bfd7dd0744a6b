//! Evaluation summary and the TSV tables rendered from it.
//!
//! Rendering is a pure function of the summary so `report` can regenerate
//! the tables without rerunning evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tokenhance::enhance::DepthRow;
use tokenhance::metrics::GroupCounts;
use tokenhance::tokenseq::CompressionReport;

pub const REPORT_FILE: &str = "report.tsv";
pub const GROUPS_FILE: &str = "groups.tsv";
pub const DEPTH_FILE: &str = "depth.tsv";
pub const SUMMARY_FILE: &str = "eval/summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    /// Corpus WER (%) of the backend on the system's output.
    pub wer_dev: Option<f64>,
    pub wer_test: f64,
    /// Corpus WER (%) when the system is applied to clean test inputs.
    pub wer_clean: f64,
    pub ued_dev: Option<f64>,
    pub ued_test: f64,
    /// Mean SI-SNR (dB) against the clean waveform, waveform-domain systems only.
    pub si_snr_dev: Option<f64>,
    pub si_snr_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub system: String,
    pub counts: GroupCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_dev: usize,
    pub n_test: usize,
    pub systems: Vec<SystemSummary>,
    /// Test-set UED/WER change groups of each system against the noisy tokens.
    pub groups: Vec<GroupRow>,
    pub depth: Vec<DepthRow>,
    /// `"{split}.{condition}"` -> length statistics.
    pub compression: BTreeMap<String, CompressionReport>,
}

impl EvalSummary {
    pub fn system(&self, name: &str) -> Option<&SystemSummary> {
        self.systems.iter().find(|s| s.system == name)
    }
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.decimals$}"))
}

pub fn render_report(summary: &EvalSummary) -> String {
    let mut out = String::new();
    out.push_str(
        "system\twer_dev\twer_test\twer_clean\tued_dev\tued_test\tsi_snr_dev\tsi_snr_test\n",
    );
    for s in &summary.systems {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.2}\t{:.2}\t{}\t{:.4}\t{}\t{}",
            s.system,
            opt(s.wer_dev, 2),
            s.wer_test,
            s.wer_clean,
            opt(s.ued_dev, 4),
            s.ued_test,
            opt(s.si_snr_dev, 2),
            opt(s.si_snr_test, 2),
        );
    }
    out.push('\n');
    out.push_str("lengths\tframes\tdedup_len\tbpe_len\tdedup_reduction_pct\tbpe_reduction_pct\ttotal_reduction_pct\n");
    for (name, c) in &summary.compression {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}",
            c.frames,
            c.dedup_len,
            c.bpe_len,
            100.0 * c.dedup_reduction,
            100.0 * c.bpe_reduction,
            100.0 * c.total_reduction,
        );
    }
    out
}

pub fn render_groups(summary: &EvalSummary) -> String {
    let mut out = String::from("system\tboth_improved\tued_improved_wer_unchanged\tued_improved_wer_degraded\tothers\ttotal\n");
    for g in &summary.groups {
        let c = &g.counts;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            g.system,
            c.both_improved,
            c.ued_improved_wer_unchanged,
            c.ued_improved_wer_degraded,
            c.others,
            c.total()
        );
    }
    out
}

pub fn render_depth(summary: &EvalSummary) -> String {
    let mut out = String::from("depth\tnum_parameters\tued_test\twer_test\teval_hash\n");
    for row in &summary.depth {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{}\t{}",
            row.depth,
            row.num_parameters,
            row.mean_ued,
            opt(row.wer, 2),
            row.eval_hash
        );
    }
    out
}
