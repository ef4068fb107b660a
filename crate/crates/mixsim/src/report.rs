//! JSON report serialization and human-readable summaries.
//!
//! Reports are self-describing: the resolved simulation config and an
//! artifact format version are embedded in every document. Serialization is
//! deterministic, so identical runs produce byte-identical files.

use std::path::Path;

use anyhow::{Context, Result};
use mixsim_core::engine::Report;
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// On-disk report document: format version plus the engine report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDocument {
    pub format_version: u32,
    #[serde(flatten)]
    pub report: Report,
}

impl ReportDocument {
    pub fn new(report: Report) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            report,
        }
    }
}

pub fn to_json(report: &Report) -> String {
    let mut text = serde_json::to_string_pretty(&ReportDocument::new(report.clone()))
        .expect("report serializes");
    text.push('\n');
    text
}

pub fn write_report_file(report: &Report, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(report))
        .with_context(|| format!("writing report {}", path.display()))
}

pub fn read_report_file(path: &Path) -> Result<ReportDocument> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading report {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
}

/// One-line run summary for terminal output.
pub fn summary_line(report: &Report) -> String {
    format!(
        "ttft={} tpot={:.1} coverage={:.4} steady_coverage={:.4} upgrades={} downgrades={} \
         peak_memory={} stalls={}",
        report.ttft,
        report.tpot,
        report.hot_coverage,
        report.steady_hot_coverage,
        report.upgrades,
        report.downgrades,
        report.peak_memory_bytes,
        report.stall_count,
    )
}

/// Multi-line summary for the `report` subcommand.
pub fn pretty_summary(doc: &ReportDocument) -> String {
    let r = &doc.report;
    let mut out = String::new();
    let mut push = |line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push(format!("report format v{}", doc.format_version));
    push(format!(
        "model: {} layers x {} experts, k={}, n_hot={}",
        r.config.model.num_layers,
        r.config.model.experts_per_layer,
        r.config.model.experts_active_per_token,
        r.n_hot
    ));
    push(format!("ttft: {} ticks", r.ttft));
    push(format!("tpot: {:.2} ticks/token", r.tpot));
    push(format!(
        "throughput: prefill {:.3e} tok/tick, decode {:.3e} tok/tick",
        r.prefill_throughput, r.decode_throughput
    ));
    push(format!(
        "hot coverage (precision proxy, not accuracy): {:.4} overall, {:.4} steady",
        r.hot_coverage, r.steady_hot_coverage
    ));
    push(format!(
        "transitions: {} upgrades, {} downgrades, {} cancelled",
        r.upgrades, r.downgrades, r.cancelled
    ));
    push(format!(
        "prefetch: {} issued, {} hits",
        r.prefetches_issued, r.dram_cache_hits
    ));
    push(format!(
        "upgrade latency: mean {:.1}, max {} (n={})",
        r.upgrade_latency.mean, r.upgrade_latency.max, r.upgrade_latency.count
    ));
    push(format!(
        "memory: peak {} / ceiling {} bytes, {} violations",
        r.peak_memory_bytes, r.memory_ceiling_bytes, r.memory_violations
    ));
    push(format!(
        "audits: {} stalls, {} provenance violations",
        r.stall_count, r.provenance_violations
    ));
    push(format!("total simulated ticks: {}", r.total_ticks));
    out
}

/// Summary CSV for sweeps: one row per grid point.
pub fn sweep_csv_header() -> &'static str {
    "n_hot,hot_coverage,steady_hot_coverage,tpot,ttft,upgrades,downgrades,peak_memory_bytes\n"
}

pub fn sweep_csv_row(report: &Report) -> String {
    format!(
        "{},{},{},{},{},{},{},{}\n",
        report.n_hot,
        report.hot_coverage,
        report.steady_hot_coverage,
        report.tpot,
        report.ttft,
        report.upgrades,
        report.downgrades,
        report.peak_memory_bytes,
    )
}
