use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{config_hash, AuditError, JobResult, RunConfig};
use crate::evaluation::{aggregate_folds, FoldMetrics, MetricsSummary, PartitionReport};
use crate::probes::ProbeKind;
use crate::stats::mean;
use crate::synthgen::{Dataset, SizeClass};

/// Bumped whenever a field of [`AuditReport`] changes meaning.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const REPORT_FILE: &str = "report.json";
pub const FOLDS_FILE: &str = "folds.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub probe: ProbeKind,
    pub input: String,
    pub scale: String,
    pub mask: String,
    pub seed: u64,
    pub fold: usize,
    pub macro_f1: f64,
    pub recall_large: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub probe: ProbeKind,
    pub input: String,
    pub scale: String,
    pub mask: String,
    /// Index of the plan in the config.
    pub plan: usize,
    /// Scored folds, over all seeds.
    pub n: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub recall_large_mean: f64,
    pub recall_large_std: f64,
    /// Mean Macro-F1 of each seed, in ascending seed order.
    pub seed_macro_f1: Vec<f64>,
    /// Mean training loss over the first and last five epochs, averaged
    /// over jobs.
    pub loss_first5: f64,
    pub loss_last5: f64,
    /// Jobs whose last-five mean loss was not below the first-five mean.
    pub loss_not_decreasing: usize,
}

/// Fold metrics of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub probe: ProbeKind,
    pub input: String,
    pub scale: String,
    pub mask: String,
    pub plan: usize,
    pub seed: u64,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub probe: ProbeKind,
    pub baseline_scale: String,
    pub scale: String,
    pub mask: String,
    pub report: PartitionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRow {
    pub feature: String,
    pub bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub jobs: usize,
    pub predictions_compared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_polyps: usize,
    pub n_frames: usize,
    pub n_large_polyps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    /// The config file exactly as read.
    pub config: String,
    /// Audit seeds given on the command line in place of the config's.
    pub seed_override: Option<u64>,
    pub dataset: DatasetSummary,
    /// One row per (probe, plan) over all seeds.
    pub summary: Vec<SummaryRow>,
    /// One row per (probe, plan, seed).
    pub per_seed: Vec<SeedRow>,
    pub folds: Vec<FoldRow>,
    pub partition: Vec<PartitionRow>,
    pub mutual_information: Vec<MiRow>,
    pub guard: Option<GuardReport>,
}

impl AuditReport {
    pub fn row(&self, probe: ProbeKind, plan: usize) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.probe == probe && r.plan == plan)
    }

    pub fn mi(&self, feature: &str) -> Option<f64> {
        self.mutual_information
            .iter()
            .find(|r| r.feature == feature)
            .map(|r| r.bits)
    }

    pub fn to_json(&self) -> Result<String, AuditError> {
        serde_json::to_string_pretty(self).map_err(|e| AuditError::Data(e.to_string()))
    }
}

fn loss_window(history: &[f64]) -> (f64, f64) {
    let k = history.len().min(5);
    (mean(&history[..k]), mean(&history[history.len() - k..]))
}

pub(super) fn build_report(
    cfg: &RunConfig,
    text: &str,
    seed_override: Option<u64>,
    dataset: &Dataset,
    results: &[JobResult],
    partition: Vec<super::PartitionRow>,
    mutual_information: Vec<MiRow>,
    guard: Option<GuardReport>,
) -> Result<AuditReport, AuditError> {
    // Rows are sorted by (probe, plan, seed, fold).
    let mut by_job: BTreeMap<(ProbeKind, usize), Vec<&JobResult>> = BTreeMap::new();
    for r in results {
        by_job.entry((r.probe, r.plan)).or_default().push(r);
    }
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();

    let mut summary = Vec::new();
    let mut per_seed = Vec::new();
    let mut folds = Vec::new();
    for ((_, plan_index), mut jobs) in by_job {
        jobs.sort_by_key(|j| (j.seed, j.fold));
        let plan = &cfg.plans[plan_index].plan;
        let probe = jobs[0].probe;
        let (scale, mask, input) = (
            plan.scale_label(),
            plan.mask_label(),
            probe.input_name().to_string(),
        );
        for j in &jobs {
            folds.push(FoldRow {
                probe,
                input: input.clone(),
                scale: scale.clone(),
                mask: mask.clone(),
                seed: j.seed,
                fold: j.fold,
                macro_f1: j.macro_f1,
                recall_large: j.recall_large,
            });
        }
        for &seed in &seeds {
            let fm = jobs
                .iter()
                .filter(|j| j.seed == seed)
                .map(|j| FoldMetrics {
                    fold: j.fold,
                    macro_f1: j.macro_f1,
                    recall_large: j.recall_large,
                })
                .collect();
            per_seed.push(SeedRow {
                probe,
                input: input.clone(),
                scale: scale.clone(),
                mask: mask.clone(),
                plan: plan_index,
                seed,
                metrics: MetricsSummary::from_folds(fm)?,
            });
        }
        let f1: Vec<f64> = jobs.iter().map(|j| j.macro_f1).collect();
        let rec: Vec<f64> = jobs.iter().map(|j| j.recall_large).collect();
        let (macro_f1_mean, macro_f1_std) = aggregate_folds(&f1)?;
        let (recall_large_mean, recall_large_std) = aggregate_folds(&rec)?;
        let seed_macro_f1 = seeds
            .iter()
            .map(|&s| {
                mean(
                    &jobs
                        .iter()
                        .filter(|j| j.seed == s)
                        .map(|j| j.macro_f1)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let windows: Vec<(f64, f64)> = jobs
            .iter()
            .filter(|j| !j.loss_history.is_empty())
            .map(|j| loss_window(&j.loss_history))
            .collect();
        let (first, last): (Vec<f64>, Vec<f64>) = windows.iter().copied().unzip();
        summary.push(SummaryRow {
            probe,
            input,
            scale,
            mask,
            plan: plan_index,
            n: jobs.len(),
            macro_f1_mean,
            macro_f1_std,
            recall_large_mean,
            recall_large_std,
            seed_macro_f1,
            loss_first5: if first.is_empty() { 0.0 } else { mean(&first) },
            loss_last5: if last.is_empty() { 0.0 } else { mean(&last) },
            loss_not_decreasing: windows.iter().filter(|(a, b)| !(b < a)).count(),
        });
    }

    let n_large_polyps = dataset
        .cohort
        .iter()
        .filter(|p| p.size_class == SizeClass::Large)
        .count();
    Ok(AuditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(text, seed_override),
        config: text.to_string(),
        seed_override,
        dataset: DatasetSummary {
            n_polyps: dataset.cohort.len(),
            n_frames: dataset.frames.len(),
            n_large_polyps,
        },
        summary,
        per_seed,
        folds,
        partition,
        mutual_information,
        guard,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn folds_csv(rows: &[FoldRow]) -> String {
    let mut out = String::from("probe,input,scale,mask,seed,fold,macro_f1,recall_large\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.probe.name(),
            csv_field(&r.input),
            csv_field(&r.scale),
            csv_field(&r.mask),
            r.seed,
            r.fold,
            r.macro_f1,
            r.recall_large
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "probe,input,scale,mask,n,macro_f1_mean,macro_f1_std,recall_large_mean,recall_large_std\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.probe.name(),
            csv_field(&r.input),
            csv_field(&r.scale),
            csv_field(&r.mask),
            r.n,
            r.macro_f1_mean,
            r.macro_f1_std,
            r.recall_large_mean,
            r.recall_large_std
        );
    }
    out
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AuditError {
    AuditError::Io(format!("{}: {e}", path.display()))
}

/// Writes the JSON report, both CSV tables and a copy of the config.
pub fn write_outputs(report: &AuditReport, dir: &Path) -> Result<(), AuditError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let files = [
        (REPORT_FILE, report.to_json()? + "\n"),
        (FOLDS_FILE, folds_csv(&report.folds)),
        (SUMMARY_FILE, summary_csv(&report.summary)),
        (CONFIG_FILE, report.config.clone()),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Reads a JSON report; `path` may be the file or its output directory.
pub fn read_report(path: &Path) -> Result<AuditReport, AuditError> {
    let file = if path.is_dir() {
        path.join(REPORT_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| io_err(&file, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| AuditError::Data(format!("{}: {e}", file.display())))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(REPORT_SCHEMA_VERSION)) {
        return Err(AuditError::Data(format!(
            "{}: report schema version {:?}, expected {REPORT_SCHEMA_VERSION}",
            file.display(),
            version
        )));
    }
    serde_json::from_value(value).map_err(|e| AuditError::Data(format!("{}: {e}", file.display())))
}

/// Summary rows of several reports. Reports must come from the same config
/// unless `force` is set; rows repeated verbatim across reports appear once.
pub fn merge_reports(
    reports: &[AuditReport],
    force: bool,
) -> Result<Vec<Vec<SummaryRow>>, AuditError> {
    let first = reports
        .first()
        .ok_or_else(|| AuditError::Config("no reports to merge".into()))?;
    if !force {
        if let Some(other) = reports.iter().find(|r| r.config_hash != first.config_hash) {
            return Err(AuditError::Config(format!(
                "reports come from different configs ({} vs {}); pass --force to merge anyway",
                &first.config_hash[..12.min(first.config_hash.len())],
                &other.config_hash[..12.min(other.config_hash.len())]
            )));
        }
    }
    // The same run listed twice contributes once.
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for r in reports {
        let key = (&r.config_hash, r.seed_override);
        if !seen.contains(&key) {
            seen.push(key);
            out.push(r.summary.clone());
        }
    }
    Ok(out)
}

/// Aligned text table, with Macro-F1 deltas in percentage points against
/// the row of the same probe and mask whose scale is `baseline`.
pub fn render_table(rows: &[SummaryRow], baseline: &str) -> String {
    render_groups(&[rows.to_vec()], baseline)
}

/// One table over several reports; each delta uses the baseline row of its
/// own report.
pub fn render_groups(groups: &[Vec<SummaryRow>], baseline: &str) -> String {
    let header = [
        "probe",
        "input",
        "scale",
        "mask",
        "n",
        "macro_f1",
        "recall_large",
        "delta_pp",
    ];
    let mut cells: Vec<[String; 8]> = Vec::new();
    for (rows, r) in groups.iter().flat_map(|g| g.iter().map(move |r| (g, r))) {
        let base = rows
            .iter()
            .find(|b| b.probe == r.probe && b.mask == r.mask && b.scale == baseline);
        let delta = match base {
            Some(b) => format!("{:+.1}", 100.0 * (r.macro_f1_mean - b.macro_f1_mean)),
            None => "-".into(),
        };
        cells.push([
            r.probe.name().to_string(),
            r.input.clone(),
            r.scale.clone(),
            r.mask.clone(),
            r.n.to_string(),
            format!("{:.3} ± {:.3}", r.macro_f1_mean, r.macro_f1_std),
            format!("{:.3} ± {:.3}", r.recall_large_mean, r.recall_large_std),
            delta,
        ]);
    }
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |row: &[String]| {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header.map(String::from));
    for row in &cells {
        line(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scale: &str, f1: f64) -> SummaryRow {
        SummaryRow {
            probe: ProbeKind::DepthCnn3,
            input: "depth".into(),
            scale: scale.into(),
            mask: "gt".into(),
            plan: 0,
            n: 5,
            macro_f1_mean: f1,
            macro_f1_std: 0.01,
            recall_large_mean: 0.5,
            recall_large_std: 0.02,
            seed_macro_f1: vec![f1],
            loss_first5: 0.7,
            loss_last5: 0.5,
            loss_not_decreasing: 0,
        }
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(
            csv_field("metric_estimate(bias=1,sigma=2)"),
            "\"metric_estimate(bias=1,sigma=2)\""
        );
        assert_eq!(csv_field("none"), "none");
    }

    #[test]
    fn table_shows_deltas_against_the_baseline() {
        let t = render_table(&[row("none", 0.7), row("oracle_frame", 0.861)], "none");
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with("+0.0"), "{t}");
        assert!(lines[2].ends_with("+16.1"), "{t}");
        // Columns line up.
        assert_eq!(lines[1].find("0.700"), lines[2].find("0.861"));
    }

    #[test]
    fn loss_window_handles_short_histories() {
        assert_eq!(loss_window(&[3.0, 1.0]), (2.0, 2.0));
        let h: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(loss_window(&h), (2.0, 7.0));
    }
}
