//! Renders fairness reports as Markdown tables, CSV, JSON and long-format
//! plot data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::metrics::{CellMetric, FairnessCell, FairnessReport};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const PLOT_DATA: &str = "plotdata.csv";

/// Four decimals, ties to even, no negative zero.
pub fn fmt4(x: f64) -> String {
    let s = format!("{x:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StatType {
    Max,
    Min,
    #[serde(rename = "SNSR")]
    Snsr,
    #[serde(rename = "SNSV")]
    Snsv,
    /// Overall score over all personality prompts.
    #[serde(rename = "PAFS")]
    Pafs,
}

impl StatType {
    pub const SPREAD: [StatType; 4] = [StatType::Max, StatType::Min, StatType::Snsr, StatType::Snsv];

    pub fn as_str(self) -> &'static str {
        match self {
            StatType::Max => "Max",
            StatType::Min => "Min",
            StatType::Snsr => "SNSR",
            StatType::Snsv => "SNSV",
            StatType::Pafs => "PAFS",
        }
    }

    fn of(self, cell: &FairnessCell) -> f64 {
        match self {
            StatType::Max => cell.max,
            StatType::Min => cell.min,
            StatType::Snsr => cell.snsr,
            StatType::Snsv => cell.snsv,
            StatType::Pafs => unreachable!("not a cell statistic"),
        }
    }
}

fn table_header(out: &mut String, columns: &[String]) {
    let _ = writeln!(out, "| Metric | Type | {} |", columns.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---:|".repeat(columns.len()));
}

fn stat_rows(out: &mut String, label: &str, cells: &[&FairnessCell]) {
    for (i, stat) in StatType::SPREAD.into_iter().enumerate() {
        let values: Vec<String> = cells.iter().map(|c| fmt4(stat.of(c))).collect();
        let metric = if i == 0 { label } else { "" };
        let _ = writeln!(out, "| {metric} | {} | {} |", stat.as_str(), values.join(" | "));
    }
}

/// Markdown table with attribute columns in the report's
/// `attribute_order`, four rows per base metric, then the PAFS block.
pub fn emit_markdown(report: &FairnessReport) -> String {
    let k = report.k;
    let mut out = String::new();
    let title = match report.domain {
        crate::domain::Domain::Movie => "Movie",
        crate::domain::Domain::Music => "Music",
    };
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(
        out,
        "Provider `{}` (model `{}`), perturbation `{}`, locale `{}`. Config digest `{}`.\n",
        report.provider_id, report.model, report.perturbation, report.locale, report.config_digest
    );

    let columns: Vec<String> = report.attribute_order.iter().map(|a| a.title().to_owned()).collect();
    table_header(&mut out, &columns);
    let mut metrics: Vec<CellMetric> = report.cells.iter().map(|c| c.base_metric).collect();
    metrics.dedup();
    for metric in metrics {
        let cells: Vec<&FairnessCell> = report
            .attribute_order
            .iter()
            .filter_map(|a| report.cells.iter().find(|c| c.base_metric == metric && c.attribute == a.as_str()))
            .collect();
        stat_rows(&mut out, &metric.label(k), &cells);
    }

    let pafs_label = format!("PAFS@{k} ({})", report.pafs_base_metric.label(k));
    match report.pafs_overall {
        None => {
            out.push_str("\nPAFS omitted: no personality traits were configured.\n");
        }
        Some(overall) => {
            let _ = writeln!(out, "\nOverall {pafs_label}: {}", fmt4(overall));
            if !report.pafs_block.is_empty() {
                out.push('\n');
                let cells: Vec<&FairnessCell> = report
                    .attribute_order
                    .iter()
                    .filter_map(|a| report.pafs_block.iter().find(|c| c.attribute == a.as_str()))
                    .collect();
                table_header(&mut out, &columns);
                stat_rows(&mut out, &pafs_label, &cells);
            }
        }
    }

    if !report.intersectional.is_empty() {
        let mut labels: Vec<String> = report.intersectional.iter().map(|c| c.attribute.clone()).collect();
        labels.dedup();
        out.push_str("\n### Intersectional\n\n");
        table_header(&mut out, &labels);
        let mut metrics: Vec<CellMetric> = report.intersectional.iter().map(|c| c.base_metric).collect();
        metrics.sort();
        metrics.dedup();
        for metric in metrics {
            let cells: Vec<&FairnessCell> = labels
                .iter()
                .filter_map(|l| {
                    report
                        .intersectional
                        .iter()
                        .find(|c| c.base_metric == metric && &c.attribute == l)
                })
                .collect();
            stat_rows(&mut out, &metric.label(k), &cells);
        }
    }

    let e = &report.exclusions;
    let s = &report.shortfall_stats;
    let lists: usize = s.lengths.values().sum();
    let _ = writeln!(
        out,
        "\nExcluded responses: {} malformed, {} refused, {} transport errors. Lists shorter than {}: {} of {}.",
        e.malformed, e.refused, e.transport_error, s.k, s.short_lists, lists
    );
    out
}

/// One numeric statistic of a report, as a CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub domain: String,
    pub base_metric: CellMetric,
    pub stat_type: StatType,
    pub attribute: String,
    pub value: f64,
}

fn stat_rows_of(report: &FairnessReport) -> Vec<StatRow> {
    let domain = report.domain.as_str().to_owned();
    let mut rows = Vec::new();
    for cell in report.cells.iter().chain(&report.pafs_block).chain(&report.intersectional) {
        for stat in StatType::SPREAD {
            rows.push(StatRow {
                domain: domain.clone(),
                base_metric: cell.base_metric,
                stat_type: stat,
                attribute: cell.attribute.clone(),
                value: stat.of(cell),
            });
        }
    }
    if let Some(v) = report.pafs_overall {
        rows.push(StatRow {
            domain,
            base_metric: CellMetric::Pafs,
            stat_type: StatType::Pafs,
            attribute: "overall".into(),
            value: v,
        });
    }
    rows
}

fn write_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

/// Long CSV (domain, base_metric, stat_type, attribute, value). Floats use
/// the shortest representation that round-trips exactly.
pub fn emit_csv(report: &FairnessReport) -> String {
    write_csv(stat_rows_of(report))
}

pub fn parse_csv(text: &str) -> Result<Vec<StatRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

pub fn emit_json(report: &FairnessReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub provider: String,
    pub perturbation: String,
    pub locale: String,
    pub attribute: String,
    pub base_metric: CellMetric,
    pub stat_type: StatType,
    pub value: f64,
}

/// Grouped-bar data across providers and prompt contexts.
pub fn emit_plot_data(reports: &[FairnessReport]) -> String {
    write_csv(reports.iter().flat_map(|r| {
        stat_rows_of(r).into_iter().map(|s| PlotRow {
            provider: r.provider_id.clone(),
            perturbation: r.perturbation.to_string(),
            locale: r.locale.clone(),
            attribute: s.attribute,
            base_metric: s.base_metric,
            stat_type: s.stat_type,
            value: s.value,
        })
    }))
}

/// `<first 12 digest chars>-<UTC timestamp>`.
pub fn run_dir_name(config_digest: &str, at: DateTime<Utc>) -> String {
    let prefix: String = config_digest.chars().take(12).collect();
    format!("{prefix}-{}", at.format("%Y%m%dT%H%M%SZ"))
}

/// Writes the four report files into `dir` and returns their paths.
/// `baseline` feeds report.md/.csv/.json; `plot` feeds plotdata.csv.
pub fn write_report_files(
    dir: &Path,
    baseline: &FairnessReport,
    plot: &[FairnessReport],
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (REPORT_MD, emit_markdown(baseline)),
        (REPORT_CSV, emit_csv(baseline)),
        (REPORT_JSON, emit_json(baseline)),
        (PLOT_DATA, emit_plot_data(plot)),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Attribute, BaseMetric, Domain};
    use crate::metrics::{ExclusionCounts, ShortfallStats};
    use crate::prompt::Perturbation;

    fn cell(attribute: Attribute, metric: CellMetric, v: [f64; 4]) -> FairnessCell {
        FairnessCell {
            attribute: attribute.as_str().into(),
            base_metric: metric,
            max: v[0],
            min: v[1],
            snsr: v[2],
            snsv: v[3],
        }
    }

    fn report() -> FairnessReport {
        FairnessReport {
            config_digest: "ab".repeat(32),
            provider_id: "gpt".into(),
            model: "m".into(),
            domain: Domain::Movie,
            k: 25,
            perturbation: Perturbation::None,
            locale: "en".into(),
            attribute_order: vec![Attribute::Religion],
            ordering_metric: BaseMetric::PragStar,
            cells: vec![cell(Attribute::Religion, CellMetric::Jaccard, [0.2743, 0.1558, 0.1185, 0.0568])],
            pafs_base_metric: BaseMetric::Jaccard,
            pafs_overall: None,
            pafs_block: Vec::new(),
            intersectional: Vec::new(),
            exclusions: ExclusionCounts::default(),
            shortfall_stats: ShortfallStats::new(25),
        }
    }

    #[test]
    fn four_decimal_rendering() {
        assert_eq!(fmt4(0.03125), "0.0312");
        assert_eq!(fmt4(0.03135), "0.0314");
        assert_eq!(fmt4(1.0 / 3.0), "0.3333");
        assert_eq!(fmt4(-0.00001), "0.0000");
        assert_eq!(fmt4(24.0 / 26.0), "0.9231");
    }

    #[test]
    fn single_attribute_table() {
        let md = emit_markdown(&report());
        assert!(md.contains("| Metric | Type | Religion |"), "{md}");
        assert!(md.contains("| Jaccard@25 | Max | 0.2743 |"));
        assert!(md.contains("|  | Min | 0.1558 |"));
        assert!(md.contains("|  | SNSR | 0.1185 |"));
        assert!(md.contains("|  | SNSV | 0.0568 |"));
        assert!(md.contains("PAFS omitted"));
        assert!(!md.contains("Overall PAFS"));
    }

    #[test]
    fn column_order_follows_report() {
        let mut r = report();
        r.attribute_order = vec![Attribute::Gender, Attribute::Religion];
        r.cells = vec![
            cell(Attribute::Religion, CellMetric::PragStar, [0.5, 0.4, 0.1, 0.05]),
            cell(Attribute::Gender, CellMetric::PragStar, [0.9, 0.1, 0.8, 0.4]),
        ];
        let md = emit_markdown(&r);
        assert!(md.contains("| Metric | Type | Gender | Religion |"));
        assert!(md.contains("| PRAG*@25 | Max | 0.9000 | 0.5000 |"));
        let numeric = md
            .lines()
            .filter(|l| l.starts_with('|') && !l.contains("---") && !l.contains("Metric"))
            .flat_map(|l| l.split('|').skip(3).filter(|c| !c.trim().is_empty()).collect::<Vec<_>>())
            .count();
        assert_eq!(numeric, 4 * 1 * 2);
    }

    #[test]
    fn pafs_block_rendered_when_present() {
        let mut r = report();
        r.pafs_overall = Some(0.9);
        r.pafs_block = vec![cell(Attribute::Religion, CellMetric::Pafs, [0.95, 0.85, 0.1, 0.05])];
        let md = emit_markdown(&r);
        assert!(md.contains("Overall PAFS@25 (Jaccard@25): 0.9000"));
        assert!(md.contains("| PAFS@25 (Jaccard@25) | Max | 0.9500 |"));
    }

    #[test]
    fn csv_round_trips_at_full_precision() {
        let mut r = report();
        r.cells[0].snsv = 0.056_812_345_678_901_23;
        r.pafs_overall = Some(2.0 / 3.0);
        let csv = emit_csv(&r);
        assert!(csv.starts_with("domain,base_metric,stat_type,attribute,value\n"));
        let rows = parse_csv(&csv).unwrap();
        assert_eq!(rows.len(), 5);
        let snsv = rows.iter().find(|s| s.stat_type == StatType::Snsv).unwrap();
        assert!((snsv.value - r.cells[0].snsv).abs() < 1e-12);
        let overall = rows.iter().find(|s| s.stat_type == StatType::Pafs).unwrap();
        assert_eq!(overall.value, 2.0 / 3.0);
    }

    #[test]
    fn json_round_trips_and_carries_digest() {
        let r = report();
        let json = emit_json(&r);
        assert!(json.contains(&r.config_digest));
        let back: FairnessReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(emit_json(&back), json);
    }

    #[test]
    fn plot_rows_are_tagged() {
        let base = report();
        let mut typo = report();
        typo.perturbation = Perturbation::Typo { rate: 0.2, seed: 7 };
        let mut other = report();
        other.provider_id = "gemini".into();
        let csv = emit_plot_data(&[base, typo, other]);
        let rows: Vec<PlotRow> = csv::Reader::from_reader(csv.as_bytes()).deserialize().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows.iter().filter(|r| r.perturbation == "typo:0.2:7").count(), 4);
        assert_eq!(rows.iter().filter(|r| r.provider == "gemini").count(), 4);

        let plain = emit_plot_data(&[report()]);
        assert!(plain.lines().skip(1).all(|l| l.split(',').nth(1) == Some("none")));
    }

    #[test]
    fn run_dir_uses_digest_prefix_and_utc() {
        let at = DateTime::parse_from_rfc3339("2024-05-01T12:30:00Z").unwrap().with_timezone(&Utc);
        assert_eq!(run_dir_name(&"ab".repeat(32), at), "abababababab-20240501T123000Z");
    }
}
