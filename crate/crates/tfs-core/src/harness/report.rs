//! Aggregation of run records into report tables and their two renderings:
//! a machine-readable TSV with full-precision values, and an aligned
//! plain-text table in percent with one decimal, gains over FT in
//! parentheses, and the TAPT+ST additive reference line per ratio.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, TfsError};
use crate::harness::{RunRecord, RUNS_FILE};
use crate::metrics::{self, AggregateResult};
use crate::protocols::Regime;

/// Full-precision aggregate table.
pub const REPORT_TSV_FILE: &str = "report.tsv";
/// Human-readable table, percent with one decimal.
pub const REPORT_TEXT_FILE: &str = "report.txt";

/// One regime's aggregate within a ratio block. `result.gain_over_ft` is
/// set on non-FT rows whenever the block has an FT row.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub regime: Regime,
    pub result: AggregateResult,
}

/// All regimes at one labeled ratio. The additive reference is present iff
/// the FT, TAPT, and ST rows all exist.
#[derive(Debug, Clone)]
pub struct ReportBlock {
    pub ratio: f64,
    pub rows: Vec<ReportRow>,
    pub additive_reference: Option<f64>,
}

/// Report over every ratio block, ascending by ratio index. Test-set values
/// are reported when every record has one, dev values otherwise.
#[derive(Debug, Clone)]
pub struct ReportTable {
    pub metric: String,
    pub uses_test: bool,
    pub blocks: Vec<ReportBlock>,
}

/// Groups records by (ratio, regime) and aggregates each group.
pub fn build_table(records: &[RunRecord]) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(TfsError::Metric("no run records to report".into()));
    }
    let metric = records[0].metric.clone();
    if records.iter().any(|r| r.metric != metric) {
        return Err(TfsError::Metric("run records mix different metrics".into()));
    }
    let uses_test = records.iter().all(|r| r.test_value.is_some());
    let mut ratios: BTreeMap<usize, f64> = BTreeMap::new();
    let mut groups: BTreeMap<(usize, Regime), Vec<f64>> = BTreeMap::new();
    for record in records {
        if let Some(prev) = ratios.insert(record.ratio_index, record.ratio) {
            if prev != record.ratio {
                return Err(TfsError::Metric(format!(
                    "ratio index {} maps to both {prev} and {}",
                    record.ratio_index, record.ratio
                )));
            }
        }
        let value = match (uses_test, record.test_value) {
            (true, Some(v)) => v,
            _ => record.dev_value,
        };
        groups.entry((record.ratio_index, record.regime)).or_default().push(value);
    }

    let mut blocks = Vec::new();
    for (&ratio_index, &ratio) in &ratios {
        let mut rows = Vec::new();
        let mut ft: Option<AggregateResult> = None;
        for regime in Regime::ALL {
            if let Some(values) = groups.get(&(ratio_index, regime)) {
                let result = metrics::aggregate(regime.label(), &metric, values)?;
                if regime == Regime::Ft {
                    ft = Some(result.clone());
                }
                rows.push(ReportRow { regime, result });
            }
        }
        if let Some(ft) = &ft {
            for row in &mut rows {
                if row.regime != Regime::Ft {
                    row.result = row.result.clone().with_gain_over(ft)?;
                }
            }
        }
        let tapt = rows.iter().find(|r| r.regime == Regime::Tapt).map(|r| r.result.clone());
        let st = rows.iter().find(|r| r.regime == Regime::St).map(|r| r.result.clone());
        let additive_reference = match (&ft, &tapt, &st) {
            (Some(ft), Some(tapt), Some(st)) => Some(metrics::additive_reference(ft, tapt, st)?),
            _ => None,
        };
        blocks.push(ReportBlock { ratio, rows, additive_reference });
    }
    Ok(ReportTable { metric, uses_test, blocks })
}

fn percent(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

fn format_ratio(ratio: f64) -> String {
    let text = format!("{:.4}", ratio * 100.0);
    format!("{}%", text.trim_end_matches('0').trim_end_matches('.'))
}

/// Student initialization and pseudo-label source per regime, for the
/// lineage columns of the comparison block.
fn lineage(regime: Regime) -> (&'static str, &'static str) {
    match regime {
        Regime::Ft => ("rand", "-"),
        Regime::Tapt => ("tapt", "-"),
        Regime::St => ("rand", "FT"),
        Regime::Stti => ("tapt", "FT"),
        Regime::Tfs => ("tapt", "TAPT+FT"),
    }
}

/// Pads every column to its widest cell. Widths count chars, not bytes,
/// because value cells contain a plus-minus sign.
fn align(rows: &[Vec<String>]) -> String {
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0; columns];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            let pad = widths[i] - cell.chars().count();
            if i + 1 < row.len() {
                line.extend(std::iter::repeat(' ').take(pad));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Tab-separated aggregates at full precision, one row per (ratio, regime).
pub fn render_tsv(table: &ReportTable) -> String {
    let mut out =
        String::from("ratio\tregime\tmetric\tn_runs\tmean\tstd\tgain_over_ft\tadditive_reference\n");
    for block in &table.blocks {
        for row in &block.rows {
            let gain = row.result.gain_over_ft.map(|g| g.to_string()).unwrap_or_default();
            let reference = block.additive_reference.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                block.ratio,
                row.regime.label(),
                table.metric,
                row.result.per_run.len(),
                row.result.mean,
                row.result.std,
                gain,
                reference
            );
        }
    }
    out
}

/// Aligned per-ratio blocks in percent: `mean ± std (+gain)` rows, lineage
/// columns whenever STTI is compared, and the additive reference line.
pub fn render_text(table: &ReportTable) -> String {
    let with_lineage =
        table.blocks.iter().flat_map(|b| &b.rows).any(|r| r.regime == Regime::Stti);
    let split = if table.uses_test { "test" } else { "dev" };
    let mut out = String::new();
    let _ = writeln!(out, "{} on {} (percent, mean ± std over runs)", table.metric, split);
    for block in &table.blocks {
        let _ = writeln!(out);
        let _ = writeln!(out, "labeled ratio {}", format_ratio(block.ratio));
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["regime".to_string()];
        if with_lineage {
            header.push("init".into());
            header.push("pseudo".into());
        }
        header.push("runs".into());
        header.push(table.metric.clone());
        rows.push(header);
        for row in &block.rows {
            let mut cells = vec![row.regime.label().to_string()];
            if with_lineage {
                let (init, pseudo) = lineage(row.regime);
                cells.push(init.into());
                cells.push(pseudo.into());
            }
            cells.push(row.result.per_run.len().to_string());
            let mut value = format!("{} ± {}", percent(row.result.mean), percent(row.result.std));
            if let Some(gain) = row.result.gain_over_ft {
                let _ = write!(value, " ({:+.1})", gain * 100.0);
            }
            cells.push(value);
            rows.push(cells);
        }
        out.push_str(&align(&rows));
        if let Some(reference) = block.additive_reference {
            let _ = writeln!(out, "TAPT+ST additive reference: {}", percent(reference));
        }
        if !block.rows.iter().any(|r| r.regime == Regime::Ft) {
            let _ = writeln!(out, "note: no FT runs; gains and additive reference omitted");
        }
    }
    out
}

/// Builds the table and writes both renderings into `out`.
pub fn emit_report(records: &[RunRecord], out: &Path) -> Result<ReportTable> {
    let table = build_table(records)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_TSV_FILE), render_tsv(&table))?;
    fs::write(out.join(REPORT_TEXT_FILE), render_text(&table))?;
    Ok(table)
}

/// Reads the records back from a results directory's `runs.jsonl`.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RUNS_FILE);
    let body = fs::read_to_string(&path)?;
    let mut records = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| TfsError::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(TfsError::Data(format!("{} holds no run records", path.display())));
    }
    Ok(records)
}
