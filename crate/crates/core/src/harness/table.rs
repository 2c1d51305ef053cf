//! Results tables: one row per run, per-session accuracies, Avg., and the
//! gain of a reference row over each row.

use crate::error::{Result, SvtError};
use crate::metrics::{average_accuracy, relative_improvement, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = SvtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            _ => Err(SvtError::Config(format!("unknown table format {s:?}"))),
        }
    }
}

/// Half-away-from-zero to two decimals, formatted without a negative zero.
pub fn format_cell(x: f64) -> String {
    let r = (x * 100.0).round() / 100.0;
    format!("{:.2}", r + 0.0)
}

/// Signed variant for the improvement column.
fn format_signed(x: f64) -> String {
    let s = format_cell(x);
    if s.starts_with('-') || s == "0.00" {
        s
    } else {
        format!("+{s}")
    }
}

/// Renders `results` with the given row labels. The last column is
/// `avg(reference) − avg(row)`, so the reference row reads 0.00. Avg. is
/// taken over unrounded accuracies.
pub fn emit_results_table(
    results: &[RunResult],
    labels: &[String],
    reference: usize,
    format: TableFormat,
) -> Result<String> {
    if results.is_empty() {
        return Err(SvtError::Layout("no results to tabulate".into()));
    }
    if labels.len() != results.len() {
        return Err(SvtError::Layout(format!(
            "{} labels for {} results",
            labels.len(),
            results.len()
        )));
    }
    if reference >= results.len() {
        return Err(SvtError::Layout(format!(
            "reference row {reference} outside {} rows",
            results.len()
        )));
    }
    let sessions = results[0].per_session.len();
    if let Some(r) = results.iter().find(|r| r.per_session.len() != sessions) {
        return Err(SvtError::Layout(format!(
            "run {} has {} sessions, expected {sessions}",
            r.config_hash,
            r.per_session.len()
        )));
    }
    let avgs = results
        .iter()
        .map(|r| average_accuracy(&r.accuracies()))
        .collect::<Result<Vec<_>>>()?;

    let mut header = vec!["Method".to_string()];
    header.extend((0..sessions).map(|i| i.to_string()));
    header.push("Avg.".into());
    header.push("Improvement".into());

    let rows: Vec<Vec<String>> = results
        .iter()
        .zip(labels)
        .zip(&avgs)
        .map(|((r, label), &avg)| {
            let mut row = vec![label.clone()];
            row.extend(r.accuracies().into_iter().map(format_cell));
            row.push(format_cell(avg));
            row.push(format_signed(relative_improvement(avgs[reference], avg)));
            row
        })
        .collect();

    Ok(match format {
        TableFormat::Markdown => {
            let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
            let mut out = line(&header);
            let rule: Vec<String> = header
                .iter()
                .enumerate()
                .map(|(i, _)| if i == 0 { "---".into() } else { "---:".into() })
                .collect();
            out.push_str(&line(&rule));
            for row in &rows {
                out.push_str(&line(row));
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&header).map_err(|e| SvtError::Format(e.to_string()))?;
            for row in &rows {
                w.write_record(row).map_err(|e| SvtError::Format(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| SvtError::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| SvtError::Format(e.to_string()))?
        }
    })
}
