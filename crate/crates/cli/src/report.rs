//! Metric CSV files and the cross-run comparison table.

use std::io::Write;
use std::path::Path;

use defunet::metrics::{MetricsReport, METRIC_COLUMNS};

use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

/// One labelled row of the seven table metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub values: [Option<f64>; 7],
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Result<Option<f64>, CliError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| CliError::Data(format!("not a number: `{s}`")))
}

/// Columns of per-image and summary files, after the label column.
pub const REPORT_COLUMNS: [&str; 10] = [
    "dice",
    "dice_raw",
    "ac",
    "iou",
    "precision",
    "recall",
    "f1",
    "auc",
    "dice_loss",
    "threshold",
];

pub fn report_cells(r: &MetricsReport) -> [String; 10] {
    [
        r.dice.to_string(),
        r.dice_raw.to_string(),
        r.accuracy.to_string(),
        r.iou.to_string(),
        r.precision.to_string(),
        r.recall.to_string(),
        r.f1.to_string(),
        cell(r.auc),
        r.dice_loss.to_string(),
        r.threshold.to_string(),
    ]
}

/// Writes one row per image, labelled by id.
pub fn write_per_image(path: &Path, rows: &[(String, MetricsReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once("id").chain(REPORT_COLUMNS))?;
    for (id, r) in rows {
        w.write_record(std::iter::once(id.clone()).chain(report_cells(r)))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a single labelled summary row.
pub fn write_summary(path: &Path, label: &str, n: usize, r: &MetricsReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["split", "n"].into_iter().chain(REPORT_COLUMNS))?;
    w.write_record([label.to_string(), n.to_string()].into_iter().chain(report_cells(r)))?;
    w.flush()?;
    Ok(())
}

/// Reads the seven table metrics of the first data row, by header name.
/// Absent columns and empty cells become `None`.
pub fn read_metrics(path: &Path) -> Result<[Option<f64>; 7], CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let record = r
        .records()
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: no rows", path.display())))??;
    let mut out = [None; 7];
    for (slot, name) in out.iter_mut().zip(METRIC_COLUMNS) {
        if let Some(i) = headers.iter().position(|h| h == name) {
            *slot = parse_cell(record.get(i).unwrap_or(""))?;
        }
    }
    Ok(out)
}

/// One row per run directory under `runs` holding a summary file, in
/// name order.
pub fn collect(runs: &Path) -> Result<Vec<Row>, CliError> {
    let read = std::fs::read_dir(runs).map_err(|e| CliError::Data(format!("{}: {e}", runs.display())))?;
    let mut dirs = Vec::new();
    for entry in read {
        let path = entry?.path();
        if path.join(SUMMARY_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!(
            "no run with {SUMMARY_FILE} under {}",
            runs.display()
        )));
    }
    dirs.iter()
        .map(|d| {
            Ok(Row {
                label: d.file_name().expect("dir name").to_string_lossy().into_owned(),
                values: read_metrics(&d.join(SUMMARY_FILE))?,
            })
        })
        .collect()
}

pub fn to_csv(rows: &[Row]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("model").chain(METRIC_COLUMNS))?;
    for row in rows {
        w.write_record(std::iter::once(row.label.clone()).chain(row.values.iter().map(|v| cell(*v))))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<Row>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.len() != 8 || headers.iter().skip(1).ne(METRIC_COLUMNS) {
        return Err(CliError::Data("unexpected report header".into()));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut values = [None; 7];
        for (i, v) in values.iter_mut().enumerate() {
            *v = parse_cell(&record[i + 1])?;
        }
        rows.push(Row {
            label: record[0].to_string(),
            values,
        });
    }
    Ok(rows)
}

pub fn to_markdown(rows: &[Row]) -> String {
    let mut s = String::from("| Model | Dice | AC | IOU | Precision | Recall | F1 Score | AUC |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for row in rows {
        s.push_str(&format!("| {} |", row.label.replace('|', "\\|")));
        for v in row.values {
            s.push_str(&format!(" {} |", v.map(|x| format!("{x:.4}")).unwrap_or_default()));
        }
        s.push('\n');
    }
    s
}

pub fn render(rows: &[Row], format: Format) -> Result<String, CliError> {
    match format {
        Format::Csv => to_csv(rows),
        Format::Markdown => Ok(to_markdown(rows)),
    }
}

/// Appends a line to any writer; used for terminal summaries.
pub fn print_report(out: &mut impl Write, label: &str, r: &MetricsReport) -> std::io::Result<()> {
    writeln!(
        out,
        "{label}: dice {:.4} ac {:.4} iou {:.4} precision {:.4} recall {:.4} f1 {:.4} auc {}",
        r.dice,
        r.accuracy,
        r.iou,
        r.precision,
        r.recall,
        r.f1,
        r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_values_and_gaps() {
        let rows = vec![
            Row {
                label: "defunet".into(),
                values: [
                    Some(0.1),
                    Some(1.0 / 3.0),
                    Some(0.5),
                    Some(1.0),
                    Some(0.0),
                    Some(0.25),
                    None,
                ],
            },
            Row {
                label: "unet, small".into(),
                values: [
                    Some(f64::MIN_POSITIVE),
                    None,
                    Some(0.9),
                    Some(0.8),
                    Some(0.7),
                    Some(0.6),
                    Some(0.5),
                ],
            },
        ];
        let text = to_csv(&rows).unwrap();
        assert_eq!(from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn markdown_has_one_line_per_row() {
        let rows = vec![Row {
            label: "a".into(),
            values: [None; 7],
        }];
        let md = to_markdown(&rows);
        assert_eq!(md.lines().count(), 3);
        assert!(md.lines().last().unwrap().starts_with("| a |"));
    }
}
