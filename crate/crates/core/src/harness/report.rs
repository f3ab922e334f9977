use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::perception::Lighting;

/// `correct / total` kept as exact counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: u64,
    pub total: u64,
}

impl Ratio {
    /// Percent in tenths, rounded half up: 1389/1500 -> 926.
    pub fn tenths_of_percent(&self) -> u64 {
        // round(1000 c / t) = floor((2000 c + t) / 2t), exact in integers.
        (2000 * self.correct + self.total) / (2 * self.total)
    }

    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tenths_of_percent();
        write!(f, "{}.{}%", t / 10, t % 10)
    }
}

/// Execution rate: correct trials divided by all trials.
pub fn execution_rate(correct: u64, total: u64) -> Result<Ratio, HarnessError> {
    if total == 0 {
        return Err(HarnessError::InvalidSpec("execution rate over zero trials".into()));
    }
    if correct > total {
        return Err(HarnessError::InvalidSpec(format!("{correct} correct out of {total}")));
    }
    Ok(Ratio { correct, total })
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub lighting: Option<Lighting>,
    pub clutter: Option<f64>,
    pub wer: Option<f64>,
    pub detector: Option<String>,
    pub nlu: Option<String>,
    pub csr: u64,
    pub cp: u64,
    pub n: u64,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, csr: u64, cp: u64, n: u64) -> Self {
        Self {
            label: label.into(),
            lighting: None,
            clutter: None,
            wer: None,
            detector: None,
            nlu: None,
            csr,
            cp,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn lighting_name(l: Lighting) -> &'static str {
    match l {
        Lighting::Bright => "Bright",
        Lighting::Dim => "Dim",
    }
}

fn percent(fraction: f64) -> String {
    let t = (fraction * 1000.0).round() as i64;
    if t % 10 == 0 {
        format!("{}%", t / 10)
    } else {
        format!("{}.{}%", t / 10, t % 10)
    }
}

fn rate(correct: u64, n: u64) -> String {
    execution_rate(correct, n)
        .map(|r| r.to_string())
        .unwrap_or_else(|_| "-".into())
}

type Column = (&'static str, fn(&ReportRow) -> String);

fn columns(rows: &[ReportRow]) -> Vec<Column> {
    let mut cols: Vec<Column> = vec![("label", |r| r.label.clone())];
    let optional: [(bool, Column); 5] = [
        (
            rows.iter().any(|r| r.lighting.is_some()),
            ("LC", |r| r.lighting.map(lighting_name).unwrap_or("-").to_string()),
        ),
        (
            rows.iter().any(|r| r.clutter.is_some()),
            ("B.N.", |r| r.clutter.map(percent).unwrap_or_else(|| "-".into())),
        ),
        (
            rows.iter().any(|r| r.wer.is_some()),
            ("WER", |r| r.wer.map(|w| format!("{w}")).unwrap_or_else(|| "-".into())),
        ),
        (
            rows.iter().any(|r| r.detector.is_some()),
            ("detector", |r| r.detector.clone().unwrap_or_else(|| "-".into())),
        ),
        (
            rows.iter().any(|r| r.nlu.is_some()),
            ("nlu", |r| r.nlu.clone().unwrap_or_else(|| "-".into())),
        ),
    ];
    cols.extend(optional.into_iter().filter(|(on, _)| *on).map(|(_, c)| c));
    cols.extend::<[Column; 5]>([
        ("CSR", |r| r.csr.to_string()),
        ("CP", |r| r.cp.to_string()),
        ("CSR-ER", |r| rate(r.csr, r.n)),
        ("CP-ER", |r| rate(r.cp, r.n)),
        ("N", |r| r.n.to_string()),
    ]);
    cols
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders rows as CSV or a markdown table. Optional columns (LC, B.N.,
/// WER, detector, nlu) appear only when some row sets them; output depends
/// on the input alone.
pub fn emit_report(title: &str, rows: &[ReportRow], format: ReportFormat) -> String {
    let cols = columns(rows);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let header: Vec<&str> = cols.iter().map(|(h, _)| *h).collect();
            out.push_str(&header.join(","));
            out.push('\n');
            for r in rows {
                let cells: Vec<String> = cols.iter().map(|(_, f)| csv_field(&f(r))).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "## {title}\n");
            let header: Vec<&str> = cols.iter().map(|(h, _)| *h).collect();
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
            for r in rows {
                let cells: Vec<String> = cols.iter().map(|(_, f)| f(r).replace('|', "\\|")).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
            let mut counts: Vec<u64> = rows.iter().map(|r| r.n).collect();
            counts.sort_unstable();
            counts.dedup();
            match counts.as_slice() {
                [] => {}
                [n] => {
                    let _ = writeln!(out, "\nTrials per row: {n}.");
                }
                _ => {
                    let _ = writeln!(out, "\nTrials per row vary; see the N column.");
                }
            }
        }
    }
    out
}
