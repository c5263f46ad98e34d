//! Human-readable tables and machine-readable metric rows.
//!
//! Row files are tab-separated `name k value fingerprint` with a header line
//! and optional `#` comment lines. Values use the shortest representation
//! that parses back to the same `f64`, so equal reports give equal bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use llrec_core::eval::EvalReport;

use crate::bench::TimingReport;
use crate::error::{Error, Result};

pub const HEADER: &str = "name\tk\tvalue\tfingerprint";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub name: String,
    pub k: Option<usize>,
    pub value: f64,
    pub fingerprint: String,
}

impl Row {
    pub fn new(name: impl Into<String>, k: Option<usize>, value: f64, fingerprint: &str) -> Self {
        Self {
            name: name.into(),
            k,
            value,
            fingerprint: fingerprint.into(),
        }
    }
}

/// `<prefix>.recall` / `<prefix>.ndcg` per k, then `<prefix>.users`.
pub fn eval_rows(prefix: &str, r: &EvalReport) -> Vec<Row> {
    let mut rows = Vec::new();
    for (j, &k) in r.ks.iter().enumerate() {
        rows.push(Row::new(
            format!("{prefix}.recall"),
            Some(k),
            r.recall[j],
            &r.fingerprint,
        ));
    }
    for (j, &k) in r.ks.iter().enumerate() {
        rows.push(Row::new(format!("{prefix}.ndcg"), Some(k), r.ndcg[j], &r.fingerprint));
    }
    rows.push(Row::new(
        format!("{prefix}.users"),
        None,
        r.users as f64,
        &r.fingerprint,
    ));
    rows
}

/// Per-batch milliseconds for every component and the total; `k` holds the
/// batch size.
pub fn timing_rows(r: &TimingReport, fingerprint: &str) -> Vec<Row> {
    let mut rows = Vec::new();
    for c in r.components.iter().chain(std::iter::once(&r.total)) {
        let base = format!("{}.{}", r.pipeline, c.name);
        rows.push(Row::new(
            format!("{base}.median_ms"),
            Some(r.batch_size),
            c.median_ms,
            fingerprint,
        ));
        rows.push(Row::new(
            format!("{base}.mean_ms"),
            Some(r.batch_size),
            c.mean_ms,
            fingerprint,
        ));
    }
    rows
}

pub fn render_rows(comments: &[String], rows: &[Row]) -> String {
    let mut s = String::new();
    for c in comments {
        let _ = writeln!(s, "# {c}");
    }
    s.push_str(HEADER);
    s.push('\n');
    for r in rows {
        let k = r.k.map_or("-".to_string(), |k| k.to_string());
        let _ = writeln!(s, "{}\t{k}\t{}\t{}", r.name, r.value, r.fingerprint);
    }
    s
}

pub fn write_rows(path: &Path, comments: &[String], rows: &[Row]) -> Result<()> {
    fs::write(path, render_rows(comments, rows)).map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line == HEADER || line.is_empty() {
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: malformed row", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let k = match f[1] {
            "-" => None,
            x => Some(x.parse().map_err(|_| bad())?),
        };
        rows.push(Row::new(f[0], k, f[2].parse().map_err(|_| bad())?, f[3]));
    }
    Ok(rows)
}

/// Find the value of `name` at `k` in `rows`.
pub fn lookup(rows: &[Row], name: &str, k: Option<usize>) -> Option<f64> {
    rows.iter().find(|r| r.name == name && r.k == k).map(|r| r.value)
}

/// One line per model: recall then NDCG at each k, then user count.
pub fn eval_table(reports: &[(&str, &EvalReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let width = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}", "model");
    for k in &first.ks {
        let _ = write!(s, "  {:>8}", format!("R@{k}"));
    }
    for k in &first.ks {
        let _ = write!(s, "  {:>8}", format!("N@{k}"));
    }
    s.push_str("     users\n");
    for (name, r) in reports {
        let _ = write!(s, "{name:<width$}");
        for x in r.recall.iter().chain(&r.ndcg) {
            let _ = write!(s, "  {x:>8.4}");
        }
        let _ = writeln!(s, "  {:>8}", r.users);
    }
    s
}

/// Median per-batch milliseconds by component.
pub fn timing_table(reports: &[TimingReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = write!(s, "{:<12} batch={:<3}", r.pipeline, r.batch_size);
        for c in &r.components {
            let _ = write!(s, "  {}={:.3}ms", c.name, c.median_ms);
        }
        let _ = writeln!(s, "  total={:.3}ms", r.total.median_ms);
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(
            s,
            "({} timed batches, {} warmup, median of {} reps; {})",
            r.batches, r.warmup, r.reps, r.hardware
        );
    }
    s
}
