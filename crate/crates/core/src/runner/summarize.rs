//! Summaries rebuilt from a manifest and its reports.

use std::path::{Path, PathBuf};

use super::run::{summary_csv, write_atomic, RunManifest, SuiteReport, SummaryRow};

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub missing: Vec<PathBuf>,
    pub table: String,
    pub csv: String,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.missing.is_empty() {
            0
        } else {
            1
        }
    }
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.4}")
    }
}

/// Aligned text table of summary rows.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let header = ["suite", "test", "n", "lhs", "rhs", "se", "z", "verdict"].map(String::from);
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.suite.clone(),
                r.test.clone(),
                r.n.to_string(),
                fmt_num(r.lhs),
                fmt_num(r.rhs),
                fmt_num(r.se),
                fmt_num(r.z),
                r.verdict.as_str().to_string(),
            ]
        })
        .collect();
    let mut width = header.clone().map(|h| h.len());
    for r in &body {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String; 8]| {
        let parts: Vec<String> = cells.iter().zip(width).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    for r in &body {
        out.push_str(&line(r));
    }
    out
}

/// Reads a manifest and every report it lists; missing reports are listed
/// rather than fatal. Writes `summary.csv` next to the manifest.
pub fn summarize(manifest_path: &Path) -> Result<Summary, String> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| format!("{}: {e}", manifest_path.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| format!("{}:{}: {e}", manifest_path.display(), e.line()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for entry in &manifest.reports {
        let p = base.join(&entry.path);
        match std::fs::read_to_string(&p).ok().and_then(|t| serde_json::from_str::<SuiteReport>(&t).ok()) {
            Some(r) => rows.extend(r.rows),
            None => missing.push(p),
        }
    }
    let csv = summary_csv(&rows);
    let out = base.join(&manifest.summary);
    if missing.is_empty() {
        write_atomic(&out, csv.as_bytes()).map_err(|e| format!("{}: {e}", out.display()))?;
    }
    Ok(Summary { table: render_table(&rows), rows, missing, csv })
}
