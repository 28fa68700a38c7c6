use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CliResult, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// One unit of work: a JSON record for the report file plus a table row.
pub struct Row {
    pub record: Value,
    pub cells: Vec<String>,
    pub failed: bool,
}

impl Row {
    pub fn ok(record: impl Serialize, cells: Vec<String>) -> Self {
        let record = serde_json::to_value(record).expect("serialisable record");
        Row { record: json!({ "status": "ok", "result": record }), cells, failed: false }
    }

    pub fn failed(context: Value, message: String, mut cells: Vec<String>, width: usize) -> Self {
        cells.resize(width.saturating_sub(1), "-".into());
        cells.push(format!("error: {message}"));
        Row { record: json!({ "status": "error", "context": context, "error": message }), cells, failed: true }
    }
}

pub struct Report {
    pub command: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed)
    }

    pub fn write_jsonl(&self, path: &Path, config: &RunConfig) -> CliResult<()> {
        let file = File::create(path).map_err(|e| format!("creating {}: {e}", path.display()))?;
        let mut out = BufWriter::new(file);
        for row in &self.rows {
            let line = json!({
                "schema_version": SCHEMA_VERSION,
                "command": self.command,
                "config": config,
                "row": row.record,
            });
            writeln!(out, "{line}").map_err(|e| e.to_string())?;
        }
        out.flush().map_err(|e| e.to_string())
    }

    pub fn table(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, c) in widths.iter_mut().zip(&row.cells) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut text = line(self.header.clone());
        text.push('\n');
        for row in &self.rows {
            text.push_str(&line(row.cells.iter().map(String::as_str).collect()));
            text.push('\n');
        }
        text
    }
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.4}")
}
