// SPDX-License-Identifier: MIT OR Apache-2.0

//! Results tables in csv, json and aligned text.
//!
//! Every number is rounded to four decimals (ties to even) when the report is
//! built, so all three formats carry identical values and re-reading a csv
//! report yields equal rows. The composite column is the formula applied to
//! the rounded CLIP-T and DINO-I columns, then rounded.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{composite, fmt4, round_half_even};
use super::runner::{SweepResult, VariantResult};
use crate::error::{Error, Result};
use crate::router::EditCategory;

pub const COLUMNS: [&str; 8] = [
    "variant",
    "clip_t",
    "dino_i",
    "clip_d",
    "composite",
    "delta_vs_baseline",
    "firings",
    "seconds_per_case",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Text,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "text" => Ok(Format::Text),
            other => Err(Error::parse(other, "format must be csv, json or text")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub clip_t: f64,
    pub dino_i: f64,
    pub clip_d: Option<f64>,
    pub composite: f64,
    pub delta_vs_baseline: Option<f64>,
    /// In-band op applications summed over cases.
    pub firings: u64,
    pub seconds_per_case: Option<f64>,
}

/// Per-case detail kept in json reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub variant: String,
    pub case_id: String,
    pub category: EditCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routed: Option<EditCategory>,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    /// Embedding providers and other `key=value` facts, written as header lines.
    pub header: Vec<String>,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub cases: Vec<CaseRow>,
}

fn r4(x: f64) -> f64 {
    round_half_even(x, 4)
}

fn row_of(v: &VariantResult, delta: Option<f64>) -> Result<ReportRow> {
    let m = v.mean.ok_or_else(|| {
        let n = v.failures().count();
        let first = v.failures().next().and_then(|c| c.error.clone()).unwrap_or_default();
        Error::Harness(format!("variant `{}` is incomplete ({n} failed cases; first: {first})", v.name))
    })?;
    let (clip_t, dino_i) = (r4(m.clip_t), r4(m.dino_i));
    Ok(ReportRow {
        variant: v.name.clone(),
        clip_t,
        dino_i,
        clip_d: m.clip_d.map(r4),
        composite: r4(composite(clip_t, dino_i)),
        delta_vs_baseline: delta.map(r4),
        firings: v.applied,
        seconds_per_case: v.seconds_per_case.map(r4),
    })
}

fn case_rows(v: &VariantResult) -> Vec<CaseRow> {
    v.cases
        .iter()
        .map(|c| CaseRow {
            variant: v.name.clone(),
            case_id: c.case_id.clone(),
            category: c.category,
            routed: c.routed,
            composite: r4(c.metrics.map_or(0.0, |m| m.composite)),
        })
        .collect()
}

impl Report {
    /// Report over independent variants. Fails if any variant is incomplete.
    pub fn from_variants(title: impl Into<String>, header: Vec<String>, results: &[VariantResult]) -> Result<Self> {
        let mut header = header;
        for v in results {
            if let Some(acc) = v.routing_accuracy() {
                header.push(format!("routing_accuracy[{}]={}", v.name, fmt4(acc)));
            }
        }
        Ok(Self {
            title: title.into(),
            header,
            rows: results.iter().map(|v| row_of(v, None)).collect::<Result<_>>()?,
            cases: results.iter().flat_map(case_rows).collect(),
        })
    }

    /// Report over a sweep, baseline first, with the delta column filled.
    pub fn from_sweep(title: impl Into<String>, header: Vec<String>, sweep: &SweepResult) -> Result<Self> {
        let mut header = header;
        if let Some(axis) = sweep.axis {
            header.push(format!("axis={axis}"));
        }
        if let Some(best) = sweep.best() {
            header.push(format!("best={}", best.name));
        }
        for r in &sweep.rows {
            if let Some(acc) = r.result.routing_accuracy() {
                header.push(format!("routing_accuracy[{}]={}", r.result.name, fmt4(acc)));
            }
        }
        Ok(Self {
            title: title.into(),
            header,
            rows: sweep
                .rows
                .iter()
                .map(|r| row_of(&r.result, r.delta_vs_baseline))
                .collect::<Result<_>>()?,
            cases: sweep
                .rows
                .iter()
                .filter(|r| r.result.routing_accuracy().is_some())
                .flat_map(|r| case_rows(&r.result))
                .collect(),
        })
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(self)?;
                s.push('\n');
                Ok(s)
            }
            Format::Csv => self.to_csv(),
            Format::Text => Ok(self.to_text()),
        }
    }

    pub fn write(&self, path: &Path, format: Format) -> Result<()> {
        std::fs::write(path, self.render(format)?)?;
        Ok(())
    }

    /// Reads a json report.
    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&crate::error::read_file(path)?)?)
    }

    fn header_lines(&self) -> Vec<String> {
        std::iter::once(format!("# {}", self.title))
            .chain(self.header.iter().map(|h| format!("# {h}")))
            .collect()
    }

    fn to_csv(&self) -> Result<String> {
        let mut out = self.header_lines().join("\n");
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for r in &self.rows {
            w.write_record(fields(r))?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    fn to_text(&self) -> String {
        let rows: Vec<[String; 8]> = self.rows.iter().map(fields).collect();
        let mut widths = COLUMNS.map(str::len);
        for r in &rows {
            for (w, f) in widths.iter_mut().zip(r) {
                *w = (*w).max(f.len().max(1));
            }
        }
        let mut out = self.header_lines().join("\n");
        out.push('\n');
        let line = |cells: &[&str]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                let c = if c.is_empty() { "-" } else { c };
                if i == 0 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "  {c:>w$}");
                }
            }
            s.trim_end().to_string() + "\n"
        };
        out += &line(&COLUMNS);
        for r in &rows {
            out += &line(&r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

fn opt4(x: Option<f64>) -> String {
    x.map(fmt4).unwrap_or_default()
}

fn fields(r: &ReportRow) -> [String; 8] {
    [
        r.variant.clone(),
        fmt4(r.clip_t),
        fmt4(r.dino_i),
        opt4(r.clip_d),
        fmt4(r.composite),
        opt4(r.delta_vs_baseline),
        r.firings.to_string(),
        opt4(r.seconds_per_case),
    ]
}

fn parse_f64(col: &str, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::parse(s, format!("column `{col}` is not a number")))
}

fn parse_opt(col: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_f64(col, s).map(Some)
    }
}

/// Parses the rows of a csv report. `#` lines are skipped.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::parse(headers.iter().collect::<Vec<_>>().join(","), "unexpected csv columns"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        rows.push(ReportRow {
            variant: f(0).to_string(),
            clip_t: parse_f64(COLUMNS[1], f(1))?,
            dino_i: parse_f64(COLUMNS[2], f(2))?,
            clip_d: parse_opt(COLUMNS[3], f(3))?,
            composite: parse_f64(COLUMNS[4], f(4))?,
            delta_vs_baseline: parse_opt(COLUMNS[5], f(5))?,
            firings: f(6).parse().map_err(|_| Error::parse(f(6), "column `firings` is not an integer"))?,
            seconds_per_case: parse_opt(COLUMNS[7], f(7))?,
        });
    }
    Ok(rows)
}
