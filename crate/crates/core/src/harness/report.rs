use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::Technique;
use super::metrics::MetricsRow;
use super::rundir::RunDir;

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Ok { metrics: MetricsRow },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub technique: String,
    pub seed: u64,
    pub outcome: Outcome,
}

/// Mean and half-range of each metric over the seeds that completed.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub technique: String,
    pub completed: usize,
    pub seeds: usize,
    pub mean: Option<MetricsRow>,
    pub half_range: Option<MetricsRow>,
}

fn fields(m: &MetricsRow) -> [f64; 5] {
    [m.fact_q, m.fact_s, m.coverage, m.structure_valid, m.avg_len]
}

fn from_fields(f: [f64; 5]) -> MetricsRow {
    MetricsRow {
        fact_q: f[0],
        fact_s: f[1],
        coverage: f[2],
        structure_valid: f[3],
        avg_len: f[4],
    }
}

fn technique_rank(name: &str) -> usize {
    Technique::all()
        .iter()
        .position(|t| t.name() == name)
        .unwrap_or(usize::MAX)
}

pub fn sort_rows(rows: &mut [MatrixRow]) {
    rows.sort_by(|a, b| {
        (technique_rank(&a.technique), &a.technique, a.seed).cmp(&(technique_rank(&b.technique), &b.technique, b.seed))
    });
}

pub fn summarize(rows: &[MatrixRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for group in rows.chunk_by(|a, b| a.technique == b.technique) {
        let ok: Vec<[f64; 5]> = group
            .iter()
            .filter_map(|r| match &r.outcome {
                Outcome::Ok { metrics } => Some(fields(metrics)),
                Outcome::Failed { .. } => None,
            })
            .collect();
        let (mean, half_range) = if ok.is_empty() {
            (None, None)
        } else {
            let mut mean = [0.0; 5];
            let mut half = [0.0; 5];
            for k in 0..5 {
                let xs = ok.iter().map(|f| f[k]);
                mean[k] = xs.clone().sum::<f64>() / ok.len() as f64;
                let lo = xs.clone().fold(f64::INFINITY, f64::min);
                let hi = xs.fold(f64::NEG_INFINITY, f64::max);
                half[k] = (hi - lo) / 2.0;
            }
            (Some(from_fields(mean)), Some(from_fields(half)))
        };
        out.push(SummaryRow {
            technique: group[0].technique.clone(),
            completed: ok.len(),
            seeds: group.len(),
            mean,
            half_range,
        });
    }
    out
}

const HEADER: &str = "\
# Factuality optimization matrix

Each technique starts from the shared supervised checkpoint of its seed and is
evaluated with beam search on the held-out samples, judged by the exact oracle.

- Fact/q: fraction of answers whose every sentence is supported by the context.
- Fact/s: fraction of sentences supported by the context.
- coverage: fraction of supported query aspects answered with the context's value.
  It stands in for a helpfulness judgment.
- structure: fraction of generations with a well-formed outline and sentences and
  no repeated claim. It stands in for a coherence judgment.
- avg_len: mean answer length in tokens.

Summary cells give the mean over completed seeds ± half the range.
";

fn cell(x: f64) -> String {
    format!("{x:.4}")
}

fn pm(mean: f64, half: f64) -> String {
    format!("{mean:.4} ± {half:.4}")
}

pub fn render_markdown(rows: &[MatrixRow]) -> String {
    let mut s = String::from(HEADER);
    s.push_str("\n## Summary\n\n| technique | seeds | Fact/q | Fact/s | coverage | structure | avg_len |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in summarize(rows) {
        let seeds = format!("{}/{}", r.completed, r.seeds);
        match (r.mean, r.half_range) {
            (Some(m), Some(h)) => {
                let cells: Vec<String> = fields(&m).iter().zip(fields(&h)).map(|(&a, b)| pm(a, b)).collect();
                let _ = writeln!(s, "| {} | {seeds} | {} |", r.technique, cells.join(" | "));
            }
            _ => {
                let _ = writeln!(s, "| {} | {seeds} | failed | - | - | - | - |", r.technique);
            }
        }
    }
    s.push_str("\n## Per seed\n\n| technique | seed | status | Fact/q | Fact/s | coverage | structure | avg_len |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        match &r.outcome {
            Outcome::Ok { metrics } => {
                let cells: Vec<String> = fields(metrics).iter().map(|&x| cell(x)).collect();
                let _ = writeln!(s, "| {} | {} | ok | {} |", r.technique, r.seed, cells.join(" | "));
            }
            Outcome::Failed { error } => {
                let msg = error.replace('|', "/").replace('\n', " ");
                let _ = writeln!(
                    s,
                    "| {} | {} | failed: {msg} | - | - | - | - | - |",
                    r.technique, r.seed
                );
            }
        }
    }
    s
}

/// One record per seed row, then one per summary row with seed `mean`.
/// Half-ranges sit in the `*_pm` columns of summary rows.
pub fn render_csv(rows: &[MatrixRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record([
        "technique",
        "seed",
        "status",
        "fact_q",
        "fact_q_pm",
        "fact_s",
        "fact_s_pm",
        "coverage",
        "coverage_pm",
        "structure",
        "structure_pm",
        "avg_len",
        "avg_len_pm",
    ])
    .map_err(csv_err)?;
    let blank = || vec![String::new(); 10];
    for r in rows {
        let mut rec = vec![r.technique.clone(), r.seed.to_string()];
        match &r.outcome {
            Outcome::Ok { metrics } => {
                rec.push("ok".into());
                for x in fields(metrics) {
                    rec.push(cell(x));
                    rec.push(String::new());
                }
            }
            Outcome::Failed { error } => {
                rec.push(format!("failed: {error}"));
                rec.extend(blank());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    for r in summarize(rows) {
        let mut rec = vec![r.technique.clone(), "mean".into()];
        match (r.mean, r.half_range) {
            (Some(m), Some(h)) => {
                rec.push(format!("ok {}/{}", r.completed, r.seeds));
                for (a, b) in fields(&m).iter().zip(fields(&h)) {
                    rec.push(cell(*a));
                    rec.push(cell(b));
                }
            }
            _ => {
                rec.push(format!("failed {}/{}", r.completed, r.seeds));
                rec.extend(blank());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn parse_row_path(rel: &str) -> Option<(u64, String)> {
    let rest = rel.strip_prefix("seed-")?;
    let (seed, rest) = rest.split_once('/')?;
    let name = rest.strip_prefix("eval/")?.strip_suffix(".json")?;
    if name.contains('/') || name.ends_with(".records") {
        return None;
    }
    Some((seed.parse().ok()?, name.to_string()))
}

/// Every evaluated row listed in the manifest, in report order.
pub fn collect_rows(dir: &RunDir) -> Result<Vec<MatrixRow>> {
    let mut rows = Vec::new();
    for rel in dir.manifest().files.keys() {
        if let Some((seed, technique)) = parse_row_path(rel) {
            rows.push(MatrixRow {
                technique,
                seed,
                outcome: dir.read_json(rel)?,
            });
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Renders the rows found in `dir` into both report files.
pub fn write_report(dir: &mut RunDir) -> Result<Vec<MatrixRow>> {
    let rows = collect_rows(dir)?;
    dir.write(REPORT_MD, render_markdown(&rows).as_bytes())?;
    dir.write(REPORT_CSV, render_csv(&rows)?.as_bytes())?;
    Ok(rows)
}
