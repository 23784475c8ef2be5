//! Table-1-shaped rendering and cross-run pooling.
//!
//! Runs are pooled per (coder, layer, metric) by concatenating their
//! sub-runs and recomputing mean ± 2 SEM. A cell is defined only when every
//! run defines it; otherwise it renders as "—" with a footnote.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ffkv_core::metrics::{MetricValue, METRIC_KEYS};
use serde::{Deserialize, Serialize};

use crate::config::PIPELINE_CODERS;
use crate::error::{CliError, Result};
use crate::pipeline::{AlignmentSummary, RunSummary};

pub const COLUMN_TITLES: [&str; 8] = [
    "Alive ↑",
    "Expl. Var. ↑",
    "Absorp. ↓",
    "Sparse Prob. ↑",
    "AutoInterp ↑",
    "RAVEL-Iso ↑",
    "RAVEL-Cau",
    "SCR ↑",
];

pub fn display_name(label: &str) -> &str {
    match label {
        "ffkv" => "FF-KV",
        "topk_ffkv" => "TopK FF-KV",
        "norm_ffkv" => "Norm. FF-KV",
        "topk_norm_ffkv" => "TopK Norm. FF-KV",
        "sae" => "SAE",
        "transcoder" => "Transcoder",
        "random_ffkv" => "Random Transformer",
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub label: String,
    pub layer: usize,
    /// One cell per [`METRIC_KEYS`] entry.
    pub cells: Vec<MetricValue>,
}

/// Alignment summaries of one run, tagged with where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAlignment {
    pub run: String,
    pub alignment: Vec<AlignmentSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub runs: Vec<String>,
    pub rows: Vec<PooledRow>,
    pub alignment: Vec<RunAlignment>,
}

fn label_rank(label: &str) -> usize {
    PIPELINE_CODERS.iter().position(|l| *l == label).unwrap_or(PIPELINE_CODERS.len())
}

fn pool_cell(values: &[(String, Option<&MetricValue>)]) -> MetricValue {
    let mut notes = Vec::new();
    let mut subs = Vec::new();
    let mut defined = true;
    for (run, v) in values {
        match v {
            None => {
                defined = false;
                notes.push(format!("missing in {run}"));
            }
            Some(v) => {
                if let Some(n) = &v.note {
                    notes.push(if values.len() > 1 { format!("{run}: {n}") } else { n.clone() });
                }
                if v.value.is_none() {
                    defined = false;
                } else {
                    subs.extend_from_slice(&v.sub_runs);
                }
            }
        }
    }
    let note = (!notes.is_empty()).then(|| notes.join("; "));
    if !defined {
        return MetricValue {
            value: None,
            dispersion: None,
            sub_runs: Vec::new(),
            note: Some(note.unwrap_or_else(|| "undefined".into())),
        };
    }
    let mut v = MetricValue::from_sub_runs(subs);
    v.note = note;
    v
}

impl Pooled {
    pub fn from_runs(runs: &[(PathBuf, RunSummary)]) -> Self {
        let names: Vec<String> = runs.iter().map(|(p, _)| p.display().to_string()).collect();
        let mut keys: Vec<(String, usize)> = Vec::new();
        for (_, s) in runs {
            for r in &s.reports {
                let k = (r.label.clone(), r.coder.layer);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        keys.sort_by(|a, b| a.1.cmp(&b.1).then(label_rank(&a.0).cmp(&label_rank(&b.0))).then(a.0.cmp(&b.0)));
        let rows = keys
            .into_iter()
            .map(|(label, layer)| {
                let cells = METRIC_KEYS
                    .iter()
                    .map(|m| {
                        let vals: Vec<(String, Option<&MetricValue>)> = runs
                            .iter()
                            .zip(&names)
                            .map(|((_, s), n)| (n.clone(), s.report(&label, layer).and_then(|r| r.metrics.get(*m))))
                            .collect();
                        pool_cell(&vals)
                    })
                    .collect();
                PooledRow { label, layer, cells }
            })
            .collect();
        let alignment = runs
            .iter()
            .zip(&names)
            .filter(|((_, s), _)| !s.alignment.is_empty())
            .map(|((_, s), n)| RunAlignment {
                run: n.clone(),
                alignment: s.alignment.clone(),
            })
            .collect();
        Self {
            runs: names,
            rows,
            alignment,
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        l.dedup();
        l
    }

    pub fn cell(&self, label: &str, layer: usize, metric: &str) -> Option<&MetricValue> {
        let i = METRIC_KEYS.iter().position(|m| *m == metric)?;
        self.rows.iter().find(|r| r.label == label && r.layer == layer).map(|r| &r.cells[i])
    }
}

/// Three decimals, without a sign on values that round to zero.
fn fmt3(x: f64) -> String {
    let s = format!("{x:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

fn fmt_value(v: &MetricValue) -> String {
    match (v.value, v.dispersion) {
        (Some(m), Some(d)) => format!("{} ± {}", fmt3(m), fmt3(d)),
        (Some(m), None) => fmt3(m),
        _ => "—".to_string(),
    }
}

fn table(out: &mut String, pooled: &Pooled, layer: usize, notes: &mut Vec<String>) {
    out.push_str("| Coder |");
    for t in COLUMN_TITLES {
        let _ = write!(out, " {t} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(COLUMN_TITLES.len()));
    out.push('\n');
    for row in pooled.rows.iter().filter(|r| r.layer == layer) {
        let _ = write!(out, "| {} |", display_name(&row.label));
        for c in &row.cells {
            let mut s = fmt_value(c);
            if let Some(n) = &c.note {
                notes.push(n.clone());
                let _ = write!(s, "[^{}]", notes.len());
            }
            let _ = write!(out, " {s} |");
        }
        out.push('\n');
    }
}

/// Markdown tables: the headline layer first, then every other layer,
/// then alignment partitions and histograms when present.
pub fn render_markdown(pooled: &Pooled, headline: usize) -> String {
    let mut out = String::new();
    let mut notes = Vec::new();
    let mut layers = pooled.layers();
    if let Some(i) = layers.iter().position(|&l| l == headline) {
        layers.remove(i);
        layers.insert(0, headline);
    }
    let _ = writeln!(out, "# Evaluation summary\n");
    if pooled.runs.len() > 1 {
        let _ = writeln!(out, "Pooled over {} runs: {}.\n", pooled.runs.len(), pooled.runs.join(", "));
    }
    for layer in layers {
        let tag = if layer == headline { " (summary layer)" } else { "" };
        let _ = writeln!(out, "## Layer {layer}{tag}\n");
        table(&mut out, pooled, layer, &mut notes);
        out.push('\n');
    }
    out.push_str(
        "Mean ± 2 standard errors over sub-runs. RAVEL-Cau is the raw probability that the edit \
         changes the target attribute.\n",
    );
    for ra in &pooled.alignment {
        if pooled.alignment.len() > 1 {
            let _ = writeln!(out, "\n## Alignment ({})\n", ra.run);
        } else {
            out.push_str("\n## Alignment\n\n");
        }
        out.push_str("| Layer | Direction | Aligned | Middle | Unaligned | Total |\n|---|---|---|---|---|---|\n");
        for a in &ra.alignment {
            for p in &a.partitions {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} ({:.1}%) | {} ({:.1}%) | {} ({:.1}%) | {} |",
                    a.layer,
                    p.direction,
                    p.aligned.len(),
                    100.0 * p.fraction_aligned(),
                    p.middle.len(),
                    100.0 * p.fraction_middle(),
                    p.unaligned.len(),
                    100.0 * p.fraction_unaligned(),
                    p.total
                );
            }
        }
        out.push_str("\n| Layer | Direction | MCS histogram (bins of equal width on [0, 1]) | Negative |\n|---|---|---|---|\n");
        for a in &ra.alignment {
            for h in &a.histograms {
                let counts: Vec<String> = h.counts.iter().map(|c| c.to_string()).collect();
                let _ = writeln!(out, "| {} | {} | {} | {} |", a.layer, h.direction, counts.join(" "), h.clamped_negative);
            }
        }
    }
    if !notes.is_empty() {
        out.push('\n');
        for (i, n) in notes.iter().enumerate() {
            let _ = writeln!(out, "[^{}]: {}", i + 1, n.replace('\n', " "));
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One line per (layer, coder, metric).
pub fn render_csv(pooled: &Pooled) -> String {
    let mut out = String::from("layer,coder,metric,value,pm_2sem,n_sub_runs,note\n");
    for row in &pooled.rows {
        for (m, c) in METRIC_KEYS.iter().zip(&row.cells) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                row.layer,
                row.label,
                m,
                opt(c.value),
                opt(c.dispersion),
                c.sub_runs.len(),
                csv_field(c.note.as_deref().unwrap_or(""))
            );
        }
    }
    out
}

/// Alignment partitions of every run as CSV, or `None` without any.
pub fn render_alignment_csv(pooled: &Pooled) -> Option<String> {
    if pooled.alignment.is_empty() {
        return None;
    }
    let mut out = String::from("run,layer,direction,low,high,aligned,middle,unaligned,total\n");
    for ra in &pooled.alignment {
        for a in &ra.alignment {
            for p in &a.partitions {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    csv_field(&ra.run),
                    a.layer,
                    csv_field(&p.direction),
                    p.low,
                    p.high,
                    p.aligned.len(),
                    p.middle.len(),
                    p.unaligned.len(),
                    p.total
                );
            }
        }
    }
    Some(out)
}

/// Load and pool completed run directories; the headline layer is the
/// first run's.
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<(Pooled, String)> {
    if dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let runs: Vec<(PathBuf, RunSummary)> = dirs
        .iter()
        .map(|d| Ok((d.clone(), RunSummary::load(d)?)))
        .collect::<Result<_>>()?;
    let headline = runs[0].1.summary_layer;
    let pooled = Pooled::from_runs(&runs);
    let md = render_markdown(&pooled, headline);
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.md"), &md)?;
        std::fs::write(out.join("report.csv"), render_csv(&pooled))?;
        if let Some(a) = render_alignment_csv(&pooled) {
            std::fs::write(out.join("alignment.csv"), a)?;
        }
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&pooled)? + "\n")?;
    }
    Ok((pooled, md))
}
