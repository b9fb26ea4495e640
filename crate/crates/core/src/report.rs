//! Line-delimited documents, step sweeps, tables, and token highlighting.
//!
//! Every document is UTF-8 JSON lines: a header object carrying `kind` and
//! `format_version`, then one record per line. Nothing time-dependent is
//! ever written into a document, so equal inputs give equal bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionResult, Method, MethodConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_corpus_with, select_top_tokens, top_token, MetricReport};
use crate::model::ToyModel;

pub const DOCUMENT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentHeader {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub fraction: f64,
}

impl DocumentHeader {
    pub fn new(kind: &str, seed: u64, fraction: f64) -> Self {
        DocumentHeader {
            format_version: DOCUMENT_FORMAT_VERSION,
            kind: kind.to_string(),
            seed,
            fraction,
        }
    }
}

fn to_jsonl<R: Serialize>(header: &DocumentHeader, records: &[R]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn from_jsonl<R: DeserializeOwned>(text: &str, kind: &str) -> Result<(DocumentHeader, Vec<R>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::format(format!("{kind} document is empty")))?;
    let header: DocumentHeader =
        serde_json::from_str(first).map_err(|e| Error::format(format!("{kind} header: {e}")))?;
    if header.kind != kind || header.format_version != DOCUMENT_FORMAT_VERSION {
        return Err(Error::format(format!(
            "expected a {kind} document with format_version {DOCUMENT_FORMAT_VERSION}, found kind {:?} version {}",
            header.kind, header.format_version
        )));
    }
    let records = lines
        .map(|(no, line)| serde_json::from_str(line).map_err(|e| Error::format(format!("{kind} line {}: {e}", no + 1))))
        .collect::<Result<Vec<R>>>()?;
    Ok((header, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub id: u64,
    pub method: String,
    pub baseline: String,
    pub steps: usize,
    pub rule: Option<String>,
    pub tokens: Vec<String>,
    pub predicted: usize,
    pub per_word: Vec<f64>,
    pub top_indices: Vec<usize>,
    pub delta: f64,
    pub per_word_completeness: Option<Vec<f64>>,
    pub gradient_calls: u64,
}

impl AttributionRecord {
    pub fn new(id: u64, tokens: Vec<String>, predicted: usize, result: &AttributionResult, fraction: f64) -> Self {
        AttributionRecord {
            id,
            method: result.method.name().to_string(),
            baseline: result.baseline.name().to_string(),
            steps: result.steps,
            rule: result.rule.map(|r| r.name().to_string()),
            tokens,
            predicted,
            top_indices: select_top_tokens(&result.per_word, fraction),
            per_word: result.per_word.clone(),
            delta: result.delta,
            per_word_completeness: result.per_word_completeness.clone(),
            gradient_calls: result.gradient_calls,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionDocument {
    pub header: DocumentHeader,
    pub records: Vec<AttributionRecord>,
}

impl AttributionDocument {
    pub const KIND: &'static str = "attribution";

    pub fn new(seed: u64, fraction: f64, records: Vec<AttributionRecord>) -> Self {
        AttributionDocument {
            header: DocumentHeader::new(Self::KIND, seed, fraction),
            records,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.header, &self.records)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let (header, records) = from_jsonl(text, Self::KIND)?;
        Ok(AttributionDocument { header, records })
    }
}

/// Attributes every sentence of `corpus` with each configuration. Records
/// are ordered by sentence id, then by configuration order.
pub fn attribute_corpus(
    model: &ToyModel,
    corpus: &Corpus,
    configs: &[MethodConfig],
    fraction: f64,
) -> Result<Vec<AttributionRecord>> {
    use rayon::prelude::*;
    crate::evaluation::check_fraction(fraction)?;
    let per_sentence = corpus
        .sentences()
        .par_iter()
        .map(|s| {
            let tokens = model
                .vocabulary()
                .encode(&s.tokens)
                .map_err(|e| Error::input(format!("sentence {}: {e}", s.id)))?;
            let (neg, pos) = model.predict_tokens(&tokens)?;
            let predicted = usize::from(pos >= neg);
            configs
                .iter()
                .map(|c| {
                    let r = crate::evaluation::attribute_tokens(model, &tokens, c, s.id)
                        .map_err(|e| with_sentence(e, s.id))?;
                    Ok(AttributionRecord::new(s.id, s.tokens.clone(), predicted, &r, fraction))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<AttributionRecord> = per_sentence.into_iter().flatten().collect();
    records.sort_by_key(|r| r.id);
    Ok(records)
}

fn with_sentence(e: Error, id: u64) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("sentence {id}: {m}")),
        Error::Input(m) => Error::Input(format!("sentence {id}: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsDocument {
    pub header: DocumentHeader,
    pub reports: Vec<MetricReport>,
}

impl MetricsDocument {
    pub const KIND: &'static str = "metrics";

    pub fn new(seed: u64, fraction: f64, reports: Vec<MetricReport>) -> Self {
        MetricsDocument {
            header: DocumentHeader::new(Self::KIND, seed, fraction),
            reports,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.header, &self.reports)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let (header, reports) = from_jsonl(text, Self::KIND)?;
        Ok(MetricsDocument { header, reports })
    }

    /// One row per (method, baseline) pair. Arrows give the better direction.
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["Method", "Baseline", "LO ↓", "Comp ↑", "Suff ↓", "n", "failed"]);
        for r in &self.reports {
            t.push(vec![
                r.method.clone(),
                r.baseline.name().to_string(),
                format!("{:.4}", r.log_odds),
                format!("{:.4}", r.comprehensiveness),
                format!("{:.4}", r.sufficiency),
                r.evaluated.to_string(),
                r.failures.len().to_string(),
            ]);
        }
        t
    }
}

/// Interpolation steps for one sweep row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepCount {
    Fixed(usize),
    /// `factor × m` for an `m`-word sentence.
    PerWord(usize),
}

impl StepCount {
    pub fn for_words(self, m: usize) -> usize {
        match self {
            StepCount::Fixed(k) => k,
            StepCount::PerWord(c) => c * m,
        }
    }

    pub fn label(self) -> String {
        match self {
            StepCount::Fixed(k) => k.to_string(),
            StepCount::PerWord(c) => format!("{c}xm"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepEntry {
    pub method: Method,
    pub steps: StepCount,
}

/// IG at 50, 250 and 10 steps per word; SIG at 10 and 50.
pub fn default_sweep() -> Vec<SweepEntry> {
    use Method::{IntegratedGradients as Ig, SequentialIntegratedGradients as Sig};
    vec![
        SweepEntry { method: Ig, steps: StepCount::Fixed(50) },
        SweepEntry { method: Ig, steps: StepCount::Fixed(250) },
        SweepEntry { method: Ig, steps: StepCount::PerWord(10) },
        SweepEntry { method: Sig, steps: StepCount::Fixed(10) },
        SweepEntry { method: Sig, steps: StepCount::Fixed(50) },
    ]
}

/// IG and SIG at each listed step count, plus IG at 10 steps per word.
pub fn sweep_for_steps(steps: &[usize]) -> Vec<SweepEntry> {
    use Method::{IntegratedGradients as Ig, SequentialIntegratedGradients as Sig};
    let mut entries: Vec<SweepEntry> = steps
        .iter()
        .flat_map(|&k| [Ig, Sig].map(|method| SweepEntry { method, steps: StepCount::Fixed(k) }))
        .collect();
    entries.push(SweepEntry { method: Ig, steps: StepCount::PerWord(10) });
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub steps: String,
    pub log_odds: f64,
    pub comprehensiveness: f64,
    pub sufficiency: f64,
    pub mean_abs_delta: f64,
    pub gradient_calls: u64,
    pub gradient_calls_per_sentence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepDocument {
    pub header: DocumentHeader,
    pub rows: Vec<SweepRow>,
}

impl SweepDocument {
    pub const KIND: &'static str = "sweep";

    pub fn to_jsonl(&self) -> Result<String> {
        to_jsonl(&self.header, &self.rows)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let (header, rows) = from_jsonl(text, Self::KIND)?;
        Ok(SweepDocument { header, rows })
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(&["Method", "Steps", "LO ↓", "Comp ↑", "Suff ↓", "|Delta|", "grad calls/sent"]);
        for r in &self.rows {
            t.push(vec![
                r.method.clone(),
                r.steps.clone(),
                format!("{:.4}", r.log_odds),
                format!("{:.4}", r.comprehensiveness),
                format!("{:.4}", r.sufficiency),
                format!("{:.3e}", r.mean_abs_delta),
                format!("{:.1}", r.gradient_calls_per_sentence),
            ]);
        }
        t
    }
}

/// Runs every sweep entry over the corpus. Wall times come back separately
/// and never enter the document.
pub fn run_sweep(
    model: &ToyModel,
    corpus: &Corpus,
    entries: &[SweepEntry],
    template: &MethodConfig,
    fraction: f64,
) -> Result<(SweepDocument, Vec<Duration>)> {
    let mut rows = Vec::with_capacity(entries.len());
    let mut times = Vec::with_capacity(entries.len());
    for entry in entries {
        let started = Instant::now();
        let report = evaluate_corpus_with(model, corpus, fraction, entry.method.name(), |s| {
            let mut c = template.clone();
            c.method = entry.method;
            c.integration.steps = entry.steps.for_words(s.tokens.len());
            c
        })?;
        if let Some(f) = report.failures.first() {
            return Err(Error::numeric(format!(
                "{}@{}: sentence {} failed: {}",
                entry.method,
                entry.steps.label(),
                f.id,
                f.error
            )));
        }
        times.push(started.elapsed());
        rows.push(SweepRow {
            method: entry.method.name().to_string(),
            steps: entry.steps.label(),
            log_odds: report.log_odds,
            comprehensiveness: report.comprehensiveness,
            sufficiency: report.sufficiency,
            mean_abs_delta: report.mean_abs_delta,
            gradient_calls: report.gradient_calls,
            gradient_calls_per_sentence: report.gradient_calls as f64 / report.evaluated as f64,
        });
    }
    Ok((
        SweepDocument {
            header: DocumentHeader::new(SweepDocument::KIND, template.seed, fraction),
            rows,
        },
        times,
    ))
}

/// Simple aligned text table that also renders as HTML.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Table {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.headers.len(), "table row width");
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| {
                std::iter::once(&self.headers[c])
                    .chain(self.rows.iter().map(|r| &r[c]))
                    .map(|s| s.chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_html(&self) -> String {
        let mut out = String::from("<table>\n<tr>");
        for h in &self.headers {
            let _ = write!(out, "<th>{}</th>", escape_html(h));
        }
        out.push_str("</tr>\n");
        for r in &self.rows {
            out.push_str("<tr>");
            for c in r {
                let _ = write!(out, "<td>{}</td>", escape_html(c));
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n");
        html_page(&out)
    }
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn html_page(body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>pathgrad</title></head>\n<body>\n{body}</body>\n</html>\n"
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Highlight {
    Top1,
    Top,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodHighlight {
    pub method: String,
    pub flags: Vec<Highlight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceHighlight {
    pub id: u64,
    pub tokens: Vec<String>,
    pub methods: Vec<MethodHighlight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighlightReport {
    pub fraction: f64,
    pub sentences: Vec<SentenceHighlight>,
}

pub fn highlight_flags(per_word: &[f64], fraction: f64) -> Vec<Highlight> {
    let mut flags = vec![Highlight::None; per_word.len()];
    for i in select_top_tokens(per_word, fraction) {
        flags[i] = Highlight::Top;
    }
    if let Some(i) = top_token(per_word) {
        flags[i] = Highlight::Top1;
    }
    flags
}

/// Marks, for each sentence and method, the highest-scoring token and the
/// top `fraction` of tokens.
pub fn render_highlight_report(doc: &AttributionDocument) -> Result<HighlightReport> {
    let fraction = doc.header.fraction;
    crate::evaluation::check_fraction(fraction)?;
    let mut by_id: BTreeMap<u64, SentenceHighlight> = BTreeMap::new();
    for r in &doc.records {
        if r.per_word.len() != r.tokens.len() {
            return Err(Error::format(format!(
                "record {} ({}): {} scores for {} tokens",
                r.id,
                r.method,
                r.per_word.len(),
                r.tokens.len()
            )));
        }
        let entry = by_id.entry(r.id).or_insert_with(|| SentenceHighlight {
            id: r.id,
            tokens: r.tokens.clone(),
            methods: Vec::new(),
        });
        if entry.tokens != r.tokens {
            return Err(Error::format(format!("records for sentence {} disagree on its tokens", r.id)));
        }
        entry.methods.push(MethodHighlight {
            method: r.method.clone(),
            flags: highlight_flags(&r.per_word, fraction),
        });
    }
    Ok(HighlightReport {
        fraction,
        sentences: by_id.into_values().collect(),
    })
}

impl HighlightReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `[[token]]` marks the top-1 token, `[token]` the rest of the top set.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            for m in &s.methods {
                let words: Vec<String> = s
                    .tokens
                    .iter()
                    .zip(&m.flags)
                    .map(|(t, f)| match f {
                        Highlight::Top1 => format!("[[{t}]]"),
                        Highlight::Top => format!("[{t}]"),
                        Highlight::None => t.clone(),
                    })
                    .collect();
                let _ = writeln!(out, "{:>5} {:<22} {}", s.id, m.method, words.join(" "));
            }
        }
        out
    }

    /// Top-1 as `<u><b>token</b></u>`, the rest of the top set as `<b>token</b>`.
    pub fn to_html(&self) -> String {
        let mut body = String::from("<table>\n<tr><th>id</th><th>method</th><th>sentence</th></tr>\n");
        for s in &self.sentences {
            for m in &s.methods {
                let words: Vec<String> = s
                    .tokens
                    .iter()
                    .zip(&m.flags)
                    .map(|(t, f)| {
                        let t = escape_html(t);
                        match f {
                            Highlight::Top1 => format!("<u><b>{t}</b></u>"),
                            Highlight::Top => format!("<b>{t}</b>"),
                            Highlight::None => t,
                        }
                    })
                    .collect();
                let _ = writeln!(
                    body,
                    "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
                    s.id,
                    escape_html(&m.method),
                    words.join(" ")
                );
            }
        }
        body.push_str("</table>\n");
        html_page(&body)
    }
}
