//! Run statistics and their CSV / JSONL serializations.
//!
//! Column order of [`MetricsRecord`] is the CSV column order and is part of
//! the versioned schema in `schemas/metrics.csv.md`. Step logs follow
//! `schemas/steplog.jsonl.md`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{DecisionKind, PolicyKind};
use crate::sim::{GeneratorMode, StepRecord, TraceOutcome};
use crate::store::memory_bytes;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const STEPLOG_SCHEMA_VERSION: u32 = 1;

/// Bytes per scalar used for memory accounting (fp16 storage).
pub const ACCOUNTING_BYTES_PER_SCALAR: u64 = 2;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("nothing to summarize")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: PolicyKind,
    pub budget: usize,
    pub page_size: usize,
    pub sink_count: usize,
    pub prefill_len: usize,
    pub decode_steps: usize,
    pub batch: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mode: GeneratorMode,
    pub seed: u64,
    pub prefill_evicted: usize,
    /// Decode steps (per sequence and layer) that evicted anything.
    pub evictions_total: u64,
    pub page_evictions: u64,
    pub token_evictions: u64,
    pub tokens_removed: u64,
    /// One update per eviction event, whether it removed a page or a token.
    pub block_table_updates: u64,
    pub fragmentation_mean: f64,
    pub fragmentation_max: f64,
    pub fragmentation_outside_newest_max: f64,
    pub deviation_mean: f64,
    pub deviation_p95: f64,
    pub deviation_max: f64,
    pub final_retained_max: usize,
    pub retained_bytes: u64,
    /// Median wall-clock of the prefill phase; 0 when timing is off.
    pub prefill_wall_ns: u64,
    /// Median wall-clock of the decode phase; 0 when timing is off.
    pub decode_wall_ns: u64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 28] = [
        "policy",
        "budget",
        "page_size",
        "sink_count",
        "prefill_len",
        "decode_steps",
        "batch",
        "layers",
        "heads",
        "head_dim",
        "mode",
        "seed",
        "prefill_evicted",
        "evictions_total",
        "page_evictions",
        "token_evictions",
        "tokens_removed",
        "block_table_updates",
        "fragmentation_mean",
        "fragmentation_max",
        "fragmentation_outside_newest_max",
        "deviation_mean",
        "deviation_p95",
        "deviation_max",
        "final_retained_max",
        "retained_bytes",
        "prefill_wall_ns",
        "decode_wall_ns",
    ];

    /// Aggregates every sequence and layer of a trace. Timings are supplied
    /// separately so repeated runs can report medians.
    pub fn from_outcome(outcome: &TraceOutcome, prefill_wall_ns: u64, decode_wall_ns: u64) -> Self {
        let policy = outcome.policy;
        let trace = outcome.trace;

        let mut evictions_total = 0;
        let mut page_evictions = 0;
        let mut token_evictions = 0;
        let mut tokens_removed = 0;
        let mut frag_sum = 0.0;
        let mut frag_max: f64 = 0.0;
        let mut frag_outside_max: f64 = 0.0;
        let mut n = 0usize;
        let mut deviations = Vec::new();

        for r in outcome.step_records() {
            match &r.decision {
                DecisionKind::None => {}
                DecisionKind::Tokens { positions } => {
                    evictions_total += 1;
                    token_evictions += positions.len() as u64;
                }
                DecisionKind::Page { .. } => {
                    evictions_total += 1;
                    page_evictions += 1;
                }
            }
            tokens_removed += r.removed as u64;
            frag_sum += r.fragmentation;
            frag_max = frag_max.max(r.fragmentation);
            frag_outside_max = frag_outside_max.max(r.fragmentation_outside_newest);
            n += 1;
            if r.layer == 0 {
                deviations.push(r.deviation);
            }
        }

        let final_retained_max = outcome
            .sequences
            .iter()
            .flat_map(|s| s.final_positions.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let prefill_evicted = outcome.sequences.iter().flat_map(|s| s.prefill.layers.iter()).map(|l| l.evicted).sum();

        Self {
            policy: policy.kind,
            budget: policy.budget,
            page_size: policy.page_size,
            sink_count: policy.sink_count,
            prefill_len: trace.prefill_len,
            decode_steps: trace.decode_len,
            batch: trace.batch,
            layers: trace.layers,
            heads: trace.heads,
            head_dim: trace.head_dim,
            mode: trace.mode,
            seed: trace.seed,
            prefill_evicted,
            evictions_total,
            page_evictions,
            token_evictions,
            tokens_removed,
            block_table_updates: evictions_total,
            fragmentation_mean: if n == 0 { 0.0 } else { frag_sum / n as f64 },
            fragmentation_max: frag_max,
            fragmentation_outside_newest_max: frag_outside_max,
            deviation_mean: mean(&deviations),
            deviation_p95: percentile(&deviations, 0.95),
            deviation_max: deviations.iter().copied().fold(0.0, f64::max),
            final_retained_max,
            retained_bytes: memory_bytes(
                final_retained_max as u64,
                trace.layers as u64,
                trace.heads as u64,
                trace.head_dim as u64,
                ACCOUNTING_BYTES_PER_SCALAR,
            )
            .unwrap_or(u64::MAX),
            prefill_wall_ns,
            decode_wall_ns,
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile; 0 for an empty slice.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Median of integer samples (lower median for even counts).
pub fn median_ns(samples: &[u64]) -> u64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    s.get(s.len().saturating_sub(1) / 2).copied().unwrap_or(0)
}

pub fn emit_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(MetricsRecord::COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

pub fn emit_jsonl<'a, W: Write>(
    steps: impl IntoIterator<Item = &'a StepRecord>,
    mut out: W,
) -> Result<(), MetricsError> {
    for (i, s) in steps.into_iter().enumerate() {
        serde_json::to_writer(&mut out, s).map_err(|source| MetricsError::Json { line: i + 1, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<StepRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MetricsError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub budget: usize,
    pub page_size: usize,
    pub decode_steps: usize,
    pub block_table_updates: u64,
    pub page_evictions: u64,
    pub token_evictions: u64,
    /// Table updates relative to PagedEviction under the same budget, page
    /// size and trace. `None` when there is no such run or it never evicted.
    pub cadence_ratio: Option<f64>,
    pub fragmentation_max: f64,
    pub deviation_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

fn same_run_shape(a: &MetricsRecord, b: &MetricsRecord) -> bool {
    (a.budget, a.page_size, a.prefill_len, a.decode_steps, a.batch, a.layers, a.seed, a.mode)
        == (b.budget, b.page_size, b.prefill_len, b.decode_steps, b.batch, b.layers, b.seed, b.mode)
}

pub fn summarize(records: &[MetricsRecord]) -> Result<Summary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let rows = records
        .iter()
        .map(|r| {
            let reference = records.iter().find(|p| p.policy == PolicyKind::PagedEviction && same_run_shape(p, r));
            let cadence_ratio = reference
                .filter(|p| p.block_table_updates > 0)
                .map(|p| r.block_table_updates as f64 / p.block_table_updates as f64);
            SummaryRow {
                policy: r.policy,
                budget: r.budget,
                page_size: r.page_size,
                decode_steps: r.decode_steps,
                block_table_updates: r.block_table_updates,
                page_evictions: r.page_evictions,
                token_evictions: r.token_evictions,
                cadence_ratio,
                fragmentation_max: r.fragmentation_max,
                deviation_mean: r.deviation_mean,
            }
        })
        .collect();
    Ok(Summary { rows })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<15} {:>7} {:>5} {:>7} {:>9} {:>8} {:>9} {:>8} {:>9} {:>10}",
            "policy", "budget", "page", "decode", "updates", "pages", "tokens", "cadence", "frag_max", "dev_mean"
        )?;
        for r in &self.rows {
            let cadence = r.cadence_ratio.map_or_else(|| "-".to_string(), |c| format!("{c:.2}"));
            writeln!(
                f,
                "{:<15} {:>7} {:>5} {:>7} {:>9} {:>8} {:>9} {:>8} {:>9.4} {:>10.6}",
                r.policy.as_str(),
                r.budget,
                r.page_size,
                r.decode_steps,
                r.block_table_updates,
                r.page_evictions,
                r.token_evictions,
                cadence,
                r.fragmentation_max,
                r.deviation_mean
            )?;
        }
        Ok(())
    }
}
