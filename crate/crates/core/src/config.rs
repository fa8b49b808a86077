//! Flat `key = value` run configuration.
//!
//! Keys are the CLI flag names without the leading dashes, so a config file
//! and a command line describe runs in the same vocabulary. `policy`,
//! `budget` and `page-size` accept comma-separated lists; a run covers their
//! cartesian product.
//!
//! ```text
//! # sweep.cfg
//! policy = paged-eviction, streaming-llm, inv-key-l2, key-diff, full
//! budget = 256, 512, 1024
//! page-size = 16
//! seed = 7
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::policy::{PolicyConfig, PolicyKind, DEFAULT_SINK_COUNT};
use crate::sim::{RunSpec, Timing, TraceConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

pub const KEYS: &[&str] = &[
    "policy",
    "budget",
    "page-size",
    "sink-count",
    "prefill",
    "decode",
    "batch",
    "layers",
    "heads",
    "head-dim",
    "d-model",
    "mode",
    "seed",
    "reps",
    "timings",
    "pool-pages",
    "large-scale",
    "out-csv",
    "out-jsonl",
];

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::new(format!("line {}", n + 1), "expected `key = value`"))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::new(key, "unknown key"));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub policies: Vec<PolicyKind>,
    pub budgets: Vec<usize>,
    pub page_sizes: Vec<usize>,
    pub sink_count: usize,
    pub trace: TraceConfig,
    pub reps: usize,
    pub timings: bool,
    pub pool_pages: Option<usize>,
    pub out_csv: Option<PathBuf>,
    pub out_jsonl: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policies: vec![PolicyKind::PagedEviction],
            budgets: vec![64],
            page_sizes: vec![16],
            sink_count: DEFAULT_SINK_COUNT,
            trace: TraceConfig::default(),
            reps: Timing::default().reps,
            timings: false,
            pool_pages: None,
            out_csv: None,
            out_jsonl: None,
        }
    }
}

fn parse_one<T: FromStr>(field: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::new(field, format!("invalid value `{value}`: {e}")))
}

fn parse_list<T: FromStr>(field: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = value.split(',').map(|v| parse_one(field, v)).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(ConfigError::new(field, "needs at least one value"));
    }
    Ok(items)
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies entries in order on top of the defaults, so later entries win.
    /// A `large-scale = true` entry is applied first regardless of position.
    pub fn from_entries(entries: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (key, value) in entries.iter().filter(|(k, _)| k == "large-scale") {
            if parse_one::<bool>(key, value)? {
                cfg.trace = TraceConfig { seed: cfg.trace.seed, mode: cfg.trace.mode, ..TraceConfig::large_scale() };
            }
        }
        for (key, value) in entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "policy" => self.policies = parse_list(key, value)?,
            "budget" => self.budgets = parse_list(key, value)?,
            "page-size" => self.page_sizes = parse_list(key, value)?,
            "sink-count" => self.sink_count = parse_one(key, value)?,
            "prefill" => self.trace.prefill_len = parse_one(key, value)?,
            "decode" => self.trace.decode_len = parse_one(key, value)?,
            "batch" => self.trace.batch = parse_one(key, value)?,
            "layers" => self.trace.layers = parse_one(key, value)?,
            "heads" => self.trace.heads = parse_one(key, value)?,
            "head-dim" => self.trace.head_dim = parse_one(key, value)?,
            "d-model" => self.trace.d_model = parse_one(key, value)?,
            "mode" => self.trace.mode = parse_one(key, value)?,
            "seed" => self.trace.seed = parse_one(key, value)?,
            "reps" => self.reps = parse_one(key, value)?,
            "timings" => self.timings = parse_one(key, value)?,
            "pool-pages" => self.pool_pages = Some(parse_one(key, value)?),
            "large-scale" => {}
            "out-csv" => self.out_csv = Some(PathBuf::from(value)),
            "out-jsonl" => self.out_jsonl = Some(PathBuf::from(value)),
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("prefill", self.trace.prefill_len),
            ("decode", self.trace.decode_len),
            ("batch", self.trace.batch),
            ("layers", self.trace.layers),
            ("heads", self.trace.heads),
            ("head-dim", self.trace.head_dim),
            ("d-model", self.trace.d_model),
            ("reps", self.reps),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::new(*field, "must be positive"));
        }
        if self.pool_pages == Some(0) {
            return Err(ConfigError::new("pool-pages", "must be positive"));
        }
        for &b in &self.page_sizes {
            if b == 0 {
                return Err(ConfigError::new("page-size", "must be positive"));
            }
            for &c in &self.budgets {
                if c < b {
                    return Err(ConfigError::new("budget", format!("budget {c} must be at least the page size {b}")));
                }
                if c % b != 0 {
                    return Err(ConfigError::new("budget", "budget must be a multiple of page size"));
                }
                if self.policies.contains(&PolicyKind::StreamingLlm) && self.sink_count >= c {
                    return Err(ConfigError::new("sink-count", format!("must be smaller than the budget {c}")));
                }
            }
        }
        Ok(())
    }

    /// One spec per (page size, budget, policy), policies varying fastest.
    pub fn specs(&self) -> Vec<RunSpec> {
        let timing = self.timings.then_some(Timing { reps: self.reps, warmup: 1 });
        let mut out = Vec::new();
        for &b in &self.page_sizes {
            for &c in &self.budgets {
                for &kind in &self.policies {
                    out.push(RunSpec {
                        policy: PolicyConfig::new(kind, c, b).with_sink_count(self.sink_count),
                        trace: self.trace,
                        pool_pages: self.pool_pages,
                        timing,
                    });
                }
            }
        }
        out
    }

    /// Config-file text that reproduces this run.
    pub fn to_config_text(&self) -> String {
        let t = &self.trace;
        let mut lines = vec![
            format!("policy = {}", join(&self.policies)),
            format!("budget = {}", join(&self.budgets)),
            format!("page-size = {}", join(&self.page_sizes)),
            format!("sink-count = {}", self.sink_count),
            format!("prefill = {}", t.prefill_len),
            format!("decode = {}", t.decode_len),
            format!("batch = {}", t.batch),
            format!("layers = {}", t.layers),
            format!("heads = {}", t.heads),
            format!("head-dim = {}", t.head_dim),
            format!("d-model = {}", t.d_model),
            format!("mode = {}", t.mode),
            format!("seed = {}", t.seed),
            format!("reps = {}", self.reps),
            format!("timings = {}", self.timings),
        ];
        if let Some(p) = self.pool_pages {
            lines.push(format!("pool-pages = {p}"));
        }
        if let Some(p) = &self.out_csv {
            lines.push(format!("out-csv = {}", p.display()));
        }
        if let Some(p) = &self.out_jsonl {
            lines.push(format!("out-jsonl = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(text: &str) -> Vec<(String, String)> {
        parse_entries(text).unwrap()
    }

    #[test]
    fn defaults_are_desk_scale() {
        let cfg = RunConfig::from_entries(&[]).unwrap();
        assert_eq!(cfg.trace, TraceConfig::default());
        assert_eq!(cfg.specs().len(), 1);
    }

    #[test]
    fn budget_must_divide_by_page_size() {
        let err = RunConfig::from_entries(&entries("budget = 1000\npage-size = 16")).unwrap_err();
        assert_eq!(err.field, "budget");
        assert_eq!(err.message, "budget must be a multiple of page size");
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert_eq!(parse_entries("colour = red").unwrap_err().field, "colour");
        assert_eq!(parse_entries("budget 32").unwrap_err().field, "line 1");
        assert_eq!(RunConfig::from_entries(&entries("policy = h2o")).unwrap_err().field, "policy");
        assert_eq!(RunConfig::from_entries(&entries("heads = 0")).unwrap_err().field, "heads");
    }

    #[test]
    fn later_entries_override_earlier() {
        let cfg = RunConfig::from_entries(&entries("seed = 1\n# comment\nseed = 9 # trailing")).unwrap();
        assert_eq!(cfg.trace.seed, 9);
    }

    #[test]
    fn sweep_lists_expand() {
        let text = "policy = paged-eviction, streaming-llm, inv-key-l2, key-diff, full\nbudget = 256,512,1024";
        let cfg = RunConfig::from_entries(&entries(text)).unwrap();
        let specs = cfg.specs();
        assert_eq!(specs.len(), 15);
        assert_eq!(specs[0].policy.kind, PolicyKind::PagedEviction);
        assert_eq!(specs[5].policy.budget, 512);
    }

    #[test]
    fn large_scale_then_overrides() {
        let cfg = RunConfig::from_entries(&entries("decode = 100\nlarge-scale = true")).unwrap();
        assert_eq!((cfg.trace.prefill_len, cfg.trace.decode_len, cfg.trace.batch), (1024, 100, 64));
    }

    #[test]
    fn config_text_round_trips() {
        let text = "policy = key-diff,full\nbudget = 32,64\npage-size = 8\nmode = closed-loop\npool-pages = 40\nout-csv = a.csv\ntimings = true";
        let cfg = RunConfig::from_entries(&entries(text)).unwrap();
        let again = RunConfig::from_entries(&entries(&cfg.to_config_text())).unwrap();
        assert_eq!(cfg, again);
    }
}
