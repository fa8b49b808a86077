//! Paged KV cache with pluggable eviction policies.
//!
//! The crate stores per-layer key/value vectors in fixed-size pages
//! ([`store`]), scores tokens and pages by the ratio of value norm to key norm
//! ([`importance`]), and evicts through one of five policies ([`policy`]):
//! block-wise PagedEviction, StreamingLLM, inverse key L2-norm, KeyDiff and a
//! full cache. A reference attention ([`attention`]) and a seeded toy decoder
//! ([`sim`]) measure what eviction does to outputs, and [`metrics`] turns runs
//! into CSV and JSONL.
//!
//! ```
//! use paged_evict::policy::{PolicyConfig, PolicyKind};
//! use paged_evict::sim::{run_trace, ToyModelWeights, TraceConfig};
//!
//! let trace = TraceConfig { prefill_len: 32, decode_len: 64, batch: 1, ..TraceConfig::default() };
//! let weights = ToyModelWeights::generate(&trace);
//! let policy = PolicyConfig::new(PolicyKind::PagedEviction, 32, 16);
//! let outcome = run_trace(&weights, &policy, &trace, None).unwrap();
//! let pages_evicted = outcome
//!     .step_records()
//!     .filter(|r| r.layer == 0 && !r.decision.is_none())
//!     .count();
//! assert_eq!(pages_evicted, 64 / 16);
//! ```

pub mod attention;
pub mod config;
pub mod importance;
pub mod metrics;
pub mod policy;
pub mod sim;
pub mod store;
pub mod verify;

pub use attention::{attend, output_deviation, HeadLayout};
pub use importance::{page_score, rank_pages, rank_tokens, token_score, PageScore, TokenScore};
pub use metrics::{emit_csv, emit_jsonl, summarize, MetricsRecord};
pub use policy::{EvictionDecision, EvictionPolicy, PolicyCache, PolicyConfig, PolicyKind};
pub use sim::{run_matrix, run_trace, GeneratorMode, RunSpec, ToyModelWeights, TraceConfig};
pub use store::{memory_bytes, BlockTable, KvVector, PagePool};

// The guide's code listings compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/paged-store.md")]
    mod paged_store {}
    #[doc = include_str!("../../../book/src/importance.md")]
    mod importance {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
