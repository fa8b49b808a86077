//! Eviction policies.
//!
//! Every policy implements [`EvictionPolicy`], which has two hooks:
//!
//! * `prefill_compress` trims the prompt's KV vectors down to the cache budget
//!   before they are laid out into pages.
//! * `decode_step` appends one freshly generated token and evicts whatever the
//!   policy decides.
//!
//! | policy | prefill | decode |
//! |---|---|---|
//! | [`PagedEviction`] | drop lowest `‖V‖/‖K‖` tokens | drop the lowest-scoring page each time the newest page fills over budget |
//! | [`StreamingLlm`] | keep sinks + most recent window | drop the oldest non-sink token each step |
//! | [`InvKeyL2`] | drop largest-key-norm tokens | drop the largest-key-norm token each step |
//! | [`KeyDiff`] | drop keys most similar to the mean key | same, one per step |
//! | [`FullCache`] | keep everything | keep everything |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::{self, page_score, token_score, PageScore, ScoreError, TokenScore, KEY_NORM_EPSILON};
use crate::store::{BlockTable, KvVector, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("invalid budget: {0}")]
    BudgetInvalid(String),
    #[error("prefill needs at least one token")]
    EmptyPrefill,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    PagedEviction,
    StreamingLlm,
    InvKeyL2,
    KeyDiff,
    #[serde(rename = "full")]
    FullCache,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::PagedEviction,
        PolicyKind::StreamingLlm,
        PolicyKind::InvKeyL2,
        PolicyKind::KeyDiff,
        PolicyKind::FullCache,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::PagedEviction => "paged-eviction",
            PolicyKind::StreamingLlm => "streaming-llm",
            PolicyKind::InvKeyL2 => "inv-key-l2",
            PolicyKind::KeyDiff => "key-diff",
            PolicyKind::FullCache => "full",
        }
    }

    /// Policies that only ever remove whole pages, or drain one page at a time.
    pub fn is_structured(self) -> bool {
        matches!(self, PolicyKind::PagedEviction | PolicyKind::StreamingLlm)
    }

    /// Policies that evict one token on every decode step once over budget.
    pub fn evicts_per_step(self) -> bool {
        matches!(self, PolicyKind::StreamingLlm | PolicyKind::InvKeyL2 | PolicyKind::KeyDiff)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected one of paged-eviction, streaming-llm, inv-key-l2, key-diff, full)"))
    }
}

pub const DEFAULT_SINK_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Cache budget C in tokens, per sequence per layer.
    pub budget: usize,
    /// Page size B in tokens.
    pub page_size: usize,
    /// Attention sinks kept by StreamingLLM.
    pub sink_count: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, budget: usize, page_size: usize) -> Self {
        Self { kind, budget, page_size, sink_count: DEFAULT_SINK_COUNT }
    }

    pub fn with_sink_count(mut self, sink_count: usize) -> Self {
        self.sink_count = sink_count;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.page_size == 0 {
            return Err(PolicyError::BudgetInvalid("page size must be positive".into()));
        }
        if self.budget < self.page_size {
            return Err(PolicyError::BudgetInvalid("budget must be at least the page size".into()));
        }
        if !self.budget.is_multiple_of(self.page_size) {
            return Err(PolicyError::BudgetInvalid("budget must be a multiple of page size".into()));
        }
        if self.kind == PolicyKind::StreamingLlm && self.sink_count >= self.budget {
            return Err(PolicyError::BudgetInvalid("sink count must be smaller than the budget".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn EvictionPolicy>, PolicyError> {
        self.validate()?;
        Ok(match self.kind {
            PolicyKind::PagedEviction => Box::new(PagedEviction::new(*self)),
            PolicyKind::StreamingLlm => Box::new(StreamingLlm { config: *self }),
            PolicyKind::InvKeyL2 => Box::new(InvKeyL2 { config: *self }),
            PolicyKind::KeyDiff => Box::new(KeyDiff { config: *self }),
            PolicyKind::FullCache => Box::new(FullCache { config: *self }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionKind {
    None,
    Tokens { positions: Vec<usize> },
    Page { logical_index: usize, positions: Vec<usize> },
}

impl DecisionKind {
    /// Number of tokens this decision removed.
    pub fn removed(&self) -> usize {
        match self {
            DecisionKind::None => 0,
            DecisionKind::Tokens { positions } | DecisionKind::Page { positions, .. } => positions.len(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, DecisionKind::None)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDecision {
    pub kind: DecisionKind,
    /// Decode step that produced the decision; `None` for prefill.
    pub trigger_step: Option<usize>,
}

impl EvictionDecision {
    fn none(trigger_step: Option<usize>) -> Self {
        Self { kind: DecisionKind::None, trigger_step }
    }
}

pub trait EvictionPolicy: Send + Sync + fmt::Debug {
    fn config(&self) -> &PolicyConfig;

    fn kind(&self) -> PolicyKind {
        self.config().kind
    }

    /// Trims prompt KV vectors to the budget. Survivors keep their positions
    /// and relative order.
    fn prefill_compress(&self, tokens: Vec<KvVector>) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError>;

    /// Appends `new_kv` to `table` and applies one decode-step eviction.
    fn decode_step(
        &self,
        table: &mut BlockTable,
        new_kv: KvVector,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError>;
}

/// Keeps tokens whose positions are not in `evict` (sorted ascending).
fn drop_positions(tokens: Vec<KvVector>, evict: &[usize]) -> Vec<KvVector> {
    tokens.into_iter().filter(|kv| evict.binary_search(&kv.position()).is_err()).collect()
}

fn score_prefill(
    tokens: Vec<KvVector>,
    budget: usize,
    score: impl Fn(&KvVector) -> TokenScore,
) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::EmptyPrefill);
    }
    if tokens.len() <= budget {
        return Ok((tokens, EvictionDecision::none(None)));
    }
    let scores: Vec<TokenScore> = tokens.iter().map(score).collect();
    let evict = importance::rank_tokens(&scores, tokens.len() - budget)?;
    let kept = drop_positions(tokens, &evict);
    Ok((kept, EvictionDecision { kind: DecisionKind::Tokens { positions: evict }, trigger_step: None }))
}

/// Block-wise eviction driven by the `‖V‖/‖K‖` importance ratio.
#[derive(Debug, Clone)]
pub struct PagedEviction {
    config: PolicyConfig,
    budget_guard: bool,
}

impl PagedEviction {
    pub fn new(config: PolicyConfig) -> Self {
        Self { config, budget_guard: true }
    }

    /// Variant that fires on every filled page regardless of budget.
    ///
    /// Exists so the verifier can prove its cadence check catches the fault.
    #[doc(hidden)]
    pub fn without_budget_guard(config: PolicyConfig) -> Self {
        Self { config, budget_guard: false }
    }

    pub fn page_scores(table: &BlockTable) -> Result<Vec<PageScore>, PolicyError> {
        table
            .pages()
            .iter()
            .enumerate()
            .map(|(i, page)| page_score(page, i).map_err(PolicyError::from))
            .collect()
    }
}

impl EvictionPolicy for PagedEviction {
    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn prefill_compress(&self, tokens: Vec<KvVector>) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError> {
        score_prefill(tokens, self.config.budget, token_score)
    }

    fn decode_step(
        &self,
        table: &mut BlockTable,
        new_kv: KvVector,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError> {
        table.append_token(new_kv)?;
        let over_budget = table.retained_len() > self.config.budget;
        if !table.newest_page_full() || (self.budget_guard && !over_budget) {
            return Ok(EvictionDecision::none(Some(step)));
        }
        // All pages are eligible, including the one that just filled.
        let scores = Self::page_scores(table)?;
        let victim = importance::rank_pages(&scores)?;
        let freed = table.free_page(victim)?;
        Ok(EvictionDecision {
            kind: DecisionKind::Page { logical_index: victim, positions: freed.positions },
            trigger_step: Some(step),
        })
    }
}

/// Attention sinks plus a sliding window of recent tokens.
#[derive(Debug, Clone)]
pub struct StreamingLlm {
    config: PolicyConfig,
}

impl EvictionPolicy for StreamingLlm {
    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn prefill_compress(&self, tokens: Vec<KvVector>) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptyPrefill);
        }
        let budget = self.config.budget;
        if tokens.len() <= budget {
            return Ok((tokens, EvictionDecision::none(None)));
        }
        let sinks = self.config.sink_count;
        let window_start = tokens.len() - (budget - sinks);
        let evicted: Vec<usize> = tokens[sinks..window_start].iter().map(KvVector::position).collect();
        let kept = tokens
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i < sinks || *i >= window_start)
            .map(|(_, kv)| kv)
            .collect();
        Ok((kept, EvictionDecision { kind: DecisionKind::Tokens { positions: evicted }, trigger_step: None }))
    }

    fn decode_step(
        &self,
        table: &mut BlockTable,
        new_kv: KvVector,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError> {
        table.append_token(new_kv)?;
        if table.retained_len() <= self.config.budget {
            return Ok(EvictionDecision::none(Some(step)));
        }
        let victim = table
            .tokens()
            .nth(self.config.sink_count)
            .map(KvVector::position)
            .expect("over budget implies more tokens than sinks");
        table.evict_slot(victim)?;
        Ok(EvictionDecision { kind: DecisionKind::Tokens { positions: vec![victim] }, trigger_step: Some(step) })
    }
}

/// Evicts tokens with the largest key norms.
#[derive(Debug, Clone)]
pub struct InvKeyL2 {
    config: PolicyConfig,
}

fn inverse_key_norm(kv: &KvVector) -> TokenScore {
    TokenScore { position: kv.position(), score: 1.0 / kv.key_norm().max(KEY_NORM_EPSILON) }
}

/// Evicts one scored token, never the one appended this step.
fn evict_lowest_but_newest(
    table: &mut BlockTable,
    budget: usize,
    step: usize,
    score: impl Fn(&KvVector) -> TokenScore,
) -> Result<EvictionDecision, PolicyError> {
    if table.retained_len() <= budget {
        return Ok(EvictionDecision::none(Some(step)));
    }
    let n = table.retained_len();
    let scores: Vec<TokenScore> = table.tokens().take(n - 1).map(score).collect();
    let victim = importance::lowest_token(&scores).ok_or(ScoreError::KTooLarge { k: 1, available: 0 })?;
    table.evict_slot(victim)?;
    Ok(EvictionDecision { kind: DecisionKind::Tokens { positions: vec![victim] }, trigger_step: Some(step) })
}

impl EvictionPolicy for InvKeyL2 {
    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn prefill_compress(&self, tokens: Vec<KvVector>) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError> {
        score_prefill(tokens, self.config.budget, inverse_key_norm)
    }

    fn decode_step(
        &self,
        table: &mut BlockTable,
        new_kv: KvVector,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError> {
        table.append_token(new_kv)?;
        evict_lowest_but_newest(table, self.config.budget, step, inverse_key_norm)
    }
}

/// Evicts tokens whose keys are most redundant, measured as cosine
/// similarity to the mean retained key.
#[derive(Debug, Clone)]
pub struct KeyDiff {
    config: PolicyConfig,
}

fn mean_key<'a>(tokens: impl Iterator<Item = &'a KvVector>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for kv in tokens {
        if sum.is_empty() {
            sum = vec![0.0; kv.width()];
        }
        for (s, k) in sum.iter_mut().zip(kv.key()) {
            *s += k;
        }
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n.max(1) as f64);
    sum
}

/// `1 − cos(key, anchor)`, in `[0, 2]`. Lowest means most redundant.
fn key_distance(kv: &KvVector, anchor: &[f64], anchor_norm: f64) -> TokenScore {
    let dot: f64 = kv.key().iter().zip(anchor).map(|(a, b)| a * b).sum();
    let cos = dot / (kv.key_norm() * anchor_norm).max(KEY_NORM_EPSILON);
    TokenScore { position: kv.position(), score: 1.0 - cos }
}

impl EvictionPolicy for KeyDiff {
    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn prefill_compress(&self, tokens: Vec<KvVector>) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError> {
        let anchor = mean_key(tokens.iter());
        let anchor_norm = crate::store::l2_norm(&anchor);
        score_prefill(tokens, self.config.budget, |kv| key_distance(kv, &anchor, anchor_norm))
    }

    fn decode_step(
        &self,
        table: &mut BlockTable,
        new_kv: KvVector,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError> {
        table.append_token(new_kv)?;
        let anchor = mean_key(table.tokens());
        let anchor_norm = crate::store::l2_norm(&anchor);
        evict_lowest_but_newest(table, self.config.budget, step, |kv| key_distance(kv, &anchor, anchor_norm))
    }
}

/// No eviction at all.
#[derive(Debug, Clone)]
pub struct FullCache {
    config: PolicyConfig,
}

impl EvictionPolicy for FullCache {
    fn config(&self) -> &PolicyConfig {
        &self.config
    }

    fn prefill_compress(&self, tokens: Vec<KvVector>) -> Result<(Vec<KvVector>, EvictionDecision), PolicyError> {
        if tokens.is_empty() {
            return Err(PolicyError::EmptyPrefill);
        }
        Ok((tokens, EvictionDecision::none(None)))
    }

    fn decode_step(
        &self,
        table: &mut BlockTable,
        new_kv: KvVector,
        step: usize,
    ) -> Result<EvictionDecision, PolicyError> {
        table.append_token(new_kv)?;
        Ok(EvictionDecision::none(Some(step)))
    }
}

/// A policy bound to the block table it manages.
#[derive(Debug)]
pub struct PolicyCache {
    policy: Box<dyn EvictionPolicy>,
    table: BlockTable,
}

impl PolicyCache {
    pub fn new(policy: Box<dyn EvictionPolicy>, table: BlockTable) -> Self {
        Self { policy, table }
    }

    pub fn policy(&self) -> &dyn EvictionPolicy {
        self.policy.as_ref()
    }

    pub fn table(&self) -> &BlockTable {
        &self.table
    }

    /// Compresses the prompt and lays the survivors out into pages.
    pub fn prefill(&mut self, tokens: Vec<KvVector>) -> Result<EvictionDecision, PolicyError> {
        let (kept, decision) = self.policy.prefill_compress(tokens)?;
        for kv in kept {
            self.table.append_token(kv)?;
        }
        Ok(decision)
    }

    pub fn decode(&mut self, kv: KvVector, step: usize) -> Result<EvictionDecision, PolicyError> {
        self.policy.decode_step(&mut self.table, kv, step)
    }

    pub fn retained_positions(&self) -> Vec<usize> {
        self.table.retained_positions()
    }
}
