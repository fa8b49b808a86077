//! Attention-free token and page importance.
//!
//! A token's importance is the ratio of its value norm to its key norm. Both
//! norms are cached on [`KvVector`], so scoring is O(1) per token and never
//! reads attention weights. A page's importance is the mean over its occupied
//! slots.
//!
//! Ranking helpers pick what to evict: the lowest scores go first, and ties
//! fall to the older token or page.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{KvVector, Page};

/// Floor applied to key norms before dividing.
pub const KEY_NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("cannot score an empty page")]
    EmptyPage,
    #[error("asked for {k} tokens but only {available} were scored")]
    KTooLarge { k: usize, available: usize },
    #[error("no eligible page to evict")]
    NoEligiblePage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageScore {
    pub logical_index: usize,
    pub score: f64,
    pub token_count: usize,
}

/// `‖V‖₂ / max(‖K‖₂, ε)` from the cached norms.
pub fn token_score(kv: &KvVector) -> TokenScore {
    TokenScore { position: kv.position(), score: kv.value_norm() / kv.key_norm().max(KEY_NORM_EPSILON) }
}

/// Mean token score over the occupied slots of `page`.
pub fn page_score(page: &Page, logical_index: usize) -> Result<PageScore, ScoreError> {
    if page.fill() == 0 {
        return Err(ScoreError::EmptyPage);
    }
    let sum: f64 = page.tokens().map(|kv| token_score(kv).score).sum();
    Ok(PageScore { logical_index, score: sum / page.fill() as f64, token_count: page.fill() })
}

fn by_score_then_position(a: &TokenScore, b: &TokenScore) -> Ordering {
    a.score.total_cmp(&b.score).then(a.position.cmp(&b.position))
}

/// Positions of the `k` lowest-scoring tokens, returned in position order.
pub fn rank_tokens(scores: &[TokenScore], k: usize) -> Result<Vec<usize>, ScoreError> {
    if k > scores.len() {
        return Err(ScoreError::KTooLarge { k, available: scores.len() });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(by_score_then_position);
    let mut picked: Vec<usize> = sorted[..k].iter().map(|s| s.position).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Position of the single lowest-scoring token.
pub fn lowest_token(scores: &[TokenScore]) -> Option<usize> {
    scores.iter().min_by(|a, b| by_score_then_position(a, b)).map(|s| s.position)
}

/// Logical index of the lowest-scoring page; ties go to the smaller index.
pub fn rank_pages(scores: &[PageScore]) -> Result<usize, ScoreError> {
    scores
        .iter()
        .min_by(|a, b| a.score.total_cmp(&b.score).then(a.logical_index.cmp(&b.logical_index)))
        .map(|s| s.logical_index)
        .ok_or(ScoreError::NoEligiblePage)
}
