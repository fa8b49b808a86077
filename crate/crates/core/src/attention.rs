//! Reference multi-head scaled dot-product attention over a paged cache.
//!
//! Tokens are visited in logical order and holes are skipped. Each head keeps
//! a single accumulator and sums in that fixed order, so results depend only
//! on which tokens are retained, never on where their pages sit in the pool.

use thiserror::Error;

use crate::store::{BlockTable, KvVector};

/// Denominator floor for [`output_deviation`].
pub const DEVIATION_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttentionError {
    #[error("attention over an empty cache")]
    EmptyCache,
    #[error("expected vectors of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        Self { heads, head_dim }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Per-head softmax weights over `tokens`, in iteration order.
pub fn attention_weights<'a>(
    query: &[f64],
    tokens: impl Iterator<Item = &'a KvVector> + Clone,
    layout: HeadLayout,
) -> Result<Vec<Vec<f64>>, AttentionError> {
    check_query(query, layout)?;
    let scale = 1.0 / (layout.head_dim as f64).sqrt();
    let mut out = Vec::with_capacity(layout.heads);
    for h in 0..layout.heads {
        let span = h * layout.head_dim..(h + 1) * layout.head_dim;
        let q = &query[span.clone()];
        let logits: Vec<f64> = tokens
            .clone()
            .map(|kv| {
                let k = &kv.key()[span.clone()];
                q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
            })
            .collect();
        if logits.is_empty() {
            return Err(AttentionError::EmptyCache);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        out.push(exp.into_iter().map(|e| e / total).collect());
    }
    Ok(out)
}

fn check_query(query: &[f64], layout: HeadLayout) -> Result<(), AttentionError> {
    if query.len() != layout.width() {
        return Err(AttentionError::LengthMismatch { expected: layout.width(), got: query.len() });
    }
    Ok(())
}

/// Attention of `query` over an arbitrary token sequence; heads concatenated.
pub fn attend_tokens<'a>(
    query: &[f64],
    tokens: impl Iterator<Item = &'a KvVector> + Clone,
    layout: HeadLayout,
) -> Result<Vec<f64>, AttentionError> {
    let weights = attention_weights(query, tokens.clone(), layout)?;
    let mut out = vec![0.0; layout.width()];
    for (kv, t) in tokens.zip(0..) {
        if kv.width() != layout.width() {
            return Err(AttentionError::LengthMismatch { expected: layout.width(), got: kv.width() });
        }
        for (h, head_weights) in weights.iter().enumerate() {
            let w = head_weights[t];
            let span = h * layout.head_dim..(h + 1) * layout.head_dim;
            for (o, v) in out[span.clone()].iter_mut().zip(&kv.value()[span]) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Attention of `query` over the retained tokens of `table`.
pub fn attend(query: &[f64], table: &BlockTable, layout: HeadLayout) -> Result<Vec<f64>, AttentionError> {
    attend_tokens(query, table.tokens(), layout)
}

/// `‖a − b‖₂ / max(‖b‖₂, ε)`.
pub fn output_deviation(a: &[f64], b: &[f64]) -> Result<f64, AttentionError> {
    if a.len() != b.len() {
        return Err(AttentionError::LengthMismatch { expected: b.len(), got: a.len() });
    }
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base = crate::store::l2_norm(b).max(DEVIATION_EPSILON);
    Ok(diff / base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::PagePool;

    fn layout() -> HeadLayout {
        HeadLayout::new(2, 2)
    }

    #[test]
    fn single_token_returns_its_value() {
        let pool = PagePool::new(1);
        let mut t = BlockTable::new(pool, 4).unwrap();
        t.append_token(KvVector::new(0, vec![0.3, -2.0, 5.0, 1.0], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let out = attend(&[1.0, 1.0, -1.0, 0.5], &t, layout()).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let pool = PagePool::new(1);
        let mut t = BlockTable::new(pool, 4).unwrap();
        let key = vec![0.5, 0.5, -1.0, 2.0];
        t.append_token(KvVector::new(0, key.clone(), vec![1.0, 0.0, 2.0, 4.0]).unwrap()).unwrap();
        t.append_token(KvVector::new(1, key, vec![3.0, 2.0, 0.0, 0.0]).unwrap()).unwrap();
        let out = attend(&[0.1, 0.9, 0.4, 0.2], &t, layout()).unwrap();
        for (o, e) in out.iter().zip([2.0, 1.0, 1.0, 2.0]) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cache_and_bad_query_are_errors() {
        let t = BlockTable::new(PagePool::new(1), 4).unwrap();
        assert_eq!(attend(&[0.0; 4], &t, layout()), Err(AttentionError::EmptyCache));
        assert!(matches!(attend(&[0.0; 3], &t, layout()), Err(AttentionError::LengthMismatch { .. })));
    }

    #[test]
    fn holes_are_skipped() {
        let pool = PagePool::new(2);
        let mut t = BlockTable::new(pool, 4).unwrap();
        let mut kept = Vec::new();
        for p in 0..6 {
            let kv = KvVector::new(p, vec![p as f64 * 0.1, 1.0, -0.2, 0.3], vec![p as f64, 1.0, 0.0, -1.0]).unwrap();
            if p != 2 {
                kept.push(kv.clone());
            }
            t.append_token(kv).unwrap();
        }
        t.evict_slot(2).unwrap();
        let q = [0.4, -0.3, 0.8, 0.1];
        assert_eq!(attend(&q, &t, layout()).unwrap(), attend_tokens(&q, kept.iter(), layout()).unwrap());
    }

    #[test]
    fn deviation_cases() {
        let b = [1.0, -2.0, 2.0];
        assert_eq!(output_deviation(&b, &b).unwrap(), 0.0);
        let a: Vec<f64> = b.iter().map(|x| 2.0 * x).collect();
        assert_eq!(output_deviation(&a, &b).unwrap(), 1.0);
        assert!(output_deviation(&[1.0], &b).is_err());
    }
}
