use paged_evict::importance::{rank_tokens, token_score, TokenScore};
use paged_evict::policy::DecisionKind;
use paged_evict::{BlockTable, KvVector, PagePool, PolicyCache, PolicyConfig, PolicyKind};
use proptest::prelude::*;

fn kv(position: usize, key: &[f64], value: &[f64]) -> KvVector {
    KvVector::new(position, key.to_vec(), value.to_vec()).unwrap()
}

fn vector(width: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, width)
}

fn tokens(max: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
    prop::collection::vec((vector(4), vector(4)), 1..max)
}

#[derive(Debug, Clone)]
enum Op {
    Append,
    EvictSlot(usize),
    FreePage(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Append),
        2 => any::<usize>().prop_map(Op::EvictSlot),
        1 => any::<usize>().prop_map(Op::FreePage),
    ]
}

proptest! {
    #[test]
    fn pages_are_conserved(page_size in 1usize..9, ops in prop::collection::vec(op(), 1..200)) {
        let pool = PagePool::new(256);
        let mut table = BlockTable::new(pool.clone(), page_size).unwrap();
        let mut next = 0;
        for op in ops {
            match op {
                Op::Append => {
                    table.append_token(kv(next, &[1.0], &[1.0])).unwrap();
                    next += 1;
                }
                Op::EvictSlot(i) => {
                    let retained = table.retained_positions();
                    if !retained.is_empty() {
                        table.evict_slot(retained[i % retained.len()]).unwrap();
                    }
                }
                Op::FreePage(i) => {
                    if table.page_count() > 0 {
                        table.free_page(i % table.page_count()).unwrap();
                    }
                }
            }
            prop_assert_eq!(pool.allocated(), table.page_count());
            prop_assert_eq!(pool.allocated() + pool.free_count(), pool.capacity());
            let fills: usize = table.pages().iter().map(|p| p.fill()).sum();
            prop_assert_eq!(fills, table.retained_len());
            prop_assert!(table.pages().iter().all(|p| p.fill() > 0));
            let positions = table.retained_positions();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            let ratio = table.fragmentation_ratio();
            prop_assert!((0.0..1.0).contains(&ratio) || table.page_count() == 0);
        }
        drop(table);
        prop_assert_eq!(pool.allocated(), 0);
    }

    #[test]
    fn scores_ignore_common_scaling(key in vector(8), value in vector(8), scale in 0.01f64..100.0) {
        prop_assume!(key.iter().any(|x| x.abs() > 1e-3));
        let a = token_score(&kv(0, &key, &value)).score;
        let scaled_key: Vec<f64> = key.iter().map(|x| x * scale).collect();
        let scaled_value: Vec<f64> = value.iter().map(|x| x * scale).collect();
        let b = token_score(&kv(0, &scaled_key, &scaled_value)).score;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn ranking_ignores_input_order(scores in prop::collection::vec(0u8..8, 1..64), k_frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let entries: Vec<TokenScore> =
            scores.iter().enumerate().map(|(position, &s)| TokenScore { position, score: s as f64 }).collect();
        let k = (k_frac * entries.len() as f64) as usize;
        let mut shuffled = entries.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 1) >> 7) as usize % (i + 1));
        }
        prop_assert_eq!(rank_tokens(&entries, k).unwrap(), rank_tokens(&shuffled, k).unwrap());
    }

    #[test]
    fn prefill_keeps_order_and_budget(
        kind in prop::sample::select(PolicyKind::ALL.to_vec()),
        prompt in tokens(200),
        pages in 2usize..8,
    ) {
        let budget = pages * 8;
        let cfg = PolicyConfig::new(kind, budget, 8);
        let input: Vec<KvVector> = prompt.iter().enumerate().map(|(p, (k, v))| kv(p, k, v)).collect();
        let (kept, decision) = cfg.build().unwrap().prefill_compress(input.clone()).unwrap();
        let want = if kind == PolicyKind::FullCache { input.len() } else { input.len().min(budget) };
        prop_assert_eq!(kept.len(), want);
        prop_assert!(kept.windows(2).all(|w| w[0].position() < w[1].position()));
        prop_assert_eq!(decision.kind.removed(), input.len() - kept.len());
    }

    #[test]
    fn paged_eviction_stays_aligned(
        prompt in tokens(120),
        stream in tokens(300),
        b in prop::sample::select(vec![4usize, 8, 16]),
        mult in 2usize..6,
    ) {
        let c = b * mult;
        let cfg = PolicyConfig::new(PolicyKind::PagedEviction, c, b);
        let pool = PagePool::new(c / b + 2);
        let mut cache = PolicyCache::new(cfg.build().unwrap(), BlockTable::new(pool, b).unwrap());
        let n = prompt.len();
        cache.prefill(prompt.iter().enumerate().map(|(p, (k, v))| kv(p, k, v)).collect()).unwrap();
        let mut reached = cache.table().retained_len() >= c;
        for (i, (k, v)) in stream.iter().enumerate() {
            let decision = cache.decode(kv(n + i, k, v), i + 1).unwrap();
            let table = cache.table();
            let len = table.retained_len();
            if reached {
                prop_assert!(len > c - b && len <= c + b);
            }
            if let DecisionKind::Page { positions, .. } = &decision.kind {
                prop_assert_eq!(positions.len(), b);
                prop_assert_eq!(len, c);
            }
            let pages = table.pages();
            prop_assert!(pages[..pages.len() - 1].iter().all(|p| p.is_full()));
            reached |= len >= c;
        }
    }

    #[test]
    fn per_step_policies_hold_budget(
        kind in prop::sample::select(vec![PolicyKind::StreamingLlm, PolicyKind::InvKeyL2, PolicyKind::KeyDiff]),
        prompt in tokens(80),
        stream in tokens(120),
    ) {
        let (c, b) = (16, 4);
        let cfg = PolicyConfig::new(kind, c, b);
        let pool = PagePool::new(64);
        let mut cache = PolicyCache::new(cfg.build().unwrap(), BlockTable::new(pool, b).unwrap());
        let n = prompt.len();
        cache.prefill(prompt.iter().enumerate().map(|(p, (k, v))| kv(p, k, v)).collect()).unwrap();
        for (i, (k, v)) in stream.iter().enumerate() {
            let before = cache.table().retained_len();
            let decision = cache.decode(kv(n + i, k, v), i + 1).unwrap();
            let len = cache.table().retained_len();
            prop_assert!(len <= c);
            prop_assert_eq!(decision.kind.removed(), before + 1 - len);
            // The token appended this step survives it.
            prop_assert_eq!(cache.retained_positions().last().copied(), Some(n + i));
        }
    }
}
