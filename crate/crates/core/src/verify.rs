//! Self-check suite behind `paged-evict verify`.
//!
//! Each check pits the library against a brute-force oracle written here
//! (dense attention over contiguous arrays, full sorts, raw norm
//! recomputation) or against a countable property of the policies. Checks
//! are deterministic for a given seed; a different seed changes the data but
//! must not change any verdict.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attend, HeadLayout};
use crate::importance::{page_score, rank_pages, rank_tokens, token_score, PageScore, TokenScore};
use crate::metrics::{emit_csv, emit_jsonl};
use crate::policy::{DecisionKind, EvictionPolicy, PagedEviction, PolicyCache, PolicyConfig, PolicyKind};
use crate::sim::{run_matrix, GeneratorMode, RunSpec, SequenceRun, LayerPools, ToyModelWeights, TraceConfig};
use crate::store::{BlockTable, KvVector, PagePool};

/// Deliberate defects the verifier must detect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// PagedEviction fires on every filled page, even under budget.
    SkipBudgetGuard,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skip-budget-guard" => Ok(Fault::SkipBudgetGuard),
            _ => Err(format!("unknown fault `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Gaussian KV vectors at consecutive positions starting from `start`.
pub fn random_kvs(rng: &mut ChaCha8Rng, start: usize, count: usize, width: usize) -> Vec<KvVector> {
    (start..start + count)
        .map(|p| {
            let key = (0..width).map(|_| rng.sample(StandardNormal)).collect();
            let value = (0..width).map(|_| rng.sample(StandardNormal)).collect();
            KvVector::new(p, key, value).expect("equal widths")
        })
        .collect()
}

fn check(name: &'static str, failures: Vec<String>, ok_detail: String) -> CheckResult {
    match failures.first() {
        None => CheckResult { name, passed: true, detail: ok_detail },
        Some(first) => CheckResult {
            name,
            passed: false,
            detail: format!("{} violation(s); first: {first}", failures.len()),
        },
    }
}

fn raw_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

fn check_scores(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut score_failures = Vec::new();
    let mut rank_failures = Vec::new();
    for case in 0..50 {
        let n = rng.random_range(16..=128);
        let b = 16;
        let kvs = random_kvs(rng, 0, n, 64);
        let pool = PagePool::new(n.div_ceil(b));
        let mut table = BlockTable::new(pool, b).expect("positive page size");
        for kv in &kvs {
            table.append_token(kv.clone()).expect("pool sized to fit");
        }
        let ratios: Vec<f64> = kvs.iter().map(|kv| raw_norm(kv.value()) / raw_norm(kv.key())).collect();
        for (kv, want) in kvs.iter().zip(&ratios) {
            if rel_err(token_score(kv).score, *want) > 1e-6 {
                score_failures.push(format!("case {case} token {}", kv.position()));
            }
        }
        let mut page_scores = Vec::new();
        for (j, page) in table.pages().iter().enumerate() {
            let members = &ratios[j * b..(j * b + b).min(n)];
            let want = members.iter().sum::<f64>() / members.len() as f64;
            let got = page_score(page, j).expect("non-empty page");
            if rel_err(got.score, want) > 1e-6 {
                score_failures.push(format!("case {case} page {j}"));
            }
            page_scores.push(got);
        }

        let k = rng.random_range(0..=n);
        let scores: Vec<TokenScore> = kvs.iter().map(token_score).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &c| ratios[a].total_cmp(&ratios[c]).then(a.cmp(&c)));
        let mut want: Vec<usize> = order[..k].to_vec();
        want.sort_unstable();
        if rank_tokens(&scores, k).ok() != Some(want) {
            rank_failures.push(format!("case {case} rank_tokens k={k}"));
        }
        let mut best = 0;
        for (j, s) in page_scores.iter().enumerate() {
            if s.score < page_scores[best].score {
                best = j;
            }
        }
        if rank_pages(&page_scores).ok() != Some(best) {
            rank_failures.push(format!("case {case} rank_pages"));
        }
    }
    // Ties resolve toward the older entry.
    let tied: Vec<PageScore> =
        (0..4).map(|i| PageScore { logical_index: i, score: if i == 0 { 2.0 } else { 1.0 }, token_count: 1 }).collect();
    if rank_pages(&tied) != Ok(1) {
        rank_failures.push("page tie not broken toward older index".into());
    }
    vec![
        check("score oracle", score_failures, "token and page scores match raw recomputation".into()),
        check("rank oracle", rank_failures, "token and page ranking match full sort".into()),
    ]
}

/// Dense multi-head attention over contiguous K/V rows.
fn dense_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; heads * d];
    for h in 0..heads {
        let lo = h * d;
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| (0..d).map(|i| q[lo + i] * k[lo + i]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for (wi, v) in w.iter().zip(values) {
            for i in 0..d {
                out[lo + i] += wi / z * v[lo + i];
            }
        }
    }
    out
}

fn check_attention(rng: &mut ChaCha8Rng) -> CheckResult {
    let (heads, d) = (4, 8);
    let layout = HeadLayout::new(heads, d);
    let mut failures = Vec::new();
    for case in 0..30 {
        let n = rng.random_range(1..=256);
        let b = [4, 8, 16][case % 3];
        let kvs = random_kvs(rng, 0, n, heads * d);
        let pool = PagePool::new(n.div_ceil(b) + 8);
        // Scatter physical placement by parking a few pages first.
        let parked: Vec<_> = (0..rng.random_range(0..8)).map(|_| pool.allocate().unwrap()).collect();
        let mut table = BlockTable::new(pool.clone(), b).unwrap();
        for kv in &kvs {
            table.append_token(kv.clone()).unwrap();
        }
        parked.into_iter().for_each(|id| pool.release(id));
        let q: Vec<f64> = (0..heads * d).map(|_| rng.sample(StandardNormal)).collect();
        let keys: Vec<Vec<f64>> = kvs.iter().map(|kv| kv.key().to_vec()).collect();
        let values: Vec<Vec<f64>> = kvs.iter().map(|kv| kv.value().to_vec()).collect();
        let want = dense_attention(&q, &keys, &values, heads, d);
        let got = attend(&q, &table, layout).unwrap();
        let err = raw_norm(&got.iter().zip(&want).map(|(a, b)| a - b).collect::<Vec<_>>()) / raw_norm(&want);
        if err > 1e-5 {
            failures.push(format!("case {case}: relative error {err:e}"));
        }
    }
    check("dense attention equivalence", failures, "paged attend matches dense oracle within 1e-5".into())
}

struct Trace {
    policy: PolicyKind,
    budget: usize,
    page_size: usize,
    prefill: usize,
    decode: usize,
}

fn build(cfg: PolicyConfig, fault: Option<Fault>) -> Box<dyn EvictionPolicy> {
    match (cfg.kind, fault) {
        (PolicyKind::PagedEviction, Some(Fault::SkipBudgetGuard)) => Box::new(PagedEviction::without_budget_guard(cfg)),
        _ => cfg.build().expect("valid policy config"),
    }
}

/// Drives one policy over random KVs and checks budget, cadence and layout.
fn drive(rng: &mut ChaCha8Rng, t: &Trace, fault: Option<Fault>, failures: &mut Failures) {
    let cfg = PolicyConfig::new(t.policy, t.budget, t.page_size);
    let (c, b) = (t.budget, t.page_size);
    let pool = PagePool::new((t.prefill + t.decode).div_ceil(b) + 2);
    let mut cache = PolicyCache::new(build(cfg, fault), BlockTable::new(pool, b).unwrap());
    let width = 8;
    cache.prefill(random_kvs(rng, 0, t.prefill, width)).unwrap();

    let label = format!("{} C={c} B={b} prefill={} decode={}", t.policy, t.prefill, t.decode);
    let mut reached = cache.table().retained_len() >= c;
    let mut steps_over = 0;
    let mut page_events = 0;
    let mut token_events = 0;
    for (i, kv) in random_kvs(rng, t.prefill, t.decode, width).into_iter().enumerate() {
        let step = i + 1;
        if reached {
            steps_over += 1;
        }
        let decision = cache.decode(kv, step).unwrap();
        let len = cache.table().retained_len();
        match &decision.kind {
            DecisionKind::Page { .. } => page_events += 1,
            DecisionKind::Tokens { .. } => token_events += 1,
            DecisionKind::None => {}
        }
        match t.policy {
            PolicyKind::PagedEviction => {
                if reached && !(len > c - b && len <= c + b) {
                    failures.budget.push(format!("{label}: step {step} retained {len}"));
                }
                if matches!(decision.kind, DecisionKind::Page { .. }) && len != c {
                    failures.budget.push(format!("{label}: step {step} retained {len} after page eviction"));
                }
                let pages = cache.table().pages();
                if pages.iter().take(pages.len().saturating_sub(1)).any(|p| !p.is_full()) {
                    failures.alignment.push(format!("{label}: step {step} partial non-newest page"));
                }
            }
            PolicyKind::FullCache => {}
            _ => {
                if len > c {
                    failures.budget.push(format!("{label}: step {step} retained {len} at rest"));
                }
            }
        }
        reached |= len >= c;
    }

    match t.policy {
        PolicyKind::PagedEviction => {
            let want = steps_over / b;
            if page_events != want {
                failures.cadence.push(format!("{label}: {page_events} page evictions, expected {want}"));
            }
        }
        PolicyKind::FullCache => {}
        _ => {
            if token_events != steps_over {
                failures.cadence.push(format!("{label}: {token_events} token evictions, expected {steps_over}"));
            }
        }
    }
}

#[derive(Default)]
struct Failures {
    budget: Vec<String>,
    cadence: Vec<String>,
    alignment: Vec<String>,
}

fn check_policies(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Vec<CheckResult> {
    let mut failures = Failures::default();
    let mut cases = 0;
    for _ in 0..40 {
        let b = [8, 16, 32][rng.random_range(0..3)];
        let budget = b * rng.random_range(2..=16);
        let prefill = rng.random_range(16..=256);
        let decode = rng.random_range(64..=512);
        for policy in [PolicyKind::PagedEviction, PolicyKind::StreamingLlm, PolicyKind::InvKeyL2, PolicyKind::KeyDiff] {
            drive(rng, &Trace { policy, budget, page_size: b, prefill, decode }, fault, &mut failures);
            cases += 1;
        }
    }
    vec![
        check("budget bound", failures.budget, format!("{cases} traces stay within budget")),
        check("trigger cadence", failures.cadence, "page evictions every B steps, token evictions every step".into()),
        check("structured alignment", failures.alignment, "PagedEviction keeps every non-newest page full".into()),
    ]
}

fn check_streaming(rng: &mut ChaCha8Rng) -> CheckResult {
    let (c, b, prefill, decode) = (256, 16, 500, 1500);
    let cfg = PolicyConfig::new(PolicyKind::StreamingLlm, c, b);
    let mut cache = PolicyCache::new(cfg.build().unwrap(), BlockTable::new(PagePool::new(c / b + 3), b).unwrap());
    cache.prefill(random_kvs(rng, 0, prefill, 4)).unwrap();
    let mut failures = Vec::new();
    let window = |last: usize| -> Vec<usize> { (0..4).chain(last + 1 - (c - 4)..=last).collect() };
    if cache.retained_positions() != window(prefill - 1) {
        failures.push("after prefill".to_string());
    }
    for (i, kv) in random_kvs(rng, prefill, decode, 4).into_iter().enumerate() {
        let pos = kv.position();
        cache.decode(kv, i + 1).unwrap();
        if cache.retained_positions() != window(pos) {
            failures.push(format!("step {}", i + 1));
        }
    }
    check("streaming window", failures, "sinks plus most recent window at every step of a 2000-token trace".into())
}

fn check_fragmentation(rng: &mut ChaCha8Rng) -> CheckResult {
    let (c, b, prefill, decode) = (64, 16, 128, 512);
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for policy in [PolicyKind::PagedEviction, PolicyKind::InvKeyL2, PolicyKind::KeyDiff] {
        let cfg = PolicyConfig::new(policy, c, b);
        let pool = PagePool::new((c + decode).div_ceil(b) + 1);
        let mut cache = PolicyCache::new(cfg.build().unwrap(), BlockTable::new(pool, b).unwrap());
        cache.prefill(random_kvs(rng, 0, prefill, 8)).unwrap();
        let mut worst: f64 = 0.0;
        for (i, kv) in random_kvs(rng, prefill, decode, 8).into_iter().enumerate() {
            cache.decode(kv, i + 1).unwrap();
            worst = worst.max(cache.table().fragmentation_outside_newest());
        }
        summary.push(format!("{policy}={worst:.3}"));
        let ok = if policy == PolicyKind::PagedEviction { worst == 0.0 } else { worst > 0.0 };
        if !ok {
            failures.push(format!("{policy} max fragmentation {worst}"));
        }
    }
    check("fragmentation separation", failures, summary.join(" "))
}

fn check_degenerate(seed: u64) -> CheckResult {
    let trace = TraceConfig {
        prefill_len: 24,
        decode_len: 40,
        batch: 1,
        d_model: 16,
        heads: 2,
        head_dim: 4,
        layers: 2,
        seed,
        mode: GeneratorMode::OpenLoop,
    };
    let weights = ToyModelWeights::generate(&trace);
    let mut failures = Vec::new();
    for kind in PolicyKind::ALL {
        let cfg = PolicyConfig::new(kind, 64, 8);
        let pools = LayerPools::new(&cfg, &trace, None);
        let (mut run, _) = SequenceRun::prefill(&weights, &cfg, &trace, 0, &pools).unwrap();
        for _ in 0..trace.decode_len {
            let out = run.step().unwrap();
            if out.deviation > 1e-6 {
                failures.push(format!("{kind} deviation {:e} at step {}", out.deviation, run.steps_done()));
            }
            let same = run
                .main_caches()
                .iter()
                .zip(run.shadow_caches())
                .all(|(m, s)| m.retained_positions() == s.retained_positions());
            if !same {
                failures.push(format!("{kind} retained set differs at step {}", run.steps_done()));
            }
        }
    }
    check("degenerate exactness", failures, "every policy equals the full cache when the budget covers the trace".into())
}

fn check_determinism(seed: u64) -> CheckResult {
    let trace = TraceConfig { prefill_len: 32, decode_len: 48, batch: 2, d_model: 16, heads: 2, head_dim: 4, seed, ..TraceConfig::default() };
    let specs: Vec<RunSpec> =
        PolicyKind::ALL.iter().map(|&k| RunSpec::new(PolicyConfig::new(k, 32, 8), trace)).collect();
    let render = || {
        let out = run_matrix(&specs).unwrap();
        let records: Vec<_> = out.iter().map(|o| o.record.clone()).collect();
        let mut csv = Vec::new();
        emit_csv(&records, &mut csv).unwrap();
        let mut jsonl = Vec::new();
        emit_jsonl(out.iter().flat_map(|o| o.steps.iter()), &mut jsonl).unwrap();
        (csv, jsonl)
    };
    let failures = if render() == render() { vec![] } else { vec!["outputs differ between runs".to_string()] };
    check("determinism", failures, "identical CSV and JSONL bytes across runs".into())
}

/// Runs every check with data drawn from `seed`.
pub fn run(seed: u64, fault: Option<Fault>) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = check_scores(&mut rng);
    checks.push(check_attention(&mut rng));
    checks.extend(check_policies(&mut rng, fault));
    checks.push(check_streaming(&mut rng));
    checks.push(check_fragmentation(&mut rng));
    checks.push(check_degenerate(seed));
    checks.push(check_determinism(seed));
    VerifyReport { seed, checks }
}
