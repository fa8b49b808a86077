//! Seeded toy decoder used to drive the eviction policies.
//!
//! Every layer projects its input with `W_Q`, `W_K`, `W_V`, attends over its
//! own paged cache, projects back with `W_O` and adds the result to a residual
//! stream. Each sequence runs twice in lockstep: once under the policy being
//! measured and once with a full cache (the *shadow*). Both runs see the same
//! embedding stream, so any difference in their outputs comes from eviction.
//!
//! Randomness comes from ChaCha8 seeded with the trace seed. Weights use
//! stream 0 and sequence `s` draws its embeddings from stream `s + 1`, which
//! keeps every sequence reproducible no matter how the batch is scheduled.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError, HeadLayout};
use crate::metrics::{median_ns, MetricsRecord};
use crate::policy::{DecisionKind, PolicyCache, PolicyConfig, PolicyError, PolicyKind};
use crate::store::{BlockTable, KvVector, PagePool, StoreError};

/// Weight of the seeded noise added to closed-loop embeddings.
pub const CLOSED_LOOP_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid trace config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

impl From<StoreError> for SimError {
    fn from(e: StoreError) -> Self {
        SimError::Policy(PolicyError::Store(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorMode {
    /// Every decode embedding is a fresh Gaussian draw.
    OpenLoop,
    /// The next embedding is the normalized previous output plus noise.
    ClosedLoop,
}

impl GeneratorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorMode::OpenLoop => "open-loop",
            GeneratorMode::ClosedLoop => "closed-loop",
        }
    }
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open-loop" => Ok(GeneratorMode::OpenLoop),
            "closed-loop" => Ok(GeneratorMode::ClosedLoop),
            _ => Err(format!("unknown mode `{s}` (expected open-loop or closed-loop)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub prefill_len: usize,
    pub decode_len: usize,
    pub batch: usize,
    pub mode: GeneratorMode,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            prefill_len: 128,
            decode_len: 512,
            batch: 4,
            mode: GeneratorMode::OpenLoop,
            d_model: 64,
            heads: 4,
            head_dim: 16,
            layers: 2,
            seed: 0,
        }
    }
}

impl TraceConfig {
    /// 1024 prompt tokens, 8192 generated tokens, 64 concurrent sequences.
    pub fn large_scale() -> Self {
        Self { prefill_len: 1024, decode_len: 8192, batch: 64, ..Self::default() }
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout::new(self.heads, self.head_dim)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("prefill", self.prefill_len),
            ("decode", self.decode_len),
            ("batch", self.batch),
            ("d-model", self.d_model),
            ("heads", self.heads),
            ("head-dim", self.head_dim),
            ("layers", self.layers),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(SimError::Config(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `heads·head_dim × d_model`
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_model × heads·head_dim`
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelWeights {
    pub layers: Vec<LayerWeights>,
    pub d_model: usize,
    pub layout: HeadLayout,
    pub seed: u64,
}

impl ToyModelWeights {
    /// Draws every entry i.i.d. from `N(0, 1/d_model)`.
    pub fn generate(trace: &TraceConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(trace.seed);
        rng.set_stream(0);
        let width = trace.heads * trace.head_dim;
        let scale = 1.0 / (trace.d_model as f64).sqrt();
        let layers = (0..trace.layers)
            .map(|_| LayerWeights {
                wq: Matrix::gaussian(&mut rng, width, trace.d_model, scale),
                wk: Matrix::gaussian(&mut rng, width, trace.d_model, scale),
                wv: Matrix::gaussian(&mut rng, width, trace.d_model, scale),
                wo: Matrix::gaussian(&mut rng, trace.d_model, width, scale),
            })
            .collect();
        Self { layers, d_model: trace.d_model, layout: trace.layout(), seed: trace.seed }
    }
}

/// Per-sequence, per-layer page budget a policy can need over a whole trace.
pub fn default_pool_pages(policy: &PolicyConfig, trace: &TraceConfig) -> usize {
    let b = policy.page_size;
    let c = policy.budget;
    let retained_after_prefill = match policy.kind {
        PolicyKind::FullCache => trace.prefill_len,
        _ => trace.prefill_len.min(c),
    };
    // Every page ever opened, which bounds the live count for any policy.
    let ever_opened = (retained_after_prefill + trace.decode_len).div_ceil(b).max(1);
    let live_bound = match policy.kind {
        PolicyKind::PagedEviction => (c + b + trace.prefill_len).div_ceil(b),
        // Sink page, draining page and newest page may all be partial.
        PolicyKind::StreamingLlm => c / b + 3,
        PolicyKind::InvKeyL2 | PolicyKind::KeyDiff | PolicyKind::FullCache => ever_opened,
    };
    live_bound.min(ever_opened)
}

/// One page pool per layer, shared by every sequence of a batch.
#[derive(Debug, Clone)]
pub struct LayerPools {
    pub main: Vec<Arc<PagePool>>,
    pub shadow: Vec<Arc<PagePool>>,
}

impl LayerPools {
    pub fn new(policy: &PolicyConfig, trace: &TraceConfig, pages_per_sequence: Option<usize>) -> Self {
        let main_pages = pages_per_sequence.unwrap_or_else(|| default_pool_pages(policy, trace));
        let full = PolicyConfig { kind: PolicyKind::FullCache, ..*policy };
        let shadow_pages = default_pool_pages(&full, trace);
        Self {
            main: (0..trace.layers).map(|_| PagePool::new(main_pages * trace.batch)).collect(),
            shadow: (0..trace.layers).map(|_| PagePool::new(shadow_pages * trace.batch)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrefillStats {
    pub evicted: usize,
    pub pages_allocated: usize,
    pub retained_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillStats {
    pub prefill_len: usize,
    pub layers: Vec<LayerPrefillStats>,
}

/// One layer's view of one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub seq: usize,
    pub layer: usize,
    /// 1-based decode step.
    pub step: usize,
    pub retained_len: usize,
    pub decision: DecisionKind,
    pub removed: usize,
    pub fragmentation: f64,
    pub fragmentation_outside_newest: f64,
    /// Output deviation from the shadow run; identical across layers of a step.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub records: Vec<StepRecord>,
    pub main_output: Vec<f64>,
    pub shadow_output: Vec<f64>,
    pub deviation: f64,
}

fn normalize_to(v: &[f64], target_norm: f64) -> Vec<f64> {
    let norm = crate::store::l2_norm(v);
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / norm * target_norm).collect()
}

fn checksum(acc: u64, xs: &[f64]) -> u64 {
    xs.iter().fold(acc, |h, x| (h ^ x.to_bits()).wrapping_mul(0x0100_0000_01b3).rotate_left(7))
}

struct Projected {
    query: Vec<f64>,
    kv: KvVector,
}

fn project(layer: &LayerWeights, x: &[f64], position: usize) -> Projected {
    let query = layer.wq.matvec(x);
    let kv = KvVector::new(position, layer.wk.matvec(x), layer.wv.matvec(x)).expect("projection widths agree");
    Projected { query, kv }
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// A single sequence running under a policy alongside its full-cache shadow.
#[derive(Debug)]
pub struct SequenceRun<'w> {
    weights: &'w ToyModelWeights,
    trace: TraceConfig,
    seq: usize,
    rng: ChaCha8Rng,
    main: Vec<PolicyCache>,
    shadow: Vec<PolicyCache>,
    next_position: usize,
    step: usize,
    prev_main: Vec<f64>,
    prev_shadow: Vec<f64>,
    main_checksum: u64,
    shadow_checksum: u64,
}

impl<'w> SequenceRun<'w> {
    /// Runs the prompt through every layer, then compresses each layer's KV
    /// vectors with the policy and lays the survivors out into pages.
    pub fn prefill(
        weights: &'w ToyModelWeights,
        policy: &PolicyConfig,
        trace: &TraceConfig,
        seq: usize,
        pools: &LayerPools,
    ) -> Result<(Self, PrefillStats), SimError> {
        trace.validate()?;
        policy.validate()?;
        let layout = weights.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(trace.seed);
        rng.set_stream(seq as u64 + 1);

        let mut xs: Vec<Vec<f64>> = (0..trace.prefill_len)
            .map(|_| (0..trace.d_model).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let input_checksum = xs.iter().fold(0, |h, x| checksum(h, x));

        let shadow_config = PolicyConfig { kind: PolicyKind::FullCache, ..*policy };
        let mut main = Vec::with_capacity(trace.layers);
        let mut shadow = Vec::with_capacity(trace.layers);
        let mut stats = Vec::with_capacity(trace.layers);
        let mut last_output = vec![0.0; trace.d_model];

        for (l, layer) in weights.layers.iter().enumerate() {
            let projected: Vec<Projected> = xs.iter().enumerate().map(|(i, x)| project(layer, x, i)).collect();
            let kvs: Vec<KvVector> = projected.iter().map(|p| p.kv.clone()).collect();
            // Causal self-attention over the uncompressed prompt.
            for (i, p) in projected.iter().enumerate() {
                let attn = attention::attend_tokens(&p.query, kvs[..=i].iter(), layout)?;
                let out = layer.wo.matvec(&attn);
                add(&mut xs[i], &out);
                if i + 1 == projected.len() {
                    last_output = out;
                }
            }

            let mut cache = PolicyCache::new(policy.build()?, BlockTable::new(pools.main[l].clone(), policy.page_size)?);
            let decision = cache.prefill(kvs.clone())?;
            stats.push(LayerPrefillStats {
                evicted: decision.kind.removed(),
                pages_allocated: cache.table().page_count(),
                retained_len: cache.table().retained_len(),
            });
            main.push(cache);

            let mut full =
                PolicyCache::new(shadow_config.build()?, BlockTable::new(pools.shadow[l].clone(), policy.page_size)?);
            full.prefill(kvs)?;
            shadow.push(full);
        }

        let run = Self {
            weights,
            trace: *trace,
            seq,
            rng,
            main,
            shadow,
            next_position: trace.prefill_len,
            step: 0,
            prev_main: last_output.clone(),
            prev_shadow: last_output,
            main_checksum: input_checksum,
            shadow_checksum: input_checksum,
        };
        Ok((run, PrefillStats { prefill_len: trace.prefill_len, layers: stats }))
    }

    pub fn main_caches(&self) -> &[PolicyCache] {
        &self.main
    }

    pub fn shadow_caches(&self) -> &[PolicyCache] {
        &self.shadow
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Checksums of the embeddings fed to the main and shadow runs.
    pub fn input_checksums(&self) -> (u64, u64) {
        (self.main_checksum, self.shadow_checksum)
    }

    fn forward(
        weights: &ToyModelWeights,
        caches: &mut [PolicyCache],
        mut x: Vec<f64>,
        position: usize,
        step: usize,
    ) -> Result<(Vec<f64>, Vec<DecisionKind>), SimError> {
        let mut decisions = Vec::with_capacity(caches.len());
        let mut out = Vec::new();
        for (layer, cache) in weights.layers.iter().zip(caches.iter_mut()) {
            let p = project(layer, &x, position);
            decisions.push(cache.decode(p.kv, step)?.kind);
            let attn = attention::attend(&p.query, cache.table(), weights.layout)?;
            out = layer.wo.matvec(&attn);
            add(&mut x, &out);
        }
        Ok((out, decisions))
    }

    /// Generates one token and pushes it through both runs.
    pub fn step(&mut self) -> Result<StepOutput, SimError> {
        let noise: Vec<f64> = (0..self.trace.d_model).map(|_| self.rng.sample(StandardNormal)).collect();
        let (x_main, x_shadow) = match self.trace.mode {
            GeneratorMode::OpenLoop => (noise.clone(), noise),
            GeneratorMode::ClosedLoop => {
                let target = (self.trace.d_model as f64).sqrt();
                let mut a = normalize_to(&self.prev_main, target);
                let mut b = normalize_to(&self.prev_shadow, target);
                for ((a, b), n) in a.iter_mut().zip(b.iter_mut()).zip(&noise) {
                    *a += CLOSED_LOOP_NOISE * n;
                    *b += CLOSED_LOOP_NOISE * n;
                }
                (a, b)
            }
        };
        self.main_checksum = checksum(self.main_checksum, &x_main);
        self.shadow_checksum = checksum(self.shadow_checksum, &x_shadow);

        self.step += 1;
        let position = self.next_position;
        self.next_position += 1;

        let (main_output, decisions) = Self::forward(self.weights, &mut self.main, x_main, position, self.step)?;
        let (shadow_output, _) = Self::forward(self.weights, &mut self.shadow, x_shadow, position, self.step)?;
        let deviation = attention::output_deviation(&main_output, &shadow_output)?;

        let records = decisions
            .into_iter()
            .zip(&self.main)
            .enumerate()
            .map(|(layer, (decision, cache))| StepRecord {
                seq: self.seq,
                layer,
                step: self.step,
                retained_len: cache.table().retained_len(),
                removed: decision.removed(),
                decision,
                fragmentation: cache.table().fragmentation_ratio(),
                fragmentation_outside_newest: cache.table().fragmentation_outside_newest(),
                deviation,
            })
            .collect();

        self.prev_main.clone_from(&main_output);
        self.prev_shadow.clone_from(&shadow_output);
        Ok(StepOutput { records, main_output, shadow_output, deviation })
    }

    /// Runs the remaining decode steps and returns the step log.
    pub fn run_decode(&mut self) -> Result<Vec<StepRecord>, SimError> {
        let mut log = Vec::with_capacity((self.trace.decode_len - self.step) * self.trace.layers);
        while self.step < self.trace.decode_len {
            log.extend(self.step()?.records);
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutcome {
    pub seq: usize,
    pub prefill: PrefillStats,
    pub steps: Vec<StepRecord>,
    pub input_checksums: (u64, u64),
    /// Retained positions per layer at the end of the run.
    pub final_positions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub policy: PolicyConfig,
    pub trace: TraceConfig,
    pub sequences: Vec<SequenceOutcome>,
    pub prefill_ns: u64,
    pub decode_ns: u64,
}

impl TraceOutcome {
    /// Step records of every sequence, ordered by sequence then step.
    pub fn step_records(&self) -> impl Iterator<Item = &StepRecord> {
        self.sequences.iter().flat_map(|s| s.steps.iter())
    }
}

/// Prefills then decodes every sequence of the batch, in parallel.
pub fn run_trace(
    weights: &ToyModelWeights,
    policy: &PolicyConfig,
    trace: &TraceConfig,
    pool_pages: Option<usize>,
) -> Result<TraceOutcome, SimError> {
    trace.validate()?;
    policy.validate()?;
    let pools = LayerPools::new(policy, trace, pool_pages);

    let started = Instant::now();
    let prefilled: Vec<(SequenceRun<'_>, PrefillStats)> = (0..trace.batch)
        .into_par_iter()
        .map(|seq| SequenceRun::prefill(weights, policy, trace, seq, &pools))
        .collect::<Result<_, _>>()?;
    let prefill_ns = started.elapsed().as_nanos() as u64;

    let started = Instant::now();
    let sequences = prefilled
        .into_par_iter()
        .enumerate()
        .map(|(seq, (mut run, prefill))| {
            let steps = run.run_decode()?;
            let final_positions = run.main_caches().iter().map(PolicyCache::retained_positions).collect();
            Ok(SequenceOutcome { seq, prefill, steps, input_checksums: run.input_checksums(), final_positions })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let decode_ns = started.elapsed().as_nanos() as u64;

    Ok(TraceOutcome { policy: *policy, trace: *trace, sequences, prefill_ns, decode_ns })
}

/// Wall-clock measurement settings for [`run_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub reps: usize,
    pub warmup: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { reps: 5, warmup: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub policy: PolicyConfig,
    pub trace: TraceConfig,
    /// Pages per sequence per layer; `None` uses [`default_pool_pages`].
    pub pool_pages: Option<usize>,
    /// `None` skips timing and reports zero wall-clock.
    pub timing: Option<Timing>,
}

impl RunSpec {
    pub fn new(policy: PolicyConfig, trace: TraceConfig) -> Self {
        Self { policy, trace, pool_pages: None, timing: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub record: MetricsRecord,
    pub steps: Vec<StepRecord>,
}

/// Runs every spec in order and aggregates each into a [`MetricsRecord`].
///
/// Counters come from the first execution. With timing enabled the spec is
/// re-run `warmup + reps` times and the medians of the timed reps are kept.
pub fn run_matrix(specs: &[RunSpec]) -> Result<Vec<RunOutcome>, SimError> {
    let mut cached: Option<(TraceConfig, ToyModelWeights)> = None;
    let mut outcomes = Vec::with_capacity(specs.len());
    for spec in specs {
        let weights = match &cached {
            Some((trace, w)) if *trace == spec.trace => w,
            _ => &cached.insert((spec.trace, ToyModelWeights::generate(&spec.trace))).1,
        };
        let outcome = run_trace(weights, &spec.policy, &spec.trace, spec.pool_pages)?;
        let (prefill_ns, decode_ns) = match spec.timing {
            None => (0, 0),
            Some(t) => {
                let mut prefill = Vec::with_capacity(t.reps);
                let mut decode = Vec::with_capacity(t.reps);
                for i in 0..t.warmup + t.reps.max(1) {
                    let timed = run_trace(weights, &spec.policy, &spec.trace, spec.pool_pages)?;
                    if i >= t.warmup {
                        prefill.push(timed.prefill_ns);
                        decode.push(timed.decode_ns);
                    }
                }
                (median_ns(&prefill), median_ns(&decode))
            }
        };
        let record = MetricsRecord::from_outcome(&outcome, prefill_ns, decode_ns);
        let steps = outcome.sequences.into_iter().flat_map(|s| s.steps).collect();
        outcomes.push(RunOutcome { record, steps });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_trace() -> TraceConfig {
        TraceConfig {
            prefill_len: 40,
            decode_len: 48,
            batch: 2,
            d_model: 16,
            heads: 2,
            head_dim: 4,
            layers: 2,
            seed: 3,
            ..TraceConfig::default()
        }
    }

    #[test]
    fn weights_are_seeded() {
        let t = small_trace();
        assert_eq!(ToyModelWeights::generate(&t), ToyModelWeights::generate(&t));
        let other = TraceConfig { seed: 4, ..t };
        assert_ne!(ToyModelWeights::generate(&t), ToyModelWeights::generate(&other));
        let w = ToyModelWeights::generate(&t);
        assert_eq!((w.layers[0].wq.rows(), w.layers[0].wq.cols()), (8, 16));
        assert_eq!((w.layers[0].wo.rows(), w.layers[0].wo.cols()), (16, 8));
    }

    #[test]
    fn prefill_over_budget_fills_whole_pages() {
        let t = small_trace();
        let w = ToyModelWeights::generate(&t);
        let p = PolicyConfig::new(PolicyKind::PagedEviction, 32, 16);
        let pools = LayerPools::new(&p, &t, None);
        let (run, stats) = SequenceRun::prefill(&w, &p, &t, 0, &pools).unwrap();
        for layer in &stats.layers {
            assert_eq!((layer.evicted, layer.pages_allocated, layer.retained_len), (8, 2, 32));
        }
        assert!(run.main_caches().iter().all(|c| c.table().pages().iter().all(|p| p.is_full())));
    }

    #[test]
    fn prefill_under_budget_keeps_everything() {
        let t = TraceConfig { prefill_len: 20, ..small_trace() };
        let w = ToyModelWeights::generate(&t);
        let p = PolicyConfig::new(PolicyKind::PagedEviction, 32, 16);
        let pools = LayerPools::new(&p, &t, None);
        let (_, stats) = SequenceRun::prefill(&w, &p, &t, 0, &pools).unwrap();
        assert!(stats.layers.iter().all(|l| l.evicted == 0 && l.pages_allocated == 2));
    }

    #[test]
    fn full_cache_matches_shadow_exactly() {
        let t = small_trace();
        let w = ToyModelWeights::generate(&t);
        let p = PolicyConfig::new(PolicyKind::FullCache, 16, 16);
        let out = run_trace(&w, &p, &t, None).unwrap();
        assert!(out.step_records().all(|r| r.deviation == 0.0 && r.decision.is_none()));
        assert_eq!(out.sequences[0].final_positions[0], (0..88).collect::<Vec<_>>());
    }

    #[test]
    fn batch_results_do_not_depend_on_scheduling() {
        let t = TraceConfig { batch: 4, ..small_trace() };
        let w = ToyModelWeights::generate(&t);
        let p = PolicyConfig::new(PolicyKind::KeyDiff, 32, 8);
        let parallel = run_trace(&w, &p, &t, None).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_trace(&w, &p, &t, None).unwrap());
        assert_eq!(parallel.sequences, single.sequences);
    }

    #[test]
    fn open_loop_streams_match() {
        let t = small_trace();
        let w = ToyModelWeights::generate(&t);
        let p = PolicyConfig::new(PolicyKind::PagedEviction, 16, 8);
        let out = run_trace(&w, &p, &t, None).unwrap();
        for s in &out.sequences {
            assert_eq!(s.input_checksums.0, s.input_checksums.1);
        }
        let closed = TraceConfig { mode: GeneratorMode::ClosedLoop, ..t };
        let out = run_trace(&w, &p, &closed, None).unwrap();
        assert!(out.sequences.iter().any(|s| s.input_checksums.0 != s.input_checksums.1));
    }

    #[test]
    fn deviation_is_zero_until_first_eviction() {
        for mode in [GeneratorMode::OpenLoop, GeneratorMode::ClosedLoop] {
            let t = TraceConfig { prefill_len: 20, mode, ..small_trace() };
            let w = ToyModelWeights::generate(&t);
            let p = PolicyConfig::new(PolicyKind::PagedEviction, 32, 8);
            let out = run_trace(&w, &p, &t, None).unwrap();
            let steps = &out.sequences[0].steps;
            let first = steps.iter().find(|r| !r.decision.is_none()).map(|r| r.step).unwrap();
            assert!(steps.iter().filter(|r| r.step < first).all(|r| r.deviation == 0.0));
            assert!(steps.iter().filter(|r| r.step >= first).any(|r| r.deviation > 0.0));
        }
    }

    #[test]
    fn small_pool_exhausts() {
        let t = small_trace();
        let w = ToyModelWeights::generate(&t);
        let p = PolicyConfig::new(PolicyKind::FullCache, 16, 16);
        let err = run_trace(&w, &p, &t, Some(3)).unwrap_err();
        assert!(matches!(err, SimError::Policy(PolicyError::Store(StoreError::PoolExhausted { .. }))));
    }

    #[test]
    fn matrix_has_one_record_per_spec() {
        let t = TraceConfig { batch: 1, ..small_trace() };
        let specs: Vec<RunSpec> = PolicyKind::ALL
            .iter()
            .flat_map(|&k| [16, 32, 48].map(|c| RunSpec::new(PolicyConfig::new(k, c, 16), t)))
            .collect();
        let out = run_matrix(&specs).unwrap();
        assert_eq!(out.len(), 15);
        assert!(run_matrix(&[]).unwrap().is_empty());
        let again = run_matrix(&specs).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn timing_reports_nonzero_medians() {
        let t = TraceConfig { batch: 1, decode_len: 8, ..small_trace() };
        let spec = RunSpec { timing: Some(Timing { reps: 2, warmup: 1 }), ..RunSpec::new(PolicyConfig::new(PolicyKind::FullCache, 16, 16), t) };
        let out = run_matrix(&[spec]).unwrap();
        assert!(out[0].record.decode_wall_ns > 0);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let t = TraceConfig { heads: 0, ..small_trace() };
        assert_eq!(t.validate(), Err(SimError::Config("heads must be positive".into())));
    }
}
