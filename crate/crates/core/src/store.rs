//! Fixed-size-page KV storage.
//!
//! A [`PagePool`] hands out physical page ids from a free list. Each sequence
//! (per layer) owns a [`BlockTable`] that maps logical blocks, in order, onto
//! pages drawn from that pool. Tokens are appended into the newest page and a
//! fresh page is opened only when the newest one is full.
//!
//! Two removal paths exist:
//!
//! * [`BlockTable::free_page`] drops a whole logical block and returns its
//!   physical page to the pool. Structured policies use only this path.
//! * [`BlockTable::evict_slot`] punches a hole at one token. The page stays
//!   mapped until its last token goes, at which point it is freed
//!   automatically.
//!
//! Token positions are assigned at creation and never renumbered.

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("page pool exhausted: all {capacity} pages are allocated")]
    PoolExhausted { capacity: usize },
    #[error("logical block {index} out of range (table has {page_count} pages)")]
    IndexOutOfRange { index: usize, page_count: usize },
    #[error("no retained token at position {0}")]
    UnknownPosition(usize),
    #[error("position {position} does not follow the newest retained position {newest}")]
    PositionNotIncreasing { position: usize, newest: usize },
    #[error("key and value must have the same nonzero length (key {key}, value {value})")]
    ShapeMismatch { key: usize, value: usize },
    #[error("vector width {got} does not match table width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("page size must be positive")]
    ZeroPageSize,
    #[error("memory size overflows u64")]
    Overflow,
}

/// Index of a page inside a [`PagePool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysicalPageId(pub u32);

impl fmt::Display for PhysicalPageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// One token's key and value, concatenated across all heads of a layer.
///
/// The L2 norms are computed once at construction so scoring never touches
/// the raw vectors again.
#[derive(Debug, Clone, PartialEq)]
pub struct KvVector {
    key: Vec<f64>,
    value: Vec<f64>,
    position: usize,
    key_norm: f64,
    value_norm: f64,
}

impl KvVector {
    pub fn new(position: usize, key: Vec<f64>, value: Vec<f64>) -> Result<Self, StoreError> {
        if key.is_empty() || key.len() != value.len() {
            return Err(StoreError::ShapeMismatch { key: key.len(), value: value.len() });
        }
        let key_norm = l2_norm(&key);
        let value_norm = l2_norm(&value);
        Ok(Self { key, value, position, key_norm, value_norm })
    }

    pub fn key(&self) -> &[f64] {
        &self.key
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn key_norm(&self) -> f64 {
        self.key_norm
    }

    pub fn value_norm(&self) -> f64 {
        self.value_norm
    }

    /// Width of the key (and value) vector, i.e. heads × head_dim.
    pub fn width(&self) -> usize {
        self.key.len()
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug)]
struct PoolState {
    // LIFO: the most recently released page is handed out next.
    free: Vec<PhysicalPageId>,
    allocated: usize,
}

/// Pool of physical pages shared by every table drawing from it.
///
/// Allocation and release are serialized behind a mutex, so a pool may be
/// shared across threads through an [`Arc`].
#[derive(Debug)]
pub struct PagePool {
    capacity: usize,
    state: Mutex<PoolState>,
}

impl PagePool {
    pub fn new(capacity: usize) -> Arc<Self> {
        let free = (0..capacity as u32).rev().map(PhysicalPageId).collect();
        Arc::new(Self { capacity, state: Mutex::new(PoolState { free, allocated: 0 }) })
    }

    pub fn allocate(&self) -> Result<PhysicalPageId, StoreError> {
        let mut state = self.state.lock().expect("page pool lock poisoned");
        let id = state.free.pop().ok_or(StoreError::PoolExhausted { capacity: self.capacity })?;
        state.allocated += 1;
        Ok(id)
    }

    pub fn release(&self, id: PhysicalPageId) {
        let mut state = self.state.lock().expect("page pool lock poisoned");
        debug_assert!(!state.free.contains(&id), "double free of {id}");
        state.free.push(id);
        state.allocated -= 1;
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn allocated(&self) -> usize {
        self.state.lock().expect("page pool lock poisoned").allocated
    }

    pub fn free_count(&self) -> usize {
        self.state.lock().expect("page pool lock poisoned").free.len()
    }
}

/// A fixed-size block of token slots.
///
/// `slots[i] == None` marks a hole, either never written (past `written`) or
/// evicted by [`BlockTable::evict_slot`].
#[derive(Debug, Clone)]
pub struct Page {
    physical_id: PhysicalPageId,
    slots: Vec<Option<KvVector>>,
    fill: usize,
    written: usize,
}

impl Page {
    fn new(physical_id: PhysicalPageId, page_size: usize) -> Self {
        Self { physical_id, slots: vec![None; page_size], fill: 0, written: 0 }
    }

    pub fn physical_id(&self) -> PhysicalPageId {
        self.physical_id
    }

    /// Number of occupied slots.
    pub fn fill(&self) -> usize {
        self.fill
    }

    /// Number of slots ever written; appends go to slot `written`.
    pub fn written(&self) -> usize {
        self.written
    }

    pub fn page_size(&self) -> usize {
        self.slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.slots.len()
    }

    pub fn slots(&self) -> &[Option<KvVector>] {
        &self.slots
    }

    /// Occupied tokens in slot order.
    pub fn tokens(&self) -> impl Iterator<Item = &KvVector> + Clone {
        self.slots.iter().flatten()
    }

    /// Occupancy bitmap, one flag per slot.
    pub fn occupancy(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    fn first_position(&self) -> Option<usize> {
        self.tokens().next().map(KvVector::position)
    }

    fn last_position(&self) -> Option<usize> {
        self.tokens().last().map(KvVector::position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendOutcome {
    pub page_opened: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreedPage {
    pub physical_id: PhysicalPageId,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotEviction {
    /// Logical index the token lived in before eviction.
    pub logical_index: usize,
    /// Set when the eviction emptied the page and it went back to the pool.
    pub page_freed: Option<PhysicalPageId>,
}

/// A sequence's ordered list of pages for one layer.
///
/// Pages are released to the pool when the table is dropped.
#[derive(Debug)]
pub struct BlockTable {
    page_size: usize,
    width: Option<usize>,
    pool: Arc<PagePool>,
    pages: Vec<Page>,
    retained_len: usize,
    newest_position: Option<usize>,
}

impl BlockTable {
    pub fn new(pool: Arc<PagePool>, page_size: usize) -> Result<Self, StoreError> {
        if page_size == 0 {
            return Err(StoreError::ZeroPageSize);
        }
        Ok(Self { page_size, width: None, pool, pages: Vec::new(), retained_len: 0, newest_position: None })
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn retained_len(&self) -> usize {
        self.retained_len
    }

    pub fn is_empty(&self) -> bool {
        self.retained_len == 0
    }

    pub fn pool(&self) -> &Arc<PagePool> {
        &self.pool
    }

    /// Pages in logical order.
    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    pub fn physical_ids(&self) -> Vec<PhysicalPageId> {
        self.pages.iter().map(Page::physical_id).collect()
    }

    pub fn newest_page(&self) -> Option<&Page> {
        self.pages.last()
    }

    /// True when the newest page has no slot left to write into.
    pub fn newest_page_full(&self) -> bool {
        self.pages.last().is_some_and(|p| p.written == self.page_size)
    }

    /// Retained tokens in logical order, skipping holes.
    pub fn tokens(&self) -> impl Iterator<Item = &KvVector> + Clone {
        self.pages.iter().flat_map(Page::tokens)
    }

    pub fn retained_positions(&self) -> Vec<usize> {
        self.tokens().map(KvVector::position).collect()
    }

    /// Writes `kv` into the next slot, opening a page if needed.
    pub fn append_token(&mut self, kv: KvVector) -> Result<AppendOutcome, StoreError> {
        if let Some(newest) = self.newest_position {
            if kv.position <= newest {
                return Err(StoreError::PositionNotIncreasing { position: kv.position, newest });
            }
        }
        match self.width {
            Some(w) if w != kv.width() => {
                return Err(StoreError::WidthMismatch { expected: w, got: kv.width() })
            }
            _ => {}
        }

        let page_opened = self.pages.last().is_none_or(|p| p.written == self.page_size);
        if page_opened {
            let id = self.pool.allocate()?;
            self.pages.push(Page::new(id, self.page_size));
        }
        self.width = Some(kv.width());
        self.newest_position = Some(kv.position);

        let page = self.pages.last_mut().expect("a page was just ensured");
        page.slots[page.written] = Some(kv);
        page.written += 1;
        page.fill += 1;
        self.retained_len += 1;
        Ok(AppendOutcome { page_opened })
    }

    /// Drops logical block `logical_index` and returns its page to the pool.
    pub fn free_page(&mut self, logical_index: usize) -> Result<FreedPage, StoreError> {
        if logical_index >= self.pages.len() {
            return Err(StoreError::IndexOutOfRange { index: logical_index, page_count: self.pages.len() });
        }
        let page = self.pages.remove(logical_index);
        self.retained_len -= page.fill;
        self.pool.release(page.physical_id);
        Ok(FreedPage { physical_id: page.physical_id, positions: page.tokens().map(KvVector::position).collect() })
    }

    /// Removes the token at `position`, leaving a hole in its page.
    pub fn evict_slot(&mut self, position: usize) -> Result<SlotEviction, StoreError> {
        let (logical_index, slot) = self.locate(position).ok_or(StoreError::UnknownPosition(position))?;
        let page = &mut self.pages[logical_index];
        page.slots[slot] = None;
        page.fill -= 1;
        self.retained_len -= 1;

        let page_freed = if page.fill == 0 {
            let id = page.physical_id;
            self.pages.remove(logical_index);
            self.pool.release(id);
            Some(id)
        } else {
            None
        };
        Ok(SlotEviction { logical_index, page_freed })
    }

    fn locate(&self, position: usize) -> Option<(usize, usize)> {
        // Positions increase across pages in logical order, so the owning page
        // is the first one whose last position is >= the target.
        let idx = self.pages.partition_point(|p| p.last_position().is_some_and(|last| last < position));
        let page = self.pages.get(idx)?;
        if page.first_position()? > position {
            return None;
        }
        let slot = page.slots.iter().position(|s| s.as_ref().is_some_and(|kv| kv.position == position))?;
        Some((idx, slot))
    }

    /// `1 − retained / (N·B)`; zero for an empty table.
    pub fn fragmentation_ratio(&self) -> f64 {
        let slots = self.pages.len() * self.page_size;
        if slots == 0 {
            0.0
        } else {
            1.0 - self.retained_len as f64 / slots as f64
        }
    }

    /// Fragmentation over every page except the newest one.
    pub fn fragmentation_outside_newest(&self) -> f64 {
        let Some((_, older)) = self.pages.split_last() else { return 0.0 };
        if older.is_empty() {
            return 0.0;
        }
        let filled: usize = older.iter().map(Page::fill).sum();
        1.0 - filled as f64 / (older.len() * self.page_size) as f64
    }
}

impl Drop for BlockTable {
    fn drop(&mut self) {
        for page in self.pages.drain(..) {
            self.pool.release(page.physical_id);
        }
    }
}

/// KV cache size in bytes: `2 · seq_len · layers · heads · head_dim · bytes_per_scalar`.
///
/// The leading 2 counts keys and values.
pub fn memory_bytes(
    seq_len: u64,
    layers: u64,
    heads: u64,
    head_dim: u64,
    bytes_per_scalar: u64,
) -> Result<u64, StoreError> {
    [seq_len, layers, heads, head_dim, bytes_per_scalar]
        .into_iter()
        .try_fold(2u64, |acc, x| acc.checked_mul(x))
        .ok_or(StoreError::Overflow)
}
