use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::Result;
use crate::model::Model;
use crate::nn::{LstmState, Matrix};

use super::prediction::SOS;

/// Prediction-network result for one label prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredEntry<F> {
    pub state: Vec<LstmState<F>>,
    pub output: Vec<F>,
    /// Joint-network projection of `output`, bias included.
    pub joint_proj: Vec<F>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Prediction-network steps actually computed (the start token counts).
    pub steps: u64,
}

impl CacheStats {
    pub fn add(&mut self, other: &CacheStats) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.steps += other.steps;
    }
}

/// Prefix-keyed LRU cache of prediction-network states. Capacity 0 stores
/// nothing, so every lookup misses.
#[derive(Debug)]
pub struct PredCache<F> {
    capacity: usize,
    map: HashMap<Vec<u32>, (Arc<PredEntry<F>>, u64)>,
    order: BTreeMap<u64, Vec<u32>>,
    tick: u64,
    stats: CacheStats,
}

impl<F> PredCache<F> {
    pub fn new(capacity: usize) -> Self {
        PredCache { capacity, map: HashMap::new(), order: BTreeMap::new(), tick: 0, stats: CacheStats::default() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Looks up `prefix` without touching the counters.
    fn peek(&mut self, prefix: &[u32]) -> Option<Arc<PredEntry<F>>> {
        let (entry, stamp) = self.map.get_mut(prefix)?;
        self.order.remove(stamp);
        self.tick += 1;
        *stamp = self.tick;
        self.order.insert(self.tick, prefix.to_vec());
        Some(entry.clone())
    }

    /// Looks up `prefix`, counting a hit or a miss.
    pub fn get(&mut self, prefix: &[u32]) -> Option<Arc<PredEntry<F>>> {
        let found = self.peek(prefix);
        if found.is_some() {
            self.stats.hits += 1;
        } else {
            self.stats.misses += 1;
        }
        found
    }

    pub fn insert(&mut self, prefix: Vec<u32>, entry: Arc<PredEntry<F>>) {
        if self.capacity == 0 {
            return;
        }
        self.tick += 1;
        if let Some((_, old)) = self.map.insert(prefix.clone(), (entry, self.tick)) {
            self.order.remove(&old);
        }
        self.order.insert(self.tick, prefix);
        while self.map.len() > self.capacity {
            let (_, victim) = self.order.pop_first().expect("order tracks every entry");
            self.map.remove(&victim);
        }
    }

    pub(crate) fn count_step(&mut self) {
        self.stats.steps += 1;
    }
}

/// State after consuming the start token.
pub fn start_entry<M: Matrix>(model: &Model<M>) -> Result<PredEntry<M::Elem>> {
    let pred = model.prediction();
    let state = pred.step(SOS, &pred.zero_state())?;
    entry_from_state(model, state)
}

/// State after consuming `label` on top of `parent`.
pub fn extend_entry<M: Matrix>(model: &Model<M>, parent: &PredEntry<M::Elem>, label: u32) -> Result<PredEntry<M::Elem>> {
    let state = model.prediction().step(label, &parent.state)?;
    entry_from_state(model, state)
}

fn entry_from_state<M: Matrix>(model: &Model<M>, state: Vec<LstmState<M::Elem>>) -> Result<PredEntry<M::Elem>> {
    let output = state.last().expect("at least one prediction layer").output.clone();
    let joint_proj = model.joint().project_prediction(&output)?;
    Ok(PredEntry { state, output, joint_proj })
}

/// Prediction output after `⟨sos⟩, prefix…`, extending the longest cached
/// prefix one step at a time and caching each intermediate.
pub fn pred_forward<M: Matrix>(
    model: &Model<M>,
    prefix: &[u32],
    cache: &mut PredCache<M::Elem>,
) -> Result<Arc<PredEntry<M::Elem>>> {
    if let Some(hit) = cache.get(prefix) {
        return Ok(hit);
    }
    let mut known = None;
    for len in (0..prefix.len()).rev() {
        if let Some(e) = cache.peek(&prefix[..len]) {
            known = Some((len, e));
            break;
        }
    }
    let (mut len, mut entry) = match known {
        Some(k) => k,
        None => {
            cache.count_step();
            let e = Arc::new(start_entry(model)?);
            cache.insert(Vec::new(), e.clone());
            (0, e)
        }
    };
    while len < prefix.len() {
        cache.count_step();
        entry = Arc::new(extend_entry(model, &entry, prefix[len])?);
        len += 1;
        cache.insert(prefix[..len].to_vec(), entry.clone());
    }
    Ok(entry)
}
