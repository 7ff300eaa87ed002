//! Cumulative evaluation measures over interactive episodes.
//!
//! Precision and recall count satisfied recommendations (rating ≥ 4)
//! within the first T steps; α-NDCG discounts repeated topics so that
//! covering new genres early scores higher than hammering one.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use crate::data_env::{ItemId, RatingLog, UserId};
use crate::error::{Error, Result};
use crate::SATISFIED_MIN_RATING;

pub type TopicId = u32;

/// One recommendation step as recorded during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceStep {
    pub item: ItemId,
    pub rating: u8,
    pub satisfied: bool,
}

impl TraceStep {
    pub fn new(item: ItemId, rating: u8) -> Self {
        TraceStep { item, rating, satisfied: rating >= SATISFIED_MIN_RATING }
    }
}

/// The full per-user episode record produced by an evaluation run.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub user: UserId,
    pub steps: Vec<TraceStep>,
}

impl EpisodeTrace {
    pub fn new(user: UserId) -> Self {
        EpisodeTrace { user, steps: Vec::new() }
    }

    pub fn push(&mut self, item: ItemId, rating: u8) {
        self.steps.push(TraceStep::new(item, rating));
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.steps.iter().map(|s| s.item).collect()
    }

    fn hits_within(&self, t: usize) -> usize {
        self.steps.iter().take(t).filter(|s| s.satisfied).count()
    }
}

/// Map item → set of topic (genre) ids.
#[derive(Debug, Clone, Default)]
pub struct TopicCatalog {
    by_item: HashMap<ItemId, Vec<TopicId>>,
    names: Vec<String>,
}

impl TopicCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Intern a topic name and attach it to an item. Duplicate pairs are idempotent.
    pub fn add(&mut self, item: ItemId, topic: &str) {
        let id = match self.names.iter().position(|n| n == topic) {
            Some(i) => i as TopicId,
            None => {
                self.names.push(topic.to_string());
                (self.names.len() - 1) as TopicId
            }
        };
        let topics = self.by_item.entry(item).or_default();
        if !topics.contains(&id) {
            topics.push(id);
        }
    }

    /// Read `item,topic` rows (original item ids), mapping them through the
    /// log's dense item index. Unknown items are skipped. An optional
    /// `item,topic` header line is tolerated.
    pub fn from_csv(reader: impl BufRead, log: &RatingLog) -> Result<Self> {
        let mut orig_to_dense: HashMap<u64, ItemId> = HashMap::new();
        for i in 0..log.n_items() {
            orig_to_dense.insert(log.original_item(i as ItemId), i as ItemId);
        }
        let mut catalog = TopicCatalog::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 1 && line.eq_ignore_ascii_case("item,topic")) {
                continue;
            }
            let (item, topic) = line.split_once(',').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected 'item,topic', got '{line}'"),
            })?;
            let orig: u64 = item.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad item id '{item}'"),
            })?;
            if let Some(&dense) = orig_to_dense.get(&orig) {
                catalog.add(dense, topic.trim());
            }
        }
        Ok(catalog)
    }

    /// Topic ids of an item; empty when the item has none.
    pub fn topics(&self, item: ItemId) -> &[TopicId] {
        self.by_item.get(&item).map_or(&[], Vec::as_slice)
    }

    pub fn topic_name(&self, id: TopicId) -> &str {
        &self.names[id as usize]
    }

    pub fn n_topics(&self) -> usize {
        self.names.len()
    }
}

/// Mean over users of the number of satisfied recommendations within the
/// first `t_cap` steps. Exhausted episodes contribute 0 past their end.
pub fn cumulative_precision(traces: &[EpisodeTrace], t_cap: usize) -> Result<f64> {
    if t_cap < 1 {
        return Err(Error::value("precision@T needs T >= 1"));
    }
    if traces.is_empty() {
        return Ok(0.0);
    }
    let total: usize = traces.iter().map(|tr| tr.hits_within(t_cap)).sum();
    Ok(total as f64 / traces.len() as f64)
}

/// Mean over users of hits within `t_cap` divided by the user's total
/// satisfied-item count. Every trace's user must have a count ≥ 1.
pub fn cumulative_recall(
    traces: &[EpisodeTrace],
    t_cap: usize,
    satisfied_counts: &BTreeMap<UserId, usize>,
) -> Result<f64> {
    if t_cap < 1 {
        return Err(Error::value("recall@T needs T >= 1"));
    }
    if traces.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for tr in traces {
        let count = *satisfied_counts
            .get(&tr.user)
            .ok_or_else(|| Error::value(format!("missing satisfied count for user {}", tr.user)))?;
        if count == 0 {
            return Err(Error::value(format!(
                "user {} has zero satisfied items; exclude it from recall",
                tr.user
            )));
        }
        sum += tr.hits_within(t_cap) as f64 / count as f64;
    }
    Ok(sum / traces.len() as f64)
}

fn log2_discount(t: usize) -> f64 {
    ((1 + t) as f64).log2()
}

/// Gain of placing `item` at the next position given topic counts so far.
fn incremental_gain(item: ItemId, catalog: &TopicCatalog, alpha: f64, counts: &[usize]) -> f64 {
    catalog
        .topics(item)
        .iter()
        .map(|&topic| (1.0 - alpha).powi(counts[topic as usize] as i32))
        .sum()
}

fn alpha_dcg(items: &[ItemId], catalog: &TopicCatalog, alpha: f64, t_cap: usize) -> f64 {
    let mut counts = vec![0usize; catalog.n_topics()];
    let mut dcg = 0.0;
    for (pos, &item) in items.iter().take(t_cap).enumerate() {
        let t = pos + 1;
        dcg += incremental_gain(item, catalog, alpha, &counts) / log2_discount(t);
        for &topic in catalog.topics(item) {
            counts[topic as usize] += 1;
        }
    }
    dcg
}

/// Greedy-ideal α-DCG over the same item multiset: at each position pick
/// the item with the largest incremental gain, ties to the lowest item id.
pub fn ideal_gain(items: &[ItemId], catalog: &TopicCatalog, alpha: f64, t_cap: usize) -> f64 {
    let mut pool: Vec<ItemId> = items.iter().take(t_cap).copied().collect();
    pool.sort_unstable();
    let mut counts = vec![0usize; catalog.n_topics()];
    let mut z = 0.0;
    for t in 1..=pool.len() {
        let (best_idx, best_gain) = pool
            .iter()
            .enumerate()
            .map(|(idx, &item)| (idx, incremental_gain(item, catalog, alpha, &counts)))
            // strict > keeps the earliest (lowest id, pool is sorted) on ties
            .fold((0, f64::NEG_INFINITY), |acc, (idx, g)| if g > acc.1 { (idx, g) } else { acc });
        let item = pool.remove(best_idx);
        z += best_gain / log2_discount(t);
        for &topic in catalog.topics(item) {
            counts[topic as usize] += 1;
        }
    }
    z
}

/// Diversity-aware NDCG of the delivered prefix: α-DCG normalized by the
/// greedy-ideal ordering of the same items. Returns 0 when no delivered
/// item has any topic.
pub fn alpha_ndcg(
    items: &[ItemId],
    catalog: &TopicCatalog,
    alpha: f64,
    t_cap: usize,
) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::value(format!("alpha must be in (0,1), got {alpha}")));
    }
    let z = ideal_gain(items, catalog, alpha, t_cap);
    if z == 0.0 {
        return Ok(0.0);
    }
    Ok(alpha_dcg(items, catalog, alpha, t_cap) / z)
}

/// Mean α-NDCG@T over traces.
pub fn mean_alpha_ndcg(
    traces: &[EpisodeTrace],
    catalog: &TopicCatalog,
    alpha: f64,
    t_cap: usize,
) -> Result<f64> {
    if traces.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for tr in traces {
        sum += alpha_ndcg(&tr.items(), catalog, alpha, t_cap)?;
    }
    Ok(sum / traces.len() as f64)
}
