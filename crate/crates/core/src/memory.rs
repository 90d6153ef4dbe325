//! Budgeted memory of encoded episodes and the concepts they are merged into.
//!
//! Storage is counted in units of one `d`-vector: an episode costs one unit,
//! a concept two (centroid and diagonal covariance).

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nst::EncodedEpisode;

pub const EPISODE_UNITS: usize = 1;
pub const CONCEPT_UNITS: usize = 2;

/// Gaussian summary of merged episodes. `m2` holds summed squared deviations
/// from the centroid, so the population covariance is `m2 / count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub centroid: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: u64,
    pub label: usize,
    pub task: usize,
}

impl Concept {
    pub fn singleton(episode: &EncodedEpisode) -> Self {
        Self {
            centroid: episode.embedding.iter().map(|&v| v as f64).collect(),
            m2: vec![0.0; episode.embedding.len()],
            count: 1,
            label: episode.label,
            task: episode.task,
        }
    }

    /// Mean and summed squared deviations of a point set, computed directly.
    pub fn from_points(points: &[&[f32]], label: usize, task: usize) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Argument("concept of zero points".into()));
        };
        let d = first.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::Argument("points of mixed dimension".into()));
        }
        let n = points.len() as f64;
        let mut centroid = vec![0.0; d];
        for p in points {
            for (c, &v) in centroid.iter_mut().zip(p.iter()) {
                *c += v as f64;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n);
        let mut m2 = vec![0.0; d];
        for p in points {
            for k in 0..d {
                let dev = p[k] as f64 - centroid[k];
                m2[k] += dev * dev;
            }
        }
        Ok(Self {
            centroid,
            m2,
            count: points.len() as u64,
            label,
            task,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    /// Diagonal population covariance.
    pub fn covariance(&self) -> Vec<f64> {
        let m = self.count as f64;
        self.m2.iter().map(|&s| (s / m).max(0.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MemoryItem {
    Episode(EncodedEpisode),
    Concept(Concept),
}

impl MemoryItem {
    pub fn units(&self) -> usize {
        match self {
            MemoryItem::Episode(_) => EPISODE_UNITS,
            MemoryItem::Concept(_) => CONCEPT_UNITS,
        }
    }

    pub fn label(&self) -> usize {
        match self {
            MemoryItem::Episode(e) => e.label,
            MemoryItem::Concept(c) => c.label,
        }
    }

    pub fn task(&self) -> usize {
        match self {
            MemoryItem::Episode(e) => e.task,
            MemoryItem::Concept(c) => c.task,
        }
    }

    /// Number of original episodes represented.
    pub fn members(&self) -> u64 {
        match self {
            MemoryItem::Episode(_) => 1,
            MemoryItem::Concept(c) => c.count,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MemoryItem::Episode(e) => e.embedding.len(),
            MemoryItem::Concept(c) => c.dim(),
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        match self {
            MemoryItem::Episode(e) => e.embedding.iter().map(|&v| v as f64).collect(),
            MemoryItem::Concept(c) => c.centroid.clone(),
        }
    }

    pub fn to_concept(&self) -> Concept {
        match self {
            MemoryItem::Episode(e) => Concept::singleton(e),
            MemoryItem::Concept(c) => c.clone(),
        }
    }
}

/// Pooled statistics of two items of the same class.
pub fn merge_pair(a: &MemoryItem, b: &MemoryItem) -> Result<Concept> {
    if a.label() != b.label() {
        return Err(Error::Argument(format!(
            "cannot merge class {} with class {}",
            a.label(),
            b.label()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "cannot merge {}-d with {}-d item",
            a.dim(),
            b.dim()
        )));
    }
    Ok(combine(&a.to_concept(), &b.to_concept()))
}

fn combine(a: &Concept, b: &Concept) -> Concept {
    let (ma, mb) = (a.count as f64, b.count as f64);
    let n = ma + mb;
    let cross = ma * mb / n;
    let mut centroid = Vec::with_capacity(a.dim());
    let mut m2 = Vec::with_capacity(a.dim());
    for k in 0..a.dim() {
        let delta = b.centroid[k] - a.centroid[k];
        centroid.push((ma * a.centroid[k] + mb * b.centroid[k]) / n);
        m2.push(a.m2[k] + b.m2[k] + delta * delta * cross);
    }
    Concept {
        centroid,
        m2,
        count: a.count + b.count,
        label: a.label,
        task: a.task.min(b.task),
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Closest pair by centroid distance; ties go to the lexicographically
/// smallest `(i, j)`.
pub fn nearest_pair(items: &[MemoryItem]) -> Result<(usize, usize)> {
    if items.len() < 2 {
        return Err(Error::Argument(format!("nearest pair of {} items", items.len())));
    }
    let centroids: Vec<Vec<f64>> = items.iter().map(MemoryItem::centroid).collect();
    let mut best = (f64::INFINITY, 0, 1);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let d = squared_distance(&centroids[i], &centroids[j]);
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    Ok((best.1, best.2))
}

/// Episodes and concepts of one class, in insertion order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMemory {
    pub class_id: usize,
    pub items: Vec<MemoryItem>,
}

impl ClassMemory {
    pub fn new(class_id: usize) -> Self {
        Self {
            class_id,
            items: Vec::new(),
        }
    }

    pub fn unit_count(&self) -> usize {
        self.items.iter().map(MemoryItem::units).sum()
    }

    pub fn member_count(&self) -> u64 {
        self.items.iter().map(MemoryItem::members).sum()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EncodedEpisode> {
        self.items.iter().filter_map(|i| match i {
            MemoryItem::Episode(e) => Some(e),
            MemoryItem::Concept(_) => None,
        })
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.items.iter().filter_map(|i| match i {
            MemoryItem::Concept(c) => Some(c),
            MemoryItem::Episode(_) => None,
        })
    }

    pub fn push(&mut self, item: MemoryItem) -> Result<()> {
        if item.label() != self.class_id {
            return Err(Error::Argument(format!(
                "item of class {} pushed into class {}",
                item.label(),
                self.class_id
            )));
        }
        self.items.push(item);
        Ok(())
    }
}

/// `capacity` is K, `stored` the units held before the increment, `incoming`
/// the units the new task brings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub capacity: usize,
    pub stored: usize,
    pub incoming: usize,
}

impl MemoryBudget {
    /// Units that must be freed, `K_{t-1} + K_t - K`, or 0 when everything fits.
    pub fn reduction(&self) -> usize {
        (self.stored + self.incoming).saturating_sub(self.capacity)
    }
}

/// Per-class unit targets `floor(N_y * (K_{t-1} - K_r) / K_{t-1})`.
pub fn compute_reduction(budget: &MemoryBudget, counts: &[usize]) -> Result<Vec<usize>> {
    if budget.capacity == 0 {
        return Err(Error::Range("memory capacity must be positive".into()));
    }
    let kr = budget.reduction();
    if kr == 0 {
        return Ok(counts.to_vec());
    }
    if kr > budget.stored {
        return Err(Error::BudgetInfeasible(format!(
            "{} incoming units exceed capacity {} even with an empty store",
            budget.incoming, budget.capacity
        )));
    }
    let keep = (budget.stored - kr) as u128;
    let stored = budget.stored as u128;
    Ok(counts.iter().map(|&n| (n as u128 * keep / stored) as usize).collect())
}

/// What one call to [`integrate`] did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Integration {
    /// `(i, j)` list positions at the time of each merge; `j` was removed.
    pub merges: Vec<(usize, usize)>,
    /// Target actually used (after clamping).
    pub target: usize,
    pub clamped: bool,
}

const NONE: usize = usize::MAX;

/// Greedy agglomeration over a slot array. Every live slot caches its nearest
/// live neighbour among later slots, so a merge only touches the rows that
/// pointed at one of the merged slots.
struct Merger {
    d: usize,
    centroids: Vec<f64>,
    alive: Vec<bool>,
    nn: Vec<(f64, usize)>,
    items: Vec<Option<MemoryItem>>,
    units: usize,
    live: usize,
}

impl Merger {
    fn new(items: Vec<MemoryItem>) -> Self {
        let d = items.first().map_or(0, MemoryItem::dim);
        let n = items.len();
        let mut centroids = Vec::with_capacity(n * d);
        for it in &items {
            centroids.extend(it.centroid());
        }
        let units = items.iter().map(MemoryItem::units).sum();
        let mut m = Self {
            d,
            centroids,
            alive: vec![true; n],
            nn: vec![(f64::INFINITY, NONE); n],
            items: items.into_iter().map(Some).collect(),
            units,
            live: n,
        };
        for i in 0..n {
            m.recompute(i);
        }
        m
    }

    fn dist(&self, a: usize, b: usize) -> f64 {
        let d = self.d;
        squared_distance(&self.centroids[a * d..(a + 1) * d], &self.centroids[b * d..(b + 1) * d])
    }

    fn recompute(&mut self, i: usize) {
        let mut best = (f64::INFINITY, NONE);
        for j in i + 1..self.alive.len() {
            if self.alive[j] {
                let d = self.dist(i, j);
                if d < best.0 || best.1 == NONE {
                    best = (d, j);
                }
            }
        }
        self.nn[i] = best;
    }

    fn closest(&self) -> Option<(usize, usize)> {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..self.alive.len() {
            let (d, j) = self.nn[i];
            if self.alive[i] && j != NONE && best.is_none_or(|b| d < b.0) {
                best = Some((d, i, j));
            }
        }
        best.map(|b| (b.1, b.2))
    }

    fn position(&self, slot: usize) -> usize {
        self.alive[..slot].iter().filter(|&&a| a).count()
    }

    fn merge(&mut self, i: usize, j: usize) -> Result<()> {
        let a = self.items[i].take().expect("live slot");
        let b = self.items[j].take().expect("live slot");
        let merged = merge_pair(&a, &b)?;
        self.units = self.units + CONCEPT_UNITS - a.units() - b.units();
        let d = self.d;
        self.centroids[i * d..(i + 1) * d].copy_from_slice(&merged.centroid);
        self.items[i] = Some(MemoryItem::Concept(merged));
        self.alive[j] = false;
        self.live -= 1;
        self.recompute(i);
        for k in 0..j {
            if !self.alive[k] || k == i {
                continue;
            }
            let (dk, nk) = self.nn[k];
            if nk == i || nk == j {
                self.recompute(k);
            } else if k < i {
                let di = self.dist(k, i);
                if di < dk || (di == dk && i < nk) {
                    self.nn[k] = (di, i);
                }
            }
        }
        Ok(())
    }

    /// Merges closest pairs until `done(units, live)` holds or one item is left.
    fn run(
        &mut self,
        done: impl Fn(usize, usize) -> bool,
        log: &mut Vec<(usize, usize)>,
    ) -> Result<()> {
        while !done(self.units, self.live) {
            let Some((i, j)) = self.closest() else {
                break;
            };
            log.push((self.position(i), self.position(j)));
            self.merge(i, j)?;
        }
        Ok(())
    }

    fn into_items(self) -> Vec<MemoryItem> {
        self.items.into_iter().flatten().collect()
    }
}

/// Merges nearest pairs (episodes and concepts alike) until the class holds at
/// most `target` units. A merged concept takes the place of the earlier item
/// and the later one is removed. Targets below one concept are raised to 2.
pub fn integrate(memory: &mut ClassMemory, target: usize) -> Result<Integration> {
    let mut out = Integration {
        target,
        ..Default::default()
    };
    if memory.items.is_empty() || memory.unit_count() <= target {
        return Ok(out);
    }
    if target < CONCEPT_UNITS {
        log::warn!(
            "class {}: target of {target} units is below one concept, using {CONCEPT_UNITS}",
            memory.class_id
        );
        out.target = CONCEPT_UNITS;
        out.clamped = true;
        if memory.unit_count() <= CONCEPT_UNITS {
            return Ok(out);
        }
    }
    let goal = out.target;
    let mut merger = Merger::new(std::mem::take(&mut memory.items));
    let result = merger.run(|units, _| units <= goal, &mut out.merges);
    memory.items = merger.into_items();
    result.map(|_| out)
}

/// Merges nearest pairs until at most `count` items remain, then promotes the
/// remaining episodes to single-member concepts.
pub fn reduce_to_concepts(memory: &mut ClassMemory, count: usize) -> Result<Vec<(usize, usize)>> {
    if count == 0 {
        return Err(Error::Argument("cannot reduce a class to zero concepts".into()));
    }
    let mut merges = Vec::new();
    let mut merger = Merger::new(std::mem::take(&mut memory.items));
    let result = merger.run(|_, live| live <= count, &mut merges);
    memory.items = merger
        .into_items()
        .into_iter()
        .map(|it| MemoryItem::Concept(it.to_concept()))
        .collect();
    result.map(|_| merges)
}

/// Replaces every item of the class by one concept.
pub fn collapse_to_single(memory: &mut ClassMemory) -> Result<()> {
    let mut items = std::mem::take(&mut memory.items).into_iter();
    let Some(first) = items.next() else {
        return Ok(());
    };
    let mut acc = first.to_concept();
    for it in items {
        acc = merge_pair(&MemoryItem::Concept(acc), &it)?;
    }
    memory.items = vec![MemoryItem::Concept(acc)];
    Ok(())
}

/// How stored classes shrink when the budget is exceeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowPolicy {
    /// Merge episodes into concepts.
    Cluster,
    /// Drop a random subset of episodes.
    Discard,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntegrationSummary {
    /// `K_r`, the units that had to be freed.
    pub reduction: usize,
    /// `(class, target units)` per reduced class.
    pub targets: Vec<(usize, usize)>,
    pub clamped: Vec<usize>,
    pub extra_merges: usize,
    pub discarded: usize,
}

/// Every class's memory under one global budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    /// `None` means unlimited.
    pub capacity: Option<usize>,
    pub policy: OverflowPolicy,
    pub single_concept: bool,
    pub seed: u64,
    pub classes: BTreeMap<usize, ClassMemory>,
    dim: Option<usize>,
}

impl MemoryStore {
    pub fn new(capacity: Option<usize>, policy: OverflowPolicy, single_concept: bool, seed: u64) -> Self {
        Self {
            capacity,
            policy,
            single_concept,
            seed,
            classes: BTreeMap::new(),
            dim: None,
        }
    }

    /// Rebuilds a store from saved classes, checking that every item agrees
    /// on its class and dimension.
    pub fn from_parts(
        capacity: Option<usize>,
        policy: OverflowPolicy,
        single_concept: bool,
        seed: u64,
        classes: BTreeMap<usize, ClassMemory>,
    ) -> Result<Self> {
        let mut dim = None;
        for (&c, mem) in &classes {
            for item in &mem.items {
                if mem.class_id != c || item.label() != c {
                    return Err(Error::Argument(format!("item of class {} filed under {c}", item.label())));
                }
                match dim {
                    Some(d) if d != item.dim() => {
                        return Err(Error::Argument(format!("items of dimension {d} and {}", item.dim())))
                    }
                    _ => dim = Some(item.dim()),
                }
            }
        }
        Ok(Self {
            capacity,
            policy,
            single_concept,
            seed,
            classes,
            dim,
        })
    }

    pub fn unit_count(&self) -> usize {
        self.classes.values().map(ClassMemory::unit_count).sum()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Items of the classes belonging to one task.
    pub fn task_items(&self, task: usize) -> Vec<&MemoryItem> {
        self.classes
            .values()
            .flat_map(|c| c.items.iter())
            .filter(|i| i.task() == task)
            .collect()
    }

    fn check(&mut self, episodes: &[EncodedEpisode]) -> Result<()> {
        for e in episodes {
            if e.embedding.is_empty() || e.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("episode of class {} is empty or non-finite", e.label)));
            }
            match self.dim {
                Some(d) if d != e.embedding.len() => {
                    return Err(Error::Argument(format!(
                        "episode dimension {} differs from store dimension {d}",
                        e.embedding.len()
                    )))
                }
                _ => self.dim = Some(e.embedding.len()),
            }
        }
        Ok(())
    }

    fn append(&mut self, episodes: Vec<EncodedEpisode>) -> Result<()> {
        for e in episodes {
            let label = e.label;
            self.classes
                .entry(label)
                .or_insert_with(|| ClassMemory::new(label))
                .push(MemoryItem::Episode(e))?;
        }
        Ok(())
    }

    /// Adds a task's episodes, shrinking stored classes first when the budget
    /// would be exceeded.
    pub fn add_task(&mut self, episodes: Vec<EncodedEpisode>) -> Result<IntegrationSummary> {
        self.check(&episodes)?;
        let mut summary = IntegrationSummary::default();
        if self.single_concept {
            let new: Vec<usize> = episodes.iter().map(|e| e.label).collect();
            self.append(episodes)?;
            for c in new {
                collapse_to_single(self.classes.get_mut(&c).unwrap())?;
            }
            if let Some(k) = self.capacity {
                if self.unit_count() > k {
                    return Err(Error::BudgetInfeasible(format!(
                        "{} classes need {} units, capacity {k}",
                        self.classes.len(),
                        self.unit_count()
                    )));
                }
            }
            return Ok(summary);
        }
        let Some(capacity) = self.capacity else {
            self.append(episodes)?;
            return Ok(summary);
        };
        let incoming = episodes.len() * EPISODE_UNITS;
        if incoming > capacity {
            // The new task alone overflows: admit it, then shrink every class
            // proportionally with nothing left incoming.
            self.append(episodes)?;
            self.shrink(capacity, 0, &mut summary)?;
        } else {
            self.shrink(capacity, incoming, &mut summary)?;
            self.append(episodes)?;
        }
        Ok(summary)
    }

    fn shrink(&mut self, capacity: usize, incoming: usize, summary: &mut IntegrationSummary) -> Result<()> {
        let budget = MemoryBudget {
            capacity,
            stored: self.unit_count(),
            incoming,
        };
        summary.reduction = budget.reduction();
        if summary.reduction == 0 {
            return Ok(());
        }
        let ids: Vec<usize> = self.classes.keys().copied().collect();
        let counts: Vec<usize> = ids.iter().map(|c| self.classes[c].unit_count()).collect();
        let targets = compute_reduction(&budget, &counts)?;
        for (&c, &target) in ids.iter().zip(&targets) {
            summary.targets.push((c, target));
            let mem = self.classes.get_mut(&c).unwrap();
            match self.policy {
                OverflowPolicy::Cluster => {
                    if integrate(mem, target)?.clamped {
                        summary.clamped.push(c);
                    }
                }
                OverflowPolicy::Discard => {
                    summary.discarded += discard_to(mem, target.max(EPISODE_UNITS), self.seed)?;
                }
            }
        }
        while self.unit_count() + incoming > capacity {
            let floor = match self.policy {
                OverflowPolicy::Cluster => CONCEPT_UNITS + 1,
                OverflowPolicy::Discard => EPISODE_UNITS + 1,
            };
            let largest = self
                .classes
                .values_mut()
                .filter(|m| m.unit_count() >= floor)
                .max_by(|a, b| a.unit_count().cmp(&b.unit_count()).then(b.class_id.cmp(&a.class_id)));
            let Some(mem) = largest else {
                return Err(Error::BudgetInfeasible(format!(
                    "cannot fit {} stored plus {incoming} incoming units into {capacity}",
                    self.unit_count()
                )));
            };
            let units = mem.unit_count();
            match self.policy {
                OverflowPolicy::Cluster => {
                    integrate(mem, units - 1)?;
                }
                OverflowPolicy::Discard => {
                    summary.discarded += discard_to(mem, units - 1, self.seed)?;
                }
            }
            summary.extra_merges += 1;
        }
        Ok(())
    }
}

/// Keeps a seeded random subset of items (order preserved) within `target` units.
fn discard_to(memory: &mut ClassMemory, target: usize, seed: u64) -> Result<usize> {
    let before = memory.items.len();
    if memory.unit_count() <= target {
        return Ok(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (memory.class_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order = sample(&mut rng, before, before).into_vec();
    let mut kept = vec![false; before];
    let mut units = 0;
    for &i in &order {
        let u = memory.items[i].units();
        if units + u <= target {
            kept[i] = true;
            units += u;
        }
    }
    order.clear();
    let items = std::mem::take(&mut memory.items);
    memory.items = items.into_iter().zip(kept).filter(|(_, k)| *k).map(|(i, _)| i).collect();
    Ok(before - memory.items.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ep(v: &[f32], label: usize) -> MemoryItem {
        MemoryItem::Episode(EncodedEpisode {
            embedding: v.to_vec(),
            label,
            task: 1,
        })
    }

    fn class_of(points: &[Vec<f32>]) -> ClassMemory {
        ClassMemory {
            class_id: 0,
            items: points.iter().map(|p| ep(p, 0)).collect(),
        }
    }

    /// Repeated [`nearest_pair`] + [`merge_pair`] on a plain list.
    fn replay(mut items: Vec<MemoryItem>, target: usize) -> (Vec<MemoryItem>, Vec<(usize, usize)>) {
        let mut log = Vec::new();
        while items.iter().map(MemoryItem::units).sum::<usize>() > target && items.len() > 1 {
            let (i, j) = nearest_pair(&items).unwrap();
            let c = merge_pair(&items[i], &items[j]).unwrap();
            items[i] = MemoryItem::Concept(c);
            items.remove(j);
            log.push((i, j));
        }
        (items, log)
    }

    #[test]
    fn merge_examples() {
        let c = merge_pair(&ep(&[1.5, 2.0], 0), &ep(&[1.5, 2.0], 0)).unwrap();
        assert_eq!((c.centroid.clone(), c.m2.clone(), c.count), (vec![1.5, 2.0], vec![0.0, 0.0], 2));
        let c = merge_pair(&ep(&[0.0], 0), &ep(&[2.0], 0)).unwrap();
        assert_eq!((c.centroid[0], c.m2[0], c.covariance()[0]), (1.0, 2.0, 1.0));
        let pair = merge_pair(&ep(&[3.0, 0.0], 0), &ep(&[3.0, 0.0], 0)).unwrap();
        let c = merge_pair(&ep(&[0.0, 0.0], 0), &MemoryItem::Concept(pair)).unwrap();
        assert_eq!(c.centroid, vec![2.0, 0.0]);
        assert!(matches!(merge_pair(&ep(&[0.0], 0), &ep(&[0.0], 1)), Err(Error::Argument(_))));
    }

    #[test]
    fn nearest_pair_examples() {
        let items = vec![ep(&[0.0], 0), ep(&[1.0], 0), ep(&[10.0], 0)];
        assert_eq!(nearest_pair(&items).unwrap(), (0, 1));
        assert_eq!(nearest_pair(&items[1..]).unwrap(), (0, 1));
        assert!(nearest_pair(&items[..1]).is_err());
        // equal gaps: lowest pair wins
        let items = vec![ep(&[0.0], 0), ep(&[1.0], 0), ep(&[2.0], 0)];
        assert_eq!(nearest_pair(&items).unwrap(), (0, 1));
    }

    #[test]
    fn unit_counting() {
        let mut m = class_of(&[vec![0.0], vec![1.0], vec![5.0]]);
        let c = merge_pair(&ep(&[0.0], 0), &ep(&[1.0], 0)).unwrap();
        m.push(MemoryItem::Concept(c.clone())).unwrap();
        m.push(MemoryItem::Concept(c)).unwrap();
        assert_eq!(m.unit_count(), 7);
        assert_eq!(ClassMemory::new(3).unit_count(), 0);
        assert!(m.push(ep(&[0.0], 4)).is_err());
    }

    #[test]
    fn reduction_examples() {
        let b = MemoryBudget { capacity: 200, stored: 200, incoming: 50 };
        assert_eq!(b.reduction(), 50);
        assert_eq!(compute_reduction(&b, &[100, 100]).unwrap(), vec![75, 75]);
        let slack = MemoryBudget { capacity: 300, stored: 200, incoming: 50 };
        assert_eq!(compute_reduction(&slack, &[120, 80]).unwrap(), vec![120, 80]);
        let bad = MemoryBudget { capacity: 40, stored: 10, incoming: 50 };
        assert!(matches!(compute_reduction(&bad, &[10]), Err(Error::BudgetInfeasible(_))));
    }

    #[test]
    fn four_points_to_three_units() {
        let mut m = class_of(&[vec![0.0], vec![1.0], vec![10.0], vec![30.0]]);
        let out = integrate(&mut m, 3).unwrap();
        assert_eq!(out.merges, vec![(0, 1), (0, 1)]);
        assert_eq!(m.unit_count(), 3);
        assert_eq!(m.episodes().count(), 1);
        assert_eq!(m.concepts().count(), 1);
        assert_eq!(m.member_count(), 4);
        let noop = integrate(&mut m, 3).unwrap();
        assert!(noop.merges.is_empty());
    }

    #[test]
    fn tiny_targets_are_clamped() {
        let mut m = class_of(&[vec![0.0], vec![1.0], vec![2.0]]);
        let out = integrate(&mut m, 1).unwrap();
        assert!(out.clamped);
        assert_eq!(m.items.len(), 1);
        assert_eq!(m.unit_count(), 2);
    }

    #[test]
    fn collapse_and_reduce_to_concepts() {
        let pts: Vec<Vec<f32>> = (0..9).map(|i| vec![i as f32, (i * i) as f32]).collect();
        let mut m = class_of(&pts);
        collapse_to_single(&mut m).unwrap();
        assert_eq!(m.items.len(), 1);
        let c = m.concepts().next().unwrap();
        assert_eq!(c.count, 9);
        assert!((c.centroid[0] - 4.0).abs() < 1e-12);
        let mut m = class_of(&pts);
        reduce_to_concepts(&mut m, 4).unwrap();
        assert_eq!(m.concepts().count(), 4);
        assert_eq!(m.member_count(), 9);
    }

    #[test]
    fn store_respects_budget_across_tasks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = MemoryStore::new(Some(60), OverflowPolicy::Cluster, false, 1);
        for task in 1..=5 {
            let eps: Vec<EncodedEpisode> = (0..30)
                .map(|_| EncodedEpisode {
                    embedding: (0..3).map(|_| rng.random::<f32>()).collect(),
                    label: task,
                    task,
                })
                .collect();
            store.add_task(eps).unwrap();
            assert!(store.unit_count() <= 60);
            assert_eq!(store.classes[&task].member_count(), 30);
        }
        let total: u64 = store.classes.values().map(ClassMemory::member_count).sum();
        assert_eq!(total, 150);
    }

    #[test]
    fn discard_policy_keeps_episodes_only() {
        let mut store = MemoryStore::new(Some(40), OverflowPolicy::Discard, false, 3);
        for task in 1..=4 {
            let eps = (0..25)
                .map(|i| EncodedEpisode { embedding: vec![i as f32], label: task, task })
                .collect();
            store.add_task(eps).unwrap();
            assert!(store.unit_count() <= 40);
        }
        assert!(store.classes.values().all(|c| c.concepts().count() == 0));
    }

    #[test]
    fn single_concept_mode() {
        let mut store = MemoryStore::new(None, OverflowPolicy::Cluster, true, 0);
        for task in 1..=3 {
            let eps = (0..10)
                .map(|i| EncodedEpisode { embedding: vec![i as f32, 1.0], label: task, task })
                .collect();
            store.add_task(eps).unwrap();
        }
        assert_eq!(store.unit_count(), 6);
    }

    proptest! {
        #[test]
        fn fast_engine_matches_list_replay(
            n in 2usize..40,
            d in 1usize..5,
            target in 0usize..40,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse grid so exact ties actually occur
            let pts: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(0..6) as f32).collect())
                .collect();
            let mut m = class_of(&pts);
            let out = integrate(&mut m, target).unwrap();
            let (items, log) = replay(class_of(&pts).items, out.target);
            prop_assert_eq!(out.merges, log);
            prop_assert_eq!(m.items, items);
        }
    }
}
