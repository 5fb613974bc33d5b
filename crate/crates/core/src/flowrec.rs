//! Boarding/alighting reconstruction from successive snapshots.
//!
//! For each stop the pre-stop passengers (rows) and post-stop passengers
//! (columns) are compared by embedding distance. A pair is the same person
//! when each is the other's nearest neighbour and the distance is within the
//! threshold. Unmatched columns boarded at this floor; unmatched rows
//! alighted here.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{PassengerObservation, StopEvent};
use crate::features::FloorDayAggregate;
use crate::key::DayKey;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// Row-major M x N Euclidean distances between pre-stop and post-stop embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    rows: usize,
    cols: usize,
    d: Vec<f64>,
}

impl AssociationMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::data("ragged distance matrix"));
        }
        if rows.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::data("distances must be non-negative"));
        }
        Ok(AssociationMatrix {
            rows: rows.len(),
            cols,
            d: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut d = Vec::with_capacity(self.d.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                d.push(self.get(i, j));
            }
        }
        AssociationMatrix {
            rows: self.cols,
            cols: self.rows,
            d,
        }
    }

    pub fn max(&self) -> Option<f64> {
        self.d.iter().copied().reduce(f64::max)
    }
}

/// Builds the pre x post distance matrix.
pub fn association_matrix(pre: &[PassengerObservation], post: &[PassengerObservation]) -> Result<AssociationMatrix> {
    let dim = pre.first().or(post.first()).map_or(0, |o| o.embedding.len());
    for (side, obs) in [("pre_obs", pre), ("post_obs", post)] {
        if let Some(i) = obs.iter().position(|o| o.embedding.len() != dim) {
            return Err(Error::data(format!(
                "{side}[{i}] has embedding dimension {}, expected {dim}",
                obs[i].embedding.len()
            )));
        }
    }
    let mut d = Vec::with_capacity(pre.len() * post.len());
    for p in pre {
        for q in post {
            let sq: f64 = p
                .embedding
                .iter()
                .zip(&q.embedding)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(sq.sqrt());
        }
    }
    Ok(AssociationMatrix {
        rows: pre.len(),
        cols: post.len(),
        d,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (row, column) pairs, sorted by row.
    pub matched: Vec<(usize, usize)>,
    /// Columns (post-stop passengers) with no partner.
    pub boarded: BTreeSet<usize>,
    /// Rows (pre-stop passengers) with no partner.
    pub alighted: BTreeSet<usize>,
    pub threshold_used: f64,
}

/// First index of the minimum; strict `<` keeps the smaller index on ties.
fn argmin(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual-nearest-neighbour matching under threshold `t`.
pub fn match_passengers(d: &AssociationMatrix, t: f64) -> MatchResult {
    let row_best: Vec<Option<usize>> = (0..d.rows).map(|i| argmin(d.row(i).iter().copied())).collect();
    let col_best: Vec<Option<usize>> = (0..d.cols).map(|j| argmin((0..d.rows).map(|i| d.get(i, j)))).collect();
    let matched: Vec<(usize, usize)> = row_best
        .iter()
        .enumerate()
        .filter_map(|(i, j)| {
            let j = (*j)?;
            (col_best[j] == Some(i) && d.get(i, j) <= t).then_some((i, j))
        })
        .collect();
    let rows: BTreeSet<usize> = matched.iter().map(|m| m.0).collect();
    let cols: BTreeSet<usize> = matched.iter().map(|m| m.1).collect();
    MatchResult {
        boarded: (0..d.cols).filter(|j| !cols.contains(j)).collect(),
        alighted: (0..d.rows).filter(|i| !rows.contains(i)).collect(),
        matched,
        threshold_used: t,
    }
}

/// Per-(estate, elevator, floor, date) aggregates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowLedger {
    entries: BTreeMap<DayKey, FloorDayAggregate>,
}

impl FlowLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &DayKey) -> Option<&FloorDayAggregate> {
        self.entries.get(key)
    }

    pub fn entry(&mut self, key: DayKey) -> &mut FloorDayAggregate {
        self.entries
            .entry(key)
            .or_insert_with_key(|k| FloorDayAggregate::empty(k.clone()))
    }

    pub fn insert(&mut self, agg: FloorDayAggregate) {
        self.entries.insert(agg.key.clone(), agg);
    }

    pub fn iter(&self) -> impl Iterator<Item = &FloorDayAggregate> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Associative, commutative merge (counts and sums add).
    pub fn merge(&mut self, other: FlowLedger) {
        for (k, v) in other.entries {
            match self.entries.get_mut(&k) {
                Some(slot) => slot.absorb(&v),
                None => {
                    self.entries.insert(k, v);
                }
            }
        }
    }
}

impl FromIterator<FloorDayAggregate> for FlowLedger {
    fn from_iter<I: IntoIterator<Item = FloorDayAggregate>>(iter: I) -> Self {
        let mut ledger = FlowLedger::new();
        for agg in iter {
            ledger.entry(agg.key.clone()).absorb(&agg);
        }
        ledger
    }
}

/// Matches one stop and returns the boarded and alighted observations.
pub fn classify_stop(ev: &StopEvent, t: f64) -> Result<MatchResult> {
    let d = association_matrix(&ev.pre_obs, &ev.post_obs)?;
    Ok(match_passengers(&d, t))
}

fn accumulate(ledger: &mut FlowLedger, ev: &StopEvent, m: &MatchResult) {
    let agg = ledger.entry(ev.floor_key().on(ev.date()));
    let hour = ev.hour();
    for &j in &m.boarded {
        agg.add_passenger(&ev.post_obs[j], hour, true);
    }
    for &i in &m.alighted {
        agg.add_passenger(&ev.pre_obs[i], hour, false);
    }
}

/// Rebuilds the flow ledger from a stop stream. Elevators are processed in
/// parallel; within one elevator timestamps must not decrease.
pub fn reconstruct(events: &[StopEvent], t: f64) -> Result<FlowLedger> {
    if !(t > 0.0) {
        return Err(Error::config("match_threshold", "must be positive"));
    }
    let mut by_elevator: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, ev) in events.iter().enumerate() {
        by_elevator
            .entry((ev.estate_id.as_str(), ev.elevator_id.as_str()))
            .or_default()
            .push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_elevator.into_values().collect();
    groups.sort_unstable();
    let partials: Vec<Result<FlowLedger>> = groups
        .par_iter()
        .map(|idx| {
            let mut ledger = FlowLedger::new();
            let mut last = i64::MIN;
            for &i in idx {
                let ev = &events[i];
                if ev.timestamp < last {
                    return Err(Error::data(format!(
                        "event {i}: timestamp {} precedes the previous stop of elevator {}",
                        ev.timestamp, ev.elevator_id
                    )));
                }
                last = ev.timestamp;
                let m = classify_stop(ev, t).map_err(|e| Error::data(format!("event {i}: {e}")))?;
                accumulate(&mut ledger, ev, &m);
            }
            Ok(ledger)
        })
        .collect();
    let mut ledger = FlowLedger::new();
    for part in partials {
        ledger.merge(part?);
    }
    Ok(ledger)
}
