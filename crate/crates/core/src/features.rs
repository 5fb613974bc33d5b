//! Feature engineering over a trailing window of daily floor aggregates.
//!
//! Round 1 (13 values) describes flow counts: mean and population standard
//! deviation of daily flow at three scopes (this floor, its elevator, the
//! whole estate), separately for weekdays and weekends, plus the floor
//! number. Round 2 (81 values) keeps the 12 flow statistics and appends the
//! headcount, mean attribute classes and scores, and the hour-of-day
//! distribution.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::LazyLock;

use chrono::{Duration, NaiveDate};
use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::event::PassengerObservation;
use crate::flowrec::FlowLedger;
use crate::key::{DayKey, DayKind, FloorKey, ATTR_SLOTS, HOURS};

pub const DEFAULT_WINDOW_DAYS: u32 = 15;
pub const R1_LEN: usize = 13;
pub const R2_LEN: usize = 12 + 1 + ATTR_SLOTS + ATTR_SLOTS + HOURS;

/// Everything accumulated for one floor of one elevator on one date.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorDayAggregate {
    pub key: DayKey,
    pub day_kind: DayKind,
    /// Passengers who boarded at this floor.
    pub in_count: u32,
    /// Passengers who alighted at this floor.
    pub out_count: u32,
    pub hour_histogram: [u32; HOURS],
    pub attr_class_sum: [f64; ATTR_SLOTS],
    pub attr_score_sum: [f64; ATTR_SLOTS],
    pub passenger_count: u32,
}

impl FloorDayAggregate {
    pub fn empty(key: DayKey) -> Self {
        FloorDayAggregate {
            day_kind: DayKind::of(key.date),
            key,
            in_count: 0,
            out_count: 0,
            hour_histogram: [0; HOURS],
            attr_class_sum: [0.0; ATTR_SLOTS],
            attr_score_sum: [0.0; ATTR_SLOTS],
            passenger_count: 0,
        }
    }

    pub fn add_passenger(&mut self, obs: &PassengerObservation, hour: usize, boarded: bool) {
        if boarded {
            self.in_count += 1;
        } else {
            self.out_count += 1;
        }
        self.passenger_count += 1;
        self.hour_histogram[hour] += 1;
        for i in 0..ATTR_SLOTS {
            self.attr_class_sum[i] += f64::from(obs.attr_class[i]);
            self.attr_score_sum[i] += obs.attr_score[i];
        }
    }

    pub fn absorb(&mut self, other: &FloorDayAggregate) {
        self.in_count += other.in_count;
        self.out_count += other.out_count;
        self.passenger_count += other.passenger_count;
        for (a, b) in self.hour_histogram.iter_mut().zip(other.hour_histogram) {
            *a += b;
        }
        for i in 0..ATTR_SLOTS {
            self.attr_class_sum[i] += other.attr_class_sum[i];
            self.attr_score_sum[i] += other.attr_score_sum[i];
        }
    }

    /// Daily passenger flow: boarded plus alighted.
    pub fn flow(&self) -> f64 {
        f64::from(self.in_count) + f64::from(self.out_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.passenger_count != self.in_count + self.out_count {
            return Err(Error::data(format!("{:?}: passenger_count != in + out", self.key)));
        }
        if self.hour_histogram.iter().sum::<u32>() != self.passenger_count {
            return Err(Error::data(format!(
                "{:?}: hour histogram does not sum to passenger_count",
                self.key
            )));
        }
        if self.day_kind != DayKind::of(self.key.date) {
            return Err(Error::data(format!(
                "{:?}: day_kind disagrees with the calendar",
                self.key
            )));
        }
        let sums = self.attr_class_sum.iter().chain(&self.attr_score_sum);
        if sums.clone().any(|v| !(*v >= 0.0)) {
            return Err(Error::data(format!("{:?}: negative attribute sum", self.key)));
        }
        Ok(())
    }
}

/// The trailing window: every ledger key with one aggregate per date
/// (zero-filled where the ledger has nothing), plus per-date flow totals at
/// elevator and estate scope.
#[derive(Debug, Clone)]
pub struct Window {
    pub end_date: NaiveDate,
    pub dates: Vec<NaiveDate>,
    keys: BTreeSet<FloorKey>,
    series: HashMap<FloorKey, Vec<FloorDayAggregate>>,
    elevator_flow: HashMap<(String, String), Vec<f64>>,
    estate_flow: HashMap<String, Vec<f64>>,
}

/// One key's window split by day kind.
#[derive(Debug, Clone)]
pub struct Partition {
    pub weekday: Vec<FloorDayAggregate>,
    pub weekend: Vec<FloorDayAggregate>,
}

/// Selects the `window_days` dates ending at `end_date` (inclusive).
pub fn window_select(ledger: &FlowLedger, end_date: NaiveDate, window_days: u32) -> Result<Window> {
    if window_days == 0 {
        return Err(Error::config("window_days", "must be at least 1"));
    }
    let start = end_date - Duration::days(i64::from(window_days) - 1);
    let dates: Vec<NaiveDate> = start.iter_days().take(window_days as usize).collect();
    let keys: BTreeSet<FloorKey> = ledger.iter().map(|a| a.key.floor.clone()).collect();
    let n = dates.len();
    let mut series = HashMap::with_capacity(keys.len());
    let mut elevator_flow: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut estate_flow: HashMap<String, Vec<f64>> = HashMap::new();
    for key in &keys {
        let days: Vec<FloorDayAggregate> = dates
            .iter()
            .map(|d| {
                let dk = key.on(*d);
                ledger.get(&dk).cloned().unwrap_or_else(|| FloorDayAggregate::empty(dk))
            })
            .collect();
        let elev = elevator_flow
            .entry((key.estate.clone(), key.elevator.clone()))
            .or_insert_with(|| vec![0.0; n]);
        for (slot, day) in elev.iter_mut().zip(&days) {
            *slot += day.flow();
        }
        let est = estate_flow.entry(key.estate.clone()).or_insert_with(|| vec![0.0; n]);
        for (slot, day) in est.iter_mut().zip(&days) {
            *slot += day.flow();
        }
        series.insert(key.clone(), days);
    }
    Ok(Window {
        end_date,
        dates,
        keys,
        series,
        elevator_flow,
        estate_flow,
    })
}

impl Window {
    pub fn keys(&self) -> impl Iterator<Item = &FloorKey> {
        self.keys.iter()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Daily aggregates for `key`; a key with no ledger rows gets zero flow on every date.
    pub fn series(&self, key: &FloorKey) -> Vec<FloorDayAggregate> {
        self.series.get(key).cloned().unwrap_or_else(|| {
            self.dates
                .iter()
                .map(|d| FloorDayAggregate::empty(key.on(*d)))
                .collect()
        })
    }

    pub fn partition(&self, key: &FloorKey) -> Partition {
        let (weekday, weekend) = self
            .series(key)
            .into_iter()
            .partition(|a| a.day_kind == DayKind::Weekday);
        Partition { weekday, weekend }
    }

    fn kind_mask(&self, kind: DayKind) -> Vec<bool> {
        self.dates.iter().map(|d| DayKind::of(*d) == kind).collect()
    }

    fn scoped(&self, values: Option<&Vec<f64>>, mask: &[bool]) -> Vec<f64> {
        match values {
            Some(v) => v.iter().zip(mask).filter(|(_, m)| **m).map(|(x, _)| *x).collect(),
            None => vec![0.0; mask.iter().filter(|m| **m).count()],
        }
    }
}

/// Mean and population standard deviation; an empty series yields (0, 0).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn r1_names() -> Vec<String> {
    let mut names: Vec<String> = (1..=6).map(|i| format!("m{i}")).collect();
    names.extend((1..=6).map(|i| format!("s{i}")));
    names.push("floor".into());
    names
}

fn r2_names() -> Vec<String> {
    let mut names: Vec<String> = (1..=6).map(|i| format!("m{i}")).collect();
    names.extend((1..=6).map(|i| format!("s{i}")));
    names.push("Num".into());
    names.extend((1..=ATTR_SLOTS).map(|i| format!("t{i}")));
    names.extend((1..=ATTR_SLOTS).map(|i| format!("ts{i}")));
    names.extend((1..=HOURS).map(|i| format!("h{i}")));
    names
}

static R1_NAMES: LazyLock<Vec<String>> = LazyLock::new(r1_names);
static R2_NAMES: LazyLock<Vec<String>> = LazyLock::new(r2_names);

/// Round-1 vector: `[m1..m6, s1..s6, floor]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVectorR1([f64; R1_LEN]);

/// Round-2 vector: `[m1..m6, s1..s6, Num, t1..t22, ts1..ts22, h1..h24]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVectorR2([f64; R2_LEN]);

impl FeatureVectorR1 {
    pub fn new(values: [f64; R1_LEN]) -> Result<Self> {
        if values[6..12].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::data("standard deviations must be non-negative"));
        }
        if !(values[12] >= 1.0) {
            return Err(Error::data("floor number must be at least 1"));
        }
        Ok(FeatureVectorR1(values))
    }

    pub fn column_names() -> &'static [String] {
        &R1_NAMES
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn means(&self) -> &[f64] {
        &self.0[..6]
    }

    pub fn stds(&self) -> &[f64] {
        &self.0[6..12]
    }

    pub fn floor(&self) -> f64 {
        self.0[12]
    }
}

impl FeatureVectorR2 {
    pub fn new(values: [f64; R2_LEN]) -> Result<Self> {
        let v = FeatureVectorR2(values);
        if v.classes()
            .iter()
            .chain(v.scores())
            .chain(v.hours())
            .any(|x| !(0.0..=1.0).contains(x))
        {
            return Err(Error::data("attribute means and hour shares must lie in [0, 1]"));
        }
        let hsum: f64 = v.hours().iter().sum();
        if v.headcount() > 0.0 && (hsum - 1.0).abs() > 1e-9 {
            return Err(Error::data(format!("hour shares sum to {hsum}")));
        }
        if v.headcount() == 0.0 && hsum != 0.0 {
            return Err(Error::data("hour shares must be zero without passengers"));
        }
        Ok(v)
    }

    pub fn column_names() -> &'static [String] {
        &R2_NAMES
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn flow_stats(&self) -> &[f64] {
        &self.0[..12]
    }

    pub fn headcount(&self) -> f64 {
        self.0[12]
    }

    pub fn classes(&self) -> &[f64] {
        &self.0[13..13 + ATTR_SLOTS]
    }

    pub fn scores(&self) -> &[f64] {
        &self.0[13 + ATTR_SLOTS..13 + 2 * ATTR_SLOTS]
    }

    pub fn hours(&self) -> &[f64] {
        &self.0[13 + 2 * ATTR_SLOTS..]
    }
}

fn serialize_named<S: Serializer>(names: &[String], values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut map = s.serialize_map(Some(values.len()))?;
    for (n, v) in names.iter().zip(values) {
        map.serialize_entry(n, v)?;
    }
    map.end()
}

struct NamedVisitor<const N: usize>(&'static [String]);

impl<'de, const N: usize> Visitor<'de> for NamedVisitor<N> {
    type Value = [f64; N];

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "a map with the {N} named feature columns")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
        let mut out = [f64::NAN; N];
        let mut seen = [false; N];
        while let Some((name, value)) = map.next_entry::<String, f64>()? {
            let idx = self
                .0
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| de::Error::unknown_field(&name, &[]))?;
            if seen[idx] {
                return Err(de::Error::custom(format!("duplicate column {name}")));
            }
            seen[idx] = true;
            out[idx] = value;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(de::Error::custom(format!("missing column {}", self.0[missing])));
        }
        Ok(out)
    }
}

impl Serialize for FeatureVectorR1 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_named(&R1_NAMES, &self.0, s)
    }
}

impl Serialize for FeatureVectorR2 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serialize_named(&R2_NAMES, &self.0, s)
    }
}

impl<'de> Deserialize<'de> for FeatureVectorR1 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = d.deserialize_map(NamedVisitor::<R1_LEN>(&R1_NAMES))?;
        FeatureVectorR1::new(v).map_err(de::Error::custom)
    }
}

impl<'de> Deserialize<'de> for FeatureVectorR2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = d.deserialize_map(NamedVisitor::<R2_LEN>(&R2_NAMES))?;
        FeatureVectorR2::new(v).map_err(de::Error::custom)
    }
}

/// Round-1 features for one key.
pub fn build_r1(window: &Window, key: &FloorKey) -> FeatureVectorR1 {
    let own = window.series(key);
    let elevator = window.elevator_flow.get(&(key.estate.clone(), key.elevator.clone()));
    let estate = window.estate_flow.get(&key.estate);
    let mut values = [0.0; R1_LEN];
    for (slot, kind) in [DayKind::Weekday, DayKind::Weekend].into_iter().enumerate() {
        let mask = window.kind_mask(kind);
        let floor: Vec<f64> = own
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(a, _)| a.flow())
            .collect();
        let scopes = [floor, window.scoped(elevator, &mask), window.scoped(estate, &mask)];
        for (s, series) in scopes.iter().enumerate() {
            let (m, sd) = mean_std(series);
            values[slot * 3 + s] = m;
            values[6 + slot * 3 + s] = sd;
        }
    }
    values[12] = f64::from(key.floor);
    FeatureVectorR1::new(values).expect("statistics are well formed")
}

/// Round-2 features for one key that passed round 1.
pub fn build_r2(window: &Window, key: &FloorKey, r1: &FeatureVectorR1) -> FeatureVectorR2 {
    let mut total = FloorDayAggregate::empty(key.on(window.end_date));
    for day in window.series(key) {
        total.absorb(&day);
    }
    let mut values = [0.0; R2_LEN];
    values[..12].copy_from_slice(&r1.values()[..12]);
    let num = f64::from(total.passenger_count);
    values[12] = num;
    if num > 0.0 {
        for i in 0..ATTR_SLOTS {
            values[13 + i] = total.attr_class_sum[i] / num;
            values[13 + ATTR_SLOTS + i] = total.attr_score_sum[i] / num;
        }
        for h in 0..HOURS {
            values[13 + 2 * ATTR_SLOTS + h] = f64::from(total.hour_histogram[h]) / num;
        }
    }
    FeatureVectorR2::new(values).expect("shares are well formed")
}
