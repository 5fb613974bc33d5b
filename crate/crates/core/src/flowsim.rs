//! Seeded building simulator.
//!
//! Stands in for the camera and encoder front end: residents with fixed
//! appearance centroids ride elevators according to hourly schedules, and
//! each stop yields a pair of noisy snapshots. Ground truth (who is who, true
//! per-floor counts, planted anomalies) travels in a separate [`GroundTruth`]
//! value that never reaches the trip log.
//!
//! Floor 1 is the lobby. A resident outing is a ride from the home floor to
//! the lobby and a later ride back; residents living on floor 1 ride to a
//! random upper floor instead.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use chrono::{NaiveDate, NaiveTime};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{PassengerObservation, StopEvent, DEFAULT_CAPACITY};
use crate::key::{validate_ident, DayKey, DayKind, FloorKey, ATTR_SLOTS, HOURS};
use crate::seed;

const STREAM_POPULATION: u64 = 1;
const STREAM_TRIPS: u64 = 2;
const STREAM_CAMERA: u64 = 3;
const STREAM_PLAN: u64 = 4;

const SECONDS_PER_DAY: i64 = 86_400;
/// Requests this close to the head of the queue ride in the same sweep.
const BATCH_WINDOW_SECS: i64 = 30;
const TRAVEL_SECS_PER_FLOOR: i64 = 2;
const DWELL_SECS: i64 = 10;
/// Outings must return this long before the end of the horizon.
const HORIZON_MARGIN_SECS: i64 = 2 * 3600;
/// Minimum gap between one outing's return and the same person's next departure.
const MIN_GAP_SECS: i64 = 600;

fn default_dim() -> usize {
    128
}
fn default_days() -> u32 {
    15
}
fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
}
fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}
fn default_trips() -> f64 {
    1.0
}
fn default_attr_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingSpec {
    pub estate_id: String,
    pub elevator_count: u32,
    pub floor_count: u32,
    pub residents_per_floor: u32,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_days")]
    pub day_count: u32,
    /// First simulated date (UTC midnight).
    #[serde(default = "default_start")]
    pub start_date: NaiveDate,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Poisson mean of outings per resident per day.
    #[serde(default = "default_trips")]
    pub trips_per_day: f64,
    /// Standard deviation of the Gaussian noise added to attribute scores.
    #[serde(default = "default_attr_noise")]
    pub attr_noise: f64,
}

impl BuildingSpec {
    pub fn new(estate_id: impl Into<String>, elevators: u32, floors: u32, per_floor: u32) -> Self {
        BuildingSpec {
            estate_id: estate_id.into(),
            elevator_count: elevators,
            floor_count: floors,
            residents_per_floor: per_floor,
            embedding_dim: default_dim(),
            noise_sigma: 0.0,
            day_count: default_days(),
            start_date: default_start(),
            capacity: default_capacity(),
            trips_per_day: default_trips(),
            attr_noise: default_attr_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_ident("estate_id", &self.estate_id)?;
        if self.elevator_count == 0 {
            return Err(Error::config("elevator_count", "must be positive"));
        }
        if self.floor_count < 2 {
            return Err(Error::config("floor_count", "must be at least 2"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config("embedding_dim", "must be at least 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be a finite non-negative number"));
        }
        if self.day_count == 0 {
            return Err(Error::config("day_count", "must be positive"));
        }
        if self.capacity == 0 {
            return Err(Error::config("capacity", "must be positive"));
        }
        if !(self.trips_per_day >= 0.0 && self.trips_per_day.is_finite()) {
            return Err(Error::config("trips_per_day", "must be a finite non-negative number"));
        }
        if !(self.attr_noise >= 0.0 && self.attr_noise.is_finite()) {
            return Err(Error::config("attr_noise", "must be a finite non-negative number"));
        }
        Ok(())
    }

    pub fn elevator_ids(&self) -> Vec<String> {
        (1..=self.elevator_count).map(|i| format!("E{i:02}")).collect()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.start_date.iter_days().take(self.day_count as usize)
    }

    fn horizon_start(&self) -> i64 {
        midnight(self.start_date)
    }

    fn horizon_end(&self) -> i64 {
        self.horizon_start() + i64::from(self.day_count) * SECONDS_PER_DAY
    }
}

fn midnight(date: NaiveDate) -> i64 {
    date.and_time(NaiveTime::MIN).and_utc().timestamp()
}

/// Hourly departure-rate table family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Commuter; switches to the weekend table on Saturdays and Sundays.
    ResidentWeekday,
    ResidentWeekend,
    /// Weekday 09:00-18:00 presence, no weekend trips.
    OfficeHours,
    /// Departures between 22:00 and 04:00.
    Nocturnal,
    Custom {
        departure_weights: Vec<f64>,
        dwell_hours: (f64, f64),
    },
}

impl ScheduleKind {
    /// Departure weights for one day, or `None` when the profile stays put.
    fn table(&self, kind: DayKind) -> Option<Vec<f64>> {
        let mut w = vec![0.0; HOURS];
        match (self, kind) {
            (ScheduleKind::ResidentWeekday, DayKind::Weekday) => {
                w[6] = 2.0;
                w[7] = 5.0;
                w[8] = 5.0;
                w[9] = 2.0;
                w[10..21].fill(0.6);
            }
            (ScheduleKind::ResidentWeekday, DayKind::Weekend) | (ScheduleKind::ResidentWeekend, _) => {
                w[8..21].fill(1.0);
                w[10] = 2.0;
                w[11] = 2.0;
                w[14] = 1.5;
            }
            (ScheduleKind::OfficeHours, DayKind::Weekday) => {
                w[8] = 3.0;
                w[9] = 1.0;
            }
            (ScheduleKind::OfficeHours, DayKind::Weekend) => return None,
            (ScheduleKind::Nocturnal, _) => {
                for h in [22, 23, 0, 1, 2, 3] {
                    w[h] = 1.0;
                }
            }
            (ScheduleKind::Custom { departure_weights, .. }, _) => return Some(departure_weights.clone()),
        }
        Some(w)
    }

    fn dwell_hours(&self, kind: DayKind) -> (f64, f64) {
        match (self, kind) {
            (ScheduleKind::ResidentWeekday, DayKind::Weekday) => (1.0, 10.0),
            (ScheduleKind::ResidentWeekday, DayKind::Weekend) | (ScheduleKind::ResidentWeekend, _) => (1.0, 5.0),
            (ScheduleKind::OfficeHours, _) => (8.0, 9.0),
            (ScheduleKind::Nocturnal, _) => (1.0, 4.0),
            (ScheduleKind::Custom { dwell_hours, .. }, _) => *dwell_hours,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidentProfile {
    pub resident_id: u64,
    pub home_floor: u32,
    /// Index into [`BuildingSpec::elevator_ids`] of the elevator this person uses.
    pub elevator: u32,
    pub embedding_centroid: Vec<f64>,
    pub attribute_truth: [f64; ATTR_SLOTS],
    pub schedule_kind: ScheduleKind,
    pub trips_per_day: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// More people live on the floor than its neighbours; `magnitude` is the
    /// flow multiplier. The extra occupants share one demographic profile.
    OvercrowdedFloor,
    /// Weekday office workers on a residential floor; `magnitude` workers per resident.
    OfficePattern,
    /// Night visitors; `magnitude` is the visitor headcount.
    LateNightGathering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyPlan {
    pub kind: AnomalyKind,
    pub target: FloorKey,
    pub magnitude: f64,
    /// Dates on which the anomaly is active; `None` means the whole horizon.
    #[serde(default)]
    pub active_days: Option<BTreeSet<NaiveDate>>,
}

impl AnomalyPlan {
    pub fn new(kind: AnomalyKind, target: FloorKey, magnitude: f64) -> Self {
        AnomalyPlan {
            kind,
            target,
            magnitude,
            active_days: None,
        }
    }

    fn active_on(&self, date: NaiveDate) -> bool {
        self.active_days.as_ref().is_none_or(|d| d.contains(&date))
    }

    fn validate(&self, spec: &BuildingSpec, index: usize) -> Result<()> {
        let field = |name: &str| format!("anomaly[{index}].{name}");
        if self.target.estate != spec.estate_id {
            return Err(Error::config(
                field("target.estate"),
                format!("unknown estate {:?}", self.target.estate),
            ));
        }
        if !spec.elevator_ids().contains(&self.target.elevator) {
            return Err(Error::config(
                field("target.elevator"),
                format!("unknown elevator {:?}", self.target.elevator),
            ));
        }
        if self.target.floor == 0 || self.target.floor > spec.floor_count {
            return Err(Error::config(
                field("target.floor"),
                format!("floor {} outside 1..={}", self.target.floor, spec.floor_count),
            ));
        }
        if !(self.magnitude.is_finite() && self.magnitude > 0.0) {
            return Err(Error::config(field("magnitude"), "must be positive"));
        }
        if self.kind == AnomalyKind::OvercrowdedFloor && self.magnitude <= 1.0 {
            return Err(Error::config(
                field("magnitude"),
                "overcrowded_floor needs magnitude > 1",
            ));
        }
        Ok(())
    }
}

/// Per-(elevator, floor, date) true counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthCounts {
    pub boarded: u32,
    pub alighted: u32,
    pub hour_histogram: [u32; HOURS],
    pub anomalous: bool,
}

/// Who was in each snapshot, aligned with the event list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopTruth {
    pub pre_ids: Vec<u64>,
    pub post_ids: Vec<u64>,
}

impl StopTruth {
    /// Indices into `post_ids` of people absent before the stop.
    pub fn boarded(&self) -> BTreeSet<usize> {
        let pre: HashSet<_> = self.pre_ids.iter().collect();
        (0..self.post_ids.len())
            .filter(|j| !pre.contains(&self.post_ids[*j]))
            .collect()
    }

    /// Indices into `pre_ids` of people absent after the stop.
    pub fn alighted(&self) -> BTreeSet<usize> {
        let post: HashSet<_> = self.post_ids.iter().collect();
        (0..self.pre_ids.len())
            .filter(|i| !post.contains(&self.pre_ids[*i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedAnomaly {
    pub kind: AnomalyKind,
    pub target: FloorKey,
}

/// Sidecar channel: everything the detector must not see.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub stops: Vec<StopTruth>,
    #[serde(with = "ledger_entries")]
    pub ledger: BTreeMap<DayKey, TruthCounts>,
    pub planted: Vec<PlantedAnomaly>,
}

impl GroundTruth {
    pub fn planted_keys(&self) -> BTreeSet<FloorKey> {
        self.planted.iter().map(|p| p.target.clone()).collect()
    }

    /// Total flow (boarded + alighted) of one floor key over all days.
    pub fn total_flow(&self, key: &FloorKey) -> u64 {
        self.ledger
            .iter()
            .filter(|(k, _)| &k.floor == key)
            .map(|(_, c)| u64::from(c.boarded + c.alighted))
            .sum()
    }

    pub fn merge(&mut self, other: GroundTruth) {
        self.stops.extend(other.stops);
        for (k, v) in other.ledger {
            let slot = self.ledger.entry(k).or_default();
            slot.boarded += v.boarded;
            slot.alighted += v.alighted;
            for (a, b) in slot.hour_histogram.iter_mut().zip(v.hour_histogram) {
                *a += b;
            }
            slot.anomalous |= v.anomalous;
        }
        self.planted.extend(other.planted);
    }
}

/// JSON maps need string keys, so the ledger is written as a list of entries.
mod ledger_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        key: DayKey,
        #[serde(flatten)]
        counts: TruthCounts,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<DayKey, TruthCounts>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter().map(|(k, v)| Entry {
            key: k.clone(),
            counts: v.clone(),
        }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<DayKey, TruthCounts>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| (e.key, e.counts)).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub events: Vec<StopEvent>,
    pub truth: GroundTruth,
}

/// One person's round trip: `base -> dest` at `depart`, `dest -> base` at `ret`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outing {
    pub person: usize,
    pub base_floor: u32,
    pub dest_floor: u32,
    pub depart: i64,
    pub ret: i64,
}

fn unit_gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn uniform_attributes(rng: &mut impl Rng) -> [f64; ATTR_SLOTS] {
    std::array::from_fn(|_| rng.random::<f64>())
}

/// Draws `residents_per_floor` residents for every floor. Centroids are
/// uniform on the unit hypersphere; residents are spread round-robin over
/// the elevators.
pub fn generate_building(spec: &BuildingSpec, seed: u64) -> Result<Vec<ResidentProfile>> {
    spec.validate()?;
    let mut rng = seed::rng(seed, STREAM_POPULATION, 0);
    let mut out = Vec::with_capacity((spec.residents_per_floor * spec.floor_count) as usize);
    for floor in 1..=spec.floor_count {
        for i in 0..spec.residents_per_floor {
            out.push(ResidentProfile {
                resident_id: out.len() as u64,
                home_floor: floor,
                elevator: i % spec.elevator_count,
                embedding_centroid: unit_gaussian(spec.embedding_dim, &mut rng),
                attribute_truth: uniform_attributes(&mut rng),
                schedule_kind: ScheduleKind::ResidentWeekday,
                trips_per_day: spec.trips_per_day,
            });
        }
    }
    Ok(out)
}

/// One noisy encoder reading of a person.
///
/// The embedding is `normalize(centroid + eps)` with per-component
/// `eps ~ N(0, sigma^2 / dim)`, so `sigma` is the RMS length of the noise
/// vector regardless of dimension. Attribute scores get independent
/// `N(0, attr_noise^2)` noise and are clamped to `[0, 1]`.
pub fn observe(profile: &ResidentProfile, sigma: f64, attr_noise: f64, rng: &mut impl Rng) -> PassengerObservation {
    let embedding = if sigma > 0.0 {
        let per_component = sigma / (profile.embedding_centroid.len() as f64).sqrt();
        let noisy: Vec<f64> = profile
            .embedding_centroid
            .iter()
            .map(|c| c + per_component * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = noisy.iter().map(|x| x * x).sum::<f64>().sqrt();
        noisy.into_iter().map(|x| x / norm).collect()
    } else {
        profile.embedding_centroid.clone()
    };
    let scores = if attr_noise > 0.0 {
        let normal = Normal::new(0.0, attr_noise).expect("finite std");
        profile
            .attribute_truth
            .map(|t| (t + normal.sample(rng)).clamp(0.0, 1.0))
    } else {
        profile.attribute_truth
    };
    PassengerObservation::from_scores(embedding, scores)
}

/// Convenience wrapper drawing the noise from a dedicated seed.
pub fn observe_seeded(profile: &ResidentProfile, sigma: f64, attr_noise: f64, seed: u64) -> PassengerObservation {
    observe(
        profile,
        sigma,
        attr_noise,
        &mut seed::rng(seed, STREAM_CAMERA, u64::MAX),
    )
}

/// Extra people a plan adds to the building. Each extra draws from its own
/// stream, so raising a magnitude only ever adds people.
fn plan_people(
    spec: &BuildingSpec,
    population: &[ResidentProfile],
    plan: &AnomalyPlan,
    plan_index: usize,
    seed: u64,
) -> Vec<ResidentProfile> {
    let elevator = spec
        .elevator_ids()
        .iter()
        .position(|e| *e == plan.target.elevator)
        .expect("validated") as u32;
    let residents = population
        .iter()
        .filter(|p| p.home_floor == plan.target.floor && p.elevator == elevator)
        .count()
        .max(1) as f64;
    let (count, schedule, trips) = match plan.kind {
        AnomalyKind::OvercrowdedFloor => (
            ((plan.magnitude - 1.0) * residents).ceil(),
            ScheduleKind::ResidentWeekday,
            spec.trips_per_day,
        ),
        AnomalyKind::OfficePattern => ((plan.magnitude * residents).ceil(), ScheduleKind::OfficeHours, 1.0),
        AnomalyKind::LateNightGathering => (plan.magnitude.ceil(), ScheduleKind::Nocturnal, 1.0),
    };
    (0..count as u64)
        .map(|k| {
            let mut rng = seed::rng(seed, STREAM_PLAN, ((plan_index as u64) << 32) | k);
            let mut attribute_truth = uniform_attributes(&mut rng);
            match plan.kind {
                AnomalyKind::OfficePattern => attribute_truth[..6].fill(0.9),
                AnomalyKind::LateNightGathering => attribute_truth[6..12].fill(0.9),
                AnomalyKind::OvercrowdedFloor => attribute_truth[12..18].fill(0.9),
            }
            ResidentProfile {
                resident_id: (1 << 40) + ((plan_index as u64) << 24) + k,
                home_floor: plan.target.floor,
                elevator,
                embedding_centroid: unit_gaussian(spec.embedding_dim, &mut rng),
                attribute_truth,
                schedule_kind: schedule.clone(),
                trips_per_day: trips,
            }
        })
        .collect()
}

/// Where a person goes on an outing: (base, destination).
fn outing_floors(profile: &ResidentProfile, spec: &BuildingSpec, rng: &mut impl Rng) -> (u32, u32) {
    match profile.schedule_kind {
        ScheduleKind::OfficeHours | ScheduleKind::Nocturnal => (1, profile.home_floor.max(2)),
        _ if profile.home_floor == 1 => (1, rng.random_range(2..=spec.floor_count)),
        _ => (profile.home_floor, 1),
    }
}

fn generate_outings(
    spec: &BuildingSpec,
    person: usize,
    profile: &ResidentProfile,
    active: impl Fn(NaiveDate) -> bool,
    seed: u64,
) -> Vec<Outing> {
    let mut rng = seed::rng(seed, STREAM_TRIPS, profile.resident_id);
    let poisson = (profile.trips_per_day > 0.0).then(|| Poisson::new(profile.trips_per_day).expect("positive mean"));
    let mut out = Vec::new();
    let mut busy_until = i64::MIN;
    for date in spec.dates() {
        // Draws happen every day so inactive days do not shift later ones.
        let n = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let kind = DayKind::of(date);
        let table = profile.schedule_kind.table(kind);
        let (lo, hi) = profile.schedule_kind.dwell_hours(kind);
        let mut day: Vec<(i64, i64)> = (0..n)
            .map(|_| {
                let hour = table
                    .as_ref()
                    .and_then(|w| WeightedIndex::new(w).ok())
                    .map(|w| w.sample(&mut rng) as i64);
                let offset = rng.random_range(0..3600);
                let dwell = rng.random_range(lo..=hi);
                let depart = hour.map(|h| midnight(date) + h * 3600 + offset);
                (depart, (dwell * 3600.0) as i64)
            })
            .filter_map(|(d, dwell)| d.map(|d| (d, d + dwell.max(60))))
            .collect();
        let floors: Vec<(u32, u32)> = day.iter().map(|_| outing_floors(profile, spec, &mut rng)).collect();
        if !active(date) {
            continue;
        }
        day.sort_unstable();
        for ((depart, ret), (base, dest)) in day.into_iter().zip(floors) {
            if depart < busy_until + MIN_GAP_SECS || ret > spec.horizon_end() - HORIZON_MARGIN_SECS {
                continue;
            }
            busy_until = ret;
            out.push(Outing {
                person,
                base_floor: base,
                dest_floor: dest,
                depart,
                ret,
            });
        }
    }
    out
}

/// Runs the full generator: residents' routine trips plus every plan's extras.
pub fn simulate(
    spec: &BuildingSpec,
    population: &[ResidentProfile],
    plans: &[AnomalyPlan],
    seed: u64,
) -> Result<Simulation> {
    spec.validate()?;
    for (i, plan) in plans.iter().enumerate() {
        plan.validate(spec, i)?;
    }
    let mut people = population.to_vec();
    let mut owner: Vec<Option<usize>> = vec![None; people.len()];
    for (i, plan) in plans.iter().enumerate() {
        let extra = plan_people(spec, population, plan, i, seed);
        owner.extend(std::iter::repeat_n(Some(i), extra.len()));
        people.extend(extra);
    }
    let mut outings = Vec::new();
    for (idx, profile) in people.iter().enumerate() {
        let plan = owner[idx].map(|i| &plans[i]);
        outings.extend(generate_outings(
            spec,
            idx,
            profile,
            |d| plan.is_none_or(|p| p.active_on(d)),
            seed,
        ));
    }
    let mut sim = run_outings(spec, &people, &outings, seed)?;
    for plan in plans {
        for date in spec.dates().filter(|d| plan.active_on(*d)) {
            sim.truth.ledger.entry(plan.target.on(date)).or_default().anomalous = true;
        }
        sim.truth.planted.push(PlantedAnomaly {
            kind: plan.kind,
            target: plan.target.clone(),
        });
    }
    Ok(sim)
}

#[derive(Debug, Clone, Copy)]
struct Ride {
    request: i64,
    person: usize,
    origin: u32,
    dest: u32,
}

impl Ride {
    fn up(&self) -> bool {
        self.dest > self.origin
    }
}

/// Plays explicit outings through the elevators. Each elevator serves its
/// queue in sweeps: the earliest waiting ride fixes the direction, every
/// same-direction ride requested within the batch window joins up to
/// capacity, and the rest spill to later sweeps. A sweep that would cross
/// midnight starts at the next midnight instead.
pub fn run_outings(
    spec: &BuildingSpec,
    people: &[ResidentProfile],
    outings: &[Outing],
    seed: u64,
) -> Result<Simulation> {
    spec.validate()?;
    let elevator_ids = spec.elevator_ids();
    let mut queues: Vec<Vec<Ride>> = vec![Vec::new(); elevator_ids.len()];
    for o in outings {
        let person = people
            .get(o.person)
            .ok_or_else(|| Error::config("outing.person", format!("no person {}", o.person)))?;
        for f in [o.base_floor, o.dest_floor] {
            if f == 0 || f > spec.floor_count {
                return Err(Error::config(
                    "outing.floor",
                    format!("floor {f} outside 1..={}", spec.floor_count),
                ));
            }
        }
        if o.base_floor == o.dest_floor || o.ret <= o.depart {
            return Err(Error::config("outing", "needs two distinct floors and a later return"));
        }
        let q = queues
            .get_mut(person.elevator as usize)
            .ok_or_else(|| Error::config("profile.elevator", format!("no elevator {}", person.elevator)))?;
        q.push(Ride {
            request: o.depart,
            person: o.person,
            origin: o.base_floor,
            dest: o.dest_floor,
        });
        q.push(Ride {
            request: o.ret,
            person: o.person,
            origin: o.dest_floor,
            dest: o.base_floor,
        });
    }

    let mut stops: Vec<(StopEvent, StopTruth)> = Vec::new();
    for (e, mut rides) in queues.into_iter().enumerate() {
        rides.sort_by_key(|r| (r.request, people[r.person].resident_id, r.origin));
        let mut camera = seed::rng(seed, STREAM_CAMERA, e as u64);
        run_elevator(spec, &elevator_ids[e], people, rides.into(), &mut camera, &mut stops);
    }
    stops.sort_by(|(a, _), (b, _)| (a.timestamp, &a.elevator_id).cmp(&(b.timestamp, &b.elevator_id)));

    let mut truth = GroundTruth::default();
    for (ev, st) in &stops {
        let key = ev.floor_key().on(ev.date());
        let counts = truth.ledger.entry(key).or_default();
        let boarded = st.boarded().len() as u32;
        let alighted = st.alighted().len() as u32;
        counts.boarded += boarded;
        counts.alighted += alighted;
        counts.hour_histogram[ev.hour()] += boarded + alighted;
    }
    let (events, stop_truth) = stops.into_iter().unzip();
    truth.stops = stop_truth;
    Ok(Simulation { events, truth })
}

fn run_elevator(
    spec: &BuildingSpec,
    elevator_id: &str,
    people: &[ResidentProfile],
    mut pending: VecDeque<Ride>,
    camera: &mut impl Rng,
    out: &mut Vec<(StopEvent, StopTruth)>,
) {
    let mut free_at = i64::MIN;
    let mut position = 1u32;
    while let Some(head) = pending.front().copied() {
        let start = head.request.max(free_at);
        let up = head.up();
        let mut batch = Vec::new();
        let mut rest = VecDeque::with_capacity(pending.len());
        for r in pending.drain(..) {
            if batch.len() < spec.capacity && r.up() == up && r.request <= start.max(head.request + BATCH_WINDOW_SECS) {
                batch.push(r);
            } else {
                rest.push_back(r);
            }
        }
        pending = rest;

        let mut floors: Vec<u32> = batch.iter().flat_map(|r| [r.origin, r.dest]).collect();
        floors.sort_unstable();
        floors.dedup();
        if !up {
            floors.reverse();
        }
        let mut arrivals = Vec::with_capacity(floors.len());
        let mut t = 0i64;
        let mut at = position;
        for &f in &floors {
            t += i64::from(at.abs_diff(f)) * TRAVEL_SECS_PER_FLOOR;
            arrivals.push(t);
            t += DWELL_SECS;
            at = f;
        }
        let mut start = start;
        if (start + t).div_euclid(SECONDS_PER_DAY) != start.div_euclid(SECONDS_PER_DAY) {
            start = (start.div_euclid(SECONDS_PER_DAY) + 1) * SECONDS_PER_DAY;
        }

        let mut riders: Vec<usize> = Vec::new();
        for (&floor, &arrive) in floors.iter().zip(&arrivals) {
            let before = riders.clone();
            riders.retain(|&p| !batch.iter().any(|r| r.person == p && r.dest == floor));
            riders.extend(batch.iter().filter(|r| r.origin == floor).map(|r| r.person));
            let mut pre_ids = before;
            let mut post_ids = riders.clone();
            pre_ids.shuffle(camera);
            post_ids.shuffle(camera);
            let snap = |ids: &[usize], rng: &mut _| -> Vec<PassengerObservation> {
                ids.iter()
                    .map(|&p| observe(&people[p], spec.noise_sigma, spec.attr_noise, rng))
                    .collect()
            };
            let pre_obs = snap(&pre_ids, camera);
            let post_obs = snap(&post_ids, camera);
            out.push((
                StopEvent {
                    estate_id: spec.estate_id.clone(),
                    elevator_id: elevator_id.to_string(),
                    floor,
                    timestamp: start + arrive,
                    pre_obs,
                    post_obs,
                },
                StopTruth {
                    pre_ids: pre_ids.iter().map(|&p| people[p].resident_id).collect(),
                    post_ids: post_ids.iter().map(|&p| people[p].resident_id).collect(),
                },
            ));
        }
        debug_assert!(riders.is_empty());
        free_at = start + t;
        position = at;
    }
}

/// Parses a simulator config file (TOML): a `[building]` table plus any
/// number of `[[anomaly]]` tables.
pub fn parse_spec_file(text: &str) -> Result<(BuildingSpec, Vec<AnomalyPlan>)> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct File {
        building: BuildingSpec,
        #[serde(default)]
        anomaly: Vec<AnomalyPlan>,
    }
    let file: File = toml::from_str(text).map_err(|e| Error::config("spec file", e.to_string()))?;
    file.building.validate()?;
    Ok((file.building, file.anomaly))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> BuildingSpec {
        let mut spec = BuildingSpec::new("est", 1, 5, 4);
        spec.embedding_dim = 16;
        spec
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn population_size_and_norms() {
        let pop = generate_building(&small_spec(), 1).unwrap();
        assert_eq!(pop.len(), 20);
        for p in &pop {
            assert!((norm(&p.embedding_centroid) - 1.0).abs() < 1e-9);
            assert!(p.attribute_truth.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }

    #[test]
    fn population_is_seed_deterministic() {
        let spec = small_spec();
        let a = generate_building(&spec, 1).unwrap();
        let b = generate_building(&spec, 1).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_building(&spec, 2).unwrap();
        assert!(a
            .iter()
            .zip(&c)
            .any(|(x, y)| x.embedding_centroid != y.embedding_centroid));
    }

    #[test]
    fn invalid_spec_names_the_field() {
        let mut spec = small_spec();
        spec.floor_count = 1;
        let err = generate_building(&spec, 1).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "floor_count"),
            "{err}"
        );
        let mut spec = small_spec();
        spec.noise_sigma = -0.1;
        assert!(matches!(generate_building(&spec, 1), Err(Error::Config { field, .. }) if field == "noise_sigma"));
        let mut spec = small_spec();
        spec.embedding_dim = 1;
        assert!(matches!(generate_building(&spec, 1), Err(Error::Config { field, .. }) if field == "embedding_dim"));
    }

    #[test]
    fn zero_sigma_observes_the_centroid() {
        let pop = generate_building(&small_spec(), 3).unwrap();
        let obs = observe_seeded(&pop[0], 0.0, 0.05, 9);
        assert_eq!(obs.embedding, pop[0].embedding_centroid);
        obs.validate().unwrap();
    }

    #[test]
    fn orthogonal_residents_are_root_two_apart() {
        let mut pop = generate_building(&small_spec(), 3).unwrap();
        pop[0].embedding_centroid = (0..16).map(|i| f64::from(u8::from(i == 0))).collect();
        pop[1].embedding_centroid = (0..16).map(|i| f64::from(u8::from(i == 1))).collect();
        let a = observe_seeded(&pop[0], 0.0, 0.0, 1);
        let b = observe_seeded(&pop[1], 0.0, 0.0, 1);
        let d = a
            .embedding
            .iter()
            .zip(&b.embedding)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn noisy_observations_stay_normalized() {
        let mut spec = small_spec();
        spec.embedding_dim = 128;
        let pop = generate_building(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in &pop {
            let o = observe(p, 0.3, 0.2, &mut rng);
            assert!((norm(&o.embedding) - 1.0).abs() < 1e-6);
            o.validate().unwrap();
        }
    }

    #[test]
    fn zero_residents_produce_no_events() {
        let mut spec = small_spec();
        spec.residents_per_floor = 0;
        let pop = generate_building(&spec, 1).unwrap();
        let sim = simulate(&spec, &pop, &[], 1).unwrap();
        assert!(sim.events.is_empty());
        assert!(sim.truth.ledger.is_empty());
    }

    #[test]
    fn scripted_round_trip_boards_then_alights_at_home() {
        let mut spec = small_spec();
        spec.residents_per_floor = 1;
        spec.day_count = 1;
        let pop: Vec<_> = generate_building(&spec, 1)
            .unwrap()
            .into_iter()
            .filter(|p| p.home_floor == 4)
            .collect();
        let day = midnight(spec.start_date);
        let outing = Outing {
            person: 0,
            base_floor: 4,
            dest_floor: 1,
            depart: day + 8 * 3600,
            ret: day + 18 * 3600,
        };
        let sim = run_outings(&spec, &pop, &[outing], 7).unwrap();
        let id = pop[0].resident_id;
        let home: Vec<_> = sim
            .events
            .iter()
            .zip(&sim.truth.stops)
            .filter(|(e, _)| e.floor == 4)
            .collect();
        assert_eq!(home.len(), 2);
        let boarding: Vec<_> = home
            .iter()
            .filter(|(_, t)| t.post_ids.contains(&id) && !t.pre_ids.contains(&id))
            .collect();
        let alighting: Vec<_> = home
            .iter()
            .filter(|(_, t)| t.pre_ids.contains(&id) && !t.post_ids.contains(&id))
            .collect();
        assert_eq!(boarding.len(), 1);
        assert_eq!(alighting.len(), 1);
        assert!(boarding[0].0.timestamp < alighting[0].0.timestamp);
        assert_eq!(sim.events.len(), 4);
    }

    #[test]
    fn rejects_plan_on_missing_floor() {
        let spec = small_spec();
        let pop = generate_building(&spec, 1).unwrap();
        let plan = AnomalyPlan::new(AnomalyKind::OvercrowdedFloor, FloorKey::new("est", "E01", 9), 5.0);
        let err = simulate(&spec, &pop, &[plan], 1).unwrap_err();
        assert!(
            matches!(err, Error::Config { ref field, .. } if field == "anomaly[0].target.floor"),
            "{err}"
        );
        let plan = AnomalyPlan::new(AnomalyKind::OvercrowdedFloor, FloorKey::new("est", "E01", 3), 1.0);
        assert!(simulate(&spec, &pop, &[plan], 1).is_err());
    }

    #[test]
    fn events_are_time_ordered_and_within_capacity() {
        let mut spec = BuildingSpec::new("est", 2, 8, 12);
        spec.embedding_dim = 8;
        spec.capacity = 4;
        spec.trips_per_day = 2.0;
        spec.day_count = 3;
        let pop = generate_building(&spec, 11).unwrap();
        let sim = simulate(&spec, &pop, &[], 11).unwrap();
        assert!(!sim.events.is_empty());
        assert!(sim.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        for ev in &sim.events {
            ev.validate(spec.capacity).unwrap();
        }
    }

    #[test]
    fn parses_spec_file() {
        let (spec, plans) = parse_spec_file(
            r#"
            [building]
            estate_id = "oak"
            elevator_count = 2
            floor_count = 10
            residents_per_floor = 4
            noise_sigma = 0.05

            [[anomaly]]
            kind = "overcrowded_floor"
            target = { estate = "oak", elevator = "E01", floor = 9 }
            magnitude = 5.0
            active_days = ["2024-01-03"]
            "#,
        )
        .unwrap();
        assert_eq!(spec.embedding_dim, 128);
        assert_eq!(spec.day_count, 15);
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].active_days.as_ref().unwrap().len(), 1);
        assert!(
            parse_spec_file("[building]\nestate_id='x'\nelevator_count=1\nfloor_count=1\nresidents_per_floor=1")
                .is_err()
        );
        assert!(parse_spec_file("[building]\nbogus=1").is_err());
    }
}
