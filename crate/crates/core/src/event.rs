//! Encoder outputs and stop events: the data the elevator uploads per stop.

use chrono::{DateTime, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::key::{FloorKey, ATTR_SLOTS};

/// Default elevator capacity (max passengers per snapshot).
pub const DEFAULT_CAPACITY: usize = 20;

/// Tolerance on the unit-norm contract for stored embeddings.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// One segmented passenger in one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassengerObservation {
    pub embedding: Vec<f64>,
    pub attr_class: [u8; ATTR_SLOTS],
    pub attr_score: [f64; ATTR_SLOTS],
}

impl PassengerObservation {
    /// Builds an observation from scores; classes follow the 0.5 threshold rule.
    pub fn from_scores(embedding: Vec<f64>, attr_score: [f64; ATTR_SLOTS]) -> Self {
        let attr_class = attr_score.map(|s| u8::from(s >= 0.5));
        PassengerObservation {
            embedding,
            attr_class,
            attr_score,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::data(format!("embedding norm {norm} is not 1")));
        }
        if let Some(s) = self.attr_score.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::data(format!("attribute score {s} outside [0, 1]")));
        }
        if let Some(c) = self.attr_class.iter().find(|c| **c > 1) {
            return Err(Error::data(format!("attribute class {c} is not a bit")));
        }
        Ok(())
    }
}

/// One elevator stop: the snapshot before the doors open and the one after
/// the car leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopEvent {
    pub estate_id: String,
    pub elevator_id: String,
    pub floor: u32,
    #[serde(with = "iso_seconds")]
    pub timestamp: i64,
    pub pre_obs: Vec<PassengerObservation>,
    pub post_obs: Vec<PassengerObservation>,
}

impl StopEvent {
    pub fn floor_key(&self) -> FloorKey {
        FloorKey::new(&self.estate_id, &self.elevator_id, self.floor)
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.timestamp, 0).unwrap_or_default()
    }

    /// Civil date of the stop. Timestamps are UTC and the UTC calendar is the
    /// local calendar for aggregation.
    pub fn date(&self) -> NaiveDate {
        self.datetime().date_naive()
    }

    pub fn hour(&self) -> usize {
        self.datetime().hour() as usize
    }

    pub fn validate(&self, capacity: usize) -> Result<()> {
        crate::key::validate_ident("estate_id", &self.estate_id)?;
        crate::key::validate_ident("elevator_id", &self.elevator_id)?;
        if self.floor == 0 {
            return Err(Error::data("floor numbers start at 1"));
        }
        if DateTime::from_timestamp(self.timestamp, 0).is_none() {
            return Err(Error::data(format!("timestamp {} out of range", self.timestamp)));
        }
        for (side, obs) in [("pre_obs", &self.pre_obs), ("post_obs", &self.post_obs)] {
            if obs.len() > capacity {
                return Err(Error::data(format!(
                    "{side} has {} passengers, capacity is {capacity}",
                    obs.len()
                )));
            }
            for (i, o) in obs.iter().enumerate() {
                o.validate().map_err(|e| Error::data(format!("{side}[{i}]: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Unix seconds on the wire as ISO-8601 UTC (`2024-03-04T08:10:00Z`).
pub mod iso_seconds {
    use chrono::{DateTime, SecondsFormat};
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn format(ts: i64) -> String {
        DateTime::from_timestamp(ts, 0)
            .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
            .unwrap_or_default()
    }

    pub fn serialize<S: Serializer>(ts: &i64, s: S) -> Result<S::Ok, S::Error> {
        if DateTime::from_timestamp(*ts, 0).is_none() {
            return Err(serde::ser::Error::custom("timestamp out of range"));
        }
        s.serialize_str(&format(*ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<i64, D::Error> {
        let raw = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        let dt = DateTime::parse_from_rfc3339(&raw).map_err(de::Error::custom)?;
        if dt.timestamp_subsec_nanos() != 0 {
            return Err(de::Error::custom("sub-second timestamps are not supported"));
        }
        Ok(dt.timestamp())
    }
}
