//! Identifiers shared by every stage: floor keys and day keys.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of attribute slots emitted per passenger (classification + score pairs).
pub const ATTR_SLOTS: usize = 22;
/// Hour-of-day histogram bins.
pub const HOURS: usize = 24;

/// Estate and elevator identifiers are restricted to `[A-Za-z0-9_.-]` so that
/// keys can be joined with `:` and embedded in URLs unescaped.
pub fn validate_ident(field: &str, value: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    if let Some(c) = value
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')))
    {
        return Err(Error::config(
            field,
            format!("character {c:?} not allowed in identifier {value:?}"),
        ));
    }
    Ok(())
}

/// One (estate, elevator, floor) detection unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FloorKey {
    pub estate: String,
    pub elevator: String,
    pub floor: u32,
}

impl FloorKey {
    pub fn new(estate: impl Into<String>, elevator: impl Into<String>, floor: u32) -> Self {
        FloorKey {
            estate: estate.into(),
            elevator: elevator.into(),
            floor,
        }
    }

    pub fn on(&self, date: NaiveDate) -> DayKey {
        DayKey {
            floor: self.clone(),
            date,
        }
    }
}

impl fmt::Display for FloorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.estate, self.elevator, self.floor)
    }
}

impl FromStr for FloorKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let (Some(estate), Some(elevator), Some(floor), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::data(format!("malformed floor key {s:?}")));
        };
        validate_ident("estate", estate)?;
        validate_ident("elevator", elevator)?;
        let floor = floor
            .parse()
            .map_err(|_| Error::data(format!("malformed floor in key {s:?}")))?;
        Ok(FloorKey::new(estate, elevator, floor))
    }
}

/// A floor key on one civil date.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DayKey {
    pub floor: FloorKey,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayKind {
    Weekday,
    Weekend,
}

impl DayKind {
    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayKind::Weekend,
            _ => DayKind::Weekday,
        }
    }
}
