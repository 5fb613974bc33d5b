//! Elevator passenger-flow reconstruction and anomaly capture.
//!
//! The crate covers the whole offline path:
//!
//! - [`flowsim`]: seeded building simulator producing stop events and a
//!   ground-truth sidecar,
//! - [`flowrec`]: per-stop passenger matching and the daily flow ledger,
//! - [`features`]: 13-value flow features and 81-value attribute features,
//! - [`iforest`]: isolation forest and contamination thresholding,
//! - [`pipeline`]: the two-round detection run and planted-anomaly evaluation,
//! - [`review`]: review verdicts and the journaled exclusion store,
//! - [`store`]: file formats and trip-log ingestion.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod event;
pub mod features;
pub mod flowrec;
pub mod flowsim;
pub mod iforest;
pub mod key;
pub mod pipeline;
pub mod review;
pub mod seed;
pub mod store;

pub use error::{Error, Result};
pub use event::{PassengerObservation, StopEvent};
pub use key::{DayKey, DayKind, FloorKey};
