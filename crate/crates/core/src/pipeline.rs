//! Two-round hierarchical detection.
//!
//! Excluded keys are dropped first. Round 1 scores every remaining key on
//! flow statistics and keeps the top `contamination_r1` fraction. Round 2
//! builds attribute features only for those keys, fits a second forest on
//! them, and emits the top `contamination_r2` fraction.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{build_r1, build_r2, window_select, FeatureVectorR1, FeatureVectorR2, DEFAULT_WINDOW_DAYS};
use crate::flowrec::{FlowLedger, DEFAULT_MATCH_THRESHOLD};
use crate::flowsim::GroundTruth;
use crate::iforest::{flag_count, ForestParams, IsolationForest};
use crate::key::FloorKey;
use crate::review::{is_excluded, ExclusionEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub window_days: u32,
    pub contamination_r1: f64,
    pub contamination_r2: f64,
    pub match_threshold: f64,
    pub forest_r1: ForestParams,
    pub forest_r2: ForestParams,
    pub end_date: NaiveDate,
}

impl RunConfig {
    pub fn new(end_date: NaiveDate) -> Self {
        RunConfig {
            window_days: DEFAULT_WINDOW_DAYS,
            contamination_r1: 0.2,
            contamination_r2: 0.01,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            forest_r1: ForestParams::with_seed(1),
            forest_r2: ForestParams::with_seed(2),
            end_date,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_days == 0 {
            return Err(Error::config("window_days", "must be at least 1"));
        }
        let (c1, c2) = (self.contamination_r1, self.contamination_r2);
        if !(c1 > 0.0 && c1 < 1.0) {
            return Err(Error::config("contamination_r1", "must lie in (0, 1)"));
        }
        if !(c2 > 0.0 && c2 <= c1) {
            return Err(Error::config("contamination_r2", "must lie in (0, contamination_r1]"));
        }
        if !(self.match_threshold > 0.0) {
            return Err(Error::config("match_threshold", "must be positive"));
        }
        self.forest_r1.validate()?;
        self.forest_r2.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    #[default]
    Open,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub id: String,
    pub key: FloorKey,
    pub r1_score: f64,
    pub r2_score: f64,
    pub feature_r1: FeatureVectorR1,
    pub feature_r2: FeatureVectorR2,
    pub window_end: NaiveDate,
    #[serde(default)]
    pub status: RecordStatus,
}

pub fn record_id(key: &FloorKey, window_end: NaiveDate) -> String {
    format!("{key}@{window_end}")
}

/// Output of one run plus the stage sizes.
#[derive(Debug, Clone, Default)]
pub struct Detection {
    pub records: Vec<AnomalyRecord>,
    /// Keys surviving exclusion (round-1 population).
    pub round1_keys: usize,
    /// Keys flagged in round 1 (round-2 population).
    pub round2_keys: usize,
}

/// Exact emitted count for `n` keys: `ceil(c2 * ceil(c1 * n))`, or zero when
/// either round has fewer than two points to fit on.
pub fn expected_emissions(n: usize, c1: f64, c2: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let k1 = flag_count(n, c1);
    if k1 < 2 {
        return 0;
    }
    flag_count(k1, c2)
}

pub fn run(ledger: &FlowLedger, config: &RunConfig, exclusions: &[ExclusionEntry]) -> Result<Detection> {
    config.validate()?;
    let window = window_select(ledger, config.end_date, config.window_days)?;
    let keys: Vec<FloorKey> = window.keys().filter(|k| !is_excluded(k, exclusions)).cloned().collect();
    let mut out = Detection {
        round1_keys: keys.len(),
        ..Detection::default()
    };
    if keys.len() < 2 {
        if !keys.is_empty() {
            tracing::warn!(keys = keys.len(), "too few keys for round 1; nothing emitted");
        }
        return Ok(out);
    }

    let r1: Vec<FeatureVectorR1> = keys.par_iter().map(|k| build_r1(&window, k)).collect();
    let data1: Vec<Vec<f64>> = r1.iter().map(|f| f.values().to_vec()).collect();
    let forest1 = IsolationForest::fit(&data1, &config.forest_r1)?;
    let report1 = forest1.report(&data1, config.contamination_r1)?;
    let passed: Vec<usize> = (0..keys.len()).filter(|&i| report1.flags[i]).collect();
    out.round2_keys = passed.len();
    if passed.len() < 2 {
        tracing::warn!(
            flagged = passed.len(),
            "fewer than 2 keys passed round 1; nothing emitted"
        );
        return Ok(out);
    }

    let r2: Vec<FeatureVectorR2> = passed
        .par_iter()
        .map(|&i| build_r2(&window, &keys[i], &r1[i]))
        .collect();
    let data2: Vec<Vec<f64>> = r2.iter().map(|f| f.values().to_vec()).collect();
    let forest2 = IsolationForest::fit(&data2, &config.forest_r2)?;
    let report2 = forest2.report(&data2, config.contamination_r2)?;

    let mut records: Vec<AnomalyRecord> = passed
        .iter()
        .enumerate()
        .filter(|(j, _)| report2.flags[*j])
        .map(|(j, &i)| AnomalyRecord {
            id: record_id(&keys[i], config.end_date),
            key: keys[i].clone(),
            r1_score: report1.scores[i],
            r2_score: report2.scores[j],
            feature_r1: r1[i],
            feature_r2: r2[j],
            window_end: config.end_date,
            status: RecordStatus::Open,
        })
        .collect();
    records.sort_by(|a, b| b.r2_score.total_cmp(&a.r2_score).then_with(|| a.key.cmp(&b.key)));
    out.records = records;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub planted: usize,
    pub emitted: usize,
    pub hits: usize,
    /// `None` when nothing was planted.
    pub recall: Option<f64>,
    /// `None` when nothing was emitted.
    pub precision: Option<f64>,
}

/// Scores emitted records against the simulator's planted anomalies.
pub fn evaluate(records: &[AnomalyRecord], truth: &GroundTruth) -> Evaluation {
    let planted = truth.planted_keys();
    let emitted: BTreeSet<&FloorKey> = records.iter().map(|r| &r.key).collect();
    let hits = emitted.iter().filter(|k| planted.contains(**k)).count();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Evaluation {
        planted: planted.len(),
        emitted: emitted.len(),
        hits,
        recall: ratio(hits, planted.len()),
        precision: ratio(hits, emitted.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FloorDayAggregate;
    use crate::flowsim::{AnomalyKind, PlantedAnomaly};
    use crate::review::{ExclusionScope, Reason, ScopeKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, d).unwrap()
    }

    /// Synthetic ledger: `n` keys with Poisson-ish flow around 20 per day;
    /// key 0 of elevator E000 has 10x flow.
    fn ledger(n: usize, seed: u64) -> FlowLedger {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for i in 0..n {
            let key = FloorKey::new("est", format!("E{:03}", i / 10), (i % 10) as u32 + 1);
            for d in 1..=15 {
                let mut a = FloorDayAggregate::empty(key.on(date(d)));
                let base = if i == 0 { 200 } else { 20 };
                a.in_count = base / 2 + rng.random_range(0..5);
                a.out_count = base / 2 + rng.random_range(0..5);
                a.passenger_count = a.in_count + a.out_count;
                a.hour_histogram[8] = a.in_count;
                a.hour_histogram[18] = a.out_count;
                for s in 0..22 {
                    a.attr_score_sum[s] = 0.3 * f64::from(a.passenger_count);
                }
                rows.push(a);
            }
        }
        rows.into_iter().collect()
    }

    #[test]
    fn count_cascade_on_thousand_keys() {
        let led = ledger(1000, 1);
        let det = run(&led, &RunConfig::new(date(15)), &[]).unwrap();
        assert_eq!(det.round1_keys, 1000);
        assert_eq!(det.round2_keys, 200);
        assert_eq!(det.records.len(), 2);
        assert_eq!(expected_emissions(1000, 0.2, 0.01), 2);
        assert!(det.records.windows(2).all(|w| w[0].r2_score >= w[1].r2_score));
    }

    #[test]
    fn exclusion_removes_top_key() {
        let led = ledger(100, 2);
        let mut cfg = RunConfig::new(date(15));
        cfg.contamination_r2 = 0.1;
        let det = run(&led, &cfg, &[]).unwrap();
        let top = det.records[0].key.clone();
        assert_eq!(top, FloorKey::new("est", "E000", 1));
        let ex = ExclusionEntry {
            id: 1,
            scope: ExclusionScope::for_key(&top, ScopeKind::Floor),
            reason: Reason::OfficeBuilding,
            created_at: 0,
            source_record: None,
        };
        let again = run(&led, &cfg, &[ex]).unwrap();
        assert_eq!(again.round1_keys, 99);
        assert!(again.records.iter().all(|r| r.key != top));
        assert_eq!(again.records.len(), expected_emissions(99, 0.2, 0.1));
    }

    #[test]
    fn degenerate_inputs_emit_nothing() {
        let cfg = RunConfig::new(date(15));
        assert!(run(&FlowLedger::new(), &cfg, &[]).unwrap().records.is_empty());
        // 5 keys -> 1 flagged in round 1 -> round 2 cannot fit.
        let det = run(&ledger(5, 3), &cfg, &[]).unwrap();
        assert_eq!(det.round2_keys, 1);
        assert!(det.records.is_empty());
        assert_eq!(expected_emissions(5, 0.2, 0.01), 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig::new(date(15));
        cfg.contamination_r2 = 0.3;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "contamination_r2"));
        cfg.contamination_r2 = 0.01;
        cfg.contamination_r1 = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn idempotent_runs() {
        let led = ledger(300, 4);
        let cfg = RunConfig::new(date(15));
        let a = run(&led, &cfg, &[]).unwrap().records;
        let b = run(&led, &cfg, &[]).unwrap().records;
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_rules() {
        let led = ledger(100, 5);
        let mut cfg = RunConfig::new(date(15));
        cfg.contamination_r2 = 0.1;
        let recs = run(&led, &cfg, &[]).unwrap().records;
        assert_eq!(recs.len(), 2);

        let none = evaluate(&recs, &GroundTruth::default());
        assert_eq!(none.recall, None);
        assert_eq!(none.precision, Some(0.0));

        let truth = GroundTruth {
            planted: recs
                .iter()
                .map(|r| PlantedAnomaly {
                    kind: AnomalyKind::OvercrowdedFloor,
                    target: r.key.clone(),
                })
                .collect(),
            ..GroundTruth::default()
        };
        let all = evaluate(&recs, &truth);
        assert_eq!(all.recall, Some(1.0));
        assert_eq!(all.precision, Some(1.0));
        assert_eq!(evaluate(&[], &truth).precision, None);
    }
}
