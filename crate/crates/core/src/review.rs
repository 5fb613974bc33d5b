//! Review verdicts and the exclusion store.
//!
//! All mutations go through a single append-only journal (one JSON object per
//! line, fsynced before the call returns). Opening a store replays the
//! journal, so anything acknowledged survives a restart. Exclusions are never
//! rewritten; deleting one appends a tombstone.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::iso_seconds;
use crate::key::{validate_ident, FloorKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    SuspectedHazard,
    NoHazard,
    DataException,
}

/// Review outcome categories, one per row of the review results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    NeedsPropertyManagerCheck,
    SensorMalfunction,
    Decoration,
    DormitoryHotel,
    ShoppingEntertainment,
    OfficeBuilding,
    CateringInApartment,
    OvercrowdedResidence,
}

impl Reason {
    pub const ALL: [Reason; 8] = [
        Reason::NeedsPropertyManagerCheck,
        Reason::SensorMalfunction,
        Reason::Decoration,
        Reason::DormitoryHotel,
        Reason::ShoppingEntertainment,
        Reason::OfficeBuilding,
        Reason::CateringInApartment,
        Reason::OvercrowdedResidence,
    ];

    /// Reasons describing activity without a safety hazard (or bad data).
    pub fn is_benign(self) -> bool {
        matches!(
            self,
            Reason::SensorMalfunction
                | Reason::Decoration
                | Reason::DormitoryHotel
                | Reason::ShoppingEntertainment
                | Reason::OfficeBuilding
        )
    }

    pub fn description(self) -> &'static str {
        match self {
            Reason::NeedsPropertyManagerCheck => "something different; needs a property manager check",
            Reason::SensorMalfunction => "caused by sensor malfunction",
            Reason::Decoration => "apartment under decoration",
            Reason::DormitoryHotel => "dormitory or hotel",
            Reason::ShoppingEntertainment => "shopping mall or entertainment venue",
            Reason::OfficeBuilding => "office building",
            Reason::CateringInApartment => "catering service running in an apartment",
            Reason::OvercrowdedResidence => "overcrowded residence",
        }
    }
}

impl Verdict {
    pub fn allows(self, reason: Reason) -> bool {
        match self {
            Verdict::SuspectedHazard => !reason.is_benign(),
            Verdict::NoHazard | Verdict::DataException => reason.is_benign(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    #[default]
    Floor,
    Estate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum ExclusionScope {
    Floor {
        estate: String,
        elevator: String,
        floor: u32,
    },
    Estate {
        estate: String,
    },
}

impl ExclusionScope {
    pub fn for_key(key: &FloorKey, kind: ScopeKind) -> Self {
        match kind {
            ScopeKind::Floor => ExclusionScope::Floor {
                estate: key.estate.clone(),
                elevator: key.elevator.clone(),
                floor: key.floor,
            },
            ScopeKind::Estate => ExclusionScope::Estate {
                estate: key.estate.clone(),
            },
        }
    }

    pub fn matches(&self, key: &FloorKey) -> bool {
        match self {
            ExclusionScope::Floor {
                estate,
                elevator,
                floor,
            } => *estate == key.estate && *elevator == key.elevator && *floor == key.floor,
            ExclusionScope::Estate { estate } => *estate == key.estate,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ExclusionScope::Floor {
                estate,
                elevator,
                floor,
            } => {
                validate_ident("estate", estate)?;
                validate_ident("elevator", elevator)?;
                if *floor == 0 {
                    return Err(Error::config("floor", "floor numbers start at 1"));
                }
            }
            ExclusionScope::Estate { estate } => validate_ident("estate", estate)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub id: u64,
    #[serde(flatten)]
    pub scope: ExclusionScope,
    pub reason: Reason,
    #[serde(with = "iso_seconds")]
    pub created_at: i64,
    /// Anomaly record whose review created this entry, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_record: Option<String>,
}

/// Checks a key against a set of exclusions.
pub fn is_excluded(key: &FloorKey, exclusions: &[ExclusionEntry]) -> bool {
    exclusions.iter().any(|e| e.scope.matches(key))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewLabel {
    pub record_id: String,
    pub verdict: Verdict,
    pub reason: Reason,
    #[serde(default)]
    pub note: String,
    pub reviewer_id: String,
    #[serde(with = "iso_seconds")]
    pub reviewed_at: i64,
    /// How widely a resulting exclusion applies.
    #[serde(default)]
    pub scope: ScopeKind,
}

impl ReviewLabel {
    pub fn validate(&self) -> Result<()> {
        if !self.verdict.allows(self.reason) {
            return Err(Error::config(
                "reason",
                format!("{:?} is not a valid reason for verdict {:?}", self.reason, self.verdict),
            ));
        }
        if self.reviewer_id.trim().is_empty() {
            return Err(Error::config("reviewer_id", "must not be empty"));
        }
        Ok(())
    }

    /// Whether this verdict removes the key from future runs.
    pub fn creates_exclusion(&self) -> bool {
        self.verdict != Verdict::SuspectedHazard && self.reason.is_benign()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum JournalEntry {
    Label {
        label: ReviewLabel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exclusion: Option<ExclusionEntry>,
    },
    Exclude {
        entry: ExclusionEntry,
    },
    Tombstone {
        id: u64,
        #[serde(with = "iso_seconds")]
        at: i64,
    },
}

/// Replayed state of the review journal. Not thread-safe by itself; the
/// service wraps it in a single-writer lock.
#[derive(Debug)]
pub struct ReviewStore {
    path: PathBuf,
    labels: BTreeMap<String, ReviewLabel>,
    history: Vec<ExclusionEntry>,
    deleted: BTreeMap<u64, i64>,
    next_id: u64,
}

impl ReviewStore {
    /// Opens (or creates) the journal at `path` and replays it. A torn final
    /// line without a newline is an unacknowledged write and is dropped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = ReviewStore {
            path: path.clone(),
            labels: BTreeMap::new(),
            history: Vec::new(),
            deleted: BTreeMap::new(),
            next_id: 1,
        };
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(store),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut valid_len = 0u64;
        let mut number = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(&path, e))?;
            if n == 0 {
                break;
            }
            number += 1;
            if !line.ends_with('\n') {
                tracing::warn!(path = %path.display(), line = number, "dropping torn journal tail");
                break;
            }
            if line.trim().is_empty() {
                valid_len += n as u64;
                continue;
            }
            let entry: JournalEntry = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{} line {number}: {e}", path.display())))?;
            store.apply(entry);
            valid_len += n as u64;
        }
        let actual = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        if actual != valid_len {
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.set_len(valid_len).map_err(|e| Error::io(&path, e))?;
        }
        Ok(store)
    }

    fn apply(&mut self, entry: JournalEntry) {
        match entry {
            JournalEntry::Label { label, exclusion } => {
                if let Some(e) = exclusion {
                    self.push_exclusion(e);
                }
                self.labels.insert(label.record_id.clone(), label);
            }
            JournalEntry::Exclude { entry } => self.push_exclusion(entry),
            JournalEntry::Tombstone { id, at } => {
                self.deleted.insert(id, at);
            }
        }
    }

    fn push_exclusion(&mut self, e: ExclusionEntry) {
        self.next_id = self.next_id.max(e.id + 1);
        self.history.push(e);
    }

    fn append(&self, entry: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn label(&self, record_id: &str) -> Option<&ReviewLabel> {
        self.labels.get(record_id)
    }

    pub fn labels(&self) -> impl Iterator<Item = &ReviewLabel> {
        self.labels.values()
    }

    /// Every exclusion ever created, including deleted ones.
    pub fn history(&self) -> &[ExclusionEntry] {
        &self.history
    }

    pub fn deleted_at(&self, id: u64) -> Option<i64> {
        self.deleted.get(&id).copied()
    }

    pub fn active_exclusions(&self) -> Vec<ExclusionEntry> {
        self.history
            .iter()
            .filter(|e| !self.deleted.contains_key(&e.id))
            .cloned()
            .collect()
    }

    /// Records a verdict for `key`'s anomaly record. A second label for the
    /// same record is a conflict. Benign verdicts also create an exclusion,
    /// written in the same journal line.
    pub fn submit_label(&mut self, label: ReviewLabel, key: &FloorKey) -> Result<Option<ExclusionEntry>> {
        label.validate()?;
        if self.labels.contains_key(&label.record_id) {
            return Err(Error::Conflict(format!(
                "record {} already has a label",
                label.record_id
            )));
        }
        let exclusion = label.creates_exclusion().then(|| ExclusionEntry {
            id: self.next_id,
            scope: ExclusionScope::for_key(key, label.scope),
            reason: label.reason,
            created_at: label.reviewed_at,
            source_record: Some(label.record_id.clone()),
        });
        let entry = JournalEntry::Label { label, exclusion };
        self.append(&entry)?;
        self.apply(entry.clone());
        let JournalEntry::Label { exclusion, .. } = entry else {
            unreachable!()
        };
        Ok(exclusion)
    }

    pub fn create_exclusion(&mut self, scope: ExclusionScope, reason: Reason, at: i64) -> Result<ExclusionEntry> {
        scope.validate()?;
        let entry = ExclusionEntry {
            id: self.next_id,
            scope,
            reason,
            created_at: at,
            source_record: None,
        };
        let j = JournalEntry::Exclude { entry: entry.clone() };
        self.append(&j)?;
        self.apply(j);
        Ok(entry)
    }

    pub fn delete_exclusion(&mut self, id: u64, at: i64) -> Result<()> {
        if !self.history.iter().any(|e| e.id == id) || self.deleted.contains_key(&id) {
            return Err(Error::NotFound(format!("exclusion {id}")));
        }
        let j = JournalEntry::Tombstone { id, at };
        self.append(&j)?;
        self.apply(j);
        Ok(())
    }
}

/// Reads the active exclusions from a journal file; a missing file means none.
pub fn load_exclusions(path: impl AsRef<Path>) -> Result<Vec<ExclusionEntry>> {
    Ok(ReviewStore::open(path)?.active_exclusions())
}

/// Unused keys are reported so typos in hand-written exclusion files surface.
pub fn unmatched_exclusions<'a>(
    exclusions: &'a [ExclusionEntry],
    keys: &BTreeSet<FloorKey>,
) -> Vec<&'a ExclusionEntry> {
    exclusions
        .iter()
        .filter(|e| !keys.iter().any(|k| e.scope.matches(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(record: &str, verdict: Verdict, reason: Reason) -> ReviewLabel {
        ReviewLabel {
            record_id: record.into(),
            verdict,
            reason,
            note: String::new(),
            reviewer_id: "rev1".into(),
            reviewed_at: 1_700_000_000,
            scope: ScopeKind::Floor,
        }
    }

    #[test]
    fn reasons_partition_by_verdict() {
        let benign: Vec<_> = Reason::ALL.into_iter().filter(|r| r.is_benign()).collect();
        assert_eq!(benign.len(), 5);
        for r in Reason::ALL {
            assert_ne!(Verdict::SuspectedHazard.allows(r), Verdict::NoHazard.allows(r));
            assert_eq!(Verdict::NoHazard.allows(r), Verdict::DataException.allows(r));
        }
        assert!(!label("x", Verdict::SuspectedHazard, Reason::OvercrowdedResidence).creates_exclusion());
        assert!(label("x", Verdict::NoHazard, Reason::OfficeBuilding).creates_exclusion());
        assert!(label("x", Verdict::DataException, Reason::SensorMalfunction).creates_exclusion());
        assert!(label("x", Verdict::NoHazard, Reason::OvercrowdedResidence)
            .validate()
            .is_err());
    }

    #[test]
    fn benign_label_creates_exclusion_and_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.jsonl");
        let key = FloorKey::new("est", "E01", 4);
        {
            let mut store = ReviewStore::open(&path).unwrap();
            let ex = store
                .submit_label(label("r1", Verdict::NoHazard, Reason::OfficeBuilding), &key)
                .unwrap()
                .unwrap();
            assert!(ex.scope.matches(&key));
            assert_eq!(ex.source_record.as_deref(), Some("r1"));
            let none = store
                .submit_label(
                    label("r2", Verdict::SuspectedHazard, Reason::OvercrowdedResidence),
                    &key,
                )
                .unwrap();
            assert!(none.is_none());
        }
        let store = ReviewStore::open(&path).unwrap();
        assert_eq!(store.labels().count(), 2);
        assert_eq!(store.active_exclusions().len(), 1);
        assert!(is_excluded(&key, &store.active_exclusions()));
    }

    #[test]
    fn duplicate_label_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ReviewStore::open(dir.path().join("j")).unwrap();
        let key = FloorKey::new("est", "E01", 4);
        store
            .submit_label(label("r1", Verdict::NoHazard, Reason::Decoration), &key)
            .unwrap();
        let err = store
            .submit_label(label("r1", Verdict::NoHazard, Reason::Decoration), &key)
            .unwrap_err();
        assert!(matches!(err, Error::Conflict(_)));
        assert_eq!(store.active_exclusions().len(), 1);
    }

    #[test]
    fn tombstones_keep_history() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        let mut store = ReviewStore::open(&path).unwrap();
        let a = store
            .create_exclusion(
                ExclusionScope::Estate { estate: "oak".into() },
                Reason::DormitoryHotel,
                10,
            )
            .unwrap();
        let b = store
            .create_exclusion(
                ExclusionScope::for_key(&FloorKey::new("pine", "E02", 3), ScopeKind::Floor),
                Reason::Decoration,
                11,
            )
            .unwrap();
        assert_ne!(a.id, b.id);
        store.delete_exclusion(a.id, 12).unwrap();
        assert!(matches!(store.delete_exclusion(a.id, 13), Err(Error::NotFound(_))));
        assert!(matches!(store.delete_exclusion(99, 13), Err(Error::NotFound(_))));
        let store = ReviewStore::open(&path).unwrap();
        assert_eq!(store.history().len(), 2);
        assert_eq!(store.deleted_at(a.id), Some(12));
        assert_eq!(store.active_exclusions(), vec![b]);
        assert!(ExclusionScope::Estate { estate: "oak".into() }.matches(&FloorKey::new("oak", "E09", 1)));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j");
        let mut store = ReviewStore::open(&path).unwrap();
        store
            .create_exclusion(
                ExclusionScope::Estate { estate: "oak".into() },
                Reason::DormitoryHotel,
                10,
            )
            .unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"op\":\"tomb").unwrap();
        drop(f);
        let mut store = ReviewStore::open(&path).unwrap();
        assert_eq!(store.active_exclusions().len(), 1);
        store.delete_exclusion(1, 20).unwrap();
        assert!(ReviewStore::open(&path).unwrap().active_exclusions().is_empty());
    }
}
