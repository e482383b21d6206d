//! Result records and the append-only JSON-lines store.

use crate::error::{Error, Result};
use crate::models::DatasetConfig;
use crate::runner::config::{AttackSpec, DefenseSpec};
use crate::tasks::TaskKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

/// File name of the results store inside an output directory.
pub const RESULTS_FILE: &str = "results.jsonl";

/// One measured metric for one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    /// Stable hash of everything that determines this cell's numbers.
    pub fingerprint: String,
    pub attack: AttackSpec,
    pub defense: DefenseSpec,
    pub task: TaskKind,
    pub metric: String,
    /// Metric value; serialized as `null` when infinite (PSNR of an
    /// untouched image).
    #[serde(with = "inf_as_null")]
    pub value: f64,
    pub n_images: usize,
    pub wall_time_s: f64,
    pub timestamp: String,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// The inputs a cell's numbers depend on. Hashing this canonical shape --
/// rather than the raw config file -- means cosmetic edits and unrelated
/// grid rows do not invalidate stored results.
#[derive(Serialize)]
struct CellKey<'a> {
    dataset: &'a DatasetConfig,
    models_hash: &'a str,
    schedule: &'a str,
    attack: &'a AttackSpec,
    defense: &'a DefenseSpec,
    task: TaskKind,
    eval_size: usize,
    attack_seed: u64,
    defense_seed: u64,
}

/// Stable per-cell fingerprint (first 16 hex chars of a SHA-256).
#[allow(clippy::too_many_arguments)]
pub fn cell_fingerprint(
    dataset: &DatasetConfig,
    models_hash: &str,
    schedule_name: &str,
    attack: &AttackSpec,
    defense: &DefenseSpec,
    task: TaskKind,
    eval_size: usize,
    attack_seed: u64,
    defense_seed: u64,
) -> String {
    let key = CellKey {
        dataset,
        models_hash,
        schedule: schedule_name,
        attack,
        defense,
        task,
        eval_size,
        attack_seed,
        defense_seed,
    };
    let canon = serde_json::to_string(&key).expect("cell key serializes");
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    let digest = h.finalize();
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Hash of the model checkpoint bytes, tying fingerprints to the exact
/// weights they were measured with.
pub fn hash_model_files(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [
        crate::models::io::META_FILE,
        crate::models::io::WEIGHTS_FILE,
    ] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    let digest = h.finalize();
    let mut hex = String::with_capacity(16);
    for b in &digest[..8] {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

/// Append-only JSON-lines store with a uniqueness key of
/// `(fingerprint, metric)` -- the fingerprint already pins the attack,
/// defense, and task.
#[derive(Debug)]
pub struct ResultsStore {
    path: PathBuf,
    records: Vec<ExperimentRecord>,
    keys: HashSet<(String, String)>,
}

impl ResultsStore {
    /// Opens or creates the store at `path`, loading any existing records.
    /// Parse failures name the line; duplicate keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let mut store = ResultsStore {
            path: path.to_path_buf(),
            records: Vec::new(),
            keys: HashSet::new(),
        };
        if !path.exists() {
            return Ok(store);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExperimentRecord = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            store.index(rec)?;
        }
        Ok(store)
    }

    fn index(&mut self, rec: ExperimentRecord) -> Result<()> {
        let key = (rec.fingerprint.clone(), rec.metric.clone());
        if !self.keys.insert(key) {
            return Err(Error::Contract(format!(
                "duplicate record for cell {} metric {}",
                rec.fingerprint, rec.metric
            )));
        }
        self.records.push(rec);
        Ok(())
    }

    /// Appends one record to the file and the in-memory index.
    pub fn append(&mut self, rec: ExperimentRecord) -> Result<()> {
        let line = serde_json::to_string(&rec)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        self.index(rec)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every metric in `metrics` is already stored for the cell.
    pub fn has_all(&self, fingerprint: &str, metrics: &[&str]) -> bool {
        metrics.iter().all(|m| {
            self.keys
                .contains(&(fingerprint.to_string(), m.to_string()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record(fp: &str, metric: &str, value: f64) -> ExperimentRecord {
        ExperimentRecord {
            fingerprint: fp.into(),
            attack: AttackSpec::preset("pgd"),
            defense: DefenseSpec::none(),
            task: TaskKind::Classification,
            metric: metric.into(),
            value,
            n_images: 4,
            wall_time_s: 0.25,
            timestamp: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn store_round_trips_and_enforces_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        let mut store = ResultsStore::load(&path).unwrap();
        store.append(sample_record("abc", "accuracy", 0.9)).unwrap();
        store
            .append(sample_record("abc", "psnr", f64::INFINITY))
            .unwrap();
        assert!(store.append(sample_record("abc", "accuracy", 0.5)).is_err());
        drop(store);

        let reloaded = ResultsStore::load(&path).unwrap();
        assert_eq!(reloaded.len(), 2);
        assert_eq!(reloaded.records()[0].value, 0.9);
        assert!(reloaded.records()[1].value.is_infinite());
        assert!(reloaded.has_all("abc", &["accuracy", "psnr"]));
        assert!(!reloaded.has_all("abc", &["accuracy", "miou"]));
    }

    #[test]
    fn infinite_values_serialize_as_null() {
        let line = serde_json::to_string(&sample_record("f", "psnr", f64::INFINITY)).unwrap();
        assert!(line.contains("\"value\":null"), "line: {line}");
        let back: ExperimentRecord = serde_json::from_str(&line).unwrap();
        assert!(back.value.is_infinite());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        let good = serde_json::to_string(&sample_record("a", "accuracy", 1.0)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = ResultsStore::load(&path).unwrap_err().to_string();
        assert!(
            err.contains(":2:"),
            "error should carry the line number: {err}"
        );
    }

    #[test]
    fn fingerprints_respond_to_each_input() {
        let data = DatasetConfig::default();
        let base = cell_fingerprint(
            &data,
            "mh",
            "linear-1000",
            &AttackSpec::preset("pgd"),
            &DefenseSpec::none(),
            TaskKind::Classification,
            64,
            1,
            2,
        );
        assert_eq!(base.len(), 16);
        let same = cell_fingerprint(
            &data,
            "mh",
            "linear-1000",
            &AttackSpec::preset("pgd"),
            &DefenseSpec::none(),
            TaskKind::Classification,
            64,
            1,
            2,
        );
        assert_eq!(base, same);
        let other_attack = cell_fingerprint(
            &data,
            "mh",
            "linear-1000",
            &AttackSpec::preset("mifgsm"),
            &DefenseSpec::none(),
            TaskKind::Classification,
            64,
            1,
            2,
        );
        assert_ne!(base, other_attack);
        let other_models = cell_fingerprint(
            &data,
            "mh2",
            "linear-1000",
            &AttackSpec::preset("pgd"),
            &DefenseSpec::none(),
            TaskKind::Classification,
            64,
            1,
            2,
        );
        assert_ne!(base, other_models);
        let other_seed = cell_fingerprint(
            &data,
            "mh",
            "linear-1000",
            &AttackSpec::preset("pgd"),
            &DefenseSpec::none(),
            TaskKind::Classification,
            64,
            3,
            2,
        );
        assert_ne!(base, other_seed);
    }

    #[test]
    fn model_file_hash_tracks_bytes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meta.json"), "{}").unwrap();
        std::fs::write(dir.path().join("weights.bin"), [1u8, 2, 3]).unwrap();
        let a = hash_model_files(dir.path()).unwrap();
        std::fs::write(dir.path().join("weights.bin"), [1u8, 2, 4]).unwrap();
        let b = hash_model_files(dir.path()).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.len(), 16);
    }
}
