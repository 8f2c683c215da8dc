use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Demographics, Normalization, Sex};
use crate::error::{Error, Result};
use crate::evaluation::{Hundredths, MetricsReport, Prediction, PredictionLog};

/// One test-split record as seen by the audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    /// Record index in the dataset manifest.
    pub record: usize,
    pub label: usize,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: usize,
    pub target: f64,
    pub sparsity: f64,
    pub masked: usize,
    pub steps: usize,
    /// Mean batch loss of every epoch.
    pub train_loss: Vec<f64>,
    /// Eval-mode accuracy on the unaugmented training split.
    pub train_accuracy: Hundredths,
    pub test_accuracy: Hundredths,
    pub subgroups: BTreeMap<String, Option<Hundredths>>,
    /// Relative to the output directory.
    pub checkpoint: String,
    /// Predicted class for each entry of [`RunLedger::eval_set`].
    pub predictions: Vec<usize>,
}

/// Everything a run produced except wall-clock times, which live in
/// `timings.json` so that identical runs give identical ledgers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub rounds: usize,
    pub classes: usize,
    pub prunable: usize,
    pub normalization: Normalization,
    pub eval_set: Vec<EvalSample>,
    pub levels: Vec<LevelRecord>,
    pub complete: bool,
}

impl RunLedger {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ledger: RunLedger = serde_json::from_str(&text)?;
        if let Some((i, r)) = ledger.levels.iter().enumerate().find(|(i, r)| r.level != *i) {
            return Err(Error::Format(format!(
                "{}: record {i} is for level {}, levels must be contiguous from 0",
                path.display(),
                r.level
            )));
        }
        Ok(ledger)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_atomic(path, text.as_bytes())
    }

    /// Demographics indexed by position in the evaluation set.
    pub fn metadata(&self) -> Vec<Demographics> {
        self.eval_set
            .iter()
            .map(|s| Demographics {
                label: s.label,
                age: s.age,
                sex: s.sex,
            })
            .collect()
    }

    /// Per-example log over all recorded levels; `sample` is the position in
    /// the evaluation set.
    pub fn prediction_log(&self) -> PredictionLog {
        let mut log = PredictionLog::new();
        for r in &self.levels {
            log.extend(self.eval_set.iter().zip(&r.predictions).enumerate().map(|(i, (s, &pred))| {
                Prediction {
                    sample: i,
                    level: r.level,
                    label: s.label,
                    pred,
                }
            }));
        }
        log
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        MetricsReport::from_log(&self.prediction_log(), &self.metadata(), self.classes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write `subgroups.csv`, `tp_table.csv`, `gaps.csv`, `confusion_L{k}.csv` and
/// `report.json` for every level in the ledger.
pub fn write_reports(ledger: &RunLedger, dir: &Path) -> Result<MetricsReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = ledger.metrics()?;
    let put = |name: &str, text: String| write_atomic(&dir.join(name), text.as_bytes());
    put("subgroups.csv", report.subgroups.to_csv())?;
    put("tp_table.csv", report.tp_table.to_csv())?;
    put("gaps.csv", report.gaps.to_csv())?;
    for m in &report.levels {
        put(&format!("confusion_L{}.csv", m.level), m.confusion.to_csv())?;
    }
    put("report.json", report.to_json()? + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_survive_a_write_read_cycle_bit_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ledger.json");
        let losses = vec![2.0783278942108154, 0.1 + 0.2, 1e-300, 5e-324];
        let ledger = RunLedger {
            config: BTreeMap::new(),
            config_hash: "0".into(),
            rounds: 1,
            classes: 8,
            prunable: 10,
            normalization: Normalization {
                mean: vec![0.5; 3],
                std: vec![0.25; 3],
            },
            eval_set: Vec::new(),
            levels: vec![LevelRecord {
                level: 0,
                target: 0.0,
                sparsity: 0.0,
                masked: 0,
                steps: 1,
                train_loss: losses.clone(),
                train_accuracy: Hundredths(0),
                test_accuracy: Hundredths(0),
                subgroups: BTreeMap::new(),
                checkpoint: "level_0.tfck".into(),
                predictions: Vec::new(),
            }],
            complete: true,
        };
        ledger.write(&path).unwrap();
        let back = RunLedger::read(&path).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.levels[0].train_loss), bits(&losses));
    }
}
