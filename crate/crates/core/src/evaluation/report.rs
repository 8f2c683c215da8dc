use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    accuracy, gap_analysis, recall_per_class, subgroup_accuracy, ConfusionMatrix, GapTable, Hundredths,
    PredictionLog, Subgroup, SubgroupReport, TpTable,
};
use crate::data::Demographics;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub evaluated: u64,
    /// Two-decimal accuracy as shown in tables.
    pub accuracy: Hundredths,
    pub accuracy_exact: f64,
    pub confusion: ConfusionMatrix,
    pub recall: Vec<Option<f64>>,
}

/// Everything derivable from one prediction log, ready for JSON emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub levels: Vec<LevelMetrics>,
    pub tp_table: TpTable,
    pub subgroups: SubgroupReport,
    pub gaps: GapTable,
}

impl MetricsReport {
    pub fn from_log(log: &PredictionLog, metadata: &[Demographics], classes: usize) -> Result<Self> {
        let mut levels = Vec::new();
        let mut confusions = BTreeMap::new();
        for level in log.levels() {
            let cm = log.confusion(level, classes)?;
            levels.push(LevelMetrics {
                level,
                evaluated: cm.total(),
                accuracy: Hundredths::ratio(cm.trace(), cm.total())
                    .ok_or_else(|| Error::UndefinedMetric(format!("level {level} has no predictions")))?,
                accuracy_exact: accuracy(&cm)?,
                recall: recall_per_class(&cm),
                confusion: cm.clone(),
            });
            confusions.insert(level, cm);
        }
        let tp_table = TpTable {
            levels: confusions.keys().copied().collect(),
            counts: (0..classes)
                .map(|c| confusions.values().map(|cm| cm.get(c, c)).collect())
                .collect(),
        };
        let subgroups = subgroup_accuracy(log, metadata, &Subgroup::ALL)?;
        let gaps = gap_analysis(&subgroups)?;
        Ok(MetricsReport {
            classes,
            levels,
            tp_table,
            subgroups,
            gaps,
        })
    }

    pub fn confusions(&self) -> BTreeMap<usize, ConfusionMatrix> {
        self.levels.iter().map(|m| (m.level, m.confusion.clone())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
