//! Confusion matrices, per-class recall, subgroup accuracy tables across
//! pruning levels, true-positive evolution and gap analysis.
//!
//! Everything is a fold over a per-example [`PredictionLog`]; percentages that
//! appear in tables are exact integer hundredths so that differences between
//! cells carry no floating-point residue.

mod confusion;
mod report;
mod subgroup;
mod tp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use confusion::{accuracy, confusion, recall_per_class, ConfusionMatrix};
pub use report::{LevelMetrics, MetricsReport};
pub use subgroup::{gap_analysis, subgroup_accuracy, GapTable, Subgroup, SubgroupReport};
pub use tp::{tp_evolution, TpTable};

/// A percentage held as an integer count of hundredths (`54.49` is `5449`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hundredths(pub i64);

impl Hundredths {
    /// `100·num/den` rounded half away from zero to two decimals.
    pub fn ratio(num: u64, den: u64) -> Option<Self> {
        if den == 0 {
            return None;
        }
        let (num, den) = (num as i128, den as i128);
        Some(Hundredths(((20_000 * num + den) / (2 * den)) as i64))
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl std::ops::Sub for Hundredths {
    type Output = Hundredths;

    fn sub(self, rhs: Hundredths) -> Hundredths {
        Hundredths(self.0 - rhs.0)
    }
}

impl fmt::Display for Hundredths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", a / 100, a % 100)
    }
}

impl FromStr for Hundredths {
    type Err = Error;

    /// Accepts `66`, `63.5`, `54.49` and a leading sign; more than two
    /// decimals is an error rather than a silent rounding.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Ingestion(format!("{s:?} is not a percentage with at most 2 decimals"));
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: i64 = int.parse().map_err(|_| bad())?;
        let mut cents = 0i64;
        for (i, b) in frac.bytes().enumerate() {
            cents += (b - b'0') as i64 * if i == 0 { 10 } else { 1 };
        }
        let v = whole * 100 + cents;
        Ok(Hundredths(if neg { -v } else { v }))
    }
}

/// One evaluated example at one pruning level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    /// Record index in the dataset manifest.
    pub sample: usize,
    pub level: usize,
    pub label: usize,
    pub pred: usize,
}

/// Per-example predictions, the single source for every metric.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionLog {
    pub entries: Vec<Prediction>,
}

impl PredictionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Prediction) {
        self.entries.push(p);
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = Prediction>) {
        self.entries.extend(other);
    }

    pub fn levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.entries.iter().map(|p| p.level).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn at_level(&self, level: usize) -> impl Iterator<Item = &Prediction> {
        self.entries.iter().filter(move |p| p.level == level)
    }

    /// Confusion matrix of one level.
    pub fn confusion(&self, level: usize, classes: usize) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(classes);
        for p in self.at_level(level) {
            cm.record(p.label, p.pred)?;
        }
        Ok(cm)
    }
}

/// Row-wise argmax over `[N × C]` logits; ties go to the lower class index.
pub fn argmax(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Case-, space- and punctuation-insensitive class lookup by code, full name,
/// or a handful of spellings seen in published tables.
pub fn class_by_name(name: &str) -> Option<usize> {
    if let Some(c) = crate::data::class_index(name) {
        return Some(c);
    }
    let key: String = name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase();
    let norm = |s: &str| -> String {
        s.chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase()
    };
    if let Some(c) = crate::data::CLASS_NAMES.iter().position(|n| norm(n) == key) {
        return Some(c);
    }
    let aliases: [(&str, usize); 7] = [
        ("molenevus", 1),
        ("nevus", 1),
        ("mole", 1),
        ("squamouscellcarinoma", 7),
        ("vascular", 6),
        ("benignkeratosislikelesion", 4),
        ("actinickeratoses", 3),
    ];
    aliases.iter().find(|(a, _)| *a == key).map(|&(_, c)| c)
}
