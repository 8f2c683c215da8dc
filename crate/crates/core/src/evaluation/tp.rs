use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::subgroup::parse_level_header;
use super::{class_by_name, ConfusionMatrix};
use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};

/// True-positive counts, `counts[class][level position]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpTable {
    pub levels: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl TpTable {
    pub fn get(&self, class: usize, level: usize) -> Option<u64> {
        let pos = self.levels.iter().position(|&l| l == level)?;
        self.counts.get(class).map(|r| r[pos])
    }

    pub fn column(&self, level: usize) -> Option<Vec<u64>> {
        let pos = self.levels.iter().position(|&l| l == level)?;
        Some(self.counts.iter().map(|r| r[pos]).collect())
    }

    /// `class,L0,...` with one row per class under its full name.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for l in &self.levels {
            out.push_str(&format!(",L{l}"));
        }
        out.push('\n');
        for (c, row) in self.counts.iter().enumerate() {
            out.push_str(CLASS_NAMES.get(c).copied().unwrap_or("unknown"));
            for n in row {
                out.push_str(&format!(",{n}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse a table whose rows name classes by code or full name, in any
    /// order. Every class from 0 to the highest one named must appear once.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::Ingestion(format!("true-positive table header: {e}")))?
            .clone();
        let levels = parse_level_header(&header)?;
        let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Ingestion(format!("row {line}: {e}")))?;
            let class = class_by_name(&rec[0])
                .ok_or_else(|| Error::Ingestion(format!("row {line}: unknown class {:?}", &rec[0])))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<u64>()
                        .map_err(|_| Error::Ingestion(format!("row {line}: count {c:?} is not a nonnegative integer")))
                })
                .collect::<Result<Vec<_>>>()?;
            if by_class.insert(class, row).is_some() {
                return Err(Error::Ingestion(format!("row {line}: class {:?} listed twice", &rec[0])));
            }
        }
        let n = by_class.keys().next_back().map_or(0, |k| k + 1);
        if let Some(missing) = (0..n).find(|c| !by_class.contains_key(c)) {
            return Err(Error::Ingestion(format!("true-positive table lacks class {}", CLASS_NAMES[missing])));
        }
        Ok(TpTable {
            levels,
            counts: by_class.into_values().collect(),
        })
    }
}

/// Diagonals of the level confusion matrices. Levels `0..levels` must all be
/// present.
pub fn tp_evolution(confusions: &BTreeMap<usize, ConfusionMatrix>, levels: usize) -> Result<TpTable> {
    if let Some(missing) = (0..levels).find(|l| !confusions.contains_key(l)) {
        return Err(Error::MissingLevel(missing));
    }
    let classes = confusions.get(&0).map_or(0, |cm| cm.classes());
    let mut counts = vec![Vec::with_capacity(levels); classes];
    for l in 0..levels {
        let cm = &confusions[&l];
        if cm.classes() != classes {
            return Err(Error::Contract(format!(
                "level {l} has {} classes, level 0 has {classes}",
                cm.classes()
            )));
        }
        for (c, d) in cm.diagonal().into_iter().enumerate() {
            counts[c].push(d);
        }
    }
    Ok(TpTable {
        levels: (0..levels).collect(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_level_column() {
        let cm = ConfusionMatrix::from_rows(&[vec![6, 0], vec![0, 4]]).unwrap();
        let t = tp_evolution(&BTreeMap::from([(0, cm)]), 1).unwrap();
        assert_eq!(t.column(0), Some(vec![6, 4]));
    }

    #[test]
    fn missing_level_is_named() {
        let cm = ConfusionMatrix::from_rows(&[vec![1]]).unwrap();
        let map = BTreeMap::from([(0, cm.clone()), (1, cm.clone()), (3, cm)]);
        let err = tp_evolution(&map, 4).unwrap_err();
        assert!(matches!(err, Error::MissingLevel(2)));
        assert!(err.to_string().contains('2'));
    }

    #[test]
    fn diagonals_match_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map: BTreeMap<usize, ConfusionMatrix> = (0..10)
            .map(|l| {
                let rows: Vec<Vec<u64>> = (0..8).map(|_| (0..8).map(|_| rng.gen_range(0..50)).collect()).collect();
                (l, ConfusionMatrix::from_rows(&rows).unwrap())
            })
            .collect();
        let t = tp_evolution(&map, 10).unwrap();
        for (l, cm) in &map {
            for c in 0..8 {
                assert_eq!(t.get(c, *l), Some(cm.get(c, c)));
            }
            assert!(t.column(*l).unwrap().iter().sum::<u64>() <= cm.total());
        }
        assert_eq!(TpTable::from_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn ingest_rejects_bad_rows() {
        assert!(TpTable::from_csv("class,L0\nMelanoma,x\n").is_err());
        assert!(TpTable::from_csv("class,L0\nMelanoma,1\nMEL,2\n").is_err());
        // NV given without MEL
        assert!(TpTable::from_csv("class,L0\nNV,1\n").is_err());
    }
}
