use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Hundredths, PredictionLog};
use crate::data::{Demographics, Sex};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subgroup {
    Male,
    Female,
    Ages1To30,
    Ages31To60,
    Ages61To90,
}

impl Subgroup {
    pub const ALL: [Subgroup; 5] = [
        Subgroup::Male,
        Subgroup::Female,
        Subgroup::Ages1To30,
        Subgroup::Ages31To60,
        Subgroup::Ages61To90,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Subgroup::Male => "Male",
            Subgroup::Female => "Female",
            Subgroup::Ages1To30 => "Ages 1-30",
            Subgroup::Ages31To60 => "Ages 31-60",
            Subgroup::Ages61To90 => "Ages 61-90",
        }
    }

    /// Records missing the relevant field never match.
    pub fn contains(self, d: &Demographics) -> bool {
        match self {
            Subgroup::Male => d.sex == Some(Sex::Male),
            Subgroup::Female => d.sex == Some(Sex::Female),
            Subgroup::Ages1To30 => d.age.is_some_and(|a| (1..=30).contains(&a)),
            Subgroup::Ages31To60 => d.age.is_some_and(|a| (31..=60).contains(&a)),
            Subgroup::Ages61To90 => d.age.is_some_and(|a| (61..=90).contains(&a)),
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Subgroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
        Subgroup::ALL
            .into_iter()
            .find(|g| g.label().replace(' ', "").to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Ingestion(format!("unknown subgroup {s:?}")))
    }
}

/// Accuracy per (subgroup, level); absent cells are groups with no members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub levels: Vec<usize>,
    pub rows: Vec<(Subgroup, Vec<Option<Hundredths>>)>,
}

impl SubgroupReport {
    pub fn row(&self, group: Subgroup) -> Option<&[Option<Hundredths>]> {
        self.rows.iter().find(|(g, _)| *g == group).map(|(_, r)| r.as_slice())
    }

    pub fn cell(&self, group: Subgroup, level: usize) -> Option<Hundredths> {
        let pos = self.levels.iter().position(|&l| l == level)?;
        self.row(group)?[pos]
    }

    /// `subgroup,L0,...` header; absent cells are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subgroup");
        for l in &self.levels {
            out.push_str(&format!(",L{l}"));
        }
        out.push('\n');
        for (g, cells) in &self.rows {
            out.push_str(g.label());
            for c in cells {
                match c {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse the layout written by [`to_csv`](Self::to_csv). Cells may carry
    /// zero to two decimals; empty, `NA` and `-` cells are absent.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::Ingestion(format!("subgroup table header: {e}")))?
            .clone();
        let levels = parse_level_header(&header)?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Ingestion(format!("row {line}: {e}")))?;
            let group: Subgroup = rec[0]
                .parse()
                .map_err(|e| Error::Ingestion(format!("row {line}: {e}")))?;
            if rows.iter().any(|(g, _)| *g == group) {
                return Err(Error::Ingestion(format!("row {line}: duplicate subgroup {group}")));
            }
            let cells = rec
                .iter()
                .skip(1)
                .map(|c| match c {
                    "" | "NA" | "-" => Ok(None),
                    v => v
                        .parse::<Hundredths>()
                        .map(Some)
                        .map_err(|e| Error::Ingestion(format!("row {line}: {e}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((group, cells));
        }
        Ok(SubgroupReport { levels, rows })
    }
}

/// `L0,L1,...` after a leading label column.
pub(super) fn parse_level_header(header: &csv::StringRecord) -> Result<Vec<usize>> {
    if header.len() < 2 {
        return Err(Error::Ingestion("table header needs a label column and level columns".into()));
    }
    header
        .iter()
        .skip(1)
        .map(|h| {
            h.strip_prefix('L')
                .or_else(|| h.strip_prefix('l'))
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Ingestion(format!("header column {h:?} is not a level like L3")))
        })
        .collect()
}

/// Raw accuracy of every group at every level in the log.
pub fn subgroup_accuracy(
    log: &PredictionLog,
    metadata: &[Demographics],
    groups: &[Subgroup],
) -> Result<SubgroupReport> {
    let levels = log.levels();
    let mut rows = Vec::with_capacity(groups.len());
    for &g in groups {
        let mut cells = Vec::with_capacity(levels.len());
        for &level in &levels {
            let (mut hit, mut n) = (0u64, 0u64);
            for p in log.at_level(level) {
                let d = metadata.get(p.sample).ok_or_else(|| {
                    Error::Index(format!("sample {} has no metadata ({} records)", p.sample, metadata.len()))
                })?;
                if g.contains(d) {
                    n += 1;
                    hit += (p.pred == p.label) as u64;
                }
            }
            cells.push(Hundredths::ratio(hit, n));
        }
        rows.push((g, cells));
    }
    Ok(SubgroupReport { levels, rows })
}

/// Female−Male and (Ages 1-30)−(Ages 61-90) per level, plus the change of
/// each gap from the first to the last level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapTable {
    pub levels: Vec<usize>,
    pub female_minus_male: Vec<Option<Hundredths>>,
    pub young_minus_old: Vec<Option<Hundredths>>,
    pub female_minus_male_change: Option<Hundredths>,
    pub young_minus_old_change: Option<Hundredths>,
}

impl GapTable {
    fn at(row: &[Option<Hundredths>], levels: &[usize], level: usize) -> Option<Hundredths> {
        row[levels.iter().position(|&l| l == level)?]
    }

    pub fn female_minus_male_at(&self, level: usize) -> Option<Hundredths> {
        Self::at(&self.female_minus_male, &self.levels, level)
    }

    pub fn young_minus_old_at(&self, level: usize) -> Option<Hundredths> {
        Self::at(&self.young_minus_old, &self.levels, level)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gap");
        for l in &self.levels {
            out.push_str(&format!(",L{l}"));
        }
        out.push_str(",change\n");
        let fmt = |c: &Option<Hundredths>| c.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        for (name, row, change) in [
            ("Female-Male", &self.female_minus_male, &self.female_minus_male_change),
            ("Ages 1-30 - Ages 61-90", &self.young_minus_old, &self.young_minus_old_change),
        ] {
            out.push_str(name);
            for c in row {
                out.push(',');
                out.push_str(&fmt(c));
            }
            out.push(',');
            out.push_str(&fmt(change));
            out.push('\n');
        }
        out
    }
}

pub fn gap_analysis(report: &SubgroupReport) -> Result<GapTable> {
    let need = |g: Subgroup| {
        report
            .row(g)
            .ok_or_else(|| Error::Ingestion(format!("subgroup table lacks the {g} row")))
    };
    let diff = |a: &[Option<Hundredths>], b: &[Option<Hundredths>]| -> Vec<Option<Hundredths>> {
        a.iter().zip(b).map(|(x, y)| Some((*x)? - (*y)?)).collect()
    };
    let fm = diff(need(Subgroup::Female)?, need(Subgroup::Male)?);
    let yo = diff(need(Subgroup::Ages1To30)?, need(Subgroup::Ages61To90)?);
    let change = |row: &[Option<Hundredths>]| Some((*row.last()?)? - (*row.first()?)?);
    Ok(GapTable {
        levels: report.levels.clone(),
        female_minus_male_change: change(&fm),
        young_minus_old_change: change(&yo),
        female_minus_male: fm,
        young_minus_old: yo,
    })
}
