//! Lesion datasets: metadata manifests, image ingestion, synthetic generation,
//! class-balanced sampling and preprocessing.

pub mod netpbm;
mod sampler;
mod synth;
mod transform;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use sampler::{balanced_batches, BalancedSampler, SamplingMode};
pub use synth::{synth_generate, ImbalanceProfile, SubgroupProfile, SynthConfig};
pub use transform::{augment_hflip, center_crop, hflip, preprocess, Normalization};

/// Class codes in label-index order.
pub const CLASS_CODES: [&str; 8] = ["MEL", "NV", "BCC", "AK", "BK", "DF", "VASC", "SCC"];

pub const CLASS_NAMES: [&str; 8] = [
    "Melanoma",
    "Melanocytic Nevus",
    "Basal Cell Carcinoma",
    "Actinic Keratosis",
    "Benign Keratosis",
    "Dermatofibroma",
    "Vascular Lesion",
    "Squamous Cell Carcinoma",
];

pub const CSV_HEADER: [&str; 5] = ["image", "label", "age", "sex", "split"];

pub fn class_index(code: &str) -> Option<usize> {
    let code = code.trim();
    let code = if code.eq_ignore_ascii_case("BKL") { "BK" } else { code };
    CLASS_CODES.iter().position(|c| c.eq_ignore_ascii_case(code))
}

pub fn class_code(index: usize) -> String {
    CLASS_CODES
        .get(index)
        .map(|c| c.to_string())
        .unwrap_or_else(|| format!("class{index}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Row position in the manifest.
    pub id: usize,
    /// Image path as written in the CSV, relative to the image directory.
    pub image_path: String,
    /// `C×H×W` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
    pub split: Split,
}

/// Demographic fields of a record, as used by subgroup audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub label: usize,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Per class, over all splits.
    pub class_counts: Vec<usize>,
    pub image_dir: PathBuf,
}

impl DatasetManifest {
    pub fn from_records(records: Vec<SampleRecord>, image_dir: PathBuf) -> Self {
        let classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        let mut class_counts = vec![0; classes];
        for r in &records {
            class_counts[r.label] += 1;
        }
        DatasetManifest {
            records,
            class_counts,
            image_dir,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_counts.len()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn demographics(&self, id: usize) -> Demographics {
        let r = &self.records[id];
        Demographics {
            label: r.label,
            age: r.age,
            sex: r.sex,
        }
    }

    /// Per-class sample counts, one `code,count` line per class.
    pub fn class_histogram(&self) -> String {
        let mut out = String::from("class,count\n");
        for (c, n) in self.class_counts.iter().enumerate() {
            out.push_str(&format!("{},{n}\n", class_code(c)));
        }
        out
    }

    /// Per-channel statistics of the center-cropped training images.
    pub fn normalization(&self, target_size: usize) -> Result<Normalization> {
        let train: Vec<&Tensor> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| &r.image)
            .collect();
        Normalization::compute(train, target_size)
    }

    /// Write the metadata CSV for this manifest.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.write_record([
                r.image_path.clone(),
                class_code(r.label),
                r.age.map(|a| a.to_string()).unwrap_or_default(),
                r.sex.map(|s| s.to_string()).unwrap_or_default(),
                r.split.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Ingestion(format!("{}: {e}", path.display()))
}

/// Read a metadata CSV with header `image,label,age,sex,split` and load every
/// referenced PPM/PGM image. Empty age or sex cells are absent, not zero.
pub fn load_manifest(csv_path: &Path, image_dir: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| csv_err(csv_path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Ingestion(format!(
            "{}: header must be {}, found {}",
            csv_path.display(),
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Ingestion(format!("row {line}: {e}")))?;
        let bad = |what: String| Error::Ingestion(format!("{} row {line}: {what}", csv_path.display()));
        let label = class_index(&row[1]).ok_or_else(|| bad(format!("unknown label {:?}", &row[1])))?;
        let age = match &row[2] {
            "" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| bad(format!("bad age {s:?}")))?;
                if !(0.0..=150.0).contains(&v) {
                    return Err(bad(format!("age {s} out of range")));
                }
                Some(v.round() as u32)
            }
        };
        let sex = match row[3].to_ascii_lowercase().as_str() {
            "" => None,
            "male" | "m" => Some(Sex::Male),
            "female" | "f" => Some(Sex::Female),
            s => return Err(bad(format!("bad sex {s:?}"))),
        };
        let split = match row[4].to_ascii_lowercase().as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            s => return Err(bad(format!("bad split {s:?}"))),
        };
        let image_path = row[0].to_string();
        let image = netpbm::read(&image_dir.join(&image_path))?;
        records.push(SampleRecord {
            id: records.len(),
            image_path,
            image,
            label,
            age,
            sex,
            split,
        });
    }
    Ok(DatasetManifest::from_records(records, image_dir.to_path_buf()))
}
