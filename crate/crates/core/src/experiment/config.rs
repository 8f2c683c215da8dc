//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! seed = 7
//! optimizer.lr = 0.001
//! model.conv_channels = 8,16,32
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{ImbalanceProfile, SamplingMode, SubgroupProfile};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::optimizer::AdamConfig;
use crate::pruning::PruneSchedule;

/// Where the data comes from: an existing manifest, or a synthetic set generated
/// into `<output.dir>/data`.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Manifest { csv: PathBuf, image_dir: Option<PathBuf> },
    Synthetic {
        n: usize,
        imbalance: ImbalanceProfile,
        subgroups: SubgroupProfile,
        image_size: usize,
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub arch: ArchConfig,
    pub schedule: PruneSchedule,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub sampling: SamplingMode,
    pub hflip_p: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            data: DataSource::Synthetic {
                n: 1600,
                imbalance: ImbalanceProfile::IsicLike,
                subgroups: SubgroupProfile::IsicLike,
                image_size: 32,
                test_fraction: 0.2,
            },
            arch: ArchConfig::default(),
            schedule: PruneSchedule::default(),
            optimizer: AdamConfig::default(),
            batch_size: 64,
            sampling: SamplingMode::Replacement,
            hflip_p: 0.5,
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "output.dir",
    "data.manifest",
    "data.image_dir",
    "synth.n",
    "synth.imbalance",
    "synth.subgroups",
    "synth.image_size",
    "synth.test_fraction",
    "model.input_channels",
    "model.input_size",
    "model.conv_channels",
    "model.kernel_size",
    "model.pool_size",
    "model.hidden",
    "model.dropout",
    "model.classes",
    "model.bias",
    "schedule.rounds",
    "schedule.per_level_fraction",
    "schedule.epochs_per_round",
    "optimizer.lr",
    "optimizer.weight_decay",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "train.batch_size",
    "train.sampler",
    "train.hflip_p",
];

/// Keys that may differ between a run and its resume.
const LOCATION_KEYS: &[&str] = &["output.dir"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        let mut pending: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some(prev) = seen.insert(k.clone(), i + 1) {
                return Err(Error::Config(format!("line {}: {k} already set on line {prev}", i + 1)));
            }
            pending.push((i + 1, k, v));
        }
        // data.manifest switches the source, so it must be applied before data.image_dir
        pending.sort_by_key(|(_, k, _)| KEYS.iter().position(|x| x == k).unwrap_or(usize::MAX));
        for (line, k, v) in pending {
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Set one dotted key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let synth = |cfg: &mut Self| -> Result<()> {
            if matches!(cfg.data, DataSource::Manifest { .. }) {
                return Err(Error::Config(format!("{key} conflicts with data.manifest")));
            }
            Ok(())
        };
        match key {
            "seed" => self.seed = parse(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "data.manifest" => {
                self.data = DataSource::Manifest {
                    csv: PathBuf::from(value),
                    image_dir: None,
                }
            }
            "data.image_dir" => match &mut self.data {
                DataSource::Manifest { image_dir, .. } => *image_dir = Some(PathBuf::from(value)),
                DataSource::Synthetic { .. } => {
                    return Err(Error::Config("data.image_dir needs data.manifest".into()))
                }
            },
            "synth.n" | "synth.imbalance" | "synth.subgroups" | "synth.image_size" | "synth.test_fraction" => {
                synth(self)?;
                let DataSource::Synthetic {
                    n,
                    imbalance,
                    subgroups,
                    image_size,
                    test_fraction,
                } = &mut self.data
                else {
                    unreachable!()
                };
                match key {
                    "synth.n" => *n = parse(key, value)?,
                    "synth.imbalance" => *imbalance = value.parse()?,
                    "synth.subgroups" => *subgroups = value.parse()?,
                    "synth.image_size" => *image_size = parse(key, value)?,
                    _ => *test_fraction = parse(key, value)?,
                }
            }
            "model.input_channels" => self.arch.input_channels = parse(key, value)?,
            "model.input_size" => self.arch.input_size = parse(key, value)?,
            "model.conv_channels" => {
                self.arch.conv_channels = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "model.kernel_size" => self.arch.kernel_size = parse(key, value)?,
            "model.pool_size" => self.arch.pool_size = parse(key, value)?,
            "model.hidden" => self.arch.hidden = parse(key, value)?,
            "model.dropout" => self.arch.dropout = parse(key, value)?,
            "model.classes" => self.arch.classes = parse(key, value)?,
            "model.bias" => self.arch.bias = parse(key, value)?,
            "schedule.rounds" => self.schedule.rounds = parse(key, value)?,
            "schedule.per_level_fraction" => self.schedule.per_level_fraction = parse(key, value)?,
            "schedule.epochs_per_round" => self.schedule.epochs_per_round = parse(key, value)?,
            "optimizer.lr" => self.optimizer.lr = parse(key, value)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, value)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optimizer.eps" => self.optimizer.eps = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.sampler" => {
                self.sampling = match value {
                    "replacement" => SamplingMode::Replacement,
                    "stratified" => SamplingMode::Stratified,
                    _ => {
                        return Err(Error::Config(format!(
                            "train.sampler: {value:?} is not replacement or stratified"
                        )))
                    }
                }
            }
            "train.hflip_p" => self.hflip_p = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return bad(format!("train.hflip_p {} outside [0, 1]", self.hflip_p));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("optimizer.lr {} must be positive", o.lr));
        }
        if !(o.weight_decay >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer: need weight_decay >= 0, betas in [0, 1), eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.arch.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", self.arch.dropout));
        }
        if self.arch.classes < 2 || self.arch.classes > crate::data::CLASS_CODES.len() {
            return bad(format!("model.classes {} outside 2..=8", self.arch.classes));
        }
        if let DataSource::Synthetic { n, image_size, test_fraction, .. } = &self.data {
            if *image_size < self.arch.input_size {
                return bad(format!(
                    "synth.image_size {image_size} smaller than model.input_size {}",
                    self.arch.input_size
                ));
            }
            if *n < self.arch.classes {
                return bad(format!("synth.n {n} below class count"));
            }
            if !(0.0..1.0).contains(test_fraction) {
                return bad(format!("synth.test_fraction {test_fraction} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Canonical value of every key that applies to this config.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("output.dir", self.output_dir.display().to_string());
        match &self.data {
            DataSource::Manifest { csv, image_dir } => {
                put("data.manifest", csv.display().to_string());
                if let Some(d) = image_dir {
                    put("data.image_dir", d.display().to_string());
                }
            }
            DataSource::Synthetic {
                n,
                imbalance,
                subgroups,
                image_size,
                test_fraction,
            } => {
                put("synth.n", n.to_string());
                put("synth.imbalance", imbalance.to_string());
                put("synth.subgroups", subgroups.to_string());
                put("synth.image_size", image_size.to_string());
                put("synth.test_fraction", test_fraction.to_string());
            }
        }
        let a = &self.arch;
        put("model.input_channels", a.input_channels.to_string());
        put("model.input_size", a.input_size.to_string());
        put(
            "model.conv_channels",
            a.conv_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        put("model.kernel_size", a.kernel_size.to_string());
        put("model.pool_size", a.pool_size.to_string());
        put("model.hidden", a.hidden.to_string());
        put("model.dropout", a.dropout.to_string());
        put("model.classes", a.classes.to_string());
        put("model.bias", a.bias.to_string());
        put("schedule.rounds", self.schedule.rounds.to_string());
        put("schedule.per_level_fraction", self.schedule.per_level_fraction.to_string());
        put("schedule.epochs_per_round", self.schedule.epochs_per_round.to_string());
        let o = &self.optimizer;
        put("optimizer.lr", o.lr.to_string());
        put("optimizer.weight_decay", o.weight_decay.to_string());
        put("optimizer.beta1", o.beta1.to_string());
        put("optimizer.beta2", o.beta2.to_string());
        put("optimizer.eps", o.eps.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put(
            "train.sampler",
            match self.sampling {
                SamplingMode::Replacement => "replacement",
                SamplingMode::Stratified => "stratified",
            }
            .into(),
        );
        put("train.hflip_p", self.hflip_p.to_string());
        m
    }

    /// Config file text that parses back to an equal config.
    pub fn to_text(&self) -> String {
        let map = self.to_map();
        KEYS.iter()
            .filter_map(|k| map.get(*k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    /// FNV-1a over the canonical map, excluding location keys.
    pub fn hash(&self) -> String {
        format!("{:016x}", hash_map(&self.to_map()))
    }
}

pub(crate) fn hash_map(map: &BTreeMap<String, String>) -> u64 {
    let mut h = super::seeds::Fnv::new();
    for (k, v) in map.iter().filter(|(k, _)| !LOCATION_KEYS.contains(&k.as_str())) {
        h.write(k.as_bytes());
        h.write(b"=");
        h.write(v.as_bytes());
        h.write(b"\n");
    }
    h.finish()
}

/// Keys whose canonical values differ between two config maps, ignoring where
/// the run lives.
pub fn config_drift(recorded: &BTreeMap<String, String>, current: &BTreeMap<String, String>) -> Vec<String> {
    let mut keys: Vec<&String> = recorded.keys().chain(current.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| !LOCATION_KEYS.contains(&k.as_str()) && recorded.get(*k) != current.get(*k))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.schedule.rounds, 10);
    }

    #[test]
    fn dotted_keys_and_comments() {
        let cfg = ExperimentConfig::from_text(
            "# test\nseed = 9\noptimizer.lr = 1e-2   # faster\nmodel.conv_channels = 4, 8\ntrain.sampler = stratified\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.arch.conv_channels, vec![4, 8]);
        assert_eq!(cfg.sampling, SamplingMode::Stratified);
        assert_eq!(cfg.to_map()["optimizer.lr"], "0.01");
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let err = ExperimentConfig::from_text("optimiser.lr = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("optimiser.lr"));
        assert!(ExperimentConfig::from_text("seed = 1\nseed = 2\n").is_err());
        assert!(ExperimentConfig::from_text("seed 1\n").is_err());
        assert!(ExperimentConfig::from_text("seed = x\n").is_err());
    }

    #[test]
    fn schedule_must_stay_below_full_sparsity() {
        assert!(ExperimentConfig::from_text("schedule.per_level_fraction = 0.2\nschedule.rounds = 6\n").is_err());
        assert!(ExperimentConfig::from_text("schedule.rounds = 0\n").is_err());
        assert!(ExperimentConfig::from_text("schedule.rounds = 1\n").is_ok());
    }

    #[test]
    fn manifest_source_excludes_synth_keys() {
        let cfg = ExperimentConfig::from_text("data.image_dir = imgs\ndata.manifest = m.csv\n").unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Manifest {
                csv: "m.csv".into(),
                image_dir: Some("imgs".into())
            }
        );
        assert!(ExperimentConfig::from_text("data.manifest = m.csv\nsynth.n = 10\n").is_err());
        assert!(!cfg.to_map().contains_key("synth.n"));
    }

    #[test]
    fn drift_names_fields_and_ignores_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.optimizer.lr = 0.002;
        b.output_dir = "elsewhere".into();
        assert_eq!(config_drift(&a.to_map(), &b.to_map()), vec!["optimizer.lr".to_string()]);
        assert_ne!(a.hash(), b.hash());
        b.optimizer.lr = a.optimizer.lr;
        assert_eq!(a.hash(), b.hash());
    }
}
