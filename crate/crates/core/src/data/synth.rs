//! Synthetic lesion images with demographic metadata.
//!
//! Each class is a parametric blob family: hue, size, eccentricity and border
//! irregularity differ per class, with per-image jitter, rotation, position and
//! pixel noise on a skin-toned background.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{netpbm, DatasetManifest, SampleRecord, Sex, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalanceProfile {
    Uniform,
    /// NV holds 70% of the samples, MEL is second, DF and VASC are rarest.
    IsicLike,
}

impl ImbalanceProfile {
    /// Class proportions in label order (MEL, NV, BCC, AK, BK, DF, VASC, SCC).
    fn weights(&self, classes: usize) -> Vec<f64> {
        match self {
            ImbalanceProfile::Uniform => vec![1.0; classes],
            ImbalanceProfile::IsicLike => {
                let w = [0.12, 0.70, 0.07, 0.025, 0.05, 0.007, 0.008, 0.02];
                (0..classes).map(|c| w.get(c).copied().unwrap_or(0.01)).collect()
            }
        }
    }
}

impl fmt::Display for ImbalanceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImbalanceProfile::Uniform => "uniform",
            ImbalanceProfile::IsicLike => "isic-like",
        })
    }
}

impl FromStr for ImbalanceProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ImbalanceProfile::Uniform),
            "isic-like" => Ok(ImbalanceProfile::IsicLike),
            other => Err(Error::Config(format!(
                "unknown imbalance profile {other:?} (uniform | isic-like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubgroupProfile {
    /// Ages uniform over 1..=90, sexes 50/50, no missing metadata.
    Balanced,
    /// Ages centred on 55, slightly more male records, a few missing cells, and
    /// image noise that grows with age.
    IsicLike,
}

impl fmt::Display for SubgroupProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubgroupProfile::Balanced => "balanced",
            SubgroupProfile::IsicLike => "isic-like",
        })
    }
}

impl FromStr for SubgroupProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(SubgroupProfile::Balanced),
            "isic-like" => Ok(SubgroupProfile::IsicLike),
            other => Err(Error::Config(format!(
                "unknown subgroup profile {other:?} (balanced | isic-like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub imbalance: ImbalanceProfile,
    pub subgroups: SubgroupProfile,
    pub image_size: usize,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n: 1600,
            classes: 8,
            imbalance: ImbalanceProfile::IsicLike,
            subgroups: SubgroupProfile::IsicLike,
            image_size: 32,
            test_fraction: 0.2,
        }
    }
}

/// Largest-remainder apportionment of `n` over `weights`, at least one per class.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let c = weights.len();
    let spare = n - c;
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = spare - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts.iter().map(|k| k + 1).collect()
}

struct Family {
    hue: f64,
    sat: f64,
    val: f64,
    radius: f64,
    ecc: f64,
    irregularity: f64,
    lobes: f64,
}

fn family(class: usize, classes: usize) -> Family {
    let k = class as f64;
    Family {
        hue: (k / classes as f64 + 0.03) % 1.0,
        sat: 0.55 + 0.3 * ((k * 1.7).sin() * 0.5 + 0.5),
        val: 0.45 + 0.35 * ((k * 2.3).cos() * 0.5 + 0.5),
        radius: 0.18 + 0.14 * (((k * 3.0) % classes as f64) / classes as f64),
        ecc: 0.5 + 0.5 * (((k * 5.0) % classes as f64) / classes as f64),
        irregularity: 0.02 + 0.22 * (((k * 7.0 + 3.0) % classes as f64) / classes as f64),
        lobes: 2.0 + (class % 6) as f64,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Interleaved RGB bytes of one `size×size` lesion image.
fn render<R: Rng>(class: usize, classes: usize, size: usize, noise: f64, rng: &mut R) -> Vec<u8> {
    let fam = family(class, classes);
    let s = size as f64;
    let radius = fam.radius * s * rng.gen_range(0.85..1.15);
    let (a, b) = (radius, radius * fam.ecc);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let cx = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let lesion = hsv_to_rgb(
        fam.hue + rng.gen_range(-0.02..0.02),
        fam.sat,
        fam.val * rng.gen_range(0.9..1.1),
    );
    let skin = hsv_to_rgb(0.07, rng.gen_range(0.2..0.35), rng.gen_range(0.75..0.9));
    let pixel_noise = Normal::new(0.0, noise).expect("noise sigma is finite");
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (dx * ct + dy * st, -dx * st + dy * ct);
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let phi = v.atan2(u);
            let edge = 1.0 + fam.irregularity * (fam.lobes * phi + phase).sin();
            // soft one-pixel border
            let inside = ((edge - r) * radius).clamp(-0.5, 0.5) + 0.5;
            let shade = 1.0 - 0.25 * (r / edge).min(1.0);
            for ch in 0..3 {
                let c = inside * lesion[ch] * shade + (1.0 - inside) * skin[ch];
                let c = (c + pixel_noise.sample(rng)).clamp(0.0, 1.0);
                out.push((c * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Generate `config.n` images into `out_dir` (PPM files plus `metadata.csv`)
/// and return the manifest exactly as [`super::load_manifest`] would read it back.
pub fn synth_generate(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.classes < 1 || config.n < config.classes {
        return Err(Error::Config(format!(
            "synthetic dataset needs n >= classes, got n={} classes={}",
            config.n, config.classes
        )));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {} outside [0, 1)",
            config.test_fraction
        )));
    }
    if config.image_size < 4 {
        return Err(Error::Config("synthetic images must be at least 4x4".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let counts = apportion(config.n, &config.imbalance.weights(config.classes));

    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat(c).take(k))
        .collect();
    labels.shuffle(&mut rng);

    // stratified split: a fixed share of each class goes to test, never the last record
    let mut split = vec![Split::Train; labels.len()];
    for (c, &k) in counts.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_test = ((k as f64 * config.test_fraction).round() as usize).min(k.saturating_sub(1));
        for &i in &members[..n_test] {
            split[i] = Split::Test;
        }
    }

    let age_dist = Normal::new(55.0f64, 18.0).expect("valid");
    let size = config.image_size;
    let mut records = Vec::with_capacity(labels.len());
    for (id, &label) in labels.iter().enumerate() {
        let (age, sex) = match config.subgroups {
            SubgroupProfile::Balanced => {
                let age = rng.gen_range(1..=90u32);
                let sex = if rng.gen_bool(0.5) { Sex::Male } else { Sex::Female };
                (Some(age), Some(sex))
            }
            SubgroupProfile::IsicLike => {
                let age = age_dist.sample(&mut rng).round().clamp(1.0, 90.0) as u32;
                let sex = if rng.gen_bool(0.52) { Sex::Male } else { Sex::Female };
                let age = (!rng.gen_bool(0.03)).then_some(age);
                let sex = (!rng.gen_bool(0.02)).then_some(sex);
                (age, sex)
            }
        };
        let noise = match (config.subgroups, age) {
            (SubgroupProfile::IsicLike, Some(a)) => 0.03 + 0.07 * a as f64 / 90.0,
            _ => 0.04,
        };
        let pixels = render(label, config.classes, size, noise, &mut rng);
        let name = format!("img_{id:05}.ppm");
        let path = out_dir.join(&name);
        let bytes = netpbm::encode(size, size, 3, &pixels);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        records.push(SampleRecord {
            id,
            image_path: name,
            image: netpbm::decode(&bytes)?,
            label,
            age,
            sex,
            split: split[id],
        });
    }
    let manifest = DatasetManifest::from_records(records, out_dir.to_path_buf());
    manifest.write_csv(&out_dir.join("metadata.csv"))?;
    Ok(manifest)
}
