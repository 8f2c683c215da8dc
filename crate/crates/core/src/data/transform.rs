use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reverse the width axis of a `C×H×W` image.
pub fn hflip(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Flip horizontally with probability `p`. Exactly one draw is taken from `rng`
/// per call so stream positions do not depend on `p`.
pub fn augment_hflip<R: Rng + ?Sized>(image: &Tensor, p: f64, rng: &mut R) -> Tensor {
    if rng.gen::<f64>() < p {
        hflip(image)
    } else {
        image.clone()
    }
}

/// Central `size×size` window of a `C×H×W` image; odd margins put the extra
/// pixel after the window.
pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if size == 0 || size > h || size > w {
        return Err(Error::Dimension(format!(
            "crop {size}x{size} larger than image {h}x{w}"
        )));
    }
    if size == h && size == w {
        return Ok(image.clone());
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and population standard deviation over center crops.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor>, target_size: usize) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let crop = center_crop(img, target_size)?;
            let c = crop.shape()[0];
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::Dimension(format!(
                    "mixed channel counts {} and {c}",
                    sum.len()
                )));
            }
            let plane = target_size * target_size;
            for ch in 0..c {
                for &v in &crop.data()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Ingestion("no training images to compute normalization".into()));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                ((q / n - m * m).max(0.0).sqrt() as f32).max(1e-6)
            })
            .collect();
        Ok(Normalization { mean, std })
    }
}

/// Center-crop to `target_size` then apply `(x - mean) / std` per channel.
pub fn preprocess(image: &Tensor, target_size: usize, norm: &Normalization) -> Result<Tensor> {
    let c = image.shape()[0];
    if norm.mean.len() != c || norm.std.len() != c {
        return Err(Error::Dimension(format!(
            "normalization has {} channels, image has {c}",
            norm.mean.len()
        )));
    }
    if let Some(s) = norm.std.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("normalization std {s} must be positive")));
    }
    let mut out = center_crop(image, target_size)?;
    let plane = target_size * target_size;
    for (ch, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_flip_and_involution() {
        let img = Tensor::from_slice(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = augment_hflip(&img, 1.0, &mut rng);
        assert_eq!(f.data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(augment_hflip(&f, 1.0, &mut rng), img);
        assert_eq!(augment_hflip(&img, 0.0, &mut rng), img);
    }

    #[test]
    fn symmetric_image_is_a_fixed_point() {
        let img = Tensor::from_slice(&[1, 2, 3], &[1.0, 5.0, 1.0, 2.0, 7.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            assert_eq!(augment_hflip(&img, 0.5, &mut rng), img);
        }
    }

    #[test]
    fn crop_takes_the_center() {
        let img = Tensor::from_slice(&[1, 4, 4], &(0..16).map(|v| v as f32).collect::<Vec<_>>());
        let c = center_crop(&img, 2).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(matches!(center_crop(&img, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_preprocess() {
        let img = Tensor::from_slice(&[2, 2, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let out = preprocess(&img, 2, &Normalization::identity(2)).unwrap();
        assert_eq!(out, img);
        let bad = Normalization {
            mean: vec![0.0; 2],
            std: vec![1.0, 0.0],
        };
        assert!(preprocess(&img, 2, &bad).is_err());
    }
}
