use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, LabeledExample};
use crate::error::{Error, Result};

/// Gaussian blobs around per-class mean images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shape: ImageShape,
    pub noise_sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Explicit mean images (one per class, `C*H*W` values in `[0,1]`).
    /// Generated from `seed` when absent.
    #[serde(default)]
    pub means: Option<Vec<Vec<f32>>>,
}

impl SyntheticSpec {
    /// Procedural mean images: a few soft bumps per class, peak-normalized to 1.
    pub fn mean_images(&self) -> Result<Vec<Vec<f32>>> {
        let len = self.shape.len();
        if let Some(means) = &self.means {
            if means.len() != self.classes || means.iter().any(|m| m.len() != len) {
                return Err(Error::Argument(format!(
                    "synthetic means must be {} images of {len} values",
                    self.classes
                )));
            }
            if means.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Range("synthetic mean pixels must lie in [0,1]".into()));
            }
            return Ok(means.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d65_616e);
        let ImageShape {
            channels,
            height,
            width,
        } = self.shape;
        let mut out = Vec::with_capacity(self.classes);
        for _ in 0..self.classes {
            let mut img = vec![0f32; len];
            for c in 0..channels {
                for _ in 0..3 {
                    let cy = rng.random_range(0.0..height as f64);
                    let cx = rng.random_range(0.0..width as f64);
                    let s = rng.random_range(0.08..0.22) * height.max(width) as f64;
                    for y in 0..height {
                        for x in 0..width {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(c * height + y) * width + x] += (-d2 / (2.0 * s * s)).exp() as f32;
                        }
                    }
                }
            }
            let peak = img.iter().copied().fold(0f32, f32::max).max(f32::MIN_POSITIVE);
            img.iter_mut().for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
            out.push(img);
        }
        Ok(out)
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.classes == 0 || self.shape.len() == 0 {
            return Err(Error::Argument("synthetic dataset needs classes and pixels".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Range("noise sigma must be >= 0".into()));
        }
        let means = self.mean_images()?;
        let noise = Normal::new(0.0, self.noise_sigma)
            .map_err(|e| Error::Range(format!("noise sigma: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let draw = |mean: &[f32], label: usize, count: usize, rng: &mut ChaCha8Rng| {
            (0..count)
                .map(|_| LabeledExample {
                    pixels: mean
                        .iter()
                        .map(|&m| (m as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32)
                        .collect(),
                    label,
                })
                .collect::<Vec<_>>()
        };
        let mut train = Vec::with_capacity(self.classes);
        let mut test = Vec::with_capacity(self.classes);
        for (label, mean) in means.iter().enumerate() {
            train.push(draw(mean, label, self.train_per_class, &mut rng));
            test.push(draw(mean, label, self.test_per_class, &mut rng));
        }
        Ok(Dataset {
            shape: self.shape,
            num_classes: self.classes,
            train,
            validation: vec![Vec::new(); self.classes],
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            shape: ImageShape::new(1, 6, 6),
            noise_sigma: sigma,
            train_per_class: 20,
            test_per_class: 5,
            seed: 7,
            means: None,
        }
    }

    #[test]
    fn zero_noise_reproduces_means() {
        let s = spec(0.0);
        let means = s.mean_images().unwrap();
        let ds = s.generate().unwrap();
        for (c, examples) in ds.train.iter().enumerate() {
            assert!(examples.iter().all(|e| e.pixels == means[c]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = spec(0.2).generate().unwrap();
        let b = spec(0.2).generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train[2].len(), 20);
        assert!(a.train.iter().flatten().all(|e| e.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn explicit_means_are_validated() {
        let mut s = spec(0.0);
        s.means = Some(vec![vec![0.5; 36]; 2]);
        assert!(s.generate().is_err());
        s.means = Some(vec![vec![0.5; 36]; 3]);
        assert!(s.generate().is_ok());
    }
}
