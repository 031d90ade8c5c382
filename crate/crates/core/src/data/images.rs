//! Image-like classification data whose lower half is pure noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{GmlpError, Result};
use crate::tensor::Tensor;

/// Row-major `height × width` images. Pixels in the top `height/2` rows
/// are a per-class binary prototype plus Gaussian jitter; the remaining
/// rows are standard normal noise independent of the label.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfNoiseImages {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// Standard deviation of the jitter on signal pixels.
    pub jitter: f64,
    /// Seed for the class prototypes (samples use their own seed).
    pub prototype_seed: u64,
}

impl Default for HalfNoiseImages {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            classes: 4,
            jitter: 0.6,
            prototype_seed: 17,
        }
    }
}

impl HalfNoiseImages {
    pub fn d(&self) -> usize {
        self.width * self.height
    }

    fn signal_rows(&self) -> usize {
        self.height / 2
    }

    /// Column indices of the noise half.
    pub fn noise_columns(&self) -> Vec<usize> {
        (self.signal_rows() * self.width..self.d()).collect()
    }

    pub fn is_noise(&self, column: usize) -> bool {
        column >= self.signal_rows() * self.width
    }

    fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let n = self.signal_rows() * self.width;
        (0..self.classes)
            .map(|_| (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect())
            .collect()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        if self.height < 2 || self.width == 0 || self.classes < 2 {
            return Err(GmlpError::Config("need height >= 2, width >= 1 and at least two classes".into()));
        }
        if n == 0 {
            return Err(GmlpError::EmptyDataset("cannot generate zero images".into()));
        }
        let protos = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signal = self.signal_rows() * self.width;
        let mut x = Vec::with_capacity(n * self.d());
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let class = rng.gen_range(0..self.classes);
            for &center in &protos[class] {
                let noise: f64 = rng.sample(StandardNormal);
                x.push(center + self.jitter * noise);
            }
            for _ in signal..self.d() {
                x.push(rng.sample(StandardNormal));
            }
            y.push(class);
        }
        let names = (0..self.d())
            .map(|p| format!("r{}c{}", p / self.width, p % self.width))
            .collect();
        Dataset::new(Tensor::new(vec![n, self.d()], x)?, y, self.classes)?.with_feature_names(names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_half_is_the_bottom_rows() {
        let task = HalfNoiseImages::default();
        assert_eq!(task.noise_columns(), (32..64).collect::<Vec<_>>());
        assert!(!task.is_noise(31) && task.is_noise(32));
    }

    #[test]
    fn signal_pixels_separate_classes_and_noise_does_not() {
        let task = HalfNoiseImages::default();
        let ds = task.generate(4000, 1).unwrap();
        assert_eq!(ds.d(), 64);
        // Mean gap between class 0 and class 1 per column.
        let mut sums = vec![[0.0f64; 2]; 64];
        let mut counts = [0.0f64; 2];
        for r in 0..ds.len() {
            let c = ds.y()[r];
            if c < 2 {
                counts[c] += 1.0;
                for (p, v) in ds.x().row(r).iter().enumerate() {
                    sums[p][c] += v;
                }
            }
        }
        let gap = |p: usize| (sums[p][0] / counts[0] - sums[p][1] / counts[1]).abs();
        let noise_max = task.noise_columns().into_iter().map(gap).fold(0.0, f64::max);
        assert!(noise_max < 0.2, "{noise_max}");
        let signal_max = (0..32).map(gap).fold(0.0, f64::max);
        assert!(signal_max > 0.8, "{signal_max}");
    }

    #[test]
    fn reproducible() {
        let task = HalfNoiseImages::default();
        assert_eq!(task.generate(50, 3).unwrap(), task.generate(50, 3).unwrap());
    }
}
