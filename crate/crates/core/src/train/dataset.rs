//! Deterministic class-conditional toy images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Each class is an oriented sinusoidal grating with its own frequency and
/// per-channel phase, plus seeded pixel noise, clamped to `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub amplitude: f64,
    pub noise: f64,
}

impl SyntheticDataset {
    pub fn new(num_classes: usize, channels: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            num_classes,
            channels,
            height,
            width,
            seed,
            amplitude: 0.8,
            noise: 0.1,
        }
    }

    fn image_seed(&self, class: usize, index: u64) -> u64 {
        // splitmix-style mixing so nearby (class, index) pairs decorrelate
        let mut z = self
            .seed
            .wrapping_add((class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// `[C×H×W]` image for `(class, index)`.
    pub fn image(&self, class: usize, index: u64) -> Result<Tensor> {
        if class >= self.num_classes {
            return Err(Error::Index {
                op: "dataset class",
                index: class,
                extent: self.num_classes,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.image_seed(class, index));
        let theta = std::f64::consts::PI * class as f64 / self.num_classes as f64;
        let freq = 1.0 + (class % 3) as f64;
        let (h, w) = (self.height as f64, self.width as f64);
        let mut img = Tensor::zeros([self.channels, self.height, self.width]);
        let data = img.data_mut();
        for ch in 0..self.channels {
            let phase = (ch as f64 + 1.0) * (class as f64 + 1.0) * 0.7;
            for y in 0..self.height {
                for x in 0..self.width {
                    let u = x as f64 / w * theta.cos() + y as f64 / h * theta.sin();
                    let clean = self.amplitude * (2.0 * std::f64::consts::PI * freq * u + phase).sin();
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data[(ch * self.height + y) * self.width + x] = (clean + self.noise * z).clamp(-1.0, 1.0);
                }
            }
        }
        Ok(img)
    }

    /// Draws `batch` random `(class, index)` pairs from `rng` and stacks
    /// their images into `[B×C×H×W]`.
    pub fn batch(&self, batch: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(batch * per);
        let mut classes = Vec::with_capacity(batch);
        for _ in 0..batch {
            let c = rng.gen_range(0..self.num_classes);
            let i: u64 = rng.gen();
            data.extend_from_slice(self.image(c, i)?.data());
            classes.push(c);
        }
        let x = Tensor::new([batch, self.channels, self.height, self.width], data)?;
        Ok((x, classes))
    }
}

/// Mirrors image `b` of a `[B×C×H×W]` batch left to right, in place.
pub fn flip_horizontal(x: &mut Tensor, b: usize) {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let data = x.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let row = ((b * c + ch) * h + y) * w;
            data[row..row + w].reverse();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let d = SyntheticDataset::new(4, 3, 8, 8, 11);
        let a = d.image(2, 17).unwrap();
        assert_eq!(a, d.image(2, 17).unwrap());
        assert_ne!(a, d.image(2, 18).unwrap());
        assert_ne!(a, d.image(3, 17).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(d.image(4, 0).is_err());
    }

    #[test]
    fn classes_are_separable_on_average() {
        let d = SyntheticDataset::new(4, 1, 8, 8, 0);
        let mean = |c| {
            let mut acc = Tensor::zeros([1, 8, 8]);
            for i in 0..32 {
                acc = acc.zip_with(&d.image(c, i).unwrap(), |a, b| a + b / 32.0).unwrap();
            }
            acc
        };
        assert!(mean(0).max_abs_diff(&mean(1)) > 0.5);
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut x = Tensor::from_fn([2, 2, 3, 4], |i| i as f64);
        let orig = x.clone();
        flip_horizontal(&mut x, 1);
        assert_eq!(x.get(&[1, 0, 0, 0]), orig.get(&[1, 0, 0, 3]));
        assert_eq!(x.get(&[0, 1, 2, 0]), orig.get(&[0, 1, 2, 0]));
        flip_horizontal(&mut x, 1);
        assert_eq!(x, orig);
    }
}
