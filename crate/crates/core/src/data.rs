//! In-memory image classification datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let &[n, _, _, _] = images.shape() else {
            return Err(Error::Shape {
                op: "Dataset",
                detail: format!("images must be [N, C, H, W], got {:?}", images.shape()),
            });
        };
        if n == 0 {
            return Err(Error::Value {
                op: "Dataset",
                detail: "dataset has no samples".into(),
            });
        }
        if labels.len() != n {
            return Err(Error::Value {
                op: "Dataset",
                detail: format!("{n} images but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Value {
                op: "Dataset",
                detail: format!("label {bad} outside 0..{num_classes}"),
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of one sample.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch");
        (images, labels)
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }
}

/// Class-conditional Gaussian-blob images.
///
/// Each class owns a prototype made of a few Gaussian bumps with per-channel
/// amplitudes; a sample is its class prototype with a random contrast
/// jitter plus i.i.d. pixel noise. Labels cycle through the classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub num_classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_blobs")]
    pub blobs_per_class: usize,
    /// Size of the held-out split; 0 means none.
    #[serde(default)]
    pub eval_samples: usize,
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f64 {
    0.6
}

fn default_blobs() -> usize {
    2
}

impl SyntheticSpec {
    pub fn new(seed: u64, num_samples: usize, num_classes: usize, image_size: usize) -> Self {
        Self {
            seed,
            num_samples,
            num_classes,
            channels: default_channels(),
            image_size,
            noise: default_noise(),
            blobs_per_class: default_blobs(),
            eval_samples: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("data.num_samples", self.num_samples),
            ("data.num_classes", self.num_classes),
            ("data.channels", self.channels),
            ("data.image_size", self.image_size),
            ("data.blobs_per_class", self.blobs_per_class),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be a positive integer"));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be a nonnegative number"));
        }
        Ok(())
    }

    fn prototypes(&self) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.image_size as f64;
        let sigma = (s / 5.0).max(1.0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.num_classes)
            .map(|_| {
                let mut img = vec![0.0f32; self.channels * self.image_size * self.image_size];
                for _ in 0..self.blobs_per_class {
                    let cy = rng.random_range(0.0..s);
                    let cx = rng.random_range(0.0..s);
                    let amps: Vec<f64> = (0..self.channels).map(|_| normal.sample(&mut rng)).collect();
                    for (ch, amp) in amps.iter().enumerate() {
                        for y in 0..self.image_size {
                            for x in 0..self.image_size {
                                let r2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                                let v = amp * (-r2 / (2.0 * sigma * sigma)).exp();
                                img[(ch * self.image_size + y) * self.image_size + x] += v as f32;
                            }
                        }
                    }
                }
                img
            })
            .collect()
    }

    /// Samples drawn from the given stream; the prototypes depend only on
    /// `seed`, so different streams share the same classes.
    fn sample(&self, stream: u64, count: usize) -> Result<Dataset> {
        self.validate()?;
        let protos = self.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let per = self.channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % self.num_classes;
            let contrast = 1.0 + 0.2 * normal.sample(&mut rng);
            for &p in &protos[label] {
                let v = p as f64 * contrast + self.noise * normal.sample(&mut rng);
                data.push(v as f32);
            }
            labels.push(label);
        }
        let images = Tensor::new(vec![count, self.channels, self.image_size, self.image_size], data)?;
        Dataset::new(images, labels, self.num_classes)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.sample(1, self.num_samples)
    }

    /// Held-out samples of the same classes.
    pub fn generate_eval(&self, count: usize) -> Result<Dataset> {
        self.sample(2, count)
    }
}
