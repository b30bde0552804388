//! Hermetic dataset generators plus an IDX-format loader for small real
//! subsets. All generators are pure functions of their seed.

use std::io::Read;
use std::path::Path;

use crate::error::{ActError, Result};
use crate::numerics::{counter_normal, counter_rng, Precision, StreamKey, Tensor};
use crate::tape::Batch;

const DATA_STREAM: u64 = (1 << 44) + 1;
const BATCH_STREAM: u64 = (1 << 44) + 2;

/// An in-memory labeled dataset, row-major features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_samples: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        input_dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || features.len() % input_dim != 0 {
            return Err(ActError::ShapeMismatch(format!(
                "{} features with dim {input_dim}",
                features.len()
            )));
        }
        let num_samples = features.len() / input_dim;
        if labels.len() != num_samples {
            return Err(ActError::DataLength {
                expected: num_samples,
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(ActError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            num_samples,
            input_dim,
            classes,
        })
    }

    /// Samples a fixed-size batch with replacement; deterministic in
    /// `(seed, step)`.
    pub fn batch(
        &self,
        seed: u64,
        step: u64,
        batch_size: usize,
        precision: Precision,
    ) -> Result<Batch> {
        let key = StreamKey::new(seed, BATCH_STREAM);
        let mut x = Vec::with_capacity(batch_size * self.input_dim);
        let mut labels = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let u = counter_rng(key, step * batch_size as u64 + i as u64);
            let idx = ((u * self.num_samples as f64) as usize).min(self.num_samples - 1);
            x.extend_from_slice(
                &self.features[idx * self.input_dim..(idx + 1) * self.input_dim],
            );
            labels.push(self.labels[idx]);
        }
        Ok(Batch {
            x: Tensor::matrix(batch_size, self.input_dim, x, precision)?,
            labels,
        })
    }

    /// The whole dataset as one batch (evaluation).
    pub fn full_batch(&self, precision: Precision) -> Result<Batch> {
        Ok(Batch {
            x: Tensor::matrix(
                self.num_samples,
                self.input_dim,
                self.features.clone(),
                precision,
            )?,
            labels: self.labels.clone(),
        })
    }
}

/// Two spherical Gaussians at `+-separation/2` along the all-ones diagonal;
/// linearly separable when `separation` clears the noise.
pub fn two_gaussians(
    num_samples: usize,
    input_dim: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    let key = StreamKey::new(seed, DATA_STREAM);
    let shift = separation / 2.0 / (input_dim as f64).sqrt();
    let mut features = Vec::with_capacity(num_samples * input_dim);
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let label = i % 2;
        let sign = if label == 0 { -1.0 } else { 1.0 };
        for d in 0..input_dim {
            let z = counter_normal(key, (i * input_dim + d) as u64);
            features.push(sign * shift + noise * z);
        }
        labels.push(label);
    }
    Dataset::new(features, labels, input_dim, 2)
}

/// The interleaved half-circles task in two dimensions.
pub fn two_moons(num_samples: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let key = StreamKey::new(seed, DATA_STREAM);
    let mut features = Vec::with_capacity(num_samples * 2);
    let mut labels = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let label = i % 2;
        let t = std::f64::consts::PI * counter_rng(key, (3 * i) as u64);
        let (cx, cy, flip) = if label == 0 {
            (0.0, 0.0, 1.0)
        } else {
            (1.0, 0.5, -1.0)
        };
        let nx = noise * counter_normal(key, (3 * i + 1) as u64);
        let ny = noise * counter_normal(key, (3 * i + 2) as u64);
        features.push(cx + flip * t.cos() + nx);
        features.push(cy + flip * t.sin() - if label == 0 { 0.0 } else { 0.0 } + ny);
        labels.push(label);
    }
    Dataset::new(features, labels, 2, 2)
}

/// Binary labels from a frozen random tanh teacher network: inputs are
/// standard normal, the label says whether the teacher's scalar score clears
/// the median score.
pub fn teacher_network(
    num_samples: usize,
    input_dim: usize,
    teacher_hidden: usize,
    seed: u64,
) -> Result<Dataset> {
    let key = StreamKey::new(seed, DATA_STREAM);
    let wkey = StreamKey::new(seed ^ 0x7eac, DATA_STREAM);
    let mut features = Vec::with_capacity(num_samples * input_dim);
    for i in 0..num_samples * input_dim {
        features.push(counter_normal(key, i as u64));
    }
    // Teacher: input -> tanh(hidden) -> scalar.
    let w1: Vec<f64> = (0..input_dim * teacher_hidden)
        .map(|i| counter_normal(wkey, i as u64) / (input_dim as f64).sqrt())
        .collect();
    let w2: Vec<f64> = (0..teacher_hidden)
        .map(|i| counter_normal(wkey, (input_dim * teacher_hidden + i) as u64))
        .collect();
    let mut scores = Vec::with_capacity(num_samples);
    for s in 0..num_samples {
        let x = &features[s * input_dim..(s + 1) * input_dim];
        let mut score = 0.0;
        for h in 0..teacher_hidden {
            let mut acc = 0.0;
            for (d, &xv) in x.iter().enumerate() {
                acc += xv * w1[d * teacher_hidden + h];
            }
            score += acc.tanh() * w2[h];
        }
        scores.push(score);
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[num_samples / 2];
    let labels = scores.iter().map(|&s| (s > median) as usize).collect();
    Dataset::new(features, labels, input_dim, 2)
}

// ── IDX format ──────────────────────────────────────────────────────────────

fn read_idx_header<R: Read>(r: &mut R, expect_dims: u8) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(ActError::BadFormat("bad IDX magic".into()));
    }
    if magic[2] != 0x08 {
        return Err(ActError::BadFormat(format!(
            "unsupported IDX dtype 0x{:02x} (only unsigned byte)",
            magic[2]
        )));
    }
    if magic[3] != expect_dims {
        return Err(ActError::BadFormat(format!(
            "expected {expect_dims}-dimensional IDX, got {}",
            magic[3]
        )));
    }
    let mut dims = Vec::with_capacity(expect_dims as usize);
    let mut buf = [0u8; 4];
    for _ in 0..expect_dims {
        r.read_exact(&mut buf)?;
        dims.push(u32::from_be_bytes(buf) as usize);
    }
    Ok(dims)
}

/// Loads an IDX image file (u8, `N x rows x cols`) and its label file
/// (u8, `N`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut img = std::io::BufReader::new(std::fs::File::open(images)?);
    let dims = read_idx_header(&mut img, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let mut raw = vec![0u8; n * rows * cols];
    img.read_exact(&mut raw)?;
    let features: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();

    let mut lab = std::io::BufReader::new(std::fs::File::open(labels)?);
    let ldims = read_idx_header(&mut lab, 1)?;
    if ldims[0] != n {
        return Err(ActError::BadFormat(format!(
            "{} labels for {n} images",
            ldims[0]
        )));
    }
    let mut lraw = vec![0u8; n];
    lab.read_exact(&mut lraw)?;
    let labels: Vec<usize> = lraw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, rows * cols, classes)
}
