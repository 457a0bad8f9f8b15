// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Datasets: MNIST IDX files and seeded synthetic Gaussian blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// Inputs and targets with matching leading extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub split: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor, split: impl Into<String>) -> Result<Self> {
        if inputs.batch() != targets.batch() {
            return Err(Error::Data(format!(
                "{} inputs vs {} targets",
                inputs.batch(),
                targets.batch()
            )));
        }
        Ok(Dataset { inputs, targets, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> (Tensor, Tensor) {
        (self.inputs.select(indices), self.targets.select(indices))
    }

    /// The first `n` samples (or all of them when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(0, n),
            targets: self.targets.slice(0, n),
            split: self.split.clone(),
        }
    }

    /// Reinterprets every flat input as `shape` (e.g. `[1, 28, 28]`).
    pub fn reshape_inputs(mut self, shape: &[usize]) -> Result<Dataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.inputs = self.inputs.reshape(full).map_err(|e| Error::Data(e.to_string()))?;
        Ok(self)
    }

    /// Index of the 1-entry of each one-hot target.
    pub fn labels(&self) -> Vec<usize> {
        let k = self.targets.sample_len();
        self.targets
            .data()
            .chunks_exact(k)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0))
            .collect()
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data("truncated IDX header".into()))
}

/// Parses an IDX image container: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!("bad image magic {magic}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Data(format!("image payload has {} bytes, header implies {need}", body.len())));
    }
    Ok((n, rows, cols, body))
}

/// Parses an IDX label container.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!("bad label magic {magic}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!("label payload has {} bytes, header implies {n}", body.len())));
    }
    Ok(body)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads an image/label IDX pair: pixels scaled to `[0,1]`, labels one-hot over
/// `classes`. Inputs are flat `[n, rows·cols]`.
pub fn load_idx(images: &Path, labels: &Path, classes: usize, split: &str) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let lbl_bytes = read(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbl = parse_idx_labels(&lbl_bytes)?;
    if lbl.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", lbl.len())));
    }
    let inputs = Tensor::new(vec![n, rows * cols], pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let mut targets = Tensor::zeros(vec![n, classes]);
    for (i, &l) in lbl.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        targets.data_mut()[i * classes + l] = 1.0;
    }
    Dataset::new(inputs, targets, split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Loads MNIST from a directory holding the four standard uncompressed IDX files.
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let (prefix, tag) = match split {
        MnistSplit::Train => ("train", "train"),
        MnistSplit::Test => ("t10k", "test"),
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        MNIST_CLASSES,
        tag,
    )
}

/// Gaussian blob classification problem: fixed random class centers, unit within-class
/// variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Blobs {
    pub centers: Vec<Vec<f64>>,
}

impl Blobs {
    /// Centers drawn from `N(0, center_scale²·I)` with the given seed.
    pub fn random(classes: usize, dim: usize, center_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| center_scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();
        Blobs { centers }
    }

    /// `n_per_class` samples of every class, shuffled deterministically by `seed`.
    pub fn sample(&self, n_per_class: usize, seed: u64, split: &str) -> Result<Dataset> {
        if n_per_class == 0 || self.centers.is_empty() {
            return Err(Error::param("blobs need at least one class and one sample per class"));
        }
        let classes = self.centers.len();
        let dim = self.centers[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(classes * n_per_class);
        for _ in 0..n_per_class {
            for (c, center) in self.centers.iter().enumerate() {
                let x = center
                    .iter()
                    .map(|m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                rows.push((c, x));
            }
        }
        rows.shuffle(&mut rng);
        let n = rows.len();
        let mut inputs = Vec::with_capacity(n * dim);
        let mut targets = vec![0.0; n * classes];
        for (i, (c, x)) in rows.into_iter().enumerate() {
            inputs.extend(x);
            targets[i * classes + c] = 1.0;
        }
        Dataset::new(Tensor::new(vec![n, dim], inputs)?, Tensor::new(vec![n, classes], targets)?, split)
    }
}

/// Convenience wrapper: random centers and samples from one seed.
pub fn synth_blobs(classes: usize, dim: usize, n_per_class: usize, seed: u64, center_scale: f64) -> Result<Dataset> {
    Blobs::random(classes, dim, center_scale, seed).sample(n_per_class, seed.wrapping_add(1), "synthetic")
}
