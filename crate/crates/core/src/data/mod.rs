//! Datasets, two-view augmentation and deterministic batch ordering.

pub mod augment;
pub mod cifar;
pub mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ImageBatch;

pub use augment::{eval_transform, make_view_pair, AugmentationRecipe, ViewPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Metadata for a cached dataset split whose checksum has been verified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    pub num_samples: usize,
    pub num_classes: usize,
    pub cache_path: PathBuf,
    pub checksum: String,
}

/// Decoded images in `[0, 1]`, `N × C × S × S`, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub split: Split,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    /// Per-channel statistics used for normalization after augmentation.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn sample(&self, i: usize) -> Result<&[f32]> {
        if i >= self.len() {
            return Err(Error::Data {
                sample: Some(i),
                message: format!("index out of range for {} samples", self.len()),
            });
        }
        let l = self.sample_len();
        Ok(&self.images[i * l..(i + 1) * l])
    }

    /// The samples at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<ImageDataset> {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.sample(i)?);
            labels.push(self.labels[i]);
        }
        Ok(ImageDataset {
            images,
            labels,
            ..self.clone_meta()
        })
    }

    /// First `n` samples of a seeded permutation.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<ImageDataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }

    fn clone_meta(&self) -> ImageDataset {
        ImageDataset {
            name: self.name.clone(),
            split: self.split,
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            size: self.size,
            num_classes: self.num_classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.images.len() != self.len() * self.sample_len() {
            return Err(Error::Data {
                sample: None,
                message: "pixel buffer does not match sample count".into(),
            });
        }
        if let Some((i, _)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.num_classes)
        {
            return Err(Error::Data {
                sample: Some(i),
                message: format!("label out of range for {} classes", self.num_classes),
            });
        }
        Ok(())
    }

    /// Evaluation batch (deterministic transform, normalized) for `indices`.
    pub fn eval_batch(&self, indices: &[usize], image_size: usize) -> Result<ImageBatch> {
        let rows = crate::exec::map_range(indices.len(), |k| -> Result<Vec<f32>> {
            let i = indices[k];
            let mut v = eval_transform(self.sample(i)?, self.channels, self.size, image_size)
                .map_err(|e| with_sample(e, i))?;
            self.normalize(&mut v, image_size);
            Ok(v)
        });
        let mut pixels =
            Vec::with_capacity(indices.len() * self.channels * image_size * image_size);
        for r in rows {
            pixels.extend(r?);
        }
        ImageBatch::new(pixels, self.channels, image_size, indices.to_vec())
    }

    /// Normalizes a `[0, 1]` image of side `size` in place with the dataset statistics.
    pub fn normalize(&self, pixels: &mut [f32], size: usize) {
        let plane = size * size;
        for (c, chunk) in pixels.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c % self.channels], self.std[c % self.channels]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }

    /// Two augmented, normalized views of `indices` for training step `step`.
    pub fn view_batches(
        &self,
        indices: &[usize],
        recipe: &AugmentationRecipe,
        seed: u64,
        step: u64,
    ) -> Result<(ImageBatch, ImageBatch)> {
        let size = recipe.output_size;
        let pairs = crate::exec::map_range(indices.len(), |k| -> Result<ViewPair> {
            let i = indices[k];
            let mut pair = make_view_pair(
                self.sample(i)?,
                self.channels,
                self.size,
                recipe,
                seed,
                step,
                i as u64,
            )
            .map_err(|e| with_sample(e, i))?;
            self.normalize(&mut pair.first, size);
            self.normalize(&mut pair.second, size);
            Ok(pair)
        });
        let per = self.channels * size * size;
        let mut a = Vec::with_capacity(indices.len() * per);
        let mut b = Vec::with_capacity(indices.len() * per);
        for p in pairs {
            let p = p?;
            a.extend(p.first);
            b.extend(p.second);
        }
        Ok((
            ImageBatch::new(a, self.channels, size, indices.to_vec())?,
            ImageBatch::new(b, self.channels, size, indices.to_vec())?,
        ))
    }
}

fn with_sample(e: Error, i: usize) -> Error {
    match e {
        Error::Data { message, .. } => Error::Data {
            sample: Some(i),
            message,
        },
        other => other,
    }
}

/// Seeded permutation of `0..num_samples` cut into full batches; the last
/// partial batch is dropped.
pub fn epoch_iterator(
    num_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    if batch_size == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..num_samples).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(augment::mix(&[
        seed, epoch, 0x5eed,
    ])));
    idx.chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}
