//! Labelled image sets: the synthetic grating task and on-disk datasets.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::seeded_rng;
use crate::tensor::{Scalar, Tensor};

/// Images `[n, C, H, W]` stored at f32, with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Gathers `indices` into a batch cast to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.images.data()[i * len..(i + 1) * len].iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_raw(shape, data), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch::<f32>(indices);
        Dataset { images, labels, classes: self.classes }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// First 90% for training, remainder for validation.
    pub fn split(&self) -> Result<SplitDataset> {
        let n = self.len();
        let n_train = n * 9 / 10;
        if n_train == 0 || n_train == n {
            return Err(Error::InsufficientData(format!("{n} samples cannot be split 90/10")));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let val: Vec<usize> = (n_train..n).collect();
        Ok(SplitDataset { train: self.subset(&train), val: self.subset(&val) })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
}

/// Orientation and spatial frequency of the grating for class `c`.
pub fn class_grating(c: usize, classes: usize) -> (f64, f64) {
    let theta = std::f64::consts::PI * c as f64 / classes as f64;
    let cycles = 2.0 + (c % 2) as f64;
    (theta, cycles)
}

/// Single-channel class-conditional gratings with phase/amplitude jitter
/// and additive Gaussian noise, labelled round-robin and split 90/10.
pub fn synth_dataset(seed: u64, n_samples: usize, image_size: usize, classes: usize) -> Result<SplitDataset> {
    if classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    if n_samples == 0 || image_size == 0 {
        return Err(Error::Config("n_samples and image_size must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let px = image_size * image_size;
    let mut data = Vec::with_capacity(n_samples * px);
    let mut labels = Vec::with_capacity(n_samples);
    let two_pi = 2.0 * std::f64::consts::PI;
    for i in 0..n_samples {
        let c = i % classes;
        let (theta, cycles) = class_grating(c, classes);
        let (ct, st) = (theta.cos(), theta.sin());
        let phase: f64 = rng.random_range(-0.5..0.5);
        let amp: f64 = rng.random_range(0.8..1.2);
        for y in 0..image_size {
            for x in 0..image_size {
                let u = (x as f64 * ct + y as f64 * st) / image_size as f64;
                let noise: f64 = rng.sample(StandardNormal);
                data.push((amp * (two_pi * cycles * u + phase).sin() + 0.3 * noise) as f32);
            }
        }
        labels.push(c);
    }
    let images = Tensor::from_raw(vec![n_samples, 1, image_size, image_size], data);
    Dataset { images, labels, classes }.split()
}

/// `meta.json` of an on-disk dataset directory. Pixels live in
/// `images.f32` (little-endian f32, `[count, channels, size, size]`
/// row-major) and labels in `labels.u32` (little-endian u32).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    pub channels: usize,
    pub image_size: usize,
    pub classes: usize,
}

pub fn save_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta =
        DatasetMeta { count: ds.len(), channels: ds.channels(), image_size: ds.image_size(), classes: ds.classes };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let pixels: Vec<u8> = ds.images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join("images.f32"), pixels)?;
    let labels: Vec<u8> = ds.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    fs::write(dir.join("labels.u32"), labels)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let pixels = fs::read(dir.join("images.f32"))?;
    let labels = fs::read(dir.join("labels.u32"))?;
    let n_px = meta.count * meta.channels * meta.image_size * meta.image_size;
    if pixels.len() != n_px * 4 || labels.len() != meta.count * 4 {
        return Err(Error::Format(format!(
            "dataset {}: expected {} pixel bytes and {} label bytes, found {} and {}",
            dir.display(),
            n_px * 4,
            meta.count * 4,
            pixels.len(),
            labels.len()
        )));
    }
    let data: Vec<f32> = pixels.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let labels: Vec<usize> =
        labels.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= meta.classes) {
        return Err(Error::Format(format!("label {bad} out of range for {} classes", meta.classes)));
    }
    let images = Tensor::new(vec![meta.count, meta.channels, meta.image_size, meta.image_size], data)
        .map_err(|e| Error::Format(format!("dataset pixels: {e}")))?;
    Ok(Dataset { images, labels, classes: meta.classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_dataset(4, 120, 16, 6).unwrap();
        let b = synth_dataset(4, 120, 16, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(5, 120, 16, 6).unwrap());
        assert_eq!(a.train.len(), 108);
        assert_eq!(a.val.len(), 12);
        let mut all = a.train.label_histogram();
        for (x, y) in all.iter_mut().zip(a.val.label_histogram()) {
            *x += y;
        }
        let (lo, hi) = (all.iter().min().unwrap(), all.iter().max().unwrap());
        assert!(hi - lo <= 1, "{all:?}");
        let odd = synth_dataset(1, 125, 8, 6).unwrap();
        let mut h = odd.train.label_histogram();
        for (x, y) in h.iter_mut().zip(odd.val.label_histogram()) {
            *x += y;
        }
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_dataset(0, 10, 8, 1).is_err());
        assert!(synth_dataset(0, 1, 8, 2).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let ds = synth_dataset(2, 30, 8, 3).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        save_dataset_dir(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset_dir(dir.path()).unwrap(), ds);
        std::fs::write(dir.path().join("labels.u32"), [0u8; 3]).unwrap();
        assert!(matches!(load_dataset_dir(dir.path()), Err(Error::Format(_))));
    }
}
