//! Shared pieces of the training loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, BasnError, Result};
use crate::image::FloatImage;
use crate::rng::StageRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Equally shaped training images.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    images: Vec<FloatImage<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Vec<FloatImage<T>>) -> Result<Self> {
        let first = images.first().ok_or_else(|| invalid("dataset is empty"))?;
        if let Some(bad) = images.iter().find(|i| !i.same_shape(first)) {
            return Err(BasnError::ShapeMismatch(format!(
                "dataset mixes {}x{}x{} and {}x{}x{} images",
                first.channels(),
                first.height(),
                first.width(),
                bad.channels(),
                bad.height(),
                bad.width()
            )));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[FloatImage<T>] {
        &self.images
    }

    pub fn get(&self, i: usize) -> &FloatImage<T> {
        &self.images[i]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let f = &self.images[0];
        (f.channels(), f.height(), f.width())
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        stack_images(indices.iter().map(|&i| &self.images[i]))
    }
}

pub(crate) fn stack_images<'a, T: Scalar>(imgs: impl Iterator<Item = &'a FloatImage<T>>) -> Tensor<T> {
    let items: Vec<Tensor<T>> = imgs.map(|i| i.to_tensor()).collect();
    Tensor::stack(&items).expect("equally shaped images")
}

/// Shuffled mini-batches for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut StageRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Ordered batches covering `0..n` (evaluation passes).
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Generic per-epoch metric row: named scalar values in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub values: Vec<(String, f64)>,
}

impl EpochMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Metric history of one training stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub stage: String,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricLog {
    pub fn new(stage: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, values: Vec<(&str, f64)>) {
        self.epochs.push(EpochMetrics {
            epoch,
            values: values.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
    }

    pub fn first(&self, name: &str) -> Option<f64> {
        self.epochs.first().and_then(|e| e.get(name))
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.epochs.last().and_then(|e| e.get(name))
    }

    pub fn series(&self, name: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.get(name)).collect()
    }

    /// Tab-separated table, one row per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.epochs.first() else {
            return out;
        };
        out.push_str("epoch");
        for (name, _) in &first.values {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.epoch.to_string());
            for (_, v) in &e.values {
                out.push_str(&format!("\t{v:.9e}"));
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn diverged(stage: &str, epoch: usize) -> BasnError {
    BasnError::TrainingDiverged {
        stage: stage.to_string(),
        epoch,
        restored_epoch: epoch.saturating_sub(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = StageRng::seed_from_u64(4);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(Dataset::<f32>::new(vec![]).is_err());
        let a = FloatImage::filled(3, 8, 8, 0.0f32);
        let b = FloatImage::filled(3, 8, 16, 0.0f32);
        assert!(Dataset::new(vec![a, b]).is_err());
    }
}
