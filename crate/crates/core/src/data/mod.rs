//! Labeled image datasets, IDX loading, client partitioning, trigger sets
//! and backdoor patterns.

mod idx;
mod partition;
mod trigger;

pub use idx::{load_idx, load_idx_images, load_idx_labels, write_idx, IMAGES_MAGIC, LABELS_MAGIC};
pub use partition::{
    inverse_law_size, partition_dirichlet, partition_inverse_law, InverseLawParams, Partition,
};
pub use trigger::{apply_trigger, make_trigger_set, BackdoorPattern, TriggerSet};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Shape;

/// Images stored row-major as `f32` in `[0, 1]`, one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    images: Vec<f32>,
    labels: Vec<u8>,
    shape: Shape,
    num_classes: usize,
}

impl LabeledData {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, shape: Shape, num_classes: usize) -> Result<Self> {
        let size = shape.size();
        if size == 0 || images.len() % size != 0 {
            return Err(Error::ShapeMismatch {
                expected: size,
                actual: images.len(),
            });
        }
        let count = images.len() / size;
        if count != labels.len() {
            return Err(Error::CountMismatch {
                images: count,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn set_label(&mut self, i: usize, label: usize) {
        self.labels[i] = label as u8;
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let size = self.shape.size();
        &self.images[i * size..(i + 1) * size]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let size = self.shape.size();
        &mut self.images[i * size..(i + 1) * size]
    }

    /// Copies the selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        let size = self.shape.size();
        let mut images = Vec::with_capacity(indices.len() * size);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        LabeledData {
            images,
            labels,
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> LabeledData {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx)
    }

    /// Stacks the selected samples into a `(batch, features)` matrix.
    pub fn batch(&self, indices: &[usize]) -> Array2<f64> {
        let size = self.shape.size();
        let mut out = Array2::zeros((indices.len(), size));
        for (row, &i) in out.rows_mut().into_iter().zip(indices) {
            for (o, &v) in row.into_iter().zip(self.sample(i)) {
                *o = v as f64;
            }
        }
        out
    }

    pub fn all(&self) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Sample indices grouped by class, each group in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        by_class
    }
}
