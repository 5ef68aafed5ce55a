//! Labeled embedding datasets.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid, Error, Result};
use crate::math::Matrix;

/// Labeled embedding vectors of one domain, stored in single precision.
///
/// Records keep their insertion order; `features` is row-major with `dim`
/// entries per record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    num_classes: usize,
    domain_id: String,
    features: Vec<f32>,
    labels: Vec<u32>,
}

impl FeatureDataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        domain_id: impl Into<String>,
        features: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self {
            dim,
            num_classes,
            domain_id: domain_id.into(),
            features,
            labels,
        })
    }

    /// An empty dataset with the given shape.
    pub fn empty(dim: usize, num_classes: usize, domain_id: impl Into<String>) -> Result<Self> {
        Self::new(dim, num_classes, domain_id, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Record indices grouped by class, in record order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// A new dataset made of the given records, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.vector(i));
            labels.push(self.labels[i]);
        }
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            domain_id: self.domain_id.clone(),
            features,
            labels,
        }
    }

    /// Promotes the given records to a double-precision batch.
    pub fn batch(&self, indices: &[usize]) -> Matrix {
        gather(&self.features, self.dim, indices)
    }

    /// Every record as a double-precision matrix.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.features.iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.len(), self.dim, data).expect("shape checked on construction")
    }
}

fn gather(features: &[f32], dim: usize, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), dim);
    for (o, &i) in indices.iter().enumerate() {
        let src = &features[i * dim..(i + 1) * dim];
        for (d, &s) in out.row_mut(o).iter_mut().zip(src) {
            *d = f64::from(s);
        }
    }
    out
}

/// A dataset whose labels sit behind an access counter.
///
/// Client training shards are wrapped in this type so that adaptation code can
/// only reach the vectors for free; any label read is recorded and can be
/// audited afterwards. Clones share the counter.
#[derive(Debug, Clone)]
pub struct GuardedDataset {
    inner: FeatureDataset,
    reads: Arc<AtomicUsize>,
}

impl GuardedDataset {
    pub fn new(inner: FeatureDataset) -> Self {
        Self {
            inner,
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn with_counter(inner: FeatureDataset, reads: Arc<AtomicUsize>) -> Self {
        Self { inner, reads }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        self.inner.vector(i)
    }

    pub fn batch(&self, indices: &[usize]) -> Matrix {
        self.inner.batch(indices)
    }

    pub fn to_matrix(&self) -> Matrix {
        self.inner.to_matrix()
    }

    /// Counted access to the labels.
    pub fn labels(&self) -> &[u32] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.inner.labels()
    }

    /// Counted access to the full labeled dataset.
    pub fn reveal(&self) -> &FeatureDataset {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.inner
    }

    pub fn label_reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.reads)
    }
}

impl PartialEq for GuardedDataset {
    fn eq(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureDataset {
        FeatureDataset::new(2, 3, "d", vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn rejects_labels_out_of_range() {
        let err = FeatureDataset::new(1, 2, "d", vec![0.0], vec![2]).unwrap_err();
        assert_eq!(
            err,
            Error::LabelOutOfRange {
                label: 2,
                num_classes: 2
            }
        );
    }

    #[test]
    fn rejects_non_finite_vectors() {
        let err = FeatureDataset::new(1, 2, "d", vec![f32::NAN], vec![0]).unwrap_err();
        assert_eq!(err, Error::NonFinite("feature vector"));
    }

    #[test]
    fn subset_keeps_requested_order() {
        let ds = tiny();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(sub.labels(), &[1, 0]);
        assert_eq!(sub.vector(0), &[4.0, 5.0]);
        assert_eq!(ds.class_counts(), vec![1, 1, 1]);
    }

    #[test]
    fn guarded_labels_are_counted_across_clones() {
        let g = GuardedDataset::new(tiny());
        let copy = g.clone();
        let _ = g.batch(&[0, 1]);
        assert_eq!(g.label_reads(), 0);
        let _ = copy.labels();
        assert_eq!(g.label_reads(), 1);
    }
}
