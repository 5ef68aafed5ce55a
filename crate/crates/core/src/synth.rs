//! Synthetic embedding domains with controllable class separability and
//! orthogonal-affine domain shift.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::FeatureDataset;
use crate::error::{invalid, Error, Result};
use crate::math::{axpy, dot, normalize, Matrix};
use crate::rng::{rng_from, stream};

/// `x -> matrix * x + translation` with an orthogonal `matrix`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix,
    translation: Vec<f64>,
}

const ORTHOGONALITY_TOL: f64 = 1e-8;

impl AffineTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = Matrix::zeros(dim, dim);
        for i in 0..dim {
            matrix.set(i, i, 1.0);
        }
        Self {
            matrix,
            translation: vec![0.0; dim],
        }
    }

    /// Validates orthogonality of `matrix` before accepting it.
    pub fn new(matrix: Matrix, translation: Vec<f64>) -> Result<Self> {
        let dim = matrix.rows();
        if matrix.cols() != dim || translation.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: translation.len(),
            });
        }
        let t = Self {
            matrix,
            translation,
        };
        let err = t.orthogonality_error();
        if !(err <= ORTHOGONALITY_TOL) {
            return Err(invalid(alloc::format!(
                "transform matrix is not orthogonal (max |M^T M - I| = {err:e})"
            )));
        }
        Ok(t)
    }

    /// Rotates by `angle` radians in `dim / 2` random mutually orthogonal
    /// planes. For even `dim` every vector turns by exactly `angle`.
    pub fn rotation(dim: usize, angle: f64, seed: u64) -> Self {
        let basis = random_orthonormal_basis(dim, dim, seed);
        let mut planes = Vec::new();
        for k in 0..dim / 2 {
            planes.push((basis[2 * k].clone(), basis[2 * k + 1].clone()));
        }
        Self::from_planes(dim, &planes, angle)
    }

    /// Rotates by `angle` radians in planes spanned by consecutive
    /// orthonormalized class directions, so each class mean turns towards the
    /// next one. An odd class out is paired with a random direction orthogonal
    /// to all means.
    pub fn class_plane_rotation(class_means: &Matrix, angle: f64, seed: u64) -> Result<Self> {
        let dim = class_means.cols();
        let mut dirs = gram_schmidt(class_means.row_iter().map(<[f64]>::to_vec), dim);
        if dirs.len() % 2 == 1 {
            if dirs.len() == dim {
                dirs.pop();
            } else {
                let mut extra = random_orthonormal_basis(dim, dim, seed);
                let completed = gram_schmidt(dirs.iter().cloned().chain(extra.drain(..)), dim);
                dirs = completed.into_iter().take(dirs.len() + 1).collect();
            }
        }
        let planes: Vec<_> = dirs
            .chunks_exact(2)
            .map(|p| (p[0].clone(), p[1].clone()))
            .collect();
        Ok(Self::from_planes(dim, &planes, angle))
    }

    fn from_planes(dim: usize, planes: &[(Vec<f64>, Vec<f64>)], angle: f64) -> Self {
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let mut t = Self::identity(dim);
        for (u, v) in planes {
            for i in 0..dim {
                for j in 0..dim {
                    let delta =
                        (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
                    let m = t.matrix.get(i, j) + delta;
                    t.matrix.set(i, j, m);
                }
            }
        }
        t
    }

    pub fn with_translation(mut self, translation: Vec<f64>) -> Result<Self> {
        if translation.len() != self.translation.len() {
            return Err(Error::DimensionMismatch {
                expected: self.translation.len(),
                actual: translation.len(),
            });
        }
        self.translation = translation;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn translation(&self) -> &[f64] {
        &self.translation
    }

    /// Largest entry of `|M^T M - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += self.matrix.get(k, i) * self.matrix.get(k, j);
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.translation.clone();
        for (o, row) in out.iter_mut().zip(self.matrix.row_iter()) {
            *o += dot(row, x);
        }
        out
    }
}

fn gram_schmidt(vectors: impl Iterator<Item = Vec<f64>>, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for mut v in vectors {
        if out.len() == dim {
            break;
        }
        // two passes of modified Gram-Schmidt keep the basis orthogonal to ~1e-15
        for _ in 0..2 {
            for q in &out {
                let p = dot(q, &v);
                axpy(-p, q, &mut v);
            }
        }
        if crate::math::norm(&v) > 1e-10 {
            normalize(&mut v);
            out.push(v);
        }
    }
    out
}

fn random_orthonormal_basis(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed, &[stream::CLASS_MEANS, 0xB45]);
    let draws = core::iter::from_fn(move || {
        Some(
            (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>(),
        )
    });
    let mut basis = gram_schmidt(draws.take(4 * dim + 8), dim);
    basis.truncate(count);
    basis
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    pub num_classes: usize,
    /// Unit-norm class directions, one row per class.
    pub class_means: Matrix,
    /// Isotropic within-class noise standard deviation.
    pub within_class_scale: f64,
    pub domain_transform: AffineTransform,
    /// Radius of the class means.
    pub separability: f64,
    /// Seed of the sample draws.
    pub seed: u64,
    pub domain_id: String,
}

impl SynthSpec {
    /// Class means are drawn uniformly on the unit sphere from `means_seed`;
    /// the domain starts untransformed and samples are drawn from `means_seed`
    /// until [`SynthSpec::with_seed`] says otherwise.
    pub fn new(
        dim: usize,
        num_classes: usize,
        separability: f64,
        within_class_scale: f64,
        means_seed: u64,
    ) -> Self {
        let mut rng = rng_from(means_seed, &[stream::CLASS_MEANS]);
        let mut class_means = Matrix::zeros(num_classes, dim);
        for c in 0..num_classes {
            let row = class_means.row_mut(c);
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            normalize(row);
        }
        Self {
            dim,
            num_classes,
            class_means,
            within_class_scale,
            domain_transform: AffineTransform::identity(dim),
            separability,
            seed: means_seed,
            domain_id: String::from("synthetic"),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_transform(mut self, t: AffineTransform) -> Self {
        self.domain_transform = t;
        self
    }

    pub fn with_domain(mut self, id: impl Into<String>) -> Self {
        self.domain_id = id.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 {
            return Err(invalid("dim and num_classes must be positive"));
        }
        if self.class_means.rows() != self.num_classes || self.class_means.cols() != self.dim {
            return Err(invalid("class_means must be num_classes x dim"));
        }
        if self.domain_transform.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: self.domain_transform.dim(),
            });
        }
        if !(self.within_class_scale >= 0.0) || !self.within_class_scale.is_finite() {
            return Err(invalid("within_class_scale must be finite and >= 0"));
        }
        if !(self.separability > 0.0) || !self.separability.is_finite() {
            return Err(invalid("separability must be positive"));
        }
        let err = self.domain_transform.orthogonality_error();
        if !(err <= ORTHOGONALITY_TOL) {
            return Err(invalid("domain transform is not orthogonal"));
        }
        Ok(())
    }

    /// Class mean after scaling and the domain transform.
    pub fn transformed_mean(&self, class: usize) -> Vec<f64> {
        let scaled: Vec<f64> = self
            .class_means
            .row(class)
            .iter()
            .map(|v| v * self.separability)
            .collect();
        self.domain_transform.apply(&scaled)
    }
}

/// Draws `count_per_class[c]` records of every class `c`, class by class.
pub fn generate_synthetic(spec: &SynthSpec, count_per_class: &[usize]) -> Result<FeatureDataset> {
    spec.validate()?;
    if count_per_class.len() != spec.num_classes {
        return Err(Error::DimensionMismatch {
            expected: spec.num_classes,
            actual: count_per_class.len(),
        });
    }
    let total: usize = count_per_class.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng_from(spec.seed, &[stream::SAMPLES]);
    let mut features = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    let mut x = vec![0.0; spec.dim];
    for (c, &n) in count_per_class.iter().enumerate() {
        let mean = spec.class_means.row(c);
        for _ in 0..n {
            for (xi, &m) in x.iter_mut().zip(mean) {
                let z: f64 = rng.sample(StandardNormal);
                *xi = m * spec.separability + spec.within_class_scale * z;
            }
            features.extend(
                spec.domain_transform
                    .apply(&x)
                    .into_iter()
                    .map(|v| v as f32),
            );
            labels.push(c as u32);
        }
    }
    FeatureDataset::new(
        spec.dim,
        spec.num_classes,
        spec.domain_id.clone(),
        features,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn noiseless_clusters_are_perfectly_nearest_neighbor_separable() {
        let spec = SynthSpec::new(8, 4, 1.0, 0.0, 3);
        let ds = generate_synthetic(&spec, &[5, 5, 5, 5]).unwrap();
        let m = ds.to_matrix();
        for i in 0..ds.len() {
            // nearest other record (1-NN, leave-one-out)
            let mut best = (f64::INFINITY, 0);
            for j in 0..ds.len() {
                if i == j {
                    continue;
                }
                let d: f64 = m
                    .row(i)
                    .iter()
                    .zip(m.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, ds.label(j));
                }
            }
            assert_eq!(best.1, ds.label(i));
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let spec = SynthSpec::new(6, 3, 2.0, 1.0, 11).with_seed(5);
        let a = generate_synthetic(&spec, &[4, 0, 7]).unwrap();
        let b = generate_synthetic(&spec, &[4, 0, 7]).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec.clone().with_seed(6), &[4, 0, 7]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_total_count_is_an_error() {
        let spec = SynthSpec::new(2, 2, 1.0, 1.0, 0);
        assert_eq!(
            generate_synthetic(&spec, &[0, 0]).unwrap_err(),
            Error::EmptyDataset
        );
    }

    #[test]
    fn rotations_are_orthogonal() {
        let r = AffineTransform::rotation(16, PI / 6.0, 9);
        assert!(r.orthogonality_error() < 1e-12);
        let spec = SynthSpec::new(16, 5, 1.0, 0.0, 9);
        let q = AffineTransform::class_plane_rotation(&spec.class_means, PI / 6.0, 2).unwrap();
        assert!(q.orthogonality_error() < 1e-12);
    }

    #[test]
    fn random_plane_rotation_turns_every_vector_by_the_angle() {
        let r = AffineTransform::rotation(10, PI / 6.0, 4);
        let x: Vec<f64> = (0..10).map(|i| (i as f64).sin() + 0.3).collect();
        let y = r.apply(&x);
        let cos = dot(&x, &y) / dot(&x, &x);
        assert!((cos - (PI / 6.0).cos()).abs() < 1e-12);
    }

    #[test]
    fn class_plane_rotation_moves_every_class_mean() {
        let spec = SynthSpec::new(12, 5, 1.0, 0.0, 1);
        let q = AffineTransform::class_plane_rotation(&spec.class_means, PI / 6.0, 2).unwrap();
        for c in 0..5 {
            let m = spec.class_means.row(c);
            let cos = dot(m, &q.apply(m));
            assert!(cos < 0.999, "class {c} unmoved");
        }
    }

    #[test]
    fn non_orthogonal_matrices_are_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(AffineTransform::new(m, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn negative_noise_is_rejected() {
        let mut spec = SynthSpec::new(2, 2, 1.0, 1.0, 0);
        spec.within_class_scale = -1.0;
        assert!(spec.validate().is_err());
    }
}
