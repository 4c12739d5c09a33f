//! Frechet distance between Gaussian fits of volume features.
//!
//! Features are a fixed, seeded random projection of 2x average-pooled
//! volumes. Values are comparable only between runs using the same
//! extractor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_FEATURE_DIM: usize = 32;
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Block-average over 2x2x2 neighbourhoods; edge blocks of odd dimensions
/// average what they cover.
pub fn avg_pool2(volume: &Volume) -> Volume {
    let [d, h, w] = volume.shape();
    let out_shape = [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for od in 0..out_shape[0] {
        for oh in 0..out_shape[1] {
            for ow in 0..out_shape[2] {
                let mut sum = 0.0;
                let mut n = 0usize;
                for z in 2 * od..(2 * od + 2).min(d) {
                    for y in 2 * oh..(2 * oh + 2).min(h) {
                        for x in 2 * ow..(2 * ow + 2).min(w) {
                            sum += volume.get(z, y, x);
                            n += 1;
                        }
                    }
                }
                out.push(sum / n as f64);
            }
        }
    }
    Volume::new(out_shape, out).expect("pooled shape")
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    shape: [usize; 3],
    /// `dim x pooled_len`, row-major.
    projection: DMatrix<f64>,
}

impl FeatureExtractor {
    pub fn new(shape: [usize; 3], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension must be positive".into(),
            ));
        }
        let pooled: usize = shape.iter().map(|s| s.div_ceil(2)).product();
        let scale = 1.0 / (pooled as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = DMatrix::from_fn(dim, pooled, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Ok(Self { shape, projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn features(&self, volume: &Volume) -> Result<DVector<f64>> {
        volume.ensure_same_shape(self.shape)?;
        let pooled = avg_pool2(volume);
        Ok(&self.projection * DVector::from_column_slice(pooled.voxels()))
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn gaussian_fit(features: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { found: n, needed: 2 });
    }
    let d = features[0].len();
    let mut mean = DVector::zeros(d);
    for f in features {
        mean += f;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = f - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn ridge(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    let reg = cov + DMatrix::identity(d, d) * COVARIANCE_RIDGE;
    let min = SymmetricEigen::new((&reg + reg.transpose()) * 0.5)
        .eigenvalues
        .min();
    if min < 0.0 {
        return Err(Error::NotPositiveSemiDefinite(min));
    }
    Ok(reg)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, after
/// adding a small ridge to both covariances.
pub fn frechet_distance(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean_a.len();
    if mean_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::ShapeMismatch {
            expected: vec![d, d],
            found: vec![cov_b.nrows(), cov_b.ncols()],
        });
    }
    let a = ridge(cov_a)?;
    let b = ridge(cov_b)?;
    let root_a = symmetric_sqrt(&a);
    let cross = symmetric_sqrt(&(&root_a * &b * &root_a));
    let mean_term = (mean_a - mean_b).norm_squared();
    let value = mean_term + a.trace() + b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

pub fn frechet_from_features(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

/// Frechet proxy between two sets of volumes. Each set needs at least
/// `dim + 1` volumes.
pub fn frechet_proxy(set_a: &[Volume], set_b: &[Volume], extractor: &FeatureExtractor) -> Result<f64> {
    let needed = extractor.dim() + 1;
    for set in [set_a, set_b] {
        if set.len() < needed {
            return Err(Error::InsufficientSamples {
                found: set.len(),
                needed,
            });
        }
    }
    let fa = set_a
        .iter()
        .map(|v| extractor.features(v))
        .collect::<Result<Vec<_>>>()?;
    let fb = set_b
        .iter()
        .map(|v| extractor.features(v))
        .collect::<Result<Vec<_>>>()?;
    frechet_from_features(&fa, &fb)
}
