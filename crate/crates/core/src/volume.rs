use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Slack allowed on the `[-1, 1]` bound of normalized data volumes.
pub const DATA_RANGE_TOLERANCE: f64 = 1e-6;

/// A dense 3D scalar field stored depth-major (`d`, then `h`, then `w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    voxels: Vec<f64>,
    /// Physical voxel size in millimetres. Metadata only.
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(shape: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume dimensions must be positive, got {shape:?}"
            )));
        }
        let n = shape.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n],
                found: vec![voxels.len()],
            });
        }
        Ok(Self {
            shape,
            voxels,
            spacing: [1.0; 3],
        })
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            voxels: vec![value; n],
            spacing: [1.0; 3],
        }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Single-voxel volume, convenient for scalar experiments.
    pub fn scalar(value: f64) -> Self {
        Self::filled([1, 1, 1], value)
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.voxels[self.index(d, h, w)]
    }

    pub fn ensure_same_shape(&self, other_shape: [usize; 3]) -> Result<()> {
        if self.shape != other_shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                found: other_shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Voxelwise `a * self + b * other`.
    pub fn affine_combine(&self, a: f64, other: &Volume, b: f64) -> Result<Volume> {
        self.ensure_same_shape(other.shape)?;
        let voxels = self
            .voxels
            .iter()
            .zip(&other.voxels)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Volume {
            shape: self.shape,
            voxels,
            spacing: self.spacing,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            shape: self.shape,
            voxels: self.voxels.iter().map(|&v| f(v)).collect(),
            spacing: self.spacing,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs(&self) -> f64 {
        self.voxels.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }

    /// Whether the volume satisfies the normalized-data bound.
    pub fn is_data_range(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo >= -1.0 - DATA_RANGE_TOLERANCE && hi <= 1.0 + DATA_RANGE_TOLERANCE
    }

    /// Clamps to `[-1, 1]`; used only when a sample leaves the sampler as data.
    pub fn clamped_to_data_range(&self) -> Volume {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().sum::<f64>() / self.voxels.len() as f64
    }

    /// Central axial slice (fixed depth index `d / 2`), row-major `h x w`.
    pub fn mid_axial_slice(&self) -> (usize, usize, Vec<f64>) {
        let [d, h, w] = self.shape;
        let start = (d / 2) * h * w;
        (h, w, self.voxels[start..start + h * w].to_vec())
    }
}

/// i.i.d. standard-normal noise paired with a volume shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    shape: [usize; 3],
    values: Vec<f64>,
}

impl NoiseSample {
    pub fn new(shape: [usize; 3], values: Vec<f64>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n],
                found: vec![values.len()],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape, values }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_volume(&self) -> Volume {
        Volume {
            shape: self.shape,
            voxels: self.values.clone(),
            spacing: [1.0; 3],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Volume::new([2, 2, 2], vec![0.0; 7]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(Volume::new([0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn depth_major_indexing() {
        let v = Volume::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(v.get(1, 2, 3), 23.0);
        assert_eq!(v.get(1, 0, 0), 12.0);
        assert_eq!(v.get(0, 1, 0), 4.0);
    }

    #[test]
    fn data_range_tolerance() {
        assert!(Volume::filled([2, 2, 2], 1.0 + 5e-7).is_data_range());
        assert!(!Volume::filled([2, 2, 2], 1.0 + 5e-6).is_data_range());
        let c = Volume::filled([1, 1, 2], 3.0).clamped_to_data_range();
        assert_eq!(c.voxels(), &[1.0, 1.0]);
    }

    #[test]
    fn mid_slice_selects_center_depth() {
        let v = Volume::new([3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let (h, w, s) = v.mid_axial_slice();
        assert_eq!((h, w), (2, 2));
        assert_eq!(s, vec![4.0, 5.0, 6.0, 7.0]);
    }
}
