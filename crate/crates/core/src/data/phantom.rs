//! Synthetic longitudinal phantoms: a tissue ellipsoid that shrinks with age
//! around a fluid-filled ventricle that grows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::normalize::normalize;
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Grid shape `[d, h, w]`.
    pub grid: [usize; 3],
    /// Ellipsoid centre in voxel coordinates.
    pub center: [f64; 3],
    /// Outer (tissue) semi-axes at age 0, in voxels.
    pub semi_axes: [f64; 3],
    /// Inner (ventricle) semi-axes at age 0, in voxels.
    pub ventricle_axes: [f64; 3],
    /// Fractional shrink of the outer semi-axes per year.
    pub atrophy_rate: f64,
    /// Fractional growth of the ventricle semi-axes per year.
    pub growth_rate: f64,
    pub background_level: f64,
    pub csf_level: f64,
    pub tissue_level: f64,
    /// Width of the tanh edge transition in voxels; 0 gives hard edges.
    pub smoothing: f64,
    /// Oldest age (years) the spec is valid for.
    pub horizon_years: f64,
    /// Relative per-subject perturbation of the semi-axes.
    pub jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [16, 16, 16],
            center: [7.5, 7.5, 7.5],
            semi_axes: [6.0, 6.5, 5.5],
            ventricle_axes: [2.0, 2.5, 1.8],
            atrophy_rate: 0.04,
            growth_rate: 0.12,
            background_level: 0.0,
            csf_level: 0.3,
            tissue_level: 1.0,
            smoothing: 0.5,
            horizon_years: 5.0,
            jitter: 0.05,
        }
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.contains(&0) {
            return Err(Error::Config(format!(
                "phantom grid must be positive, got {:?}",
                self.grid
            )));
        }
        let finite = [
            self.atrophy_rate,
            self.growth_rate,
            self.background_level,
            self.csf_level,
            self.tissue_level,
            self.smoothing,
            self.horizon_years,
            self.jitter,
        ];
        if finite
            .iter()
            .chain(&self.center)
            .chain(&self.semi_axes)
            .chain(&self.ventricle_axes)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("phantom spec contains a non-finite value".into()));
        }
        if self
            .semi_axes
            .iter()
            .chain(&self.ventricle_axes)
            .any(|&a| a <= 0.0)
        {
            return Err(Error::Config("phantom semi-axes must be positive".into()));
        }
        if self.atrophy_rate < 0.0 || self.growth_rate < 0.0 {
            return Err(Error::Config(
                "atrophy and growth rates must be non-negative".into(),
            ));
        }
        if self.smoothing < 0.0 || self.horizon_years < 0.0 || !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(
                "smoothing and horizon must be non-negative and jitter in [0, 1)".into(),
            ));
        }
        if !(self.background_level < self.csf_level && self.csf_level < self.tissue_level) {
            return Err(Error::Config(
                "intensity levels must satisfy background < csf < tissue".into(),
            ));
        }
        self.axes_at(self.horizon_years).map(|_| ())
    }

    /// Outer and ventricle semi-axes at `age`.
    pub fn axes_at(&self, age: f64) -> Result<([f64; 3], [f64; 3])> {
        let shrink = 1.0 - self.atrophy_rate * age;
        let grow = 1.0 + self.growth_rate * age;
        let outer = self.semi_axes.map(|a| a * shrink);
        let inner = self.ventricle_axes.map(|a| a * grow);
        for (&axis, &value) in AXES.iter().zip(outer.iter()).chain(AXES.iter().zip(&inner)) {
            if value <= 0.0 {
                return Err(Error::HorizonExceeded { age, axis, value });
            }
        }
        Ok((outer, inner))
    }

    /// Normalized intensity separating tissue from ventricle fluid.
    pub fn tissue_threshold(&self) -> f64 {
        self.nominal_normalized(0.5 * (self.csf_level + self.tissue_level))
    }

    /// Normalized intensity separating the head from background.
    pub fn inside_threshold(&self) -> f64 {
        self.nominal_normalized(0.5 * (self.background_level + self.csf_level))
    }

    fn nominal_normalized(&self, raw: f64) -> f64 {
        2.0 * (raw - self.background_level) / (self.tissue_level - self.background_level) - 1.0
    }

    /// Per-subject variant with semi-axes scaled by independent factors in
    /// `[1 - jitter, 1 + jitter]`. Rates and levels are shared.
    pub fn jittered<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        if self.jitter > 0.0 {
            for a in out.semi_axes.iter_mut().chain(out.ventricle_axes.iter_mut()) {
                *a *= 1.0 + rng.random_range(-self.jitter..=self.jitter);
            }
        }
        out
    }
}

fn smooth_inside(distance: f64, width: f64) -> f64 {
    if width == 0.0 {
        if distance <= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        0.5 * (1.0 - (distance / width).tanh())
    }
}

/// Approximate signed distance (voxels) to an axis-aligned ellipsoid surface.
fn ellipsoid_distance(p: [f64; 3], center: [f64; 3], axes: [f64; 3]) -> f64 {
    let r = (0..3)
        .map(|i| ((p[i] - center[i]) / axes[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let mean_axis = (axes[0] * axes[1] * axes[2]).cbrt();
    (r - 1.0) * mean_axis
}

/// Raw phantom intensities at `age`, before normalization.
pub fn generate_raw(spec: &PhantomSpec, age: f64) -> Result<Volume> {
    spec.validate()?;
    if !(0.0..=spec.horizon_years).contains(&age) {
        return Err(Error::InvalidArgument(format!(
            "age {age} outside the phantom horizon [0, {}]",
            spec.horizon_years
        )));
    }
    let (outer, inner) = spec.axes_at(age)?;
    let [nd, nh, nw] = spec.grid;
    let mut voxels = Vec::with_capacity(nd * nh * nw);
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let p = [d as f64, h as f64, w as f64];
                let s_out = smooth_inside(ellipsoid_distance(p, spec.center, outer), spec.smoothing);
                let s_in = smooth_inside(ellipsoid_distance(p, spec.center, inner), spec.smoothing);
                let v = spec.background_level
                    + (spec.tissue_level - spec.background_level) * s_out
                    + (spec.csf_level - spec.tissue_level) * s_in * s_out;
                voxels.push(v);
            }
        }
    }
    Volume::new(spec.grid, voxels)
}

/// Normalized phantom at `age`, quantized to `f32` so it survives storage
/// bit for bit.
pub fn generate_phantom(spec: &PhantomSpec, age: f64) -> Result<Volume> {
    let (normalized, _) = normalize(&generate_raw(spec, age)?)?;
    Ok(normalized.map(|v| v as f32 as f64))
}

pub fn count_above(volume: &Volume, threshold: f64) -> usize {
    volume.voxels().iter().filter(|&&v| v > threshold).count()
}

/// Voxels classified as tissue (inside the outer ellipsoid, outside the
/// ventricle).
pub fn tissue_voxel_count(spec: &PhantomSpec, volume: &Volume) -> usize {
    count_above(volume, spec.tissue_threshold())
}
