use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Recorded min-max affine, kept so normalized volumes can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub raw_min: f64,
    pub raw_max: f64,
}

impl Normalization {
    pub fn apply(&self, value: f64) -> f64 {
        if self.is_identity() {
            return value;
        }
        2.0 * (value - self.raw_min) / (self.raw_max - self.raw_min) - 1.0
    }

    pub fn invert_value(&self, value: f64) -> f64 {
        if self.is_identity() {
            return value;
        }
        (value + 1.0) * 0.5 * (self.raw_max - self.raw_min) + self.raw_min
    }

    pub fn invert(&self, volume: &Volume) -> Volume {
        volume.map(|v| self.invert_value(v))
    }

    fn is_identity(&self) -> bool {
        self.raw_min == -1.0 && self.raw_max == 1.0
    }
}

/// Maps the volume's own `[min, max]` onto `[-1, 1]`.
pub fn normalize(volume: &Volume) -> Result<(Volume, Normalization)> {
    let (lo, hi) = volume.min_max();
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument("volume contains non-finite voxels".into()));
    }
    if hi <= lo {
        return Err(Error::ConstantVolume(lo));
    }
    let affine = Normalization {
        raw_min: lo,
        raw_max: hi,
    };
    let out = volume.map(|v| affine.apply(v).clamp(-1.0, 1.0));
    Ok((out, affine))
}
