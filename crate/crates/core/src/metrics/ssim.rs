use crate::error::{Error, Result};
use crate::volume::Volume;

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// Normalized 1D Gaussian taps with `sigma = window / 6`.
pub fn gaussian_window(window: usize) -> Vec<f64> {
    let sigma = window as f64 / 6.0;
    let centre = (window / 2) as f64;
    let taps: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode separable filtering along all three axes.
fn filter3(data: &[f64], shape: [usize; 3], taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = taps.len();
    let mut cur = data.to_vec();
    let mut dims = shape;
    for axis in 0..3 {
        let mut out_dims = dims;
        out_dims[axis] = dims[axis] + 1 - k;
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for d in 0..out_dims[0] {
            for h in 0..out_dims[1] {
                for w in 0..out_dims[2] {
                    let base = (d * dims[1] + h) * dims[2] + w;
                    out.push(
                        taps.iter()
                            .enumerate()
                            .map(|(i, t)| t * cur[base + i * stride])
                            .sum(),
                    );
                }
            }
        }
        cur = out;
        dims = out_dims;
    }
    (cur, dims)
}

/// Mean local SSIM over all fully contained windows of a 3D Gaussian kernel.
pub fn ssim(a: &Volume, b: &Volume, window: usize, data_range: f64) -> Result<f64> {
    a.ensure_same_shape(b.shape())?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "SSIM window must be odd, got {window}"
        )));
    }
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let shape = a.shape();
    if shape.iter().any(|&s| s < window) {
        return Err(Error::InvalidArgument(format!(
            "SSIM window {window} larger than volume {shape:?}"
        )));
    }
    let taps = gaussian_window(window);
    let (x, y) = (a.voxels(), b.voxels());
    let products =
        |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
    let (mu_x, _) = filter3(x, shape, &taps);
    let (mu_y, _) = filter3(y, shape, &taps);
    let (xx, _) = filter3(&products(&|p, _| p * p), shape, &taps);
    let (yy, _) = filter3(&products(&|_, q| q * q), shape, &taps);
    let (xy, _) = filter3(&products(&|p, q| p * q), shape, &taps);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    a.ensure_same_shape(b.shape())?;
    Ok(a.voxels()
        .iter()
        .zip(b.voxels())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; `None` for identical volumes.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<Option<f64>> {
    let e = mse(a, b)?;
    Ok((e > 0.0).then(|| 10.0 * (data_range * data_range / e).log10()))
}
