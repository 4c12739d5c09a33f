//! Minimal tensor autodiff used by the neural denoiser.

mod gemm;
mod tape;
mod tensor;

pub use gemm::gemm;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Transformer-style sinusoidal features of a scalar: `dim / 2` sines
/// followed by `dim / 2` cosines at geometrically spaced frequencies.
pub fn sinusoidal_embedding(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}
