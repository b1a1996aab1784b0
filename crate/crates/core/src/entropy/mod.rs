//! Discrete likelihood models for quantized latents, quantization, and rate
//! accounting.

mod cdf;
pub mod factorized;
pub mod gmm;

use rand::Rng;

pub use cdf::{build_cdf_table, gaussian_table, CdfTable, PmfSource, MAX_PRECISION, MIN_PRECISION};
pub use factorized::{factorized_pmf, FactorizedDensity};
pub use gmm::{gmm_pmf, normal_cdf, GmmConditional};

use crate::autograd::{Graph, Tensor, Var, LIKELIHOOD_FLOOR};
use crate::error::Result;

/// Default mixture count for the conditional latent model.
pub const DEFAULT_MIXTURES: usize = 3;

/// Fixed-point precision of every coding table.
pub const CODING_PRECISION: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Additive `U(−½, ½)` noise.
    Train,
    /// Rounding, half away from zero.
    Infer,
}

/// Quantizes every element. `rng` is only drawn from in train mode.
pub fn quantize(x: &Tensor, mode: QuantizeMode, rng: &mut impl Rng) -> Tensor {
    match mode {
        QuantizeMode::Infer => x.map(f64::round),
        QuantizeMode::Train => x.map(|v| v + rng.gen_range(-0.5..0.5)),
    }
}

/// Graph version of [`quantize`]: gradients pass through unchanged in both modes.
pub fn quantize_var(g: &mut Graph, x: Var, mode: QuantizeMode, rng: &mut impl Rng) -> Result<Var> {
    let q = quantize(g.value(x), mode, rng);
    g.straight_through(x, q)
}

/// Σ −log2 max(p, 2^−24).
pub fn rate_bits(pmf: &[f64]) -> f64 {
    pmf.iter().map(|&p| -p.max(LIKELIHOOD_FLOOR).log2()).sum()
}

#[cfg(test)]
mod tests;
