//! Flow autoencoder: five stride-2 stages with residual blocks between them,
//! a transposed-convolution mirror, and a factorized prior on the latents.

use rand::Rng;

use super::{prior_likelihood, ModelConfig};
use crate::autograd::layers;
use crate::autograd::{Graph, ParameterSet, Tensor, Var};
use crate::entropy::{quantize_var, FactorizedDensity, QuantizeMode};
use crate::error::{Error, Result};
use crate::motion::FlowField;

pub const PREFIX: &str = "mv";
pub const PRIOR: &str = "mv.prior";
pub const STAGES: usize = 5;
/// Total spatial downsampling of the analysis transform.
pub const FACTOR: usize = 1 << STAGES;

pub fn init(params: &mut ParameterSet, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<()> {
    let (n, k, rk) = (cfg.n_motion, cfg.strided_kernel, cfg.res_kernel);
    for i in 0..STAGES {
        let input = if i == 0 { 2 } else { n };
        layers::init_conv(params, rng, &format!("{PREFIX}.a{i}"), input, n, k)?;
        if i + 1 < STAGES {
            layers::init_residual_block(params, rng, &format!("{PREFIX}.a{i}r"), n, rk)?;
        }
    }
    for i in 0..STAGES {
        let output = if i + 1 == STAGES { 2 } else { n };
        layers::init_conv_transpose(params, rng, &format!("{PREFIX}.s{i}"), n, output, k, 2)?;
        if i + 1 < STAGES {
            layers::init_residual_block(params, rng, &format!("{PREFIX}.s{i}r"), n, rk)?;
        }
    }
    FactorizedDensity::init_params(params, rng, PRIOR, n)
}

/// Continuous latents of a `[n, 2, h, w]` flow; `h` and `w` must be multiples of 32.
pub fn analysis(g: &mut Graph, params: &ParameterSet, flow: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(flow).dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow must have 2 channels, got {c}")));
    }
    if h % FACTOR != 0 || w % FACTOR != 0 {
        return Err(Error::Shape(format!(
            "flow extent {h}x{w} is not a multiple of {FACTOR}; pad first"
        )));
    }
    let mut x = flow;
    for i in 0..STAGES {
        x = layers::conv(g, params, &format!("{PREFIX}.a{i}"), x, 2)?;
        if i + 1 < STAGES {
            x = layers::residual_block(g, params, &format!("{PREFIX}.a{i}r"), x)?;
        }
    }
    Ok(x)
}

pub fn synthesis(g: &mut Graph, params: &ParameterSet, latents: Var) -> Result<Var> {
    let mut x = latents;
    for i in 0..STAGES {
        x = layers::conv_transpose(g, params, &format!("{PREFIX}.s{i}"), x, 2)?;
        if i + 1 < STAGES {
            x = layers::residual_block(g, params, &format!("{PREFIX}.s{i}r"), x)?;
        }
    }
    Ok(x)
}

/// Per-element likelihood of quantized latents under the prior.
pub fn likelihood(g: &mut Graph, params: &ParameterSet, q: Var) -> Result<Var> {
    prior_likelihood(g, params, PRIOR, q)
}

/// Quantized latents of `flow` and their estimated size in bits.
pub fn encode(
    params: &ParameterSet,
    flow: &FlowField,
    mode: QuantizeMode,
    rng: &mut impl Rng,
) -> Result<(Tensor, f64)> {
    let mut g = Graph::new();
    let f = g.constant(flow.to_batch());
    let y = analysis(&mut g, params, f)?;
    let q = quantize_var(&mut g, y, mode, rng)?;
    let p = likelihood(&mut g, params, q)?;
    let bits = g.rate_bits(p);
    Ok((g.value(q).clone(), g.value(bits).item()))
}

/// Reconstructed flow from `[1, n_motion, h/32, w/32]` latents.
pub fn decode(params: &ParameterSet, latents: &Tensor) -> Result<FlowField> {
    let mut g = Graph::new();
    let q = g.constant(latents.clone());
    let f = synthesis(&mut g, params, q)?;
    FlowField::from_batch(g.value(f))
}
