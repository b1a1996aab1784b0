//! The two residual codecs. Both quantize an analysis of the residual, code a
//! hyper-latent with a factorized prior, and condition the latents on it:
//!
//! * pixel: `x1 − x̄1` through four stride-2 stages; zero-mean Gaussian with
//!   a predicted scale per latent;
//! * feature: `E(x1) − E(x̄1)` with a shared two-stage encoder `E`, two more
//!   stride-2 stages, and a `K`-component mixture per latent. The decoder
//!   forms `D(E(x̄1) + r̂)`.

use rand::Rng;

use super::{prior_likelihood, ModelConfig, ResidualMode};
use crate::autograd::layers::{self, LEAKY_SLOPE};
use crate::autograd::{Graph, ParameterSet, Tensor, Var, SIGMA_MIN};
use crate::entropy::{quantize_var, FactorizedDensity, GmmConditional, QuantizeMode};
use crate::error::{Error, Result};

/// Downsampling from frame to latent.
pub const LATENT_FACTOR: usize = 16;

const PIXEL_STAGES: usize = 4;
const FEATURE_ENCODER_STAGES: usize = 2;
const FEATURE_RESIDUAL_STAGES: usize = 2;

pub fn prefix(mode: ResidualMode) -> &'static str {
    match mode {
        ResidualMode::Pixel => "px",
        ResidualMode::Feature => "ft",
    }
}

/// Parameter prefix of the shared feature encoder.
pub const FEATURE_ENCODER: &str = "ft.e";

fn hyper_prior(mode: ResidualMode) -> String {
    format!("{}.hprior", prefix(mode))
}

fn latent_channels(cfg: &ModelConfig, mode: ResidualMode) -> usize {
    match mode {
        ResidualMode::Pixel => cfg.n_pixel,
        ResidualMode::Feature => cfg.n_feature,
    }
}

/// Mixture components of the latent conditional.
pub fn mixtures(cfg: &ModelConfig, mode: ResidualMode) -> usize {
    match mode {
        ResidualMode::Pixel => 1,
        ResidualMode::Feature => cfg.mixtures,
    }
}

/// `conv s2 → rb → conv s2 → … → conv s2` (no block after the last conv).
fn init_down(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    (input, width): (usize, usize),
    stages: usize,
    cfg: &ModelConfig,
    trailing_block: bool,
) -> Result<()> {
    for i in 0..stages {
        let c = if i == 0 { input } else { width };
        layers::init_conv(params, rng, &format!("{name}{i}"), c, width, cfg.strided_kernel)?;
        if i + 1 < stages || trailing_block {
            layers::init_residual_block(params, rng, &format!("{name}{i}r"), width, cfg.res_kernel)?;
        }
    }
    Ok(())
}

fn down(
    g: &mut Graph,
    params: &ParameterSet,
    name: &str,
    mut x: Var,
    stages: usize,
    trailing_block: bool,
) -> Result<Var> {
    for i in 0..stages {
        x = layers::conv(g, params, &format!("{name}{i}"), x, 2)?;
        if i + 1 < stages || trailing_block {
            x = layers::residual_block(g, params, &format!("{name}{i}r"), x)?;
        }
    }
    Ok(x)
}

/// Mirror of [`init_down`]: `[rb →] convT s2 → rb → … → convT s2`.
fn init_up(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    (width, output): (usize, usize),
    stages: usize,
    cfg: &ModelConfig,
    leading_block: bool,
) -> Result<()> {
    for i in 0..stages {
        if i > 0 || leading_block {
            layers::init_residual_block(params, rng, &format!("{name}{i}r"), width, cfg.res_kernel)?;
        }
        let c = if i + 1 == stages { output } else { width };
        layers::init_conv_transpose(params, rng, &format!("{name}{i}"), width, c, cfg.strided_kernel, 2)?;
    }
    Ok(())
}

fn up(
    g: &mut Graph,
    params: &ParameterSet,
    name: &str,
    mut x: Var,
    stages: usize,
    leading_block: bool,
) -> Result<Var> {
    for i in 0..stages {
        if i > 0 || leading_block {
            x = layers::residual_block(g, params, &format!("{name}{i}r"), x)?;
        }
        x = layers::conv_transpose(g, params, &format!("{name}{i}"), x, 2)?;
    }
    Ok(x)
}

fn init_hyper(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    p: &str,
    width: usize,
    cfg: &ModelConfig,
) -> Result<()> {
    let (k, rk) = (cfg.strided_kernel, cfg.res_kernel);
    layers::init_conv(params, rng, &format!("{p}.ha0"), width, width, rk)?;
    layers::init_conv(params, rng, &format!("{p}.ha1"), width, width, k)?;
    layers::init_conv(params, rng, &format!("{p}.ha2"), width, width, k)?;
    layers::init_conv_transpose(params, rng, &format!("{p}.hs0"), width, width, k, 2)?;
    layers::init_conv_transpose(params, rng, &format!("{p}.hs1"), width, width, k, 2)?;
    layers::init_conv(params, rng, &format!("{p}.hs2"), width, width, rk)?;
    FactorizedDensity::init_params(params, rng, &format!("{p}.hprior"), width)
}

/// Adds the parameters of one residual codec.
pub fn init(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    mode: ResidualMode,
) -> Result<()> {
    let p = prefix(mode);
    match mode {
        ResidualMode::Pixel => {
            let n = cfg.n_pixel;
            init_down(params, rng, &format!("{p}.a"), (3, n), PIXEL_STAGES, cfg, false)?;
            init_up(params, rng, &format!("{p}.s"), (n, 3), PIXEL_STAGES, cfg, false)?;
            init_hyper(params, rng, p, n, cfg)
        }
        ResidualMode::Feature => {
            let n = cfg.n_feature;
            init_down(params, rng, FEATURE_ENCODER, (3, n), FEATURE_ENCODER_STAGES, cfg, true)?;
            init_up(params, rng, &format!("{p}.d"), (n, 3), FEATURE_ENCODER_STAGES, cfg, true)?;
            init_down(params, rng, &format!("{p}.ra"), (n, n), FEATURE_RESIDUAL_STAGES, cfg, false)?;
            init_up(params, rng, &format!("{p}.rs"), (n, n), FEATURE_RESIDUAL_STAGES, cfg, false)?;
            init_hyper(params, rng, p, n, cfg)?;
            let k = cfg.mixtures;
            layers::init_conv(params, rng, &format!("{p}.p0"), n, n, 1)?;
            layers::init_conv(params, rng, &format!("{p}.p1"), n, 3 * k * n, 1)
        }
    }
}

fn check_pair(g: &Graph, x1: Var, xbar: Var) -> Result<()> {
    let (_, c, h, w) = g.value(x1).dims4()?;
    if g.shape(x1) != g.shape(xbar) {
        return Err(Error::Shape(format!(
            "residual inputs differ: {:?} vs {:?}",
            g.shape(x1),
            g.shape(xbar)
        )));
    }
    if c != 3 || h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
        return Err(Error::Shape(format!(
            "residual codec needs 3 channels and extents divisible by {LATENT_FACTOR}, got {:?}",
            g.shape(x1)
        )));
    }
    Ok(())
}

/// Shared feature encoder `E`.
pub fn feature_encoder(g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
    down(g, params, FEATURE_ENCODER, x, FEATURE_ENCODER_STAGES, true)
}

/// Feature decoder `D`.
pub fn feature_decoder(g: &mut Graph, params: &ParameterSet, f: Var) -> Result<Var> {
    up(g, params, "ft.d", f, FEATURE_ENCODER_STAGES, true)
}

/// Continuous latents of the residual. For the feature codec also returns
/// `E(x̄1)` so callers can reuse it.
pub fn latents(
    g: &mut Graph,
    params: &ParameterSet,
    mode: ResidualMode,
    x1: Var,
    xbar: Var,
) -> Result<(Var, Option<Var>)> {
    check_pair(g, x1, xbar)?;
    let p = prefix(mode);
    match mode {
        ResidualMode::Pixel => {
            let r = g.sub(x1, xbar)?;
            Ok((down(g, params, &format!("{p}.a"), r, PIXEL_STAGES, false)?, None))
        }
        ResidualMode::Feature => {
            let f1 = feature_encoder(g, params, x1)?;
            let fbar = feature_encoder(g, params, xbar)?;
            let r = g.sub(f1, fbar)?;
            let y = down(g, params, &format!("{p}.ra"), r, FEATURE_RESIDUAL_STAGES, false)?;
            Ok((y, Some(fbar)))
        }
    }
}

pub fn hyper_analysis(g: &mut Graph, params: &ParameterSet, mode: ResidualMode, y: Var) -> Result<Var> {
    let p = prefix(mode);
    let h = layers::conv(g, params, &format!("{p}.ha0"), y, 1)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let h = layers::conv(g, params, &format!("{p}.ha1"), h, 2)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    layers::conv(g, params, &format!("{p}.ha2"), h, 2)
}

pub fn hyper_likelihood(g: &mut Graph, params: &ParameterSet, mode: ResidualMode, z: Var) -> Result<Var> {
    prior_likelihood(g, params, &hyper_prior(mode), z)
}

/// Graph nodes of the latent conditional: `mixtures × c` channels each, with
/// mixture `k` of latent channel `j` at channel `k·c + j`.
pub struct Conditional {
    pub logits: Var,
    pub means: Var,
    pub scales: Var,
    pub mixtures: usize,
}

/// Conditional parameters for latents of spatial extent `latent_hw`,
/// computed from quantized hyper-latents only.
pub fn conditional(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: ResidualMode,
    z_hat: Var,
    latent_hw: (usize, usize),
) -> Result<Conditional> {
    let p = prefix(mode);
    let h = layers::conv_transpose(g, params, &format!("{p}.hs0"), z_hat, 2)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let h = layers::conv_transpose(g, params, &format!("{p}.hs1"), h, 2)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let h = layers::conv(g, params, &format!("{p}.hs2"), h, 1)?;
    // hyper-latents are rounded up in extent; cut back to the latent grid
    let h = g.crop(h, latent_hw.0, latent_hw.1)?;
    let m = latent_channels(cfg, mode);
    let k = mixtures(cfg, mode);
    match mode {
        ResidualMode::Pixel => {
            let s = g.softplus(h);
            let scales = g.add_scalar(s, SIGMA_MIN);
            let zeros = Tensor::zeros(g.shape(scales));
            let logits = g.constant(zeros.clone());
            let means = g.constant(zeros);
            Ok(Conditional { logits, means, scales, mixtures: 1 })
        }
        ResidualMode::Feature => {
            let h = layers::conv(g, params, &format!("{p}.p0"), h, 1)?;
            let h = g.leaky_relu(h, LEAKY_SLOPE)?;
            let out = layers::conv(g, params, &format!("{p}.p1"), h, 1)?;
            let logits = g.slice_channels(out, 0, k * m)?;
            let means = g.slice_channels(out, k * m, k * m)?;
            let raw = g.slice_channels(out, 2 * k * m, k * m)?;
            let s = g.softplus(raw);
            let scales = g.add_scalar(s, SIGMA_MIN);
            Ok(Conditional { logits, means, scales, mixtures: k })
        }
    }
}

pub fn latent_likelihood(g: &mut Graph, y_hat: Var, c: &Conditional) -> Result<Var> {
    g.gmm_likelihood(y_hat, c.logits, c.means, c.scales, c.mixtures)
}

/// Element-major mixture parameters for table construction; element order
/// matches the `[n, c, h, w]` latent layout.
pub fn to_gmm(g: &Graph, c: &Conditional) -> Result<GmmConditional> {
    let (n, kc, h, w) = g.value(c.scales).dims4()?;
    let k = c.mixtures;
    let ch = kc / k;
    let plane = h * w;
    let count = n * ch * plane;
    let (l, m, s) = (
        g.value(c.logits).data(),
        g.value(c.means).data(),
        g.value(c.scales).data(),
    );
    let mut logits = Vec::with_capacity(count * k);
    let mut means = Vec::with_capacity(count * k);
    let mut scales = Vec::with_capacity(count * k);
    for i in 0..count {
        let (b, j, p) = (i / (ch * plane), (i / plane) % ch, i % plane);
        for mix in 0..k {
            let idx = (b * kc + mix * ch + j) * plane + p;
            logits.push(l[idx]);
            means.push(m[idx]);
            scales.push(s[idx]);
        }
    }
    GmmConditional::from_logits(k, &logits, means, scales)
}

/// `x̂1` from quantized latents and the prediction; `fbar` may carry a
/// precomputed `E(x̄1)`.
pub fn reconstruct(
    g: &mut Graph,
    params: &ParameterSet,
    mode: ResidualMode,
    y_hat: Var,
    xbar: Var,
    fbar: Option<Var>,
) -> Result<Var> {
    let p = prefix(mode);
    let out = match mode {
        ResidualMode::Pixel => {
            let r = up(g, params, &format!("{p}.s"), y_hat, PIXEL_STAGES, false)?;
            if g.shape(r) != g.shape(xbar) {
                return Err(Error::Shape(format!(
                    "latents decode to {:?}, prediction is {:?}",
                    g.shape(r),
                    g.shape(xbar)
                )));
            }
            g.add(xbar, r)?
        }
        ResidualMode::Feature => {
            let fbar = match fbar {
                Some(f) => f,
                None => feature_encoder(g, params, xbar)?,
            };
            let r = up(g, params, &format!("{p}.rs"), y_hat, FEATURE_RESIDUAL_STAGES, false)?;
            if g.shape(r) != g.shape(fbar) {
                return Err(Error::Shape(format!(
                    "latents decode to {:?}, features are {:?}",
                    g.shape(r),
                    g.shape(fbar)
                )));
            }
            let f = g.add(fbar, r)?;
            feature_decoder(g, params, f)?
        }
    };
    Ok(g.clamp(out, 0.0, 1.0))
}

/// Everything a differentiable pass through a residual codec produces.
pub struct ResidualForward {
    pub x_hat: Var,
    pub y_hat: Var,
    pub z_hat: Var,
    pub rate_latents: Var,
    pub rate_hyper: Var,
    pub conditional: Conditional,
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: ResidualMode,
    x1: Var,
    xbar: Var,
    quantize: QuantizeMode,
    rng: &mut impl Rng,
) -> Result<ResidualForward> {
    let (y, fbar) = latents(g, params, mode, x1, xbar)?;
    let z = hyper_analysis(g, params, mode, y)?;
    let z_hat = quantize_var(g, z, quantize, rng)?;
    let pz = hyper_likelihood(g, params, mode, z_hat)?;
    let rate_hyper = g.rate_bits(pz);
    let (_, _, h, w) = g.value(y).dims4()?;
    let conditional = conditional(g, params, cfg, mode, z_hat, (h, w))?;
    let y_hat = quantize_var(g, y, quantize, rng)?;
    let py = latent_likelihood(g, y_hat, &conditional)?;
    let rate_latents = g.rate_bits(py);
    let x_hat = reconstruct(g, params, mode, y_hat, xbar, fbar)?;
    Ok(ResidualForward {
        x_hat,
        y_hat,
        z_hat,
        rate_latents,
        rate_hyper,
        conditional,
    })
}

/// Quantized residual representation of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLatents {
    pub latents: Tensor,
    pub hyper: Tensor,
    pub rate_latents: f64,
    pub rate_hyper: f64,
}

pub fn encode(
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: ResidualMode,
    x1: &Tensor,
    xbar: &Tensor,
    quantize: QuantizeMode,
    rng: &mut impl Rng,
) -> Result<ResidualLatents> {
    let mut g = Graph::new();
    let a = g.constant(x1.clone());
    let b = g.constant(xbar.clone());
    let f = forward(&mut g, params, cfg, mode, a, b, quantize, rng)?;
    Ok(ResidualLatents {
        latents: g.value(f.y_hat).clone(),
        hyper: g.value(f.z_hat).clone(),
        rate_latents: g.value(f.rate_latents).item(),
        rate_hyper: g.value(f.rate_hyper).item(),
    })
}

/// The latent conditional a decoder derives from `hyper`.
pub fn decode_conditional(
    params: &ParameterSet,
    cfg: &ModelConfig,
    mode: ResidualMode,
    hyper: &Tensor,
    latent_hw: (usize, usize),
) -> Result<GmmConditional> {
    let mut g = Graph::new();
    let z = g.constant(hyper.clone());
    let c = conditional(&mut g, params, cfg, mode, z, latent_hw)?;
    to_gmm(&g, &c)
}

/// `x̂1` from decoded latents; never sees `x1`.
pub fn decode(
    params: &ParameterSet,
    mode: ResidualMode,
    latents: &Tensor,
    xbar: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let y = g.constant(latents.clone());
    let b = g.constant(xbar.clone());
    let x = reconstruct(&mut g, params, mode, y, b, None)?;
    Ok(g.value(x).clone())
}

#[cfg(test)]
mod tests;
