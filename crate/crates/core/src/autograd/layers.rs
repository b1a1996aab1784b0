//! Parameter initialisation and forward helpers for the layer vocabulary the
//! codec networks are built from.
//!
//! Naming: a convolution `name` owns `name.w` and `name.b`; a residual block
//! `name` owns the convolutions `name.c1` and `name.c2`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative-side slope of every leaky rectifier in the codec.
pub const LEAKY_SLOPE: f64 = 0.01;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape product")
}

pub fn init_conv(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
) -> Result<()> {
    let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
    params.insert(
        &format!("{name}.w"),
        uniform(rng, &[out_ch, in_ch, kernel, kernel], bound),
    )?;
    params.insert(&format!("{name}.b"), Tensor::zeros(&[out_ch]))
}

pub fn init_conv_transpose(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Result<()> {
    // each output sees roughly in·k²/stride² taps
    let fan_in = (in_ch * kernel * kernel).div_ceil(stride * stride).max(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.insert(
        &format!("{name}.w"),
        uniform(rng, &[in_ch, out_ch, kernel, kernel], bound),
    )?;
    params.insert(&format!("{name}.b"), Tensor::zeros(&[out_ch]))
}

pub fn init_residual_block(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    channels: usize,
    kernel: usize,
) -> Result<()> {
    init_conv(params, rng, &format!("{name}.c1"), channels, channels, kernel)?;
    init_conv(params, rng, &format!("{name}.c2"), channels, channels, kernel)
}

fn kernel_size(params: &ParameterSet, name: &str) -> Result<usize> {
    let key = format!("{name}.w");
    params
        .get(&key)
        .map(|w| w.shape()[2])
        .ok_or(Error::MissingParameter(key))
}

/// Convolution with `(k - 1) / 2` zero padding: size-preserving at stride 1
/// and exact `stride`-fold downsampling for extents divisible by the stride.
pub fn conv(
    g: &mut Graph,
    params: &ParameterSet,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let k = kernel_size(params, name)?;
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    g.conv2d(x, w, b, stride, (k - 1) / 2)
}

/// Transposed convolution producing exactly `stride`-fold upsampling.
pub fn conv_transpose(
    g: &mut Graph,
    params: &ParameterSet,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let k = kernel_size(params, name)?;
    let padding = (k - 1) / 2;
    let output_padding = (stride + 2 * padding)
        .checked_sub(k)
        .filter(|&op| op < stride)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "kernel {k} cannot upsample exactly by stride {stride}"
            ))
        })?;
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    g.conv2d_transpose_padded(x, w, b, stride, padding, output_padding)
}

/// `x + conv(leaky(conv(x)))`.
pub fn residual_block(g: &mut Graph, params: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, params, &format!("{name}.c1"), x, 1)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let h = conv(g, params, &format!("{name}.c2"), h, 1)?;
    if g.shape(h) != g.shape(x) {
        return Err(Error::Shape(format!(
            "residual block `{name}` changes shape {:?} -> {:?}",
            g.shape(x),
            g.shape(h)
        )));
    }
    g.add(x, h)
}

/// Sets every parameter under `prefix` to zero.
pub fn zero_parameters(params: &mut ParameterSet, prefix: &str) {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    for n in names {
        if let Some(t) = params.get_mut(&n) {
            t.data_mut().fill(0.0);
        }
    }
}
