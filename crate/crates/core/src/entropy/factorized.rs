//! Non-parametric, fully factorized density.
//!
//! Each channel owns a monotone scalar map built from four stages
//! `1 → 3 → 3 → 3 → 1`. A stage computes `a = softplus(M)·u + b` and, except
//! for the last, adds the bounded perturbation `tanh(f) ⊙ tanh(a)`. The map's
//! sigmoid is the channel's cumulative distribution `c(t)`; the likelihood of
//! an integer `z` is `c(z + ½) − c(z − ½)`.
//!
//! Parameters for a density named `p` live in a [`ParameterSet`] as `p.m0`,
//! `p.b0`, `p.f0`, `p.m1`, …, `p.m3`, `p.b3`, each with a leading channel axis.

use rand::Rng;

use crate::autograd::{sigmoid, softplus, ParameterSet, Tensor};
use crate::error::{Error, Result};

const DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const STAGES: usize = 4;
const INIT_SCALE: f64 = 10.0;

pub(crate) const FACTORIZED_PARAM_COUNT: usize = 11;

/// Parameter suffixes in stage order.
pub const PARAM_SUFFIXES: [&str; FACTORIZED_PARAM_COUNT] =
    ["m0", "b0", "f0", "m1", "b1", "f1", "m2", "b2", "f2", "m3", "b3"];

fn matrix_index(stage: usize) -> usize {
    3 * stage
}

fn bias_index(stage: usize) -> usize {
    3 * stage + 1
}

fn factor_index(stage: usize) -> usize {
    3 * stage + 2
}

fn param_shape(slot: usize, channels: usize) -> Vec<usize> {
    let stage = slot / 3;
    let (din, dout) = (DIMS[stage], DIMS[stage + 1]);
    match slot % 3 {
        0 => vec![channels, dout, din],
        _ => vec![channels, dout, 1],
    }
}

/// Transformed per-channel stage parameters, ready for evaluation.
pub(crate) struct Stages {
    channels: usize,
    /// softplus(M) per stage.
    pos: [Vec<f64>; STAGES],
    /// sigmoid(M) per stage: d softplus(M) / dM.
    pos_slope: [Vec<f64>; STAGES],
    bias: [Vec<f64>; STAGES],
    /// tanh(f) per perturbed stage.
    gain: [Vec<f64>; STAGES - 1],
}

#[derive(Default)]
struct Trace {
    inputs: [[f64; 3]; STAGES],
    pre: [[f64; 3]; STAGES],
}

impl Stages {
    pub(crate) fn from_slices(slices: &[&[f64]], channels: usize) -> Result<Self> {
        for (slot, s) in slices.iter().enumerate() {
            let want: usize = param_shape(slot, channels).iter().product();
            if s.len() != want {
                return Err(Error::Shape(format!(
                    "factorized parameter `{}` has {} values, expected {want} for {channels} channels",
                    PARAM_SUFFIXES[slot],
                    s.len()
                )));
            }
        }
        let pos = std::array::from_fn(|l| slices[matrix_index(l)].iter().map(|&m| softplus(m)).collect());
        let pos_slope =
            std::array::from_fn(|l| slices[matrix_index(l)].iter().map(|&m| sigmoid(m)).collect());
        let bias = std::array::from_fn(|l| slices[bias_index(l)].to_vec());
        let gain = std::array::from_fn(|l| slices[factor_index(l)].iter().map(|f| f.tanh()).collect());
        Ok(Self {
            channels,
            pos,
            pos_slope,
            bias,
            gain,
        })
    }

    fn logit(&self, channel: usize, x: f64, trace: &mut Trace) -> f64 {
        let mut u = [x, 0.0, 0.0];
        for l in 0..STAGES {
            let (din, dout) = (DIMS[l], DIMS[l + 1]);
            trace.inputs[l] = u;
            let m = &self.pos[l][channel * dout * din..(channel + 1) * dout * din];
            let b = &self.bias[l][channel * dout..(channel + 1) * dout];
            let mut next = [0.0; 3];
            for i in 0..dout {
                let mut a = b[i];
                for j in 0..din {
                    a += m[i * din + j] * u[j];
                }
                trace.pre[l][i] = a;
                next[i] = if l < STAGES - 1 {
                    a + self.gain[l][channel * dout + i] * a.tanh()
                } else {
                    a
                };
            }
            u = next;
        }
        u[0]
    }

    /// Backpropagates `dlogit` through one evaluation; returns d/dx.
    fn logit_backward(
        &self,
        channel: usize,
        trace: &Trace,
        dlogit: f64,
        grads: &mut [Vec<f64>],
    ) -> f64 {
        let mut dout = [dlogit, 0.0, 0.0];
        for l in (0..STAGES).rev() {
            let (din, dim_out) = (DIMS[l], DIMS[l + 1]);
            let mut da = [0.0; 3];
            for i in 0..dim_out {
                if l < STAGES - 1 {
                    let t = trace.pre[l][i].tanh();
                    let k = channel * dim_out + i;
                    let gain = self.gain[l][k];
                    da[i] = dout[i] * (1.0 + gain * (1.0 - t * t));
                    grads[factor_index(l)][k] += dout[i] * t * (1.0 - gain * gain);
                } else {
                    da[i] = dout[i];
                }
                grads[bias_index(l)][channel * dim_out + i] += da[i];
            }
            let base = channel * dim_out * din;
            let mut din_grad = [0.0; 3];
            for i in 0..dim_out {
                for j in 0..din {
                    let idx = base + i * din + j;
                    grads[matrix_index(l)][idx] += da[i] * trace.inputs[l][j] * self.pos_slope[l][idx];
                    din_grad[j] += self.pos[l][idx] * da[i];
                }
            }
            dout = din_grad;
        }
        dout[0]
    }

    pub(crate) fn cdf(&self, channel: usize, t: f64) -> f64 {
        sigmoid(self.logit(channel, t, &mut Trace::default()))
    }

    /// Upper-tail mass `1 − c(t)`, accurate where `c(t)` is close to one.
    pub(crate) fn survival(&self, channel: usize, t: f64) -> f64 {
        sigmoid(-self.logit(channel, t, &mut Trace::default()))
    }

    pub(crate) fn likelihood(&self, channel: usize, x: f64) -> f64 {
        let mut trace = Trace::default();
        let upper = self.logit(channel, x + 0.5, &mut trace);
        let lower = self.logit(channel, x - 0.5, &mut trace);
        // evaluate on the side where both sigmoids are small to avoid cancellation
        let s = if upper + lower > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * upper) - sigmoid(s * lower)).abs()
    }

    /// Adds `g · d(likelihood)/d(params)` into `grads` and returns `g · d(likelihood)/dx`.
    pub(crate) fn likelihood_backward(
        &self,
        channel: usize,
        x: f64,
        g: f64,
        grads: &mut [Vec<f64>],
    ) -> f64 {
        let mut upper_trace = Trace::default();
        let mut lower_trace = Trace::default();
        let upper = self.logit(channel, x + 0.5, &mut upper_trace);
        let lower = self.logit(channel, x - 0.5, &mut lower_trace);
        let du = g * sigmoid(upper) * sigmoid(-upper);
        let dl = -g * sigmoid(lower) * sigmoid(-lower);
        self.logit_backward(channel, &upper_trace, du, grads)
            + self.logit_backward(channel, &lower_trace, dl, grads)
    }

    pub(crate) fn channels(&self) -> usize {
        self.channels
    }
}

/// Owned factorized density (evaluation only; training binds the same
/// parameters through the graph).
pub struct FactorizedDensity {
    stages: Stages,
}

impl FactorizedDensity {
    /// Adds freshly initialised parameters for `channels` channels under `prefix`.
    pub fn init_params(
        params: &mut ParameterSet,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Result<()> {
        let scale = INIT_SCALE.powf(1.0 / STAGES as f64);
        for (slot, suffix) in PARAM_SUFFIXES.iter().enumerate() {
            let shape = param_shape(slot, channels);
            let n: usize = shape.iter().product();
            let stage = slot / 3;
            let data: Vec<f64> = match slot % 3 {
                0 => vec![(1.0 / scale / DIMS[stage + 1] as f64).exp_m1().ln(); n],
                1 => (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                _ => vec![0.0; n],
            };
            params.insert(&format!("{prefix}.{suffix}"), Tensor::new(&shape, data)?)?;
        }
        Ok(())
    }

    pub fn param_names(prefix: &str) -> Vec<String> {
        PARAM_SUFFIXES
            .iter()
            .map(|s| format!("{prefix}.{s}"))
            .collect()
    }

    pub fn from_params(params: &ParameterSet, prefix: &str) -> Result<Self> {
        let names = Self::param_names(prefix);
        let tensors: Vec<&Tensor> = names
            .iter()
            .map(|n| params.get(n).ok_or_else(|| Error::MissingParameter(n.clone())))
            .collect::<Result<_>>()?;
        let channels = tensors[0].shape().first().copied().unwrap_or(0);
        let slices: Vec<&[f64]> = tensors.iter().map(|t| t.data()).collect();
        Ok(Self {
            stages: Stages::from_slices(&slices, channels)?,
        })
    }

    pub fn random(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParameterSet::new();
        Self::init_params(&mut params, rng, "d", channels)?;
        // perturb every parameter so the density is not the symmetric init
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for n in names {
            for v in params.get_mut(&n).unwrap().data_mut() {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        Self::from_params(&params, "d")
    }

    pub fn channels(&self) -> usize {
        self.stages.channels()
    }

    /// Cumulative `c(t)` of one channel.
    pub fn cdf(&self, channel: usize, t: f64) -> f64 {
        self.stages.cdf(channel, t)
    }

    pub fn survival(&self, channel: usize, t: f64) -> f64 {
        self.stages.survival(channel, t)
    }

    /// `c(z + ½) − c(z − ½)` for one channel.
    pub fn pmf(&self, channel: usize, z: f64) -> f64 {
        self.stages.likelihood(channel, z)
    }
}

/// Likelihood of every element of an integer `[n, c, h, w]` tensor under the
/// density of its channel.
pub fn factorized_pmf(z: &Tensor, density: &FactorizedDensity) -> Result<Tensor> {
    let (_, c, h, w) = z.dims4()?;
    if c != density.channels() {
        return Err(Error::Shape(format!(
            "tensor has {c} channels, density models {}",
            density.channels()
        )));
    }
    let plane = h * w;
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| density.pmf((i / plane) % c, v))
        .collect();
    Tensor::new(z.shape(), data)
}
