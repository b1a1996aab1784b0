//! Gaussian-mixture likelihoods of quantized latents.
//!
//! The probability of integer `m` under mixture `(π, μ, σ)` is the mixture
//! density convolved with a unit-width uniform:
//! `Σ_k π_k (Φ((m + ½ − μ_k)/σ_k) − Φ((m − ½ − μ_k)/σ_k))`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autograd::SIGMA_MIN;
use crate::error::{Error, Result};

/// Standard normal cumulative distribution.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * FRAC_1_SQRT_2)
}

/// `1 − Φ(t)` without cancellation.
pub fn normal_sf(t: f64) -> f64 {
    0.5 * libm::erfc(t * FRAC_1_SQRT_2)
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// Mass of `N(mean, scale²)` on `[x − ½, x + ½]`.
pub fn interval_mass(x: f64, mean: f64, scale: f64) -> f64 {
    let upper = (x + 0.5 - mean) / scale;
    let lower = (x - 0.5 - mean) / scale;
    if lower > 0.0 {
        normal_sf(lower) - normal_sf(upper)
    } else {
        normal_cdf(upper) - normal_cdf(lower)
    }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Scratch for one element's mixture.
pub(crate) struct MixtureBuf {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    weights: Vec<f64>,
}

pub(crate) struct MixtureGrad<'a> {
    pub dx: f64,
    pub dlogits: &'a [f64],
    pub dmeans: &'a [f64],
    pub dscales: &'a [f64],
}

impl MixtureBuf {
    pub fn new(k: usize) -> Self {
        Self {
            logits: vec![0.0; k],
            means: vec![0.0; k],
            scales: vec![1.0; k],
            weights: vec![0.0; 4 * k],
        }
    }

    /// Raises scales to `min`; returns how many were raised.
    pub fn clamp_scales(&mut self, min: f64) -> usize {
        let mut n = 0;
        for s in &mut self.scales {
            if !(*s >= min) {
                *s = min;
                n += 1;
            }
        }
        n
    }

    pub fn clamp_mask(&mut self, min: f64) -> Vec<bool> {
        self.scales
            .iter_mut()
            .map(|s| {
                let low = !(*s >= min);
                if low {
                    *s = min;
                }
                low
            })
            .collect()
    }

    pub fn likelihood(&mut self, x: f64) -> f64 {
        let k = self.logits.len();
        let (w, _) = self.weights.split_at_mut(k);
        softmax_into(&self.logits, w);
        (0..k)
            .map(|i| w[i] * interval_mass(x, self.means[i], self.scales[i]))
            .sum()
    }

    pub fn likelihood_grad(&mut self, x: f64) -> MixtureGrad<'_> {
        let k = self.logits.len();
        let (w, rest) = self.weights.split_at_mut(k);
        let (dl, rest) = rest.split_at_mut(k);
        let (dm, ds) = rest.split_at_mut(k);
        softmax_into(&self.logits, w);
        let mut p = 0.0;
        let mut dx = 0.0;
        for i in 0..k {
            let (mu, sigma) = (self.means[i], self.scales[i]);
            let upper = (x + 0.5 - mu) / sigma;
            let lower = (x - 0.5 - mu) / sigma;
            let mass = interval_mass(x, mu, sigma);
            let (pu, pl) = (normal_pdf(upper), normal_pdf(lower));
            p += w[i] * mass;
            dl[i] = mass;
            let d_dx = (pu - pl) / sigma;
            dx += w[i] * d_dx;
            dm[i] = -w[i] * d_dx;
            ds[i] = -w[i] * (pu * upper - pl * lower) / sigma;
        }
        for i in 0..k {
            dl[i] = w[i] * (dl[i] - p);
        }
        MixtureGrad {
            dx,
            dlogits: dl,
            dmeans: dm,
            dscales: ds,
        }
    }
}

/// Per-element mixture parameters for `len` latents with `mixtures` components
/// each, stored element-major (`index · mixtures + k`).
#[derive(Clone, Debug)]
pub struct GmmConditional {
    mixtures: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    clamped: usize,
}

impl GmmConditional {
    /// Builds from explicit weights (each row must sum to one).
    pub fn new(
        mixtures: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if mixtures == 0 {
            return Err(Error::InvalidArgument("mixture count must be >= 1".into()));
        }
        if weights.len() != means.len() || means.len() != scales.len() || means.len() % mixtures != 0 {
            return Err(Error::Shape(format!(
                "mixture arrays of lengths {}, {}, {} for {mixtures} components",
                weights.len(),
                means.len(),
                scales.len()
            )));
        }
        for (i, row) in weights.chunks(mixtures).enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "mixture weights of element {i} sum to {total}"
                )));
            }
        }
        let mut out = Self {
            mixtures,
            weights,
            means,
            scales,
            clamped: 0,
        };
        out.clamp();
        Ok(out)
    }

    /// Builds from unnormalised weight logits, normalised per element by softmax.
    pub fn from_logits(
        mixtures: usize,
        logits: &[f64],
        means: Vec<f64>,
        scales: Vec<f64>,
    ) -> Result<Self> {
        if logits.len() != means.len() || mixtures == 0 || logits.len() % mixtures != 0 {
            return Err(Error::Shape(format!(
                "{} logits and {} means for {mixtures} components",
                logits.len(),
                means.len()
            )));
        }
        let mut weights = vec![0.0; logits.len()];
        for (l, w) in logits.chunks(mixtures).zip(weights.chunks_mut(mixtures)) {
            softmax_into(l, w);
        }
        Self::new(mixtures, weights, means, scales)
    }

    fn clamp(&mut self) {
        for s in &mut self.scales {
            if !(*s >= SIGMA_MIN) {
                *s = SIGMA_MIN;
                self.clamped += 1;
            }
        }
    }

    pub fn mixtures(&self) -> usize {
        self.mixtures
    }

    pub fn len(&self) -> usize {
        self.means.len() / self.mixtures
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Number of scales that were raised to the minimum on construction.
    pub fn clamped_scales(&self) -> usize {
        self.clamped
    }

    pub fn weights(&self, index: usize) -> &[f64] {
        &self.weights[index * self.mixtures..(index + 1) * self.mixtures]
    }

    fn components(&self, index: usize) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let r = index * self.mixtures..(index + 1) * self.mixtures;
        self.weights[r.clone()]
            .iter()
            .zip(&self.means[r.clone()])
            .zip(&self.scales[r])
            .map(|((&w, &m), &s)| (w, m, s))
    }

    /// Probability of integer `m` for element `index`.
    pub fn pmf(&self, index: usize, m: f64) -> f64 {
        self.components(index)
            .map(|(w, mu, s)| w * interval_mass(m, mu, s))
            .sum()
    }

    pub fn cdf(&self, index: usize, t: f64) -> f64 {
        self.components(index)
            .map(|(w, mu, s)| w * normal_cdf((t - mu) / s))
            .sum()
    }

    pub fn survival(&self, index: usize, t: f64) -> f64 {
        self.components(index)
            .map(|(w, mu, s)| w * normal_sf((t - mu) / s))
            .sum()
    }
}

/// Likelihood of `symbols[i]` under element `i`'s mixture.
pub fn gmm_pmf(symbols: &[i32], params: &GmmConditional) -> Result<Vec<f64>> {
    if symbols.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} symbols for {} mixture elements",
            symbols.len(),
            params.len()
        )));
    }
    Ok(symbols
        .iter()
        .enumerate()
        .map(|(i, &m)| params.pmf(i, m as f64))
        .collect())
}
