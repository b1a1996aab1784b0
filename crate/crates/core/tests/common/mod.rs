//! Reference implementations used as oracles by the integration tests. They
//! share no code with the library beyond plain data types.

#![allow(dead_code)]

use pframe::autograd::{Graph, Tensor, Var};
use rand::Rng;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// One `h × w` plane, row-major.
#[derive(Clone, Debug)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x) + self.at(2 * y + 1, 2 * x + 1);
                data.push(s / 4.0);
            }
        }
        Plane { h, w, data }
    }
}

fn window() -> [[f64; 11]; 11] {
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    win
}

/// Mean contrast-structure and mean full SSIM over all full windows.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let win = window();
    let (mut cs_sum, mut ssim_sum, mut count) = (0.0, 0.0, 0.0);
    for y in 0..=a.h - 11 {
        for x in 0..=a.w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, row) in win.iter().enumerate() {
                for (j, &k) in row.iter().enumerate() {
                    let (p, q) = (a.at(y + i, x + j), b.at(y + i, x + j));
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            cs_sum += cs;
            ssim_sum += l * cs;
            count += 1.0;
        }
    }
    (cs_sum / count, ssim_sum / count)
}

/// Five-scale MS-SSIM of one plane pair: product of mean contrast-structure
/// at the four finer scales and mean SSIM at the coarsest, each raised to
/// its standard exponent.
pub fn ms_ssim_plane(a: &Plane, b: &Plane) -> f64 {
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut out = 1.0;
    for (s, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (cs, ssim) = ssim_terms(&a, &b);
        let term = if s == 4 { ssim } else { cs };
        assert!(term > 0.0, "reference defined for positively correlated inputs only");
        out *= term.powf(weight);
        a = a.halve();
        b = b.halve();
    }
    out
}

/// Channel mean of per-plane MS-SSIM for `[c, h, w]` data.
pub fn ms_ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let plane = |t: &Tensor, k: usize| Plane { h, w, data: t.data()[k * h * w..(k + 1) * h * w].to_vec() };
    (0..c).map(|k| ms_ssim_plane(&plane(a, k), &plane(b, k))).sum::<f64>() / c as f64
}

fn normal_density(t: f64, mean: f64, sigma: f64) -> f64 {
    let z = (t - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫_{x−½}^{x+½} N(t; mean, sigma) dt` by composite Gauss-Legendre
/// quadrature on panels narrower than a quarter sigma.
pub fn gaussian_interval_mass(x: f64, mean: f64, sigma: f64) -> f64 {
    const NODES: [(f64, f64); 5] = [
        (0.0, 0.568_888_888_888_888_9),
        (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
        (0.906_179_845_938_664, 0.236_926_885_056_189_1),
    ];
    // outside ±40 sigma the mass is far below any tolerance used
    let lo = (x - 0.5).max(mean - 40.0 * sigma);
    let hi = (x + 0.5).min(mean + 40.0 * sigma);
    if lo >= hi {
        return 0.0;
    }
    let panels = ((hi - lo) / (0.25 * sigma)).ceil().max(1.0) as usize;
    let step = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let centre = lo + (p as f64 + 0.5) * step;
        for (node, weight) in NODES {
            total += weight * normal_density(centre + node * step / 2.0, mean, sigma);
        }
    }
    total * step / 2.0
}

/// Largest relative difference between analytic and five-point stencil
/// gradients of `build`'s scalar output with respect to each input, sampled
/// at up to `samples` entries per input. Differences are scaled by the
/// larger magnitude, floored at 1e-5 of the largest gradient seen, below which
/// differences sit at the roundoff level of the evaluation itself.
pub fn gradient_error(
    inputs: &[Tensor],
    samples: usize,
    h: f64,
    rng: &mut impl Rng,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).expect("scalar output");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();
    let largest = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for _ in 0..samples.min(t.numel()) {
            let i = rng.gen_range(0..t.numel());
            let at = |offset: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += offset;
                eval(&moved)
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let a = analytic[k][i];
            let scale = a.abs().max(numeric.abs()).max(1e-5 * largest).max(1e-12);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any-shaped output to a scalar through fixed random weights, so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&mut rng, &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}
