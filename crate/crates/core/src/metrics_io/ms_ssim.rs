use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::motion::Frame;

/// Per-scale exponents for the full five-scale metric.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let centre = (WINDOW / 2) as f64;
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Number of scales used for an `h × w` image: as many as keep the coarsest
/// level at least one window wide, at most five.
pub fn scale_count(height: usize, width: usize) -> Result<usize> {
    let side = height.min(width);
    let count = (0..SCALE_WEIGHTS.len())
        .take_while(|&s| side >> s >= WINDOW)
        .count();
    if count == 0 {
        return Err(Error::Shape(format!(
            "MS-SSIM needs at least {WINDOW}x{WINDOW} pixels, got {height}x{width}"
        )));
    }
    Ok(count)
}

/// The standard exponents for all five scales; with fewer, the first
/// `count` rescaled to sum to one.
pub fn scale_weights(count: usize) -> Vec<f64> {
    let used = &SCALE_WEIGHTS[..count];
    if count == SCALE_WEIGHTS.len() {
        return used.to_vec();
    }
    let total: f64 = used.iter().sum();
    used.iter().map(|w| w / total).collect()
}

/// Differentiable MS-SSIM of two `[n, c, h, w]` tensors with values in
/// `[0, 1]`, averaged over batch and channels. Returns a scalar node.
pub fn ms_ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "MS-SSIM inputs differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let (_, _, h, w) = g.value(a).dims4()?;
    let scales = scale_count(h, w)?;
    let weights = scale_weights(scales);
    let taps = gaussian_taps();

    let (mut x, mut y) = (a, b);
    let mut product: Option<Var> = None;
    for (s, &weight) in weights.iter().enumerate() {
        let last = s + 1 == scales;
        let mu_x = g.blur(x, &taps)?;
        let mu_y = g.blur(y, &taps)?;
        let xx = g.mul(x, x)?;
        let yy = g.mul(y, y)?;
        let xy = g.mul(x, y)?;
        let e_xx = g.blur(xx, &taps)?;
        let e_yy = g.blur(yy, &taps)?;
        let e_xy = g.blur(xy, &taps)?;
        let mu_xx = g.mul(mu_x, mu_x)?;
        let mu_yy = g.mul(mu_y, mu_y)?;
        let mu_xy = g.mul(mu_x, mu_y)?;
        let var_x = g.sub(e_xx, mu_xx)?;
        let var_y = g.sub(e_yy, mu_yy)?;
        let cov = g.sub(e_xy, mu_xy)?;

        let cs_num = g.scale(cov, 2.0);
        let cs_num = g.add_scalar(cs_num, C2);
        let cs_den = g.add(var_x, var_y)?;
        let cs_den = g.add_scalar(cs_den, C2);
        let mut map = g.div(cs_num, cs_den)?;
        if last {
            let l_num = g.scale(mu_xy, 2.0);
            let l_num = g.add_scalar(l_num, C1);
            let l_den = g.add(mu_xx, mu_yy)?;
            let l_den = g.add_scalar(l_den, C1);
            let luminance = g.div(l_num, l_den)?;
            map = g.mul(luminance, map)?;
        }
        let term = g.spatial_mean(map)?;
        // negative structure terms have no real fractional power
        let term = g.clamp(term, 0.0, 1.0);
        let term = g.pow(term, weight);
        product = Some(match product {
            None => term,
            Some(p) => g.mul(p, term)?,
        });
        if !last {
            x = g.avg_pool2(x)?;
            y = g.avg_pool2(y)?;
        }
    }
    let per_channel = product.expect("at least one scale");
    Ok(g.mean(per_channel))
}

/// MS-SSIM between two frames, averaged over channels.
pub fn ms_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.planes().shape() != b.planes().shape() {
        return Err(Error::Shape(format!(
            "MS-SSIM inputs differ: {:?} vs {:?}",
            a.planes().shape(),
            b.planes().shape()
        )));
    }
    ms_ssim_tensors(&a.to_batch(), &b.to_batch())
}

/// MS-SSIM between two `[n, c, h, w]` tensors.
pub fn ms_ssim_tensors(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let m = ms_ssim_var(&mut g, va, vb)?;
    Ok(g.value(m).item())
}
