use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics_io::ms_ssim_var;

/// Scalar nodes of one rate-distortion evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RdTerms {
    pub loss: Var,
    pub bpp: Var,
    pub ms_ssim: Var,
}

/// `(rate_f + rate_r) / num_pixels + λ·(1 − MS-SSIM(x1, x_rec))`, with rates
/// given as scalar bit counts.
pub fn rd_loss(
    g: &mut Graph,
    x1: Var,
    x_rec: Var,
    rate_f: Var,
    rate_r: Option<Var>,
    lambda: f64,
    num_pixels: usize,
) -> Result<RdTerms> {
    if num_pixels == 0 {
        return Err(Error::InvalidArgument("rd_loss needs at least one pixel".into()));
    }
    let bits = match rate_r {
        Some(r) => g.add(rate_f, r)?,
        None => rate_f,
    };
    let bpp = g.scale(bits, 1.0 / num_pixels as f64);
    let ms_ssim = ms_ssim_var(g, x1, x_rec)?;
    let distortion = g.scale(ms_ssim, -lambda);
    let distortion = g.add_scalar(distortion, lambda);
    let loss = g.add(bpp, distortion)?;
    Ok(RdTerms { loss, bpp, ms_ssim })
}
