//! Frames, flow fields, block-matching motion estimation, bilinear warping and
//! the compensation network that refines a warped prediction.
//!
//! Flow convention: `out(p) = reference(p + flow(p))`, channel 0 is the
//! horizontal displacement `dx`, channel 1 the vertical `dy`.

use rand::Rng;

use crate::autograd::layers::{self, LEAKY_SLOPE};
use crate::autograd::{BilinearSample, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Yuv444,
}

impl ColorSpace {
    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "rgb",
            ColorSpace::Yuv444 => "yuv444",
        }
    }
}

/// Image planes `C × H × W` with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    planes: Tensor,
    colorspace: ColorSpace,
}

impl Frame {
    pub fn new(planes: Tensor, colorspace: ColorSpace) -> Result<Self> {
        let &[c, h, w] = planes.shape() else {
            return Err(Error::Shape(format!(
                "frame planes must be (channels, height, width), got {:?}",
                planes.shape()
            )));
        };
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty frame {c}x{h}x{w}")));
        }
        if let Some(v) = planes.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "frame sample {v} outside [0, 1]"
            )));
        }
        Ok(Self { planes, colorspace })
    }

    /// Clamps every sample into `[0, 1]` first.
    pub fn from_clamped(planes: Tensor, colorspace: ColorSpace) -> Result<Self> {
        Self::new(planes.map(|v| v.clamp(0.0, 1.0)), colorspace)
    }

    /// Drops the batch axis of a `[1, C, H, W]` tensor.
    pub fn from_batch(batch: &Tensor, colorspace: ColorSpace) -> Result<Self> {
        let (n, c, h, w) = batch.dims4()?;
        if n != 1 {
            return Err(Error::Shape(format!("expected a batch of one, got {n}")));
        }
        Self::from_clamped(batch.clone().reshape(&[c, h, w])?, colorspace)
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn channels(&self) -> usize {
        self.planes.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.planes.data()[c * n..(c + 1) * n]
    }

    /// `[1, C, H, W]` view for the networks.
    pub fn to_batch(&self) -> Tensor {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        self.planes.clone().reshape(&[1, c, h, w]).expect("same element count")
    }

    /// Extends bottom and right edges by replication up to multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Frame {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let src = self.planes.data();
        let mut data = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for y in 0..ph {
                let row = &src[(ch * h + y.min(h - 1)) * w..][..w];
                data.extend_from_slice(row);
                data.extend(std::iter::repeat_n(row[w - 1], pw - w));
            }
        }
        Frame {
            planes: Tensor::new(&[c, ph, pw], data).expect("padded extents"),
            colorspace: self.colorspace,
        }
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Frame> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
            )));
        }
        let src = self.planes.data();
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in top..top + height {
                data.extend_from_slice(&src[(ch * h + y) * w + left..][..width]);
            }
        }
        Ok(Frame {
            planes: Tensor::new(&[c, height, width], data)?,
            colorspace: self.colorspace,
        })
    }

    fn same_extent(&self, other: &Frame) -> Result<()> {
        if self.planes.shape() != other.planes.shape() {
            return Err(Error::Shape(format!(
                "frames differ in extent: {:?} vs {:?}",
                self.planes.shape(),
                other.planes.shape()
            )));
        }
        Ok(())
    }
}

/// Per-pixel displacement `(dx, dy)` stored as a `2 × H × W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<Self> {
        let &[2, h, w] = data.shape() else {
            return Err(Error::Shape(format!(
                "flow must be (2, height, width), got {:?}",
                data.shape()
            )));
        };
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty flow field".into()));
        }
        if data.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("flow has non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, height, width]),
        }
    }

    /// A flow that is `(dx, dy)` everywhere.
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let n = height * width;
        let mut data = vec![dx; n];
        data.extend(std::iter::repeat_n(dy, n));
        Self {
            data: Tensor::new(&[2, height, width], data).expect("flow extents"),
        }
    }

    pub fn from_batch(batch: &Tensor) -> Result<Self> {
        let (n, c, h, w) = batch.dims4()?;
        if n != 1 || c != 2 {
            return Err(Error::Shape(format!(
                "expected a (1, 2, h, w) flow batch, got {:?}",
                batch.shape()
            )));
        }
        Self::new(batch.clone().reshape(&[2, h, w])?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.data.data()[y * self.width() + x]
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.data.data()[self.height() * self.width() + y * self.width() + x]
    }

    pub fn to_batch(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        self.data.clone().reshape(&[1, 2, h, w]).expect("same element count")
    }
}

fn block_sad(
    target: &Frame,
    reference: &Frame,
    (y0, x0, bh, bw): (usize, usize, usize, usize),
    (dy, dx): (i64, i64),
) -> f64 {
    let (h, w) = (target.height() as i64, target.width() as i64);
    let mut sad = 0.0;
    for c in 0..target.channels() {
        let (t, r) = (target.plane(c), reference.plane(c));
        for y in y0..y0 + bh {
            let ry = (y as i64 + dy).clamp(0, h - 1) as usize;
            for x in x0..x0 + bw {
                let rx = (x as i64 + dx).clamp(0, w - 1) as usize;
                sad += (t[y * w as usize + x] - r[ry * w as usize + rx]).abs();
            }
        }
    }
    sad
}

/// Integer block-matching flow. Every `block × block` tile of `target` (the
/// last row/column of tiles may be smaller) takes the displacement within
/// `±radius` whose clamped reference window has the lowest sum of absolute
/// differences; ties go to the zero vector, then to the smallest `(dy, dx)`.
pub fn estimate_flow(
    target: &Frame,
    reference: &Frame,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    target.same_extent(reference)?;
    if block == 0 {
        return Err(Error::InvalidArgument("block size must be >= 1".into()));
    }
    let (h, w) = (target.height(), target.width());
    let r = radius as i64;
    let mut flow = FlowField::zeros(h, w);
    let plane = h * w;
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let tile = (by, bx, block.min(h - by), block.min(w - bx));
            let mut best = (block_sad(target, reference, tile, (0, 0)), 0i64, 0i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dy, dx) == (0, 0) {
                        continue;
                    }
                    let sad = block_sad(target, reference, tile, (dy, dx));
                    if sad < best.0 {
                        best = (sad, dy, dx);
                    }
                }
            }
            let data = flow.data.data_mut();
            for y in by..by + tile.2 {
                for x in bx..bx + tile.3 {
                    data[y * w + x] = best.2 as f64;
                    data[plane + y * w + x] = best.1 as f64;
                }
            }
        }
    }
    Ok(flow)
}

/// `out(p) = reference(p + flow(p))` with bilinear interpolation and
/// clamp-to-edge sampling.
pub fn warp_bilinear(reference: &Frame, flow: &FlowField) -> Result<Frame> {
    let (c, h, w) = (reference.channels(), reference.height(), reference.width());
    if (flow.height(), flow.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "flow {}x{} does not match frame {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let s = BilinearSample::new(x, y, flow.dx(y, x), flow.dy(y, x), w, h);
            for ch in 0..c {
                data[(ch * h + y) * w + x] = s.sample(reference.plane(ch), w);
            }
        }
    }
    // convex combinations of [0, 1] samples stay in range up to rounding
    Frame::from_clamped(Tensor::new(&[c, h, w], data)?, reference.colorspace())
}

/// Number of residual blocks in the refinement network.
pub const REFINE_BLOCKS: usize = 3;

const COMP: &str = "comp";

/// Adds the refinement network's parameters: 8 → `width` conv, residual
/// blocks at `width`, `width` → 3 conv.
pub fn init_compensation(
    params: &mut ParameterSet,
    rng: &mut impl Rng,
    width: usize,
    kernel: usize,
) -> Result<()> {
    layers::init_conv(params, rng, &format!("{COMP}.in"), 8, width, kernel)?;
    for i in 0..REFINE_BLOCKS {
        layers::init_residual_block(params, rng, &format!("{COMP}.rb{i}"), width, kernel)?;
    }
    layers::init_conv(params, rng, &format!("{COMP}.out"), width, 3, kernel)
}

/// Parameter name prefix of the compensation network.
pub fn compensation_prefix() -> &'static str {
    COMP
}

/// Refined prediction `clamp(warped + refine(concat(warped, reference, flow)), 0, 1)`
/// for `[n, 3, h, w]` frames and `[n, 2, h, w]` flow.
pub fn compensate(
    g: &mut Graph,
    params: &ParameterSet,
    warped: Var,
    reference: Var,
    flow: Var,
) -> Result<Var> {
    let x = g.concat(&[warped, reference, flow])?;
    if g.shape(x)[1] != 8 {
        return Err(Error::Shape(format!(
            "compensation expects 3 + 3 + 2 channels, got {}",
            g.shape(x)[1]
        )));
    }
    let mut h = layers::conv(g, params, &format!("{COMP}.in"), x, 1)?;
    h = g.leaky_relu(h, LEAKY_SLOPE)?;
    for i in 0..REFINE_BLOCKS {
        h = layers::residual_block(g, params, &format!("{COMP}.rb{i}"), h)?;
    }
    let delta = layers::conv(g, params, &format!("{COMP}.out"), h, 1)?;
    let refined = g.add(warped, delta)?;
    Ok(g.clamp(refined, 0.0, 1.0))
}

/// Warp plus refinement on concrete frames.
pub fn compensate_frames(
    params: &ParameterSet,
    reference: &Frame,
    flow: &FlowField,
) -> Result<Frame> {
    let mut g = Graph::new();
    let r = g.constant(reference.to_batch());
    let f = g.constant(flow.to_batch());
    let warped = g.warp(r, f)?;
    let out = compensate(&mut g, params, warped, r, f)?;
    Frame::from_batch(g.value(out), reference.colorspace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Frame {
        let data = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Frame::new(Tensor::new(&[c, h, w], data).unwrap(), ColorSpace::Rgb).unwrap()
    }

    /// Smooth texture with no repeats across a small search window.
    fn texture(h: usize, w: usize, shift_x: i64) -> Frame {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f64 - shift_x as f64;
                    let v = y as f64;
                    let s = 0.5
                        + 0.2 * (0.31 * u + 0.17 * v + c as f64).sin()
                        + 0.2 * (0.07 * u * u / 10.0 - 0.23 * v + 0.5 * c as f64).cos();
                    data.push(s.clamp(0.0, 1.0));
                }
            }
        }
        Frame::new(Tensor::new(&[3, h, w], data).unwrap(), ColorSpace::Rgb).unwrap()
    }

    /// Exhaustive oracle: every candidate ranked by (SAD, non-zero, dy, dx).
    fn oracle_flow(target: &Frame, reference: &Frame, block: usize, radius: i64) -> Vec<(i64, i64)> {
        let (h, w) = (target.height(), target.width());
        let mut out = Vec::new();
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let mut candidates = Vec::new();
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let mut sad = 0.0;
                        for c in 0..target.channels() {
                            for y in by..(by + block).min(h) {
                                for x in bx..(bx + block).min(w) {
                                    let ry = (y as i64 + dy).max(0).min(h as i64 - 1) as usize;
                                    let rx = (x as i64 + dx).max(0).min(w as i64 - 1) as usize;
                                    sad += (target.plane(c)[y * w + x] - reference.plane(c)[ry * w + rx]).abs();
                                }
                            }
                        }
                        candidates.push((sad, (dy, dx) != (0, 0), dy, dx));
                    }
                }
                candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
                out.push((candidates[0].2, candidates[0].3));
            }
        }
        out
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 3, 16, 16);
        let flow = estimate_flow(&f, &f, 8, 3).unwrap();
        assert!(flow.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_shift_is_recovered() {
        // reference content sits 2 px to the right of the target's
        let target = texture(32, 48, 0);
        let reference = texture(32, 48, 2);
        let flow = estimate_flow(&target, &reference, 8, 4).unwrap();
        for y in 8..24 {
            for x in 8..40 {
                assert_eq!((flow.dx(y, x), flow.dy(y, x)), (2.0, 0.0), "at ({y}, {x})");
            }
        }
    }

    #[test]
    fn zero_radius_gives_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_frame(&mut rng, 3, 16, 24);
        let b = random_frame(&mut rng, 3, 16, 24);
        let flow = estimate_flow(&a, &b, 8, 0).unwrap();
        assert!(flow.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..4 {
            let a = random_frame(&mut rng, 3, 32, 32);
            // quantized samples create genuine SAD ties
            let b = if trial % 2 == 0 {
                random_frame(&mut rng, 3, 32, 32)
            } else {
                Frame::new(a.planes().map(|v| (v * 2.0).round() / 2.0), ColorSpace::Rgb).unwrap()
            };
            let flow = estimate_flow(&a, &b, 8, 3).unwrap();
            let expected = oracle_flow(&a, &b, 8, 3);
            let mut i = 0;
            for by in (0..32).step_by(8) {
                for bx in (0..32).step_by(8) {
                    assert_eq!((flow.dy(by, bx) as i64, flow.dx(by, bx) as i64), expected[i]);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn flat_frames_tie_to_zero() {
        let flat = Frame::new(Tensor::full(&[3, 16, 16], 0.5), ColorSpace::Rgb).unwrap();
        let flow = estimate_flow(&flat, &flat, 8, 7).unwrap();
        assert!(flow.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_frame(&mut rng, 3, 9, 13);
        assert_eq!(warp_bilinear(&f, &FlowField::zeros(9, 13)).unwrap(), f);
    }

    #[test]
    fn half_pixel_flow_averages_neighbours() {
        let (h, w) = (2, 8);
        let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 * 0.1 + 0.05 * (i % 3) as f64).collect();
        let f = Frame::new(Tensor::new(&[1, h, w], ramp.clone()).unwrap(), ColorSpace::Rgb).unwrap();
        let out = warp_bilinear(&f, &FlowField::constant(h, w, 0.5, 0.0)).unwrap();
        for y in 0..h {
            for x in 0..w - 1 {
                let expected = 0.5 * (ramp[y * w + x] + ramp[y * w + x + 1]);
                assert!((out.plane(0)[y * w + x] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn unit_flow_shifts_with_clamped_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_frame(&mut rng, 2, 5, 6);
        let out = warp_bilinear(&f, &FlowField::constant(5, 6, 1.0, 0.0)).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..6 {
                    assert_eq!(out.plane(c)[y * 6 + x], f.plane(c)[y * 6 + (x + 1).min(5)]);
                }
            }
        }
    }

    #[test]
    fn zero_refinement_returns_warped_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ParameterSet::new();
        init_compensation(&mut params, &mut rng, 4, 3).unwrap();
        layers::zero_parameters(&mut params, COMP);
        let reference = random_frame(&mut rng, 3, 8, 8);
        let flow = FlowField::constant(8, 8, 0.25, -0.75);
        let out = compensate_frames(&params, &reference, &flow).unwrap();
        assert_eq!(out, warp_bilinear(&reference, &flow).unwrap());
        assert_eq!(out.planes().shape(), reference.planes().shape());
    }

    #[test]
    fn compensation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParameterSet::new();
        init_compensation(&mut params, &mut rng, 4, 3).unwrap();
        // small weights keep the output clear of the clamp
        for n in params.names().map(str::to_string).collect::<Vec<_>>() {
            params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        let warped = Tensor::new(&[1, 3, 8, 8], (0..192).map(|_| rng.gen_range(0.3..0.7)).collect()).unwrap();
        let reference = Tensor::new(&[1, 3, 8, 8], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let flow = Tensor::new(&[1, 2, 8, 8], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let weights: Vec<f64> = (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |inputs: &[Tensor; 3], params: &ParameterSet| {
            let mut g = Graph::new();
            let vars = inputs.clone().map(|t| g.variable(t));
            let out = compensate(&mut g, params, vars[0], vars[1], vars[2]).unwrap();
            let w = g.constant(Tensor::new(&[1, 3, 8, 8], weights.clone()).unwrap());
            let p = g.mul(out, w).unwrap();
            let l = g.sum(p);
            (g, vars, l)
        };
        let inputs = [warped, reference, flow];
        let (mut g, vars, l) = loss(&inputs, &params);
        g.backward(l).unwrap();
        g.write_gradients(&mut params);
        // small step: leaky kinks sit close to some pre-activations
        let h = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3) < 1e-4;
        for (which, var) in vars.iter().enumerate() {
            let analytic = g.grad(*var).unwrap().to_vec();
            for i in (0..inputs[which].numel()).step_by(7) {
                let mut plus = inputs.clone();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[i] -= h;
                let (gp, _, lp) = loss(&plus, &params);
                let (gm, _, lm) = loss(&minus, &params);
                let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                assert!(close(analytic[i], numeric), "input {which}[{i}]: {} vs {numeric}", analytic[i]);
            }
        }
        let name = format!("{COMP}.in.w");
        let analytic = params.grad(&name).unwrap().to_vec();
        for i in (0..analytic.len()).step_by(11) {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            let (gp, _, lp) = loss(&inputs, &plus);
            let (gm, _, lm) = loss(&inputs, &minus);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            assert!(close(analytic[i], numeric), "{name}[{i}]: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn missing_compensation_parameters_reported() {
        let params = ParameterSet::new();
        let f = Frame::new(Tensor::full(&[3, 4, 4], 0.5), ColorSpace::Rgb).unwrap();
        let err = compensate_frames(&params, &f, &FlowField::zeros(4, 4)).unwrap_err();
        assert!(matches!(err, Error::MissingParameter(_)));
    }

    #[test]
    fn padding_replicates_edges_and_crop_undoes_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_frame(&mut rng, 3, 5, 7);
        let p = f.pad_to_multiple(4);
        assert_eq!((p.height(), p.width()), (8, 8));
        assert_eq!(p.plane(1)[7 * 8 + 7], f.plane(1)[4 * 7 + 6]);
        assert_eq!(p.crop(0, 0, 5, 7).unwrap(), f);
    }

    #[test]
    fn frames_reject_out_of_range_samples() {
        assert!(Frame::new(Tensor::full(&[3, 2, 2], 1.5), ColorSpace::Rgb).is_err());
        assert!(Frame::new(Tensor::full(&[2, 2], 0.5), ColorSpace::Rgb).is_err());
        assert!(FlowField::new(Tensor::full(&[2, 2, 2], f64::NAN)).is_err());
    }

    proptest! {
        #[test]
        fn warp_stays_within_reference_range(
            seed in 0u64..1000,
            dx in -3.0f64..3.0,
            dy in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_frame(&mut rng, 1, 6, 7);
            let mut flow = Vec::new();
            for i in 0..84 {
                flow.push(if i < 42 { dx + rng.gen_range(-1.0..1.0) } else { dy + rng.gen_range(-1.0..1.0) });
            }
            let flow = FlowField::new(Tensor::new(&[2, 6, 7], flow).unwrap()).unwrap();
            let out = warp_bilinear(&f, &flow).unwrap();
            let lo = f.planes().data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = f.planes().data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.planes().data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
