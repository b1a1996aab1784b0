//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value and the handles of its inputs.
//! `backward` walks the tape in reverse; nodes are created in topological
//! order so no sort is needed.

use std::collections::HashMap;

use super::conv::{self, Geometry};
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::entropy::factorized::{self, FACTORIZED_PARAM_COUNT};
use crate::entropy::gmm;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    LeakyRelu(Var, f64),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Crop(Var),
    AvgPool2(Var),
    Blur(Var, Vec<f64>),
    Warp(Var, Var),
    StraightThrough(Var),
    Factorized(Var, Vec<Var>),
    Gmm {
        input: Var,
        logits: Var,
        means: Var,
        scales: Var,
        mixtures: usize,
    },
    RateBits(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    param: Option<String>,
}

/// Smallest probability charged by [`Graph::rate_bits`].
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 16_777_216.0;

/// Lower bound applied to mixture scales.
pub const SIGMA_MIN: f64 = 0.04;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    clamped_scales: usize,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: operands have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a named parameter. Repeated binds of the same name share one node,
    /// so weights reused across the graph receive the summed gradient.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?
            .clone();
        let var = self.leaf(value, params.is_trainable(name));
        self.nodes[var.0].param = Some(name.to_string());
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].grad.as_deref()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of mixture scales raised to [`SIGMA_MIN`] so far.
    pub fn clamped_scales(&self) -> usize {
        self.clamped_scales
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [cout, kin, kh, kw] = kshape[..] else {
            return Err(Error::Shape(format!(
                "conv2d kernel must be (out, in, k, k), got {kshape:?}"
            )));
        };
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d kernel must be square, got {kh}x{kw}"
            )));
        }
        if kin != cin {
            return Err(Error::Shape(format!(
                "conv2d input channels: input has {cin}, kernel expects {kin}"
            )));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::Shape(format!(
                "conv2d bias length: expected {cout} (out channels), got {}",
                self.value(bias).numel()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kh {
            return Err(Error::Shape(format!(
                "conv2d height/width {h}x{w} with padding {padding} smaller than kernel {kh}"
            )));
        }
        let g = Geometry {
            channels: cin,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kh) / stride + 1,
        };
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let per_in = cin * h * w;
        let mut out = Vec::with_capacity(n * cout * g.out_height * g.out_width);
        for i in 0..n {
            out.extend(conv::conv_forward(
                &x[i * per_in..(i + 1) * per_in],
                k,
                b,
                cout,
                &g,
            ));
        }
        let value = Tensor::new(&[n, cout, g.out_height, g.out_width], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    /// Transposed convolution with output extent `(h - 1)·stride - 2·padding + k`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv2d_transpose_padded(input, kernel, bias, stride, padding, 0)
    }

    /// Transposed convolution with `output_padding` extra rows/columns at the
    /// bottom/right, so that `stride`-fold upsampling is exact for odd kernels.
    pub fn conv2d_transpose_padded(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        let [kin, cout, kh, kw] = kshape[..] else {
            return Err(Error::Shape(format!(
                "conv2d_transpose kernel must be (in, out, k, k), got {kshape:?}"
            )));
        };
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d_transpose kernel must be square, got {kh}x{kw}"
            )));
        }
        if kin != cin {
            return Err(Error::Shape(format!(
                "conv2d_transpose input channels: input has {cin}, kernel expects {kin}"
            )));
        }
        if self.value(bias).numel() != cout {
            return Err(Error::Shape(format!(
                "conv2d_transpose bias length: expected {cout} (out channels), got {}",
                self.value(bias).numel()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d_transpose stride must be >= 1".into(),
            ));
        }
        if output_padding >= stride {
            return Err(Error::InvalidArgument(format!(
                "output padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        let full_h = (h - 1) * stride + kh + output_padding;
        let full_w = (w - 1) * stride + kh + output_padding;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d_transpose padding {padding} consumes the whole output"
            )));
        }
        let g = Geometry {
            channels: cout,
            height: full_h - 2 * padding,
            width: full_w - 2 * padding,
            kernel: kh,
            stride,
            padding,
            out_height: h,
            out_width: w,
        };
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let per_in = cin * h * w;
        let mut out = Vec::with_capacity(n * cout * g.height * g.width);
        for i in 0..n {
            out.extend(conv::conv_transpose_forward(
                &x[i * per_in..(i + 1) * per_in],
                k,
                b,
                cin,
                &g,
            ));
        }
        let value = Tensor::new(&[n, cout, g.height, g.width], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope {slope} outside [0, 1)"
            )));
        }
        let value = self
            .value(input)
            .map(|x| if x > 0.0 { x } else { slope * x });
        Ok(self.push(value, Op::LeakyRelu(input, slope), &[input]))
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        let value = self.value(input).map(softplus);
        self.push(value, Op::Softplus(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Var {
        let value = self.value(input).map(|x| x + offset);
        self.push(value, Op::Offset(input), &[input])
    }

    /// Elementwise power; the derivative at exactly zero is taken as zero.
    pub fn pow(&mut self, input: Var, exponent: f64) -> Var {
        let value = self.value(input).map(|x| x.powf(exponent));
        self.push(value, Op::Pow(input, exponent), &[input])
    }

    /// Elementwise clamp; gradient flows only strictly inside the bounds.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(input).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(input, lo, hi), &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        self.push(value, Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(value, Op::Mean(input), &[input])
    }

    /// Mean over height and width: `[n, c, h, w] -> [n, c]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let plane = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::SpatialMean(input), &[input]))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: batch/height/width {:?} differs from {:?}",
                    (vn, vh, vw),
                    (n, h, w)
                )));
            }
            channels += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape()[1] * plane;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let value = Tensor::new(&[n, channels, h, w], data)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec()), inputs))
    }

    /// Channels `[start, start + len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice of channels {start}..{} from {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&src[base..base + len * plane]);
        }
        let value = Tensor::new(&[n, len, h, w], data)?;
        Ok(self.push(value, Op::Slice(input, start), &[input]))
    }

    /// Top-left `height × width` window of every plane.
    pub fn crop(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if height > h || width > w || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "cannot crop {height}x{width} from a {h}x{w} plane"
            )));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * c * height * width);
        for p in 0..n * c {
            for y in 0..height {
                let row = (p * h + y) * w;
                data.extend_from_slice(&src[row..row + width]);
            }
        }
        let value = Tensor::new(&[n, c, height, width], data)?;
        Ok(self.push(value, Op::Crop(input), &[input]))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("cannot pool a {h}x{w} plane")));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let a = plane[2 * y * w + 2 * x] + plane[2 * y * w + 2 * x + 1];
                    let b = plane[(2 * y + 1) * w + 2 * x] + plane[(2 * y + 1) * w + 2 * x + 1];
                    data.push((a + b) * 0.25);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.push(value, Op::AvgPool2(input), &[input]))
    }

    /// Separable "valid" filtering of every plane with the same 1-D taps
    /// along both axes.
    pub fn blur(&mut self, input: Var, taps: &[f64]) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let k = taps.len();
        if k == 0 || h < k || w < k {
            return Err(Error::Shape(format!(
                "blur window {k} does not fit a {h}x{w} plane"
            )));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut tmp = vec![0.0; h * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for x in 0..ow {
                    tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
                }
            }
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for (i, t) in taps.iter().enumerate() {
                        acc += t * tmp[(y + i) * ow + x];
                    }
                    data.push(acc);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], data)?;
        Ok(self.push(value, Op::Blur(input, taps.to_vec()), &[input]))
    }

    /// Bilinear backward warp: `out(p) = reference(p + flow(p))`, sampling
    /// positions clamped to the frame.
    pub fn warp(&mut self, reference: Var, flow: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(reference).dims4()?;
        let (fn_, fc, fh, fw) = self.value(flow).dims4()?;
        if (fn_, fc, fh, fw) != (n, 2, h, w) {
            return Err(Error::Shape(format!(
                "warp: flow {:?} does not match reference {:?} (need 2 channels)",
                self.shape(flow),
                self.shape(reference)
            )));
        }
        let r = self.value(reference).data();
        let f = self.value(flow).data();
        let plane = h * w;
        let mut data = vec![0.0; n * c * plane];
        for b in 0..n {
            let fl = &f[b * 2 * plane..(b + 1) * 2 * plane];
            for y in 0..h {
                for x in 0..w {
                    let s = BilinearSample::new(x, y, fl[y * w + x], fl[plane + y * w + x], w, h);
                    for ch in 0..c {
                        let rp = &r[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        data[(b * c + ch) * plane + y * w + x] = s.sample(rp, w);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(value, Op::Warp(reference, flow), &[reference, flow]))
    }

    /// A node whose value is `value` but whose gradient flows to `input` unchanged.
    pub fn straight_through(&mut self, input: Var, value: Tensor) -> Result<Var> {
        same_shape(self.value(input), &value, "straight_through")?;
        Ok(self.push(value, Op::StraightThrough(input), &[input]))
    }

    /// Elementwise likelihood `c(x + ½) − c(x − ½)` under a per-channel
    /// factorized density whose eleven parameter tensors are given in stage order.
    pub fn factorized_likelihood(&mut self, input: Var, params: &[Var]) -> Result<Var> {
        if params.len() != FACTORIZED_PARAM_COUNT {
            return Err(Error::InvalidArgument(format!(
                "factorized density needs {FACTORIZED_PARAM_COUNT} parameter tensors, got {}",
                params.len()
            )));
        }
        let (_, c, h, w) = self.value(input).dims4()?;
        let slices: Vec<&[f64]> = params.iter().map(|&p| self.value(p).data()).collect();
        let density = factorized::Stages::from_slices(&slices, c)?;
        let plane = h * w;
        let data = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| density.likelihood((i / plane) % c, x))
            .collect();
        let value = Tensor::new(self.shape(input), data)?;
        let mut inputs = vec![input];
        inputs.extend_from_slice(params);
        Ok(self.push(value, Op::Factorized(input, params.to_vec()), &inputs))
    }

    /// Elementwise Gaussian-mixture likelihood of each value convolved with a
    /// unit uniform. `logits`, `means` and `scales` carry `mixtures × c`
    /// channels with mixture `k` of channel `j` at index `k·c + j`.
    pub fn gmm_likelihood(
        &mut self,
        input: Var,
        logits: Var,
        means: Var,
        scales: Var,
        mixtures: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        for (v, what) in [(logits, "logits"), (means, "means"), (scales, "scales")] {
            if self.value(v).dims4()? != (n, mixtures * c, h, w) {
                return Err(Error::Shape(format!(
                    "gmm {what} shape {:?}, expected {:?}",
                    self.shape(v),
                    [n, mixtures * c, h, w]
                )));
            }
        }
        let plane = h * w;
        let x = self.value(input).data();
        let (l, m, s) = (
            self.value(logits).data(),
            self.value(means).data(),
            self.value(scales).data(),
        );
        let mut data = Vec::with_capacity(x.len());
        let mut clamped = 0;
        let mut buf = gmm::MixtureBuf::new(mixtures);
        for (i, &xi) in x.iter().enumerate() {
            let (b, ch, p) = (i / (c * plane), (i / plane) % c, i % plane);
            for k in 0..mixtures {
                let j = (b * mixtures * c + k * c + ch) * plane + p;
                buf.logits[k] = l[j];
                buf.means[k] = m[j];
                buf.scales[k] = s[j];
            }
            clamped += buf.clamp_scales(SIGMA_MIN);
            data.push(buf.likelihood(xi));
        }
        self.clamped_scales += clamped;
        let value = Tensor::new(&[n, c, h, w], data)?;
        Ok(self.push(
            value,
            Op::Gmm {
                input,
                logits,
                means,
                scales,
                mixtures,
            },
            &[input, logits, means, scales],
        ))
    }

    /// Σ −log2 max(p, floor) over all elements. Below the floor the gradient
    /// is still that of `−log2 p` at the floor, so badly modelled symbols keep
    /// pulling their likelihood up instead of going flat.
    pub fn rate_bits(&mut self, likelihood: Var) -> Var {
        let bits = self
            .value(likelihood)
            .data()
            .iter()
            .map(|&p| -p.max(LIKELIHOOD_FLOOR).log2())
            .sum();
        self.push(Tensor::scalar(bits), Op::RateBits(likelihood), &[likelihood])
    }

    /// Accumulates d(loss)/d(node) into every reachable node that requires a
    /// gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (n, cin, h, w) = self.value(*input).dims4()?;
                let (_, cout, oh, ow) = out.dims4()?;
                let kt = self.value(*kernel);
                let k = kt.shape()[2];
                let geom = Geometry {
                    channels: cin,
                    height: h,
                    width: w,
                    kernel: k,
                    stride: *stride,
                    padding: *padding,
                    out_height: oh,
                    out_width: ow,
                };
                let mut gi = self.wants(*input).then(|| vec![0.0; n * cin * h * w]);
                let mut gk = self.wants(*kernel).then(|| vec![0.0; kt.numel()]);
                let mut gb = self.wants(*bias).then(|| vec![0.0; cout]);
                let x = self.value(*input).data();
                let (per_in, per_out) = (cin * h * w, cout * oh * ow);
                for b in 0..n {
                    conv::conv_backward(
                        &x[b * per_in..(b + 1) * per_in],
                        kt.data(),
                        &g[b * per_out..(b + 1) * per_out],
                        cout,
                        &geom,
                        gi.as_mut().map(|v| &mut v[b * per_in..(b + 1) * per_in]),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                self.add_grad(grads, *input, gi);
                self.add_grad(grads, *kernel, gk);
                self.add_grad(grads, *bias, gb);
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (n, cin, h, w) = self.value(*input).dims4()?;
                let (_, cout, oh, ow) = out.dims4()?;
                let kt = self.value(*kernel);
                let geom = Geometry {
                    channels: cout,
                    height: oh,
                    width: ow,
                    kernel: kt.shape()[2],
                    stride: *stride,
                    padding: *padding,
                    out_height: h,
                    out_width: w,
                };
                let mut gi = self.wants(*input).then(|| vec![0.0; n * cin * h * w]);
                let mut gk = self.wants(*kernel).then(|| vec![0.0; kt.numel()]);
                let mut gb = self.wants(*bias).then(|| vec![0.0; cout]);
                let x = self.value(*input).data();
                let (per_in, per_out) = (cin * h * w, cout * oh * ow);
                for b in 0..n {
                    conv::conv_transpose_backward(
                        &x[b * per_in..(b + 1) * per_in],
                        kt.data(),
                        &g[b * per_out..(b + 1) * per_out],
                        cin,
                        &geom,
                        gi.as_mut().map(|v| &mut v[b * per_in..(b + 1) * per_in]),
                        gk.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                self.add_grad(grads, *input, gi);
                self.add_grad(grads, *kernel, gk);
                self.add_grad(grads, *bias, gb);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { gv * slope })
                    .collect();
                self.add_grad(grads, *a, Some(d));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&gv, &xv)| gv * sigmoid(xv)).collect();
                self.add_grad(grads, *a, Some(d));
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, Some(g.to_vec()));
                self.add_grad(grads, *b, Some(g.to_vec()));
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, Some(g.to_vec()));
                self.add_grad(grads, *b, Some(g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.add_grad(grads, *a, Some(g.iter().zip(xb).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    self.add_grad(grads, *b, Some(g.iter().zip(xa).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.add_grad(grads, *a, Some(g.iter().zip(xb).map(|(g, y)| g / y).collect()));
                }
                if self.wants(*b) {
                    let d = g
                        .iter()
                        .zip(xa.iter().zip(xb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.add_grad(grads, *b, Some(d));
                }
            }
            Op::Scale(a, f) => self.add_grad(grads, *a, Some(g.iter().map(|v| v * f).collect())),
            Op::Offset(a) | Op::StraightThrough(a) => self.add_grad(grads, *a, Some(g.to_vec())),
            Op::Pow(a, e) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv == 0.0 {
                            0.0
                        } else {
                            gv * e * xv.powf(e - 1.0)
                        }
                    })
                    .collect();
                self.add_grad(grads, *a, Some(d));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                    .collect();
                self.add_grad(grads, *a, Some(d));
            }
            Op::Sum(a) => {
                let n = self.numel(*a);
                self.add_grad(grads, *a, Some(vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.numel(*a);
                self.add_grad(grads, *a, Some(vec![g[0] / n as f64; n]));
            }
            Op::SpatialMean(a) => {
                let (_, _, h, w) = self.value(*a).dims4()?;
                let plane = h * w;
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane))
                    .collect();
                self.add_grad(grads, *a, Some(d));
            }
            Op::Concat(parts) => {
                let (n, c, h, w) = out.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let base = (b * c + offset) * plane;
                            d.extend_from_slice(&g[base..base + pc * plane]);
                        }
                        self.add_grad(grads, p, Some(d));
                    }
                    offset += pc;
                }
            }
            Op::Slice(a, start) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let len = out.shape()[1];
                let plane = h * w;
                let mut d = vec![0.0; n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    d[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
                }
                self.add_grad(grads, *a, Some(d));
            }
            Op::Crop(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        let dst = (p * h + y) * w;
                        let src = (p * oh + y) * ow;
                        d[dst..dst + ow].copy_from_slice(&g[src..src + ow]);
                    }
                }
                self.add_grad(grads, *a, Some(d));
            }
            Op::AvgPool2(a) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = g[(p * oh + y) * ow + x] * 0.25;
                            dp[2 * y * w + 2 * x] += v;
                            dp[2 * y * w + 2 * x + 1] += v;
                            dp[(2 * y + 1) * w + 2 * x] += v;
                            dp[(2 * y + 1) * w + 2 * x + 1] += v;
                        }
                    }
                }
                self.add_grad(grads, *a, Some(d));
            }
            Op::Blur(a, taps) => {
                let (n, c, h, w) = self.value(*a).dims4()?;
                let k = taps.len();
                let (oh, ow) = (h - k + 1, w - k + 1);
                let mut d = vec![0.0; n * c * h * w];
                let mut tmp = vec![0.0; h * ow];
                for p in 0..n * c {
                    tmp.fill(0.0);
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = gp[y * ow + x];
                            for (i, t) in taps.iter().enumerate() {
                                tmp[(y + i) * ow + x] += t * v;
                            }
                        }
                    }
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..ow {
                            let v = tmp[y * ow + x];
                            for (j, t) in taps.iter().enumerate() {
                                dp[y * w + x + j] += t * v;
                            }
                        }
                    }
                }
                self.add_grad(grads, *a, Some(d));
            }
            Op::Warp(reference, flow) => {
                let (n, c, h, w) = self.value(*reference).dims4()?;
                let plane = h * w;
                let r = self.value(*reference).data();
                let f = self.value(*flow).data();
                let mut dr = self.wants(*reference).then(|| vec![0.0; n * c * plane]);
                let mut df = self.wants(*flow).then(|| vec![0.0; n * 2 * plane]);
                for b in 0..n {
                    let fl = &f[b * 2 * plane..(b + 1) * 2 * plane];
                    for y in 0..h {
                        for x in 0..w {
                            let s = BilinearSample::new(
                                x,
                                y,
                                fl[y * w + x],
                                fl[plane + y * w + x],
                                w,
                                h,
                            );
                            let (mut gx, mut gy) = (0.0, 0.0);
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                let gv = g[off + y * w + x];
                                if let Some(dr) = dr.as_mut() {
                                    s.scatter(&mut dr[off..off + plane], w, gv);
                                }
                                let (sx, sy) = s.slopes(&r[off..off + plane], w);
                                gx += gv * sx;
                                gy += gv * sy;
                            }
                            if let Some(df) = df.as_mut() {
                                df[b * 2 * plane + y * w + x] += gx;
                                df[b * 2 * plane + plane + y * w + x] += gy;
                            }
                        }
                    }
                }
                self.add_grad(grads, *reference, dr);
                self.add_grad(grads, *flow, df);
            }
            Op::Factorized(input, params) => {
                let (_, c, h, w) = self.value(*input).dims4()?;
                let slices: Vec<&[f64]> = params.iter().map(|&p| self.value(p).data()).collect();
                let density = factorized::Stages::from_slices(&slices, c)?;
                let mut pgrads: Vec<Vec<f64>> =
                    slices.iter().map(|s| vec![0.0; s.len()]).collect();
                let x = self.value(*input).data();
                let plane = h * w;
                let mut dx = vec![0.0; x.len()];
                for (i, &xv) in x.iter().enumerate() {
                    dx[i] = density.likelihood_backward((i / plane) % c, xv, g[i], &mut pgrads);
                }
                if self.wants(*input) {
                    self.add_grad(grads, *input, Some(dx));
                }
                for (&p, pg) in params.iter().zip(pgrads) {
                    if self.wants(p) {
                        self.add_grad(grads, p, Some(pg));
                    }
                }
            }
            Op::Gmm {
                input,
                logits,
                means,
                scales,
                mixtures,
            } => {
                let (_, c, h, w) = self.value(*input).dims4()?;
                let plane = h * w;
                let k = *mixtures;
                let x = self.value(*input).data();
                let (l, m, s) = (
                    self.value(*logits).data(),
                    self.value(*means).data(),
                    self.value(*scales).data(),
                );
                let mut dx = vec![0.0; x.len()];
                let mut dl = vec![0.0; l.len()];
                let mut dm = vec![0.0; m.len()];
                let mut ds = vec![0.0; s.len()];
                let mut buf = gmm::MixtureBuf::new(k);
                let mut idx = vec![0usize; k];
                for (i, &xi) in x.iter().enumerate() {
                    let (b, ch, p) = (i / (c * plane), (i / plane) % c, i % plane);
                    for (kk, slot) in idx.iter_mut().enumerate() {
                        let j = (b * k * c + kk * c + ch) * plane + p;
                        *slot = j;
                        buf.logits[kk] = l[j];
                        buf.means[kk] = m[j];
                        buf.scales[kk] = s[j];
                    }
                    let clamped = buf.clamp_mask(SIGMA_MIN);
                    let grad = buf.likelihood_grad(xi);
                    dx[i] = g[i] * grad.dx;
                    for kk in 0..k {
                        let j = idx[kk];
                        dl[j] = g[i] * grad.dlogits[kk];
                        dm[j] = g[i] * grad.dmeans[kk];
                        ds[j] = if clamped[kk] { 0.0 } else { g[i] * grad.dscales[kk] };
                    }
                }
                self.add_grad(grads, *input, Some(dx));
                self.add_grad(grads, *logits, Some(dl));
                self.add_grad(grads, *means, Some(dm));
                self.add_grad(grads, *scales, Some(ds));
            }
            Op::RateBits(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .map(|&p| -g[0] / (p.max(LIKELIHOOD_FLOOR) * std::f64::consts::LN_2))
                    .collect();
                self.add_grad(grads, *a, Some(d));
            }
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], var: Var, g: Option<Vec<f64>>) {
        let Some(g) = g else { return };
        if !self.wants(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds the gradients of every bound parameter into `params`.
    pub fn write_gradients(&self, params: &mut ParameterSet) {
        for (name, var) in &self.bound {
            if let Some(g) = self.grad(*var) {
                params.accumulate_grad(name, g);
            }
        }
    }

    /// Zeroes every stored gradient on the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear sampling position with clamp-to-edge semantics.
pub(crate) struct BilinearSample {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    inside_x: bool,
    inside_y: bool,
}

impl BilinearSample {
    pub(crate) fn new(x: usize, y: usize, dx: f64, dy: f64, w: usize, h: usize) -> Self {
        let (px, inside_x) = clamp_coord(x as f64 + dx, w);
        let (py, inside_y) = clamp_coord(y as f64 + dy, h);
        let (x0, fx) = split_coord(px, w);
        let (y0, fy) = split_coord(py, h);
        Self {
            x0,
            y0,
            x1: (x0 + 1).min(w - 1),
            y1: (y0 + 1).min(h - 1),
            fx,
            fy,
            inside_x,
            inside_y,
        }
    }

    pub(crate) fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let top = (1.0 - self.fx) * plane[self.y0 * w + self.x0] + self.fx * plane[self.y0 * w + self.x1];
        let bottom =
            (1.0 - self.fx) * plane[self.y1 * w + self.x0] + self.fx * plane[self.y1 * w + self.x1];
        (1.0 - self.fy) * top + self.fy * bottom
    }

    fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        plane[self.y0 * w + self.x0] += g * (1.0 - self.fx) * (1.0 - self.fy);
        plane[self.y0 * w + self.x1] += g * self.fx * (1.0 - self.fy);
        plane[self.y1 * w + self.x0] += g * (1.0 - self.fx) * self.fy;
        plane[self.y1 * w + self.x1] += g * self.fx * self.fy;
    }

    /// d(sample)/d(dx), d(sample)/d(dy); zero along a clamped axis.
    fn slopes(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let (a, b) = (plane[self.y0 * w + self.x0], plane[self.y0 * w + self.x1]);
        let (c, d) = (plane[self.y1 * w + self.x0], plane[self.y1 * w + self.x1]);
        let sx = if self.inside_x {
            (1.0 - self.fy) * (b - a) + self.fy * (d - c)
        } else {
            0.0
        };
        let sy = if self.inside_y {
            (1.0 - self.fx) * (c - a) + self.fx * (d - b)
        } else {
            0.0
        };
        (sx, sy)
    }
}

fn clamp_coord(p: f64, extent: usize) -> (f64, bool) {
    let hi = (extent - 1) as f64;
    if p <= 0.0 {
        (0.0, false)
    } else if p >= hi {
        (hi, false)
    } else {
        (p, true)
    }
}

fn split_coord(p: f64, extent: usize) -> (usize, f64) {
    if extent == 1 {
        return (0, 0.0);
    }
    let i = (p.floor() as usize).min(extent - 2);
    (i, p - i as f64)
}
