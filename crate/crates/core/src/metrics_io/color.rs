use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::motion::{ColorSpace, Frame};

/// Planar 4:2:0 picture: full-resolution luma, chroma at half size on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Yuv420 {
    pub width: usize,
    pub height: usize,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Yuv420 {
    pub fn new(width: usize, height: usize, y: Vec<f64>, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "4:2:0 needs even, non-zero extents, got {width}x{height}"
            )));
        }
        let chroma = (width / 2) * (height / 2);
        if y.len() != width * height || u.len() != chroma || v.len() != chroma {
            return Err(Error::Shape(format!(
                "4:2:0 {width}x{height} planes have {}, {}, {} samples",
                y.len(),
                u.len(),
                v.len()
            )));
        }
        Ok(Self { width, height, y, u, v })
    }
}

/// Co-sited bilinear upsampling: chroma sample `(i, j)` sits on luma `(2i, 2j)`;
/// positions past the last sample take the edge value.
fn upsample(plane: &[f64], cw: usize, ch: usize) -> Vec<f64> {
    let (w, h) = (2 * cw, 2 * ch);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, fy) = (y / 2, if y % 2 == 1 { 0.5 } else { 0.0 });
        let y1 = (y0 + 1).min(ch - 1);
        for x in 0..w {
            let (x0, fx) = (x / 2, if x % 2 == 1 { 0.5 } else { 0.0 });
            let x1 = (x0 + 1).min(cw - 1);
            let top = (1.0 - fx) * plane[y0 * cw + x0] + fx * plane[y0 * cw + x1];
            let bottom = (1.0 - fx) * plane[y1 * cw + x0] + fx * plane[y1 * cw + x1];
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

fn downsample(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (cw, ch) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        for x in 0..cw {
            let a = plane[2 * y * w + 2 * x] + plane[2 * y * w + 2 * x + 1];
            let b = plane[(2 * y + 1) * w + 2 * x] + plane[(2 * y + 1) * w + 2 * x + 1];
            out.push((a + b) * 0.25);
        }
    }
    out
}

pub fn yuv420_to_444(picture: &Yuv420) -> Result<Frame> {
    let (w, h) = (picture.width, picture.height);
    let mut data = picture.y.clone();
    data.extend(upsample(&picture.u, w / 2, h / 2));
    data.extend(upsample(&picture.v, w / 2, h / 2));
    Frame::from_clamped(Tensor::new(&[3, h, w], data)?, ColorSpace::Yuv444)
}

pub fn yuv444_to_420(frame: &Frame) -> Result<Yuv420> {
    if frame.colorspace() != ColorSpace::Yuv444 || frame.channels() != 3 {
        return Err(Error::InvalidArgument("expected a three-plane YUV 4:4:4 frame".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "4:2:0 needs even extents, got {w}x{h}"
        )));
    }
    Yuv420::new(
        w,
        h,
        frame.plane(0).to_vec(),
        downsample(frame.plane(1), w, h),
        downsample(frame.plane(2), w, h),
    )
}

/// Full-range BT.601 RGB → YUV with chroma offset by ½.
pub fn rgb_to_yuv(frame: &Frame) -> Result<Frame> {
    if frame.colorspace() != ColorSpace::Rgb || frame.channels() != 3 {
        return Err(Error::InvalidArgument("expected a three-plane RGB frame".into()));
    }
    let n = frame.height() * frame.width();
    let (r, g, b) = (frame.plane(0), frame.plane(1), frame.plane(2));
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        data[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        data[n + i] = -0.168736 * r[i] - 0.331264 * g[i] + 0.5 * b[i] + 0.5;
        data[2 * n + i] = 0.5 * r[i] - 0.418688 * g[i] - 0.081312 * b[i] + 0.5;
    }
    Frame::from_clamped(
        Tensor::new(&[3, frame.height(), frame.width()], data)?,
        ColorSpace::Yuv444,
    )
}

pub fn yuv_to_rgb(frame: &Frame) -> Result<Frame> {
    if frame.colorspace() != ColorSpace::Yuv444 || frame.channels() != 3 {
        return Err(Error::InvalidArgument("expected a three-plane YUV frame".into()));
    }
    let n = frame.height() * frame.width();
    let (y, u, v) = (frame.plane(0), frame.plane(1), frame.plane(2));
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let (cb, cr) = (u[i] - 0.5, v[i] - 0.5);
        data[i] = y[i] + 1.402 * cr;
        data[n + i] = y[i] - 0.344136 * cb - 0.714136 * cr;
        data[2 * n + i] = y[i] + 1.772 * cb;
    }
    Frame::from_clamped(
        Tensor::new(&[3, frame.height(), frame.width()], data)?,
        ColorSpace::Rgb,
    )
}
