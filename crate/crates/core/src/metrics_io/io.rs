use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use super::color::{yuv420_to_444, yuv444_to_420, Yuv420};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::motion::{ColorSpace, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subsampling {
    Yuv420,
    Yuv444,
}

impl Subsampling {
    pub fn tag(self) -> &'static str {
        match self {
            Subsampling::Yuv420 => "420",
            Subsampling::Yuv444 => "444",
        }
    }

    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "420" => Ok(Subsampling::Yuv420),
            "444" => Ok(Subsampling::Yuv444),
            other => Err(Error::InvalidArgument(format!("unknown subsampling `{other}`"))),
        }
    }
}

/// Geometry of a planar 8-bit raw video file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawVideoSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub subsampling: Subsampling,
}

impl RawVideoSpec {
    pub fn new(width: usize, height: usize, frames: usize, subsampling: Subsampling) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("raw video extents must be non-zero".into()));
        }
        if subsampling == Subsampling::Yuv420 && (width % 2 != 0 || height % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "4:2:0 needs even extents, got {width}x{height}"
            )));
        }
        Ok(Self { width, height, frames, subsampling })
    }

    pub fn frame_bytes(&self) -> usize {
        let luma = self.width * self.height;
        match self.subsampling {
            Subsampling::Yuv420 => luma + luma / 2,
            Subsampling::Yuv444 => 3 * luma,
        }
    }

    /// `key=value` lines of the sidecar header.
    pub fn to_header(&self) -> String {
        format!(
            "width={}\nheight={}\nframes={}\nformat={}\nbitdepth=8\n",
            self.width,
            self.height,
            self.frames,
            self.subsampling.tag()
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad header line `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let number = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .ok_or_else(|| Error::InvalidArgument(format!("header lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("header `{key}` is not a number")))
        };
        if let Some(depth) = fields.get("bitdepth") {
            if *depth != "8" {
                return Err(Error::InvalidArgument(format!("unsupported bit depth {depth}")));
            }
        }
        let format = fields
            .get("format")
            .ok_or_else(|| Error::InvalidArgument("header lacks `format`".into()))?;
        Self::new(number("width")?, number("height")?, number("frames")?, Subsampling::parse(format)?)
    }
}

/// Sidecar header path: the video path with `.hdr` appended.
pub fn header_path(video: &Path) -> PathBuf {
    let mut name = video.as_os_str().to_owned();
    name.push(".hdr");
    PathBuf::from(name)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Serializes frames as planar 8-bit YUV. Frames must be 4:4:4 YUV.
pub fn encode_raw_video(spec: &RawVideoSpec, frames: &[Frame]) -> Result<Vec<u8>> {
    if frames.len() != spec.frames {
        return Err(Error::InvalidArgument(format!(
            "header declares {} frames, got {}",
            spec.frames,
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(spec.frame_bytes() * frames.len());
    for f in frames {
        if (f.width(), f.height()) != (spec.width, spec.height) {
            return Err(Error::Shape(format!(
                "frame {}x{} does not match {}x{}",
                f.width(),
                f.height(),
                spec.width,
                spec.height
            )));
        }
        match spec.subsampling {
            Subsampling::Yuv444 => {
                if f.colorspace() != ColorSpace::Yuv444 {
                    return Err(Error::InvalidArgument("raw video frames must be YUV".into()));
                }
                out.extend(f.planes().data().iter().map(|&v| to_byte(v)));
            }
            Subsampling::Yuv420 => {
                let p = yuv444_to_420(f)?;
                for plane in [&p.y, &p.u, &p.v] {
                    out.extend(plane.iter().map(|&v| to_byte(v)));
                }
            }
        }
    }
    Ok(out)
}

/// Parses planar 8-bit YUV; 4:2:0 input is upsampled to 4:4:4.
pub fn decode_raw_video(spec: &RawVideoSpec, bytes: &[u8]) -> Result<Vec<Frame>> {
    let expected = spec.frame_bytes() * spec.frames;
    if bytes.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "raw video holds {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let (w, h) = (spec.width, spec.height);
    bytes
        .chunks(spec.frame_bytes().max(1))
        .take(spec.frames)
        .map(|chunk| match spec.subsampling {
            Subsampling::Yuv444 => {
                Frame::new(Tensor::new(&[3, h, w], from_bytes(chunk))?, ColorSpace::Yuv444)
            }
            Subsampling::Yuv420 => {
                let (luma, chroma) = (w * h, w * h / 4);
                let p = Yuv420::new(
                    w,
                    h,
                    from_bytes(&chunk[..luma]),
                    from_bytes(&chunk[luma..luma + chroma]),
                    from_bytes(&chunk[luma + chroma..]),
                )?;
                yuv420_to_444(&p)
            }
        })
        .collect()
}

pub fn read_raw_video(path: &Path) -> Result<(RawVideoSpec, Vec<Frame>)> {
    let spec = RawVideoSpec::from_header(&fs::read_to_string(header_path(path))?)?;
    let frames = decode_raw_video(&spec, &fs::read(path)?)?;
    Ok((spec, frames))
}

fn image_format(path: &Path) -> Option<ImageFormat> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => Some(ImageFormat::Png),
        "ppm" | "pnm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

fn is_raw(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("yuv")
}

/// Reads one frame: PNG/PPM as RGB, `.yuv` (with sidecar) as its first frame.
pub fn read_frame(path: &Path) -> Result<Frame> {
    if is_raw(path) {
        let (_, frames) = read_raw_video(path)?;
        return frames
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("{} holds no frames", path.display())));
    }
    let format = image_format(path).ok_or_else(|| {
        Error::InvalidArgument(format!("unsupported frame file {}", path.display()))
    })?;
    let img = image::load_from_memory_with_format(&fs::read(path)?, format)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f64::from(px[c]) / 255.0;
        }
    }
    Frame::new(Tensor::new(&[3, h, w], data)?, ColorSpace::Rgb)
}

/// Encodes a frame in the format implied by `path`'s extension.
pub fn encode_frame(path: &Path, frame: &Frame) -> Result<Vec<u8>> {
    if is_raw(path) {
        return encode_raw_video(
            &RawVideoSpec::new(frame.width(), frame.height(), 1, Subsampling::Yuv444)?,
            std::slice::from_ref(frame),
        );
    }
    let format = image_format(path).ok_or_else(|| {
        Error::InvalidArgument(format!("unsupported frame file {}", path.display()))
    })?;
    if frame.colorspace() != ColorSpace::Rgb || frame.channels() != 3 {
        return Err(Error::InvalidArgument("image files hold RGB frames only".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px[c] = to_byte(frame.plane(c)[i]);
        }
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, format)?;
    Ok(bytes.into_inner())
}

/// Sidecar header text to accompany a single-frame `.yuv` file.
pub fn frame_sidecar(frame: &Frame) -> Result<String> {
    Ok(RawVideoSpec::new(frame.width(), frame.height(), 1, Subsampling::Yuv444)?.to_header())
}

/// Rounds every sample to the nearest multiple of 1/255, as a file round trip would.
pub fn quantize_8bit(frame: &Frame) -> Frame {
    Frame::from_clamped(
        frame.planes().map(|v| f64::from(to_byte(v)) / 255.0),
        frame.colorspace(),
    )
    .expect("same extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut impl Rng, cs: ColorSpace, h: usize, w: usize) -> Frame {
        let data = (0..3 * h * w).map(|_| f64::from(rng.gen::<u8>()) / 255.0).collect();
        Frame::new(Tensor::new(&[3, h, w], data).unwrap(), cs).unwrap()
    }

    #[test]
    fn header_round_trip() {
        let spec = RawVideoSpec::new(64, 32, 3, Subsampling::Yuv420).unwrap();
        assert_eq!(RawVideoSpec::from_header(&spec.to_header()).unwrap(), spec);
        assert!(RawVideoSpec::from_header("width=4\nheight=4\nframes=1\nformat=422\n").is_err());
        assert!(RawVideoSpec::from_header("width=4\nheight=4\nframes=1\nformat=444\nbitdepth=10\n").is_err());
        assert!(RawVideoSpec::new(5, 4, 1, Subsampling::Yuv420).is_err());
    }

    #[test]
    fn raw_444_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames: Vec<_> = (0..2).map(|_| random_frame(&mut rng, ColorSpace::Yuv444, 6, 10)).collect();
        let spec = RawVideoSpec::new(10, 6, 2, Subsampling::Yuv444).unwrap();
        let bytes = encode_raw_video(&spec, &frames).unwrap();
        assert_eq!(bytes.len(), 2 * 3 * 60);
        assert_eq!(decode_raw_video(&spec, &bytes).unwrap(), frames);
        assert!(decode_raw_video(&spec, &bytes[1..]).is_err());
    }

    #[test]
    fn raw_420_keeps_luma_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = RawVideoSpec::new(8, 4, 1, Subsampling::Yuv420).unwrap();
        let bytes: Vec<u8> = (0..spec.frame_bytes()).map(|_| rng.gen()).collect();
        let frames = decode_raw_video(&spec, &bytes).unwrap();
        let again = encode_raw_video(&spec, &frames).unwrap();
        assert_eq!(again[..32], bytes[..32]);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, ColorSpace::Rgb, 7, 9);
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            fs::write(&path, encode_frame(&path, &f).unwrap()).unwrap();
            assert_eq!(read_frame(&path).unwrap(), f);
        }
        let path = dir.path().join("a.yuv");
        let yuv = random_frame(&mut rng, ColorSpace::Yuv444, 4, 4);
        fs::write(&path, encode_frame(&path, &yuv).unwrap()).unwrap();
        fs::write(header_path(&path), frame_sidecar(&yuv).unwrap()).unwrap();
        assert_eq!(read_frame(&path).unwrap(), yuv);
        assert!(read_frame(&dir.path().join("a.bmp")).is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = Frame::new(Tensor::new(&[3, 4, 4], data).unwrap(), ColorSpace::Rgb).unwrap();
        let q = quantize_8bit(&f);
        assert_eq!(quantize_8bit(&q), q);
        assert!(q.planes().max_abs_diff(f.planes()) <= 0.5 / 255.0 + 1e-12);
    }
}
