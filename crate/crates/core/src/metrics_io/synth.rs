use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::motion::{ColorSpace, Frame};

/// Amplitude of the uniform noise added to the second frame.
pub const DEFAULT_NOISE: f64 = 0.01;

/// Axis-aligned rectangle `[top, top + height) × [left, left + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: i64,
    pub left: i64,
    pub height: i64,
    pub width: i64,
}

impl Rect {
    pub fn contains(&self, y: i64, x: i64) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// A generated pair with its ground truth: `x1(p) = x0(p + shift)` outside the
/// moving object, `x1(p) = x0(p + object_shift)` inside `object` (as placed
/// in `x1`), up to noise.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub x0: Frame,
    pub x1: Frame,
    /// Global `(dx, dy)`.
    pub shift: (i64, i64),
    pub object: Option<(Rect, (i64, i64))>,
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amplitude: [f64; 3],
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amplitude: [f64; 3],
}

/// Smooth random texture evaluated at any integer position.
struct Texture {
    base: [f64; 3],
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
}

impl Texture {
    fn random(rng: &mut impl Rng, extent: f64) -> Self {
        let base = [0; 3].map(|_| rng.gen_range(0.35..0.65));
        let gratings = (0..rng.gen_range(3..=6))
            .map(|_| {
                let freq = rng.gen_range(0.08..0.6);
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                Grating {
                    fx: freq * angle.cos(),
                    fy: freq * angle.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amplitude: [0; 3].map(|_| rng.gen_range(-0.08..0.08)),
                }
            })
            .collect();
        let blobs = (0..rng.gen_range(2..=5))
            .map(|_| Blob {
                cx: rng.gen_range(0.0..extent),
                cy: rng.gen_range(0.0..extent),
                radius: rng.gen_range(2.0..extent / 4.0),
                amplitude: [0; 3].map(|_| rng.gen_range(-0.25..0.25)),
            })
            .collect();
        Self { base, gratings, blobs }
    }

    fn at(&self, c: usize, y: i64, x: i64) -> f64 {
        let (x, y) = (x as f64, y as f64);
        let mut v = self.base[c];
        for g in &self.gratings {
            v += g.amplitude[c] * (g.fx * x + g.fy * y + g.phase).sin();
        }
        for b in &self.blobs {
            let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
            v += b.amplitude[c] * (-d2 / (2.0 * b.radius * b.radius)).exp();
        }
        v.clamp(0.0, 1.0)
    }
}

fn render(size: usize, f: impl Fn(usize, i64, i64) -> f64) -> Frame {
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                data.push(f(c, y, x));
            }
        }
    }
    Frame::new(Tensor::new(&[3, size, size], data).expect("extents"), ColorSpace::Rgb)
        .expect("texture values lie in [0, 1]")
}

/// Procedurally textured `(x0, x1)` pairs with planted global translations;
/// every other pair also carries a rectangle moving with its own shift.
pub fn synth_dataset(seed: u64, count: usize, size: usize, max_shift: usize) -> Result<Vec<SynthPair>> {
    synth_dataset_with_noise(seed, count, size, max_shift, DEFAULT_NOISE)
}

pub fn synth_dataset_with_noise(
    seed: u64,
    count: usize,
    size: usize,
    max_shift: usize,
    noise: f64,
) -> Result<Vec<SynthPair>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic frame size {size} must be a positive multiple of 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_shift as i64;
    let s = size as i64;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let background = Texture::random(&mut rng, (size + 2 * max_shift) as f64);
        let shift = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
        let object = if i % 2 == 1 {
            let texture = Texture::random(&mut rng, s as f64 / 2.0);
            let (height, width) = (rng.gen_range(s / 4..=s / 2), rng.gen_range(s / 4..=s / 2));
            let rect = Rect {
                top: rng.gen_range(m..=s - height - m),
                left: rng.gen_range(m..=s - width - m),
                height,
                width,
            };
            let motion = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
            Some((texture, rect, motion))
        } else {
            None
        };
        let x0 = render(size, |c, y, x| match &object {
            Some((t, r, _)) if r.contains(y, x) => t.at(c, y - r.top, x - r.left),
            _ => background.at(c, y + m, x + m),
        });
        // the object sits at `rect - motion` in x1 so that x1(p) = x0(p + motion) inside it
        let moved = object.as_ref().map(|(_, r, (dx, dy))| Rect {
            top: r.top - dy,
            left: r.left - dx,
            ..*r
        });
        let x1 = render(size, |c, y, x| match (&object, moved) {
            (Some((t, _, _)), Some(r)) if r.contains(y, x) => t.at(c, y - r.top, x - r.left),
            _ => background.at(c, y + m + shift.1, x + m + shift.0),
        });
        let x1 = if noise > 0.0 {
            Frame::from_clamped(
                x1.planes().map(|v| v + rng.gen_range(-noise..noise)),
                ColorSpace::Rgb,
            )?
        } else {
            x1
        };
        pairs.push(SynthPair {
            x0,
            x1,
            shift,
            object: object.map(|(_, _, motion)| (moved.expect("object present"), motion)),
        });
    }
    Ok(pairs)
}

/// The same randomly placed `crop × crop` window cut from both frames.
pub fn random_crop_pair(x0: &Frame, x1: &Frame, crop: usize, seed: u64) -> Result<(Frame, Frame)> {
    if x0.planes().shape() != x1.planes().shape() {
        return Err(Error::Shape("crop pair frames differ in extent".into()));
    }
    if crop == 0 || crop % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop size {crop} must be a positive multiple of 32"
        )));
    }
    if crop > x0.height() || crop > x0.width() {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} exceeds {}x{}",
            x0.height(),
            x0.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=x0.height() - crop);
    let left = rng.gen_range(0..=x0.width() - crop);
    Ok((x0.crop(top, left, crop, crop)?, x1.crop(top, left, crop, crop)?))
}
