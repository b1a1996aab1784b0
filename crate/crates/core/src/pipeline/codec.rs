use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bitstream::{PFrameBitstream, Section, SectionKind, POSTPROCESS_IDENTITY};
use crate::autograd::Tensor;
use crate::entropy::{build_cdf_table, CdfTable, FactorizedDensity, GmmConditional, PmfSource, QuantizeMode, CODING_PRECISION};
use crate::error::{Error, Result};
use crate::metrics_io::ms_ssim;
use crate::motion::{compensate_frames, estimate_flow, warp_bilinear, Frame, FlowField};
use crate::range_coder::{self, CodedStream};
use crate::transforms::{motion_codec, residual, Model, ResidualMode};

/// Frames are padded to a multiple of this before coding.
pub const PAD_MULTIPLE: usize = 32;
pub const FLOW_BLOCK: usize = 8;
pub const FLOW_RADIUS: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct SectionStats {
    pub kind: SectionKind,
    pub symbols: usize,
    pub bytes: usize,
    /// `8 × bytes`.
    pub bits: usize,
    /// `Σ −log2 p` under the continuous model.
    pub estimated_bits: f64,
    /// `Σ −log2 p̂` under the quantized tables the section was coded with.
    pub ideal_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeStats {
    pub width: usize,
    pub height: usize,
    pub mode: ResidualMode,
    pub sections: Vec<SectionStats>,
    /// Size of the whole serialized stream.
    pub total_bytes: usize,
    /// Of the reconstruction against `x1`; absent for frames under 11 pixels.
    pub ms_ssim: Option<f64>,
}

impl EncodeStats {
    pub fn section(&self, kind: SectionKind) -> &SectionStats {
        self.sections.iter().find(|s| s.kind == kind).expect("all sections present")
    }

    pub fn payload_bits(&self) -> usize {
        self.sections.iter().map(|s| s.bits).sum()
    }

    /// One `key=value` record line.
    pub fn to_record(&self) -> String {
        let mut out = format!(
            "width={} height={} mode={} bytes={}",
            self.width, self.height, self.mode, self.total_bytes
        );
        for s in &self.sections {
            out.push_str(&format!(
                " {0}_symbols={1} {0}_bits={2} {0}_estimated_bits={3:.3} {0}_ideal_bits={4:.3}",
                s.kind.name(),
                s.symbols,
                s.bits,
                s.estimated_bits,
                s.ideal_bits
            ));
        }
        match self.ms_ssim {
            Some(v) => out.push_str(&format!(" ms_ssim={v}")),
            None => out.push_str(" ms_ssim=na"),
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub stream: PFrameBitstream,
    /// What [`decode_pframe`] yields for `bytes`.
    pub reconstruction: Frame,
    pub stats: EncodeStats,
}

/// Latent geometry implied by a padded frame extent.
struct Geometry {
    padded: (usize, usize),
    motion: [usize; 4],
    latents: [usize; 4],
    hyper: [usize; 4],
}

impl Geometry {
    fn new(model: &Model, mode: ResidualMode, height: usize, width: usize) -> Self {
        let (ph, pw) = (height.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE);
        let f = motion_codec::FACTOR;
        let l = residual::LATENT_FACTOR;
        let n = match mode {
            ResidualMode::Pixel => model.config.n_pixel,
            ResidualMode::Feature => model.config.n_feature,
        };
        Self {
            padded: (ph, pw),
            motion: [1, model.config.n_motion, ph / f, pw / f],
            latents: [1, n, ph / l, pw / l],
            hyper: [1, n, (ph / l).div_ceil(4), (pw / l).div_ceil(4)],
        }
    }

    fn shape(&self, kind: SectionKind) -> &[usize; 4] {
        match kind {
            SectionKind::Motion => &self.motion,
            SectionKind::Hyper => &self.hyper,
            SectionKind::Latents => &self.latents,
        }
    }
}

fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.is_finite() && v.abs() < (1 << 30) as f64 {
                Ok(v as i32)
            } else {
                Err(Error::InvalidArgument(format!("latent {v} cannot be coded")))
            }
        })
        .collect()
}

/// Coding support one symbol wider than the values on each side.
fn support(symbols: &[i32]) -> Result<(i32, i32)> {
    let lo = symbols.iter().copied().min().unwrap_or(0) - 1;
    let hi = symbols.iter().copied().max().unwrap_or(0) + 1;
    if (hi as i64 - lo as i64 + 1) > 1i64 << CODING_PRECISION {
        return Err(Error::InvalidArgument(format!(
            "latent range [{lo}, {hi}] is too wide to code"
        )));
    }
    Ok((lo, hi))
}

fn factorized_tables(density: &FactorizedDensity, s_min: i32, s_max: i32) -> Result<Vec<CdfTable>> {
    (0..density.channels())
        .map(|channel| {
            build_cdf_table(PmfSource::Factorized { density, channel }, s_min, s_max, CODING_PRECISION)
        })
        .collect()
}

/// Per-symbol table references for a channel-wise model over `[1, c, h, w]`.
fn by_channel<'a>(tables: &'a [CdfTable], shape: &[usize; 4]) -> Vec<&'a CdfTable> {
    let plane = shape[2] * shape[3];
    (0..shape[1] * plane).map(|i| &tables[i / plane]).collect()
}

fn gmm_tables(gmm: &GmmConditional, s_min: i32, s_max: i32) -> Result<Vec<CdfTable>> {
    (0..gmm.len())
        .map(|index| build_cdf_table(PmfSource::Gmm { params: gmm, index }, s_min, s_max, CODING_PRECISION))
        .collect()
}

/// The coded section and its ideal size under `tables`.
fn code_section(
    kind: SectionKind,
    symbols: &[i32],
    (s_min, s_max): (i32, i32),
    tables: &[&CdfTable],
) -> Result<(Section, f64)> {
    let coded = range_coder::encode(symbols, tables)?;
    let ideal = range_coder::ideal_bits(symbols, tables)?;
    let section = Section {
        kind,
        s_min,
        s_max,
        symbols: symbols.len() as u32,
        payload: coded.bytes,
    };
    Ok((section, ideal))
}

fn decode_section(section: &Section, tables: &[&CdfTable], shape: &[usize; 4]) -> Result<Tensor> {
    let stream = CodedStream {
        bytes: section.payload.clone(),
        symbols: section.symbols as usize,
    };
    let symbols = range_coder::decode(&stream, tables)?;
    Tensor::new(shape, symbols.into_iter().map(f64::from).collect())
}

/// Motion-compensated prediction `x̄1` from the reference and decoded
/// motion latents, plus the reconstructed flow.
pub fn predict(model: &Model, reference: &Frame, motion_latents: &Tensor) -> Result<(FlowField, Frame)> {
    let flow = motion_codec::decode(&model.params, motion_latents)?;
    let xbar = compensate_frames(&model.params, reference, &flow)?;
    Ok((flow, xbar))
}

/// Codes `x1` as a P-frame predicted from `x0`.
pub fn encode_pframe(x0: &Frame, x1: &Frame, model: &Model, mode: ResidualMode) -> Result<Encoded> {
    if x0.planes().shape() != x1.planes().shape() || x0.colorspace() != x1.colorspace() {
        return Err(Error::Shape(format!(
            "reference {:?} ({}) and target {:?} ({}) differ",
            x0.planes().shape(),
            x0.colorspace().name(),
            x1.planes().shape(),
            x1.colorspace().name()
        )));
    }
    if x0.channels() != 3 {
        return Err(Error::Shape(format!("frames need 3 planes, got {}", x0.channels())));
    }
    let (h, w) = (x0.height(), x0.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!("frame {w}x{h} exceeds 65535")));
    }
    let geo = Geometry::new(model, mode, h, w);
    let x0p = x0.pad_to_multiple(PAD_MULTIPLE);
    let x1p = x1.pad_to_multiple(PAD_MULTIPLE);
    // inference draws no noise; the generator only satisfies the signature
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let flow = estimate_flow(&x1p, &x0p, FLOW_BLOCK, FLOW_RADIUS)?;
    let (motion, motion_bits) = motion_codec::encode(&model.params, &flow, QuantizeMode::Infer, &mut rng)?;
    let (_, xbar) = predict(model, &x0p, &motion)?;
    let res = residual::encode(
        &model.params,
        &model.config,
        mode,
        &x1p.to_batch(),
        &xbar.to_batch(),
        QuantizeMode::Infer,
        &mut rng,
    )?;

    let motion_symbols = to_symbols(&motion)?;
    let motion_support = support(&motion_symbols)?;
    let prior = FactorizedDensity::from_params(&model.params, motion_codec::PRIOR)?;
    let motion_tables = factorized_tables(&prior, motion_support.0, motion_support.1)?;
    let (motion_section, motion_ideal) = code_section(
        SectionKind::Motion,
        &motion_symbols,
        motion_support,
        &by_channel(&motion_tables, &geo.motion),
    )?;

    let hyper_symbols = to_symbols(&res.hyper)?;
    let hyper_support = support(&hyper_symbols)?;
    let hprior = FactorizedDensity::from_params(&model.params, &format!("{}.hprior", residual::prefix(mode)))?;
    let hyper_tables = factorized_tables(&hprior, hyper_support.0, hyper_support.1)?;
    let (hyper_section, hyper_ideal) = code_section(
        SectionKind::Hyper,
        &hyper_symbols,
        hyper_support,
        &by_channel(&hyper_tables, &geo.hyper),
    )?;

    // the latent model comes from the hyper-latents the decoder will see
    let gmm = residual::decode_conditional(
        &model.params,
        &model.config,
        mode,
        &res.hyper,
        (geo.latents[2], geo.latents[3]),
    )?;
    let latent_symbols = to_symbols(&res.latents)?;
    let latent_support = support(&latent_symbols)?;
    let latent_tables = gmm_tables(&gmm, latent_support.0, latent_support.1)?;
    let (latent_section, latent_ideal) = code_section(
        SectionKind::Latents,
        &latent_symbols,
        latent_support,
        &latent_tables.iter().collect::<Vec<_>>(),
    )?;

    let stream = PFrameBitstream {
        width: w as u16,
        height: h as u16,
        model_hash: model.hash(),
        mode,
        postprocess: POSTPROCESS_IDENTITY,
        sections: vec![motion_section, hyper_section, latent_section],
    };
    let bytes = stream.to_bytes();
    let reconstruction = decode_pframe(x0, &bytes, model)?;
    let estimates = [motion_bits, res.rate_hyper, res.rate_latents];
    let ideals = [motion_ideal, hyper_ideal, latent_ideal];
    let sections = stream
        .sections
        .iter()
        .zip(estimates.into_iter().zip(ideals))
        .map(|(s, (estimated_bits, ideal_bits))| SectionStats {
            kind: s.kind,
            symbols: s.symbols as usize,
            bytes: s.payload.len(),
            bits: 8 * s.payload.len(),
            estimated_bits,
            ideal_bits,
        })
        .collect();
    let ms_ssim = if h.min(w) >= crate::metrics_io::ms_ssim::WINDOW {
        Some(ms_ssim(x1, &reconstruction)?)
    } else {
        None
    };
    Ok(Encoded {
        stats: EncodeStats {
            width: w,
            height: h,
            mode,
            sections,
            total_bytes: bytes.len(),
            ms_ssim,
        },
        bytes,
        stream,
        reconstruction,
    })
}

/// Reconstructs `x1` from the reference and a serialized stream.
pub fn decode_pframe(x0: &Frame, bytes: &[u8], model: &Model) -> Result<Frame> {
    let stream = PFrameBitstream::from_bytes(bytes)?;
    decode_stream(x0, &stream, model)
}

pub fn decode_stream(x0: &Frame, stream: &PFrameBitstream, model: &Model) -> Result<Frame> {
    let found = model.hash();
    if stream.model_hash != found {
        return Err(Error::ModelMismatch {
            expected: stream.model_hash,
            found,
        });
    }
    if stream.postprocess != POSTPROCESS_IDENTITY {
        return Err(Error::Bitstream(format!("unknown post-process {}", stream.postprocess)));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    if (x0.height(), x0.width()) != (h, w) || x0.channels() != 3 {
        return Err(Error::Shape(format!(
            "stream codes a {w}x{h} frame, reference is {}x{} with {} planes",
            x0.width(),
            x0.height(),
            x0.channels()
        )));
    }
    let kinds: Vec<_> = stream.sections.iter().map(|s| s.kind).collect();
    if kinds != SectionKind::ORDER {
        return Err(Error::Bitstream(format!("unexpected section layout {kinds:?}")));
    }
    let mode = stream.mode;
    let geo = Geometry::new(model, mode, h, w);
    for s in &stream.sections {
        let expected: usize = geo.shape(s.kind).iter().product();
        if s.symbols as usize != expected {
            return Err(Error::Corrupt(format!(
                "{} section declares {} symbols, geometry needs {expected}",
                s.kind.name(),
                s.symbols
            )));
        }
        if (s.s_max as i64 - s.s_min as i64 + 1) > 1i64 << CODING_PRECISION {
            return Err(Error::Corrupt(format!("{} support too wide", s.kind.name())));
        }
    }
    let [motion_s, hyper_s, latent_s] = [0, 1, 2].map(|i| &stream.sections[i]);

    let prior = FactorizedDensity::from_params(&model.params, motion_codec::PRIOR)?;
    let tables = factorized_tables(&prior, motion_s.s_min, motion_s.s_max)?;
    let motion = decode_section(motion_s, &by_channel(&tables, &geo.motion), &geo.motion)?;

    let x0p = x0.pad_to_multiple(PAD_MULTIPLE);
    let (_, xbar) = predict(model, &x0p, &motion)?;

    let hprior = FactorizedDensity::from_params(&model.params, &format!("{}.hprior", residual::prefix(mode)))?;
    let tables = factorized_tables(&hprior, hyper_s.s_min, hyper_s.s_max)?;
    let hyper = decode_section(hyper_s, &by_channel(&tables, &geo.hyper), &geo.hyper)?;

    let gmm = residual::decode_conditional(
        &model.params,
        &model.config,
        mode,
        &hyper,
        (geo.latents[2], geo.latents[3]),
    )?;
    let tables = gmm_tables(&gmm, latent_s.s_min, latent_s.s_max)?;
    let latents = decode_section(latent_s, &tables.iter().collect::<Vec<_>>(), &geo.latents)?;

    let x = residual::decode(&model.params, mode, &latents, &xbar.to_batch())?;
    let padded = Frame::from_batch(&x, x0.colorspace())?;
    debug_assert_eq!((padded.height(), padded.width()), geo.padded);
    padded.crop(0, 0, h, w)
}

/// Prediction from the block-matching flow alone, without coding it; a
/// baseline for how much the learned path adds.
pub fn warp_only_prediction(x0: &Frame, x1: &Frame) -> Result<Frame> {
    let flow = estimate_flow(x1, x0, FLOW_BLOCK, FLOW_RADIUS)?;
    warp_bilinear(x0, &flow)
}

#[cfg(test)]
mod tests;
