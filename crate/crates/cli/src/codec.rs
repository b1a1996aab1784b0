use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use pframe::metrics_io::io::quantize_8bit;
use pframe::metrics_io::{ms_ssim, read_frame};
use pframe::motion::Frame;
use pframe::pipeline::{decode_pframe, encode_pframe, PFrameBitstream};
use pframe::transforms::{Model, ResidualMode};
use rayon::prelude::*;

use crate::error::{usage, CliError, Result};
use crate::output::{emit, read, write_atomic, write_frame, RunManifest};

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub x0: Option<PathBuf>,
    #[arg(long)]
    pub x1: Option<PathBuf>,
    #[arg(long)]
    pub model: PathBuf,
    /// Residual codec: pixel or feature. Defaults to the one the model trained.
    #[arg(long)]
    pub mode: Option<ResidualMode>,
    /// Bitstream output for a single pair.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the decoder's reconstruction here.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Directory of `<name>.x0.<ext>` / `<name>.x1.<ext>` pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Where `<name>.pfc` streams go in batch mode.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Parallel encodes in batch mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Stats records; stdout when absent.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub x0: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub distorted: PathBuf,
    /// Stream the distorted frame was decoded from, to report its rate.
    #[arg(long)]
    pub stream: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub stream: Option<PathBuf>,
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::from_bytes(&read(path)?)?)
}

/// Encodes one pair; returns the stream bytes and its stats record.
fn encode_one(name: &str, x0: &Path, x1: &Path, model: &Model, mode: ResidualMode, recon: Option<&Path>) -> Result<(Vec<u8>, String)> {
    let (f0, f1) = (read_frame(x0)?, read_frame(x1)?);
    let e = encode_pframe(&f0, &f1, model, mode)?;
    // quality of the frame as a decoder would store it
    let written = match recon {
        Some(path) => {
            write_frame(path, &e.reconstruction)?;
            read_frame(path)?
        }
        None => quantize_8bit(&e.reconstruction),
    };
    let stored = if f1.height().min(f1.width()) >= pframe::metrics_io::ms_ssim::WINDOW {
        ms_ssim(&f1, &written)?.to_string()
    } else {
        "na".into()
    };
    Ok((e.bytes, format!("name={name} {} ms_ssim_8bit={stored}", e.stats.to_record())))
}

/// `(name, x0, x1)` for every complete pair in `dir`, sorted by name.
fn discover_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else { continue };
        let Some((name, ext)) = file.split_once(".x0.") else { continue };
        let partner = dir.join(format!("{name}.x1.{ext}"));
        if !partner.is_file() {
            return usage(format!("{} has no matching {}", path.display(), partner.display()));
        }
        out.push((name.to_string(), path, partner));
    }
    out.sort();
    if out.is_empty() {
        return usage(format!("{} holds no `<name>.x0.<ext>` frames", dir.display()));
    }
    Ok(out)
}

pub fn encode(args: &EncodeArgs) -> Result<()> {
    let mut manifest = RunManifest::new("encode");
    manifest.models = vec![args.model.clone()];
    manifest.outputs.extend(args.stats.clone());
    let batch = match (&args.x0, &args.x1, &args.out, &args.pairs, &args.out_dir) {
        (Some(x0), Some(x1), Some(out), None, None) => {
            manifest.inputs = vec![x0.clone(), x1.clone()];
            manifest.outputs.push(out.clone());
            manifest.outputs.extend(args.recon.clone());
            None
        }
        (None, None, None, Some(dir), Some(out_dir)) => {
            if args.recon.is_some() {
                return usage("--recon applies to single-pair encoding only");
            }
            if !out_dir.is_dir() {
                return usage(format!("output directory {} does not exist", out_dir.display()));
            }
            manifest.inputs = vec![dir.clone()];
            manifest.outputs.push(out_dir.clone());
            Some((dir, out_dir))
        }
        _ => return usage("give either --x0, --x1 and --out, or --pairs and --out-dir"),
    };
    if args.jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    manifest.resolve()?;
    let model = load_model(&args.model)?;
    let mode = args.mode.unwrap_or(model.config.mode);

    let mut text = manifest.to_record() + "\n";
    match batch {
        None => {
            let (x0, x1, out) = (args.x0.as_ref().unwrap(), args.x1.as_ref().unwrap(), args.out.as_ref().unwrap());
            let name = x1.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
            let (bytes, record) = encode_one(name, x0, x1, &model, mode, args.recon.as_deref())?;
            write_atomic(out, &bytes)?;
            text.push_str(&record);
            text.push('\n');
        }
        Some((dir, out_dir)) => {
            let pairs = discover_pairs(dir)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(args.jobs)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", args.jobs)))?;
            // collect preserves input order whatever order the workers finish in
            let results: Vec<Result<(Vec<u8>, String)>> = pool.install(|| {
                pairs
                    .par_iter()
                    .map(|(name, x0, x1)| encode_one(name, x0, x1, &model, mode, None))
                    .collect()
            });
            let mut encoded = Vec::with_capacity(results.len());
            for r in results {
                encoded.push(r?);
            }
            for ((name, _, _), (bytes, record)) in pairs.iter().zip(encoded) {
                write_atomic(&out_dir.join(format!("{name}.pfc")), &bytes)?;
                text.push_str(&record);
                text.push('\n');
            }
        }
    }
    emit(args.stats.as_deref(), &text)
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let mut manifest = RunManifest::new("decode");
    manifest.inputs = vec![args.x0.clone(), args.stream.clone()];
    manifest.models = vec![args.model.clone()];
    manifest.outputs = vec![args.out.clone()];
    manifest.resolve()?;
    let model = load_model(&args.model)?;
    let x0 = read_frame(&args.x0)?;
    let frame = decode_pframe(&x0, &read(&args.stream)?, &model)?;
    write_frame(&args.out, &frame)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate");
    manifest.inputs = vec![args.reference.clone(), args.distorted.clone()];
    manifest.inputs.extend(args.stream.clone());
    manifest.resolve()?;
    let (a, b): (Frame, Frame) = (read_frame(&args.reference)?, read_frame(&args.distorted)?);
    let mut line = format!("ms_ssim={}", ms_ssim(&a, &b)?);
    if let Some(stream) = &args.stream {
        let bytes = read(stream)?.len();
        let bpp = 8.0 * bytes as f64 / (a.height() * a.width()) as f64;
        line.push_str(&format!(" bytes={bytes} bpp={bpp}"));
    }
    println!("{}\n{line}", manifest.to_record());
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let mut manifest = RunManifest::new("inspect");
    manifest.inputs.extend(args.stream.clone());
    manifest.models.extend(args.model.clone());
    if manifest.inputs.is_empty() && manifest.models.is_empty() {
        return usage("give --model and/or --stream");
    }
    manifest.resolve()?;
    let mut out = manifest.to_record() + "\n";
    if let Some(path) = &args.model {
        let bytes = read(path)?;
        let m = Model::from_bytes(&bytes)?;
        let stages: Vec<_> = m.history.iter().map(|s| s.name()).collect();
        out.push_str(&format!(
            "model hash={:016x} bytes={} parameters={} seed={} stages={}\n",
            m.hash(),
            bytes.len(),
            m.params.num_scalars(),
            m.seed,
            if stages.is_empty() { "-".into() } else { stages.join(",") }
        ));
        for line in m.config.to_lines().lines() {
            out.push_str(&format!("model {line}\n"));
        }
    }
    if let Some(path) = &args.stream {
        let bytes = read(path)?;
        let s = PFrameBitstream::from_bytes(&bytes)?;
        out.push_str(&format!(
            "stream width={} height={} model_hash={:016x} mode={} postprocess={} header_bytes={} payload_bytes={}\n",
            s.width,
            s.height,
            s.model_hash,
            s.mode,
            s.postprocess,
            s.header_len(),
            s.payload_len()
        ));
        for sec in &s.sections {
            out.push_str(&format!(
                "section kind={} support=[{},{}] symbols={} bytes={}\n",
                sec.kind.name(),
                sec.s_min,
                sec.s_max,
                sec.symbols,
                sec.payload.len()
            ));
        }
    }
    print!("{out}");
    Ok(())
}
