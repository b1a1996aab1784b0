use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pframe::metrics_io::io::{encode_frame, frame_sidecar, header_path};
use pframe::motion::Frame;
use tempfile::NamedTempFile;

use crate::error::{usage, CliError, Result};

/// What a run read and wrote; embedded as the first line of text outputs.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: &'static str,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub models: Vec<PathBuf>,
}

fn join(paths: &[PathBuf]) -> String {
    if paths.is_empty() {
        return "-".into();
    }
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

impl RunManifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            ..Self::default()
        }
    }

    /// Checks that every input exists and every output has a directory to go in.
    pub fn resolve(&self) -> Result<()> {
        for p in self.config.iter().chain(&self.inputs).chain(&self.models) {
            if !p.exists() {
                return usage(format!("{} does not exist", p.display()));
            }
        }
        for p in &self.outputs {
            let parent = parent_dir(p);
            if !parent.is_dir() {
                return usage(format!("output directory {} does not exist", parent.display()));
            }
        }
        Ok(())
    }

    pub fn to_record(&self) -> String {
        format!(
            "# manifest command={} config={} seed={} inputs={} outputs={} models={}",
            self.command,
            self.config.as_ref().map_or("-".into(), |p| p.display().to_string()),
            self.seed.map_or("-".into(), |s| s.to_string()),
            join(&self.inputs),
            join(&self.outputs),
            join(&self.models)
        )
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes through a temporary file in the target directory, so that a
/// failed run never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = NamedTempFile::new_in(parent_dir(path)).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Writes a frame in the format its extension names, with a sidecar header
/// for raw `.yuv` output.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let bytes = encode_frame(path, frame)?;
    if path.extension().and_then(|e| e.to_str()) == Some("yuv") {
        write_atomic(&header_path(path), frame_sidecar(frame)?.as_bytes())?;
    }
    write_atomic(path, &bytes)
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Text lines to `path`, or to stdout when absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
