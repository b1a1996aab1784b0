use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use pframe::allocator::{allocate, Budget, SequenceRDTable, DEFAULT_DATA_WEIGHT};

use crate::error::{usage, CliError, Result};
use crate::output::{emit, read, RunManifest};

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Records of `sequence frames model bytes ms_ssim`.
    #[arg(long)]
    pub table: PathBuf,
    /// Total allowed `model bytes + weight × data bytes`.
    #[arg(long)]
    pub budget: u128,
    #[arg(long, default_value_t = DEFAULT_DATA_WEIGHT)]
    pub weight: u64,
    /// `id=bytes`, repeatable.
    #[arg(long = "model-size")]
    pub model_sizes: Vec<String>,
    /// `id=path`, repeatable; the size is that of the model file.
    #[arg(long = "model")]
    pub models: Vec<String>,
    /// Assignment output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &AllocateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("allocate");
    manifest.inputs = vec![args.table.clone()];
    manifest.outputs.extend(args.out.clone());
    let mut sizes = BTreeMap::new();
    for spec in &args.model_sizes {
        let Some((id, bytes)) = spec.split_once('=') else {
            return usage(format!("--model-size expects id=bytes, got `{spec}`"));
        };
        let bytes = bytes
            .parse()
            .map_err(|_| CliError::Usage(format!("bad byte count in `{spec}`")))?;
        sizes.insert(id.to_string(), bytes);
    }
    let mut files = Vec::new();
    for spec in &args.models {
        let Some((id, path)) = spec.split_once('=') else {
            return usage(format!("--model expects id=path, got `{spec}`"));
        };
        manifest.models.push(PathBuf::from(path));
        files.push((id.to_string(), PathBuf::from(path)));
    }
    manifest.resolve()?;
    for (id, path) in files {
        let len = std::fs::metadata(&path).map_err(|e| CliError::io(&path, e))?.len();
        if sizes.insert(id.clone(), len).is_some() {
            return usage(format!("model `{id}` is given a size twice"));
        }
    }
    let text = String::from_utf8(read(&args.table)?)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8 text", args.table.display())))?;
    let table = SequenceRDTable::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    let budget = Budget {
        total_bytes: args.budget,
        data_weight: args.weight,
        model_sizes: sizes,
    };
    let assignment = allocate(&table, &budget)?;
    emit(
        args.out.as_deref(),
        &format!("{}\n{}", manifest.to_record(), assignment.to_text(&table)),
    )
}
