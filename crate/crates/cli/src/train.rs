use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use pframe::metrics_io::{read_frame, synth_dataset};
use pframe::motion::Frame;
use pframe::pipeline::{train, TrainingConfig};
use pframe::transforms::{parse_key_values, Model, ModelConfig, TrainingStage};

use crate::error::{usage, CliError, Result};
use crate::output::{read, write_atomic, RunManifest};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key=value` training configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `lambda` from the config.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `stage` from the config (A, B, C or the full name).
    #[arg(long)]
    pub stage: Option<String>,
    /// Model to continue from; a fresh one is built when absent.
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Loss log, appended one record per step.
    #[arg(long)]
    pub log: PathBuf,
}

const TRAIN_KEYS: [&str; 7] = [
    "stage",
    "learning_rate",
    "batch_size",
    "crop",
    "seed",
    "steps",
    "large_lambda_factor",
];
const DATA_KEYS: [&str; 5] = ["data", "data_seed", "pairs", "size", "max_shift"];

fn value<T: FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match fields.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("config key `{key}` has invalid value `{v}`"))),
    }
}

/// `x0 x1` path pairs, one per line, relative to the list's directory.
fn read_pair_list(list: &Path) -> Result<Vec<(Frame, Frame)>> {
    let text = fs::read_to_string(list).map_err(|e| CliError::io(list, e))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<_> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return usage(format!("{} line {}: expected `x0 x1`", list.display(), i + 1));
        }
        pairs.push((read_frame(&base.join(fields[0]))?, read_frame(&base.join(fields[1]))?));
    }
    if pairs.is_empty() {
        return usage(format!("{} lists no frame pairs", list.display()));
    }
    Ok(pairs)
}

fn dataset(fields: &BTreeMap<String, String>, config_dir: &Path) -> Result<(Vec<(Frame, Frame)>, Vec<PathBuf>)> {
    match fields.get("data").map(String::as_str).unwrap_or("synthetic") {
        "synthetic" => {
            let pairs = synth_dataset(
                value(fields, "data_seed")?.unwrap_or(0),
                value(fields, "pairs")?.unwrap_or(500),
                value(fields, "size")?.unwrap_or(64),
                value(fields, "max_shift")?.unwrap_or(4),
            )?;
            Ok((pairs.into_iter().map(|p| (p.x0, p.x1)).collect(), Vec::new()))
        }
        list => {
            let path = config_dir.join(list);
            if !path.is_file() {
                return usage(format!("pair list {} does not exist", path.display()));
            }
            Ok((read_pair_list(&path)?, vec![path]))
        }
    }
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::new("train");
    manifest.config = Some(args.config.clone());
    manifest.models.extend(args.model_in.clone());
    manifest.outputs = vec![args.model_out.clone(), args.log.clone()];
    manifest.resolve()?;

    let text = String::from_utf8(read(&args.config)?)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8 text", args.config.display())))?;
    let fields = parse_key_values(&text).map_err(|e| CliError::Usage(e.to_string()))?;
    for key in fields.keys() {
        let known = ModelConfig::is_key(key)
            || key == "preset"
            || TRAIN_KEYS.contains(&key.as_str())
            || DATA_KEYS.contains(&key.as_str());
        if !known {
            return usage(format!("unknown config key `{key}`"));
        }
    }
    let Some(lambda) = args.lambda.or(value(&fields, "lambda")?) else {
        return usage("lambda is required (config key `lambda` or --lambda)");
    };
    let Some(stage) = args.stage.clone().or(fields.get("stage").cloned()) else {
        return usage("stage is required (config key `stage` or --stage)");
    };
    let stage: TrainingStage = stage.parse().map_err(|e: pframe::Error| CliError::Usage(e.to_string()))?;
    let seed = args.seed.or(value(&fields, "seed")?).unwrap_or(0);
    manifest.seed = Some(seed);

    let mut model = match &args.model_in {
        Some(path) => {
            if let Some(key) = fields.keys().find(|k| ModelConfig::is_key(k) && *k != "lambda" && *k != "mode") {
                return usage(format!("`{key}` describes the architecture and cannot change for an existing model"));
            }
            let model = Model::from_bytes(&read(path)?)?;
            if let Some(mode) = fields.get("mode") {
                if mode.parse::<pframe::transforms::ResidualMode>()? != model.config.mode {
                    return usage("`mode` differs from the model being continued");
                }
            }
            model
        }
        None => {
            let mut config = match fields.get("preset").map(String::as_str) {
                None | Some("default") => ModelConfig::default(),
                Some("toy") => ModelConfig::toy(),
                Some(other) => return usage(format!("unknown preset `{other}`")),
            };
            let arch: BTreeMap<_, _> = fields
                .iter()
                .filter(|(k, _)| ModelConfig::is_key(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            config.apply(&arch).map_err(|e| CliError::Usage(e.to_string()))?;
            Model::new(config, seed)?
        }
    };
    model.config.lambda = lambda;

    let defaults = TrainingConfig::new(stage, lambda);
    let config = TrainingConfig {
        learning_rate: value(&fields, "learning_rate")?.unwrap_or(defaults.learning_rate),
        batch_size: value(&fields, "batch_size")?.unwrap_or(defaults.batch_size),
        crop: value(&fields, "crop")?.unwrap_or(defaults.crop),
        steps: value(&fields, "steps")?.unwrap_or(defaults.steps),
        large_lambda_factor: value(&fields, "large_lambda_factor")?.unwrap_or(defaults.large_lambda_factor),
        seed,
        ..defaults
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    stage.check_order(&model.history)?;

    let config_dir = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let (data, lists) = dataset(&fields, &config_dir)?;
    manifest.inputs = lists;

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&args.log)
        .map_err(|e| CliError::io(&args.log, e))?;
    writeln!(log, "{}", manifest.to_record()).map_err(|e| CliError::io(&args.log, e))?;
    let mut log_error = None;
    let records = train(&mut model, &config, &data, |r| {
        if log_error.is_none() {
            log_error = writeln!(log, "{}", r.to_record()).err();
        }
    })?;
    if let Some(e) = log_error {
        return Err(CliError::io(&args.log, e));
    }
    write_atomic(&args.model_out, &model.to_bytes())?;
    if let Some(last) = records.last() {
        println!(
            "stage={} steps={} final_loss={} model_hash={:016x}",
            stage,
            records.len(),
            last.loss,
            model.hash()
        );
    }
    Ok(())
}
