//! The learned codecs (motion, pixel residual, feature residual) and the
//! model that bundles their weights with the compensation network.

mod config;
pub mod motion_codec;
pub mod residual;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{parse_key_values, ModelConfig, ResidualMode};

use crate::autograd::{Graph, ParameterSet, Var};
use crate::entropy::factorized::PARAM_SUFFIXES;
use crate::error::{Error, Result};
use crate::motion::{compensation_prefix, init_compensation};

/// Likelihood of `x` under the factorized density stored under `prefix`.
pub(crate) fn prior_likelihood(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var> {
    let vars = PARAM_SUFFIXES
        .iter()
        .map(|s| g.param(params, &format!("{prefix}.{s}")))
        .collect::<Result<Vec<_>>>()?;
    g.factorized_likelihood(x, &vars)
}

/// Phases of the step-by-step schedule, in the only order they may run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TrainingStage {
    /// Motion codec and compensation.
    Motion,
    /// Residual codec added, trained jointly with a large distortion weight.
    ResidualPretrain,
    /// Everything jointly at the target distortion weight.
    Joint,
}

impl TrainingStage {
    pub const ALL: [TrainingStage; 3] = [
        TrainingStage::Motion,
        TrainingStage::ResidualPretrain,
        TrainingStage::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingStage::Motion => "A_motion",
            TrainingStage::ResidualPretrain => "B_residual_pretrain",
            TrainingStage::Joint => "C_joint",
        }
    }

    /// Whether `self` may run after the stages in `history`: each stage
    /// requires its predecessor, and may be repeated.
    pub fn check_order(self, history: &[TrainingStage]) -> Result<()> {
        let last = history.last().copied();
        let allowed = match self {
            TrainingStage::Motion => matches!(last, None | Some(TrainingStage::Motion)),
            TrainingStage::ResidualPretrain => matches!(
                last,
                Some(TrainingStage::Motion | TrainingStage::ResidualPretrain)
            ),
            TrainingStage::Joint => matches!(
                last,
                Some(TrainingStage::ResidualPretrain | TrainingStage::Joint)
            ),
        };
        if allowed {
            Ok(())
        } else {
            let done: Vec<_> = history.iter().map(|s| s.name()).collect();
            Err(Error::StageOrder(format!(
                "stage {} cannot follow [{}]; order is A_motion -> B_residual_pretrain -> C_joint",
                self.name(),
                done.join(", ")
            )))
        }
    }
}

impl FromStr for TrainingStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "A_motion" => Ok(TrainingStage::Motion),
            "B" | "B_residual_pretrain" => Ok(TrainingStage::ResidualPretrain),
            "C" | "C_joint" => Ok(TrainingStage::Joint),
            other => Err(Error::InvalidArgument(format!("unknown training stage `{other}`"))),
        }
    }
}

impl fmt::Display for TrainingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const FILE_MAGIC: &str = "pframe-model 1";

/// Architecture, weights and training history.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub history: Vec<TrainingStage>,
    pub seed: u64,
}

impl Model {
    /// Fresh weights for every network, drawn deterministically from `seed`
    /// and rounded to what the model file stores.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        motion_codec::init(&mut params, &mut rng, &config)?;
        init_compensation(&mut params, &mut rng, config.n_refine, config.res_kernel)?;
        residual::init(&mut params, &mut rng, &config, ResidualMode::Pixel)?;
        residual::init(&mut params, &mut rng, &config, ResidualMode::Feature)?;
        params.round_to_f32();
        Ok(Self {
            config,
            params,
            history: Vec::new(),
            seed,
        })
    }

    fn header(&self) -> String {
        let stages: Vec<_> = self.history.iter().map(|s| s.name()).collect();
        format!(
            "{FILE_MAGIC}\n{}seed={}\nstages={}\n\n",
            self.config.to_lines(),
            self.seed,
            stages.join(",")
        )
    }

    /// Text header, a blank line, then the weight payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header().into_bytes();
        out.extend(self.params.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::ModelFormat("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::ModelFormat("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(FILE_MAGIC) {
            return Err(Error::ModelFormat("not a model file".into()));
        }
        let fields = parse_key_values(&lines.collect::<Vec<_>>().join("\n"))
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        for key in fields.keys() {
            if !ModelConfig::is_key(key) && key != "seed" && key != "stages" {
                return Err(Error::ModelFormat(format!("unknown header key `{key}`")));
            }
        }
        let mut config = ModelConfig::default();
        config
            .apply(&fields)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let seed = fields
            .get("seed")
            .ok_or_else(|| Error::ModelFormat("header lacks seed".into()))?
            .parse()
            .map_err(|_| Error::ModelFormat("bad seed".into()))?;
        let history = match fields.get("stages").map(String::as_str) {
            None | Some("") => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| s.parse().map_err(|e: Error| Error::ModelFormat(e.to_string())))
                .collect::<Result<_>>()?,
        };
        let params = ParameterSet::from_bytes(&bytes[split + 2..])?;
        let expected = Model::new(config.clone(), 0)?;
        for name in expected.params.names() {
            let want = expected.params.get(name).expect("listed").shape();
            match params.get(name) {
                Some(t) if t.shape() == want => {}
                Some(t) => {
                    return Err(Error::ModelFormat(format!(
                        "`{name}` has shape {:?}, architecture needs {want:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::MissingParameter(name.to_string())),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::ModelFormat("model file holds unknown parameters".into()));
        }
        Ok(Self {
            config,
            params,
            history,
            seed,
        })
    }

    /// First eight bytes of the SHA-256 of the model file, little-endian.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
    }

    /// Size of the serialized model in bytes.
    pub fn file_size(&self) -> usize {
        self.to_bytes().len()
    }
}

/// Parameter prefixes that a stage trains.
pub fn stage_prefixes(stage: TrainingStage, mode: ResidualMode) -> Vec<&'static str> {
    let mut out = vec![motion_codec::PREFIX, compensation_prefix()];
    if stage != TrainingStage::Motion {
        out.push(residual::prefix(mode));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_file_round_trips_and_hash_is_stable() {
        let mut m = Model::new(ModelConfig::toy(), 3).unwrap();
        m.history = vec![TrainingStage::Motion, TrainingStage::ResidualPretrain];
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.hash(), m.hash());
        assert_eq!(back.history, m.history);
        let other = Model::new(ModelConfig::toy(), 4).unwrap();
        assert_ne!(other.hash(), m.hash());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelConfig::toy(), 9).unwrap();
        let b = Model::new(ModelConfig::toy(), 9).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn corrupt_model_files_rejected() {
        let m = Model::new(ModelConfig::toy(), 1).unwrap();
        let bytes = m.to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Model::from_bytes(b"hello\n\nPFWT").is_err());
        let text = String::from_utf8_lossy(&bytes[..40]).replace("n_motion=8", "n_motion=9");
        let mut altered = text.into_bytes();
        altered.extend_from_slice(&bytes[40..]);
        assert!(Model::from_bytes(&altered).is_err());
    }

    #[test]
    fn stage_order() {
        use TrainingStage::*;
        assert!(Motion.check_order(&[]).is_ok());
        assert!(ResidualPretrain.check_order(&[Motion]).is_ok());
        assert!(Joint.check_order(&[Motion, ResidualPretrain]).is_ok());
        assert!(Joint.check_order(&[Motion, ResidualPretrain, Joint]).is_ok());
        assert!(matches!(Joint.check_order(&[Motion]), Err(Error::StageOrder(_))));
        assert!(ResidualPretrain.check_order(&[]).is_err());
        assert!(Motion.check_order(&[Motion, ResidualPretrain]).is_err());
        for s in TrainingStage::ALL {
            assert_eq!(s.name().parse::<TrainingStage>().unwrap(), s);
        }
    }
}
