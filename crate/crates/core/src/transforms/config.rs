use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::entropy::DEFAULT_MIXTURES;
use crate::error::{Error, Result};

/// How the residual between `x1` and the motion-compensated prediction is coded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResidualMode {
    /// `x1 − x̄1` coded with a scale-hyperprior image codec.
    Pixel,
    /// `E(x1) − E(x̄1)` coded with a mixture-conditional hyperprior codec.
    Feature,
}

impl ResidualMode {
    pub fn id(self) -> u8 {
        match self {
            ResidualMode::Pixel => 0,
            ResidualMode::Feature => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(ResidualMode::Pixel),
            1 => Ok(ResidualMode::Feature),
            other => Err(Error::Bitstream(format!("unknown residual mode {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResidualMode::Pixel => "pixel",
            ResidualMode::Feature => "feature",
        }
    }
}

impl FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(ResidualMode::Pixel),
            "feature" => Ok(ResidualMode::Feature),
            other => Err(Error::InvalidArgument(format!(
                "residual mode must be `pixel` or `feature`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture of a model. Everything here is written into the model file
/// so that streams and weights are self-describing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the motion codec.
    pub n_motion: usize,
    /// Channels of the pixel residual codec.
    pub n_pixel: usize,
    /// Channels of the shared feature encoder and the feature residual codec.
    pub n_feature: usize,
    /// Channels of the compensation network.
    pub n_refine: usize,
    pub mixtures: usize,
    pub strided_kernel: usize,
    pub res_kernel: usize,
    /// Distortion weight the model is trained for.
    pub lambda: f64,
    /// Residual path trained in the residual stages.
    pub mode: ResidualMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_motion: 64,
            n_pixel: 96,
            n_feature: 64,
            n_refine: 32,
            mixtures: DEFAULT_MIXTURES,
            strided_kernel: 5,
            res_kernel: 3,
            lambda: 64.0,
            mode: ResidualMode::Feature,
        }
    }
}

const KEYS: [&str; 9] = [
    "n_motion",
    "n_pixel",
    "n_feature",
    "n_refine",
    "mixtures",
    "strided_kernel",
    "res_kernel",
    "lambda",
    "mode",
];

impl ModelConfig {
    /// Narrow networks for desk-scale experiments on small frames.
    pub fn toy() -> Self {
        Self {
            n_motion: 8,
            n_pixel: 12,
            n_feature: 12,
            n_refine: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_motion", self.n_motion),
            ("n_pixel", self.n_pixel),
            ("n_feature", self.n_feature),
            ("n_refine", self.n_refine),
            ("mixtures", self.mixtures),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        for (name, k) in [("strided_kernel", self.strided_kernel), ("res_kernel", self.res_kernel)] {
            if k % 2 == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be odd, got {k}")));
            }
        }
        if self.strided_kernel < 3 {
            return Err(Error::InvalidArgument(
                "strided_kernel must be >= 3 for exact 2x upsampling".into(),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order.
    pub fn to_lines(&self) -> String {
        format!(
            "n_motion={}\nn_pixel={}\nn_feature={}\nn_refine={}\nmixtures={}\nstrided_kernel={}\nres_kernel={}\nlambda={}\nmode={}\n",
            self.n_motion,
            self.n_pixel,
            self.n_feature,
            self.n_refine,
            self.mixtures,
            self.strided_kernel,
            self.res_kernel,
            self.lambda,
            self.mode
        )
    }

    /// Overrides fields from `key=value` pairs; unknown keys are left to the caller.
    pub fn apply(&mut self, fields: &BTreeMap<String, String>) -> Result<()> {
        fn number<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("`{key}` has invalid value `{v}`")))
        }
        for (k, v) in fields {
            match k.as_str() {
                "n_motion" => self.n_motion = number(k, v)?,
                "n_pixel" => self.n_pixel = number(k, v)?,
                "n_feature" => self.n_feature = number(k, v)?,
                "n_refine" => self.n_refine = number(k, v)?,
                "mixtures" => self.mixtures = number(k, v)?,
                "strided_kernel" => self.strided_kernel = number(k, v)?,
                "res_kernel" => self.res_kernel = number(k, v)?,
                "lambda" => self.lambda = number(k, v)?,
                "mode" => self.mode = v.parse()?,
                _ => {}
            }
        }
        self.validate()
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {}: expected key=value, got `{line}`", i + 1))
        })?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::InvalidArgument(format!("line {}: duplicate key `{}`", i + 1, k.trim())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let mut c = ModelConfig::toy();
        c.lambda = 0.1 + 0.2;
        c.mode = ResidualMode::Pixel;
        let mut back = ModelConfig::default();
        back.apply(&parse_key_values(&c.to_lines()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = ModelConfig::default();
        for text in ["lambda=0", "lambda=-1", "res_kernel=4", "n_motion=0", "mode=latent", "mixtures=x"] {
            assert!(c.apply(&parse_key_values(text).unwrap()).is_err(), "{text}");
            c = ModelConfig::default();
        }
        assert!(parse_key_values("a=1\na=2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn mode_ids() {
        for m in [ResidualMode::Pixel, ResidualMode::Feature] {
            assert_eq!(ResidualMode::from_id(m.id()).unwrap(), m);
            assert_eq!(m.name().parse::<ResidualMode>().unwrap(), m);
        }
        assert!(ResidualMode::from_id(7).is_err());
    }
}
