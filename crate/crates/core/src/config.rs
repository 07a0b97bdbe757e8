//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Every key has a default, unknown keys are rejected, and
//! [`RunConfig::to_text`] writes the fully resolved form, which parses back to
//! an equal value.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Everything one command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset root with `A/`, `B/`, `label/`; unused when `synthetic`.
    pub data_dir: Option<PathBuf>,
    /// Tile loaded images into square patches of this side (0 = off).
    pub patch: usize,
    pub synthetic: bool,
    /// Synthetic sample count.
    pub n: usize,
    /// Synthetic image side.
    pub size: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: None,
            patch: 0,
            synthetic: false,
            n: 8,
            size: 32,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every accepted key, in the order [`RunConfig::to_text`] writes them.
    pub const KEYS: [&'static str; 31] = [
        "stem_channels",
        "stem_kernel",
        "stage_channels",
        "stage_depths",
        "decoder_depths",
        "aglgf_stages",
        "expand",
        "state_size",
        "conv1d_kernel",
        "conv2d_kernel",
        "gate",
        "lgf_multiplier",
        "skip_d",
        "decoder_separable",
        "lambda1",
        "lambda2",
        "dice_smoothing",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "epochs",
        "batch_size",
        "seed",
        "data_dir",
        "patch",
        "synthetic",
        "n",
        "size",
        "out_dir",
        "input_channels",
    ];

    /// Applies one assignment. Values are trimmed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "input_channels" => m.input_channels = parse(key, v)?,
            "stem_channels" => m.stem_channels = parse(key, v)?,
            "stem_kernel" => m.stem_kernel = parse(key, v)?,
            "stage_channels" => m.stage_channels = parse_list(key, v)?,
            "stage_depths" => m.stage_depths = parse_list(key, v)?,
            "decoder_depths" => m.decoder_depths = parse_list(key, v)?,
            "aglgf_stages" => m.aglgf_stages = parse_list(key, v)?.into_iter().collect::<BTreeSet<_>>(),
            "expand" => m.expand = parse(key, v)?,
            "state_size" => m.state_size = parse(key, v)?,
            "conv1d_kernel" => m.conv1d_kernel = parse(key, v)?,
            "conv2d_kernel" => m.conv2d_kernel = parse(key, v)?,
            "gate" => m.gate = parse(key, v)?,
            "lgf_multiplier" => m.lgf_multiplier = parse(key, v)?,
            "skip_d" => m.skip_d = parse_bool(key, v)?,
            "decoder_separable" => m.decoder_separable = parse_bool(key, v)?,
            "lambda1" => t.loss.lambda1 = parse(key, v)?,
            "lambda2" => t.loss.lambda2 = parse(key, v)?,
            "dice_smoothing" => t.loss.dice_smoothing = parse(key, v)?,
            "lr" => t.adam.lr = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "patch" => self.patch = parse(key, v)?,
            "synthetic" => self.synthetic = parse_bool(key, v)?,
            "n" => self.n = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in its textual form.
    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t) = (&self.model, &self.train);
        Ok(match key {
            "input_channels" => m.input_channels.to_string(),
            "stem_channels" => m.stem_channels.to_string(),
            "stem_kernel" => m.stem_kernel.to_string(),
            "stage_channels" => join(&m.stage_channels),
            "stage_depths" => join(&m.stage_depths),
            "decoder_depths" => join(&m.decoder_depths),
            "aglgf_stages" => join(&m.aglgf_stages),
            "expand" => m.expand.to_string(),
            "state_size" => m.state_size.to_string(),
            "conv1d_kernel" => m.conv1d_kernel.to_string(),
            "conv2d_kernel" => m.conv2d_kernel.to_string(),
            "gate" => m.gate.to_string(),
            "lgf_multiplier" => m.lgf_multiplier.to_string(),
            "skip_d" => m.skip_d.to_string(),
            "decoder_separable" => m.decoder_separable.to_string(),
            "lambda1" => t.loss.lambda1.to_string(),
            "lambda2" => t.loss.lambda2.to_string(),
            "dice_smoothing" => t.loss.dice_smoothing.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "data_dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "patch" => self.patch.to_string(),
            "synthetic" => self.synthetic.to_string(),
            "n" => self.n.to_string(),
            "size" => self.size.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Parses a config file body on top of the defaults. A key may appear at
    /// most once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` set twice (line {})", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.synthetic {
            if self.n == 0 {
                return Err(Error::Config("synthetic run needs n ≥ 1".into()));
            }
            if self.size < 16 || self.size % 8 != 0 {
                return Err(Error::Config(format!(
                    "synthetic size must be at least 16 and divisible by 8, got {}",
                    self.size
                )));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let value = self.get(key).expect("listed key");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::GateActivation;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::parse(
            "synthetic = true\nn = 8 # samples\nsize=32\nepochs = 3\naglgf_stages =\ngate = silu\nlr = 2.5e-4\ndata_dir = /tmp/x\n",
        )
        .unwrap();
        assert!(cfg.model.aglgf_stages.is_empty());
        assert_eq!(cfg.model.gate, GateActivation::Silu);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_defaults_carry_the_loss_weights() {
        let text = RunConfig::default().to_text();
        assert!(text.contains("lambda1 = 0.5\n") && text.contains("lambda2 = 0.5\n"));
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("`bogus`"), "{e}");
        let e = RunConfig::parse("epochs = many").unwrap_err().to_string();
        assert!(e.contains("`epochs`"), "{e}");
        let e = RunConfig::parse("gate = tanh").unwrap_err().to_string();
        assert!(e.contains("`gate`"), "{e}");
        assert!(RunConfig::parse("epochs = 1\nepochs = 2").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("synthetic = true\nsize = 20").is_err());
        assert!(RunConfig::parse("batch_size = 0").is_err());
    }

    #[test]
    fn every_key_is_settable_and_readable() {
        let mut cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }
}
