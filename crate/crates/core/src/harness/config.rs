//! Flat `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. List values are comma
//! separated. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `data` | `synthetic` or a feature CSV path |
//! | `models` | model kinds, e.g. `baseline_dnn, simple` |
//! | `folds` | speaker-grouped folds (k ≥ 2) |
//! | `groups` | age-group counts, e.g. `2, 5` |
//! | `seed` | master seed |
//! | `out` | output directory |
//! | `diagnostics` | `true` to run age probes on representations |
//! | `train.*` | any `TrainConfig` field, plus `learning_rate`, `weight_decay` and the hidden widths |
//! | `synth.*` | any `SynthConfig` field |
//! | `probe.*` | `epochs`, `batch_size`, `hidden`, `validation_folds`, `learning_rate`, `weight_decay` |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::models::{ModelKind, ProbeConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv(PathBuf),
    /// `seed: None` follows the master seed.
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Whether `synth.seed` was set explicitly; otherwise the synthetic data
    /// follows the master seed.
    pub synth_seed_pinned: bool,
    pub models: Vec<ModelKind>,
    pub folds: usize,
    pub n_groups: Vec<usize>,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub diagnostics: bool,
    /// Where outputs go; not part of the echoed configuration, so reports
    /// written to different places stay identical.
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SynthConfig::default()),
            synth_seed_pinned: false,
            models: vec![ModelKind::BaselineDnn, ModelKind::Simple],
            folds: 5,
            n_groups: vec![2, 5],
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            diagnostics: true,
            out_dir: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text)?;
        // Relative CSV paths are resolved against the config file.
        if let DataSource::Csv(p) = &cfg.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.source = DataSource::Csv(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one setting; also used for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => {
                self.source = if value == "synthetic" {
                    match &self.source {
                        DataSource::Synthetic(_) => self.source.clone(),
                        DataSource::Csv(_) => DataSource::Synthetic(SynthConfig::default()),
                    }
                } else {
                    DataSource::Csv(PathBuf::from(value))
                }
            }
            "models" => {
                self.models = parse_list(key, value)?;
            }
            "folds" => self.folds = parse(key, value)?,
            "groups" => self.n_groups = parse_list(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "diagnostics" => self.diagnostics = parse_bool(key, value)?,
            _ => {
                if let Some(k) = key.strip_prefix("train.") {
                    self.set_train(k, value)?;
                } else if let Some(k) = key.strip_prefix("synth.") {
                    self.set_synth(k, value)?;
                } else if let Some(k) = key.strip_prefix("probe.") {
                    self.set_probe(k, value)?;
                } else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    fn set_train(&mut self, k: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let key = format!("train.{k}");
        match k {
            "epochs" => t.epochs = parse(&key, v)?,
            "adversary_steps" => t.adversary_steps = parse(&key, v)?,
            "discriminator_steps" => t.discriminator_steps = parse(&key, v)?,
            "consensus_adversary_steps" => t.consensus_adversary_steps = parse(&key, v)?,
            "batch_size" => t.batch_size = parse(&key, v)?,
            "lambda_h" => t.lambda_h = parse(&key, v)?,
            "adversary_weight" => t.adversary_weight = parse(&key, v)?,
            "reconstruction_weight" => t.reconstruction_weight = parse(&key, v)?,
            "discriminator_weight" => t.discriminator_weight = parse(&key, v)?,
            "modalities" => t.modalities = parse(&key, v)?,
            "learning_rate" => t.adam.learning_rate = parse(&key, v)?,
            "weight_decay" => t.adam.weight_decay = parse(&key, v)?,
            "z_dim" => t.arch.z_dim = parse(&key, v)?,
            "interpreter_hidden" => t.arch.interpreter_hidden = parse_list(&key, v)?,
            "classifier_hidden" => t.arch.classifier_hidden = parse_list(&key, v)?,
            "adversary_hidden" => t.arch.adversary_hidden = parse_list(&key, v)?,
            "reconstructor_hidden" => t.arch.reconstructor_hidden = parse_list(&key, v)?,
            "discriminator_hidden" => t.arch.discriminator_hidden = parse_list(&key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn set_synth(&mut self, k: &str, v: &str) -> Result<()> {
        if let DataSource::Csv(_) = self.source {
            self.source = DataSource::Synthetic(SynthConfig::default());
        }
        let DataSource::Synthetic(s) = &mut self.source else {
            unreachable!("source was just made synthetic");
        };
        let key = format!("synth.{k}");
        match k {
            "n" => s.n = parse(&key, v)?,
            "d" => s.d = parse(&key, v)?,
            "confound_strength" => s.confound_strength = parse(&key, v)?,
            "age_mean" => s.age_mean = parse(&key, v)?,
            "age_sd" => s.age_sd = parse(&key, v)?,
            "disease_effect" => s.disease_effect = parse(&key, v)?,
            "age_effect" => s.age_effect = parse(&key, v)?,
            "label_age_slope" => s.label_age_slope = parse(&key, v)?,
            "noise_sd" => s.noise_sd = parse(&key, v)?,
            "samples_per_speaker" => s.samples_per_speaker = parse(&key, v)?,
            "seed" => {
                s.seed = parse(&key, v)?;
                self.synth_seed_pinned = true;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn set_probe(&mut self, k: &str, v: &str) -> Result<()> {
        let p = &mut self.probe;
        let key = format!("probe.{k}");
        match k {
            "epochs" => p.epochs = parse(&key, v)?,
            "batch_size" => p.batch_size = parse(&key, v)?,
            "hidden" => p.hidden = parse_list(&key, v)?,
            "validation_folds" => p.validation_folds = parse(&key, v)?,
            "learning_rate" => p.adam.learning_rate = parse(&key, v)?,
            "weight_decay" => p.adam.weight_decay = parse(&key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.n_groups.is_empty() || self.n_groups.contains(&0) {
            return Err(Error::Config(
                "groups must list counts of at least 1".into(),
            ));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model kind is required".into()));
        }
        if let DataSource::Synthetic(s) = &self.source {
            s.validate()?;
        }
        self.train.validate()?;
        self.probe.validate()
    }

    /// The synthetic generator settings with the seed rule applied.
    pub fn synth_config(&self) -> Option<SynthConfig> {
        match &self.source {
            DataSource::Synthetic(s) => Some(SynthConfig {
                seed: if self.synth_seed_pinned {
                    s.seed
                } else {
                    self.seed
                },
                ..s.clone()
            }),
            DataSource::Csv(_) => None,
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let cfg = ExperimentConfig::parse_str(
            "# demo\n\
             data = synthetic\n\
             models = baseline_dnn, simple, entropy_honly\n\
             folds = 3   # speaker folds\n\
             groups = 2,5\n\
             seed = 9\n\
             train.epochs = 7\n\
             train.learning_rate = 0.001\n\
             train.interpreter_hidden = 32, 16\n\
             synth.n = 120\n\
             synth.confound_strength = 0.5\n\
             probe.hidden = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.models.len(), 3);
        assert_eq!(cfg.folds, 3);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.adam.learning_rate, 0.001);
        assert_eq!(cfg.train.arch.interpreter_hidden, vec![32, 16]);
        assert_eq!(cfg.probe.hidden, vec![8]);
        let s = cfg.synth_config().unwrap();
        assert_eq!((s.n, s.seed, s.confound_strength), (120, 9, 0.5));
    }

    #[test]
    fn rejects_bad_lines() {
        for text in [
            "folds = 1",
            "bogus = 3",
            "train.epochs = many",
            "no equals sign",
            "groups = 0",
        ] {
            let e = ExperimentConfig::parse_str(text).unwrap_err();
            assert_eq!(e.category(), "config", "{text}");
        }
        let e = ExperimentConfig::parse_str("\n\nmodels = svm").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn pinned_synth_seed_wins() {
        let cfg = ExperimentConfig::parse_str("seed = 4\nsynth.seed = 17").unwrap();
        assert_eq!(cfg.synth_config().unwrap().seed, 17);
    }
}
