//! Run configuration: model + training hyperparameters resolved from an
//! optional key=value file, CLI flags, and defaults.

use crate::CliError;
use dsbel_core::model::ModelConfig;
use dsbel_core::train::TrainConfig;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// epochs of auxiliary-stem pretraining on the surrogate task
    pub pretrain_epochs: usize,
    /// surrogate corpus size per class
    pub surrogate_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain_epochs: 2,
            surrogate_per_class: 32,
        }
    }
}

impl RunConfig {
    /// Parses the key=value config file. Unknown keys are usage errors
    /// naming the offending key.
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            let (key, val) = (key.trim(), val.trim());
            cfg.set(key, val)?;
        }
        cfg.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, val: &str) -> Result<(), CliError> {
        let bad = || CliError::Usage(format!("bad value for config key {key}: {val}"));
        match key {
            "stm_widths" => {
                self.model.stm_widths = val
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
            }
            "input_side" => self.model.side = val.parse().map_err(|_| bad())?,
            "dropout" => self.model.dropout = val.parse().map_err(|_| bad())?,
            "learning_rate" => self.train.learning_rate = val.parse().map_err(|_| bad())?,
            "epochs" => self.train.epochs = val.parse().map_err(|_| bad())?,
            "batch_size" => self.train.batch_size = val.parse().map_err(|_| bad())?,
            "momentum" => self.train.momentum = val.parse().map_err(|_| bad())?,
            "augment" => self.train.augment = val.parse().map_err(|_| bad())?,
            "pretrain_epochs" => self.pretrain_epochs = val.parse().map_err(|_| bad())?,
            "surrogate_per_class" => self.surrogate_per_class = val.parse().map_err(|_| bad())?,
            _ => return Err(CliError::Usage(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Canonical key=value rendering of every resolved setting, recorded
    /// in the run manifest.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.model.stm_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "stm_widths={}\ninput_side={}\ndropout={}\nlearning_rate={}\nepochs={}\n\
             batch_size={}\nmomentum={}\naugment={}\npretrain_epochs={}\nsurrogate_per_class={}\n",
            widths.join(","),
            self.model.side,
            self.model.dropout,
            self.train.learning_rate,
            self.train.epochs,
            self.train.batch_size,
            self.train.momentum,
            self.train.augment,
            self.pretrain_epochs,
            self.surrogate_per_class
        )
    }
}
