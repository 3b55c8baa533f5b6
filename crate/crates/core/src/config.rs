//! Flat `key = value` TOML configuration shared by the reward and the
//! simulator. Unknown keys are rejected.

use std::path::Path;

use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::reward::RewardConfig;
use crate::sim_rl::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Config {
    pub reward: RewardConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let mut reward = Table::new();
        let mut train = Table::new();
        for (key, value) in table {
            if RewardConfig::KEYS.contains(&key.as_str()) {
                reward.insert(key, value);
            } else if TrainConfig::KEYS.contains(&key.as_str()) {
                train.insert(key, value);
            } else {
                return Err(Error::UnknownConfigKey(key));
            }
        }
        let reward: RewardConfig = Value::Table(reward)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let train: TrainConfig = Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        reward.validate()?;
        train.validate()?;
        Ok(Config { reward, train })
    }

    /// Flat table of every key, suitable for [`Config::from_table`].
    pub fn to_table(&self) -> Table {
        let mut table = Table::new();
        for part in [Value::try_from(&self.reward), Value::try_from(&self.train)] {
            if let Ok(Value::Table(t)) = part {
                table.extend(t);
            }
        }
        table
    }

    /// Applies `key=value` overrides on top of this configuration. Values are
    /// read as TOML literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = self.to_table();
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let key = key.trim();
            if !RewardConfig::KEYS.contains(&key) && !TrainConfig::KEYS.contains(&key) {
                return Err(Error::UnknownConfigKey(key.to_string()));
            }
            table.insert(key.to_string(), parse_value(value.trim()));
        }
        Self::from_table(table)
    }
}

fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}
