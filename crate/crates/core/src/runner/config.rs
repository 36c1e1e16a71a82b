use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fed::FlConfig;
use crate::impute::{AeConfig, PretrainConfig};
use crate::persist::read_file;
use crate::scene::{ClientProfile, ModalityPolicy, SceneParams, WeatherMix};

/// The only config document version this build reads.
pub const CONFIG_VERSION: u32 = 1;

/// A whole experiment: data recipe, models, federation, evaluation, sweep
/// and output location. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; every data, init and shuffle stream derives from it.
    pub seed: u64,
    /// Worker threads for client jobs and inference. Results never depend
    /// on it.
    #[serde(default = "one")]
    pub workers: usize,
    pub data: DataConfig,
    pub model: DetectorConfig,
    pub ae: AeSection,
    pub fl: FlConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    pub output: OutputConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneParams,
    pub clients: Vec<ClientProfile>,
    pub test_samples: usize,
    #[serde(default)]
    pub test_weather: WeatherMix,
    #[serde(default)]
    pub test_modality: ModalityPolicy,
    /// Complete pairs for autoencoder pretraining, held-out ones included.
    pub pretrain_samples: usize,
    pub pretrain_held_out: usize,
    #[serde(default)]
    pub pretrain_weather: WeatherMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeSection {
    pub model: AeConfig,
    pub pretrain: PretrainConfig,
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    PTh,
    SelectionFraction,
    ProxMu,
    KeepRatio,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::PTh => "p-th",
            SweepParameter::SelectionFraction => "selection-fraction",
            SweepParameter::ProxMu => "prox-mu",
            SweepParameter::KeepRatio => "keep-ratio",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Master seeds shared by every value. Empty means the config seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Save resumable training state every this many rounds; 0 saves only
    /// at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let d = &self.data;
        d.scene.validate()?;
        if d.clients.is_empty() {
            return Err(Error::Config("data.clients is empty".into()));
        }
        for c in &d.clients {
            c.validate()?;
        }
        d.test_weather.validate()?;
        d.test_modality.validate()?;
        d.pretrain_weather.validate()?;
        if d.pretrain_held_out > d.pretrain_samples {
            return Err(Error::Config("more held-out pretraining pairs than pairs".into()));
        }
        self.model.validate()?;
        self.ae.model.validate()?;
        let g = d.scene.grid;
        let c = d.scene.lidar_channels;
        if self.model.grid != g || self.ae.model.grid != g {
            return Err(Error::Config(format!(
                "grid mismatch: data {g}, model {}, ae {}",
                self.model.grid, self.ae.model.grid
            )));
        }
        if self.model.lidar_channels != c || self.ae.model.lidar_channels != c {
            return Err(Error::Config("lidar channel count differs between data, model and ae".into()));
        }
        self.fl.validate()?;
        self.eval.validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep has no values".into()));
            }
            for &v in &s.values {
                let mut probe = self.clone();
                probe.sweep = None;
                probe.apply(s.parameter, v)?;
            }
        }
        Ok(())
    }

    /// Sets one swept knob.
    pub fn apply(&mut self, parameter: SweepParameter, value: f64) -> Result<()> {
        match parameter {
            SweepParameter::PTh => {
                self.fl.loss.mce = true;
                self.fl.loss.p_th = value;
            }
            SweepParameter::SelectionFraction => self.fl.selection_fraction = value,
            SweepParameter::ProxMu => self.fl.prox_mu = value,
            SweepParameter::KeepRatio => {
                for c in self.data.clients.iter_mut().filter(|c| c.keep_ratio < 1.0) {
                    c.keep_ratio = value;
                }
            }
        }
        self.fl.validate()?;
        self.data.clients.iter().try_for_each(ClientProfile::validate)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Reads a config file. With `preset`, the file is laid over that
    /// preset: tables merge key by key, everything else replaces. The file
    /// must carry `version` either way.
    pub fn load(path: &Path, preset: Option<&str>) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_layered(&text, preset)
    }

    pub fn from_layered(text: &str, preset: Option<&str>) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !overlay.contains_key("version") {
            return Err(Error::Config("missing mandatory `version` field".into()));
        }
        let merged = match preset {
            None => overlay,
            Some(name) => {
                let base = super::presets::preset(name)?.to_toml_string()?;
                let mut base: toml::Table = toml::from_str(&base).map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut base, overlay);
                base
            }
        };
        let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
