//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::SyntheticSpec;
use crate::heatmap::{GaussianKernelSpec, RenderSpec};
use crate::losses::TrainConfig;
use crate::model::{geometry_of, BackboneSpec};
use crate::scoring::{RiskWeightTable, ScoreKind};
use crate::store::{DEFAULT_BUCKET_WIDTH, DEFAULT_TREND_FACTOR};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Split manifest used by train, evaluate, heatmap and score.
    pub manifest: Option<PathBuf>,
    /// Candidate pools sampled by the imbalance and scale ablations.
    pub normal_pool: Option<PathBuf>,
    pub anomalous_pool: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistoryConfig {
    pub bucket_width_m: f64,
    pub trend_factor: f64,
    pub trend_window: usize,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            bucket_width_m: DEFAULT_BUCKET_WIDTH,
            trend_factor: DEFAULT_TREND_FACTOR,
            trend_window: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Overrides `train.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "BackboneSpec::cnn27")]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Derived from the backbone geometry when absent.
    #[serde(default)]
    pub kernel: Option<GaussianKernelSpec>,
    #[serde(default)]
    pub render: RenderSpec,
    #[serde(default)]
    pub risk_table: Option<PathBuf>,
    #[serde(default)]
    pub score_kind: ScoreKind,
    #[serde(default)]
    pub history: HistoryConfig,
    #[serde(default)]
    pub synth: SyntheticSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: default_out(),
            data: DataConfig::default(),
            backbone: BackboneSpec::cnn27(),
            train: TrainConfig::default(),
            kernel: None,
            render: RenderSpec::default(),
            risk_table: None,
            score_kind: ScoreKind::Raw,
            history: HistoryConfig::default(),
            synth: SyntheticSpec::default(),
        }
    }
}

fn field(name: &str, e: Error) -> Error {
    match e {
        Error::ConfigField { field, reason } if !field.contains('.') => Error::ConfigField {
            field: format!("{name}.{field}"),
            reason,
        },
        Error::ConfigField { .. } => e,
        other => Error::ConfigField {
            field: name.into(),
            reason: other.to_string(),
        },
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().replace('\n', " ")))
    }

    /// Parse, resolve relative paths against the file's directory and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut c = Self::from_toml(&text)?;
        c.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        c.validate()?;
        Ok(c)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.normal_pool);
        fix(&mut self.data.anomalous_pool);
        fix(&mut self.risk_table);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("data.manifest", &self.data.manifest),
            ("data.normal_pool", &self.data.normal_pool),
            ("data.anomalous_pool", &self.data.anomalous_pool),
            ("risk_table", &self.risk_table),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::ConfigField {
                        field: name.into(),
                        reason: format!("{} does not exist", p.display()),
                    });
                }
            }
        }
        self.backbone.validate().map_err(|e| field("backbone", e))?;
        self.effective_train().validate().map_err(|e| field("train", e))?;
        self.kernel_spec()?.validate().map_err(|e| field("kernel", e))?;
        self.render.validate().map_err(|e| field("render", e))?;
        self.synth.validate().map_err(|e| field("synth", e))?;
        let h = &self.history;
        if !(h.bucket_width_m > 0.0) {
            return Err(Error::ConfigField {
                field: "history.bucket_width_m".into(),
                reason: "must be positive".into(),
            });
        }
        if !(h.trend_factor > 0.0) || h.trend_window == 0 {
            return Err(Error::ConfigField {
                field: "history".into(),
                reason: "trend_factor must be positive and trend_window at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    pub fn kernel_spec(&self) -> Result<GaussianKernelSpec> {
        match self.kernel {
            Some(k) => Ok(k),
            None => Ok(GaussianKernelSpec::for_geometry(&geometry_of(&self.backbone).map_err(|e| field("backbone", e))?)),
        }
    }

    pub fn risk_weights(&self) -> Result<RiskWeightTable> {
        match &self.risk_table {
            Some(p) => RiskWeightTable::load(p, 1.0),
            None => Ok(RiskWeightTable::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_setup() {
        let c = Config::from_toml("").unwrap();
        let t = c.effective_train();
        assert_eq!((t.batch_size, t.epochs, t.learning_rate), (32, 30, 1e-4));
        assert_eq!((t.gradient_decay, t.squared_gradient_decay), (0.9, 0.99));
        assert_eq!(t.split_ratio, [65, 15, 20]);
        assert_eq!((c.backbone.input_side, c.backbone.output_rows, c.backbone.output_cols), (224, 28, 28));
        assert_eq!(c.render.quartile, 0.25);
        assert_eq!(c.kernel_spec().unwrap().sigma, 4.0);
        assert_eq!(c.history.bucket_width_m, 0.6);
        c.validate().unwrap();
    }

    #[test]
    fn diagnostics_name_the_field() {
        let c = Config::from_toml("[train]\nbatch_size = 0\n").unwrap();
        match c.validate() {
            Err(Error::ConfigField { field, .. }) => assert!(field.starts_with("train"), "{field}"),
            other => panic!("{other:?}"),
        }
        let c = Config::from_toml("[render]\nquartile = 1.5\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::ConfigField { field, .. }) if field == "render.quartile"));
        let c = Config::from_toml("[data]\nmanifest = \"/definitely/missing.jsonl\"\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::ConfigField { field, .. }) if field == "data.manifest"));
        assert!(matches!(Config::from_toml("bogus = 1\n"), Err(Error::Config(m)) if m.contains("bogus")));
    }

    #[test]
    fn seed_override_and_roundtrip() {
        let c = Config::from_toml("seed = 7\n[train]\nseed = 3\nepochs = 2\n").unwrap();
        assert_eq!(c.effective_train().seed, 7);
        let back = Config::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
