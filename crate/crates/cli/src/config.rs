//! Run configuration: a TOML file of flat dotted keys, overridden by
//! `key=value` flags. Precedence is flag > `SUBADJ_OUT_DIR` (output
//! directory only) > file > default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use subadj_core::eval::Aggregation;
use subadj_core::{
    Error, MappingConfig, ModelConfig, Result, ScoreConfig, SubAdjacentSpan, TrainConfig,
};

pub const OUT_DIR_ENV: &str = "SUBADJ_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub label_column: String,
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            label_column: "label".into(),
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub win_size: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            win_size: m.win_size,
            dropout: m.dropout,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanSection {
    pub k1: usize,
    pub k2: usize,
}

impl Default for SpanSection {
    fn default() -> Self {
        Self { k1: 20, k2: 30 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub subsample_ratio: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            subsample_ratio: t.subsample_ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub point_adjust: bool,
    pub aggregation: Aggregation,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            point_adjust: true,
            aggregation: Aggregation::Concatenate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub span: SpanSection,
    pub mapping: MappingConfig,
    pub train: TrainSection,
    pub score: ScoreConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            span: SpanSection::default(),
            mapping: MappingConfig::default(),
            train: TrainSection::default(),
            score: ScoreConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in a nested table, creating tables on the way.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn existing<'a>(p: Option<&'a Path>, key: &str) -> Result<&'a Path> {
    let p = p.ok_or_else(|| Error::Config(format!("`data.{key}` is not set")))?;
    if !p.is_file() {
        return Err(Error::Input(format!("data.{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

impl RunConfig {
    /// Merges file, environment and overrides, in increasing precedence.
    pub fn resolve(file: Option<&Path>, env_out_dir: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(dir) = env_out_dir.filter(|d| !d.is_empty()) {
            table.insert("out_dir".into(), toml::Value::String(dir.into()));
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_dotted(&mut table, &k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(OUT_DIR_ENV).ok();
        Self::resolve(file, env.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?.validate()?;
        self.train_config().validate()?;
        self.score.validate()?;
        Ok(())
    }

    /// Train and test paths, both required to exist.
    pub fn data_paths(&self) -> Result<(&Path, &Path)> {
        Ok((
            existing(self.data.train.as_deref(), "train")?,
            existing(self.data.test.as_deref(), "test")?,
        ))
    }

    pub fn model_config(&self, n_channels: usize) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            win_size: m.win_size,
            n_channels,
            span: SubAdjacentSpan::new(self.span.k1, self.span.k2, m.win_size)?,
            mapping: self.mapping,
            dropout: m.dropout,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            seed: self.seed,
            subsample_ratio: t.subsample_ratio,
        }
    }

    /// Copy with extra dotted-key assignments applied and re-validated.
    pub fn with_assignments(&self, assignments: &[(String, toml::Value)]) -> Result<Self> {
        let mut table =
            toml::Table::try_from(self).map_err(|e| Error::Config(format!("run config: {e}")))?;
        for (k, v) in assignments {
            set_dotted(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
