//! Run configuration: TOML sections, `XAKD_SECTION__KEY` environment
//! overrides, then command-line flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{AugmentConfig, AugmentPolicy, SynthConfig};
use crate::error::{Error, Result};
use crate::ijepa::IjepaConfig;
use crate::model::ArchSpec;
use crate::train::{DistillConfig, TrainConfig};

pub const ENV_PREFIX: &str = "XAKD_";

const SECTIONS: [&str; 7] = ["data", "teacher", "student", "ijepa", "distill", "train", "quant"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding `{train,val,test}/{class}/` folders.
    pub root: PathBuf,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub signal: f32,
    pub noise: f32,
    /// Random augmentation of training batches.
    pub augment: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::new(32, 50, 20, 20);
        Self {
            root: PathBuf::from("data"),
            image_size: s.size,
            train_per_class: s.train_per_class,
            val_per_class: s.val_per_class,
            test_per_class: s.test_per_class,
            signal: s.signal,
            noise: s.noise,
            augment: true,
        }
    }
}

impl DataSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            size: self.image_size,
            train_per_class: self.train_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            signal: self.signal,
            noise: self.noise,
        }
    }

    pub fn train_policy(&self) -> AugmentPolicy {
        AugmentPolicy::uniform(if self.augment {
            AugmentConfig::train(self.image_size)
        } else {
            AugmentConfig::eval(self.image_size)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Preset name; ignored when `spec` is given.
    pub arch: String,
    pub classes: usize,
    pub spec: Option<ArchSpec>,
    /// Checkpoint to start from (teacher: required by `distill`).
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: String::new(),
            classes: 4,
            spec: None,
            checkpoint: None,
        }
    }
}

impl ModelSection {
    fn preset(arch: &str) -> Self {
        Self {
            arch: arch.into(),
            ..Self::default()
        }
    }

    fn or_arch(self, arch: &str) -> Self {
        if self.arch.is_empty() {
            Self { arch: arch.into(), ..self }
        } else {
            self
        }
    }

    pub fn resolve(&self) -> Result<ArchSpec> {
        let spec = match &self.spec {
            Some(s) => s.clone(),
            None => ArchSpec::preset(&self.arch, self.classes)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSection {
    pub batch_size: usize,
    pub n_warmup: usize,
    pub n_timed: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            n_warmup: 2,
            n_timed: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream of a run derives from this value.
    pub seed: u64,
    pub data: DataSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub ijepa: IjepaConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub quant: QuantSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            teacher: ModelSection::preset("toy-vit"),
            student: ModelSection::preset("toy-cnn"),
            ijepa: IjepaConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            quant: QuantSection::default(),
        }
    }
}

fn config_err(key: impl Into<String>, msg: impl ToString) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.to_string().replace('\n', " ").trim().to_string(),
    }
}

/// Parses a scalar from an environment variable as a TOML value, falling
/// back to a plain string.
fn env_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `XAKD_SECTION__KEY=value` (or `XAKD_SEED`) pairs onto `table`.
pub fn apply_env(table: &mut Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let path: Vec<String> = name[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        let key = path.join(".");
        if path.iter().any(String::is_empty) {
            return Err(config_err(key, format!("malformed override variable `{name}`")));
        }
        let (last, parents) = path.split_last().expect("split yields one item");
        let mut cur = &mut *table;
        for p in parents {
            let slot = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
            cur = slot
                .as_table_mut()
                .ok_or_else(|| config_err(key.clone(), format!("`{p}` is not a section")))?;
        }
        cur.insert(last.clone(), env_value(&raw));
    }
    Ok(())
}

fn section<T: DeserializeOwned + Default>(name: &str, value: Option<Value>) -> Result<T> {
    let Some(value) = value else {
        return Ok(T::default());
    };
    let Value::Table(table) = value else {
        return Err(config_err(name, "expected a table"));
    };
    match T::deserialize(Value::Table(table.clone())) {
        Ok(v) => Ok(v),
        Err(whole) => {
            // find the first key that fails on its own
            for (k, v) in &table {
                let mut one = Table::new();
                one.insert(k.clone(), v.clone());
                if let Err(e) = T::deserialize(Value::Table(one)) {
                    return Err(config_err(format!("{name}.{k}"), e));
                }
            }
            Err(config_err(name, whole))
        }
    }
}

impl RunConfig {
    /// Builds a config from a parsed table, rejecting unknown sections and keys.
    pub fn from_table(mut table: Table) -> Result<Self> {
        let seed = match table.remove("seed") {
            None => 0,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(other) => return Err(config_err("seed", format!("expected a non-negative integer, got {other}"))),
        };
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(config_err(k.clone(), "unknown section"));
        }
        let cfg = Self {
            seed,
            data: section("data", table.remove("data"))?,
            teacher: section::<ModelSection>("teacher", table.remove("teacher"))?.or_arch("toy-vit"),
            student: section::<ModelSection>("student", table.remove("student"))?.or_arch("toy-cnn"),
            ijepa: section("ijepa", table.remove("ijepa"))?,
            distill: section("distill", table.remove("distill"))?,
            train: section("train", table.remove("train"))?,
            quant: section("quant", table.remove("quant"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// File (optional) → environment → explicit seed.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err("<file>", format!("{}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| config_err("<file>", e))?
            }
            None => Table::new(),
        };
        apply_env(&mut table, env)?;
        if let Some(s) = seed {
            table.insert("seed".into(), Value::Integer(s as i64));
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |key: &str, r: Result<()>| r.map_err(|e| config_err(key, e));
        check("train", self.train.validate())?;
        check("teacher", self.teacher.resolve().map(drop))?;
        check("student", self.student.resolve().map(drop))?;
        if self.data.image_size < 16 {
            return Err(config_err("data.image_size", "must be at least 16"));
        }
        if self.distill.views == 0 {
            return Err(config_err("distill.views", "must be at least 1"));
        }
        if !(self.distill.crop_frac > 0.0 && self.distill.crop_frac <= 1.0) {
            return Err(config_err("distill.crop_frac", "must be in (0, 1]"));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn ijepa(&self) -> IjepaConfig {
        IjepaConfig {
            seed: self.seed,
            ..self.ijepa.clone()
        }
    }

    /// The fully-resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
