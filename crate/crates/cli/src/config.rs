//! Run configuration: a TOML file with one table per module. Model fields
//! are laid over the named preset, flags are laid over the file, and the
//! result is validated as a whole.

use std::path::Path;

use femba::data::{Scheme, SynthSpec};
use femba::model::{ModelConfig, Variant};
use femba::profile::BenchConfig;
use femba::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// A configuration problem, reported with the dotted path of the field.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub detail: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config field {}: {}", self.field, self.detail)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(field: impl Into<String>, detail: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        detail: detail.into(),
    }
}

/// Windowing and labeling of input recordings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Window stride in samples; the window length is `model.samples`.
    pub stride: Option<usize>,
    pub scheme: Scheme,
    /// Sample rate assumed for CSV inputs.
    pub csv_sample_rate: f32,
    /// Recordings written by `gen-synth`.
    pub recordings: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            stride: None,
            scheme: Scheme::Bc,
            csv_sample_rate: 200.0,
            recordings: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileTask {
    Encoder,
    Pretrain,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    /// Windows per forward for the FLOP count.
    pub batch: usize,
    /// Windows per forward for the peak-memory estimate.
    pub memory_batch: usize,
    /// Which parts of the model to count; `classifier` uses `data.scheme`.
    pub task: ProfileTask,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            memory_batch: femba::profile::MEMORY_BATCH,
            task: ProfileTask::Pretrain,
        }
    }
}

/// Every setting of a run. `seed` is the only source of randomness; the
/// per-module seed fields are overwritten from it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub profile: ProfileConfig,
    pub bench: BenchConfig,
}

/// A resolved config plus the model keys that were set explicitly.
#[derive(Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub explicit_model_keys: Vec<String>,
}

const SECTIONS: [&str; 6] = ["model", "train", "data", "synth", "profile", "bench"];

/// Assigns `value` at dotted `path`, creating tables on the way.
pub fn set_path(table: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("override path crosses a non-table value");
    }
    t.insert(last.to_string(), value);
}

fn overlay(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => overlay(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn section<T: DeserializeOwned>(name: &str, value: Table) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(Value::Table(value)).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { name.to_string() } else { format!("{name}.{path}") };
        // toml appends its own location lines; the field path replaces them
        let detail = e.into_inner().to_string();
        config_error(field, detail.lines().next().unwrap_or_default().trim())
    })
}

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("defaults serialize to TOML")
}

/// Reads `path` (if any), applies `overrides` (dotted path, value) and
/// resolves the result.
pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Loaded, ConfigError> {
    let mut raw = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_error("<file>", format!("{}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| config_error("<file>", e.to_string()))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut raw, k, v.clone());
    }
    resolve(raw)
}

pub fn resolve(mut raw: Table) -> Result<Loaded, ConfigError> {
    for key in raw.keys() {
        if key != "seed" && !SECTIONS.contains(&key.as_str()) {
            return Err(config_error(key.clone(), "unknown top-level key"));
        }
    }
    let seed = match raw.remove("seed") {
        None => 0,
        Some(Value::Integer(s)) if s >= 0 => s as u64,
        Some(v) => return Err(config_error("seed", format!("must be a non-negative integer, got {v}"))),
    };
    let mut take = |name: &str| -> Result<Table, ConfigError> {
        match raw.remove(name) {
            None => Ok(Table::new()),
            Some(Value::Table(t)) => Ok(t),
            Some(v) => Err(config_error(name, format!("must be a table, got {v}"))),
        }
    };
    let (model_t, train_t, data_t, synth_t, profile_t, bench_t) =
        (take("model")?, take("train")?, take("data")?, take("synth")?, take("profile")?, take("bench")?);
    for (name, t) in [("train", &train_t), ("synth", &synth_t), ("bench", &bench_t)] {
        if t.contains_key("seed") {
            return Err(config_error(format!("{name}.seed"), "set the top-level seed instead"));
        }
    }

    let variant: Variant = match model_t.get("name") {
        Some(v) => section("model.name", {
            // deserialize a bare value through a one-field wrapper
            let mut t = Table::new();
            t.insert("v".into(), v.clone());
            t
        })
        .map(|w: NameOnly| w.v)
        .map_err(|e| config_error("model.name", e.detail))?,
        None => Variant::Tiny,
    };
    let mut model_base = to_table(&ModelConfig::preset(variant));
    overlay(&mut model_base, &model_t);
    let model: ModelConfig = section("model", model_base)?;
    model.validate().map_err(|e| match e {
        femba::model::ModelError::Config { field, detail } => config_error(field, detail),
        other => config_error("model", other.to_string()),
    })?;

    let mut train: TrainConfig = section("train", train_t)?;
    train.seed = seed;
    train.validate().map_err(|e| match e {
        femba::train::TrainError::Config { field, detail } => config_error(field, detail),
        other => config_error("train", other.to_string()),
    })?;

    let data: DataConfig = section("data", data_t)?;
    if data.stride == Some(0) {
        return Err(config_error("data.stride", "must be at least 1"));
    }
    if !(data.csv_sample_rate > 0.0 && data.csv_sample_rate.is_finite()) {
        return Err(config_error("data.csv_sample_rate", "must be positive"));
    }
    if data.recordings == 0 {
        return Err(config_error("data.recordings", "must be at least 1"));
    }

    let mut synth: SynthSpec = section("synth", synth_t)?;
    synth.seed = seed;
    let profile: ProfileConfig = section("profile", profile_t)?;
    if profile.batch == 0 || profile.memory_batch == 0 {
        return Err(config_error("profile.batch", "batch sizes must be at least 1"));
    }
    let mut bench: BenchConfig = section("bench", bench_t)?;
    bench.seed = seed;
    if bench.reps < 3 {
        return Err(config_error("bench.reps", format!("need at least 3 repetitions, got {}", bench.reps)));
    }
    if bench.lengths.len() < 2 || bench.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_error("bench.lengths", "need at least two strictly ascending lengths"));
    }

    Ok(Loaded {
        config: RunConfig {
            seed,
            model,
            train,
            data,
            synth,
            profile,
            bench,
        },
        explicit_model_keys: model_t.keys().cloned().collect(),
    })
}

#[derive(Deserialize)]
struct NameOnly {
    v: Variant,
}

impl RunConfig {
    /// The resolved config as TOML; loading it back gives the same config.
    /// The module seed fields are left out since they mirror `seed`.
    pub fn to_toml(&self) -> String {
        let mut t = to_table(self);
        for name in ["train", "synth", "bench"] {
            if let Some(Value::Table(s)) = t.get_mut(name) {
                s.remove("seed");
            }
        }
        toml::to_string(&t).expect("config serializes to TOML")
    }

    pub fn stride(&self) -> usize {
        self.data.stride.unwrap_or(self.model.samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Loaded, ConfigError> {
        resolve(text.parse::<Table>().unwrap())
    }

    #[test]
    fn defaults_mirror_reference_values() {
        let c = parse("").unwrap().config;
        assert_eq!(c.train.base_lr, 1e-4);
        assert_eq!(c.train.layer_decay, 0.75);
        assert_eq!(c.model.mask_ratio, 0.6);
        assert_eq!((c.model.patch_c, c.model.patch_t, c.model.state_size), (4, 32, 80));
    }

    #[test]
    fn preset_then_overrides() {
        let c = parse("[model]\nname = \"huge\"\nstate_size = 16\n").unwrap().config;
        assert_eq!((c.model.num_blocks, c.model.embed_dim, c.model.state_size), (20, 79, 16));
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse("[model]\nembed_dimm = 3\n").unwrap_err();
        assert!(e.field.starts_with("model"), "{e}");
        assert!(e.detail.contains("embed_dimm"), "{e}");
        let e = parse("[train.adam]\nbeta1 = \"x\"\n").unwrap_err();
        assert_eq!(e.field, "train.adam.beta1");
        let e = parse("[train]\nlayer_decay = 1.5\n").unwrap_err();
        assert_eq!(e.field, "train.layer_decay");
        let e = parse("[model]\nmask_ratio = 1.0\n").unwrap_err();
        assert_eq!(e.field, "model.mask_ratio");
        let e = parse("[train]\nseed = 3\n").unwrap_err();
        assert_eq!(e.field, "train.seed");
        let e = parse("colour = 1\n").unwrap_err();
        assert_eq!(e.field, "colour");
    }

    #[test]
    fn seed_reaches_every_module() {
        let c = parse("seed = 42\n").unwrap().config;
        assert_eq!((c.train.seed, c.synth.seed, c.bench.seed), (42, 42, 42));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = parse("seed = 9\n[model]\nname = \"large\"\nhead = \"mamba_enhanced\"\n[data]\nscheme = \"mmc\"\nstride = 800\n")
            .unwrap()
            .config;
        let back = parse(&c.to_toml()).unwrap().config;
        assert_eq!(c, back);
    }

    #[test]
    fn set_path_builds_tables() {
        let mut t = Table::new();
        set_path(&mut t, "train.adam.eps", Value::Float(1e-6));
        assert_eq!(t["train"]["adam"]["eps"].as_float(), Some(1e-6));
    }
}
