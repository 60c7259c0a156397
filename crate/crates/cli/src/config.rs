//! Layered run configuration: built-in defaults, then an optional JSON
//! config file, then `--set key=value` flags. Every layer is checked
//! against the key set of the defaults, so misspelled keys are rejected
//! rather than ignored.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vrckit::classifier::ClassifierTrainConfig;
use vrckit::geometry::ShapeFamily;
use vrckit::model::VrcnetConfig;
use vrckit::training::{LossWeights, TrainConfig};
use vrckit::views::{Mode, Split, DEFAULT_CAMERA_RADIUS};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub mode: Mode,
    pub divisor: usize,
    pub families: Vec<String>,
    pub shapes_per_family: usize,
    pub missing_ratio: f64,
    pub test_fraction: f64,
    pub camera_radius: f64,
    /// Camera ids to render; all 26 when null.
    pub views: Option<Vec<usize>>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            mode: Mode::Mvp,
            divisor: 4,
            families: ShapeFamily::ALL
                .iter()
                .map(|f| f.name().to_string())
                .collect(),
            shapes_per_family: 4,
            missing_ratio: 0.5,
            test_fraction: 0.25,
            camera_radius: DEFAULT_CAMERA_RADIUS,
            views: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    pub train: ClassifierTrainConfig,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            trunk: vec![64, 128, 256],
            head_hidden: 128,
            train: ClassifierTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Resolutions to score; every manifest resolution when empty.
    pub resolutions: Vec<usize>,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            resolutions: Vec::new(),
            split: Split::Test,
        }
    }
}

/// Effective configuration of one invocation. `train.seed` and
/// `classifier.train.seed` are overwritten with sub-streams of `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: VrcnetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub classifier: ClassifierSection,
    pub eval: EvalConfig,
}

fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// Turns `a.b.c=v` into `{"a": {"b": {"c": v}}}`; `v` is JSON when it
/// parses as JSON and a string otherwise.
pub fn parse_assignment(s: &str) -> Result<Value> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected KEY=VALUE, got `{s}`"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("malformed config key `{key}`");
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// Inputs to [`RunConfig::resolve`], lowest precedence first.
#[derive(Default)]
pub struct Layers<'a> {
    pub env_seed: Option<&'a str>,
    pub file: Option<&'a Path>,
    pub sets: &'a [String],
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn resolve(layers: &Layers) -> Result<RunConfig> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(s) = layers.env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .with_context(|| format!("VRCKIT_SEED must be an unsigned integer, got `{s}`"))?;
            merge(&mut v, &serde_json::json!({ "seed": seed }), "")?;
        }
        if let Some(path) = layers.file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            let file: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?;
            if !file.is_object() {
                bail!("config file {} must hold a JSON object", path.display());
            }
            merge(&mut v, &file, "")
                .with_context(|| format!("in config file {}", path.display()))?;
        }
        for s in layers.sets {
            merge(&mut v, &parse_assignment(s)?, "").with_context(|| format!("in --set {s}"))?;
        }
        if let Some(seed) = layers.seed {
            merge(&mut v, &serde_json::json!({ "seed": seed }), "")?;
        }
        let cfg: RunConfig = serde_json::from_value(v).context("invalid configuration value")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.dataset.shapes_per_family == 0 || self.dataset.families.is_empty() {
            bail!("dataset needs at least one family and one shape per family");
        }
        for f in &self.dataset.families {
            f.parse::<ShapeFamily>()?;
        }
        Ok(())
    }

    pub fn families(&self) -> Result<Vec<ShapeFamily>> {
        Ok(self
            .dataset
            .families
            .iter()
            .map(|f| f.parse())
            .collect::<vrckit::Result<_>>()?)
    }

    /// Writes the effective configuration as `dir/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        self.echo_to(&dir.join(CONFIG_FILE))
    }

    pub fn echo_to(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}
