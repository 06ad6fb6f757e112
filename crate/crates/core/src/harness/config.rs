use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{Alpha, LossWeights, PixelWise};
use crate::tasks::{Task, DEFAULT_BINS};
use crate::{Error, Result};

/// Which distillation terms enter the student objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub pi: bool,
    pub pa: bool,
    pub ho: bool,
    pub mimic: bool,
    pub at: bool,
    pub local: bool,
}

impl Toggles {
    pub fn any(&self) -> bool {
        self.pi || self.pa || self.ho || self.mimic || self.at || self.local
    }

    /// The scheme name used in ablation tables.
    pub fn scheme(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.pi, "PI"),
            (self.pa, "PA"),
            (self.ho, "HO"),
            (self.mimic, "MIMIC"),
            (self.at, "AT"),
            (self.local, "LOCAL"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            format!("+{}", parts.join("+"))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Training and test data generation.
    pub data: u64,
    /// Initialisation, batch order and penalty interpolation.
    pub run: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    /// Extra samples whose labels are withheld.
    pub unlabeled: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub depth_bins: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 512,
            test: 128,
            unlabeled: 0,
            height: 32,
            width: 32,
            classes: 6,
            depth_bins: DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub attention: usize,
    pub blocks: usize,
    pub optimizer: OptimizerKind,
    pub lr0: f32,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f32,
    /// Adam's second-moment decay.
    pub beta2: f32,
    pub weight_decay: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            attention: 2,
            blocks: 4,
            optimizer: OptimizerKind::Adam,
            lr0: 1e-5,
            momentum: 0.9,
            beta2: 0.99,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Where checkpoints, caches and the run record go.
    pub out_dir: Option<PathBuf>,
    /// Teacher checkpoint directory for distillation.
    pub teacher: Option<PathBuf>,
    /// Teacher output cache; computed live when absent.
    pub cache: Option<PathBuf>,
    /// Dataset root holding `train/`, `test/` and optionally `unlabeled/`;
    /// generated from the data seed when absent.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_power: f32,
    pub toggles: Toggles,
    pub alpha: Alpha,
    pub beta: usize,
    pub weights: LossWeights,
    pub pixel: PixelWise,
    pub d_steps_per_g_step: usize,
    pub discriminator: DiscriminatorConfig,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub paths: Paths,
    /// Iterations between progress log lines; 0 disables them.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Segmentation,
            iterations: 3000,
            batch_size: 8,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_power: 0.9,
            toggles: Toggles::default(),
            alpha: Alpha::Full,
            beta: 1,
            weights: LossWeights::default(),
            pixel: PixelWise::default(),
            d_steps_per_g_step: 1,
            discriminator: DiscriminatorConfig::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            paths: Paths::default(),
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `key=value` overrides; dotted keys reach nested tables and
    /// values are read as TOML, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<TrainConfig> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref().trim_start_matches("--");
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw);
            set_path(&mut root, key, value)?;
        }
        let cfg: TrainConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be positive".into());
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr_power", self.lr_power),
            ("discriminator.lr0", self.discriminator.lr0),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.pixel.temperature > 0.0) {
            return bad(format!("pixel.temperature must be positive, got {}", self.pixel.temperature));
        }
        if self.beta == 0 {
            return bad("beta must be positive".into());
        }
        if self.data.train == 0 {
            return bad("data.train must be positive".into());
        }
        if self.task == Task::Segmentation && self.data.classes < 2 {
            return bad("data.classes must be at least 2".into());
        }
        if self.task == Task::Depth && self.data.depth_bins < 2 {
            return bad("data.depth_bins must be at least 2".into());
        }
        if self.weights.unlabeled && !self.toggles.any() {
            return bad("unlabeled training needs at least one distillation term".into());
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Output channels of the dense heads.
    pub fn head_classes(&self) -> usize {
        match self.task {
            Task::Segmentation => self.data.classes,
            Task::Depth => self.data.depth_bins,
        }
    }

    /// Channels of the map the discriminator scores.
    pub fn map_channels(&self) -> usize {
        match self.task {
            Task::Segmentation => self.data.classes,
            Task::Depth => 1,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*p) && !optional_field(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*p)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    unreachable!("split yields at least one part")
}

/// Optional fields are left out of the serialised table when unset.
fn optional_field(key: &str) -> bool {
    matches!(key, "paths.out_dir" | "paths.teacher" | "paths.cache" | "paths.data")
}
