//! Flat key/value experiment configuration with typed validation and a
//! resolved-defaults dump. A resolved config replays its run exactly.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, list-valued
//! keys hold comma-separated entries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::domain::SelectionPolicy;
use crate::mil::{derive_seed, EmptySelectionPolicy, TrainConfig};
use crate::nn::LrSchedule;
use crate::synth::SynthParams;

#[derive(Debug, Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Ordered key/value pairs as they appear in a config file.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pairs: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(
                    "<file>",
                    format!("line {}: expected `key = value`", lineno + 1),
                )
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if raw.index.contains_key(&key) {
                return Err(ConfigError::new(&key, "duplicate key"));
            }
            raw.index.insert(key.clone(), raw.pairs.len());
            raw.pairs.push((key, value));
        }
        Ok(raw)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.pairs[i].1.as_str())
    }

    pub fn set(&mut self, key: &str, value: String) {
        if let Some(&i) = self.index.get(key) {
            self.pairs[i].1 = value;
        } else {
            self.index.insert(key.to_string(), self.pairs.len());
            self.pairs.push((key.to_string(), value));
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError::new(key, "missing required field"))
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, ConfigError> {
    value
        .parse::<T>()
        .map_err(|_| ConfigError::new(key, format!("`{value}` is not {what}")))
}

fn get_or<T: std::str::FromStr>(
    raw: &RawConfig,
    key: &str,
    what: &str,
    default: T,
) -> Result<T, ConfigError> {
    match raw.get(key) {
        Some(v) => parse_as(key, v, what),
        None => Ok(default),
    }
}

fn get_bool(raw: &RawConfig, key: &str, default: bool) -> Result<bool, ConfigError> {
    match raw.get(key) {
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(other) => Err(ConfigError::new(key, format!("`{other}` is not a bool"))),
        None => Ok(default),
    }
}

fn parse_list<T: std::str::FromStr>(
    key: &str,
    value: &str,
    what: &str,
) -> Result<Vec<T>, ConfigError> {
    if value.trim().is_empty() {
        return Err(ConfigError::new(key, "list is empty"));
    }
    value
        .split(',')
        .map(|s| parse_as(key, s.trim(), what))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MnistMil,
    SyntheticTiles,
}

impl Task {
    fn parse(key: &str, value: &str) -> Result<Self, ConfigError> {
        match value {
            "mnist_mil" => Ok(Task::MnistMil),
            "synthetic_tiles" => Ok(Task::SyntheticTiles),
            other => Err(ConfigError::new(
                key,
                format!("unknown task `{other}` (mnist_mil | synthetic_tiles)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::MnistMil => "mnist_mil",
            Task::SyntheticTiles => "synthetic_tiles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Camel2,
    Camel2Ratio,
    Camel2Slide,
    Camel2SlideRatio,
    MilMax,
    Fsb,
}

impl Variant {
    fn parse(key: &str, value: &str) -> Result<Self, ConfigError> {
        match value {
            "camel2" => Ok(Variant::Camel2),
            "camel2_ratio" => Ok(Variant::Camel2Ratio),
            "camel2_slide" => Ok(Variant::Camel2Slide),
            "camel2_slide_ratio" => Ok(Variant::Camel2SlideRatio),
            "mil_max" => Ok(Variant::MilMax),
            "fsb" => Ok(Variant::Fsb),
            other => Err(ConfigError::new(
                key,
                format!(
                    "unknown variant `{other}` (camel2 | camel2_ratio | camel2_slide | \
                     camel2_slide_ratio | mil_max | fsb)"
                ),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Camel2 => "camel2",
            Variant::Camel2Ratio => "camel2_ratio",
            Variant::Camel2Slide => "camel2_slide",
            Variant::Camel2SlideRatio => "camel2_slide_ratio",
            Variant::MilMax => "mil_max",
            Variant::Fsb => "fsb",
        }
    }

    pub fn is_slide(&self) -> bool {
        matches!(self, Variant::Camel2Slide | Variant::Camel2SlideRatio)
    }

    pub fn uses_ratio(&self) -> bool {
        matches!(self, Variant::Camel2Ratio | Variant::Camel2SlideRatio)
    }

    /// Selection policy for the weakly supervised variants; `None` for the
    /// instance-supervised baseline.
    pub fn policy(&self, t_percent: f64) -> Option<SelectionPolicy> {
        match self {
            Variant::Camel2 | Variant::Camel2Slide => Some(SelectionPolicy::TopFixed { t_percent }),
            Variant::Camel2Ratio | Variant::Camel2SlideRatio => Some(SelectionPolicy::PerBagRatio),
            Variant::MilMax => Some(SelectionPolicy::MaxInstance),
            Variant::Fsb => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HarvestMode {
    /// Harvest with the full checkpoint ensemble.
    Ensemble,
    /// Harvest with the final checkpoint only.
    Final,
}

impl HarvestMode {
    fn parse(key: &str, value: &str) -> Result<Self, ConfigError> {
        match value {
            "ensemble" => Ok(HarvestMode::Ensemble),
            "final" => Ok(HarvestMode::Final),
            other => Err(ConfigError::new(
                key,
                format!("unknown harvest mode `{other}` (ensemble | final)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HarvestMode::Ensemble => "ensemble",
            HarvestMode::Final => "final",
        }
    }
}

/// Fully resolved description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub task: Task,
    pub variant: Variant,
    pub t_percent: f64,
    pub retrain: bool,
    pub epochs: usize,
    pub pos_bags_per_step: usize,
    pub neg_bags_per_step: usize,
    pub checkpoint_epochs: Vec<usize>,
    pub lr_initial: f64,
    pub lr_halve_every: usize,
    pub seed: u64,
    /// Per-bag instance cap; 0 disables capping.
    pub slide_cap: usize,
    pub retrain_threshold: f64,
    pub harvest_mode: HarvestMode,
    pub skip_empty_selection: bool,
    pub strict_harvest: bool,
    pub hidden: Vec<usize>,
    pub fsb_batch: usize,
    pub eval_threshold: f64,
    pub harvest_threshold: f64,
    /// Standardize features per dimension with training-set statistics.
    pub standardize: bool,
    pub out_dir: PathBuf,

    // mnist_mil task
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub size: usize,
    pub target: u8,
    pub n_pos_bags: usize,
    pub n_neg_bags: usize,
    pub pos_count_max: usize,

    // synthetic_tiles task
    pub slides_dir: String,
    pub tile: usize,
    pub instance: usize,
    pub train_slides: usize,
}

/// Every key the run/sweep schema accepts, in resolved-dump order.
const RUN_KEYS: &[&str] = &[
    "task",
    "variant",
    "t_percent",
    "retrain",
    "epochs",
    "pos_bags_per_step",
    "neg_bags_per_step",
    "checkpoint_epochs",
    "lr_initial",
    "lr_halve_every",
    "seed",
    "slide_cap",
    "retrain_threshold",
    "harvest_mode",
    "skip_empty_selection",
    "strict_harvest",
    "hidden",
    "fsb_batch",
    "eval_threshold",
    "harvest_threshold",
    "standardize",
    "out_dir",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "size",
    "target",
    "n_pos_bags",
    "n_neg_bags",
    "pos_count_max",
    "slides_dir",
    "tile",
    "instance",
    "train_slides",
];

impl ExperimentConfig {
    /// Resolves and validates a raw config, applying CLI overrides for the
    /// output directory and seed.
    pub fn resolve(
        raw: &RawConfig,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
    ) -> Result<Self, ConfigError> {
        for key in raw.keys() {
            if !RUN_KEYS.contains(&key) {
                return Err(ConfigError::new(key, "unknown field"));
            }
        }

        let task = Task::parse("task", raw.require("task")?)?;
        let variant = Variant::parse("variant", raw.require("variant")?)?;
        let t_percent: f64 = get_or(raw, "t_percent", "a number", 10.0)?;
        if !(t_percent > 0.0 && t_percent <= 100.0) {
            return Err(ConfigError::new("t_percent", "must lie in (0, 100]"));
        }
        let retrain = get_bool(raw, "retrain", true)?;
        if variant == Variant::Fsb && retrain {
            return Err(ConfigError::new(
                "retrain",
                "not applicable to the fsb variant; set retrain = false",
            ));
        }
        let epochs: usize = get_or(raw, "epochs", "an integer", 20)?;
        let checkpoint_epochs = match raw.get("checkpoint_epochs") {
            Some(v) => parse_list("checkpoint_epochs", v, "an integer")?,
            None => vec![12, 14, 16, 18, 20],
        };
        let default_cap = if variant.is_slide() { 512 } else { 0 };
        let seed = match seed_override {
            Some(s) => s,
            None => get_or(raw, "seed", "an integer", 0)?,
        };
        let out_dir = match out_override {
            Some(dir) => dir,
            None => PathBuf::from(raw.require("out_dir")?),
        };
        let hidden = match raw.get("hidden") {
            Some(v) => parse_list("hidden", v, "an integer")?,
            None => vec![256],
        };
        if hidden.iter().any(|&h| h == 0) {
            return Err(ConfigError::new("hidden", "zero-width layer"));
        }

        let config = ExperimentConfig {
            task,
            variant,
            t_percent,
            retrain,
            epochs,
            pos_bags_per_step: get_or(raw, "pos_bags_per_step", "an integer", 2)?,
            neg_bags_per_step: get_or(raw, "neg_bags_per_step", "an integer", 2)?,
            checkpoint_epochs,
            lr_initial: get_or(raw, "lr_initial", "a number", 0.001)?,
            lr_halve_every: get_or(raw, "lr_halve_every", "an integer", 5)?,
            seed,
            slide_cap: get_or(raw, "slide_cap", "an integer", default_cap)?,
            retrain_threshold: get_or(raw, "retrain_threshold", "a number", 0.20)?,
            harvest_mode: match raw.get("harvest_mode") {
                Some(v) => HarvestMode::parse("harvest_mode", v)?,
                None => HarvestMode::Ensemble,
            },
            skip_empty_selection: get_bool(raw, "skip_empty_selection", false)?,
            strict_harvest: get_bool(raw, "strict_harvest", false)?,
            hidden,
            fsb_batch: get_or(raw, "fsb_batch", "an integer", 256)?,
            eval_threshold: get_or(raw, "eval_threshold", "a number", 0.5)?,
            harvest_threshold: get_or(raw, "harvest_threshold", "a number", 0.5)?,
            standardize: get_bool(raw, "standardize", false)?,
            out_dir,
            train_images: raw.get("train_images").unwrap_or_default().to_string(),
            train_labels: raw.get("train_labels").unwrap_or_default().to_string(),
            test_images: raw.get("test_images").unwrap_or_default().to_string(),
            test_labels: raw.get("test_labels").unwrap_or_default().to_string(),
            size: get_or(raw, "size", "an integer", 1000)?,
            target: get_or(raw, "target", "an integer", 0)?,
            n_pos_bags: get_or(raw, "n_pos_bags", "an integer", 100)?,
            n_neg_bags: get_or(raw, "n_neg_bags", "an integer", 100)?,
            pos_count_max: get_or(raw, "pos_count_max", "an integer", 1000)?,
            slides_dir: raw.get("slides_dir").unwrap_or_default().to_string(),
            tile: get_or(raw, "tile", "an integer", 256)?,
            instance: get_or(raw, "instance", "an integer", 32)?,
            train_slides: get_or(raw, "train_slides", "an integer", 0)?,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.train_config(self.seed)
            .validate()
            .map_err(|e| ConfigError::new("epochs", e.to_string()))?;
        match self.task {
            Task::MnistMil => {
                for (key, value) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if value.is_empty() {
                        return Err(ConfigError::new(key, "missing required field"));
                    }
                }
                if self.size == 0 {
                    return Err(ConfigError::new("size", "must be at least 1"));
                }
                if self.target > 9 {
                    return Err(ConfigError::new("target", "must be a digit 0-9"));
                }
                if self.pos_count_max == 0 || self.pos_count_max > self.size {
                    return Err(ConfigError::new("pos_count_max", "must lie in 1..=size"));
                }
                if self.n_pos_bags < self.pos_bags_per_step
                    || self.n_neg_bags < self.neg_bags_per_step
                {
                    return Err(ConfigError::new(
                        "n_pos_bags",
                        "need at least one step's worth of bags of each kind",
                    ));
                }
            }
            Task::SyntheticTiles => {
                if self.slides_dir.is_empty() {
                    return Err(ConfigError::new("slides_dir", "missing required field"));
                }
                if self.train_slides == 0 {
                    return Err(ConfigError::new("train_slides", "must be at least 1"));
                }
                if self.instance == 0 || self.tile % self.instance != 0 {
                    return Err(ConfigError::new(
                        "instance",
                        "must divide the tile size evenly",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            halve_every: self.lr_halve_every,
        }
    }

    /// Engine config for one training phase with the given phase seed.
    pub fn train_config(&self, phase_seed: u64) -> TrainConfig {
        TrainConfig {
            policy: self
                .variant
                .policy(self.t_percent)
                .unwrap_or(SelectionPolicy::AllInstances),
            epochs: self.epochs,
            pos_bags_per_step: self.pos_bags_per_step,
            neg_bags_per_step: self.neg_bags_per_step,
            checkpoint_epochs: self.checkpoint_epochs.clone(),
            schedule: self.schedule(),
            seed: phase_seed,
            slide_cap: (self.slide_cap > 0).then_some(self.slide_cap),
            retrain_threshold: self.retrain_threshold,
            on_empty_selection: if self.skip_empty_selection {
                EmptySelectionPolicy::Skip
            } else {
                EmptySelectionPolicy::Fail
            },
            strict_harvest: self.strict_harvest,
            instances_per_step: self.fsb_batch,
            trace_selections: false,
        }
    }

    fn join<T: std::fmt::Display>(items: &[T]) -> String {
        items
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Dumps every field explicitly, in schema order. Parsing the dump yields
    /// an identical config, which is what makes runs replayable.
    pub fn to_resolved_string(&self) -> String {
        let mut out = String::new();
        let mut put = |key: &str, value: String| {
            writeln!(out, "{key} = {value}").unwrap();
        };
        put("task", self.task.as_str().into());
        put("variant", self.variant.as_str().into());
        put("t_percent", self.t_percent.to_string());
        put("retrain", self.retrain.to_string());
        put("epochs", self.epochs.to_string());
        put("pos_bags_per_step", self.pos_bags_per_step.to_string());
        put("neg_bags_per_step", self.neg_bags_per_step.to_string());
        put("checkpoint_epochs", Self::join(&self.checkpoint_epochs));
        put("lr_initial", self.lr_initial.to_string());
        put("lr_halve_every", self.lr_halve_every.to_string());
        put("seed", self.seed.to_string());
        put("slide_cap", self.slide_cap.to_string());
        put("retrain_threshold", self.retrain_threshold.to_string());
        put("harvest_mode", self.harvest_mode.as_str().into());
        put("skip_empty_selection", self.skip_empty_selection.to_string());
        put("strict_harvest", self.strict_harvest.to_string());
        put("hidden", Self::join(&self.hidden));
        put("fsb_batch", self.fsb_batch.to_string());
        put("eval_threshold", self.eval_threshold.to_string());
        put("harvest_threshold", self.harvest_threshold.to_string());
        put("standardize", self.standardize.to_string());
        put("out_dir", self.out_dir.display().to_string());
        match self.task {
            Task::MnistMil => {
                put("train_images", self.train_images.clone());
                put("train_labels", self.train_labels.clone());
                put("test_images", self.test_images.clone());
                put("test_labels", self.test_labels.clone());
                put("size", self.size.to_string());
                put("target", self.target.to_string());
                put("n_pos_bags", self.n_pos_bags.to_string());
                put("n_neg_bags", self.n_neg_bags.to_string());
                put("pos_count_max", self.pos_count_max.to_string());
            }
            Task::SyntheticTiles => {
                put("slides_dir", self.slides_dir.clone());
                put("tile", self.tile.to_string());
                put("instance", self.instance.to_string());
                put("train_slides", self.train_slides.to_string());
            }
        }
        out
    }
}

/// One sweep cell: the scalar overrides applied to the base config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCombo {
    pub size: usize,
    pub target: u8,
    pub t_percent: f64,
}

/// Cartesian sweep over list-valued `size`, `target`, and `t_percent`.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub base: RawConfig,
    pub combos: Vec<SweepCombo>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl SweepPlan {
    pub fn resolve(raw: &RawConfig) -> Result<Self, ConfigError> {
        let task = Task::parse("task", raw.require("task")?)?;
        if task != Task::MnistMil {
            return Err(ConfigError::new(
                "task",
                "sweep supports the mnist_mil task only",
            ));
        }
        let sizes: Vec<usize> = match raw.get("size") {
            Some(v) => parse_list("size", v, "an integer")?,
            None => vec![1000],
        };
        let targets: Vec<u8> = match raw.get("target") {
            Some(v) => parse_list("target", v, "an integer")?,
            None => vec![0],
        };
        let ts: Vec<f64> = match raw.get("t_percent") {
            Some(v) => parse_list("t_percent", v, "a number")?,
            None => vec![10.0],
        };
        let seed: u64 = get_or(raw, "seed", "an integer", 0)?;
        let out_dir = PathBuf::from(raw.require("out_dir")?);

        let mut combos = Vec::new();
        for &size in &sizes {
            for &target in &targets {
                for &t_percent in &ts {
                    combos.push(SweepCombo {
                        size,
                        target,
                        t_percent,
                    });
                }
            }
        }

        // Resolve the first child eagerly so schema errors surface before
        // any training starts.
        let plan = SweepPlan {
            base: raw.clone(),
            combos,
            seed,
            out_dir,
        };
        plan.child_config(0)?;
        Ok(plan)
    }

    /// Child seeds mix the parent seed with the combination index through
    /// SplitMix64: `child = derive_seed(parent, index + 1)`.
    pub fn child_config(&self, index: usize) -> Result<ExperimentConfig, ConfigError> {
        let combo = self.combos[index];
        let mut raw = self.base.clone();
        raw.set("size", combo.size.to_string());
        raw.set("target", combo.target.to_string());
        raw.set("t_percent", combo.t_percent.to_string());
        raw.set("seed", derive_seed(self.seed, index as u64 + 1).to_string());
        let child_dir = self.out_dir.join(format!(
            "run_{index:03}_size{}_target{}",
            combo.size, combo.target
        ));
        raw.set("out_dir", child_dir.display().to_string());
        ExperimentConfig::resolve(&raw, None, None)
    }
}

const SYNTH_KEYS: &[&str] = &[
    "out_dir",
    "pos_slides",
    "neg_slides",
    "slide",
    "tile",
    "instance",
    "min_tissue",
    "pos_threshold",
    "seed",
];

/// Resolved parameters for the slide synthesizer verb.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub params: SynthParams,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl SynthConfig {
    pub fn resolve(raw: &RawConfig) -> Result<Self, ConfigError> {
        for key in raw.keys() {
            if !SYNTH_KEYS.contains(&key) {
                return Err(ConfigError::new(key, "unknown field"));
            }
        }
        Ok(SynthConfig {
            params: SynthParams {
                n_pos_slides: get_or(raw, "pos_slides", "an integer", 4)?,
                n_neg_slides: get_or(raw, "neg_slides", "an integer", 4)?,
                slide: get_or(raw, "slide", "an integer", 1024)?,
                tile: get_or(raw, "tile", "an integer", 256)?,
                instance: get_or(raw, "instance", "an integer", 32)?,
                min_tissue: get_or(raw, "min_tissue", "a number", 0.10)?,
                pos_threshold: get_or(raw, "pos_threshold", "a number", 0.20)?,
            },
            seed: get_or(raw, "seed", "an integer", 0)?,
            out_dir: PathBuf::from(raw.require("out_dir")?),
        })
    }
}
