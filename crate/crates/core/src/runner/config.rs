//! Experiment configuration: the attack × defense × task grid, parsed from
//! JSON and validated before anything runs.

use crate::attacks::AttackConfig;
use crate::defense::{DefenseDenoiser, DefenseMode, DefensePolicy};
use crate::error::{Error, Result};
use crate::models::DatasetConfig;
use crate::schedule::{LevelKind, NoiseLevel, NoiseSchedule};
use crate::tasks::TaskKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fraction of the dataset held out for evaluation, matching the training
/// split so grid metrics are measured on images the models never fit.
pub const EVAL_VAL_FRACTION: f64 = 0.2;

/// A noise level as written in config files: a kind plus an optional
/// explicit timestep window (only meaningful for `range`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub kind: LevelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
}

impl LevelSpec {
    pub fn none() -> Self {
        LevelSpec {
            kind: LevelKind::None,
            t_min: None,
            t_max: None,
        }
    }

    pub fn named(kind: LevelKind) -> Self {
        LevelSpec {
            kind,
            t_min: None,
            t_max: None,
        }
    }

    /// Resolves the spec to concrete timesteps on `schedule`. A bare
    /// `range` spans the low..high window; explicit bounds require both
    /// ends. Named levels reject explicit bounds.
    pub fn resolve(&self, schedule: &NoiseSchedule) -> Result<NoiseLevel> {
        match (self.kind, self.t_min, self.t_max) {
            (LevelKind::None, None, None) => Ok(NoiseLevel::none()),
            (LevelKind::Low, None, None) => NoiseLevel::low_for(schedule),
            (LevelKind::High, None, None) => NoiseLevel::high_for(schedule),
            (LevelKind::Range, None, None) => NoiseLevel::range_for(schedule),
            (LevelKind::Range, Some(lo), Some(hi)) => NoiseLevel::range(lo, hi, schedule),
            (LevelKind::Range, _, _) => Err(Error::Config(
                "range level needs both t_min and t_max, or neither".into(),
            )),
            (kind, _, _) => Err(Error::Config(format!(
                "level kind '{}' does not take explicit t_min/t_max",
                kind.as_str()
            ))),
        }
    }

    pub fn label(&self) -> String {
        match (self.kind, self.t_min, self.t_max) {
            (LevelKind::Range, Some(lo), Some(hi)) => format!("range{lo}-{hi}"),
            (kind, _, _) => kind.as_str().to_string(),
        }
    }
}

const KNOWN_METHODS: [&str; 4] = ["none", "pgd", "mifgsm", "sia"];

/// One attack row of the grid. `method: "none"` evaluates clean images;
/// the other methods start from their preset and apply the overrides here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: String,
    #[serde(default = "LevelSpec::none")]
    pub noise_level: LevelSpec,
    #[serde(default)]
    pub p_diffusion: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// Overrides the run-level attack seed for this row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl AttackSpec {
    pub fn clean() -> Self {
        AttackSpec {
            method: "none".into(),
            noise_level: LevelSpec::none(),
            p_diffusion: 0.0,
            budget: None,
            iterations: None,
            step_size: None,
            seed: None,
        }
    }

    pub fn preset(method: &str) -> Self {
        AttackSpec {
            method: method.into(),
            ..Self::clean()
        }
    }

    pub fn is_clean(&self) -> bool {
        self.method == "none"
    }

    pub fn validate(&self) -> Result<()> {
        if !KNOWN_METHODS.contains(&self.method.as_str()) {
            return Err(Error::Config(format!(
                "unknown attack method {:?}; expected one of {KNOWN_METHODS:?}",
                self.method
            )));
        }
        if !(0.0..=1.0).contains(&self.p_diffusion) {
            return Err(Error::Config(format!(
                "p_diffusion must lie in [0, 1], got {}",
                self.p_diffusion
            )));
        }
        if self.is_clean()
            && (self.p_diffusion != 0.0
                || self.noise_level.kind != LevelKind::None
                || self.budget.is_some()
                || self.iterations.is_some()
                || self.step_size.is_some())
        {
            return Err(Error::Config(
                "attack method 'none' takes no noise level, p_diffusion, or overrides".into(),
            ));
        }
        Ok(())
    }

    /// Builds the concrete attack. When `budget` or `iterations` are
    /// overridden without `step_size`, the step keeps the preset ratio
    /// `step = 4 * budget / iterations`, capped at the budget so short
    /// schedules stay valid.
    pub fn to_attack_config(&self, schedule: &NoiseSchedule, seed: u64) -> Result<AttackConfig> {
        if self.is_clean() {
            return Err(Error::Contract(
                "attack method 'none' has no attack config; evaluate clean images".into(),
            ));
        }
        let mut cfg = AttackConfig::preset(&self.method)?;
        cfg.noise_level = self.noise_level.resolve(schedule)?;
        cfg.p_diffusion = self.p_diffusion;
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        if let Some(s) = self.step_size {
            cfg.step_size = s;
        } else if cfg.budget > 0.0 {
            cfg.step_size = (cfg.budget / cfg.iterations as f64 * 4.0).min(cfg.budget);
        }
        cfg.seed = self.seed.unwrap_or(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Row label: `none`, `pgd`, or `pgd/low/p0.5` when diffusion is on.
    pub fn label(&self) -> String {
        if self.is_clean() {
            return "none".into();
        }
        if self.p_diffusion == 0.0 {
            return self.method.clone();
        }
        format!(
            "{}/{}/p{}",
            self.method,
            self.noise_level.label(),
            self.p_diffusion
        )
    }
}

/// One defense column of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub mode: DefenseMode,
    #[serde(default = "LevelSpec::none")]
    pub level: LevelSpec,
    #[serde(default = "one")]
    pub samples: usize,
    /// Overrides the run-level defense seed for this column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl DefenseSpec {
    pub fn none() -> Self {
        DefenseSpec {
            mode: DefenseMode::None,
            level: LevelSpec::none(),
            samples: 1,
            seed: None,
        }
    }

    pub fn denoise(kind: LevelKind) -> Self {
        DefenseSpec {
            mode: DefenseMode::Denoise,
            level: LevelSpec::named(kind),
            samples: 1,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("defense samples must be >= 1".into()));
        }
        match self.mode {
            DefenseMode::None if self.level.kind != LevelKind::None => Err(Error::Config(
                "defense mode 'none' takes no noise level".into(),
            )),
            DefenseMode::Denoise if self.level.kind == LevelKind::None => Err(Error::Config(
                "defense mode 'denoise' needs a noise level other than 'none'".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn to_policy(&self, schedule: &NoiseSchedule, seed: u64) -> Result<DefensePolicy> {
        let policy = DefensePolicy {
            mode: self.mode,
            level: self.level.resolve(schedule)?,
            samples: self.samples,
            seed: self.seed.unwrap_or(seed),
            denoiser: DefenseDenoiser::Learned,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn label(&self) -> String {
        match self.mode {
            DefenseMode::None => "none".into(),
            DefenseMode::Denoise => format!("denoise-{}", self.level.label()),
        }
    }
}

/// Run-level generator seeds. Required in every config: a run without
/// explicit seeds is not reproducible, so absence is an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub attack: u64,
    pub defense: u64,
}

/// The full grid description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub models_dir: PathBuf,
    /// JSON schedule to load; the default 1000-step linear one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_path: Option<PathBuf>,
    pub attacks: Vec<AttackSpec>,
    pub defenses: Vec<DefenseSpec>,
    pub tasks: Vec<TaskKind>,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    pub seeds: Seeds,
    /// Where results and reports land; a CLI `--out` flag may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_eval_size() -> usize {
    256
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.attacks.is_empty() {
            return Err(Error::Config("attacks list must not be empty".into()));
        }
        if self.defenses.is_empty() {
            return Err(Error::Config("defenses list must not be empty".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks list must not be empty".into()));
        }
        if self.eval_size == 0 {
            return Err(Error::Config("eval_size must be >= 1".into()));
        }
        for a in &self.attacks {
            a.validate()?;
        }
        for d in &self.defenses {
            d.validate()?;
        }
        Ok(())
    }

    /// Validates the parts that touch the filesystem.
    pub fn check_paths(&self) -> Result<()> {
        let meta = self.models_dir.join(crate::models::io::META_FILE);
        if !meta.is_file() {
            return Err(Error::Config(format!(
                "models_dir {:?} has no {}",
                self.models_dir,
                crate::models::io::META_FILE
            )));
        }
        if let Some(p) = &self.schedule_path {
            if !p.is_file() {
                return Err(Error::Config(format!("schedule_path {p:?} does not exist")));
            }
        }
        Ok(())
    }

    pub fn load_schedule(&self) -> Result<NoiseSchedule> {
        match &self.schedule_path {
            Some(p) => NoiseSchedule::from_json_file(p),
            None => Ok(NoiseSchedule::default_linear()),
        }
    }
}

/// Parses and validates a config file; parse errors carry line/column
/// positions, validation errors name the offending key.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    cfg.check_paths()?;
    Ok(cfg)
}
