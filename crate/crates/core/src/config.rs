//! Run configuration: one TOML file with a section per subsystem.
//!
//! Every section is optional and falls back to the built-in defaults.
//! Unknown keys are rejected, and [`RunConfig::validate`] reports the dotted
//! path of the first offending value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{ActionTable, EpisodeConfig, RewardConfig};
use crate::dqn::{sha256_hex, DqnHyper};
use crate::error::{Error, Result};
use crate::plant::{Mismatch, PlantParams, SurrogateParams};
use crate::transfer::SweepGrid;

/// Which mismatch the surrogate plant applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Named preset: `default`, `ideal` or `none`.
    pub preset: String,
    /// Explicit parasitics; replaces the preset when set.
    pub mismatch: Option<Mismatch>,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            mismatch: None,
        }
    }
}

impl SurrogateConfig {
    pub fn from_preset(name: &str) -> Self {
        Self {
            preset: name.into(),
            mismatch: None,
        }
    }

    /// Identifier recorded in transfer artifacts.
    pub fn preset_id(&self) -> String {
        match self.mismatch {
            Some(_) => format!("{}+custom", self.preset),
            None => self.preset.clone(),
        }
    }

    pub fn resolve(&self) -> Result<Mismatch> {
        if let Some(m) = self.mismatch {
            return Ok(m);
        }
        Mismatch::preset(&self.preset).ok_or_else(|| {
            Error::invalid(
                "surrogate.preset",
                format!(
                    "unknown preset `{}` (expected default, ideal or none)",
                    self.preset
                ),
            )
        })
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        self.resolve()?.validate(&format!("{prefix}.mismatch"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub episodes: usize,
    /// Episodes between greedy evaluations on the ideal scenario suite.
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            eval_every: 10,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::invalid(format!("{prefix}.episodes"), "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid(
                format!("{prefix}.eval_every"),
                "must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Load-step timing of one scenario: base load, stepped load from `step_at`,
/// back to base at `return_at`, run until `duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTiming {
    pub step_at: f64,
    pub return_at: f64,
    pub duration: f64,
}

impl StepTiming {
    fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.step_at > 0.0 && self.step_at < self.return_at && self.return_at < self.duration)
            || !self.duration.is_finite()
        {
            return Err(Error::invalid(
                prefix,
                "need 0 < step_at < return_at < duration",
            ));
        }
        Ok(())
    }
}

/// The load-step evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSuite {
    pub base_power: f64,
    pub step_powers: Vec<f64>,
    pub ideal_timing: StepTiming,
    pub surrogate_timing: StepTiming,
    /// Half-width of the settling band around the reference (V).
    pub settle_band: f64,
    /// Trailing fraction of each segment used for steady-state metrics.
    pub steady_fraction: f64,
}

impl Default for ScenarioSuite {
    fn default() -> Self {
        Self {
            base_power: 200.0,
            step_powers: vec![500.0, 800.0, 1000.0],
            ideal_timing: StepTiming {
                step_at: 0.14,
                return_at: 0.2,
                duration: 0.3,
            },
            surrogate_timing: StepTiming {
                step_at: 0.4,
                return_at: 0.8,
                duration: 1.2,
            },
            settle_band: 1.0,
            steady_fraction: 0.2,
        }
    }
}

impl ScenarioSuite {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.base_power.is_finite() && self.base_power >= 0.0) {
            return Err(Error::invalid(
                format!("{prefix}.base_power"),
                "must be >= 0",
            ));
        }
        if self.step_powers.is_empty() {
            return Err(Error::invalid(
                format!("{prefix}.step_powers"),
                "must not be empty",
            ));
        }
        if let Some(k) = self
            .step_powers
            .iter()
            .position(|p| !(p.is_finite() && *p >= 0.0))
        {
            return Err(Error::invalid(
                format!("{prefix}.step_powers[{k}]"),
                "must be >= 0",
            ));
        }
        self.ideal_timing
            .validate(&format!("{prefix}.ideal_timing"))?;
        self.surrogate_timing
            .validate(&format!("{prefix}.surrogate_timing"))?;
        if !(self.settle_band.is_finite() && self.settle_band > 0.0) {
            return Err(Error::invalid(
                format!("{prefix}.settle_band"),
                "must be > 0",
            ));
        }
        if !(self.steady_fraction > 0.0 && self.steady_fraction <= 1.0) {
            return Err(Error::invalid(
                format!("{prefix}.steady_fraction"),
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// Everything a run needs; see the module docs for the file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; excluded from the config hash.
    pub out_dir: Option<PathBuf>,
    pub plant: PlantParams,
    pub surrogate: SurrogateConfig,
    pub dqn: DqnHyper,
    pub reward: RewardConfig,
    pub actions: ActionTable,
    pub episode: EpisodeConfig,
    pub training: TrainingConfig,
    pub sweep: SweepGrid,
    pub scenarios: ScenarioSuite,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            plant: PlantParams::default(),
            surrogate: SurrogateConfig::default(),
            dqn: DqnHyper::default(),
            reward: RewardConfig::default(),
            actions: ActionTable::default(),
            episode: EpisodeConfig::default(),
            training: TrainingConfig::default(),
            sweep: SweepGrid::default(),
            scenarios: ScenarioSuite::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => Error::invalid(locate(text, span.start), msg),
                None => Error::invalid("<config>", msg),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Invalid { path: key, msg } => {
                Error::invalid(key, format!("{msg} (in {})", path.display()))
            }
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate("plant")?;
        self.surrogate.validate("surrogate")?;
        self.dqn.validate("dqn")?;
        self.reward.validate("reward")?;
        self.actions.validate("actions")?;
        self.episode.validate("episode", &self.plant)?;
        self.training.validate("training")?;
        self.sweep.validate("sweep")?;
        self.scenarios.validate("scenarios")?;
        Ok(())
    }

    pub fn surrogate_params(&self) -> Result<SurrogateParams> {
        Ok(SurrogateParams::new(self.plant, self.surrogate.resolve()?))
    }

    /// SHA-256 of the canonical JSON form, output location excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        sha256_hex(&serde_json::to_vec(&canonical).expect("config serializes to JSON"))
    }
}

/// `line L, column C` for a byte offset.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, str::len) + 1;
    format!("line {line}, column {col}")
}
