//! Scenario configuration document.
//!
//! A config file is TOML with up to four tables: `[game]`, `[solver]`,
//! `[planner]` and `[scenario]`. Every field has a default, so an empty file
//! is a valid config. `docs/CONFIG.md` lists the full schema.

use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{Axis, Grid};
use crate::planner::PlannerParams;
use crate::sim::ScenarioSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// Number of reward features.
pub const NUM_FEATURES: usize = 7;

/// Named feature weights. Field order is the feature order of
/// [`crate::game::Feature`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub collision: f64,
    pub robot_progress: f64,
    pub human_progress: f64,
    pub target_lane: f64,
    pub merged: f64,
    pub lateral_comfort: f64,
    pub time: f64,
    /// Treat the collision weight as zero. The planner sets this for the
    /// robot because safety is enforced by the chance constraint instead.
    pub deactivate_safety_feature: bool,
}

impl RewardWeights {
    pub fn from_array(w: [f64; NUM_FEATURES]) -> Self {
        Self {
            collision: w[0],
            robot_progress: w[1],
            human_progress: w[2],
            target_lane: w[3],
            merged: w[4],
            lateral_comfort: w[5],
            time: w[6],
            deactivate_safety_feature: false,
        }
    }

    /// Effective weight vector, with the safety weight zeroed when deactivated.
    pub fn as_array(&self) -> [f64; NUM_FEATURES] {
        let collision = if self.deactivate_safety_feature { 0.0 } else { self.collision };
        [
            collision,
            self.robot_progress,
            self.human_progress,
            self.target_lane,
            self.merged,
            self.lateral_comfort,
            self.time,
        ]
    }

    pub fn without_safety(mut self) -> Self {
        self.deactivate_safety_feature = true;
        self
    }

    pub fn default_robot() -> Self {
        Self {
            collision: -100.0,
            robot_progress: 2.0,
            human_progress: 0.0,
            target_lane: 0.0,
            merged: 20.0,
            lateral_comfort: 0.5,
            time: -2.0,
            deactivate_safety_feature: false,
        }
    }

    pub fn default_human() -> Self {
        Self {
            collision: -100.0,
            robot_progress: 0.0,
            human_progress: 6.0,
            target_lane: 0.0,
            merged: 0.0,
            lateral_comfort: 0.0,
            time: -6.0,
            deactivate_safety_feature: false,
        }
    }
}

impl Add for RewardWeights {
    type Output = RewardWeights;

    fn add(self, o: RewardWeights) -> RewardWeights {
        let a = self.as_array();
        let b = o.as_array();
        let mut out = [0.0; NUM_FEATURES];
        for i in 0..NUM_FEATURES {
            out[i] = a[i] + b[i];
        }
        RewardWeights::from_array(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarGeometry {
    pub length: f64,
    pub width: f64,
}

impl Default for CarGeometry {
    fn default() -> Self {
        Self { length: 5.0, width: 1.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionConfig {
    /// Longitudinal accelerations (m/s²) shared by both cars, in tie-break order.
    pub accelerations: Vec<f64>,
    /// Lateral speed (m/s) of the robot's move-toward-upper-lane command.
    pub lateral_speed: f64,
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self { accelerations: vec![-8.0, 0.0, 8.0], lateral_speed: 1.44 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub x: Axis,
    pub y: Axis,
    pub v: Axis,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x: Axis::new(0.0, 2.0, 40),
            y: Axis::new(0.0, 0.72, 6),
            v: Axis::new(0.0, 4.0, 6),
        }
    }
}

impl Default for Axis {
    fn default() -> Self {
        Axis::new(0.0, 1.0, 1)
    }
}

impl GridConfig {
    pub fn grid(&self) -> Grid {
        Grid { x: self.x, y: self.y, v: self.v }
    }

    /// Smaller grid used for fast experiments (30×6×30×4×4, road 58 m, top speed 12 m/s).
    pub fn desk() -> Self {
        Self {
            x: Axis::new(0.0, 2.0, 30),
            y: Axis::new(0.0, 0.72, 6),
            v: Axis::new(0.0, 4.0, 4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    /// Sampling period (s).
    pub dt: f64,
    pub grid: GridConfig,
    pub car: CarGeometry,
    pub actions: ActionConfig,
    pub robot_rewards: RewardWeights,
    pub human_rewards: RewardWeights,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            grid: GridConfig::default(),
            car: CarGeometry::default(),
            actions: ActionConfig::default(),
            robot_rewards: RewardWeights::default_robot(),
            human_rewards: RewardWeights::default_human(),
        }
    }
}

impl GameConfig {
    pub fn desk() -> Self {
        Self { grid: GridConfig::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        for (name, axis) in [("x", self.grid.x), ("y", self.grid.y), ("v", self.grid.v)] {
            if axis.count == 0 || axis.count > u16::MAX as usize {
                return invalid(format!("grid.{name}.count must be in 1..=65535"));
            }
            if !(axis.step > 0.0 && axis.step.is_finite() && axis.min.is_finite()) {
                return invalid(format!("grid.{name} needs a finite min and positive step"));
            }
        }
        if self.grid.y.count < 2 {
            return invalid("grid.y needs at least two cells (lower and upper lane)");
        }
        if self.grid.v.min < 0.0 {
            return invalid("grid.v must not contain negative speeds");
        }
        if self.actions.accelerations.is_empty() {
            return invalid("actions.accelerations must not be empty");
        }
        if self.actions.accelerations.len() > 16 {
            return invalid("at most 16 accelerations are supported");
        }
        if self.actions.accelerations.iter().any(|a| !a.is_finite()) {
            return invalid("actions.accelerations must be finite");
        }
        if !(self.actions.lateral_speed > 0.0 && self.actions.lateral_speed.is_finite()) {
            return invalid("actions.lateral_speed must be positive");
        }
        if !(self.car.length > 0.0 && self.car.width > 0.0) {
            return invalid("car dimensions must be positive");
        }
        for w in [&self.robot_rewards, &self.human_rewards] {
            if w.as_array().iter().any(|x| !x.is_finite()) {
                return invalid("reward weights must be finite");
            }
        }
        Ok(())
    }
}

/// How the non-strategic level-0 agent picks its action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level0Mode {
    /// Best single-agent plan with the opponent frozen in place as an obstacle.
    #[default]
    StaticObstacle,
    /// Best single-agent plan that ignores the opponent entirely (never yields).
    IgnoreOpponent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub k_max: usize,
    pub lambdas: Vec<f64>,
    pub gamma: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub level0: Level0Mode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k_max: 2,
            lambdas: vec![0.5, 0.8, 1.0],
            gamma: 0.95,
            tolerance: 1e-6,
            max_sweeps: 10_000,
            level0: Level0Mode::StaticObstacle,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k_max == 0 {
            return invalid("solver.k_max must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid(format!("solver.gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(self.tolerance > 0.0) {
            return invalid("solver.tolerance must be positive");
        }
        if self.max_sweeps == 0 {
            return invalid("solver.max_sweeps must be positive");
        }
        Ok(())
    }
}

/// The whole config document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub game: GameConfig,
    pub solver: SolverConfig,
    pub planner: PlannerParams,
    pub scenario: ScenarioSpec,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.game.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything the solved tables depend on.
    pub fn tables_hash(&self) -> String {
        tables_hash(&self.game, &self.solver)
    }
}

/// SHA-256 over the canonical JSON of the game and solver settings.
pub fn tables_hash(game: &GameConfig, solver: &SolverConfig) -> String {
    let canon = serde_json::to_vec(&(game, solver)).expect("config serializes");
    hex::encode(Sha256::digest(&canon))
}
