//! Game-theoretic merge planning with quantal level-k human models.
//!
//! * [`game`]: the discretized two-car merge game.
//! * [`qlk`]: quantal level-k policies and values by dynamic programming.
//! * [`tables`]: on-disk format for solved tables.
//! * [`belief`]: belief prediction and Bayesian update over the human's latent state.
//! * [`planner`]: open-loop chance-constrained Monte-Carlo belief tree search.
//! * [`sim`]: episodes, batches, metrics and traces.

pub mod belief;
pub mod config;
pub mod game;
pub mod grid;
pub mod planner;
pub mod qlk;
pub mod sim;
pub mod tables;

pub use belief::{Belief, BeliefEngine, LatentSpace, PredictedBelief};
pub use config::{Config, GameConfig, RewardWeights, SolverConfig};
pub use game::{ActionPair, Agent, Game};
pub use grid::{Grid, JointState};
pub use planner::{Planner, PlannerParams};
pub use qlk::{solve_qlk, LatentState, PolicyTable, QlkTables, ValueTable};
