#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use qlkplan::config::{GameConfig, SolverConfig};
use qlkplan::sim::{EpisodeTrace, Simulator};
use qlkplan::{solve_qlk, Game, PlannerParams, QlkTables};

pub fn desk() -> (Arc<Game>, Arc<QlkTables>) {
    static CELL: OnceLock<(Arc<Game>, Arc<QlkTables>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let game = Game::new(GameConfig::desk());
        let tables = solve_qlk(&game, &SolverConfig::default()).unwrap();
        (Arc::new(game), Arc::new(tables))
    })
    .clone()
}

/// Desk simulator whose planner stops after `sims` simulations.
pub fn desk_sim(sims: usize) -> Simulator {
    let (game, tables) = desk();
    Simulator::new(game, tables, PlannerParams { budget_ms: 0, max_simulations: Some(sims), ..Default::default() }).unwrap()
}

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../protocol/fixtures")
}

pub fn scrub(mut t: EpisodeTrace) -> EpisodeTrace {
    for s in &mut t.steps {
        if let Some(d) = s.diagnostics.as_mut() {
            d.elapsed_ms = 0.0;
        }
    }
    t
}
