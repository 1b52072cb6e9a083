#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

pub mod oracle;

use qlkplan::belief::posterior;
use qlkplan::config::{GameConfig, SolverConfig};
use qlkplan::grid::JointState;
use qlkplan::qlk::{PolicyTable, QlkTables, ValueTable};
use qlkplan::{solve_qlk, Agent, Belief, BeliefEngine, Game};

/// Desk game and tables with Λ = {0.5, 1.0}, shared across tests in a binary.
pub fn desk() -> (Arc<Game>, Arc<QlkTables>) {
    static CELL: OnceLock<(Arc<Game>, Arc<QlkTables>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let game = Game::new(GameConfig::desk());
        let tables = solve_qlk(&game, &SolverConfig { lambdas: vec![0.5, 1.0], ..Default::default() }).unwrap();
        (Arc::new(game), Arc::new(tables))
    })
    .clone()
}

pub fn idx(game: &Game, xr: usize, yr: usize, xh: usize, vr: usize, vh: usize) -> usize {
    game.grid().index(&JointState::new(xr, yr, xh, vr, vh))
}

/// Tables whose human policies are the same row at every state and whose
/// robot values are constants per level.
pub struct Fabricated {
    pub humans: Vec<(usize, f64, Vec<f64>)>,
    pub robot_values: Vec<(usize, f64)>,
}

impl Fabricated {
    pub fn build(&self, game: &Game) -> QlkTables {
        let n = game.num_states();
        let nh = game.num_human_actions();
        let nr = game.num_robot_actions();
        let policy = |agent: Agent, level: usize, lambda: f64, row: &[f64]| PolicyTable {
            agent,
            level,
            lambda,
            num_actions: row.len(),
            probs: row.repeat(n),
        };
        let mut maintain = vec![0.0; nh];
        maintain[game.maintain_action()] = 1.0;
        let mut robot0 = vec![0.0; nr];
        robot0[1] = 1.0;
        QlkTables {
            config_hash: "fabricated".into(),
            solver: SolverConfig::default(),
            level0: [policy(Agent::Robot, 0, 0.0, &robot0), policy(Agent::Human, 0, 0.0, &maintain)],
            policies: self.humans.iter().map(|(k, l, row)| policy(Agent::Human, *k, *l, row)).collect(),
            values: self
                .robot_values
                .iter()
                .map(|&(level, v)| ValueTable { agent: Agent::Robot, level, lambda: 1.0, values: vec![v; n] })
                .collect(),
        }
    }
}

/// Exhaustive open-loop value of a fixed action sequence for a single
/// latent hypothesis: Σ over observation paths of discounted step reward,
/// ending in the ql-k terminal value.
pub fn sequence_value(engine: &BeliefEngine, rewards: &[f64], terminal: &[f64], gamma: f64, b: &Belief, seq: &[usize]) -> f64 {
    let game = engine.game();
    if game.is_terminal_index(b.state) {
        return 0.0;
    }
    let Some((&a, rest)) = seq.split_first() else {
        return terminal[b.state];
    };
    let pred = engine.predict(b, a);
    let r: f64 = pred.successors.iter().map(|s| s.total() * rewards[s.state]).sum();
    let future: f64 = pred
        .successors
        .iter()
        .map(|s| {
            let post = posterior(&pred, s.state).unwrap();
            let cont = if rest.is_empty() {
                if game.is_terminal_index(s.state) { 0.0 } else { terminal[s.state] }
            } else {
                sequence_value(engine, rewards, terminal, gamma, &post, rest)
            };
            s.total() * cont
        })
        .sum();
    r + gamma * future
}
