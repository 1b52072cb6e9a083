//! Quantal level-k dynamic programming.
//!
//! Level 0 is a deterministic, non-strategic policy. A level-k agent runs
//! value iteration against the level-(k-1) policy of its opponent (computed
//! with the same rationality coefficient) and then plays the softmax of its
//! Q-values with inverse temperature λ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Level0Mode, SolverConfig};
use crate::game::{ActionPair, Agent, Game};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("the rationality set is empty")]
    EmptyLambdas,
    #[error("rationality coefficient {0} is outside (0, 1]")]
    BadLambda(f64),
    #[error("invalid solver settings: {0}")]
    Config(String),
    #[error("value iteration for {agent:?} level {level} λ={lambda} did not converge in {sweeps} sweeps (residual {residual:e})")]
    NotConverged { agent: Agent, level: usize, lambda: f64, sweeps: usize, residual: f64 },
    #[error("no {agent:?} policy for level {level} λ={lambda}")]
    MissingPolicy { agent: Agent, level: usize, lambda: f64 },
    #[error("non-finite Q-value")]
    NonFiniteQ,
}

/// The human's latent cognitive state θ = (k, λ).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub k: usize,
    pub lambda: f64,
}

impl LatentState {
    pub fn new(k: usize, lambda: f64) -> Self {
        Self { k, lambda }
    }
}

pub(crate) fn same_lambda(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

/// Converged value function V*,i,k for one (agent, level, λ).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub agent: Agent,
    pub level: usize,
    pub lambda: f64,
    pub values: Vec<f64>,
}

/// Stochastic policy π*,i,k,λ as a dense (state × own action) matrix.
/// Level-0 tables are one-hot and do not depend on λ (stored as λ = 0).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    pub agent: Agent,
    pub level: usize,
    pub lambda: f64,
    pub num_actions: usize,
    pub probs: Vec<f64>,
}

impl PolicyTable {
    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    fn one_hot(agent: Agent, num_actions: usize, choices: &[u8]) -> Self {
        let mut probs = vec![0.0; choices.len() * num_actions];
        for (s, &a) in choices.iter().enumerate() {
            probs[s * num_actions + a as usize] = 1.0;
        }
        Self { agent, level: 0, lambda: 0.0, num_actions, probs }
    }
}

/// Softmax with inverse temperature λ, computed after subtracting the max.
pub fn quantal_response(q: &[f64], lambda: f64) -> Result<Vec<f64>, SolveError> {
    if q.iter().any(|x| !x.is_finite()) {
        return Err(SolveError::NonFiniteQ);
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(SolveError::BadLambda(lambda));
    }
    let mut out = vec![0.0; q.len()];
    softmax_into(q, lambda, &mut out);
    Ok(out)
}

fn softmax_into(q: &[f64], lambda: f64, out: &mut [f64]) {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(q) {
        *o = (lambda * (x - m)).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn pair(agent: Agent, own: usize, opp: usize) -> ActionPair {
    match agent {
        Agent::Robot => ActionPair { robot: own, human: opp },
        Agent::Human => ActionPair { robot: opp, human: own },
    }
}

/// Dense successor table `next[(s * n_robot + a_r) * n_human + a_h]`.
pub struct TransitionTable {
    n_robot: usize,
    n_human: usize,
    next: Vec<u32>,
}

impl TransitionTable {
    pub fn build(game: &Game) -> Self {
        let n_robot = game.num_robot_actions();
        let n_human = game.num_human_actions();
        let next = (0..game.num_states())
            .into_par_iter()
            .flat_map_iter(|s| {
                (0..n_robot).flat_map(move |r| {
                    (0..n_human).map(move |h| game.transition(s, ActionPair { robot: r, human: h }) as u32)
                })
            })
            .collect();
        Self { n_robot, n_human, next }
    }

    #[inline]
    fn get(&self, s: usize, agent: Agent, own: usize, opp: usize) -> usize {
        let (r, h) = match agent {
            Agent::Robot => (own, opp),
            Agent::Human => (opp, own),
        };
        self.next[(s * self.n_robot + r) * self.n_human + h] as usize
    }
}

/// Q-value of `own` for `agent` in state `s`: the expectation, over the
/// opponent's policy, of r_i(s') + γ V(s').
pub fn q_value(
    game: &Game,
    agent: Agent,
    rewards: &[f64],
    opponent: &PolicyTable,
    values: &[f64],
    gamma: f64,
    s: usize,
    own: usize,
) -> f64 {
    opponent
        .row(s)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(o, &p)| {
            let next = game.transition(s, pair(agent, own, o));
            p * (rewards[next] + gamma * values[next])
        })
        .sum()
}

/// Q-values of every own action in `s`.
pub fn q_row(
    game: &Game,
    agent: Agent,
    rewards: &[f64],
    opponent: &PolicyTable,
    values: &[f64],
    gamma: f64,
    s: usize,
) -> Vec<f64> {
    (0..game.num_actions(agent))
        .map(|a| q_value(game, agent, rewards, opponent, values, gamma, s, a))
        .collect()
}

/// Level-0 action of `agent` in the state with flat index `s`.
pub fn level0_action(tables: &QlkTables, agent: Agent, s: usize) -> usize {
    let row = tables.level0(agent).row(s);
    row.iter().position(|&p| p == 1.0).unwrap_or(0)
}

/// Index of the first maximum, treating values within 1e-12 as equal.
fn first_argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in q.iter().enumerate().skip(1) {
        if x > q[best] + 1e-12 {
            best = i;
        }
    }
    best
}

/// Greedy level-0 actions for `agent` at every grid state. The opponent is
/// frozen at its current position (or ignored, depending on `mode`) and the
/// agent solves the resulting single-agent MDP.
pub fn level0_choices(game: &Game, agent: Agent, mode: Level0Mode, gamma: f64, tol: f64, max_sweeps: usize) -> Vec<u8> {
    let g = *game.grid();
    let (nx, ny, nv) = (g.x.count, g.y.count, g.v.count);
    let mut weights = *game.weights(agent);
    if mode == Level0Mode::IgnoreOpponent {
        weights.deactivate_safety_feature = true;
    }
    let ignore = mode == Level0Mode::IgnoreOpponent;
    let n_own = game.num_actions(agent);
    // Own and frozen sub-state enumerations.
    let (own_states, frozen_states): (Vec<[usize; 3]>, Vec<[usize; 3]>) = match agent {
        Agent::Robot => (
            iproduct3(nx, ny, nv),
            iproduct3(nx, 1, nv), // (x_H, -, v_H)
        ),
        Agent::Human => (iproduct3(nx, 1, nv), iproduct3(nx, ny, nv)),
    };
    let compose = |own: [usize; 3], frozen: [usize; 3]| -> usize {
        let s = match agent {
            Agent::Robot => crate::grid::JointState::new(own[0], own[1], frozen[0], own[2], frozen[2]),
            Agent::Human => crate::grid::JointState::new(frozen[0], frozen[1], own[0], frozen[2], own[2]),
        };
        g.index(&s)
    };
    let terminal = |s: usize| -> bool {
        if ignore {
            let st = g.state(s);
            game.is_merged(&st) || game.robot_at_road_end(&st)
        } else {
            game.is_terminal_index(s)
        }
    };
    let own_pos: std::collections::HashMap<[usize; 3], usize> =
        own_states.iter().enumerate().map(|(i, o)| (*o, i)).collect();

    let per_frozen: Vec<Vec<(usize, u8)>> = frozen_states
        .par_iter()
        .map(|&frozen| {
            let n = own_states.len();
            let joint: Vec<usize> = own_states.iter().map(|&o| compose(o, frozen)).collect();
            // successor own-sub-state index per (own, action)
            let mut next = vec![0usize; n * n_own];
            let mut rew = vec![0.0; n * n_own];
            let mut term = vec![false; n];
            for (i, &s) in joint.iter().enumerate() {
                term[i] = terminal(s);
                for a in 0..n_own {
                    let moved = game.step_index(s, pair(agent, a, 0));
                    let st = g.state(moved);
                    let own = match agent {
                        Agent::Robot => [st.xr as usize, st.yr as usize, st.vr as usize],
                        Agent::Human => [st.xh as usize, 0, st.vh as usize],
                    };
                    // The step also moved the opponent; put it back where it was frozen.
                    let j = own_pos[&own];
                    next[i * n_own + a] = j;
                    rew[i * n_own + a] = game.reward(&g.state(joint[j]), &weights);
                }
            }
            let mut v = vec![0.0; n];
            for _ in 0..max_sweeps {
                let mut delta: f64 = 0.0;
                for i in (0..n).rev() {
                    if term[i] {
                        continue;
                    }
                    let mut best = f64::NEG_INFINITY;
                    for a in 0..n_own {
                        let q = rew[i * n_own + a] + gamma * v[next[i * n_own + a]];
                        best = best.max(q);
                    }
                    delta = delta.max((best - v[i]).abs());
                    v[i] = best;
                }
                if delta <= tol {
                    break;
                }
            }
            joint
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let q: Vec<f64> =
                        (0..n_own).map(|a| rew[i * n_own + a] + gamma * v[next[i * n_own + a]]).collect();
                    (s, first_argmax(&q) as u8)
                })
                .collect()
        })
        .collect();

    let mut out = vec![0u8; game.num_states()];
    for chunk in per_frozen {
        for (s, a) in chunk {
            out[s] = a;
        }
    }
    out
}

fn iproduct3(a: usize, b: usize, c: usize) -> Vec<[usize; 3]> {
    let mut v = Vec::with_capacity(a * b * c);
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                v.push([i, j, k]);
            }
        }
    }
    v
}

/// Result of one value-iteration run.
struct ViOutcome {
    values: Vec<f64>,
}

/// In-place value iteration to sup-norm tolerance `tol`. Sweeps run in
/// descending index order, which follows the forward motion of both cars.
/// Convergence is declared only once a full synchronous Bellman backup
/// moves no entry by more than `tol`.
fn value_iteration(
    game: &Game,
    trans: &TransitionTable,
    agent: Agent,
    rewards: &[f64],
    opponent: &PolicyTable,
    gamma: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<ViOutcome, (usize, f64)> {
    let n = game.num_states();
    let n_own = game.num_actions(agent);
    let n_opp = opponent.num_actions;
    let mut v = vec![0.0; n];
    let backup = |s: usize, v: &[f64]| -> f64 {
        let row = opponent.row(s);
        let mut best = f64::NEG_INFINITY;
        for a in 0..n_own {
            let mut q = 0.0;
            for o in 0..n_opp {
                let p = row[o];
                if p > 0.0 {
                    let next = trans.get(s, agent, a, o);
                    q += p * (rewards[next] + gamma * v[next]);
                }
            }
            best = best.max(q);
        }
        best
    };
    let mut residual = f64::INFINITY;
    for _ in 0..max_sweeps {
        let mut delta: f64 = 0.0;
        for s in (0..n).rev() {
            if game.is_terminal_index(s) {
                continue;
            }
            let b = backup(s, &v);
            delta = delta.max((b - v[s]).abs());
            v[s] = b;
        }
        if delta <= tol {
            residual = (0..n)
                .into_par_iter()
                .filter(|&s| !game.is_terminal_index(s))
                .map(|s| (backup(s, &v) - v[s]).abs())
                .reduce(|| 0.0, f64::max);
            if residual <= tol {
                return Ok(ViOutcome { values: v });
            }
        } else {
            residual = delta;
        }
    }
    Err((max_sweeps, residual))
}

fn extract_policy(
    game: &Game,
    trans: &TransitionTable,
    agent: Agent,
    rewards: &[f64],
    opponent: &PolicyTable,
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n_own = game.num_actions(agent);
    let n_opp = opponent.num_actions;
    let mut probs = vec![0.0; game.num_states() * n_own];
    probs.par_chunks_mut(n_own).enumerate().for_each(|(s, out)| {
        if game.is_terminal_index(s) {
            out.fill(1.0 / n_own as f64);
            return;
        }
        let row = opponent.row(s);
        let mut q = [0.0f64; 64];
        let q = &mut q[..n_own];
        for a in 0..n_own {
            for o in 0..n_opp {
                let p = row[o];
                if p > 0.0 {
                    let next = trans.get(s, agent, a, o);
                    q[a] += p * (rewards[next] + gamma * values[next]);
                }
            }
        }
        softmax_into(q, lambda, out);
    });
    probs
}

/// All solved tables plus the settings they were solved with.
#[derive(Clone, Debug, PartialEq)]
pub struct QlkTables {
    pub config_hash: String,
    pub solver: SolverConfig,
    pub level0: [PolicyTable; 2],
    pub policies: Vec<PolicyTable>,
    pub values: Vec<ValueTable>,
}

impl QlkTables {
    pub fn level0(&self, agent: Agent) -> &PolicyTable {
        match agent {
            Agent::Robot => &self.level0[0],
            Agent::Human => &self.level0[1],
        }
    }

    pub fn policy(&self, agent: Agent, level: usize, lambda: f64) -> Option<&PolicyTable> {
        if level == 0 {
            return Some(self.level0(agent));
        }
        self.policies
            .iter()
            .find(|p| p.agent == agent && p.level == level && same_lambda(p.lambda, lambda))
    }

    pub fn value(&self, agent: Agent, level: usize, lambda: f64) -> Option<&ValueTable> {
        self.values
            .iter()
            .find(|v| v.agent == agent && v.level == level && same_lambda(v.lambda, lambda))
    }

    pub fn require_policy(&self, agent: Agent, level: usize, lambda: f64) -> Result<&PolicyTable, SolveError> {
        self.policy(agent, level, lambda).ok_or(SolveError::MissingPolicy { agent, level, lambda })
    }

    pub fn require_value(&self, agent: Agent, level: usize, lambda: f64) -> Result<&ValueTable, SolveError> {
        self.value(agent, level, lambda).ok_or(SolveError::MissingPolicy { agent, level, lambda })
    }
}

/// Distinct rationality coefficients to solve: Λ plus λ = 1, which the
/// planner's terminal-value model always needs.
pub fn solved_lambdas(cfg: &SolverConfig) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &l in cfg.lambdas.iter().chain(std::iter::once(&1.0)) {
        if !out.iter().any(|&x| same_lambda(x, l)) {
            out.push(l);
        }
    }
    out
}

/// Runs quantal level-k dynamic programming for both agents.
///
/// Levels 1..=k_max are solved for every λ in Λ ∪ {1}; the robot additionally
/// gets level k_max + 1 at λ = 1 so terminal values exist one level above
/// every human hypothesis.
pub fn solve_qlk(game: &Game, cfg: &SolverConfig) -> Result<QlkTables, SolveError> {
    if cfg.lambdas.is_empty() {
        return Err(SolveError::EmptyLambdas);
    }
    if let Some(&bad) = cfg.lambdas.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
        return Err(SolveError::BadLambda(bad));
    }
    cfg.validate().map_err(|e| SolveError::Config(e.to_string()))?;

    let trans = TransitionTable::build(game);
    let rewards_r = game.reward_table(game.weights(Agent::Robot));
    let rewards_h = game.reward_table(game.weights(Agent::Human));
    let rewards = |a: Agent| match a {
        Agent::Robot => &rewards_r,
        Agent::Human => &rewards_h,
    };

    let (l0r, l0h) = rayon::join(
        || level0_choices(game, Agent::Robot, cfg.level0, cfg.gamma, cfg.tolerance, cfg.max_sweeps),
        || level0_choices(game, Agent::Human, cfg.level0, cfg.gamma, cfg.tolerance, cfg.max_sweeps),
    );
    let level0 = [
        PolicyTable::one_hot(Agent::Robot, game.num_robot_actions(), &l0r),
        PolicyTable::one_hot(Agent::Human, game.num_human_actions(), &l0h),
    ];

    let lambdas = solved_lambdas(cfg);
    let mut policies: Vec<PolicyTable> = Vec::new();
    let mut values: Vec<ValueTable> = Vec::new();

    for level in 1..=cfg.k_max + 1 {
        let mut jobs: Vec<(Agent, f64)> = Vec::new();
        if level <= cfg.k_max {
            for &l in &lambdas {
                jobs.push((Agent::Robot, l));
                jobs.push((Agent::Human, l));
            }
        } else {
            jobs.push((Agent::Robot, 1.0));
        }
        let solved: Vec<Result<(PolicyTable, ValueTable), SolveError>> = jobs
            .par_iter()
            .map(|&(agent, lambda)| {
                let opp_agent = agent.opponent();
                let opponent = if level == 1 {
                    match opp_agent {
                        Agent::Robot => &level0[0],
                        Agent::Human => &level0[1],
                    }
                } else {
                    policies
                        .iter()
                        .find(|p| p.agent == opp_agent && p.level == level - 1 && same_lambda(p.lambda, lambda))
                        .ok_or(SolveError::MissingPolicy { agent: opp_agent, level: level - 1, lambda })?
                };
                let r = rewards(agent);
                let vi = value_iteration(game, &trans, agent, r, opponent, cfg.gamma, cfg.tolerance, cfg.max_sweeps)
                    .map_err(|(sweeps, residual)| SolveError::NotConverged { agent, level, lambda, sweeps, residual })?;
                let probs = extract_policy(game, &trans, agent, r, opponent, &vi.values, cfg.gamma, lambda);
                Ok((
                    PolicyTable { agent, level, lambda, num_actions: game.num_actions(agent), probs },
                    ValueTable { agent, level, lambda, values: vi.values },
                ))
            })
            .collect();
        for item in solved {
            let (p, v) = item?;
            policies.push(p);
            values.push(v);
        }
    }

    Ok(QlkTables {
        config_hash: crate::config::tables_hash(game.config(), cfg),
        solver: cfg.clone(),
        level0,
        policies,
        values,
    })
}
