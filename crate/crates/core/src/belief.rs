//! Belief tracking over the human's latent state.
//!
//! The robot observes the joint physical state exactly, so a posterior belief
//! always has all physical mass on one grid state and only the latent part
//! θ = (k, λ) is uncertain. A predicted belief (before observing) spreads mass
//! over at most |A_H| successor states, one per human action.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RewardWeights;
use crate::game::{ActionPair, Agent, Game, RobotActionId};
use crate::grid::JointState;
use crate::qlk::{LatentState, PolicyTable, QlkTables, SolveError};

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("observation {observed:?} has zero probability after robot action {action} from {from:?} (latent {latent:?})")]
    ZeroLikelihood { from: JointState, latent: Vec<f64>, action: RobotActionId, observed: JointState },
    #[error(transparent)]
    Tables(#[from] SolveError),
    #[error("latent space is empty")]
    EmptySpace,
    #[error("prior has {got} entries, latent space has {want}")]
    PriorLength { got: usize, want: usize },
}

/// The finite set Θ of latent hypotheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpace {
    pub types: Vec<LatentState>,
}

impl LatentSpace {
    /// Θ = {k_min..=k_max} × Λ, ordered by level then λ.
    pub fn product(levels: impl IntoIterator<Item = usize>, lambdas: &[f64]) -> Self {
        let mut types = Vec::new();
        for k in levels {
            for &lambda in lambdas {
                types.push(LatentState::new(k, lambda));
            }
        }
        Self { types }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn position(&self, theta: &LatentState) -> Option<usize> {
        self.types
            .iter()
            .position(|t| t.k == theta.k && crate::qlk::same_lambda(t.lambda, theta.lambda))
    }

    pub fn levels(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.types.iter().map(|t| t.k).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }
}

/// Posterior ("root form") belief: an exact physical state plus a
/// distribution over Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub state: usize,
    pub latent: Vec<f64>,
}

impl Belief {
    pub fn new(state: usize, latent: Vec<f64>) -> Self {
        Self { state, latent }
    }

    pub fn total_mass(&self) -> f64 {
        self.latent.iter().sum()
    }

    /// Shannon entropy (nats) of the augmented belief. With a point-mass
    /// physical component this is the latent entropy.
    pub fn entropy(&self) -> f64 {
        entropy(&self.latent)
    }

    /// Marginal probability of each intelligence level, keyed by level.
    pub fn level_marginal(&self, space: &LatentSpace) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for (t, &p) in space.types.iter().zip(&self.latent) {
            match out.iter_mut().find(|(k, _)| *k == t.k) {
                Some(e) => e.1 += p,
                None => out.push((t.k, p)),
            }
        }
        out
    }
}

/// Shannon entropy in nats with 0·log 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// One reachable successor state and the joint mass it carries for each θ.
#[derive(Clone, Debug, PartialEq)]
pub struct Successor {
    pub state: usize,
    pub mass: Vec<f64>,
}

impl Successor {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }
}

/// Predicted belief before the next observation: a sparse map over
/// (successor state, θ).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedBelief {
    pub successors: Vec<Successor>,
}

impl PredictedBelief {
    pub fn total_mass(&self) -> f64 {
        self.successors.iter().map(Successor::total).sum()
    }

    /// Physical marginal P(s̃') at a flat state index (0 off the support).
    pub fn physical(&self, state: usize) -> f64 {
        self.successors.iter().filter(|s| s.state == state).map(Successor::total).sum()
    }

    /// Latent marginal, summed over successors.
    pub fn latent_marginal(&self) -> Vec<f64> {
        let n = self.successors.first().map_or(0, |s| s.mass.len());
        let mut out = vec![0.0; n];
        for s in &self.successors {
            for (o, m) in out.iter_mut().zip(&s.mass) {
                *o += m;
            }
        }
        out
    }

    pub fn mass(&self, state: usize, theta: usize) -> f64 {
        self.successors.iter().filter(|s| s.state == state).map(|s| s.mass[theta]).sum()
    }

    /// Entropy over the full (state, θ) support.
    pub fn entropy(&self) -> f64 {
        self.successors.iter().map(|s| entropy(&s.mass)).sum()
    }
}

/// Belief dynamics for a fixed game, solved tables and latent space.
#[derive(Clone, Debug)]
pub struct BeliefEngine {
    game: Arc<Game>,
    tables: Arc<QlkTables>,
    space: LatentSpace,
    policy_ix: Vec<PolicyRef>,
}

#[derive(Clone, Copy, Debug)]
enum PolicyRef {
    Level0,
    Solved(usize),
}

impl BeliefEngine {
    pub fn new(game: Arc<Game>, tables: Arc<QlkTables>, space: LatentSpace) -> Result<Self, BeliefError> {
        if space.is_empty() {
            return Err(BeliefError::EmptySpace);
        }
        let mut policy_ix = Vec::with_capacity(space.len());
        for t in &space.types {
            if t.k == 0 {
                policy_ix.push(PolicyRef::Level0);
                continue;
            }
            let ix = tables
                .policies
                .iter()
                .position(|p| p.agent == Agent::Human && p.level == t.k && crate::qlk::same_lambda(p.lambda, t.lambda))
                .ok_or(SolveError::MissingPolicy { agent: Agent::Human, level: t.k, lambda: t.lambda })?;
            policy_ix.push(PolicyRef::Solved(ix));
        }
        Ok(Self { game, tables, space, policy_ix })
    }

    pub fn game(&self) -> &Arc<Game> {
        &self.game
    }

    pub fn tables(&self) -> &Arc<QlkTables> {
        &self.tables
    }

    pub fn space(&self) -> &LatentSpace {
        &self.space
    }

    fn human_policy(&self, theta: usize) -> &PolicyTable {
        match self.policy_ix[theta] {
            PolicyRef::Level0 => self.tables.level0(Agent::Human),
            PolicyRef::Solved(i) => &self.tables.policies[i],
        }
    }

    /// π^{H,k,λ}(s̃, ·) for hypothesis `theta`.
    pub fn human_action_probs(&self, theta: usize, state: usize) -> &[f64] {
        self.human_policy(theta).row(state)
    }

    /// A belief at `state` with the given latent prior.
    pub fn belief(&self, state: usize, prior: Vec<f64>) -> Result<Belief, BeliefError> {
        if prior.len() != self.space.len() {
            return Err(BeliefError::PriorLength { got: prior.len(), want: self.space.len() });
        }
        Ok(Belief::new(state, prior))
    }

    pub fn uniform_belief(&self, state: usize) -> Belief {
        Belief::new(state, self.space.uniform())
    }

    /// T((s̃, θ), a_R, (s̃', θ')): the human-policy mass on actions that take
    /// s̃ to s̃'. Latent states are static, so θ' ≠ θ has probability 0.
    pub fn transition_prob(&self, from: usize, theta: usize, action: RobotActionId, to: usize, theta_next: usize) -> f64 {
        if theta != theta_next {
            return 0.0;
        }
        self.human_action_probs(theta, from)
            .iter()
            .enumerate()
            .filter(|(h, _)| self.game.transition(from, ActionPair { robot: action, human: *h }) == to)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Successor states reachable under `action`, one per distinct human
    /// action outcome, in human-action order.
    fn successor_states(&self, from: usize, action: RobotActionId) -> ([usize; 16], usize, [usize; 16]) {
        let nh = self.game.num_human_actions();
        let mut states = [0usize; 16];
        let mut slot_of_action = [0usize; 16];
        let mut n = 0;
        for h in 0..nh {
            let next = self.game.transition(from, ActionPair { robot: action, human: h });
            let slot = match states[..n].iter().position(|&x| x == next) {
                Some(i) => i,
                None => {
                    states[n] = next;
                    n += 1;
                    n - 1
                }
            };
            slot_of_action[h] = slot;
        }
        (states, n, slot_of_action)
    }

    /// Prior belief prediction: b̃(s') = Σ_s T(s, a, s') b(s).
    pub fn predict(&self, b: &Belief, action: RobotActionId) -> PredictedBelief {
        let (states, n, slot) = self.successor_states(b.state, action);
        let nt = self.space.len();
        let mut successors: Vec<Successor> =
            states[..n].iter().map(|&s| Successor { state: s, mass: vec![0.0; nt] }).collect();
        for (theta, &p_theta) in b.latent.iter().enumerate() {
            if p_theta == 0.0 {
                continue;
            }
            for (h, &p_h) in self.human_action_probs(theta, b.state).iter().enumerate() {
                successors[slot[h]].mass[theta] += p_theta * p_h;
            }
        }
        successors.retain(|s| s.total() > 0.0);
        PredictedBelief { successors }
    }

    /// O(o, b, a): probability of observing physical state `o` next.
    pub fn observation_prob(&self, observed: usize, b: &Belief, action: RobotActionId) -> f64 {
        self.predict(b, action).physical(observed)
    }

    /// Bayesian posterior after taking `action` and observing `observed`.
    pub fn update(&self, b: &Belief, action: RobotActionId, observed: usize) -> Result<Belief, BeliefError> {
        let pred = self.predict(b, action);
        posterior(&pred, observed).ok_or_else(|| BeliefError::ZeroLikelihood {
            from: self.game.grid().state(b.state),
            latent: b.latent.clone(),
            action,
            observed: self.game.grid().state(observed),
        })
    }

    /// Posterior with every latent probability floored at `floor` and renormalized.
    pub fn update_with_floor(&self, b: &Belief, action: RobotActionId, observed: usize, floor: f64) -> Result<Belief, BeliefError> {
        let mut post = self.update(b, action, observed)?;
        apply_floor(&mut post.latent, floor);
        Ok(post)
    }

    /// Expected robot reward of the next physical state. Absorbing states pay nothing.
    pub fn belief_reward(&self, b: &Belief, action: RobotActionId, w: &RewardWeights) -> f64 {
        if self.game.is_terminal_index(b.state) {
            return 0.0;
        }
        let grid = self.game.grid();
        self.predict(b, action)
            .successors
            .iter()
            .map(|s| s.total() * self.game.reward(&grid.state(s.state), w))
            .sum()
    }

    /// Same as [`BeliefEngine::belief_reward`] with a precomputed reward table.
    pub fn belief_reward_table(&self, b: &Belief, pred: &PredictedBelief, rewards: &[f64]) -> f64 {
        if self.game.is_terminal_index(b.state) {
            return 0.0;
        }
        pred.successors.iter().map(|s| s.total() * rewards[s.state]).sum()
    }

    /// Expected information gain I(b, a) = H(b) − Σ_o O(o,b,a) H(ρ(b,a,o)).
    pub fn info_gain(&self, b: &Belief, action: RobotActionId) -> f64 {
        info_gain_of(b, &self.predict(b, action))
    }

    /// Mass of the predicted belief on unsafe physical states.
    pub fn risk(&self, pred: &PredictedBelief) -> f64 {
        pred.successors
            .iter()
            .filter(|s| !self.game.is_safe_index(s.state))
            .fold(0.0, |acc, s| acc + s.total())
    }
}

/// Posterior latent distribution for observation `observed`, or `None` when
/// the observation has zero predicted probability.
pub fn posterior(pred: &PredictedBelief, observed: usize) -> Option<Belief> {
    let mut latent: Option<Vec<f64>> = None;
    for s in pred.successors.iter().filter(|s| s.state == observed) {
        match latent.as_mut() {
            Some(l) => l.iter_mut().zip(&s.mass).for_each(|(a, b)| *a += b),
            None => latent = Some(s.mass.clone()),
        }
    }
    let mut latent = latent?;
    let z: f64 = latent.iter().sum();
    if !(z > 0.0) {
        return None;
    }
    latent.iter_mut().for_each(|p| *p /= z);
    Some(Belief::new(observed, latent))
}

/// Information gain given an already computed prediction.
pub fn info_gain_of(b: &Belief, pred: &PredictedBelief) -> f64 {
    let mut expected = 0.0;
    for s in &pred.successors {
        let o = s.total();
        if o > 0.0 {
            let post: Vec<f64> = s.mass.iter().map(|m| m / o).collect();
            expected += o * entropy(&post);
        }
    }
    b.entropy() - expected
}

/// Floors each entry at `floor` and renormalizes. A non-positive floor is a no-op.
pub fn apply_floor(latent: &mut [f64], floor: f64) {
    if floor <= 0.0 {
        return;
    }
    latent.iter_mut().for_each(|p| *p = p.max(floor));
    let z: f64 = latent.iter().sum();
    latent.iter_mut().for_each(|p| *p /= z);
}

/// JSON snapshot of a belief: `{state, latent: [{k, lambda, p}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub state: crate::sim::StateRecord,
    pub latent: Vec<LatentProb>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentProb {
    pub k: usize,
    pub lambda: f64,
    pub p: f64,
}

impl BeliefSnapshot {
    pub fn new(game: &Game, space: &LatentSpace, b: &Belief) -> Self {
        Self {
            state: crate::sim::StateRecord::new(game, b.state),
            latent: space
                .types
                .iter()
                .zip(&b.latent)
                .map(|(t, &p)| LatentProb { k: t.k, lambda: t.lambda, p })
                .collect(),
        }
    }
}
