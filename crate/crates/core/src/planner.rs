//! Open-loop chance-constrained Monte-Carlo belief tree search.
//!
//! Nodes are robot action sequences. Each simulation walks the tree with
//! UCB, sampling the human's response from the current belief at every step,
//! and backs up the discounted sum of belief-space rewards plus an
//! information-gain bonus. A child is only ever added when the predicted
//! probability of leaving the safe set after its action is below the
//! per-step risk allowance.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{posterior, Belief, BeliefEngine, PredictedBelief};
use crate::game::{Agent, RobotAction, RobotActionId};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Tables(#[from] crate::qlk::SolveError),
}

/// How rollouts pick robot actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    /// Uniform over actions whose predicted risk is within the per-step allowance.
    #[default]
    Uniform,
    /// Sample a human level k from the belief and play the robot's ql-(k+1) policy at λ = 1.
    Qlk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    /// Search depth in robot actions.
    pub horizon: usize,
    pub gamma: f64,
    /// Total risk allowance Δ over the horizon.
    pub risk_budget: f64,
    /// Per-step risk allowance Δ_τ.
    pub step_risk: f64,
    /// UCB exploration constant. `None` uses the spread of the robot's step reward.
    pub exploration: Option<f64>,
    /// Information-gain scale η₀. Zero gives the passive baseline.
    pub eta0: f64,
    /// Wall-clock budget per decision in milliseconds; 0 disables the clock.
    pub budget_ms: u64,
    /// Hard cap on simulations per decision.
    pub max_simulations: Option<usize>,
    pub rollout: RolloutPolicy,
    pub seed: u64,
    /// Add a level-0 human hypothesis to the latent space.
    pub include_level0: bool,
    /// Optional floor on latent probabilities after each real update.
    pub latent_floor: f64,
    /// Restrict the search to these robot action ids.
    pub actions: Option<Vec<RobotActionId>>,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            horizon: 8,
            gamma: 0.95,
            risk_budget: 0.05,
            step_risk: 1.0 / 160.0,
            exploration: None,
            eta0: 10.0,
            budget_ms: 125,
            max_simulations: None,
            rollout: RolloutPolicy::Uniform,
            seed: 0,
            include_level0: false,
            latent_floor: 0.0,
            actions: None,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::Params(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.step_risk > 0.0) || !(self.risk_budget > 0.0) {
            return bad("risk allowances must be positive");
        }
        if self.step_risk * self.horizon as f64 > self.risk_budget * (1.0 + 1e-12) {
            return bad("horizon × step_risk exceeds risk_budget");
        }
        if self.budget_ms == 0 && self.max_simulations.is_none() {
            return bad("set budget_ms or max_simulations");
        }
        if self.max_simulations == Some(0) {
            return bad("max_simulations must be positive");
        }
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be a non-negative number");
        }
        if let Some(e) = self.exploration {
            if !(e >= 0.0 && e.is_finite()) {
                return bad("exploration must be a non-negative number");
            }
        }
        if !(0.0..1.0).contains(&self.latent_floor) {
            return bad("latent_floor must lie in [0, 1)");
        }
        if matches!(&self.actions, Some(a) if a.is_empty()) {
            return bad("actions must not be empty");
        }
        Ok(())
    }

    /// The passive-inference baseline: the same planner with η₀ = 0.
    pub fn blp1(mut self) -> Self {
        self.eta0 = 0.0;
        self
    }
}

/// One node of the open-loop tree: the action sequence leading to it is
/// implicit in the path from the root.
#[derive(Clone, Debug)]
pub struct Node {
    pub action: Option<RobotActionId>,
    pub depth: usize,
    pub n: u64,
    pub v: f64,
    pub children: Vec<usize>,
    pub expanded: bool,
    /// Expanded with no risk-feasible children.
    pub infeasible: bool,
    /// Risk of this node's action at the time it was expanded from its parent.
    pub risk: f64,
}

impl Node {
    fn new(action: Option<RobotActionId>, depth: usize, risk: f64) -> Self {
        Self { action, depth, n: 0, v: 0.0, children: Vec::new(), expanded: false, infeasible: false, risk }
    }
}

/// Arena-backed search tree. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Every return backed up through each node, when logging is enabled.
    pub returns: Option<Vec<Vec<f64>>>,
}

impl Default for Tree {
    fn default() -> Self {
        Self::new()
    }
}

impl Tree {
    pub fn new() -> Self {
        Self { nodes: vec![Node::new(None, 0, 0.0)], returns: None }
    }

    pub fn with_return_log() -> Self {
        Self { returns: Some(vec![Vec::new()]), ..Self::new() }
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Action sequence from the root to `id`.
    pub fn sequence(&self, mut id: usize) -> Vec<RobotActionId> {
        let parents = self.parents();
        let mut seq = Vec::new();
        while let Some(a) = self.nodes[id].action {
            seq.push(a);
            id = parents[id];
        }
        seq.reverse();
        seq
    }

    fn parents(&self) -> Vec<usize> {
        let mut p = vec![0; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &c in &n.children {
                p[c] = i;
            }
        }
        p
    }

    fn push(&mut self, node: Node) -> usize {
        self.nodes.push(node);
        if let Some(r) = self.returns.as_mut() {
            r.push(Vec::new());
        }
        self.nodes.len() - 1
    }

    fn record(&mut self, id: usize, ret: f64) {
        let node = &mut self.nodes[id];
        node.n += 1;
        node.v += (ret - node.v) / node.n as f64;
        if let Some(r) = self.returns.as_mut() {
            r[id].push(ret);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootChild {
    pub seq: Vec<RobotActionId>,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "N")]
    pub n: u64,
    pub risk: f64,
}

/// Per-decision diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sims: usize,
    pub chosen: RobotActionId,
    pub root_children: Vec<RootChild>,
    pub eta: f64,
    pub fallback: bool,
    /// Largest predicted risk among all nodes expanded during this decision.
    pub max_expanded_risk: f64,
    /// Number of nodes added to the tree.
    pub expanded: usize,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: RobotActionId,
    pub diagnostics: Diagnostics,
}

/// The tree-search planner. Single-threaded per `plan` call; cheap to clone.
#[derive(Clone, Debug)]
pub struct Planner {
    engine: BeliefEngine,
    params: PlannerParams,
    rewards: Arc<Vec<f64>>,
    exploration: f64,
    actions: Vec<RobotActionId>,
    /// Robot value table index per latent hypothesis (level k+1, λ = 1).
    terminal_ix: Vec<usize>,
    rng: ChaCha8Rng,
    max_expanded_risk: f64,
    expanded: usize,
}

impl Planner {
    pub fn new(engine: BeliefEngine, params: PlannerParams) -> Result<Self, PlannerError> {
        params.validate()?;
        let game = engine.game().clone();
        let rewards = Arc::new(game.reward_table(game.weights(Agent::Robot)));
        Self::with_rewards(engine, params, rewards)
    }

    /// Like [`Planner::new`] but reuses a precomputed robot reward table.
    pub fn with_rewards(engine: BeliefEngine, params: PlannerParams, rewards: Arc<Vec<f64>>) -> Result<Self, PlannerError> {
        params.validate()?;
        let game = engine.game().clone();
        let n_actions = game.num_robot_actions();
        let actions = match &params.actions {
            Some(a) => {
                if let Some(&bad) = a.iter().find(|&&x| x >= n_actions) {
                    return Err(PlannerError::Params(format!("robot action {bad} does not exist")));
                }
                a.clone()
            }
            None => (0..n_actions).collect(),
        };
        let tables = engine.tables().clone();
        let mut terminal_ix = Vec::with_capacity(engine.space().len());
        for t in &engine.space().types {
            let level = t.k + 1;
            let ix = tables
                .values
                .iter()
                .position(|v| v.agent == Agent::Robot && v.level == level && crate::qlk::same_lambda(v.lambda, 1.0))
                .ok_or(crate::qlk::SolveError::MissingPolicy { agent: Agent::Robot, level, lambda: 1.0 })?;
            terminal_ix.push(ix);
        }
        let exploration = params.exploration.unwrap_or_else(|| {
            let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        });
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Ok(Self { engine, params, rewards, exploration, actions, terminal_ix, rng, max_expanded_risk: 0.0, expanded: 0 })
    }

    pub fn engine(&self) -> &BeliefEngine {
        &self.engine
    }

    pub fn params(&self) -> &PlannerParams {
        &self.params
    }

    pub fn exploration(&self) -> f64 {
        self.exploration
    }

    pub fn set_eta0(&mut self, eta0: f64) {
        self.params.eta0 = eta0;
    }

    /// Restarts the planner's random stream.
    pub fn reseed(&mut self, seed: u64) {
        self.params.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Probability mass of a predicted belief on unsafe physical states.
    pub fn compute_risk(&self, pred: &PredictedBelief) -> f64 {
        self.engine.risk(pred)
    }

    /// η = η₀ · H(b) / ln|Θ|. Zero with a single hypothesis.
    pub fn adaptive_eta(&self, b: &Belief) -> f64 {
        adaptive_eta(b, self.params.eta0, self.engine.space().len())
    }

    /// r'_R(b, a) + η(b) · I(b, a).
    pub fn augmented_reward(&self, b: &Belief, action: RobotActionId) -> f64 {
        let pred = self.engine.predict(b, action);
        self.augmented_reward_of(b, &pred)
    }

    fn augmented_reward_of(&self, b: &Belief, pred: &PredictedBelief) -> f64 {
        let r = self.engine.belief_reward_table(b, pred, &self.rewards);
        let eta = self.adaptive_eta(b);
        if eta == 0.0 {
            return r;
        }
        r + eta * crate::belief::info_gain_of(b, pred)
    }

    /// Σ_k P(k | b) · V^{R,k+1,λ=1}(s̃) at the belief's state.
    pub fn terminal_value(&self, b: &Belief) -> f64 {
        let tables = self.engine.tables();
        b.latent
            .iter()
            .zip(&self.terminal_ix)
            .map(|(&p, &ix)| p * tables.values[ix].values[b.state])
            .sum()
    }

    /// Terminal value of a predicted belief spread over several states.
    pub fn terminal_value_predicted(&self, pred: &PredictedBelief) -> f64 {
        let tables = self.engine.tables();
        pred.successors
            .iter()
            .map(|s| {
                s.mass
                    .iter()
                    .zip(&self.terminal_ix)
                    .map(|(&p, &ix)| p * tables.values[ix].values[s.state])
                    .sum::<f64>()
            })
            .sum()
    }

    /// The action with the smallest predicted risk; see [`least_risky`].
    pub fn infeasible_fallback(&self, b: &Belief) -> (RobotActionId, f64) {
        let risks: Vec<(RobotActionId, f64)> =
            self.actions.iter().map(|&a| (a, self.compute_risk(&self.engine.predict(b, a)))).collect();
        least_risky(self.engine.game().robot_actions(), &risks)
    }

    fn sample_observation(&mut self, pred: &PredictedBelief) -> usize {
        let total = pred.total_mass();
        let u: f64 = self.rng.random::<f64>() * total;
        let mut c = 0.0;
        for s in &pred.successors {
            c += s.total();
            if u < c {
                return s.state;
            }
        }
        pred.successors.last().expect("non-empty prediction").state
    }

    /// Steps the belief: returns (augmented reward, sampled posterior).
    fn step(&mut self, b: &Belief, pred: &PredictedBelief) -> (f64, Belief) {
        let r = self.augmented_reward_of(b, pred);
        let o = self.sample_observation(pred);
        let next = posterior(pred, o).expect("sampled observation has positive mass");
        (r, next)
    }

    fn rollout_action(&mut self, b: &Belief, relaxed: bool) -> (RobotActionId, PredictedBelief) {
        if self.params.rollout == RolloutPolicy::Qlk {
            let levels = b.level_marginal(self.engine.space());
            let u: f64 = self.rng.random();
            let mut c = 0.0;
            let mut k = levels.last().map(|x| x.0).unwrap_or(1);
            for &(lvl, p) in &levels {
                c += p;
                if u < c {
                    k = lvl;
                    break;
                }
            }
            let tables = self.engine.tables().clone();
            if let Some(pol) = tables.policy(Agent::Robot, k + 1, 1.0) {
                let row = pol.row(b.state);
                let weights: Vec<f64> = self.actions.iter().map(|&a| row[a]).collect();
                let z: f64 = weights.iter().sum();
                if z > 0.0 {
                    let u: f64 = self.rng.random::<f64>() * z;
                    let mut c = 0.0;
                    let mut pick = *self.actions.last().unwrap();
                    for (&a, &w) in self.actions.iter().zip(&weights) {
                        c += w;
                        if u < c {
                            pick = a;
                            break;
                        }
                    }
                    let pred = self.engine.predict(b, pick);
                    return (pick, pred);
                }
            }
        }
        let preds: Vec<(RobotActionId, PredictedBelief)> =
            self.actions.iter().map(|&a| (a, self.engine.predict(b, a))).collect();
        let feasible: Vec<usize> = if relaxed {
            Vec::new()
        } else {
            (0..preds.len()).filter(|&i| self.compute_risk(&preds[i].1) < self.params.step_risk).collect()
        };
        let i = if feasible.is_empty() {
            self.rng.random_range(0..preds.len())
        } else {
            feasible[self.rng.random_range(0..feasible.len())]
        };
        preds.into_iter().nth(i).unwrap()
    }

    /// Random-policy return from `b` at depth `depth` down to the horizon.
    pub fn rollout(&mut self, b: &Belief, depth: usize) -> f64 {
        self.rollout_inner(b, depth, false)
    }

    fn rollout_inner(&mut self, b: &Belief, depth: usize, relaxed: bool) -> f64 {
        let mut b = b.clone();
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in depth..self.params.horizon {
            if self.engine.game().is_terminal_index(b.state) {
                return total;
            }
            let (_, pred) = self.rollout_action(&b, relaxed);
            let (r, next) = self.step(&b, &pred);
            total += discount * r;
            discount *= self.params.gamma;
            b = next;
        }
        total + discount * self.terminal_value(&b)
    }

    /// One simulation from `node` holding belief `b` at depth `depth`.
    /// Returns the sampled discounted return from this node onward; the
    /// caller records it on the node.
    pub fn simulate(&mut self, tree: &mut Tree, node: usize, b: &Belief, depth: usize) -> f64 {
        if depth >= self.params.horizon {
            return self.terminal_value(b);
        }
        if self.engine.game().is_terminal_index(b.state) {
            return 0.0;
        }
        if !tree.nodes[node].expanded {
            tree.nodes[node].expanded = true;
            for i in 0..self.actions.len() {
                let a = self.actions[i];
                let risk = self.compute_risk(&self.engine.predict(b, a));
                if risk < self.params.step_risk {
                    self.max_expanded_risk = self.max_expanded_risk.max(risk);
                    self.expanded += 1;
                    let child = tree.push(Node::new(Some(a), depth + 1, risk));
                    tree.nodes[node].children.push(child);
                }
            }
            if tree.nodes[node].children.is_empty() {
                tree.nodes[node].infeasible = true;
                return self.rollout_inner(b, depth, true);
            }
            return self.rollout_inner(b, depth, false);
        }
        if tree.nodes[node].infeasible {
            return self.rollout_inner(b, depth, true);
        }
        let child = self.select(tree, node);
        let a = tree.nodes[child].action.expect("child has an action");
        let pred = self.engine.predict(b, a);
        let (r, next) = self.step(b, &pred);
        let ret = r + self.params.gamma * self.simulate(tree, child, &next, depth + 1);
        tree.record(child, ret);
        ret
    }

    /// UCB selection: unvisited children first, then children not marked
    /// infeasible, then the highest upper confidence bound.
    fn select(&self, tree: &Tree, node: usize) -> usize {
        let parent = &tree.nodes[node];
        if let Some(&c) = parent.children.iter().find(|&&c| tree.nodes[c].n == 0) {
            return c;
        }
        let ln_n = (parent.n.max(1) as f64).ln();
        let score = |c: usize| {
            let ch = &tree.nodes[c];
            ch.v + self.exploration * (ln_n / ch.n as f64).sqrt()
        };
        let pick = |want_feasible: bool| {
            parent
                .children
                .iter()
                .copied()
                .filter(|&c| !tree.nodes[c].infeasible == want_feasible)
                .fold(None, |best: Option<(usize, f64)>, c| {
                    let s = score(c);
                    match best {
                        Some((_, bs)) if bs >= s => best,
                        _ => Some((c, s)),
                    }
                })
        };
        pick(true).or_else(|| pick(false)).map(|x| x.0).expect("expanded node has children")
    }

    fn timed_out(&self, start: Instant, sims: usize) -> bool {
        if let Some(cap) = self.params.max_simulations {
            if sims >= cap {
                return true;
            }
        }
        self.params.budget_ms > 0 && start.elapsed() >= Duration::from_millis(self.params.budget_ms)
    }

    /// Runs the search from a root-form belief and returns the action with
    /// the best mean return among the root's children.
    pub fn plan(&mut self, b: &Belief) -> Decision {
        self.plan_in(b, &mut Tree::new())
    }

    /// [`Planner::plan`] on a caller-supplied tree, for inspection.
    pub fn plan_in(&mut self, b: &Belief, tree: &mut Tree) -> Decision {
        let start = Instant::now();
        self.max_expanded_risk = 0.0;
        self.expanded = 0;
        let eta = self.adaptive_eta(b);
        let mut sims = 0;
        if !self.engine.game().is_terminal_index(b.state) {
            while !self.timed_out(start, sims) {
                let ret = self.simulate(tree, 0, b, 0);
                tree.record(0, ret);
                sims += 1;
                if tree.nodes[0].infeasible {
                    break;
                }
            }
        }
        let root = &tree.nodes[0];
        let best = root
            .children
            .iter()
            .copied()
            .filter(|&c| tree.nodes[c].n > 0)
            .fold(None, |best: Option<usize>, c| match best {
                Some(bc) if tree.nodes[bc].v >= tree.nodes[c].v => best,
                _ => Some(c),
            });
        let root_children = root
            .children
            .iter()
            .map(|&c| {
                let n = &tree.nodes[c];
                RootChild { seq: vec![n.action.unwrap()], v: n.v, n: n.n, risk: n.risk }
            })
            .collect();
        let (action, fallback) = match best {
            Some(c) => (tree.nodes[c].action.unwrap(), false),
            None => (self.infeasible_fallback(b).0, true),
        };
        Decision {
            action,
            diagnostics: Diagnostics {
                sims,
                chosen: action,
                root_children,
                eta,
                fallback,
                max_expanded_risk: self.max_expanded_risk,
                expanded: self.expanded,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            },
        }
    }
}

/// Argmin of risk over `(action, risk)` candidates. Ties go to actions
/// without lateral motion, then to harder braking, then to list order.
pub fn least_risky(actions: &[RobotAction], risks: &[(RobotActionId, f64)]) -> (RobotActionId, f64) {
    let mut best = risks[0];
    for &(a, r) in &risks[1..] {
        let (ba, br) = best;
        let better = if r < br - 1e-12 {
            true
        } else if r > br + 1e-12 {
            false
        } else {
            let key = |x: RobotActionId| (actions[x].lateral != 0.0, actions[x].accel);
            key(a) < key(ba)
        };
        if better {
            best = (a, r);
        }
    }
    best
}

/// η₀ · H(b) / ln(n_types); zero when there is a single hypothesis.
pub fn adaptive_eta(b: &Belief, eta0: f64, n_types: usize) -> f64 {
    if n_types < 2 || eta0 == 0.0 {
        return 0.0;
    }
    eta0 * b.entropy() / (n_types as f64).ln()
}
