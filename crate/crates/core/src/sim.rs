//! Episodes, batches, metrics and JSON-lines traces.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{apply_floor, Belief, BeliefEngine, BeliefError, BeliefSnapshot, LatentSpace};
use crate::config::GameConfig;
use crate::game::{ActionPair, Agent, Game, HumanActionId, RobotActionId};
use crate::grid::{JointState, PhysicalState};
use crate::planner::{Diagnostics, Planner, PlannerError, PlannerParams};
use crate::qlk::{LatentState, QlkTables};

/// Version of the trace record schema.
pub const TRACE_SCHEMA: u32 = 1;

/// Window (in steps) over which a stalled gap counts as deadlock.
pub const DEADLOCK_WINDOW: usize = 8;

/// Posterior probability of the true type that counts as confident inference.
pub const CONFIDENT_P: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("the true human type (k={k}, λ={lambda}) is not in the planner's latent space")]
    UnknownTrueType { k: usize, lambda: f64 },
    #[error("the episode needs a true human type to sample human actions")]
    NoHumanModel,
    #[error("start state is outside the grid or already terminal")]
    BadStart,
    #[error("no robot ql-{level} policy at λ={lambda}")]
    NoRobotPolicy { level: usize, lambda: f64 },
    #[error("episode already finished")]
    Finished,
    #[error("batch has no cells")]
    EmptyBatch,
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("replay diverged at step {t}: recorded {recorded:?}, recomputed {recomputed:?}")]
    ReplayMismatch { t: usize, recorded: JointState, recomputed: JointState },
}

/// Who drives the robot car.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    /// The tree-search planner with information gathering.
    #[default]
    Ours,
    /// The same planner with η₀ = 0.
    Blp1,
    /// A fixed robot ql-k policy (see `robot_level`, `robot_lambda`).
    Qlk,
}

impl std::str::FromStr for Driver {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ours" => Ok(Driver::Ours),
            "blp1" => Ok(Driver::Blp1),
            "qlk" => Ok(Driver::Qlk),
            _ => Err(format!("unknown planner `{s}` (expected ours, blp1 or qlk)")),
        }
    }
}

impl std::fmt::Display for Driver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Driver::Ours => "ours",
            Driver::Blp1 => "blp1",
            Driver::Qlk => "qlk",
        })
    }
}

/// One episode's setup, or the template for a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Initial physical state; snapped to the grid.
    pub start: PhysicalState,
    /// When set, the human starts uniformly within ± this many metres of the robot.
    pub randomize_human_m: Option<f64>,
    pub true_k: usize,
    pub true_lambda: f64,
    pub driver: Driver,
    pub robot_level: usize,
    pub robot_lambda: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub reps: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            start: PhysicalState { x_r: 2.0, y_r: 0.0, x_h: 2.0, v_r: 12.0, v_h: 12.0 },
            randomize_human_m: None,
            true_k: 1,
            true_lambda: 1.0,
            driver: Driver::Ours,
            robot_level: 2,
            robot_lambda: 1.0,
            max_steps: 60,
            seed: 0,
            reps: 20,
        }
    }
}

impl ScenarioSpec {
    pub fn true_theta(&self) -> LatentState {
        LatentState::new(self.true_k, self.true_lambda)
    }
}

/// A grid state with its indices and physical coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub index: usize,
    pub cells: JointState,
    pub physical: PhysicalState,
}

impl StateRecord {
    pub fn new(game: &Game, index: usize) -> Self {
        let cells = game.grid().state(index);
        Self { index, cells, physical: game.grid().physical(&cells) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Merged,
    Collision,
    Deadlock,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: u32,
    pub config_hash: String,
    pub game: GameConfig,
    pub latent_space: Vec<LatentState>,
    pub scenario: ScenarioSpec,
    pub planner: PlannerParams,
    pub episode: u64,
    pub true_theta: Option<LatentState>,
    pub start: StateRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: StateRecord,
    pub robot_action: RobotActionId,
    pub human_action: HumanActionId,
    pub human_accel: f64,
    pub next_state: StateRecord,
    /// Posterior after observing `next_state`.
    pub belief: BeliefSnapshot,
    /// r_R of the realized next state.
    pub reward: f64,
    /// Expected information gain of the robot action under the prior belief.
    pub info_gain: f64,
    /// Set when the observation had zero model probability and the belief was reset.
    pub belief_reset: bool,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub outcome: Outcome,
    pub steps: usize,
    /// Time to merge in seconds; only for merged episodes.
    pub tm: Option<f64>,
    pub merged_ahead: Option<bool>,
    /// Smallest bumper-to-bumper gap while the cars shared lateral extent.
    pub min_gap_m: Option<f64>,
    pub near_miss: bool,
    /// P(θ_true | b_t) for t = 0..=steps.
    pub p_true: Vec<f64>,
    /// First t with P(θ_true | b_t) > 0.8.
    pub confident_step: Option<usize>,
    /// The episode was cut short (for example by a client disconnect).
    pub aborted: bool,
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(Box<TraceHeader>),
    Step(Box<StepRecord>),
    Outcome(OutcomeRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub outcome: OutcomeRecord,
}

impl EpisodeTrace {
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut line = |r: &TraceRecord| -> std::io::Result<()> {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")
        };
        line(&TraceRecord::Header(Box::new(self.header.clone())))?;
        for s in &self.steps {
            line(&TraceRecord::Step(Box::new(s.clone())))?;
        }
        line(&TraceRecord::Outcome(self.outcome.clone()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), SimError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Parses and validates a JSON-lines trace.
    pub fn read_jsonl(r: impl BufRead) -> Result<Self, SimError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut outcome = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| SimError::Trace { line: i + 1, msg };
            let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            match rec {
                TraceRecord::Header(h) => {
                    if header.is_some() {
                        return Err(err("second header".into()));
                    }
                    if h.schema != TRACE_SCHEMA {
                        return Err(err(format!("schema {} (expected {TRACE_SCHEMA})", h.schema)));
                    }
                    header = Some(*h);
                }
                TraceRecord::Step(s) => {
                    if header.is_none() || outcome.is_some() {
                        return Err(err("step outside header/outcome".into()));
                    }
                    if s.t != steps.len() {
                        return Err(err(format!("step t={} out of order", s.t)));
                    }
                    steps.push(*s);
                }
                TraceRecord::Outcome(o) => {
                    if header.is_none() || outcome.is_some() {
                        return Err(err("unexpected outcome record".into()));
                    }
                    outcome = Some(o);
                }
            }
        }
        let header = header.ok_or(SimError::Trace { line: 0, msg: "missing header".into() })?;
        let outcome = outcome.ok_or(SimError::Trace { line: 0, msg: "missing outcome".into() })?;
        Ok(Self { header, steps, outcome })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SimError> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// Re-steps the dynamics from each recorded state and action pair and
    /// checks the recorded successor.
    pub fn replay(&self, game: &Game) -> Result<(), SimError> {
        let mut prev = self.header.start.index;
        for s in &self.steps {
            if s.state.index != prev {
                return Err(SimError::ReplayMismatch {
                    t: s.t,
                    recorded: s.state.cells,
                    recomputed: game.grid().state(prev),
                });
            }
            let next = game.transition(s.state.index, ActionPair { robot: s.robot_action, human: s.human_action });
            if next != s.next_state.index {
                return Err(SimError::ReplayMismatch {
                    t: s.t,
                    recorded: s.next_state.cells,
                    recomputed: game.grid().state(next),
                });
            }
            prev = next;
        }
        Ok(())
    }

    /// Step-by-step CSV rendering.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x_r,y_r,x_h,v_r,v_h,robot_action,human_accel,reward,info_gain,p_max,k_map,lambda_map\n");
        for s in &self.steps {
            let p = &s.state.physical;
            let map = s
                .belief
                .latent
                .iter()
                .fold(None, |b: Option<&crate::belief::LatentProb>, x| match b {
                    Some(bb) if bb.p >= x.p => b,
                    _ => Some(x),
                })
                .expect("non-empty latent space");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{}\n",
                s.t, p.x_r, p.y_r, p.x_h, p.v_r, p.v_h, s.robot_action, s.human_accel, s.reward, s.info_gain, map.p, map.k,
                map.lambda
            ));
        }
        out
    }

    /// Human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut out = format!("episode {} ({} steps)\n", self.header.episode, self.steps.len());
        for s in &self.steps {
            let p = &s.state.physical;
            let best = s.belief.latent.iter().map(|l| format!("{:.2}", l.p)).collect::<Vec<_>>().join(" ");
            out.push_str(&format!(
                "t={:>3}  robot x={:>6.1} y={:>4.2} v={:>4.1}  human x={:>6.1} v={:>4.1}  a_R={} a_H={:+}  r={:+.2}  belief [{}]\n",
                s.t, p.x_r, p.y_r, p.v_r, p.x_h, p.v_h, s.robot_action, s.human_accel, s.reward, best
            ));
        }
        let o = &self.outcome;
        out.push_str(&format!("outcome: {:?}", o.outcome));
        if let Some(tm) = o.tm {
            out.push_str(&format!(", TM = {tm:.1} s"));
        }
        out.push('\n');
        out
    }
}

/// Shared, immutable inputs for running episodes.
#[derive(Clone, Debug)]
pub struct Simulator {
    game: Arc<Game>,
    engine: BeliefEngine,
    params: PlannerParams,
    rewards: Arc<Vec<f64>>,
}

impl Simulator {
    /// The latent space is every solved (k, λ) with k in 1..=k_max and λ in Λ,
    /// plus level 0 when the planner params ask for it.
    pub fn new(game: Arc<Game>, tables: Arc<QlkTables>, params: PlannerParams) -> Result<Self, SimError> {
        params.validate()?;
        let solver = &tables.solver;
        let levels: Vec<usize> = if params.include_level0 { (0..=solver.k_max).collect() } else { (1..=solver.k_max).collect() };
        let mut space = LatentSpace::product(levels, &solver.lambdas);
        if params.include_level0 {
            // Level 0 does not depend on λ; keep a single hypothesis for it.
            let mut seen0 = false;
            space.types.retain(|t| {
                if t.k != 0 {
                    return true;
                }
                let keep = !seen0;
                seen0 = true;
                keep
            });
            for t in space.types.iter_mut().filter(|t| t.k == 0) {
                t.lambda = 0.0;
            }
        }
        let engine = BeliefEngine::new(game.clone(), tables, space)?;
        let rewards = Arc::new(game.reward_table(game.weights(Agent::Robot)));
        Ok(Self { game, engine, params, rewards })
    }

    pub fn game(&self) -> &Arc<Game> {
        &self.game
    }

    pub fn engine(&self) -> &BeliefEngine {
        &self.engine
    }

    pub fn params(&self) -> &PlannerParams {
        &self.params
    }

    pub fn with_params(&self, params: PlannerParams) -> Result<Self, SimError> {
        params.validate()?;
        Ok(Self { params, ..self.clone() })
    }

    /// A planner for `driver`, seeded with `seed`.
    pub fn planner(&self, driver: Driver, seed: u64) -> Result<Planner, SimError> {
        let mut params = self.params.clone();
        params.seed = seed;
        if driver == Driver::Blp1 {
            params.eta0 = 0.0;
        }
        Ok(Planner::with_rewards(self.engine.clone(), params, self.rewards.clone())?)
    }

    pub fn run_episode(&self, spec: &ScenarioSpec, episode: u64) -> Result<EpisodeTrace, SimError> {
        let mut ep = Episode::new(self, spec, episode)?;
        while !ep.is_finished() {
            ep.step_model()?;
        }
        Ok(ep.finish())
    }

    /// Runs `spec.reps` episodes for each cell and aggregates them.
    pub fn run_batch(&self, spec: &ScenarioSpec, cells: &[BatchCell]) -> Result<BatchReport, SimError> {
        Ok(self.run_batch_traces(spec, cells)?.0)
    }

    /// [`Simulator::run_batch`] that also returns every trace, grouped by cell.
    pub fn run_batch_traces(
        &self,
        spec: &ScenarioSpec,
        cells: &[BatchCell],
    ) -> Result<(BatchReport, Vec<Vec<EpisodeTrace>>), SimError> {
        if cells.is_empty() || spec.reps == 0 {
            return Err(SimError::EmptyBatch);
        }
        let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..spec.reps).map(move |r| (c, r))).collect();
        let results: Vec<Result<EpisodeTrace, SimError>> = jobs
            .par_iter()
            .map(|&(c, r)| {
                let cell = &cells[c];
                let s = ScenarioSpec {
                    true_k: cell.k,
                    true_lambda: cell.lambda,
                    driver: cell.driver,
                    // Episodes with the same rep share starts and seeds across cells.
                    seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(r as u64),
                    ..spec.clone()
                };
                self.run_episode(&s, r as u64)
            })
            .collect();
        let mut grouped: Vec<Vec<EpisodeTrace>> = cells.iter().map(|_| Vec::new()).collect();
        for ((c, _), res) in jobs.iter().zip(results) {
            grouped[*c].push(res?);
        }
        let report = BatchReport {
            cells: cells.iter().zip(&grouped).map(|(cell, traces)| CellReport::from_traces(cell, traces, spec.max_steps)).collect(),
        };
        Ok((report, grouped))
    }
}

/// Live or simulated episode, advanced one step at a time.
#[derive(Debug)]
pub struct Episode {
    game: Arc<Game>,
    engine: BeliefEngine,
    planner: Option<Planner>,
    robot_policy: Option<usize>,
    true_theta: Option<usize>,
    prior: Vec<f64>,
    floor: f64,
    state: usize,
    belief: Belief,
    human_rng: ChaCha8Rng,
    robot_rng: ChaCha8Rng,
    cap: usize,
    header: TraceHeader,
    steps: Vec<StepRecord>,
    p_true: Vec<f64>,
    outcome: Option<Outcome>,
    aborted: bool,
}

impl Episode {
    /// Sets up an episode. The human's true type is required for
    /// model-driven stepping; live sessions pass a spec whose type may be
    /// absent from the latent space via [`Episode::live`].
    pub fn new(sim: &Simulator, spec: &ScenarioSpec, episode: u64) -> Result<Self, SimError> {
        let theta = spec.true_theta();
        let ix = sim
            .engine
            .space()
            .position(&theta)
            .ok_or(SimError::UnknownTrueType { k: theta.k, lambda: theta.lambda })?;
        Self::build(sim, spec, episode, Some(ix))
    }

    /// An episode whose human actions come from outside (a live participant).
    pub fn live(sim: &Simulator, spec: &ScenarioSpec, episode: u64) -> Result<Self, SimError> {
        Self::build(sim, spec, episode, None)
    }

    fn build(sim: &Simulator, spec: &ScenarioSpec, episode: u64, true_theta: Option<usize>) -> Result<Self, SimError> {
        let game = sim.game.clone();
        let grid = *game.grid();
        let mut start_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5354_4152_5400_0000);
        let mut start = spec.start;
        if let Some(r) = spec.randomize_human_m {
            start.x_h = start.x_r + start_rng.random_range(-r..=r);
        }
        let s0 = grid.index(&grid.snap(&start));
        if game.is_terminal_index(s0) {
            return Err(SimError::BadStart);
        }
        let planner = match spec.driver {
            Driver::Ours | Driver::Blp1 => Some(sim.planner(spec.driver, spec.seed ^ 0x504c_414e_0000_0000)?),
            Driver::Qlk => None,
        };
        let robot_policy = if spec.driver == Driver::Qlk {
            let tables = sim.engine.tables();
            let ix = tables
                .policies
                .iter()
                .position(|p| p.agent == Agent::Robot && p.level == spec.robot_level && crate::qlk::same_lambda(p.lambda, spec.robot_lambda))
                .ok_or(SimError::NoRobotPolicy { level: spec.robot_level, lambda: spec.robot_lambda })?;
            Some(ix)
        } else {
            None
        };
        let prior = sim.engine.space().uniform();
        let belief = Belief::new(s0, prior.clone());
        let p_true = true_theta.map(|i| vec![prior[i]]).unwrap_or_default();
        let header = TraceHeader {
            schema: TRACE_SCHEMA,
            config_hash: sim.engine.tables().config_hash.clone(),
            game: game.config().clone(),
            latent_space: sim.engine.space().types.clone(),
            scenario: spec.clone(),
            planner: planner.as_ref().map(|p| p.params().clone()).unwrap_or_else(|| sim.params.clone()),
            episode,
            true_theta: true_theta.map(|i| sim.engine.space().types[i]),
            start: StateRecord::new(&game, s0),
        };
        Ok(Self {
            engine: sim.engine.clone(),
            planner,
            robot_policy,
            true_theta,
            prior,
            floor: sim.params.latent_floor,
            state: s0,
            belief,
            human_rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4855_4d41_4e00_0000),
            robot_rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x524f_424f_5400_0000),
            cap: spec.max_steps,
            header,
            steps: Vec::new(),
            p_true,
            outcome: None,
            aborted: false,
            game,
        })
    }

    pub fn game(&self) -> &Arc<Game> {
        &self.game
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot::new(&self.game, self.engine.space(), &self.belief)
    }

    pub fn t(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    /// The robot's action in the current state.
    pub fn robot_decision(&mut self) -> (RobotActionId, Option<Diagnostics>) {
        if let Some(p) = self.planner.as_mut() {
            let d = p.plan(&self.belief);
            return (d.action, Some(d.diagnostics));
        }
        let ix = self.robot_policy.expect("robot driver configured");
        let row = self.engine.tables().policies[ix].row(self.state);
        (sample(row, &mut self.robot_rng), None)
    }

    /// Samples the human's action from the true type's policy.
    pub fn sample_human(&mut self) -> Result<HumanActionId, SimError> {
        let theta = self.true_theta.ok_or(SimError::NoHumanModel)?;
        let row = self.engine.human_action_probs(theta, self.state);
        Ok(sample(row, &mut self.human_rng))
    }

    /// Plan, sample the modelled human and advance.
    pub fn step_model(&mut self) -> Result<&StepRecord, SimError> {
        if self.is_finished() {
            return Err(SimError::Finished);
        }
        let (a, diag) = self.robot_decision();
        let h = self.sample_human()?;
        self.advance(a, diag, h)
    }

    /// Applies one joint action, updates the belief and checks for termination.
    pub fn advance(&mut self, robot: RobotActionId, diagnostics: Option<Diagnostics>, human: HumanActionId) -> Result<&StepRecord, SimError> {
        if self.is_finished() {
            return Err(SimError::Finished);
        }
        let from = self.state;
        let next = self.game.transition(from, ActionPair { robot, human });
        let pred = self.engine.predict(&self.belief, robot);
        let info_gain = crate::belief::info_gain_of(&self.belief, &pred);
        let (mut belief, reset) = match crate::belief::posterior(&pred, next) {
            Some(b) => (b, false),
            None => (Belief::new(next, self.prior.clone()), true),
        };
        apply_floor(&mut belief.latent, self.floor);
        let reward = self.game.reward(&self.game.grid().state(next), self.game.weights(Agent::Robot));
        if let Some(i) = self.true_theta {
            self.p_true.push(belief.latent[i]);
        }
        self.belief = belief;
        self.state = next;
        let rec = StepRecord {
            t: self.steps.len(),
            state: StateRecord::new(&self.game, from),
            robot_action: robot,
            human_action: human,
            human_accel: self.game.human_accels()[human],
            next_state: StateRecord::new(&self.game, next),
            belief: BeliefSnapshot::new(&self.game, self.engine.space(), &self.belief),
            reward,
            info_gain,
            belief_reset: reset,
            diagnostics,
        };
        self.steps.push(rec);
        self.outcome = self.check_outcome();
        Ok(self.steps.last().unwrap())
    }

    fn check_outcome(&self) -> Option<Outcome> {
        let st = self.game.grid().state(self.state);
        if !self.game.is_safe_index(self.state) {
            return Some(Outcome::Collision);
        }
        if self.game.is_merged(&st) {
            return Some(Outcome::Merged);
        }
        let stuck = self.game.is_terminal_index(self.state);
        if stuck || self.steps.len() >= self.cap {
            return Some(self.classify_unmerged());
        }
        None
    }

    /// Deadlock if the longitudinal gap (in cells) moved by less than one cell
    /// over the last [`DEADLOCK_WINDOW`] steps of the capped episode. An
    /// absorbing unmerged state holds still until the cap.
    fn classify_unmerged(&self) -> Outcome {
        let mut gaps: Vec<i64> = std::iter::once(&self.header.start.cells)
            .chain(self.steps.iter().map(|s| &s.next_state.cells))
            .map(|c| c.xr as i64 - c.xh as i64)
            .collect();
        let last = *gaps.last().unwrap();
        while gaps.len() < self.cap + 1 {
            gaps.push(last);
        }
        let window = &gaps[gaps.len().saturating_sub(DEADLOCK_WINDOW + 1)..];
        let lo = window.iter().min().unwrap();
        let hi = window.iter().max().unwrap();
        if hi - lo < 1 {
            Outcome::Deadlock
        } else {
            Outcome::Timeout
        }
    }

    /// Marks the episode as cut short.
    pub fn abort(&mut self) {
        self.aborted = true;
        if self.outcome.is_none() {
            self.outcome = Some(Outcome::Timeout);
        }
    }

    /// Closes the episode and builds its trace.
    pub fn finish(mut self) -> EpisodeTrace {
        if self.outcome.is_none() {
            self.aborted = true;
            self.outcome = Some(Outcome::Timeout);
        }
        let outcome = self.outcome.unwrap();
        let game = &self.game;
        let car = game.config().car;
        let mut min_gap: Option<f64> = None;
        for c in std::iter::once(&self.header.start).chain(self.steps.iter().map(|s| &s.next_state)) {
            if game.laterally_overlapping(&c.cells) {
                let g = (c.physical.x_r - c.physical.x_h).abs() - car.length;
                min_gap = Some(min_gap.map_or(g, |m: f64| m.min(g)));
            }
        }
        let last = self.steps.last().map(|s| s.next_state.physical).unwrap_or(self.header.start.physical);
        let steps = self.steps.len();
        let record = OutcomeRecord {
            outcome,
            steps,
            tm: (outcome == Outcome::Merged).then(|| steps as f64 * game.config().dt),
            merged_ahead: (outcome == Outcome::Merged).then(|| last.x_r > last.x_h),
            min_gap_m: min_gap,
            near_miss: outcome == Outcome::Collision || min_gap.is_some_and(|g| g < car.length),
            confident_step: self.p_true.iter().position(|&p| p > CONFIDENT_P),
            p_true: std::mem::take(&mut self.p_true),
            aborted: self.aborted,
        };
        EpisodeTrace { header: self.header, steps: self.steps, outcome: record }
    }
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut c = 0.0;
    for (i, &x) in p.iter().enumerate() {
        c += x;
        if u < c {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// One (planner, human type) cell of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchCell {
    pub driver: Driver,
    pub k: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub driver: Driver,
    pub k: usize,
    pub lambda: f64,
    pub episodes: usize,
    pub merged: usize,
    pub collisions: usize,
    pub deadlocks: usize,
    pub timeouts: usize,
    pub merged_ahead: usize,
    pub near_misses: usize,
    /// Fraction of episodes that merged.
    pub rs: f64,
    /// Mean TM over merged episodes.
    pub tm_mean: Option<f64>,
    /// Normal-approximation 95% interval for the mean TM.
    pub tm_ci95: Option<(f64, f64)>,
    /// Mean first step with P(θ_true | b) > 0.8; episodes that never get
    /// there count as the step cap.
    pub confident_step_mean: f64,
    /// Mean P(θ_true | b_t) at each t, holding each episode's last value.
    pub inference_curve: Vec<f64>,
}

impl CellReport {
    pub fn from_traces(cell: &BatchCell, traces: &[EpisodeTrace], cap: usize) -> Self {
        let n = traces.len();
        let count = |o: Outcome| traces.iter().filter(|t| t.outcome.outcome == o).count();
        let tms: Vec<f64> = traces.iter().filter_map(|t| t.outcome.tm).collect();
        let (tm_mean, tm_ci95) = mean_ci95(&tms);
        let confident_step_mean = if n == 0 {
            0.0
        } else {
            traces.iter().map(|t| t.outcome.confident_step.unwrap_or(cap) as f64).sum::<f64>() / n as f64
        };
        let mut inference_curve = vec![0.0; cap + 1];
        for t in traces {
            let p = &t.outcome.p_true;
            for (i, slot) in inference_curve.iter_mut().enumerate() {
                *slot += p.get(i).or(p.last()).copied().unwrap_or(0.0);
            }
        }
        if n > 0 {
            inference_curve.iter_mut().for_each(|x| *x /= n as f64);
        }
        let merged = count(Outcome::Merged);
        Self {
            driver: cell.driver,
            k: cell.k,
            lambda: cell.lambda,
            episodes: n,
            merged,
            collisions: count(Outcome::Collision),
            deadlocks: count(Outcome::Deadlock),
            timeouts: count(Outcome::Timeout),
            merged_ahead: traces.iter().filter(|t| t.outcome.merged_ahead == Some(true)).count(),
            near_misses: traces.iter().filter(|t| t.outcome.near_miss).count(),
            rs: if n == 0 { 0.0 } else { merged as f64 / n as f64 },
            tm_mean,
            tm_ci95,
            confident_step_mean,
            inference_curve,
        }
    }
}

/// Sample mean and normal-approximation 95% interval.
pub fn mean_ci95(xs: &[f64]) -> (Option<f64>, Option<(f64, f64)>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), Some((mean, mean)));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.96 * (var / n).sqrt();
    (Some(mean), Some((mean - half, mean + half)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub cells: Vec<CellReport>,
}

impl BatchReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "planner,k,lambda,episodes,merged,collisions,deadlocks,timeouts,rs,tm_mean,tm_lo,tm_hi,confident_step_mean\n",
        );
        let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.4},{},{},{},{:.3}\n",
                c.driver,
                c.k,
                c.lambda,
                c.episodes,
                c.merged,
                c.collisions,
                c.deadlocks,
                c.timeouts,
                c.rs,
                f(c.tm_mean),
                f(c.tm_ci95.map(|x| x.0)),
                f(c.tm_ci95.map(|x| x.1)),
                c.confident_step_mean
            ));
        }
        out
    }

    pub fn inference_csv(&self) -> String {
        let mut out = String::from("planner,k,lambda,t,p_true\n");
        for c in &self.cells {
            for (t, p) in c.inference_curve.iter().enumerate() {
                out.push_str(&format!("{},{},{},{},{:.6}\n", c.driver, c.k, c.lambda, t, p));
            }
        }
        out
    }
}
