//! One participant's session: the episode, its phase and the latest input.
//!
//! `Session` is synchronous and owns all mutable state. The websocket driver
//! in `lib.rs` feeds it messages and calls `tick` on the clock.

use std::path::PathBuf;
use std::sync::Arc;

use qlkplan::belief::LatentProb;
use qlkplan::sim::{Driver, Episode, EpisodeTrace, Outcome, ScenarioSpec, SimError, StateRecord, StepRecord};

use crate::protocol::{ActionSet, ConfigMsg, Control, Lanes, Phase, Snapshot, WIRE_VERSION};
use crate::ServiceConfig;

pub struct Session {
    id: u64,
    cfg: Arc<ServiceConfig>,
    driver: Driver,
    episode_no: u64,
    episode: Option<Episode>,
    phase: Phase,
    pending_accel: Option<f64>,
    last: Option<StepRecord>,
    /// View of an episode that has been closed into a trace.
    closed: Option<ClosedView>,
    saved: Vec<PathBuf>,
}

struct ClosedView {
    state: StateRecord,
    belief: Vec<LatentProb>,
    t: usize,
    outcome: Outcome,
}

impl Session {
    pub fn new(cfg: Arc<ServiceConfig>, id: u64) -> Result<Self, SimError> {
        let driver = cfg.scenario.driver;
        let mut s = Self {
            id,
            cfg,
            driver,
            episode_no: 0,
            episode: None,
            phase: Phase::Lobby,
            pending_accel: None,
            last: None,
            closed: None,
            saved: Vec::new(),
        };
        s.fresh_episode()?;
        Ok(s)
    }

    fn spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            driver: self.driver,
            seed: self.cfg.scenario.seed.wrapping_add(self.episode_no),
            ..self.cfg.scenario.clone()
        }
    }

    fn fresh_episode(&mut self) -> Result<(), SimError> {
        self.episode = Some(Episode::live(&self.cfg.sim, &self.spec(), self.episode_no)?);
        self.phase = Phase::Lobby;
        self.pending_accel = None;
        self.last = None;
        self.closed = None;
        Ok(())
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn driver(&self) -> Driver {
        self.driver
    }

    /// Trace files written so far.
    pub fn saved_traces(&self) -> &[PathBuf] {
        &self.saved
    }

    pub fn config_msg(&self) -> ConfigMsg {
        let game = self.cfg.sim.game();
        let gc = game.config();
        ConfigMsg {
            version: WIRE_VERSION,
            session: self.id,
            config_hash: self.cfg.sim.engine().tables().config_hash.clone(),
            lanes: Lanes { count: 2, lower: gc.grid.y.min, upper: gc.grid.y.max() },
            grid: gc.grid,
            car: gc.car,
            dt: gc.dt,
            tick_ms: self.cfg.tick_ms,
            planner_budget_ms: self.cfg.sim.params().budget_ms,
            action_set: ActionSet { robot: game.robot_actions().to_vec(), human: game.human_accels().to_vec() },
            latent_space: self.cfg.sim.engine().space().types.clone(),
            planner: self.driver,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        let (state, belief, t, outcome) = match (&self.episode, &self.closed) {
            (Some(ep), _) => (StateRecord::new(ep.game(), ep.state()), ep.snapshot().latent, ep.t(), ep.outcome()),
            (None, Some(c)) => (c.state.clone(), c.belief.clone(), c.t, Some(c.outcome)),
            (None, None) => unreachable!("a session always has an episode or a closed view"),
        };
        let last = self.last.as_ref();
        Snapshot {
            episode: self.episode_no,
            t,
            phase: self.phase,
            planner: self.driver,
            state,
            belief,
            last_robot_action: last.map(|r| r.robot_action),
            last_human_action: last.map(|r| r.human_action),
            last_human_accel: last.map(|r| r.human_accel),
            diagnostics: last.and_then(|r| r.diagnostics.clone()),
            outcome,
        }
    }

    /// Records the participant's latest acceleration request.
    pub fn input(&mut self, accel: f64) {
        self.pending_accel = Some(accel);
    }

    pub fn control(&mut self, c: &Control) -> Result<(), String> {
        match c {
            Control::Start => match self.phase {
                Phase::Lobby => {
                    self.phase = Phase::Running;
                    self.pending_accel = None;
                    Ok(())
                }
                Phase::Running => Err("episode already running".into()),
                Phase::Finished => Err("episode finished; send reset first".into()),
            },
            Control::Reset => {
                self.abort_running();
                self.next_episode()
            }
            Control::SelectPlanner { planner } => {
                if self.phase == Phase::Running {
                    return Err("cannot switch planner while an episode is running".into());
                }
                self.driver = *planner;
                self.next_episode()
            }
        }
    }

    fn next_episode(&mut self) -> Result<(), String> {
        self.episode_no += 1;
        self.fresh_episode().map_err(|e| e.to_string())
    }

    /// One environment step: snap the latest input, plan, step, update the belief.
    /// Input is consumed; a tick without new input applies "maintain".
    pub fn tick(&mut self) -> Result<(), SimError> {
        if self.phase != Phase::Running {
            return Ok(());
        }
        let ep = self.episode.as_mut().expect("running session has an episode");
        let game = ep.game().clone();
        let human = match self.pending_accel.take() {
            Some(a) => game.nearest_human_action(a),
            None => game.maintain_action(),
        };
        let (robot, diag) = ep.robot_decision();
        self.last = Some(ep.advance(robot, diag, human)?.clone());
        if ep.is_finished() {
            self.close();
        }
        Ok(())
    }

    /// Ends a running episode early and keeps its partial trace.
    pub fn abort_running(&mut self) -> Option<EpisodeTrace> {
        if self.phase != Phase::Running {
            return None;
        }
        self.episode.as_mut()?.abort();
        Some(self.close())
    }

    fn close(&mut self) -> EpisodeTrace {
        let ep = self.episode.take().expect("open episode");
        self.closed = Some(ClosedView {
            state: StateRecord::new(ep.game(), ep.state()),
            belief: ep.snapshot().latent,
            t: ep.t(),
            outcome: ep.outcome().expect("closed episodes have an outcome"),
        });
        self.phase = Phase::Finished;
        let trace = ep.finish();
        self.persist(&trace);
        trace
    }

    fn persist(&mut self, trace: &EpisodeTrace) {
        let Some(dir) = &self.cfg.trace_dir else { return };
        let path = dir.join(format!("session{}-episode{}.jsonl", self.id, self.episode_no));
        match trace.save(&path) {
            Ok(()) => {
                tracing::info!(path = %path.display(), outcome = ?trace.outcome.outcome, "saved trace");
                self.saved.push(path);
            }
            Err(e) => tracing::error!(path = %path.display(), "could not save trace: {e}"),
        }
    }
}
