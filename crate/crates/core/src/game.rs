//! The two-player merge game: grid, actions, dynamics, reward features and
//! the safe set.
//!
//! The robot starts in the lower lane and must merge into the upper lane,
//! which the human drives in. States where the cars overlap, the robot has
//! fully merged, or the robot has reached the end of the road are absorbing.

use serde::{Deserialize, Serialize};

use crate::config::{GameConfig, RewardWeights, NUM_FEATURES};
use crate::grid::{Grid, JointState, PhysicalState};

/// The two players.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Robot,
    Human,
}

impl Agent {
    pub fn opponent(self) -> Agent {
        match self {
            Agent::Robot => Agent::Human,
            Agent::Human => Agent::Robot,
        }
    }
}

/// Reward features, in weight-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    /// 1 when the car footprints overlap.
    Collision = 0,
    /// v_R / v_max.
    RobotProgress = 1,
    /// v_H / v_max.
    HumanProgress = 2,
    /// 1 when the robot's centre is at least halfway into the upper lane.
    TargetLane = 3,
    /// 1 when the robot is fully in the upper lane.
    Merged = 4,
    /// -1 while the robot is between lane centres (lateral motion in progress).
    LateralComfort = 5,
    /// Constant 1; a negative weight is a per-step time cost.
    Time = 6,
}

/// Robot action: longitudinal acceleration plus whether to move toward the upper lane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotAction {
    pub accel: f64,
    pub lateral: f64,
}

/// Index into the robot action list.
pub type RobotActionId = usize;
/// Index into the human action list.
pub type HumanActionId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPair {
    pub robot: RobotActionId,
    pub human: HumanActionId,
}

/// The game model. Holds the config plus dense per-state caches (safety,
/// terminal flags, features) so hot loops never recompute geometry.
#[derive(Clone, Debug)]
pub struct Game {
    config: GameConfig,
    grid: Grid,
    robot_actions: Vec<RobotAction>,
    safe: Vec<bool>,
    terminal: Vec<bool>,
    /// Successor sub-states of the robot (x, y, v) per robot action.
    robot_next: Vec<[u16; 3]>,
    /// Successor sub-states of the human (x, v) per human action.
    human_next: Vec<[u16; 2]>,
}

impl Game {
    pub fn new(config: GameConfig) -> Self {
        let grid = config.grid.grid();
        let accels = &config.actions.accelerations;
        let mut robot_actions = Vec::with_capacity(accels.len() * 2);
        for lateral in [0.0, config.actions.lateral_speed] {
            for &accel in accels {
                robot_actions.push(RobotAction { accel, lateral });
            }
        }
        let mut game = Game {
            config,
            grid,
            robot_actions,
            safe: Vec::new(),
            terminal: Vec::new(),
            robot_next: Vec::new(),
            human_next: Vec::new(),
        };
        game.build_caches();
        game
    }

    fn build_caches(&mut self) {
        let n = self.grid.num_states();
        let mut safe = Vec::with_capacity(n);
        let mut terminal = Vec::with_capacity(n);
        for i in 0..n {
            let s = self.grid.state(i);
            let ok = self.check_safe(&s);
            safe.push(ok);
            terminal.push(!ok || self.is_merged(&s) || self.robot_at_road_end(&s));
        }
        self.safe = safe;
        self.terminal = terminal;

        let g = self.grid;
        let dt = self.config.dt;
        let (nx, ny, nv) = (g.x.count, g.y.count, g.v.count);
        let na = self.robot_actions.len();
        let mut robot_next = Vec::with_capacity(nx * ny * nv * na);
        for x in 0..nx {
            for y in 0..ny {
                for v in 0..nv {
                    let (xp, yp, vp) = (g.x.value(x), g.y.value(y), g.v.value(v));
                    for a in &self.robot_actions {
                        robot_next.push([
                            g.x.snap(xp + vp * dt) as u16,
                            g.y.snap(yp + a.lateral * dt) as u16,
                            g.v.snap(vp + a.accel * dt) as u16,
                        ]);
                    }
                }
            }
        }
        let nh = self.config.actions.accelerations.len();
        let mut human_next = Vec::with_capacity(nx * nv * nh);
        for x in 0..nx {
            for v in 0..nv {
                let (xp, vp) = (g.x.value(x), g.v.value(v));
                for &a in &self.config.actions.accelerations {
                    human_next.push([g.x.snap(xp + vp * dt) as u16, g.v.snap(vp + a * dt) as u16]);
                }
            }
        }
        self.robot_next = robot_next;
        self.human_next = human_next;
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_states(&self) -> usize {
        self.grid.num_states()
    }

    pub fn robot_actions(&self) -> &[RobotAction] {
        &self.robot_actions
    }

    pub fn num_robot_actions(&self) -> usize {
        self.robot_actions.len()
    }

    pub fn human_accels(&self) -> &[f64] {
        &self.config.actions.accelerations
    }

    pub fn num_human_actions(&self) -> usize {
        self.config.actions.accelerations.len()
    }

    pub fn num_actions(&self, agent: Agent) -> usize {
        match agent {
            Agent::Robot => self.num_robot_actions(),
            Agent::Human => self.num_human_actions(),
        }
    }

    /// The human action whose acceleration is closest to `accel`; ties go to
    /// the earlier action.
    pub fn nearest_human_action(&self, accel: f64) -> HumanActionId {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &a) in self.human_accels().iter().enumerate() {
            let d = (a - accel).abs();
            if d < best_d - 1e-12 {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// The human action with zero (or the smallest absolute) acceleration.
    pub fn maintain_action(&self) -> HumanActionId {
        self.nearest_human_action(0.0)
    }

    /// Euler step of the point-mass model followed by per-axis snapping to the
    /// grid. Ignores absorbing states; see [`Game::transition`].
    pub fn step_dynamics(&self, s: &JointState, a: ActionPair, dt: f64) -> JointState {
        let p = self.grid.physical(s);
        let ra = self.robot_actions[a.robot];
        let ha = self.config.actions.accelerations[a.human];
        let next = PhysicalState {
            x_r: p.x_r + p.v_r * dt,
            y_r: p.y_r + ra.lateral * dt,
            x_h: p.x_h + p.v_h * dt,
            v_r: p.v_r + ra.accel * dt,
            v_h: p.v_h + ha * dt,
        };
        self.grid.snap(&next)
    }

    /// One game step using the configured `dt`. Absorbing states map to themselves.
    #[inline]
    pub fn transition(&self, s: usize, a: ActionPair) -> usize {
        if self.terminal[s] {
            return s;
        }
        self.step_index(s, a)
    }

    /// Cached equivalent of `step_dynamics(s, a, config.dt)` on flat indices.
    #[inline]
    pub fn step_index(&self, s: usize, a: ActionPair) -> usize {
        let st = self.grid.state(s);
        let g = &self.grid;
        let na = self.robot_actions.len();
        let nh = self.config.actions.accelerations.len();
        let r_sub = (st.xr as usize * g.y.count + st.yr as usize) * g.v.count + st.vr as usize;
        let [xr, yr, vr] = self.robot_next[r_sub * na + a.robot];
        let h_sub = st.xh as usize * g.v.count + st.vh as usize;
        let [xh, vh] = self.human_next[h_sub * nh + a.human];
        g.index(&JointState { xr, yr, xh, vr, vh })
    }

    /// Whether the two footprints are disjoint. Touching edges count as safe.
    pub fn is_safe(&self, s: &JointState) -> bool {
        self.safe[self.grid.index(s)]
    }

    #[inline]
    pub fn is_safe_index(&self, s: usize) -> bool {
        self.safe[s]
    }

    fn check_safe(&self, s: &JointState) -> bool {
        let p = self.grid.physical(s);
        let dx = (p.x_r - p.x_h).abs();
        let dy = (p.y_r - self.grid.human_lateral()).abs();
        !(dx < self.config.car.length - 1e-9 && dy < self.config.car.width - 1e-9)
    }

    /// Whether the robot shares the human's lane closely enough for the
    /// footprints to overlap at some longitudinal offset.
    pub fn laterally_overlapping(&self, s: &JointState) -> bool {
        let p = self.grid.physical(s);
        (p.y_r - self.grid.human_lateral()).abs() < self.config.car.width - 1e-9
    }

    pub fn is_merged(&self, s: &JointState) -> bool {
        s.yr as usize == self.grid.y.count - 1
    }

    pub fn robot_at_road_end(&self, s: &JointState) -> bool {
        s.xr as usize == self.grid.x.count - 1
    }

    #[inline]
    pub fn is_terminal_index(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn is_terminal(&self, s: &JointState) -> bool {
        self.terminal[self.grid.index(s)]
    }

    pub fn feature_vector(&self, s: &JointState) -> [f64; NUM_FEATURES] {
        let p = self.grid.physical(s);
        let g = &self.grid;
        let vmax = g.v.max();
        let progress = |v: f64| if vmax > 0.0 { v / vmax } else { 0.0 };
        let lane_mid = 0.5 * (g.y.min + g.y.max());
        let mid_merge = s.yr > 0 && (s.yr as usize) < g.y.count - 1;
        let mut phi = [0.0; NUM_FEATURES];
        phi[Feature::Collision as usize] = if self.is_safe(s) { 0.0 } else { 1.0 };
        phi[Feature::RobotProgress as usize] = progress(p.v_r);
        phi[Feature::HumanProgress as usize] = progress(p.v_h);
        phi[Feature::TargetLane as usize] = if p.y_r >= lane_mid - 1e-9 { 1.0 } else { 0.0 };
        phi[Feature::Merged as usize] = if self.is_merged(s) { 1.0 } else { 0.0 };
        phi[Feature::LateralComfort as usize] = if mid_merge { -1.0 } else { 0.0 };
        phi[Feature::Time as usize] = 1.0;
        phi
    }

    pub fn reward(&self, s: &JointState, w: &RewardWeights) -> f64 {
        let phi = self.feature_vector(s);
        phi.iter().zip(w.as_array()).map(|(f, w)| f * w).sum()
    }

    /// Dense reward vector over all grid states.
    pub fn reward_table(&self, w: &RewardWeights) -> Vec<f64> {
        self.grid.states().map(|s| self.reward(&s, w)).collect()
    }

    pub fn weights(&self, agent: Agent) -> &RewardWeights {
        match agent {
            Agent::Robot => &self.config.robot_rewards,
            Agent::Human => &self.config.human_rewards,
        }
    }

    /// Flat indices of all states, for iteration.
    pub fn state_indices(&self) -> std::ops::Range<usize> {
        0..self.num_states()
    }
}
