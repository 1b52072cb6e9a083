//! Brute-force quantal level-k oracle with its own dynamics, features,
//! level-0 planner and synchronous value iteration.

use qlkplan::config::{GameConfig, RewardWeights, SolverConfig};
use qlkplan::grid::Axis;
use qlkplan::Agent;

/// 4×2×4×2×2 grid. Lateral speed covers the whole lane offset in one step.
pub fn mini_config() -> GameConfig {
    let mut g = GameConfig::default();
    g.grid.x = Axis::new(0.0, 2.0, 4);
    g.grid.y = Axis::new(0.0, 3.6, 2);
    g.grid.v = Axis::new(0.0, 4.0, 2);
    g.actions.lateral_speed = 7.2;
    g
}

pub fn tight_solver(lambdas: Vec<f64>) -> SolverConfig {
    SolverConfig { lambdas, tolerance: 1e-12, max_sweeps: 100_000, ..Default::default() }
}

/// Independent model of the game on plain tuples.
pub struct Oracle {
    pub cfg: GameConfig,
    pub n: [usize; 3],
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct S {
    pub xr: usize,
    pub yr: usize,
    pub xh: usize,
    pub vr: usize,
    pub vh: usize,
}

impl Oracle {
    pub fn new(cfg: GameConfig) -> Self {
        let n = [cfg.grid.x.count, cfg.grid.y.count, cfg.grid.v.count];
        Self { cfg, n }
    }

    pub fn num_states(&self) -> usize {
        let [nx, ny, nv] = self.n;
        nx * ny * nx * nv * nv
    }

    pub fn idx(&self, s: S) -> usize {
        let [nx, ny, nv] = self.n;
        s.vh + nv * (s.vr + nv * (s.xh + nx * (s.yr + ny * s.xr)))
    }

    pub fn all(&self) -> Vec<S> {
        let [nx, ny, nv] = self.n;
        let mut out = Vec::new();
        for xr in 0..nx {
            for yr in 0..ny {
                for xh in 0..nx {
                    for vr in 0..nv {
                        for vh in 0..nv {
                            out.push(S { xr, yr, xh, vr, vh });
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest grid index; an exact midpoint picks the lower neighbour.
    pub fn snap(axis: &Axis, value: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..axis.count {
            let d = (axis.min + axis.step * i as f64 - value).abs();
            if d < best_d - 1e-9 {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn pos(axis: &Axis, i: usize) -> f64 {
        axis.min + axis.step * i as f64
    }

    pub fn robot_action(&self, a: usize) -> (f64, f64) {
        let acc = &self.cfg.actions.accelerations;
        let lat = if a >= acc.len() { self.cfg.actions.lateral_speed } else { 0.0 };
        (acc[a % acc.len()], lat)
    }

    pub fn step(&self, s: S, ar: usize, ah: usize) -> S {
        let g = &self.cfg.grid;
        let dt = self.cfg.dt;
        let (acc_r, lat) = self.robot_action(ar);
        let acc_h = self.cfg.actions.accelerations[ah];
        let vr = Self::pos(&g.v, s.vr);
        let vh = Self::pos(&g.v, s.vh);
        S {
            xr: Self::snap(&g.x, Self::pos(&g.x, s.xr) + vr * dt),
            yr: Self::snap(&g.y, Self::pos(&g.y, s.yr) + lat * dt),
            xh: Self::snap(&g.x, Self::pos(&g.x, s.xh) + vh * dt),
            vr: Self::snap(&g.v, vr + acc_r * dt),
            vh: Self::snap(&g.v, vh + acc_h * dt),
        }
    }

    pub fn collides(&self, s: S) -> bool {
        let g = &self.cfg.grid;
        let dx = Self::pos(&g.x, s.xr) - Self::pos(&g.x, s.xh);
        let dy = Self::pos(&g.y, s.yr) - Self::pos(&g.y, g.y.count - 1);
        dx.abs() < self.cfg.car.length - 1e-9 && dy.abs() < self.cfg.car.width - 1e-9
    }

    pub fn merged(&self, s: S) -> bool {
        s.yr == self.n[1] - 1
    }

    pub fn road_end(&self, s: S) -> bool {
        s.xr == self.n[0] - 1
    }

    pub fn terminal(&self, s: S) -> bool {
        self.collides(s) || self.merged(s) || self.road_end(s)
    }

    pub fn reward(&self, s: S, w: &RewardWeights) -> f64 {
        let g = &self.cfg.grid;
        let vmax = Self::pos(&g.v, g.v.count - 1);
        let ymid = 0.5 * (g.y.min + Self::pos(&g.y, g.y.count - 1));
        let collision = if w.deactivate_safety_feature { 0.0 } else { w.collision };
        let mut r = w.time;
        if self.collides(s) {
            r += collision;
        }
        r += w.robot_progress * Self::pos(&g.v, s.vr) / vmax;
        r += w.human_progress * Self::pos(&g.v, s.vh) / vmax;
        if Self::pos(&g.y, s.yr) >= ymid - 1e-9 {
            r += w.target_lane;
        }
        if self.merged(s) {
            r += w.merged;
        }
        if s.yr > 0 && !self.merged(s) {
            r -= w.lateral_comfort;
        }
        r
    }

    pub fn weights(&self, agent: Agent) -> RewardWeights {
        match agent {
            Agent::Robot => self.cfg.robot_rewards,
            Agent::Human => self.cfg.human_rewards,
        }
    }

    pub fn n_actions(&self, agent: Agent) -> usize {
        let n = self.cfg.actions.accelerations.len();
        match agent {
            Agent::Robot => 2 * n,
            Agent::Human => n,
        }
    }

    pub fn joint_step(&self, s: S, agent: Agent, own: usize, opp: usize) -> S {
        if self.terminal(s) {
            return s;
        }
        match agent {
            Agent::Robot => self.step(s, own, opp),
            Agent::Human => self.step(s, opp, own),
        }
    }

    /// Greedy level-0 action: the agent moves, the opponent stays exactly where it is.
    pub fn level0(&self, agent: Agent, gamma: f64) -> Vec<usize> {
        let w = self.weights(agent);
        let na = self.n_actions(agent);
        let moved = |s: S, a: usize| -> S {
            let t = match agent {
                Agent::Robot => self.step(s, a, 0),
                Agent::Human => self.step(s, 0, a),
            };
            match agent {
                Agent::Robot => S { xh: s.xh, vh: s.vh, ..t },
                Agent::Human => S { xh: t.xh, vh: t.vh, ..s },
            }
        };
        let states = self.all();
        let mut v = vec![0.0; self.num_states()];
        loop {
            let mut next_v = v.clone();
            let mut delta: f64 = 0.0;
            for &s in &states {
                if self.terminal(s) {
                    continue;
                }
                let best = (0..na)
                    .map(|a| {
                        let t = moved(s, a);
                        self.reward(t, &w) + gamma * v[self.idx(t)]
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[self.idx(s)]).abs());
                next_v[self.idx(s)] = best;
            }
            v = next_v;
            if delta < 1e-13 {
                break;
            }
        }
        states
            .iter()
            .map(|&s| {
                let q: Vec<f64> = (0..na)
                    .map(|a| {
                        let t = moved(s, a);
                        self.reward(t, &w) + gamma * v[self.idx(t)]
                    })
                    .collect();
                let mut best = 0;
                for a in 1..na {
                    if q[a] > q[best] + 1e-12 {
                        best = a;
                    }
                }
                best
            })
            .collect()
    }

    /// Jacobi value iteration against `opp[s][o]`, then softmax.
    pub fn level_k(&self, agent: Agent, opp: &[Vec<f64>], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let w = self.weights(agent);
        let na = self.n_actions(agent);
        let states = self.all();
        let q_of = |s: S, v: &[f64]| -> Vec<f64> {
            (0..na)
                .map(|a| {
                    opp[self.idx(s)]
                        .iter()
                        .enumerate()
                        .map(|(o, &p)| {
                            let t = self.joint_step(s, agent, a, o);
                            p * (self.reward(t, &w) + gamma * v[self.idx(t)])
                        })
                        .sum()
                })
                .collect()
        };
        let mut v = vec![0.0; self.num_states()];
        loop {
            let mut next_v = v.clone();
            let mut delta: f64 = 0.0;
            for &s in &states {
                if self.terminal(s) {
                    continue;
                }
                let best = q_of(s, &v).into_iter().fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[self.idx(s)]).abs());
                next_v[self.idx(s)] = best;
            }
            v = next_v;
            if delta < 1e-13 {
                break;
            }
        }
        let pi = states
            .iter()
            .map(|&s| {
                if self.terminal(s) {
                    return vec![1.0 / na as f64; na];
                }
                let q = q_of(s, &v);
                let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = q.iter().map(|x| (lambda * (x - m)).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            })
            .collect();
        (v, pi)
    }
}

pub fn one_hot(choices: &[usize], n: usize) -> Vec<Vec<f64>> {
    choices
        .iter()
        .map(|&a| {
            let mut r = vec![0.0; n];
            r[a] = 1.0;
            r
        })
        .collect()
}

