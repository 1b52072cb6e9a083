//! Python bindings. Structured results (diagnostics, traces, reports) cross
//! the boundary as plain dicts built from their JSON form.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use qlkplan::config::{tables_hash, Config, GameConfig, SolverConfig};
use qlkplan::grid::{JointState, PhysicalState};
use qlkplan::sim::{BatchCell, Driver, ScenarioSpec, Simulator, TraceRecord};
use qlkplan::{qlk, tables, ActionPair, Agent, Belief, BeliefEngine, Game, LatentSpace, Planner, PlannerParams, QlkTables};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_agent(s: &str) -> PyResult<Agent> {
    match s {
        "robot" => Ok(Agent::Robot),
        "human" => Ok(Agent::Human),
        _ => Err(PyValueError::new_err(format!("agent must be 'robot' or 'human', got {s:?}"))),
    }
}

/// The discretized merge game.
#[pyclass(name = "Game", frozen)]
struct PyGame {
    inner: Arc<Game>,
}

impl PyGame {
    fn check(&self, s: usize) -> PyResult<()> {
        if s < self.inner.num_states() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("state {s} out of range (have {})", self.inner.num_states())))
        }
    }
}

#[pymethods]
impl PyGame {
    /// `config_toml` holds a full config document; only its `[game]` part is used.
    #[new]
    #[pyo3(signature = (config_toml = None, desk = false))]
    fn new(config_toml: Option<&str>, desk: bool) -> PyResult<Self> {
        let cfg = match (config_toml, desk) {
            (Some(_), true) => return Err(PyValueError::new_err("pass config_toml or desk, not both")),
            (Some(t), false) => Config::from_toml_str(t).map_err(value_err)?.game,
            (None, true) => GameConfig::desk(),
            (None, false) => GameConfig::default(),
        };
        Ok(Self { inner: Arc::new(Game::new(cfg)) })
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    /// Axis counts (x_R, y_R, x_H, v_R, v_H).
    #[getter]
    fn shape(&self) -> [usize; 5] {
        self.inner.grid().shape()
    }

    #[getter]
    fn robot_actions(&self) -> Vec<(f64, f64)> {
        self.inner.robot_actions().iter().map(|a| (a.accel, a.lateral)).collect()
    }

    #[getter]
    fn human_accels(&self) -> Vec<f64> {
        self.inner.human_accels().to_vec()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn index(&self, xr: usize, yr: usize, xh: usize, vr: usize, vh: usize) -> PyResult<usize> {
        let s = JointState::new(xr, yr, xh, vr, vh);
        if !self.inner.grid().contains(&s) {
            return Err(PyValueError::new_err("cell indices outside the grid"));
        }
        Ok(self.inner.grid().index(&s))
    }

    /// Cell indices (xr, yr, xh, vr, vh) of a state.
    fn cells(&self, s: usize) -> PyResult<(u16, u16, u16, u16, u16)> {
        self.check(s)?;
        let c = self.inner.grid().state(s);
        Ok((c.xr, c.yr, c.xh, c.vr, c.vh))
    }

    /// Physical coordinates (x_r, y_r, x_h, v_r, v_h) of a state.
    fn physical(&self, s: usize) -> PyResult<(f64, f64, f64, f64, f64)> {
        self.check(s)?;
        let p = self.inner.grid().physical(&self.inner.grid().state(s));
        Ok((p.x_r, p.y_r, p.x_h, p.v_r, p.v_h))
    }

    /// Nearest grid state to physical coordinates.
    fn snap(&self, x_r: f64, y_r: f64, x_h: f64, v_r: f64, v_h: f64) -> usize {
        let grid = self.inner.grid();
        grid.index(&grid.snap(&PhysicalState { x_r, y_r, x_h, v_r, v_h }))
    }

    fn step(&self, s: usize, robot: usize, human: usize) -> PyResult<usize> {
        self.check(s)?;
        if robot >= self.inner.num_robot_actions() || human >= self.inner.num_human_actions() {
            return Err(PyValueError::new_err("action id out of range"));
        }
        Ok(self.inner.transition(s, ActionPair { robot, human }))
    }

    fn is_safe(&self, s: usize) -> PyResult<bool> {
        self.check(s)?;
        Ok(self.inner.is_safe_index(s))
    }

    fn is_terminal(&self, s: usize) -> PyResult<bool> {
        self.check(s)?;
        Ok(self.inner.is_terminal_index(s))
    }

    #[pyo3(signature = (s, agent = "robot"))]
    fn reward(&self, s: usize, agent: &str) -> PyResult<f64> {
        self.check(s)?;
        let agent = parse_agent(agent)?;
        Ok(self.inner.reward(&self.inner.grid().state(s), self.inner.weights(agent)))
    }
}

/// Solved ql-k policies and values.
#[pyclass(name = "Tables", frozen)]
struct PyTables {
    inner: Arc<QlkTables>,
}

#[pymethods]
impl PyTables {
    #[staticmethod]
    #[pyo3(signature = (game, k_max = 2, lambdas = None, gamma = 0.95))]
    fn solve(py: Python<'_>, game: &PyGame, k_max: usize, lambdas: Option<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        let mut cfg = SolverConfig { k_max, gamma, ..Default::default() };
        if let Some(l) = lambdas {
            cfg.lambdas = l;
        }
        cfg.validate().map_err(value_err)?;
        let g = game.inner.clone();
        let t = py.detach(move || qlkplan::solve_qlk(&g, &cfg)).map_err(value_err)?;
        Ok(Self { inner: Arc::new(t) })
    }

    /// Loads a table file, checking it was solved for `game`.
    #[staticmethod]
    fn load(game: &PyGame, path: &str) -> PyResult<Self> {
        let header = tables::peek(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let want = tables_hash(game.inner.config(), &header.solver);
        let t = tables::load(path, &want).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: Arc::new(t) })
    }

    fn save(&self, game: &PyGame, path: &str) -> PyResult<()> {
        tables::save(&self.inner, &game.inner.config().grid, path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn k_max(&self) -> usize {
        self.inner.solver.k_max
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.solver.lambdas.clone()
    }

    /// Action probabilities of the ql-`level` policy at λ in state `s`.
    fn policy(&self, agent: &str, level: usize, lam: f64, s: usize) -> PyResult<Vec<f64>> {
        let agent = parse_agent(agent)?;
        let row = if level == 0 {
            Some(&self.inner.level0[agent as usize])
        } else {
            self.inner.policy(agent, level, lam)
        };
        let p = row.ok_or_else(|| PyKeyError::new_err(format!("no {agent:?} level-{level} policy at λ={lam}")))?;
        if s * p.num_actions >= p.probs.len() {
            return Err(PyValueError::new_err("state out of range"));
        }
        Ok(p.row(s).to_vec())
    }

    fn value(&self, agent: &str, level: usize, lam: f64, s: usize) -> PyResult<f64> {
        let agent = parse_agent(agent)?;
        let v = self
            .inner
            .value(agent, level, lam)
            .ok_or_else(|| PyKeyError::new_err(format!("no {agent:?} level-{level} value at λ={lam}")))?;
        v.values.get(s).copied().ok_or_else(|| PyValueError::new_err("state out of range"))
    }
}

/// Quantal best response: softmax of `q` scaled by λ.
#[pyfunction]
fn quantal_response(q: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    qlk::quantal_response(&q, lam).map_err(value_err)
}

#[pyclass(name = "Belief", frozen)]
struct PyBelief {
    inner: Belief,
}

#[pymethods]
impl PyBelief {
    #[new]
    fn new(state: usize, latent: Vec<f64>) -> Self {
        Self { inner: Belief::new(state, latent) }
    }

    #[getter]
    fn state(&self) -> usize {
        self.inner.state
    }

    #[getter]
    fn latent(&self) -> Vec<f64> {
        self.inner.latent.clone()
    }

    fn entropy(&self) -> f64 {
        self.inner.entropy()
    }

    fn __repr__(&self) -> String {
        format!("Belief(state={}, latent={:?})", self.inner.state, self.inner.latent)
    }
}

/// Belief prediction and update over the human's (k, λ).
#[pyclass(name = "BeliefEngine", frozen)]
struct PyBeliefEngine {
    inner: BeliefEngine,
}

#[pymethods]
impl PyBeliefEngine {
    /// The latent space defaults to every solved level and λ.
    #[new]
    #[pyo3(signature = (game, tables, levels = None, lambdas = None))]
    fn new(game: &PyGame, tables: &PyTables, levels: Option<Vec<usize>>, lambdas: Option<Vec<f64>>) -> PyResult<Self> {
        let levels = levels.unwrap_or_else(|| (1..=tables.inner.solver.k_max).collect());
        let lambdas = lambdas.unwrap_or_else(|| tables.inner.solver.lambdas.clone());
        let space = LatentSpace::product(levels, &lambdas);
        let inner = BeliefEngine::new(game.inner.clone(), tables.inner.clone(), space).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn latent_space(&self) -> Vec<(usize, f64)> {
        self.inner.space().types.iter().map(|t| (t.k, t.lambda)).collect()
    }

    fn uniform(&self, state: usize) -> PyBelief {
        PyBelief { inner: self.inner.uniform_belief(state) }
    }

    /// Posterior after taking `action` and observing state `observed`.
    fn update(&self, b: &PyBelief, action: usize, observed: usize) -> PyResult<PyBelief> {
        Ok(PyBelief { inner: self.inner.update(&b.inner, action, observed).map_err(value_err)? })
    }

    fn observation_prob(&self, observed: usize, b: &PyBelief, action: usize) -> f64 {
        self.inner.observation_prob(observed, &b.inner, action)
    }

    /// Successor states with their predicted probabilities.
    fn predict(&self, b: &PyBelief, action: usize) -> Vec<(usize, f64)> {
        self.inner.predict(&b.inner, action).successors.iter().map(|s| (s.state, s.total())).collect()
    }

    fn info_gain(&self, b: &PyBelief, action: usize) -> f64 {
        self.inner.info_gain(&b.inner, action)
    }
}

/// Chance-constrained belief tree search for the robot.
#[pyclass(name = "Planner")]
struct PyPlanner {
    inner: Planner,
}

#[pymethods]
impl PyPlanner {
    #[new]
    #[pyo3(signature = (engine, horizon = 8, eta0 = 10.0, budget_ms = 125, max_simulations = None, seed = 0))]
    fn new(
        engine: &PyBeliefEngine,
        horizon: usize,
        eta0: f64,
        budget_ms: u64,
        max_simulations: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let defaults = PlannerParams::default();
        let params = PlannerParams {
            horizon,
            step_risk: defaults.risk_budget / horizon.max(1) as f64,
            eta0,
            budget_ms,
            max_simulations,
            seed,
            ..defaults
        };
        Ok(Self { inner: Planner::new(engine.inner.clone(), params).map_err(value_err)? })
    }

    /// Returns the chosen robot action and the decision diagnostics.
    fn plan<'py>(&mut self, py: Python<'py>, b: &PyBelief) -> PyResult<(usize, Bound<'py, PyAny>)> {
        let planner = &mut self.inner;
        let belief = b.inner.clone();
        let d = py.detach(|| planner.plan(&belief));
        Ok((d.action, to_py(py, &d.diagnostics)?))
    }
}

/// Episodes and batches against simulated ql-k humans.
#[pyclass(name = "Simulator", frozen)]
struct PySimulator {
    inner: Simulator,
}

#[pymethods]
impl PySimulator {
    #[new]
    #[pyo3(signature = (game, tables, eta0 = 10.0, budget_ms = 0, max_simulations = Some(300), seed = 0))]
    fn new(
        game: &PyGame,
        tables: &PyTables,
        eta0: f64,
        budget_ms: u64,
        max_simulations: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let params = PlannerParams { eta0, budget_ms, max_simulations, seed, ..Default::default() };
        let inner = Simulator::new(game.inner.clone(), tables.inner.clone(), params).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Runs one episode. `scenario` uses the config file's `[scenario]`
    /// keys; the result is the list of trace records (header, steps, outcome).
    #[pyo3(signature = (scenario = None, episode = 0))]
    fn run_episode<'py>(&self, py: Python<'py>, scenario: Option<&Bound<'py, PyDict>>, episode: u64) -> PyResult<Bound<'py, PyAny>> {
        let spec: ScenarioSpec = match scenario {
            Some(d) => from_py(d.as_any())?,
            None => ScenarioSpec::default(),
        };
        let trace = py.detach(|| self.inner.run_episode(&spec, episode)).map_err(value_err)?;
        let mut records = vec![TraceRecord::Header(Box::new(trace.header))];
        records.extend(trace.steps.into_iter().map(|s| TraceRecord::Step(Box::new(s))));
        records.push(TraceRecord::Outcome(trace.outcome));
        to_py(py, &records)
    }

    /// Runs `scenario["reps"]` episodes per (planner, k, λ) cell.
    #[pyo3(signature = (cells, scenario = None))]
    fn run_batch<'py>(
        &self,
        py: Python<'py>,
        cells: Vec<(String, usize, f64)>,
        scenario: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let spec: ScenarioSpec = match scenario {
            Some(d) => from_py(d.as_any())?,
            None => ScenarioSpec::default(),
        };
        let cells = cells
            .into_iter()
            .map(|(d, k, lambda)| Ok(BatchCell { driver: d.parse::<Driver>().map_err(PyValueError::new_err)?, k, lambda }))
            .collect::<PyResult<Vec<_>>>()?;
        let report = py.detach(|| self.inner.run_batch(&spec, &cells)).map_err(value_err)?;
        to_py(py, &report)
    }
}

#[pymodule]
fn qlkplan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGame>()?;
    m.add_class::<PyTables>()?;
    m.add_class::<PyBelief>()?;
    m.add_class::<PyBeliefEngine>()?;
    m.add_class::<PyPlanner>()?;
    m.add_class::<PySimulator>()?;
    m.add_function(wrap_pyfunction!(quantal_response, m)?)?;
    Ok(())
}
