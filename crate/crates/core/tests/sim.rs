mod common;

use std::sync::Arc;

use qlkplan::grid::PhysicalState;
use qlkplan::sim::{
    BatchCell, CellReport, Driver, Episode, EpisodeTrace, Outcome, ScenarioSpec, SimError, Simulator,
};
use qlkplan::PlannerParams;

use common::{desk, Fabricated};

fn params(sims: usize) -> PlannerParams {
    PlannerParams { budget_ms: 0, max_simulations: Some(sims), ..Default::default() }
}

fn simulator(sims: usize) -> Simulator {
    let (game, tables) = desk();
    Simulator::new(game, tables, params(sims)).unwrap()
}

fn spec(start: PhysicalState) -> ScenarioSpec {
    ScenarioSpec { start, max_steps: 30, seed: 17, reps: 4, ..Default::default() }
}

fn at(x_r: f64, y_r: f64, x_h: f64, v_r: f64, v_h: f64) -> PhysicalState {
    PhysicalState { x_r, y_r, x_h, v_r, v_h }
}

fn scrub(mut t: EpisodeTrace) -> EpisodeTrace {
    for s in &mut t.steps {
        if let Some(d) = s.diagnostics.as_mut() {
            d.elapsed_ms = 0.0;
        }
    }
    t
}

#[test]
fn robot_alone_merges_in_minimum_lateral_time() {
    let sim = simulator(300);
    let game = sim.game().clone();
    // Human parked at the far end of the road.
    let s = spec(at(2.0, 0.0, 58.0, 12.0, 0.0));
    let trace = sim.run_episode(&s, 0).unwrap();
    assert_eq!(trace.outcome.outcome, Outcome::Merged);

    // Fewest lateral steps to cover the lane offset at the configured lateral speed.
    let cfg = game.config();
    let offset = cfg.grid.y.step * (cfg.grid.y.count - 1) as f64;
    let per_step = cfg.actions.lateral_speed * cfg.dt;
    let steps = (offset / per_step - 1e-9).ceil();
    assert_eq!(trace.outcome.tm, Some(steps * cfg.dt));
}

#[test]
fn identical_seed_gives_identical_traces() {
    let sim = simulator(200);
    let s = spec(at(2.0, 0.0, 4.0, 8.0, 8.0));
    let a = scrub(sim.run_episode(&s, 3).unwrap());
    let b = scrub(sim.run_episode(&s, 3).unwrap());
    assert_eq!(a, b);
    let qlk = ScenarioSpec { driver: Driver::Qlk, ..s };
    assert_eq!(sim.run_episode(&qlk, 1).unwrap(), sim.run_episode(&qlk, 1).unwrap());
}

#[test]
fn traces_round_trip_and_replay() {
    let sim = simulator(150);
    let s = ScenarioSpec { true_k: 2, true_lambda: 0.5, ..spec(at(2.0, 0.0, 0.0, 8.0, 8.0)) };
    let trace = sim.run_episode(&s, 5).unwrap();
    assert!(!trace.steps.is_empty());
    trace.replay(sim.game()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.jsonl");
    trace.save(&path).unwrap();
    let back = EpisodeTrace::load(&path).unwrap();
    assert_eq!(back, trace);
    back.replay(sim.game()).unwrap();

    for step in &trace.steps {
        let total: f64 = step.belief.latent.iter().map(|l| l.p).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    let mut tampered = trace.clone();
    let last = tampered.steps.len() - 1;
    tampered.steps[last].human_action = (tampered.steps[last].human_action + 1) % 3;
    let changed = sim.game().transition(
        tampered.steps[last].state.index,
        qlkplan::ActionPair { robot: tampered.steps[last].robot_action, human: tampered.steps[last].human_action },
    );
    if changed != tampered.steps[last].next_state.index {
        assert!(matches!(tampered.replay(sim.game()), Err(SimError::ReplayMismatch { .. })));
    }
}

#[test]
fn collision_iff_an_unsafe_state_was_visited() {
    let sim = simulator(100);
    let s = ScenarioSpec { driver: Driver::Qlk, robot_level: 1, robot_lambda: 0.5, ..spec(at(2.0, 0.0, 2.0, 8.0, 8.0)) };
    for ep in 0..10 {
        let t = sim.run_episode(&ScenarioSpec { seed: ep, ..s.clone() }, ep).unwrap();
        let unsafe_seen = t.steps.iter().any(|st| !sim.game().is_safe_index(st.next_state.index));
        assert_eq!(unsafe_seen, t.outcome.outcome == Outcome::Collision);
        assert_eq!(t.outcome.tm.is_some(), t.outcome.outcome == Outcome::Merged);
    }
}

#[test]
fn batch_metrics_match_traces() {
    let sim = simulator(100);
    let s = ScenarioSpec { randomize_human_m: Some(10.0), ..spec(at(2.0, 0.0, 2.0, 8.0, 8.0)) };
    let cells = [
        BatchCell { driver: Driver::Ours, k: 1, lambda: 1.0 },
        BatchCell { driver: Driver::Blp1, k: 2, lambda: 0.5 },
    ];
    let (report, traces) = sim.run_batch_traces(&s, &cells).unwrap();
    for (cell, tr) in report.cells.iter().zip(&traces) {
        assert_eq!(cell.episodes, s.reps);
        let merged = tr.iter().filter(|t| t.outcome.outcome == Outcome::Merged).count();
        assert_eq!(cell.rs, merged as f64 / tr.len() as f64);
        let tms: Vec<f64> = tr.iter().filter_map(|t| t.outcome.tm).collect();
        if tms.is_empty() {
            assert_eq!(cell.tm_mean, None);
        } else {
            let mean = tms.iter().sum::<f64>() / tms.len() as f64;
            assert!((cell.tm_mean.unwrap() - mean).abs() < 1e-12);
        }
        assert_eq!(cell.merged + cell.collisions + cell.deadlocks + cell.timeouts, cell.episodes);
    }
    // Blp1 episodes ran with η₀ = 0.
    assert!(traces[1].iter().all(|t| t.header.planner.eta0 == 0.0));
    assert!(report.metrics_csv().lines().count() == 3);
    assert!(sim.run_batch(&s, &[]).is_err());
}

#[test]
fn success_rate_is_the_merged_fraction() {
    let sim = simulator(50);
    let base = sim.run_episode(&spec(at(2.0, 0.0, 58.0, 12.0, 0.0)), 0).unwrap();
    assert_eq!(base.outcome.outcome, Outcome::Merged);
    let mut traces = vec![base.clone(); 20];
    for t in traces.iter_mut().take(2) {
        t.outcome.outcome = Outcome::Timeout;
        t.outcome.tm = None;
    }
    let cell = BatchCell { driver: Driver::Ours, k: 1, lambda: 1.0 };
    assert_eq!(CellReport::from_traces(&cell, &traces[2..], 30).rs, 1.0);
    assert!((CellReport::from_traces(&cell, &traces, 30).rs - 0.9).abs() < 1e-12);
}

fn live(sim: &Simulator, start: PhysicalState, cap: usize) -> Episode {
    let s = ScenarioSpec { max_steps: cap, ..spec(start) };
    Episode::live(sim, &s, 0).unwrap()
}

#[test]
fn mutual_standstill_is_a_deadlock() {
    let sim = simulator(10);
    let mut ep = live(&sim, at(10.0, 0.0, 10.0, 0.0, 0.0), 12);
    while !ep.is_finished() {
        ep.advance(0, None, 0).unwrap();
    }
    assert_eq!(ep.outcome(), Some(Outcome::Deadlock));
    assert_eq!(ep.t(), 12);
    assert!(matches!(ep.advance(0, None, 0), Err(SimError::Finished)));
}

#[test]
fn moving_gap_at_the_cap_is_a_timeout() {
    let sim = simulator(10);
    let mut ep = live(&sim, at(20.0, 0.0, 0.0, 0.0, 4.0), 8);
    while !ep.is_finished() {
        ep.advance(0, None, 1).unwrap();
    }
    assert_eq!(ep.outcome(), Some(Outcome::Timeout));
}

#[test]
fn stranded_at_the_road_end_is_a_deadlock() {
    let sim = simulator(10);
    let mut ep = live(&sim, at(40.0, 0.0, 0.0, 12.0, 0.0), 60);
    while !ep.is_finished() {
        ep.advance(1, None, 1).unwrap();
    }
    assert!(ep.t() < 60);
    assert_eq!(ep.outcome(), Some(Outcome::Deadlock));
}

#[test]
fn collision_ends_the_episode_on_the_same_step() {
    let sim = simulator(10);
    // Stopped side by side, one lateral step from overlapping.
    let mut ep = live(&sim, at(10.0, 1.44, 10.0, 0.0, 0.0), 60);
    ep.advance(3, None, 1).unwrap();
    assert!(ep.is_finished());
    let trace = ep.finish();
    assert_eq!(trace.outcome.outcome, Outcome::Collision);
    assert_eq!(trace.outcome.steps, 1);
    assert!(trace.outcome.near_miss);
}

#[test]
fn impossible_human_action_resets_the_belief() {
    let (game, _) = desk();
    let brake = vec![1.0, 0.0, 0.0];
    let fab = Fabricated {
        humans: [0.5, 1.0].iter().flat_map(|&l| [(1, l, brake.clone()), (2, l, brake.clone())]).collect(),
        robot_values: vec![(2, 0.0), (3, 0.0)],
    };
    let mut tables = fab.build(&game);
    tables.solver.lambdas = vec![0.5, 1.0];
    let sim = Simulator::new(game, Arc::new(tables), params(10)).unwrap();
    let mut ep = live(&sim, at(2.0, 0.0, 30.0, 4.0, 4.0), 60);
    let rec = ep.advance(1, None, 2).unwrap().clone();
    assert!(rec.belief_reset);
    assert_eq!(ep.belief().latent, sim.engine().space().uniform());
    let rec = ep.advance(1, None, 0).unwrap();
    assert!(!rec.belief_reset);
}

#[test]
fn unknown_true_type_is_rejected() {
    let sim = simulator(10);
    let s = ScenarioSpec { true_lambda: 0.8, ..spec(at(2.0, 0.0, 4.0, 8.0, 8.0)) };
    assert!(matches!(sim.run_episode(&s, 0), Err(SimError::UnknownTrueType { .. })));
    let bad = spec(at(2.0, 3.6, 4.0, 8.0, 8.0));
    assert!(matches!(sim.run_episode(&bad, 0), Err(SimError::BadStart)));
}
