mod common;

use std::sync::Arc;

use proptest::prelude::*;
use qlkplan::belief::{entropy, BeliefError};
use qlkplan::config::RewardWeights;
use qlkplan::{ActionPair, Belief, BeliefEngine, Game, LatentSpace};

use common::{desk, idx, Fabricated};

const MAINTAIN: usize = 1;

/// Two level-1 hypotheses that disagree about braking versus holding speed.
fn two_types(rows: [[f64; 3]; 2]) -> (Arc<Game>, BeliefEngine) {
    let (game, _) = desk();
    let fab = Fabricated {
        humans: vec![(1, 0.5, rows[0].to_vec()), (1, 1.0, rows[1].to_vec())],
        robot_values: vec![(2, 0.0)],
    };
    let tables = Arc::new(fab.build(&game));
    let engine = BeliefEngine::new(game.clone(), tables, LatentSpace::product([1], &[0.5, 1.0])).unwrap();
    (game, engine)
}

fn start(game: &Game) -> usize {
    idx(game, 2, 0, 10, 2, 2)
}

fn successor(game: &Game, s: usize, human: usize) -> usize {
    game.transition(s, ActionPair { robot: MAINTAIN, human })
}

#[test]
fn transition_prob_sums_human_action_probabilities() {
    let (game, engine) = two_types([[0.6, 0.4, 0.0], [0.0, 0.0, 1.0]]);
    let s = start(&game);
    let (brake, hold, accel) = (successor(&game, s, 0), successor(&game, s, 1), successor(&game, s, 2));
    assert!(brake != hold && hold != accel);
    assert!((engine.transition_prob(s, 0, MAINTAIN, brake, 0) - 0.6).abs() < 1e-12);
    assert!((engine.transition_prob(s, 0, MAINTAIN, hold, 0) - 0.4).abs() < 1e-12);
    assert_eq!(engine.transition_prob(s, 0, MAINTAIN, accel, 0), 0.0);
    // Point-mass policy.
    assert_eq!(engine.transition_prob(s, 1, MAINTAIN, accel, 1), 1.0);
    assert_eq!(engine.transition_prob(s, 1, MAINTAIN, hold, 1), 0.0);
    // Latents never change.
    assert_eq!(engine.transition_prob(s, 0, MAINTAIN, brake, 1), 0.0);
}

#[test]
fn predict_two_type_mixture() {
    let (game, engine) = two_types([[0.8, 0.2, 0.0], [0.2, 0.8, 0.0]]);
    let s = start(&game);
    let (brake, hold) = (successor(&game, s, 0), successor(&game, s, 1));
    let b = Belief::new(s, vec![0.5, 0.5]);
    let pred = engine.predict(&b, MAINTAIN);
    assert_eq!(pred.successors.len(), 2);
    for (state, theta, want) in [(brake, 0, 0.4), (brake, 1, 0.1), (hold, 0, 0.1), (hold, 1, 0.4)] {
        assert!((pred.mass(state, theta) - want).abs() < 1e-12);
    }
    assert!((engine.observation_prob(brake, &b, MAINTAIN) - 0.5).abs() < 1e-12);
    assert_eq!(engine.observation_prob(successor(&game, s, 2), &b, MAINTAIN), 0.0);

    let post = engine.update(&b, MAINTAIN, brake).unwrap();
    assert_eq!(post.state, brake);
    assert!((post.latent[0] - 0.8).abs() < 1e-12 && (post.latent[1] - 0.2).abs() < 1e-12);

    let ig = engine.info_gain(&b, MAINTAIN);
    let want = entropy(&[0.5, 0.5]) - entropy(&[0.8, 0.2]);
    assert!((ig - want).abs() < 1e-12);
    assert!((ig - 0.1927).abs() < 1e-4);
}

#[test]
fn point_mass_beliefs() {
    let (game, engine) = two_types([[0.0, 1.0, 0.0], [0.2, 0.8, 0.0]]);
    let s = start(&game);
    let hold = successor(&game, s, 1);
    let b = Belief::new(s, vec![1.0, 0.0]);
    let pred = engine.predict(&b, MAINTAIN);
    assert_eq!(pred.successors.len(), 1);
    assert_eq!(pred.successors[0].state, hold);
    assert_eq!(pred.total_mass(), 1.0);
    assert_eq!(engine.update(&b, MAINTAIN, hold).unwrap().latent, vec![1.0, 0.0]);
    assert_eq!(engine.info_gain(&b, MAINTAIN), 0.0);
    assert_eq!(b.entropy(), 0.0);
}

#[test]
fn identical_types_leave_the_prior_unchanged() {
    let (game, engine) = two_types([[0.3, 0.7, 0.0], [0.3, 0.7, 0.0]]);
    let s = start(&game);
    let b = Belief::new(s, vec![0.25, 0.75]);
    for h in 0..2 {
        let post = engine.update(&b, MAINTAIN, successor(&game, s, h)).unwrap();
        assert!((post.latent[0] - 0.25).abs() < 1e-12);
    }
    assert!(engine.info_gain(&b, MAINTAIN).abs() < 1e-12);
}

#[test]
fn zero_likelihood_observation_is_an_error() {
    let (game, engine) = two_types([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    let s = start(&game);
    let err = engine.update(&engine.uniform_belief(s), MAINTAIN, successor(&game, s, 2)).unwrap_err();
    assert!(matches!(err, BeliefError::ZeroLikelihood { action: MAINTAIN, .. }), "{err}");
}

#[test]
fn belief_reward_examples() {
    let (game, engine) = two_types([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0]]);
    let s = start(&game);
    let (brake, hold) = (successor(&game, s, 0), successor(&game, s, 1));
    let mut rewards = vec![0.0; game.num_states()];
    rewards[brake] = 2.0;
    rewards[hold] = 4.0;
    let mixed = Belief::new(s, vec![1.0, 0.0]);
    let pred = engine.predict(&mixed, MAINTAIN);
    assert!((engine.belief_reward_table(&mixed, &pred, &rewards) - 3.0).abs() < 1e-12);

    let det = Belief::new(s, vec![0.0, 1.0]);
    let w = RewardWeights::default_robot();
    let want = game.reward(&game.grid().state(hold), &w);
    assert!((engine.belief_reward(&det, MAINTAIN, &w) - want).abs() < 1e-12);
    assert_eq!(engine.belief_reward(&mixed, MAINTAIN, &RewardWeights::default()), 0.0);
}

#[test]
fn uniform_latent_entropy() {
    let space = LatentSpace::product([1, 2], &[0.5, 0.8, 1.0]);
    assert!((entropy(&space.uniform()) - 6f64.ln()).abs() < 1e-12);
    assert!((entropy(&[0.8, 0.2]) - 0.5004).abs() < 1e-4);
}

fn desk_engine() -> BeliefEngine {
    let (game, tables) = desk();
    BeliefEngine::new(game, tables, LatentSpace::product([1, 2], &[0.5, 1.0])).unwrap()
}

fn latent_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 4).prop_filter_map("non-zero", |w| {
        let z: f64 = w.iter().sum();
        (z > 1e-6).then(|| w.iter().map(|x| x / z).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prediction_and_update_are_consistent(
        s in 0usize..57_600, latent in latent_strategy(), a in 0usize..6,
    ) {
        let engine = desk_engine();
        let game = engine.game().clone();
        let s = s % game.num_states();
        let b = Belief::new(s, latent.clone());
        let pred = engine.predict(&b, a);

        prop_assert!((pred.total_mass() - 1.0).abs() < 1e-9);
        for (m, p) in pred.latent_marginal().iter().zip(&latent) {
            prop_assert!((m - p).abs() < 1e-9, "latent marginal moved");
        }
        let mut obs_total = 0.0;
        for succ in &pred.successors {
            let o = engine.observation_prob(succ.state, &b, a);
            obs_total += o;
            let post = engine.update(&b, a, succ.state).unwrap();
            prop_assert!((post.total_mass() - 1.0).abs() < 1e-9);
            for theta in 0..4 {
                prop_assert!((o * post.latent[theta] - pred.mass(succ.state, theta)).abs() < 1e-9);
            }
        }
        prop_assert!((obs_total - 1.0).abs() < 1e-9);

        let ig = engine.info_gain(&b, a);
        prop_assert!(ig >= -1e-9);
        prop_assert!(ig <= b.entropy() + 1e-9);
        prop_assert!(b.entropy() <= (4f64).ln() + 1e-12);
    }

    #[test]
    fn transition_rows_sum_to_one(s in 0usize..57_600, a in 0usize..6, theta in 0usize..4) {
        let engine = desk_engine();
        let game = engine.game().clone();
        let s = s % game.num_states();
        let mut targets: Vec<usize> =
            (0..game.num_human_actions()).map(|h| game.transition(s, ActionPair { robot: a, human: h })).collect();
        targets.sort_unstable();
        targets.dedup();
        let total: f64 = targets.iter().map(|&t| engine.transition_prob(s, theta, a, t, theta)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for &t in &targets {
            prop_assert_eq!(engine.transition_prob(s, theta, a, t, (theta + 1) % 4), 0.0);
        }
    }

    #[test]
    fn uniform_maximizes_entropy(latent in latent_strategy()) {
        prop_assert!(entropy(&latent) <= entropy(&[0.25; 4]) + 1e-12);
    }
}
