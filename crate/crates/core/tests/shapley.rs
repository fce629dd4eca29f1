mod common;

use attrib_core::reference::Baseline;
use attrib_core::rng::Stream;
use attrib_core::shapley::{
    exact_shapley, sampled_shapley, sampled_shapley_with, set_average_shapley, CoalitionFn, Permutations, PixelGame, Sequential,
    TaskRunner, ValueFunction,
};
use common::{assert_close, cnn, random_image, tiny};
use proptest::prelude::*;

/// A random game on `n` players: singleton weights, pairwise interactions
/// and one threshold term, so marginals depend on the coalition.
fn random_game(n: usize, seed: u64) -> impl Fn(&[bool]) -> f64 + Sync {
    let mut rng = Stream::new(seed);
    let singles: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
    let pairs: Vec<(usize, usize, f64)> = (0..n)
        .map(|_| (rng.below(n as u64) as usize, rng.below(n as u64) as usize, rng.next_gaussian()))
        .collect();
    let threshold = 1 + rng.below(n as u64) as usize;
    let bonus = rng.next_gaussian();
    move |c: &[bool]| {
        let mut v: f64 = (0..n).filter(|&i| c[i]).map(|i| singles[i]).sum();
        v += pairs.iter().filter(|(a, b, _)| c[*a] && c[*b]).map(|p| p.2).sum::<f64>();
        if c.iter().filter(|&&x| x).count() >= threshold {
            v += bonus;
        }
        v
    }
}

fn swap(c: &[bool], i: usize, j: usize) -> Vec<bool> {
    let mut s = c.to_vec();
    s.swap(i, j);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn efficiency(n in 1usize..9, seed in any::<u64>()) {
        let v = CoalitionFn::new(n, random_game(n, seed));
        let phi = exact_shapley(&v).unwrap();
        let total = v.value(&vec![true; n]) - v.value(&vec![false; n]);
        prop_assert!((phi.values.iter().sum::<f64>() - total).abs() < 1e-9);
    }

    #[test]
    fn symmetric_players_get_equal_values(n in 2usize..8, seed in any::<u64>()) {
        let g = random_game(n, seed);
        let v = CoalitionFn::new(n, |c: &[bool]| g(c) + g(&swap(c, 0, 1)));
        let phi = exact_shapley(&v).unwrap();
        prop_assert!((phi.values[0] - phi.values[1]).abs() < 1e-9);
    }

    #[test]
    fn additivity(n in 1usize..8, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (random_game(n, s1), random_game(n, s2));
        let sum = exact_shapley(&CoalitionFn::new(n, |c: &[bool]| a(c) + b(c))).unwrap();
        let pa = exact_shapley(&CoalitionFn::new(n, &a)).unwrap();
        let pb = exact_shapley(&CoalitionFn::new(n, &b)).unwrap();
        for i in 0..n {
            prop_assert!((sum.values[i] - pa.values[i] - pb.values[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn monotonicity(n in 1usize..8, seed in any::<u64>(), who in any::<prop::sample::Index>()) {
        // w adds a nonnegative amount to every marginal of player i.
        let i = who.index(n);
        let g = random_game(n, seed);
        let h = random_game(n, seed ^ 0x5555);
        let w = |c: &[bool]| {
            let mut without = c.to_vec();
            without[i] = false;
            g(c) + if c[i] { h(&without).abs() } else { 0.0 }
        };
        let pv = exact_shapley(&CoalitionFn::new(n, &g)).unwrap();
        let pw = exact_shapley(&CoalitionFn::new(n, w)).unwrap();
        prop_assert!(pw.values[i] >= pv.values[i] - 1e-12);
    }

    #[test]
    fn dummy_players_get_zero(n in 2usize..8, seed in any::<u64>()) {
        let g = random_game(n, seed);
        let v = CoalitionFn::new(n, |c: &[bool]| {
            let mut d = c.to_vec();
            d[n - 1] = false;
            g(&d)
        });
        prop_assert_eq!(exact_shapley(&v).unwrap().values[n - 1], 0.0);
    }
}

#[test]
fn exhaustive_permutations_reproduce_exact_values() {
    let model = tiny();
    let image = random_image(model.input_shape(), 1);
    let game = PixelGame::new(&model, &image, &Baseline::ChannelMean(vec![0.5]), 2).unwrap();
    let exact = exact_shapley(&game).unwrap();
    let all = sampled_shapley_with(&Sequential, &game, 362_880, Permutations::Exhaustive).unwrap();
    assert_close(&all.values, &exact.values, 1e-12);
}

#[test]
fn exhaustive_mode_checks_the_count() {
    let game = CoalitionFn::new(3, |c: &[bool]| c.iter().filter(|&&x| x).count() as f64);
    assert!(sampled_shapley_with(&Sequential, &game, 5, Permutations::Exhaustive).is_err());
    let phi = sampled_shapley_with(&Sequential, &game, 6, Permutations::Exhaustive).unwrap();
    assert_eq!(phi.values, vec![1.0, 1.0, 1.0]);
}

#[test]
fn incremental_marginals_match_full_evaluation() {
    let model = cnn();
    let image = random_image(model.input_shape(), 2);
    let game = PixelGame::new(&model, &image, &Baseline::ChannelMean(vec![0.4, 0.5, 0.6]), 3).unwrap();
    let n = game.players();
    let mut rng = Stream::new(8);
    for _ in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut fast = vec![0.0; n];
        game.marginals(&order, &mut fast);
        // Spot-check against two full forward passes per player.
        for &pos in &[0, 1, 17, 400, 1023] {
            let slow = game.marginal_at(&order, pos);
            let p = order[pos];
            assert!(
                (fast[p] - slow).abs() <= 1e-12 * (1.0 + slow.abs()),
                "player {p}: {} vs {slow}",
                fast[p]
            );
        }
    }
}

/// Runs tasks back to front, to show the result does not depend on the
/// execution order.
struct Reversed;

impl TaskRunner for Reversed {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let mut out: Vec<(usize, T)> = (0..count).rev().map(|k| (k, f(k))).collect();
        out.sort_by_key(|(k, _)| *k);
        out.into_iter().map(|(_, t)| t).collect()
    }
}

#[test]
fn sampling_is_independent_of_task_order() {
    let model = tiny();
    let image = random_image(model.input_shape(), 3);
    let game = PixelGame::new(&model, &image, &Baseline::zero(1), 0).unwrap();
    let a = sampled_shapley_with(&Sequential, &game, 64, Permutations::Random { seed: 5 }).unwrap();
    let b = sampled_shapley_with(&Reversed, &game, 64, Permutations::Random { seed: 5 }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, sampled_shapley(&game, 64, 5).unwrap());
    assert_ne!(a.values, sampled_shapley(&game, 64, 6).unwrap().values);
}

#[test]
fn sampled_estimate_brackets_exact_values() {
    let model = tiny();
    let image = random_image(model.input_shape(), 4);
    let game = PixelGame::new(&model, &image, &Baseline::zero(1), 1).unwrap();
    let exact = exact_shapley(&game).unwrap();
    let est = sampled_shapley(&game, 2000, 9).unwrap();
    for i in 0..9 {
        let se = est.standard_error(i);
        assert!((est.values[i] - exact.values[i]).abs() <= 5.0 * se + 1e-12, "player {i}");
    }
}

#[test]
fn set_average_first_member_matches_plain_sampling() {
    let model = tiny();
    let image = random_image(model.input_shape(), 6);
    let game = PixelGame::new(&model, &image, &Baseline::zero(1), 0).unwrap();
    let avg = set_average_shapley(&game, &[4, 1, 7], 50, 21).unwrap();
    let plain = sampled_shapley(&game, 50, 21).unwrap();
    assert_eq!(avg.members[0], plain.values[4]);
    assert_eq!(avg.members.len(), 3);
    let mean = avg.members.iter().sum::<f64>() / 3.0;
    assert!((avg.mean - mean).abs() < 1e-15);
}

#[test]
fn exact_enumeration_refuses_large_games() {
    let model = cnn();
    let image = random_image(model.input_shape(), 7);
    let game = PixelGame::new(&model, &image, &Baseline::zero(3), 0).unwrap();
    assert!(exact_shapley(&game).is_err());
}
