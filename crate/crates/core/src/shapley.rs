//! Shapley values over pixel coalitions: exact enumeration, permutation
//! sampling and the set-average estimator.
//!
//! A player is a pixel location; all of its channels enter or leave a
//! coalition together. Absent pixels take the baseline value.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::forward::{check_input, run_logits, IncrementalForward};
use crate::model::ModelGraph;
use crate::reference::Baseline;
use crate::rng::{mix, Stream};
use crate::tensor::Tensor;

/// Largest player count accepted by [`exact_shapley`].
pub const EXACT_PLAYER_LIMIT: usize = 20;

/// A cooperative game `P ⊆ Ω ↦ v(P)`.
pub trait ValueFunction {
    fn players(&self) -> usize;

    /// `v(P)` where `coalition[i]` tells whether player `i` is in `P`.
    fn value(&self, coalition: &[bool]) -> f64;

    /// Walks `order`, writing `v(pred ∪ {i}) − v(pred)` into `out[i]` for
    /// each player `i`, where `pred` are the players before `i`.
    fn marginals(&self, order: &[usize], out: &mut [f64]) {
        let mut coalition = vec![false; self.players()];
        let mut prev = self.value(&coalition);
        for &i in order {
            coalition[i] = true;
            let cur = self.value(&coalition);
            out[i] = cur - prev;
            prev = cur;
        }
    }

    /// Marginal contribution of `order[position]` to its predecessors.
    fn marginal_at(&self, order: &[usize], position: usize) -> f64 {
        let mut coalition = vec![false; self.players()];
        for &i in &order[..position] {
            coalition[i] = true;
        }
        let without = self.value(&coalition);
        coalition[order[position]] = true;
        self.value(&coalition) - without
    }
}

/// Adapts a closure over coalitions.
pub struct CoalitionFn<F> {
    players: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64> CoalitionFn<F> {
    pub fn new(players: usize, f: F) -> Self {
        CoalitionFn { players, f }
    }
}

impl<F: Fn(&[bool]) -> f64> ValueFunction for CoalitionFn<F> {
    fn players(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        (self.f)(coalition)
    }
}

/// `v(P) = logit[target]` of the image whose pixels outside `P` are replaced
/// by the baseline.
#[derive(Debug, Clone)]
pub struct PixelGame<'m> {
    model: &'m ModelGraph,
    image: Tensor,
    empty_image: Tensor,
    empty_state: IncrementalForward<'m>,
    target: usize,
}

impl<'m> PixelGame<'m> {
    pub fn new(model: &'m ModelGraph, image: &Tensor, baseline: &Baseline, target: usize) -> Result<Self> {
        check_input(model, image)?;
        model.check_target(target)?;
        baseline.check_shape(model.input_shape())?;
        let empty_image = baseline.image(model.input_shape());
        let empty_state = IncrementalForward::new(model, &empty_image)?;
        Ok(PixelGame {
            model,
            image: image.clone(),
            empty_image,
            empty_state,
            target,
        })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    fn matches_baseline(&self, p: usize, values: &[f64]) -> bool {
        let plane = self.image.len() / values.len();
        values
            .iter()
            .enumerate()
            .all(|(ch, v)| v.to_bits() == self.empty_image.data()[ch * plane + p].to_bits())
    }

    fn pixel_values(&self, p: usize, buf: &mut [f64]) {
        let [c, h, w] = self.model.input_shape();
        let (y, x) = (p / w, p % w);
        for (ch, v) in buf.iter_mut().enumerate().take(c) {
            *v = self.image.data()[(ch * h + y) * w + x];
        }
    }
}

impl ValueFunction for PixelGame<'_> {
    fn players(&self) -> usize {
        self.model.pixel_count()
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        let [c, h, w] = self.model.input_shape();
        let mut composed = self.empty_image.clone();
        let (src, dst) = (self.image.data(), composed.data_mut());
        for (p, _) in coalition.iter().enumerate().filter(|(_, &on)| on) {
            for ch in 0..c {
                let i = ch * h * w + p;
                dst[i] = src[i];
            }
        }
        run_logits(self.model, &composed).data()[self.target]
    }

    fn marginals(&self, order: &[usize], out: &mut [f64]) {
        let [c, _, w] = self.model.input_shape();
        let mut state = self.empty_state.clone();
        let mut buf = vec![0.0; c];
        let mut prev = state.logits().data()[self.target];
        for &p in order {
            self.pixel_values(p, &mut buf);
            if self.matches_baseline(p, &buf) {
                // Toggling a pixel that already shows the baseline changes nothing.
                out[p] = 0.0;
                continue;
            }
            state.set_pixel(p / w, p % w, &buf);
            let cur = state.logits().data()[self.target];
            out[p] = cur - prev;
            prev = cur;
        }
    }
}

/// Exact or sampled Shapley values.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEstimate {
    /// One value per player, indexed like `players`.
    pub values: Vec<f64>,
    /// Permutations per player; 0 marks an exact computation.
    pub m: usize,
    /// Unbiased sample variance of the marginals divided by `m`: the squared
    /// standard error of each value. All zero for exact results.
    pub per_player_variance: Vec<f64>,
    pub players: Vec<usize>,
}

impl ShapleyEstimate {
    pub fn is_exact(&self) -> bool {
        self.m == 0
    }

    pub fn standard_error(&self, i: usize) -> f64 {
        libm::sqrt(self.per_player_variance[i])
    }

    pub fn as_tensor(&self, height: usize, width: usize) -> Result<Tensor> {
        Tensor::new(vec![height, width], self.values.clone())
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Exact Shapley values by enumerating all `2ⁿ` coalitions, using the
/// coefficient `|P|!(n−|P|−1)!/n! = 1/(n·C(n−1, |P|))`.
pub fn exact_shapley<V: ValueFunction + ?Sized>(v: &V) -> Result<ShapleyEstimate> {
    let n = v.players();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if n > EXACT_PLAYER_LIMIT {
        return Err(Error::TooManyPlayers {
            players: n,
            limit: EXACT_PLAYER_LIMIT,
        });
    }
    let mut coalition = vec![false; n];
    let table: Vec<f64> = (0..1usize << n)
        .map(|mask| {
            for (i, slot) in coalition.iter_mut().enumerate() {
                *slot = mask & (1 << i) != 0;
            }
            v.value(&coalition)
        })
        .collect();
    let weights: Vec<f64> = (0..n).map(|k| 1.0 / (n as f64 * binomial(n - 1, k) as f64)).collect();
    let values = (0..n)
        .map(|i| {
            let bit = 1usize << i;
            // Marginals grouped by coalition size, then weighted once per size.
            let mut by_size = vec![0.0; n];
            for mask in (0..table.len()).filter(|m| m & bit == 0) {
                by_size[mask.count_ones() as usize] += table[mask | bit] - table[mask];
            }
            by_size.iter().zip(&weights).map(|(s, w)| s * w).sum()
        })
        .collect();
    Ok(ShapleyEstimate {
        values,
        m: 0,
        per_player_variance: vec![0.0; n],
        players: (0..n).collect(),
    })
}

/// Executes independent indexed tasks, returning results in index order.
pub trait TaskRunner {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs tasks one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl TaskRunner for Sequential {
    fn map<T, F>(&self, count: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..count).map(f).collect()
    }
}

/// Where the permutations of a sampling run come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Permutations {
    /// Task `k` shuffles with `Stream::new(mix(seed, k))`.
    Random { seed: u64 },
    /// Task `k` is the `k`-th permutation in lexicographic order; `m` must
    /// equal `n!`.
    Exhaustive,
}

fn factorial(n: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k))
}

/// `k`-th permutation of `0..n` in lexicographic order.
fn nth_permutation(n: usize, mut k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let f = factorial(i).expect("checked by caller");
        out.push(pool.remove(k / f));
        k %= f;
    }
    out
}

/// The permutation used by task `k`.
pub fn task_permutation(source: Permutations, n: usize, k: usize) -> Vec<usize> {
    match source {
        Permutations::Exhaustive => nth_permutation(n, k),
        Permutations::Random { seed } => {
            let mut order: Vec<usize> = (0..n).collect();
            Stream::new(mix(seed, k as u64)).shuffle(&mut order);
            order
        }
    }
}

/// Pairwise (cascade) summation in slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Permutation-sampling estimator, sequential.
pub fn sampled_shapley<V: ValueFunction + Sync + ?Sized>(v: &V, m: usize, seed: u64) -> Result<ShapleyEstimate> {
    sampled_shapley_with(&Sequential, v, m, Permutations::Random { seed })
}

/// Permutation-sampling estimator on any runner.
///
/// Each of the `m` tasks walks one permutation, recording every player's
/// marginal contribution (`n + 1` evaluations). Means and variances are
/// reduced by pairwise summation in task order, so the result is
/// independent of how the runner schedules tasks.
pub fn sampled_shapley_with<R, V>(runner: &R, v: &V, m: usize, source: Permutations) -> Result<ShapleyEstimate>
where
    R: TaskRunner + ?Sized,
    V: ValueFunction + Sync + ?Sized,
{
    let n = v.players();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    if m < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "sampling needs at least 2 permutations, got {m}"
        )));
    }
    if source == Permutations::Exhaustive && factorial(n) != Some(m) {
        return Err(Error::InvalidArgument(alloc::format!(
            "exhaustive enumeration of {n} players needs m = {n}!"
        )));
    }
    let rows: Vec<Vec<f64>> = runner.map(m, |k| {
        let order = task_permutation(source, n, k);
        let mut out = vec![0.0; n];
        v.marginals(&order, &mut out);
        out
    });
    let mut column = vec![0.0; m];
    let mut values = Vec::with_capacity(n);
    let mut per_player_variance = Vec::with_capacity(n);
    for i in 0..n {
        for (c, row) in column.iter_mut().zip(&rows) {
            *c = row[i];
        }
        let mean = pairwise_sum(&column) / m as f64;
        for c in column.iter_mut() {
            *c = (*c - mean) * (*c - mean);
        }
        let var = pairwise_sum(&column) / (m - 1) as f64;
        values.push(mean);
        per_player_variance.push(var / m as f64);
    }
    Ok(ShapleyEstimate {
        values,
        m,
        per_player_variance,
        players: (0..n).collect(),
    })
}

/// Mean of sampled Shapley values over a player set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAverage {
    pub mean: f64,
    /// `mean(per-player variance) / |S|`, the shared-variance estimate of the
    /// variance of `mean`.
    pub variance: f64,
    /// Per-member estimates in the order of `S`.
    pub members: Vec<f64>,
    pub member_variance: Vec<f64>,
}

/// Average sampled Shapley value over `set`, `m` permutations per member and
/// `m·|S|` samples in total.
///
/// Member `j` of `set` draws its own permutations exactly as a
/// [`sampled_shapley`] run seeded with `seed + j` would, so member estimates
/// are mutually independent and the first member matches
/// `sampled_shapley(v, m, seed)` bit for bit.
pub fn set_average_shapley<V: ValueFunction + Sync + ?Sized>(v: &V, set: &[usize], m: usize, seed: u64) -> Result<SetAverage> {
    set_average_shapley_with(&Sequential, v, set, m, seed)
}

pub fn set_average_shapley_with<R, V>(runner: &R, v: &V, set: &[usize], m: usize, seed: u64) -> Result<SetAverage>
where
    R: TaskRunner + ?Sized,
    V: ValueFunction + Sync + ?Sized,
{
    let n = v.players();
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if let Some(&bad) = set.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidArgument(alloc::format!("player {bad} outside 0..{n}")));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "sampling needs at least 2 permutations, got {m}"
        )));
    }
    let samples: Vec<f64> = runner.map(set.len() * m, |task| {
        let (j, k) = (task / m, task % m);
        let source = Permutations::Random {
            seed: seed.wrapping_add(j as u64),
        };
        let order = task_permutation(source, n, k);
        let pos = order.iter().position(|&p| p == set[j]).expect("permutation of all players");
        v.marginal_at(&order, pos)
    });
    let mut members = Vec::with_capacity(set.len());
    let mut member_variance = Vec::with_capacity(set.len());
    for chunk in samples.chunks(m) {
        let mean = pairwise_sum(chunk) / m as f64;
        let sq: Vec<f64> = chunk.iter().map(|x| (x - mean) * (x - mean)).collect();
        members.push(mean);
        member_variance.push(pairwise_sum(&sq) / (m - 1) as f64 / m as f64);
    }
    let k = set.len() as f64;
    Ok(SetAverage {
        mean: pairwise_sum(&members) / k,
        variance: pairwise_sum(&member_variance) / k / k,
        members,
        member_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;

    fn linear_game(w: &'static [f64], x: &'static [f64], b: &'static [f64]) -> CoalitionFn<impl Fn(&[bool]) -> f64> {
        CoalitionFn::new(w.len(), move |c: &[bool]| {
            (0..w.len()).map(|i| w[i] * if c[i] { x[i] } else { b[i] }).sum()
        })
    }

    #[test]
    fn exact_linear_game() {
        let g = linear_game(&[1.0, -2.0, 0.5], &[3.0, 1.0, 2.0], &[1.0, 0.0, 4.0]);
        let est = exact_shapley(&g).unwrap();
        let expected = [2.0, -2.0, -1.0];
        for (a, b) in est.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(est.is_exact());
    }

    #[test]
    fn exact_unanimity_game() {
        let g = CoalitionFn::new(2, |c: &[bool]| if c[0] && c[1] { 1.0 } else { 0.0 });
        assert_eq!(exact_shapley(&g).unwrap().values, vec![0.5, 0.5]);
    }

    #[test]
    fn exact_refuses_large_games() {
        let g = CoalitionFn::new(21, |_: &[bool]| 0.0);
        assert_eq!(exact_shapley(&g), Err(Error::TooManyPlayers { players: 21, limit: 20 }));
    }

    #[test]
    fn exhaustive_sampling_of_three_players_is_exact() {
        let g = CoalitionFn::new(3, |c: &[bool]| {
            let k = c.iter().filter(|&&b| b).count() as f64;
            k * k + if c[0] && !c[2] { 1.5 } else { 0.0 }
        });
        let exact = exact_shapley(&g).unwrap();
        let est = sampled_shapley_with(&Sequential, &g, 6, Permutations::Exhaustive).unwrap();
        for (a, b) in est.values.iter().zip(&exact.values) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(sampled_shapley_with(&Sequential, &g, 5, Permutations::Exhaustive).is_err());
    }

    #[test]
    fn nth_permutation_enumerates_lexicographically() {
        let all: Vec<Vec<usize>> = (0..6).map(|k| nth_permutation(3, k)).collect();
        assert_eq!(all[0], vec![0, 1, 2]);
        assert_eq!(all[1], vec![0, 2, 1]);
        assert_eq!(all[5], vec![2, 1, 0]);
    }

    #[test]
    fn linear_game_has_zero_variance() {
        let g = linear_game(&[1.0, -2.0, 0.5, 4.0], &[3.0, 1.0, 2.0, -1.0], &[0.0; 4]);
        let est = sampled_shapley(&g, 10, 3).unwrap();
        assert!(est.per_player_variance.iter().all(|&v| v < 1e-28));
        assert!((est.values[3] + 4.0).abs() < 1e-12);
        assert!(sampled_shapley(&g, 1, 3).is_err());
    }

    #[test]
    fn set_average_single_member_matches_sampler() {
        let g = CoalitionFn::new(4, |c: &[bool]| {
            let k = c.iter().filter(|&&b| b).count() as f64;
            libm::sin(k) + if c[1] { 0.3 } else { 0.0 }
        });
        let full = sampled_shapley(&g, 40, 11).unwrap();
        let avg = set_average_shapley(&g, &[2], 40, 11).unwrap();
        assert_eq!(avg.mean, full.values[2]);
        assert_eq!(avg.variance, full.per_player_variance[2]);
        assert!(set_average_shapley(&g, &[], 40, 11).is_err());
        assert!(set_average_shapley(&g, &[4], 40, 11).is_err());
    }

    #[test]
    fn pixel_game_incremental_matches_direct_values() {
        let w = Tensor::new(vec![2, 4], vec![1.0, -1.0, 0.5, 2.0, -0.5, 1.0, 1.0, -3.0]).unwrap();
        let model = ModelGraph::new(
            [1, 2, 2],
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: w,
                    bias: Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
                },
                Layer::Relu,
                Layer::Dense {
                    weight: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
                    bias: Tensor::zeros(&[1]),
                },
            ],
            vec![],
        )
        .unwrap();
        let image = Tensor::new(vec![1, 2, 2], vec![0.9, 0.1, 0.4, 0.7]).unwrap();
        let game = PixelGame::new(&model, &image, &Baseline::ChannelMean(vec![0.5]), 0).unwrap();
        let order = [2, 0, 3, 1];
        let mut inc = [0.0; 4];
        ValueFunction::marginals(&game, &order, &mut inc);
        let mut direct = [0.0; 4];
        let mut coalition = [false; 4];
        let mut prev = game.value(&coalition);
        for &p in &order {
            coalition[p] = true;
            let cur = game.value(&coalition);
            direct[p] = cur - prev;
            prev = cur;
        }
        assert_eq!(inc, direct);
    }
}
