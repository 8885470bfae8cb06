//! Independent reference implementations used to verify the library.
//!
//! Everything here is deliberately written against plain nested `Vec`s with
//! naive loops, separate from the ndarray code paths under test. Keep it
//! that way: these are the oracles.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Aggregation used by the reference backup.
#[derive(Clone, Copy, PartialEq)]
pub enum Agg {
    Min,
    Weighted,
    Nominal,
    Max,
}

/// Plain-Vec tabular instance: `reward[s][a]`, `kernels[k][s][a][s']`.
#[derive(Clone)]
pub struct RefInstance {
    pub reward: Vec<Vec<f64>>,
    pub kernels: Vec<Vec<Vec<Vec<f64>>>>,
    pub weights: Vec<f64>,
    pub gamma: f64,
}

impl RefInstance {
    pub fn n_states(&self) -> usize {
        self.reward.len()
    }
    pub fn n_actions(&self) -> usize {
        self.reward[0].len()
    }
}

/// Expected next value under one kernel row.
fn expect_next(kernel: &[Vec<Vec<f64>>], s: usize, a: usize, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (s2, val) in v.iter().enumerate() {
        acc += kernel[s][a][s2] * val;
    }
    acc
}

/// Aggregated continuation for one state-action pair.
pub fn ref_continuation(inst: &RefInstance, agg: Agg, s: usize, a: usize, v: &[f64]) -> f64 {
    match agg {
        Agg::Nominal => expect_next(&inst.kernels[0], s, a, v),
        Agg::Min => {
            let mut best = f64::INFINITY;
            for k in &inst.kernels {
                best = best.min(expect_next(k, s, a, v));
            }
            best
        }
        Agg::Max => {
            let mut best = f64::NEG_INFINITY;
            for k in &inst.kernels {
                best = best.max(expect_next(k, s, a, v));
            }
            best
        }
        Agg::Weighted => {
            let mut acc = 0.0;
            for (k, w) in inst.kernels.iter().zip(&inst.weights) {
                acc += w * expect_next(k, s, a, v);
            }
            acc
        }
    }
}

/// Reference fixed-policy backup with optional KL penalty toward `reference`.
pub fn ref_backup(
    inst: &RefInstance,
    agg: Agg,
    policy: &[Vec<f64>],
    reference: &[Vec<f64>],
    tau: f64,
    v: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; inst.n_states()];
    for s in 0..inst.n_states() {
        let mut acc = 0.0;
        for a in 0..inst.n_actions() {
            let p = policy[s][a];
            if p == 0.0 {
                continue;
            }
            let mut term = inst.reward[s][a] + inst.gamma * ref_continuation(inst, agg, s, a, v);
            if tau > 0.0 {
                term -= tau * (p / reference[s][a]).ln();
            }
            acc += p * term;
        }
        out[s] = acc;
    }
    out
}

/// Reference fixed point of `ref_backup` by plain iteration.
pub fn ref_policy_eval(
    inst: &RefInstance,
    agg: Agg,
    policy: &[Vec<f64>],
    reference: &[Vec<f64>],
    tau: f64,
    tol: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; inst.n_states()];
    for _ in 0..1_000_000 {
        let next = ref_backup(inst, agg, policy, reference, tau, &v);
        let res =
            v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if res <= tol {
            break;
        }
    }
    v
}

/// Classical optimal value iteration on a single kernel (no uncertainty,
/// no regularization). Used both as a degeneracy check and as the exact
/// solver inside the adversarial enumeration.
pub fn classical_vi(
    reward: &[Vec<f64>],
    kernel: &[Vec<Vec<f64>>],
    gamma: f64,
    tol: f64,
) -> Vec<f64> {
    let n_states = reward.len();
    let n_actions = reward[0].len();
    let mut v = vec![0.0; n_states];
    loop {
        let mut next = vec![0.0; n_states];
        for s in 0..n_states {
            let mut best = f64::NEG_INFINITY;
            for a in 0..n_actions {
                let mut e = 0.0;
                for (s2, val) in v.iter().enumerate() {
                    e += kernel[s][a][s2] * val;
                }
                best = best.max(reward[s][a] + gamma * e);
            }
            next[s] = best;
        }
        let res = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if res <= tol {
            return v;
        }
    }
}

/// Exhaustive adversarial dynamic programming: enumerate every stationary
/// rectangular adversary (one kernel index per state-action pair), solve the
/// induced classical MDP exactly, and take the componentwise minimum of the
/// optimal values. Exponential in |S|*|A|; keep instances tiny.
pub fn adversarial_dp(inst: &RefInstance, tol: f64) -> Vec<f64> {
    let n_states = inst.n_states();
    let n_actions = inst.n_actions();
    let n_kernels = inst.kernels.len();
    let pairs = n_states * n_actions;
    let mut choice = vec![0usize; pairs];
    let mut best = vec![f64::INFINITY; n_states];
    loop {
        let mut induced = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let k = choice[s * n_actions + a];
                induced[s][a] = inst.kernels[k][s][a].clone();
            }
        }
        let v = classical_vi(&inst.reward, &induced, inst.gamma, tol);
        for s in 0..n_states {
            best[s] = best[s].min(v[s]);
        }
        // mixed-radix increment over kernel choices
        let mut pos = 0;
        loop {
            if pos == pairs {
                return best;
            }
            choice[pos] += 1;
            if choice[pos] < n_kernels {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}

/// KL-penalized linear objective over the probability simplex:
/// `g(pi) = sum_a pi_a * (adv_a - tau * ln(pi_a / ref_a))`, `0 ln 0 = 0`.
fn simplex_objective(pi: &[f64], adv: &[f64], reference: &[f64], tau: f64) -> f64 {
    let mut acc = 0.0;
    for a in 0..pi.len() {
        if pi[a] > 0.0 {
            acc += pi[a] * (adv[a] - tau * (pi[a] / reference[a]).ln());
        }
    }
    acc
}

/// Numerical maximization of `simplex_objective` by coarse lattice search
/// followed by shrinking local grids. Validates the log-sum-exp closed form
/// without using it.
pub fn simplex_search_max(adv: &[f64], reference: &[f64], tau: f64) -> f64 {
    let d = adv.len();
    assert!((2..=4).contains(&d), "oracle supports 2..=4 actions");
    let free = d - 1;
    let close = |x: &[f64]| -> Option<Vec<f64>> {
        let sum: f64 = x.iter().sum();
        if x.iter().any(|p| *p < 0.0) || sum > 1.0 + 1e-15 {
            return None;
        }
        let mut pi = x.to_vec();
        pi.push((1.0 - sum).max(0.0));
        Some(pi)
    };

    // Coarse pass over the whole simplex.
    let steps = 24usize;
    let mut best_x = vec![1.0 / d as f64; free];
    let mut best_val = f64::NEG_INFINITY;
    let mut idx = vec![0usize; free];
    'outer: loop {
        let x: Vec<f64> = idx.iter().map(|i| *i as f64 / steps as f64).collect();
        if let Some(pi) = close(&x) {
            let val = simplex_objective(&pi, adv, reference, tau);
            if val > best_val {
                best_val = val;
                best_x = x;
            }
        }
        let mut pos = 0;
        loop {
            if pos == free {
                break 'outer;
            }
            idx[pos] += 1;
            if idx[pos] <= steps {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }

    // Shrinking local grids around the incumbent.
    let mut h = 1.0 / steps as f64;
    for _ in 0..12 {
        let span = 2i64;
        let mut improved_x = best_x.clone();
        let mut offs = vec![-span; free];
        'refine: loop {
            let x: Vec<f64> = best_x
                .iter()
                .zip(&offs)
                .map(|(b, o)| b + *o as f64 * h / span as f64)
                .collect();
            if let Some(pi) = close(&x) {
                let val = simplex_objective(&pi, adv, reference, tau);
                if val > best_val {
                    best_val = val;
                    improved_x = x;
                }
            }
            let mut pos = 0;
            loop {
                if pos == free {
                    break 'refine;
                }
                offs[pos] += 1;
                if offs[pos] <= span {
                    break;
                }
                offs[pos] = -span;
                pos += 1;
            }
        }
        best_x = improved_x;
        h *= 0.35;
    }
    best_val
}

/// Gaussian elimination with partial pivoting; solves `A x = b`.
pub fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        assert!(m[col][col].abs() > 1e-12, "singular system");
        for row in (col + 1)..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    x
}

/// Exact fixed-policy evaluation on one kernel by solving
/// `(I - gamma P_pi) V = r_pi`.
pub fn linear_solve_eval(
    reward: &[Vec<f64>],
    kernel: &[Vec<Vec<f64>>],
    policy: &[Vec<f64>],
    gamma: f64,
) -> Vec<f64> {
    let n_states = reward.len();
    let n_actions = reward[0].len();
    let mut a = vec![vec![0.0; n_states]; n_states];
    let mut b = vec![0.0; n_states];
    for s in 0..n_states {
        a[s][s] = 1.0;
        for act in 0..n_actions {
            let p = policy[s][act];
            b[s] += p * reward[s][act];
            for s2 in 0..n_states {
                a[s][s2] -= gamma * p * kernel[s][act][s2];
            }
        }
    }
    solve_linear(&a, &b)
}

/// Random instance with healthy (bounded-away-from-zero) kernel rows.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n_states: usize,
    n_actions: usize,
    n_kernels: usize,
    gamma: f64,
) -> RefInstance {
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let kernels = (0..n_kernels)
        .map(|_| {
            (0..n_states)
                .map(|_| {
                    (0..n_actions)
                        .map(|_| {
                            let raw: Vec<f64> =
                                (0..n_states).map(|_| rng.random_range(0.05..1.0)).collect();
                            let sum: f64 = raw.iter().sum();
                            raw.into_iter().map(|x| x / sum).collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let raw_w: Vec<f64> = (0..n_kernels).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum_w: f64 = raw_w.iter().sum();
    let weights = raw_w.into_iter().map(|w| w / sum_w).collect();
    RefInstance { reward, kernels, weights, gamma }
}

/// Random stochastic policy with full support.
pub fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
    (0..n_states)
        .map(|_| {
            let raw: Vec<f64> = (0..n_actions).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        })
        .collect()
}

pub fn uniform_rows(n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / n_actions as f64; n_actions]; n_states]
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Bridge: build library types from a reference instance.
pub fn to_library(
    inst: &RefInstance,
) -> (robust_ctrl_core::mdp::TabularMdp, robust_ctrl_core::mdp::UncertaintySet) {
    use ndarray::{Array2, Array3};
    let n_s = inst.n_states();
    let n_a = inst.n_actions();
    let mut reward = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            reward[[s, a]] = inst.reward[s][a];
        }
    }
    let kernels = inst
        .kernels
        .iter()
        .map(|k| {
            let mut arr = Array3::zeros((n_s, n_a, n_s));
            for s in 0..n_s {
                for a in 0..n_a {
                    for s2 in 0..n_s {
                        arr[[s, a, s2]] = k[s][a][s2];
                    }
                }
            }
            arr
        })
        .collect();
    let mdp = robust_ctrl_core::mdp::TabularMdp::new(reward, inst.gamma).unwrap();
    let uset =
        robust_ctrl_core::mdp::UncertaintySet::new(kernels, inst.weights.clone()).unwrap();
    (mdp, uset)
}

pub fn to_library_policy(rows: &[Vec<f64>]) -> robust_ctrl_core::mdp::TabularPolicy {
    use ndarray::Array2;
    let n_s = rows.len();
    let n_a = rows[0].len();
    let mut probs = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            probs[[s, a]] = rows[s][a];
        }
    }
    robust_ctrl_core::mdp::TabularPolicy::new(probs).unwrap()
}
