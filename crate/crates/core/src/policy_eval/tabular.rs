//! Sampled TD on tabular MDPs, cross-checking the continuous-control target
//! construction against the exact operator fixed point.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{CoreError, Result};
use crate::mdp::{
    policy_evaluate_exact, RegularizationSpec, TabularMdp, TabularPolicy, UncertaintySet,
};
use crate::spec::RobustnessMode;

/// Robbins-Monro schedule `scale / (1 + visits)^decay` per state.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    pub scale: f64,
    pub decay: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { scale: 0.5, decay: 0.7 }
    }
}

#[derive(Debug, Clone)]
pub struct TdHarnessReport {
    pub sup_gap: f64,
    pub samples: usize,
    pub v_learned: Vec<f64>,
    pub v_exact: Vec<f64>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Runs sampled TD with a lookup-table value function and reports the
/// sup-norm gap to the exact fixed point of the same operator.
///
/// Each sample visits a uniformly drawn state, draws an action from the
/// policy, and bootstraps on a single sampled next state. The next-state
/// distribution realizes the mode: the worst-case kernel is selected by its
/// exact expected continuation under the current table (measurable in the
/// table, so the update stays unbiased for the robust operator), soft-robust
/// draws the kernel from `w`, and non-robust always uses the first kernel.
///
/// The reported table is the per-state average of the iterate over the
/// second half of the run (Polyak tail averaging); the live iterate keeps
/// driving the updates and the worst-case kernel selection.
pub fn tabular_td_harness(
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    policy: &TabularPolicy,
    reg: &RegularizationSpec,
    mode: RobustnessMode,
    samples: usize,
    schedule: StepSchedule,
    seed: u64,
) -> Result<TdHarnessReport> {
    uset.check_compatible(mdp)?;
    if !(schedule.scale > 0.0) || !(schedule.decay > 0.5 && schedule.decay <= 1.0) {
        return Err(CoreError::Config(
            "step schedule needs scale > 0 and decay in (0.5, 1]".into(),
        ));
    }
    let exact = policy_evaluate_exact(mdp, uset, policy, reg, mode, 1e-12, 200_000)?;
    if !exact.converged {
        return Err(CoreError::Numeric("exact evaluation did not converge".into()));
    }

    let n_states = mdp.n_states;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array1::<f64>::zeros(n_states);
    let mut visits = vec![0usize; n_states];
    let mut avg = Array1::<f64>::zeros(n_states);
    let mut avg_counts = vec![0usize; n_states];
    let tail_start = samples / 2;

    for t in 0..samples {
        let s = rng.random_range(0..n_states);
        let a = sample_categorical(&mut rng, policy.probs.row(s).as_slice().unwrap());

        let kernel = match mode {
            RobustnessMode::NonRobust => 0,
            RobustnessMode::SoftRobust => sample_categorical(&mut rng, &uset.weights),
            RobustnessMode::Robust => {
                let mut best = 0;
                let mut best_val = f64::INFINITY;
                for (k, kern) in uset.kernels.iter().enumerate() {
                    let val = kern.slice(ndarray::s![s, a, ..]).dot(&v);
                    if val < best_val {
                        best_val = val;
                        best = k;
                    }
                }
                best
            }
        };
        let row = uset.kernels[kernel].slice(ndarray::s![s, a, ..]);
        let s_next = sample_categorical(&mut rng, row.as_slice().unwrap());

        let mut y = mdp.reward[[s, a]] + mdp.discount * v[s_next];
        if reg.tau > 0.0 {
            let p = policy.probs[[s, a]];
            let p_ref = reg.reference.probs[[s, a]];
            if p_ref <= 0.0 {
                return Err(CoreError::Divergence(format!(
                    "policy puts mass on action {a} in state {s} outside the reference support"
                )));
            }
            y -= reg.tau * (p.ln() - p_ref.ln());
        }

        visits[s] += 1;
        let alpha = schedule.scale / (1.0 + visits[s] as f64).powf(schedule.decay);
        v[s] += alpha * (y - v[s]);

        if t >= tail_start {
            avg_counts[s] += 1;
            avg[s] += (v[s] - avg[s]) / avg_counts[s] as f64;
        }
    }

    // States the tail never reached fall back to the raw iterate.
    for s in 0..n_states {
        if avg_counts[s] == 0 {
            avg[s] = v[s];
        }
    }

    let sup_gap = avg
        .iter()
        .zip(exact.values.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(TdHarnessReport {
        sup_gap,
        samples,
        v_learned: avg.to_vec(),
        v_exact: exact.values.to_vec(),
    })
}
