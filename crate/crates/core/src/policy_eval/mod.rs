//! Policy evaluation for continuous control: replay, TD targets under an
//! uncertainty set, the online/target critic pair, and a tabular TD harness
//! that ties the sampled construction back to the exact operators.

mod critic;
mod replay;
mod tabular;
mod td;

pub use critic::{critic_update, CriticPair};
pub use replay::{ReplayBuffer, Transition, DEFAULT_REPLAY_CAPACITY};
pub use tabular::{tabular_td_harness, StepSchedule, TdHarnessReport};
pub use td::{critic_input, full_q_value, td_targets, TdBatch};
