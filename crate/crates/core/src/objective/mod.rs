//! Training objective and optimizer.

mod loss;
mod radam;

pub use loss::{combined_loss, smoothed_ce, LossConfig, LossTerms};
pub use radam::{RAdam, RAdamConfig};
