//! Network definition, losses and inference outputs.

pub mod config;
pub mod losses;
pub mod network;

use serde::{Deserialize, Serialize};

pub use config::{embed_dim, ArchitectureConfig, DEFAULT_QUANTILES};
pub use losses::{pinball, regression_loss, sigmoid_f1_loss};
pub use network::{Batch, DelayModel, ForwardCache, ForwardOutput, Losses, ModelGradCheck, Mode, ParamGroup};

/// Sorts a quantile triple ascending, repairing crossed outputs.
pub fn sort_quantiles(mut q: [f64; 3]) -> [f64; 3] {
    q.sort_by(f64::total_cmp);
    q
}

/// Inference output for one shipment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePrediction {
    pub delay_prob: f64,
    /// `delay_prob > 0.5`; selects the head behind `quantiles`.
    pub predicted_delayed: bool,
    /// Quantiles of the routed head, sorted.
    pub quantiles: [f64; 3],
    pub delayed_head: [f64; 3],
    pub ontime_head: [f64; 3],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sort_repairs_crossing() {
        assert_eq!(sort_quantiles([3.0, 1.0, 2.0]), [1.0, 2.0, 3.0]);
        assert_eq!(sort_quantiles([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0]);
    }
}
