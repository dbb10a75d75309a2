use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Number of fully connected backbone layers.
    pub n_blocks: usize,
    /// Backbone width; also the size of the shared representation.
    pub d_hidden: usize,
    pub dropout: f64,
    /// Cap on categorical embedding widths.
    pub d_cat_max: usize,
    /// Number of learnable frequencies per numerical feature.
    pub plr_frequencies: usize,
    /// Output width of each numerical feature's embedding.
    pub d_num: usize,
    /// Hidden width of each regression head; `None` means `d_hidden / 2`.
    pub head_hidden: Option<usize>,
    /// Standard deviation of the initial frequency draw.
    pub freq_init_std: f64,
    /// Lower, median and upper quantile levels.
    pub quantile_levels: [f64; 3],
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            d_hidden: 128,
            dropout: 0.1,
            d_cat_max: 50,
            plr_frequencies: 8,
            d_num: 24,
            head_hidden: None,
            freq_init_std: 0.5,
            quantile_levels: DEFAULT_QUANTILES,
        }
    }
}

impl ArchitectureConfig {
    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or((self.d_hidden / 2).max(1))
    }

    /// Structural checks that hold regardless of the tuning ranges.
    pub fn validate(&self) -> Result<()> {
        let f = |n: &str| format!("architecture.{n}");
        if self.n_blocks < 1 {
            return Err(Error::config(f("n_blocks"), "must be at least 1"));
        }
        if self.d_hidden < 1 {
            return Err(Error::config(f("d_hidden"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(f("dropout"), "must lie in [0, 1)"));
        }
        if self.d_cat_max < 1 || self.plr_frequencies < 1 || self.d_num < 1 {
            return Err(Error::config(f("d_num"), "embedding widths must be positive"));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::config(f("head_hidden"), "must be positive"));
        }
        if !(self.freq_init_std >= 0.0 && self.freq_init_std.is_finite()) {
            return Err(Error::config(f("freq_init_std"), "must be finite and non-negative"));
        }
        let q = self.quantile_levels;
        if !q.iter().all(|&a| a > 0.0 && a < 1.0) || !(q[0] < q[1] && q[1] < q[2]) || q[1] != 0.5 {
            return Err(Error::config(
                f("quantile_levels"),
                "must be strictly ascending in (0, 1) with 0.5 in the middle",
            ));
        }
        Ok(())
    }
}

/// Embedding width for a categorical feature: `min(cap, ⌊log2 C⌋ + 1)`.
pub fn embed_dim(cardinality: usize, cap: usize) -> usize {
    let c = cardinality.max(1);
    let floor_log2 = (usize::BITS - 1 - c.leading_zeros()) as usize;
    cap.min(floor_log2 + 1)
}
