//! Predictive-entropy analysis.
//!
//! Token entropy is the Shannon entropy of a token's predicted class
//! distribution, in nats. Because tokens within one scale are predicted in
//! parallel from a factorized conditional, the joint entropy of a token map
//! decomposes into the sum of its per-token entropies; the scale's overall
//! entropy is their mean. Tracking that mean across scales gives a growth
//! curve whose inflection point decides when acceleration turns on:
//!
//! * growth rate: `g_t = mean_t - mean_{t-1}`,
//! * early baseline over the first `t_est` scales:
//!   `eta = (sum of g_2..g_{t_est}) / (t_est - 1)`,
//! * smoothed rate from `t_est + 1` on: `sg_t = (g_t + g_{t-1}) / 2`,
//! * inflection: the earliest `t >= t_est + 1` with `sg_t <= alpha * eta`.
//!
//! Detection is strictly online: scales are appended one at a time, the
//! baseline freezes once computed, and the inflection scale never moves after
//! it is found. Acceleration activates at the scale after the inflection.

use serde::{Deserialize, Serialize};

use crate::error::{NovaError, Result};
use crate::numerics::Matrix;

/// Per-token entropy in nats of one probability row.
///
/// Zero-probability terms contribute zero (the continuous extension of
/// `p ln p`). The row must be non-negative and sum to 1 within `1e-6`.
pub fn token_entropy(dist: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for &p in dist {
        if p < 0.0 || !p.is_finite() {
            return Err(NovaError::InvalidInput(format!(
                "probability entry {p} is not in [0, 1]"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NovaError::InvalidInput(format!(
            "probability row sums to {sum}, expected 1 within 1e-6"
        )));
    }
    let mut h = 0.0;
    for &p in dist {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Per-token entropies of one token map, kept with its grid shape.
///
/// `layer` is `None` for the scale-level map taken from the final readout and
/// `Some(j)` for a map observed at the input of transformer layer `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    pub scale: usize,
    pub layer: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl EntropyMap {
    /// Element-wise token entropy of an `N x V` probability matrix, where
    /// `N = height * width`.
    pub fn from_probs(
        probs: &Matrix,
        scale: usize,
        layer: Option<usize>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if probs.rows() != height * width {
            return Err(NovaError::InvalidInput(format!(
                "probability rows {} do not match grid {height}x{width}",
                probs.rows()
            )));
        }
        let mut values = Vec::with_capacity(probs.rows());
        for r in 0..probs.rows() {
            values.push(token_entropy(probs.row(r))?);
        }
        Ok(EntropyMap {
            scale,
            layer,
            height,
            width,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean token entropy of a map (the scale's overall predictive entropy).
///
/// Pairwise summation keeps the mean stable on large maps.
pub fn scale_mean_entropy(map: &EntropyMap) -> Result<f64> {
    if map.values.is_empty() {
        return Err(NovaError::InvalidInput(
            "cannot take the mean entropy of an empty map".to_string(),
        ));
    }
    Ok(pairwise_sum(&map.values) / map.values.len() as f64)
}

fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Inflection-detection hyperparameters: the number of baseline scales and
/// the decay fraction of the baseline growth that triggers detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationParams {
    pub t_est: usize,
    pub alpha: f64,
}

impl ActivationParams {
    /// `t_est` needs at least one growth sample for the baseline and at least
    /// one scale after detection, hence `2 <= t_est <= total_scales - 2`.
    pub fn validate(&self, total_scales: usize) -> Result<()> {
        if self.t_est < 2 || self.t_est + 2 > total_scales {
            return Err(NovaError::config(
                "t_est",
                format!(
                    "must satisfy 2 <= t_est <= {} for a {total_scales}-scale schedule, got {}",
                    total_scales.saturating_sub(2),
                    self.t_est
                ),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(NovaError::config(
                "alpha",
                format!("must lie in (0, 1), got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Online record of per-scale mean entropies and the derived growth
/// statistics.
///
/// `growth[i]` and `smoothed[i]` line up with `means[i]`; entries that are
/// not defined yet at that scale hold `None`. The baseline freezes when scale
/// `t_est` is appended and is never revised. If the baseline comes out
/// non-positive the threshold is meaningless and detection stays disabled for
/// the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub params: ActivationParams,
    pub means: Vec<f64>,
    pub growth: Vec<Option<f64>>,
    pub smoothed: Vec<Option<f64>>,
    pub baseline: Option<f64>,
    pub inflection: Option<usize>,
}

impl EntropyTrace {
    pub fn new(params: ActivationParams) -> Self {
        EntropyTrace {
            params,
            means: Vec::new(),
            growth: Vec::new(),
            smoothed: Vec::new(),
            baseline: None,
            inflection: None,
        }
    }

    /// Number of scales recorded so far.
    pub fn scales(&self) -> usize {
        self.means.len()
    }

    /// Append the mean entropy of scale `t`. Scales must arrive strictly in
    /// order `1, 2, ...`.
    pub fn update(&mut self, scale: usize, mean: f64) -> Result<()> {
        if scale != self.means.len() + 1 {
            return Err(NovaError::Usage(format!(
                "trace scales must be appended in order; expected scale {}, got {scale}",
                self.means.len() + 1
            )));
        }
        self.means.push(mean);
        let t = self.means.len();
        if t >= 2 {
            self.growth.push(Some(mean - self.means[t - 2]));
        } else {
            self.growth.push(None);
        }
        if t == self.params.t_est {
            // Baseline over g_2..g_{t_est}, frozen from here on.
            let sum: f64 = self.growth[1..t]
                .iter()
                .map(|g| g.expect("growth defined from scale 2"))
                .sum();
            self.baseline = Some(sum / (self.params.t_est - 1) as f64);
        }
        if t >= self.params.t_est + 1 {
            let g_t = self.growth[t - 1].expect("growth defined");
            let g_prev = self.growth[t - 2].expect("growth defined");
            let sg = (g_t + g_prev) / 2.0;
            self.smoothed.push(Some(sg));
            if self.inflection.is_none() {
                if let Some(eta) = self.baseline {
                    if eta > 0.0 && sg <= self.params.alpha * eta {
                        self.inflection = Some(t);
                    }
                }
            }
        } else {
            self.smoothed.push(None);
        }
        Ok(())
    }

    pub fn growth_at(&self, scale: usize) -> Option<f64> {
        self.growth.get(scale - 1).copied().flatten()
    }

    /// Most recent growth sample, i.e. the growth measured at the last
    /// completed scale. This is what the scale-linkage ratio consumes while
    /// the current scale is still being generated.
    pub fn latest_growth(&self) -> Option<f64> {
        self.growth.last().copied().flatten()
    }

    /// CSV rows `t,mean,growth,smoothed`, one line per recorded scale.
    /// Undefined cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean,growth,smoothed\n");
        for (i, mean) in self.means.iter().enumerate() {
            let g = self.growth[i].map(|v| v.to_string()).unwrap_or_default();
            let s = self.smoothed[i].map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", i + 1, mean, g, s));
        }
        out
    }
}

/// Scale at which acceleration activates: one past the inflection, if that
/// still lands inside the schedule.
pub fn activation_scale(trace: &EntropyTrace, total_scales: usize) -> Option<usize> {
    match trace.inflection {
        Some(t_star) if t_star + 1 <= total_scales => Some(t_star + 1),
        _ => None,
    }
}
