//! Token-reduction ratio schedules.
//!
//! The scale-linkage ratio follows a sigmoid in the distance from the
//! activation scale, pulled down by the entropy growth rate:
//! `ratio_t = sigmoid((t - activation) / tau) - lambda * tanh(g)`. The
//! layer-linkage adjustment rescales a scale's base ratio by the relative
//! deviation of the layer's overall entropy from the mean of the preceding
//! layers: layers hotter than their predecessors keep more tokens, colder
//! layers shed more. Raw ratios are clamped into `[0, r_max]` so at least one
//! token always survives, and a pruned count is always rounded down (ties
//! favor keeping tokens).

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyTrace;
use crate::error::{NovaError, Result};

/// Linkage hyperparameters: sigmoid temperature, growth-rate damping and the
/// clamp ceiling for every emitted ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkageParams {
    pub tau: f64,
    pub lambda: f64,
    pub r_max: f64,
}

impl LinkageParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(NovaError::config(
                "tau",
                format!("must be positive, got {}", self.tau),
            ));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(NovaError::config(
                "lambda",
                format!("must lie in [0, 1), got {}", self.lambda),
            ));
        }
        if !(self.r_max > 0.0 && self.r_max <= 1.0) {
            return Err(NovaError::config(
                "r_max",
                format!("must lie in (0, 1], got {}", self.r_max),
            ));
        }
        Ok(())
    }
}

/// Scheduling policy for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    /// Full dual linkage: sigmoid scale ratios refined per layer.
    Nova,
    /// Scale-linkage ratios applied uniformly across layers.
    ScaleOnly,
    /// Static per-scale base ratios refined per layer.
    LayerOnly,
    /// Static per-scale ratios, uniform across layers.
    Fixed,
    /// No reduction anywhere.
    Off,
}

impl SchedulerMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "nova" => Ok(SchedulerMode::Nova),
            "scale_only" => Ok(SchedulerMode::ScaleOnly),
            "layer_only" => Ok(SchedulerMode::LayerOnly),
            "fixed" => Ok(SchedulerMode::Fixed),
            "off" => Ok(SchedulerMode::Off),
            other => Err(NovaError::config(
                "mode",
                format!("unknown scheduler mode '{other}'"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchedulerMode::Nova => "nova",
            SchedulerMode::ScaleOnly => "scale_only",
            SchedulerMode::LayerOnly => "layer_only",
            SchedulerMode::Fixed => "fixed",
            SchedulerMode::Off => "off",
        }
    }

    /// Modes whose base ratio comes from a static per-scale table.
    pub fn uses_fixed_table(&self) -> bool {
        matches!(self, SchedulerMode::LayerOnly | SchedulerMode::Fixed)
    }

    /// Modes that refine the base ratio per layer.
    pub fn uses_layer_linkage(&self) -> bool {
        matches!(self, SchedulerMode::Nova | SchedulerMode::LayerOnly)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scale-linkage reduction ratio for scale `t` given the inflection scale and
/// the latest growth sample, clamped to `[0, r_max]`.
pub fn scale_ratio(
    t: usize,
    t_star: usize,
    growth: f64,
    params: &LinkageParams,
) -> Result<f64> {
    if t < t_star + 1 {
        return Err(NovaError::Usage(format!(
            "scale_ratio called for scale {t} before activation scale {}",
            t_star + 1
        )));
    }
    let raw = sigmoid((t as f64 - (t_star + 1) as f64) / params.tau) - params.lambda * growth.tanh();
    Ok(raw.clamp(0.0, params.r_max))
}

/// Mean overall entropy of the preceding layers (the layer-linkage
/// reference). Empty input is a usage error: layer 1 has no predecessors and
/// never calls this.
pub fn layer_mean(preceding: &[f64]) -> Result<f64> {
    if preceding.is_empty() {
        return Err(NovaError::Usage(
            "layer_mean requires at least one preceding layer".to_string(),
        ));
    }
    Ok(preceding.iter().sum::<f64>() / preceding.len() as f64)
}

/// Layer-linkage refinement of a base ratio.
///
/// Layer 1 keeps the base unchanged. Deeper layers scale it by
/// `1 - (h - mu) / mu` and clamp to `[0, r_max]`; a non-positive `mu` makes
/// the deviation undefined and is reported so the engine can fall back to the
/// base ratio.
pub fn layer_ratio(
    layer: usize,
    base: f64,
    layer_entropy: f64,
    preceding_mean: f64,
    params: &LinkageParams,
) -> Result<f64> {
    if layer == 1 {
        return Ok(base);
    }
    if !(preceding_mean > 0.0) {
        return Err(NovaError::DegenerateEntropy(format!(
            "preceding-layer mean entropy {preceding_mean} is not positive at layer {layer}"
        )));
    }
    let deviation = (layer_entropy - preceding_mean) / preceding_mean;
    Ok((base - deviation * base).clamp(0.0, params.r_max))
}

/// Kept-token count for a ratio: the pruned count is rounded down, so ties
/// keep tokens.
pub fn kept_count(tokens: usize, ratio: f64) -> usize {
    tokens - (ratio * tokens as f64).floor() as usize
}

/// One scheduling decision: the effective ratio at a (scale, layer) cell and
/// the number of tokens that still receive full computation there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedLayer {
    pub ratio: f64,
    pub kept: usize,
}

/// Per-run record of every scheduling decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionPlan {
    pub mode: SchedulerMode,
    /// Scale at which reduction begins, if an inflection was detected.
    pub activation_scale: Option<usize>,
    /// Base (scale-level) ratio per scale, zero before activation.
    pub base_ratios: Vec<f64>,
    /// `layers[t-1][j-1]` is the decision at scale `t`, layer `j`.
    pub layers: Vec<Vec<PlannedLayer>>,
}

impl ReductionPlan {
    pub fn new(mode: SchedulerMode, scales: usize) -> Self {
        ReductionPlan {
            mode,
            activation_scale: None,
            base_ratios: vec![0.0; scales],
            layers: vec![Vec::new(); scales],
        }
    }

    pub fn record(&mut self, scale: usize, decision: PlannedLayer) {
        self.layers[scale - 1].push(decision);
    }

    /// Mean ratio over all cells of accelerated scales; 0 when nothing was
    /// accelerated.
    pub fn mean_accelerated_ratio(&self) -> f64 {
        let Some(act) = self.activation_scale else {
            return 0.0;
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, layers) in self.layers.iter().enumerate() {
            if i + 1 >= act {
                for cell in layers {
                    sum += cell.ratio;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Scheduler state for one generation run.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub mode: SchedulerMode,
    pub params: LinkageParams,
    /// Static base ratios for the fixed and layer_only modes, one per scale.
    pub fixed_ratios: Vec<f64>,
}

impl Scheduler {
    pub fn new(mode: SchedulerMode, params: LinkageParams, fixed_ratios: Vec<f64>) -> Self {
        Scheduler {
            mode,
            params,
            fixed_ratios,
        }
    }

    /// Base ratio for scale `t` once activation has occurred at
    /// `activation = t_star + 1`.
    pub fn base_ratio(
        &self,
        t: usize,
        activation: usize,
        latest_growth: f64,
    ) -> Result<f64> {
        match self.mode {
            SchedulerMode::Off => Ok(0.0),
            SchedulerMode::Nova | SchedulerMode::ScaleOnly => {
                scale_ratio(t, activation - 1, latest_growth, &self.params)
            }
            SchedulerMode::Fixed | SchedulerMode::LayerOnly => {
                let r = self.fixed_ratios.get(t - 1).copied().ok_or_else(|| {
                    NovaError::config(
                        "fixed_ratios",
                        format!("no entry for scale {t} in the fixed ratio table"),
                    )
                })?;
                Ok(r.clamp(0.0, self.params.r_max))
            }
        }
    }

    /// Decision for one (scale, layer) cell.
    ///
    /// `activation` is the detected activation scale, if any; `trace` supplies
    /// the latest growth sample; `layer_entropies` holds the lens entropies of
    /// layers `1..=j` of the current scale (the current layer last). Before
    /// activation, and in off mode, the ratio is zero. A degenerate
    /// preceding-layer mean falls back to the base ratio.
    pub fn plan_layer(
        &self,
        t: usize,
        layer: usize,
        tokens: usize,
        activation: Option<usize>,
        trace: &EntropyTrace,
        layer_entropies: &[f64],
    ) -> Result<PlannedLayer> {
        let active = match activation {
            Some(act) if self.mode != SchedulerMode::Off && t >= act => act,
            _ => {
                return Ok(PlannedLayer {
                    ratio: 0.0,
                    kept: tokens,
                })
            }
        };
        let growth = trace.latest_growth().unwrap_or(0.0);
        let base = self.base_ratio(t, active, growth)?;
        let ratio = if self.mode.uses_layer_linkage() && layer >= 2 {
            let mu = layer_mean(&layer_entropies[..layer - 1])?;
            let h = layer_entropies[layer - 1];
            match layer_ratio(layer, base, h, mu, &self.params) {
                Ok(r) => r,
                Err(NovaError::DegenerateEntropy(_)) => base,
                Err(e) => return Err(e),
            }
        } else {
            base
        };
        Ok(PlannedLayer {
            ratio,
            kept: kept_count(tokens, ratio),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::ActivationParams;

    fn default_params() -> LinkageParams {
        LinkageParams {
            tau: 0.8,
            lambda: 0.1,
            r_max: 0.95,
        }
    }

    #[test]
    fn ratio_at_activation_with_zero_growth_is_half() {
        let r = scale_ratio(8, 7, 0.0, &default_params()).unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn ratio_matches_formula_oracle() {
        // sigmoid(0) - 0.1 * tanh(0.05)
        let r = scale_ratio(8, 7, 0.05, &default_params()).unwrap();
        assert!((r - 0.495004).abs() < 1e-6);
        assert!((r - (0.5 - 0.1 * 0.05_f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn far_scales_clamp_at_r_max() {
        let r = scale_ratio(100, 7, 0.0, &default_params()).unwrap();
        assert_eq!(r, 0.95);
    }

    #[test]
    fn falling_entropy_raises_ratio_bounded_by_lambda() {
        let p = default_params();
        let base = scale_ratio(9, 7, 0.0, &p).unwrap();
        let boosted = scale_ratio(9, 7, -50.0, &p).unwrap();
        assert!(boosted > base);
        assert!(boosted - base <= p.lambda + 1e-12);
    }

    #[test]
    fn pre_activation_call_is_usage_error() {
        assert!(matches!(
            scale_ratio(7, 7, 0.0, &default_params()),
            Err(NovaError::Usage(_))
        ));
    }

    #[test]
    fn ratio_monotone_in_scale_for_fixed_growth() {
        let p = default_params();
        let mut prev = -1.0;
        for t in 8..58 {
            let r = scale_ratio(t, 7, 0.02, &p).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn zero_lambda_ignores_growth() {
        let p = LinkageParams {
            lambda: 0.0,
            ..default_params()
        };
        let a = scale_ratio(9, 7, -3.0, &p).unwrap();
        let b = scale_ratio(9, 7, 5.0, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_tau_flattens_toward_half() {
        let p = LinkageParams {
            tau: 1e12,
            lambda: 0.0,
            r_max: 0.95,
        };
        for t in 8..20 {
            let r = scale_ratio(t, 7, 0.0, &p).unwrap();
            assert!((r - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_mean_basics() {
        assert_eq!(layer_mean(&[3.25]).unwrap(), 3.25);
        assert_eq!(layer_mean(&[2.0, 4.0]).unwrap(), 3.0);
        assert!(matches!(layer_mean(&[]), Err(NovaError::Usage(_))));
    }

    #[test]
    fn layer_mean_matches_summation_oracle() {
        let mut rng = crate::numerics::Rng::new(5);
        let values: Vec<f64> = (0..64).map(|_| rng.next_f64() * 4.0).collect();
        let mean = layer_mean(&values).unwrap();
        let mut acc = 0.0_f64;
        let mut comp = 0.0_f64;
        for &v in &values {
            let y = v - comp;
            let t = acc + y;
            comp = (t - acc) - y;
            acc = t;
        }
        assert!((mean - acc / 64.0).abs() < 1e-12);
    }

    #[test]
    fn layer_one_keeps_base() {
        let r = layer_ratio(1, 0.37, 9.9, -1.0, &default_params()).unwrap();
        assert_eq!(r, 0.37);
    }

    #[test]
    fn zero_deviation_keeps_base() {
        let r = layer_ratio(3, 0.4, 2.0, 2.0, &default_params()).unwrap();
        assert_eq!(r, 0.4);
    }

    #[test]
    fn worked_layer_adjustment() {
        let r = layer_ratio(2, 0.5, 2.2, 2.0, &default_params()).unwrap();
        assert!((r - 0.45).abs() < 1e-12);
    }

    #[test]
    fn doubled_entropy_cancels_ratio() {
        let r = layer_ratio(2, 0.5, 4.0, 2.0, &default_params()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn clamp_engages_outside_deviation_range() {
        let p = default_params();
        // deviation < -(1 - base)/base pushes past r_max
        let high = layer_ratio(2, 0.5, 0.1, 2.0, &p).unwrap();
        assert_eq!(high, p.r_max);
        // deviation > 1 drives the raw ratio negative
        let low = layer_ratio(2, 0.5, 5.0, 2.0, &p).unwrap();
        assert_eq!(low, 0.0);
    }

    #[test]
    fn degenerate_mean_is_reported() {
        assert!(matches!(
            layer_ratio(2, 0.5, 1.0, 0.0, &default_params()),
            Err(NovaError::DegenerateEntropy(_))
        ));
    }

    #[test]
    fn layer_linkage_direction() {
        let p = default_params();
        let base = 0.5;
        let above = layer_ratio(4, base, 2.5, 2.0, &p).unwrap();
        let below = layer_ratio(4, base, 1.5, 2.0, &p).unwrap();
        assert!(above < base);
        assert!(below > base);
    }

    #[test]
    fn kept_count_floor_rule() {
        assert_eq!(kept_count(4, 0.5), 2);
        assert_eq!(kept_count(5, 0.5), 3); // floor prunes 2, keeps 3
        assert_eq!(kept_count(10, 0.0), 10);
        assert_eq!(kept_count(10, 0.95), 1);
    }

    #[test]
    fn kept_plus_pruned_partition_tokens() {
        let mut rng = crate::numerics::Rng::new(17);
        for _ in 0..500 {
            let n = 1 + (rng.next_u64() % 300) as usize;
            let ratio = rng.next_f64() * 0.95;
            let kept = kept_count(n, ratio);
            assert_eq!(kept + (ratio * n as f64).floor() as usize, n);
            assert!(kept >= 1);
        }
    }

    fn trace_with_means(means: &[f64]) -> EntropyTrace {
        let mut trace = EntropyTrace::new(ActivationParams {
            t_est: 5,
            alpha: 0.5,
        });
        for (i, &m) in means.iter().enumerate() {
            trace.update(i + 1, m).unwrap();
        }
        trace
    }

    #[test]
    fn plan_layer_off_mode_keeps_everything() {
        let sched = Scheduler::new(SchedulerMode::Off, default_params(), vec![]);
        let trace = trace_with_means(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let d = sched
            .plan_layer(6, 3, 36, Some(6), &trace, &[1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(d.ratio, 0.0);
        assert_eq!(d.kept, 36);
    }

    #[test]
    fn plan_layer_pre_activation_keeps_everything() {
        let sched = Scheduler::new(SchedulerMode::Nova, default_params(), vec![]);
        let trace = trace_with_means(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let d = sched.plan_layer(5, 1, 25, Some(8), &trace, &[]).unwrap();
        assert_eq!(d.ratio, 0.0);
        assert_eq!(d.kept, 25);
    }

    #[test]
    fn plan_layer_fixed_mode_missing_entry_is_config_error() {
        let sched = Scheduler::new(SchedulerMode::Fixed, default_params(), vec![0.0; 3]);
        let trace = trace_with_means(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let err = sched.plan_layer(6, 1, 36, Some(6), &trace, &[1.0]);
        assert!(matches!(err, Err(NovaError::Config { .. })));
    }

    #[test]
    fn plan_layer_nova_uses_layer_linkage() {
        let sched = Scheduler::new(SchedulerMode::Nova, default_params(), vec![]);
        let trace = trace_with_means(&[1.0, 2.0, 3.0, 4.0, 5.0, 5.2, 5.3]);
        // layer 2 whose entropy sits above the layer-1 value gets a smaller
        // ratio than the base
        let base = sched.plan_layer(8, 1, 100, Some(8), &trace, &[2.0]).unwrap();
        let adjusted = sched
            .plan_layer(8, 2, 100, Some(8), &trace, &[2.0, 2.4])
            .unwrap();
        assert!(adjusted.ratio < base.ratio);
        assert_eq!(adjusted.kept, kept_count(100, adjusted.ratio));
    }

    #[test]
    fn plan_layer_scale_only_is_uniform_across_layers() {
        let sched = Scheduler::new(SchedulerMode::ScaleOnly, default_params(), vec![]);
        let trace = trace_with_means(&[1.0, 2.0, 3.0, 4.0, 5.0, 5.2, 5.3]);
        let a = sched.plan_layer(8, 1, 100, Some(8), &trace, &[2.0]).unwrap();
        let b = sched
            .plan_layer(8, 5, 100, Some(8), &trace, &[2.0, 9.0, 0.1, 4.0, 2.2])
            .unwrap();
        assert_eq!(a, b);
    }
}
