//! The pinned desk-scale defaults.
//!
//! Golden files and acceptance checks assume these exact constants; bump
//! [`DEFAULTS_VERSION`] when changing any of them so stale goldens are
//! detectable.

use crate::entropy::ActivationParams;
use crate::model::{ModelConfig, ScaleSchedule};
use crate::schedule::LinkageParams;

pub const DEFAULTS_VERSION: &str = "1";

/// Side lengths of the default square-grid schedule, coarse to fine.
pub const DEFAULT_SIDES: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_LAYERS: usize = 8;
pub const DEFAULT_HEADS: usize = 4;

pub const DEFAULT_T_EST: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_R_MAX: f64 = 0.95;

/// Static table for the fixed and layer_only modes: the last two scales at a
/// constant ratio, everything earlier untouched.
pub const DEFAULT_FIXED_RATIO: f64 = 0.5;

pub fn default_schedule() -> ScaleSchedule {
    ScaleSchedule::from_sides(&DEFAULT_SIDES).expect("default schedule is valid")
}

pub fn default_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        schedule: default_schedule(),
        vocab_size: DEFAULT_VOCAB,
        model_dim: DEFAULT_DIM,
        layers: DEFAULT_LAYERS,
        heads: DEFAULT_HEADS,
        seed,
    }
}

pub fn default_activation_params() -> ActivationParams {
    ActivationParams {
        t_est: DEFAULT_T_EST,
        alpha: DEFAULT_ALPHA,
    }
}

pub fn default_linkage_params() -> LinkageParams {
    LinkageParams {
        tau: DEFAULT_TAU,
        lambda: DEFAULT_LAMBDA,
        r_max: DEFAULT_R_MAX,
    }
}

/// Fixed-mode ratio table for a schedule of `scales` scales.
pub fn default_fixed_ratios(scales: usize) -> Vec<f64> {
    let mut table = vec![0.0; scales];
    if scales >= 2 {
        table[scales - 2] = DEFAULT_FIXED_RATIO;
        table[scales - 1] = DEFAULT_FIXED_RATIO;
    }
    table
}
