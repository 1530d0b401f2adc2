//! Full generation runs: orchestration, flop accounting and run comparison.
//!
//! One run walks the schedule coarse to fine. At every scale it builds the
//! input embeddings, runs the transformer layers (pruning and reconstructing
//! tokens once acceleration is active), reads out logits, folds the scale's
//! mean entropy into the online trace, samples the token map, appends dense
//! key/value rows for the completed scale and accumulates the decoded
//! feature. The flop ledger predicts, in exact integer arithmetic, every
//! matrix multiplication the run performs; the instrumented counter inside
//! `numerics::matmul` can be checked against it after any run.
//!
//! Work the ledger models (matmul flops only; normalization, softmax and
//! resampling are not counted):
//!
//! * attention per (scale, layer): `4*q*k*d + 8*q*d^2` for `q` kept query
//!   rows over `k` total key rows,
//! * feed-forward per (scale, layer): `16*q*d^2` (hidden width `4d`),
//! * readout: `2*rows*V*d` per invocation (final logits and any
//!   entropy-lens observation),
//! * key/value backfill for rows pruned at a layer: `4*pruned*d^2`,
//! * one-time setup: `4*L*d^2` for the start embedding's projections.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::{
    activation_scale, scale_mean_entropy, ActivationParams, EntropyMap, EntropyTrace,
};
use crate::error::{NovaError, Result};
use crate::model::{build_model, LayerState, Model, ModelConfig, SamplingMode, TokenMap};
use crate::numerics::{Grid2D, Matrix, Rng};
use crate::prune::{reconstruct_pruned, select_kept, KeepMask, ResidualCache};
use crate::schedule::{LinkageParams, PlannedLayer, ReductionPlan, Scheduler, SchedulerMode};

/// Token-selection metric. Entropy is the method's criterion; attention mass
/// and feature-deviation mse are the ablation alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Entropy,
    Attention,
    Mse,
}

impl Selector {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "entropy" => Ok(Selector::Entropy),
            "attention" => Ok(Selector::Attention),
            "mse" => Ok(Selector::Mse),
            other => Err(NovaError::config(
                "selector",
                format!("unknown selector '{other}'"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Selector::Entropy => "entropy",
            Selector::Attention => "attention",
            Selector::Mse => "mse",
        }
    }
}

/// Everything one generation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub activation: ActivationParams,
    pub linkage: LinkageParams,
    pub mode: SchedulerMode,
    pub selector: Selector,
    pub sampling: SamplingMode,
    pub sample_seed: u64,
    /// Reuse the layer-1 mask (and base ratio) for every layer of a scale.
    pub shared_mask: bool,
    /// Base ratio table for the fixed and layer_only modes; the packaged
    /// default prunes the last two scales at a constant ratio.
    pub fixed_ratios: Option<Vec<f64>>,
    /// Debug seam: substitute these per-scale means for the measured ones in
    /// the entropy trace, making activation deterministic regardless of
    /// weights. Scheduling inputs change; the generated tokens do not.
    pub synthetic_means: Option<Vec<f64>>,
}

impl RunConfig {
    /// Defaults for the desk-scale configuration with a given model seed.
    pub fn default_with_seed(seed: u64) -> Self {
        RunConfig {
            model: crate::defaults::default_model_config(seed),
            activation: crate::defaults::default_activation_params(),
            linkage: crate::defaults::default_linkage_params(),
            mode: SchedulerMode::Nova,
            selector: Selector::Entropy,
            sampling: SamplingMode::Argmax,
            sample_seed: 0,
            shared_mask: false,
            fixed_ratios: None,
            synthetic_means: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.activation.validate(self.model.schedule.len())?;
        self.linkage.validate()?;
        if self.selector != Selector::Entropy && self.mode == SchedulerMode::Off {
            return Err(NovaError::config(
                "selector",
                format!(
                    "selector '{}' requires a reduction mode other than off",
                    self.selector.name()
                ),
            ));
        }
        let scales = self.model.schedule.len();
        if let Some(table) = &self.fixed_ratios {
            if table.len() != scales {
                return Err(NovaError::config(
                    "fixed_ratios",
                    format!("table has {} entries for {scales} scales", table.len()),
                ));
            }
            if let Some(bad) = table
                .iter()
                .find(|r| !r.is_finite() || **r < 0.0 || **r > self.linkage.r_max)
            {
                return Err(NovaError::config(
                    "fixed_ratios",
                    format!("ratio {bad} outside [0, r_max = {}]", self.linkage.r_max),
                ));
            }
        }
        if let Some(means) = &self.synthetic_means {
            if means.len() != scales {
                return Err(NovaError::config(
                    "synthetic_means",
                    format!("needs one mean per scale ({scales}), got {}", means.len()),
                ));
            }
            if means.iter().any(|m| !m.is_finite()) {
                return Err(NovaError::config(
                    "synthetic_means",
                    "means must be finite",
                ));
            }
        }
        Ok(())
    }

    fn fixed_table(&self) -> Vec<f64> {
        self.fixed_ratios
            .clone()
            .unwrap_or_else(|| crate::defaults::default_fixed_ratios(self.model.schedule.len()))
    }
}

/// Exact matmul flops of one attention invocation: score and value products
/// (`2*q*k*d` each) plus the four `d x d` projections on the query rows
/// (`8*q*d^2`). Within a scale, `k` counts the cross-scale prefix plus the
/// kept rows, so the intra-scale share is quadratic in the kept count.
pub fn attention_flops(kept_queries: usize, total_keys: usize, dim: usize, heads: usize) -> u64 {
    debug_assert!(heads > 0 && dim % heads == 0);
    let q = kept_queries as u64;
    let k = total_keys as u64;
    let d = dim as u64;
    4 * q * k * d + 8 * q * d * d
}

/// Matmul flops of the two feed-forward products over `kept` rows.
pub fn mlp_flops(kept: usize, dim: usize) -> u64 {
    16 * (kept as u64) * (dim as u64) * (dim as u64)
}

/// Matmul flops of one readout over `rows` rows.
pub fn readout_flops(rows: usize, dim: usize, vocab: usize) -> u64 {
    2 * (rows as u64) * (dim as u64) * (vocab as u64)
}

/// Matmul flops of backfilling key/value rows for `pruned` positions.
pub fn kv_fill_flops(pruned: usize, dim: usize) -> u64 {
    4 * (pruned as u64) * (dim as u64) * (dim as u64)
}

/// One (scale, layer) cell of the flop ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub scale: usize,
    pub layer: usize,
    pub attention_flops: u64,
    pub mlp_flops: u64,
    pub readout_flops: u64,
    pub kv_fill_flops: u64,
}

impl LedgerRow {
    fn total(&self) -> u64 {
        self.attention_flops + self.mlp_flops + self.readout_flops + self.kv_fill_flops
    }
}

/// Exact integer account of every matmul a run performs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    /// Start-embedding key/value projections, paid once per run.
    pub setup_flops: u64,
    pub rows: Vec<LedgerRow>,
}

impl FlopLedger {
    fn new(scales: usize, layers: usize, setup_flops: u64) -> Self {
        let mut rows = Vec::with_capacity(scales * layers);
        for t in 1..=scales {
            for j in 1..=layers {
                rows.push(LedgerRow {
                    scale: t,
                    layer: j,
                    attention_flops: 0,
                    mlp_flops: 0,
                    readout_flops: 0,
                    kv_fill_flops: 0,
                });
            }
        }
        FlopLedger { setup_flops, rows }
    }

    fn row_mut(&mut self, scale: usize, layer: usize, layers: usize) -> &mut LedgerRow {
        &mut self.rows[(scale - 1) * layers + (layer - 1)]
    }

    pub fn row(&self, scale: usize, layer: usize) -> &LedgerRow {
        self.rows
            .iter()
            .find(|r| r.scale == scale && r.layer == layer)
            .expect("ledger covers every (scale, layer)")
    }

    pub fn total(&self) -> u64 {
        self.setup_flops + self.rows.iter().map(LedgerRow::total).sum::<u64>()
    }

    pub fn scale_total(&self, scale: usize) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.scale == scale)
            .map(LedgerRow::total)
            .sum()
    }
}

/// Totals of the ledger, broken out per bucket for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub attention_flops: u64,
    pub mlp_flops: u64,
    pub readout_flops: u64,
    pub kv_fill_flops: u64,
    pub setup_flops: u64,
    pub total_flops: u64,
}

impl From<&FlopLedger> for LedgerTotals {
    fn from(ledger: &FlopLedger) -> Self {
        LedgerTotals {
            attention_flops: ledger.rows.iter().map(|r| r.attention_flops).sum(),
            mlp_flops: ledger.rows.iter().map(|r| r.mlp_flops).sum(),
            readout_flops: ledger.rows.iter().map(|r| r.readout_flops).sum(),
            kv_fill_flops: ledger.rows.iter().map(|r| r.kv_fill_flops).sum(),
            setup_flops: ledger.setup_flops,
            total_flops: ledger.total(),
        }
    }
}

/// Fidelity of one run against a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Baseline ledger total over this run's ledger total.
    pub ledger_speedup: f64,
    /// Wall-clock quotient; informational only and excluded from files that
    /// must be byte-reproducible.
    #[serde(skip)]
    pub wall_clock_ratio: f64,
    pub feature_mse: f64,
    /// Peak signal-to-noise ratio in dB against the baseline's value range;
    /// `None` encodes an infinite value (identical features).
    pub psnr_db: Option<f64>,
    /// Fraction of identical token ids per scale.
    pub token_agreement: Vec<f64>,
}

/// Summary of one run, serializable as report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub defaults_version: String,
    pub mode: String,
    pub selector: String,
    pub sampling: String,
    pub seed: u64,
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
    pub t_est: usize,
    pub r_max: f64,
    pub shared_mask: bool,
    pub synthetic_trace: bool,
    /// SHA-256 over the token pyramid.
    pub token_digest: String,
    pub inflection_scale: Option<usize>,
    pub activation_scale: Option<usize>,
    /// Per-scale base reduction ratios actually applied.
    pub base_ratios: Vec<f64>,
    pub mean_accelerated_ratio: f64,
    pub ledger: LedgerTotals,
    pub trace: EntropyTrace,
    /// Affine mapping used when this run's feature map was rendered to PPM;
    /// filled in by the renderer.
    pub feature_mapping: Option<crate::output::ValueMapping>,
    /// Fidelity against a baseline, when one was computed.
    pub fidelity: Option<ComparisonReport>,
    /// Wall-clock duration; excluded from serialized reports so identical
    /// inputs produce identical bytes.
    #[serde(skip)]
    pub wall_clock_ms: f64,
    /// Events worth surfacing (selector fallbacks and similar).
    pub notes: Vec<String>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub report: RunReport,
    pub pyramid: Vec<TokenMap>,
    pub feature: Grid2D,
    pub plan: ReductionPlan,
    pub ledger: FlopLedger,
    /// Scale-level entropy maps from the final readout, one per scale.
    pub scale_maps: Vec<EntropyMap>,
    /// Layer-input entropy maps, present where the run computed them.
    pub layer_maps: Vec<EntropyMap>,
}

/// Per-run knobs that do not change what is generated.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Compute and capture an entropy-lens map at every (scale, layer), even
    /// where scheduling would not need one. The extra readouts are ledgered.
    pub observe_layers: bool,
}

/// Importance scores for token selection at one (scale, layer).
///
/// Returns the scores and whether the attention selector had to fall back to
/// entropy (no recorded scores exist at a scale's first layer).
pub fn ablation_selector(
    selector: Selector,
    entropy_map: Option<&EntropyMap>,
    prev_scores: Option<(&Matrix, &KeepMask, usize)>,
    hidden: &Matrix,
    reference: &Matrix,
) -> Result<(Vec<f64>, bool)> {
    let tokens = hidden.rows();
    match selector {
        Selector::Entropy => {
            let map = entropy_map.ok_or_else(|| {
                NovaError::Internal("entropy selector called without a lens map".to_string())
            })?;
            Ok((map.values.clone(), false))
        }
        Selector::Attention => match prev_scores {
            Some((scores, prev_mask, prefix_len)) => {
                let mut mass = vec![0.0; tokens];
                for (column, &token) in prev_mask.kept.iter().enumerate() {
                    let key_index = prefix_len + column;
                    let mut sum = 0.0;
                    for q in 0..scores.rows() {
                        sum += scores.get(q, key_index);
                    }
                    mass[token] = sum;
                }
                Ok((mass, false))
            }
            None => {
                let map = entropy_map.ok_or_else(|| {
                    NovaError::Internal(
                        "attention fallback requires an entropy lens map".to_string(),
                    )
                })?;
                Ok((map.values.clone(), true))
            }
        },
        Selector::Mse => {
            if reference.rows() != tokens || reference.cols() != hidden.cols() {
                return Err(NovaError::Internal(format!(
                    "mse reference is {}x{}, hidden is {}x{}",
                    reference.rows(),
                    reference.cols(),
                    tokens,
                    hidden.cols()
                )));
            }
            let mut scores = Vec::with_capacity(tokens);
            for r in 0..tokens {
                let d: f64 = hidden
                    .row(r)
                    .iter()
                    .zip(reference.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                scores.push(d);
            }
            Ok((scores, false))
        }
    }
}

fn token_pyramid_digest(pyramid: &[TokenMap]) -> String {
    let mut hasher = Sha256::new();
    for map in pyramid {
        hasher.update(map.scale.to_le_bytes());
        hasher.update(map.height.to_le_bytes());
        hasher.update(map.width.to_le_bytes());
        for &id in &map.ids {
            hasher.update((id as u64).to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run one full generation.
pub fn run_generation(config: &RunConfig, options: &RunOptions) -> Result<RunArtifacts> {
    config.validate()?;
    let started = Instant::now();
    let model = build_model(&config.model)?;
    run_with_model(&model, config, options, started)
}

fn run_with_model(
    model: &Model,
    config: &RunConfig,
    options: &RunOptions,
    started: Instant,
) -> Result<RunArtifacts> {
    let schedule = &config.model.schedule;
    let scales = schedule.len();
    let layers = config.model.layers;
    let dim = config.model.model_dim;
    let vocab = config.model.vocab_size;

    let scheduler = Scheduler::new(config.mode, config.linkage, config.fixed_table());
    let mut trace = EntropyTrace::new(config.activation);
    let mut plan = ReductionPlan::new(config.mode, scales);
    let mut ledger = FlopLedger::new(scales, layers, kv_fill_flops(layers, dim));
    let mut kv = model.new_kv_store()?;
    let mut acc = model.new_accumulator()?;
    let mut sample_rng = Rng::new(config.sample_seed);
    let mut cache: Option<ResidualCache> = None;
    let mut pyramid = Vec::with_capacity(scales);
    let mut scale_maps = Vec::with_capacity(scales);
    let mut layer_maps = Vec::new();
    let mut notes = Vec::new();

    for t in 1..=scales {
        let (height, width) = schedule.grid(t);
        let tokens = schedule.tokens(t);
        let prefix = schedule.prefix_len(t);

        // Activation state known so far: the trace holds scales 1..t-1.
        let activation = activation_scale(&trace, scales);
        let accelerated =
            config.mode != SchedulerMode::Off && activation.map_or(false, |a| t >= a);
        if accelerated && plan.activation_scale.is_none() {
            plan.activation_scale = activation;
        }

        let mut hidden = if t == 1 {
            model.first_scale_input()
        } else {
            model.next_scale_input(&acc, t)?
        };
        let reference = if config.selector == Selector::Mse && accelerated {
            model.resized_feature(&acc, t)?
        } else {
            Matrix::zeros(tokens, dim)
        };
        let interpolated = match (&cache, accelerated) {
            (Some(c), true) => Some(c.interpolate_to(height, width)?),
            _ => None,
        };
        if accelerated && interpolated.is_none() {
            return Err(NovaError::Internal(format!(
                "scale {t} is accelerated but no residual cache was populated"
            )));
        }

        let mut layer_entropies: Vec<f64> = Vec::with_capacity(layers);
        let mut prev_scores: Option<(Matrix, KeepMask)> = None;
        let mut pending_kv: Vec<(KeepMask, Matrix, Matrix)> = Vec::with_capacity(layers);
        let mut saved_inputs: Vec<Matrix> = Vec::with_capacity(layers);
        let mut residual_grids: Vec<Grid2D> = Vec::with_capacity(layers);
        let mut shared: Option<(PlannedLayer, KeepMask)> = None;

        for j in 1..=layers {
            saved_inputs.push(hidden.clone());

            let needs_linkage = accelerated && scheduler.mode.uses_layer_linkage()
                && !config.shared_mask;
            let needs_selection_map = accelerated
                && !(config.shared_mask && j > 1)
                && (config.selector == Selector::Entropy
                    || (config.selector == Selector::Attention && prev_scores.is_none()));
            let lens_map = if options.observe_layers || needs_linkage || needs_selection_map {
                let logits = model.readout_logits(&hidden)?;
                ledger.row_mut(t, j, layers).readout_flops += readout_flops(tokens, dim, vocab);
                let probs = crate::numerics::softmax_rows(&logits);
                let map = EntropyMap::from_probs(&probs, t, Some(j), height, width)?;
                layer_entropies.push(scale_mean_entropy(&map)?);
                Some(map)
            } else {
                None
            };

            let (decision, mask) = if !accelerated {
                (
                    PlannedLayer { ratio: 0.0, kept: tokens },
                    KeepMask::all(t, j, tokens),
                )
            } else if config.shared_mask && j > 1 {
                let (d, m) = shared.clone().expect("layer 1 sets the shared mask");
                (d, KeepMask { scale: t, layer: j, kept: m.kept })
            } else {
                let decision = scheduler.plan_layer(
                    t,
                    j,
                    tokens,
                    activation,
                    &trace,
                    &layer_entropies,
                )?;
                let mask = if decision.kept == tokens {
                    KeepMask::all(t, j, tokens)
                } else {
                    let scores_ctx = prev_scores
                        .as_ref()
                        .map(|(s, m)| (s, m, prefix));
                    let (importance, fell_back) = ablation_selector(
                        config.selector,
                        lens_map.as_ref(),
                        scores_ctx,
                        &hidden,
                        &reference,
                    )?;
                    if fell_back {
                        notes.push(format!(
                            "attention selector fell back to entropy at scale {t} layer {j}"
                        ));
                    }
                    select_kept(&importance, decision.kept, t, j)?
                };
                if config.shared_mask {
                    shared = Some((decision, mask.clone()));
                }
                (decision, mask)
            };

            // Activation safety: nothing may be pruned before the activation
            // scale.
            if decision.ratio > 0.0 || !mask.is_full(tokens) {
                if !accelerated {
                    return Err(NovaError::Internal(format!(
                        "pruning planned at scale {t} layer {j} before activation"
                    )));
                }
            }
            plan.base_ratios[t - 1] = if accelerated && j == 1 {
                decision.ratio
            } else {
                plan.base_ratios[t - 1]
            };
            plan.record(t, decision);

            let state = LayerState {
                scale: t,
                layer: j,
                hidden,
            };
            let record = config.selector == Selector::Attention && accelerated;
            let outcome = model.forward_layer(&state, &kv, &mask, record)?;
            {
                let row = ledger.row_mut(t, j, layers);
                row.attention_flops +=
                    attention_flops(mask.kept.len(), prefix + mask.kept.len(), dim, config.model.heads);
                row.mlp_flops += mlp_flops(mask.kept.len(), dim);
            }
            let mut new_hidden = outcome.state.hidden;
            if !mask.is_full(tokens) {
                let interp = interpolated
                    .as_ref()
                    .expect("accelerated scales carry an interpolated cache");
                reconstruct_pruned(&mut new_hidden, &interp.layers[j - 1], &mask)?;
            }
            residual_grids.push(ResidualCache::layer_residual(
                &saved_inputs[j - 1],
                &new_hidden,
                height,
                width,
            )?);
            prev_scores = outcome.scores.map(|s| (s, mask.clone()));
            pending_kv.push((mask, outcome.kept_keys, outcome.kept_values));
            if let Some(map) = lens_map {
                if options.observe_layers {
                    layer_maps.push(map);
                }
            }
            hidden = new_hidden;
        }

        // Scale readout, trace update, sampling.
        let logits = model.readout_logits(&hidden)?;
        ledger.row_mut(t, layers, layers).readout_flops += readout_flops(tokens, dim, vocab);
        let probs = crate::numerics::softmax_rows(&logits);
        let scale_map = EntropyMap::from_probs(&probs, t, None, height, width)?;
        let measured_mean = scale_mean_entropy(&scale_map)?;
        let mean = match &config.synthetic_means {
            Some(means) => means[t - 1],
            None => measured_mean,
        };
        trace.update(t, mean)?;
        scale_maps.push(scale_map);
        let token_map = model.sample_tokens(&logits, t, config.sampling, &mut sample_rng)?;

        // Dense key/value append for the completed scale: kept rows reuse the
        // projections computed in attention, pruned rows are backfilled from
        // their (reconstructed) layer inputs.
        for (j, (mask, kept_keys, kept_values)) in pending_kv.into_iter().enumerate() {
            let layer = j + 1;
            if mask.is_full(tokens) {
                kv.append(layer, kept_keys, kept_values)?;
                continue;
            }
            let keep = mask.bitmap(tokens);
            let pruned: Vec<usize> = (0..tokens).filter(|i| !keep[*i]).collect();
            let fill_rows = saved_inputs[j].select_rows(&pruned);
            let (fill_keys, fill_values) = model.project_kv(layer, &fill_rows)?;
            ledger.row_mut(t, layer, layers).kv_fill_flops += kv_fill_flops(pruned.len(), dim);
            let mut keys = Matrix::zeros(tokens, dim);
            let mut values = Matrix::zeros(tokens, dim);
            for (row, &idx) in mask.kept.iter().enumerate() {
                keys.row_mut(idx).copy_from_slice(kept_keys.row(row));
                values.row_mut(idx).copy_from_slice(kept_values.row(row));
            }
            for (row, &idx) in pruned.iter().enumerate() {
                keys.row_mut(idx).copy_from_slice(fill_keys.row(row));
                values.row_mut(idx).copy_from_slice(fill_values.row(row));
            }
            kv.append(layer, keys, values)?;
        }

        // The rolling residual cache always mirrors the most recent completed
        // scale; it is only ever consumed at accelerated scales.
        cache = Some(ResidualCache {
            scale: t,
            layers: residual_grids,
        });
        if let Some(c) = &cache {
            if !c.is_dense_finite() {
                return Err(NovaError::Internal(format!(
                    "residual cache holds non-finite values after scale {t}"
                )));
            }
        }
        acc = model.accumulate_feature(&acc, &token_map)?;
        pyramid.push(token_map);
    }

    let wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
    let report = RunReport {
        defaults_version: crate::defaults::DEFAULTS_VERSION.to_string(),
        mode: config.mode.name().to_string(),
        selector: config.selector.name().to_string(),
        sampling: match config.sampling {
            SamplingMode::Argmax => "argmax".to_string(),
            SamplingMode::Categorical => "categorical".to_string(),
        },
        seed: config.model.seed,
        alpha: config.activation.alpha,
        tau: config.linkage.tau,
        lambda: config.linkage.lambda,
        t_est: config.activation.t_est,
        r_max: config.linkage.r_max,
        shared_mask: config.shared_mask,
        synthetic_trace: config.synthetic_means.is_some(),
        token_digest: token_pyramid_digest(&pyramid),
        inflection_scale: trace.inflection,
        activation_scale: activation_scale(&trace, scales),
        base_ratios: plan.base_ratios.clone(),
        mean_accelerated_ratio: plan.mean_accelerated_ratio(),
        ledger: LedgerTotals::from(&ledger),
        trace,
        feature_mapping: None,
        fidelity: None,
        wall_clock_ms,
        notes,
    };
    Ok(RunArtifacts {
        config: config.clone(),
        report,
        pyramid,
        feature: acc,
        plan,
        ledger,
        scale_maps,
        layer_maps,
    })
}

/// Compare a baseline run against a candidate run over the same model and
/// seed: ledger speedup, feature fidelity and per-scale token agreement.
pub fn compare_runs(baseline: &RunArtifacts, candidate: &RunArtifacts) -> Result<ComparisonReport> {
    if baseline.config.model != candidate.config.model {
        return Err(NovaError::Usage(
            "compared runs must share the same model config and seed".to_string(),
        ));
    }
    if baseline.config.sampling != candidate.config.sampling
        || baseline.config.sample_seed != candidate.config.sample_seed
    {
        return Err(NovaError::Usage(
            "compared runs must share the same sampling setup".to_string(),
        ));
    }
    let a = &baseline.feature;
    let b = &candidate.feature;
    let mut mse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        mse += (x - y) * (x - y);
    }
    mse /= a.data().len() as f64;
    let peak = {
        let min = a.data().iter().copied().fold(f64::INFINITY, f64::min);
        let max = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max - min
    };
    let psnr_db = if mse > 0.0 && peak > 0.0 {
        Some(10.0 * (peak * peak / mse).log10())
    } else {
        None
    };
    let token_agreement = baseline
        .pyramid
        .iter()
        .zip(&candidate.pyramid)
        .map(|(x, y)| {
            let same = x.ids.iter().zip(&y.ids).filter(|(a, b)| a == b).count();
            same as f64 / x.ids.len() as f64
        })
        .collect();
    Ok(ComparisonReport {
        ledger_speedup: baseline.ledger.total() as f64 / candidate.ledger.total() as f64,
        wall_clock_ratio: baseline.report.wall_clock_ms / candidate.report.wall_clock_ms,
        feature_mse: mse,
        psnr_db,
        token_agreement,
    })
}
