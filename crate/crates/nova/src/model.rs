//! A deterministic toy next-scale autoregressive transformer.
//!
//! The model generates a pyramid of token maps coarse to fine. Scale `t`'s
//! input embeddings come from bilinearly resizing the accumulated feature map
//! to the scale's grid, plus a per-scale embedding and a per-position
//! embedding (without positions every scale downstream of the 1x1 start
//! would be spatially constant). Each of the `L` pre-norm transformer blocks
//! attends over the start embedding, every completed scale's key/value rows
//! and the current scale's kept rows. A shared untied linear head reads out
//! logits over the codebook vocabulary.
//!
//! All weights are drawn from a seeded gaussian with stddev `1/sqrt(d)`
//! (layer-norm gains are centered at one), so a config is a complete,
//! platform-independent description of the network.

use serde::{Deserialize, Serialize};

use crate::error::{NovaError, Result};
use crate::numerics::{
    bilinear_resize, matmul, seeded_gaussian, softmax_rows, Grid2D, Matrix, Rng,
};
use crate::prune::KeepMask;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weight on the resized accumulated feature when forming a scale's input
/// embeddings. Position and scale embeddings enter at full strength, so each
/// token keeps a stable local anchor while still conditioning on history.
pub const FEATURE_INPUT_SCALE: f64 = 0.5;

/// Side length of the positional anchor grid.
pub const POSITION_ANCHORS: usize = 4;

/// Number of anchor vectors the per-scale embeddings interpolate between.
/// Adjacent scales get similar embeddings, so layer dynamics drift smoothly
/// across the pyramid instead of jumping at every scale.
pub const SCALE_EMBEDDING_ANCHORS: usize = 4;

/// Ordered list of `(height, width)` grids, one per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    grids: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(grids: Vec<(usize, usize)>) -> Result<Self> {
        let schedule = ScaleSchedule { grids };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Square grids from a list of side lengths.
    pub fn from_sides(sides: &[usize]) -> Result<Self> {
        ScaleSchedule::new(sides.iter().map(|&s| (s, s)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.len() < 4 {
            return Err(NovaError::config(
                "schedule",
                format!(
                    "needs at least 4 scales for inflection detection, got {}",
                    self.grids.len()
                ),
            ));
        }
        if self.grids[0] != (1, 1) {
            return Err(NovaError::config(
                "schedule",
                "the first scale must be a 1x1 grid",
            ));
        }
        let mut prev = 0usize;
        for (i, &(h, w)) in self.grids.iter().enumerate() {
            if h == 0 || w == 0 {
                return Err(NovaError::config(
                    "schedule",
                    format!("scale {} has an empty grid", i + 1),
                ));
            }
            let n = h * w;
            if n < prev {
                return Err(NovaError::config(
                    "schedule",
                    format!("token count decreases at scale {}", i + 1),
                ));
            }
            prev = n;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Grid of scale `t` (1-based).
    pub fn grid(&self, t: usize) -> (usize, usize) {
        self.grids[t - 1]
    }

    /// Token count `N_t` of scale `t`.
    pub fn tokens(&self, t: usize) -> usize {
        let (h, w) = self.grid(t);
        h * w
    }

    /// Final (largest) grid, where accumulated features live.
    pub fn final_grid(&self) -> (usize, usize) {
        *self.grids.last().expect("validated non-empty")
    }

    /// Context rows visible when scale `t` begins: the start embedding plus
    /// every earlier scale's tokens.
    pub fn prefix_len(&self, t: usize) -> usize {
        1 + self.grids[..t - 1].iter().map(|&(h, w)| h * w).sum::<usize>()
    }
}

/// Complete structural description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schedule: ScaleSchedule,
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.vocab_size < 2 {
            return Err(NovaError::config(
                "vocab_size",
                format!("must be at least 2, got {}", self.vocab_size),
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(NovaError::config(
                "heads",
                format!(
                    "model_dim {} must be divisible by heads {}",
                    self.model_dim, self.heads
                ),
            ));
        }
        if self.layers < 2 {
            return Err(NovaError::config(
                "layers",
                format!("must be at least 2, got {}", self.layers),
            ));
        }
        Ok(())
    }
}

/// One scale's sampled token grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMap {
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<usize>,
}

/// Token-id to feature-vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Matrix,
}

impl Codebook {
    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.vectors.row(id)
    }

    /// Spatial grid of looked-up vectors for a token map.
    pub fn lookup_grid(&self, tokens: &TokenMap) -> Result<Grid2D> {
        let dim = self.vectors.cols();
        let mut data = Vec::with_capacity(tokens.ids.len() * dim);
        for &id in &tokens.ids {
            if id >= self.vectors.rows() {
                return Err(NovaError::InvalidInput(format!(
                    "token id {id} out of vocabulary range {}",
                    self.vectors.rows()
                )));
            }
            data.extend_from_slice(self.vectors.row(id));
        }
        Grid2D::from_vec(tokens.height, tokens.width, dim, data)
    }
}

/// Hidden states of one scale at the boundary of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub scale: usize,
    pub layer: usize,
    pub hidden: Matrix,
}

/// Per-layer key/value rows accumulated over the start embedding and all
/// completed scales.
#[derive(Debug, Clone)]
pub struct KvStore {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl KvStore {
    /// Store seeded with the start embedding's projections for every layer.
    fn with_start_rows(model: &Model) -> Result<Self> {
        let sos = Matrix::from_vec(1, model.config.model_dim, model.start_embedding.clone())?;
        let mut keys = Vec::with_capacity(model.layer_weights.len());
        let mut values = Vec::with_capacity(model.layer_weights.len());
        for layer in &model.layer_weights {
            let normed = layer_norm(&sos, &layer.ln1_gain, &layer.ln1_bias);
            keys.push(matmul(&normed, &layer.wk)?);
            values.push(matmul(&normed, &layer.wv)?);
        }
        Ok(KvStore { keys, values })
    }

    pub fn len(&self, layer: usize) -> usize {
        self.keys[layer - 1].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Append one completed scale's dense rows for layer `layer`.
    pub fn append(&mut self, layer: usize, keys: Matrix, values: Matrix) -> Result<()> {
        if keys.rows() != values.rows() {
            return Err(NovaError::Internal(format!(
                "kv append row mismatch at layer {layer}: {} keys vs {} values",
                keys.rows(),
                values.rows()
            )));
        }
        self.keys[layer - 1] = self.keys[layer - 1].vstack(&keys)?;
        self.values[layer - 1] = self.values[layer - 1].vstack(&values)?;
        Ok(())
    }

    fn layer(&self, layer: usize) -> (&Matrix, &Matrix) {
        (&self.keys[layer - 1], &self.values[layer - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w1: Matrix,
    w2: Matrix,
}

/// Sampling rule used when turning logits into token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Deterministic: ties break toward the lower token id.
    Argmax,
    /// Seeded draw from the softmax distribution, row by row.
    Categorical,
}

/// The built model: immutable weights plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    codebook: Codebook,
    start_embedding: Vec<f64>,
    readout_weight: Matrix,
    readout_bias: Vec<f64>,
    layer_weights: Vec<LayerWeights>,
    embedding_anchors: Matrix,
    scale_embeddings: Vec<Vec<f64>>,
    position_anchor: Grid2D,
    /// Per-scale samplings of the positional anchor field, cached at build.
    position_embeddings: Vec<Matrix>,
}

/// Result of running one transformer layer over the kept rows of a scale.
#[derive(Debug, Clone)]
pub struct LayerOutcome {
    /// Full `N x d` state: kept rows updated, pruned rows bit-identical to
    /// their inputs.
    pub state: LayerState,
    /// Key/value projections of the kept rows, for the dense KV append at
    /// scale completion.
    pub kept_keys: Matrix,
    pub kept_values: Matrix,
    /// Head-averaged attention weights (`kept x total_keys`), recorded only
    /// on request.
    pub scores: Option<Matrix>,
}

/// Build the model: every tensor is drawn from one seeded stream in a fixed,
/// documented order (codebook, start embedding, readout, per-layer weights,
/// then per-scale embedding and position tables in ascending scale order).
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let d = config.model_dim;
    let stddev = 1.0 / (d as f64).sqrt();
    let mut rng = Rng::new(config.seed);
    let draw = |rows: usize, cols: usize, rng: &mut Rng| seeded_gaussian(rng, rows, cols, stddev);

    let codebook = Codebook {
        vectors: draw(config.vocab_size, d, &mut rng)?,
    };
    let start_embedding = draw(1, d, &mut rng)?.data().to_vec();
    let readout_weight = draw(d, config.vocab_size, &mut rng)?;
    let readout_bias = draw(1, config.vocab_size, &mut rng)?.data().to_vec();

    let mut layer_weights = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        // Layer-norm gains are unit-centered; a zero-centered gain would
        // collapse the residual stream.
        let ln1_gain: Vec<f64> = draw(1, d, &mut rng)?.data().iter().map(|v| 1.0 + v).collect();
        let ln1_bias = draw(1, d, &mut rng)?.data().to_vec();
        let wq = draw(d, d, &mut rng)?;
        let wk = draw(d, d, &mut rng)?;
        let wv = draw(d, d, &mut rng)?;
        let wo = draw(d, d, &mut rng)?;
        let ln2_gain: Vec<f64> = draw(1, d, &mut rng)?.data().iter().map(|v| 1.0 + v).collect();
        let ln2_bias = draw(1, d, &mut rng)?.data().to_vec();
        let w1 = draw(d, 4 * d, &mut rng)?;
        let w2 = draw(4 * d, d, &mut rng)?;
        layer_weights.push(LayerWeights {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            w1,
            w2,
        });
    }

    // Per-scale embeddings interpolate a short sequence of anchor vectors
    // over t, align-corners style.
    let embedding_anchors = draw(SCALE_EMBEDDING_ANCHORS, d, &mut rng)?;
    let scale_embeddings = derive_scale_embeddings(&embedding_anchors, config.schedule.len());
    // Positions come from one low-frequency anchor field sampled at every
    // scale's align-corners lattice, so all scales see the same smooth
    // spatial function at consistent coordinates. Smoothness is what lets
    // residual fields interpolate cleanly from one scale to the next.
    let anchors = POSITION_ANCHORS;
    let position_anchor =
        Grid2D::from_matrix(&draw(anchors * anchors, d, &mut rng)?, anchors, anchors)?;
    let mut position_embeddings = Vec::with_capacity(config.schedule.len());
    for t in 1..=config.schedule.len() {
        let (h, w) = config.schedule.grid(t);
        position_embeddings.push(bilinear_resize(&position_anchor, h, w)?.to_matrix());
    }

    Ok(Model {
        config: config.clone(),
        codebook,
        start_embedding,
        readout_weight,
        readout_bias,
        layer_weights,
        embedding_anchors,
        scale_embeddings,
        position_anchor,
        position_embeddings,
    })
}

fn derive_scale_embeddings(anchors: &Matrix, scales: usize) -> Vec<Vec<f64>> {
    let count = anchors.rows();
    let mut embeddings = Vec::with_capacity(scales);
    for t in 1..=scales {
        let u = if scales > 1 {
            (t - 1) as f64 / (scales - 1) as f64 * (count - 1) as f64
        } else {
            0.0
        };
        let lo = (u.floor() as usize).min(count - 1);
        let hi = (lo + 1).min(count - 1);
        let frac = u - lo as f64;
        let emb: Vec<f64> = anchors
            .row(lo)
            .iter()
            .zip(anchors.row(hi))
            .map(|(a, b)| a * (1.0 - frac) + b * frac)
            .collect();
        embeddings.push(emb);
    }
    embeddings
}

fn layer_norm(m: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let dim = m.cols() as f64;
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / dim;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out_row = out.row_mut(r);
        for (i, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            *o = gain[i] * (v - mean) * inv + bias[i];
        }
    }
    out
}

fn silu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for v in out.row_mut(r) {
            *v /= 1.0 + (-*v).exp();
        }
    }
    out
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// Fresh key/value store holding only the start embedding's rows.
    pub fn new_kv_store(&self) -> Result<KvStore> {
        KvStore::with_start_rows(self)
    }

    /// Zero feature accumulator at the final grid.
    pub fn new_accumulator(&self) -> Result<Grid2D> {
        let (h, w) = self.config.schedule.final_grid();
        Grid2D::zeros(h, w, self.config.model_dim)
    }

    /// Input embeddings for the first scale: its scale and position
    /// embeddings only (the accumulator is still zero).
    pub fn first_scale_input(&self) -> Matrix {
        let mut m = self.position_embeddings[0].clone();
        let emb = &self.scale_embeddings[0];
        for r in 0..m.rows() {
            for (v, e) in m.row_mut(r).iter_mut().zip(emb) {
                *v += e;
            }
        }
        m
    }

    /// Input embeddings for scale `t >= 2`: the accumulated feature resized
    /// to the scale's grid (damped by [`FEATURE_INPUT_SCALE`]), flattened
    /// row-major, plus the scale and position embeddings.
    pub fn next_scale_input(&self, prev_feature: &Grid2D, t: usize) -> Result<Matrix> {
        if t < 2 || t > self.config.schedule.len() {
            return Err(NovaError::InvalidInput(format!(
                "next_scale_input expects 2 <= t <= {}, got {t}",
                self.config.schedule.len()
            )));
        }
        let mut m = self.resized_feature(prev_feature, t)?;
        let emb = &self.scale_embeddings[t - 1];
        let pos = &self.position_embeddings[t - 1];
        for r in 0..m.rows() {
            let prow = pos.row(r);
            for (i, v) in m.row_mut(r).iter_mut().enumerate() {
                *v += emb[i] + prow[i];
            }
        }
        Ok(m)
    }

    /// The resized, damped accumulated feature alone (no embeddings): the
    /// feature component of a scale's input, and the reference signal for the
    /// mse token selector.
    pub fn resized_feature(&self, prev_feature: &Grid2D, t: usize) -> Result<Matrix> {
        let (h, w) = self.config.schedule.grid(t);
        Ok(bilinear_resize(prev_feature, h, w)?
            .to_matrix()
            .scale(FEATURE_INPUT_SCALE))
    }

    /// One pre-norm transformer block over the kept rows of a scale.
    ///
    /// Queries come from the kept rows only; keys and values are the store's
    /// prefix for this layer followed by the kept rows' own projections.
    /// Per head, queries are pre-scaled by `1/sqrt(d/heads)` before the score
    /// product. Rows outside the mask pass through bit-identical.
    pub fn forward_layer(
        &self,
        state: &LayerState,
        kv: &KvStore,
        mask: &KeepMask,
        record_scores: bool,
    ) -> Result<LayerOutcome> {
        let d = self.config.model_dim;
        let tokens = self.config.schedule.tokens(state.scale);
        if state.hidden.rows() != tokens {
            return Err(NovaError::Internal(format!(
                "layer state has {} rows but scale {} has {tokens} tokens",
                state.hidden.rows(),
                state.scale
            )));
        }
        if let Some(&last) = mask.kept.last() {
            if last >= tokens {
                return Err(NovaError::InvalidInput(format!(
                    "keep index {last} out of range for {tokens} tokens"
                )));
            }
        }
        let expected_prefix = self.config.schedule.prefix_len(state.scale);
        if kv.len(state.layer) != expected_prefix {
            return Err(NovaError::Internal(format!(
                "kv store holds {} rows at layer {} but scale {} expects a prefix of {expected_prefix}",
                kv.len(state.layer),
                state.layer,
                state.scale
            )));
        }

        let weights = &self.layer_weights[state.layer - 1];
        let full = mask.is_full(tokens);
        let x_keep = if full {
            state.hidden.clone()
        } else {
            state.hidden.select_rows(&mask.kept)
        };
        let normed = layer_norm(&x_keep, &weights.ln1_gain, &weights.ln1_bias);
        let queries = matmul(&normed, &weights.wq)?;
        let kept_keys = matmul(&normed, &weights.wk)?;
        let kept_values = matmul(&normed, &weights.wv)?;
        let (prefix_keys, prefix_values) = kv.layer(state.layer);
        let keys = prefix_keys.vstack(&kept_keys)?;
        let values = prefix_values.vstack(&kept_values)?;

        let heads = self.config.heads;
        let head_dim = d / heads;
        let scale_factor = 1.0 / (head_dim as f64).sqrt();
        let mut context = Matrix::zeros(x_keep.rows(), d);
        let mut score_sum = if record_scores {
            Some(Matrix::zeros(x_keep.rows(), keys.rows()))
        } else {
            None
        };
        for h in 0..heads {
            let q_h = queries.select_cols(h * head_dim, head_dim).scale(scale_factor);
            let k_h = keys.select_cols(h * head_dim, head_dim);
            let v_h = values.select_cols(h * head_dim, head_dim);
            let scores = matmul(&q_h, &k_h.transpose())?;
            let weights_h = softmax_rows(&scores);
            if let Some(sum) = score_sum.as_mut() {
                *sum = sum.add(&weights_h)?;
            }
            let ctx_h = matmul(&weights_h, &v_h)?;
            for r in 0..ctx_h.rows() {
                let dst = &mut context.row_mut(r)[h * head_dim..(h + 1) * head_dim];
                dst.copy_from_slice(ctx_h.row(r));
            }
        }
        let attn_out = matmul(&context, &weights.wo)?;
        let after_attn = x_keep.add(&attn_out)?;
        let normed2 = layer_norm(&after_attn, &weights.ln2_gain, &weights.ln2_bias);
        let hidden = silu(&matmul(&normed2, &weights.w1)?);
        let mlp_out = matmul(&hidden, &weights.w2)?;
        let out_keep = after_attn.add(&mlp_out)?;

        let new_hidden = if full {
            out_keep
        } else {
            let mut scattered = state.hidden.clone();
            for (row, &idx) in mask.kept.iter().enumerate() {
                scattered.row_mut(idx).copy_from_slice(out_keep.row(row));
            }
            scattered
        };
        Ok(LayerOutcome {
            state: LayerState {
                scale: state.scale,
                layer: state.layer,
                hidden: new_hidden,
            },
            kept_keys,
            kept_values,
            scores: score_sum.map(|s| s.scale(1.0 / heads as f64)),
        })
    }

    /// Key/value projections of arbitrary rows at one layer, used to backfill
    /// the store for rows pruned during the scale.
    pub fn project_kv(&self, layer: usize, rows: &Matrix) -> Result<(Matrix, Matrix)> {
        let weights = &self.layer_weights[layer - 1];
        let normed = layer_norm(rows, &weights.ln1_gain, &weights.ln1_bias);
        Ok((matmul(&normed, &weights.wk)?, matmul(&normed, &weights.wv)?))
    }

    /// Logits over the vocabulary via the shared readout head:
    /// `hidden * W + bias`, no normalization, so a zero row maps to the bias.
    pub fn readout_logits(&self, hidden: &Matrix) -> Result<Matrix> {
        if hidden.cols() != self.config.model_dim {
            return Err(NovaError::InvalidInput(format!(
                "readout expects width {}, got {}",
                self.config.model_dim,
                hidden.cols()
            )));
        }
        let mut logits = matmul(hidden, &self.readout_weight)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.readout_bias) {
                *v += b;
            }
        }
        Ok(logits)
    }

    /// Turn an `N x V` logit matrix into a token map for scale `t`.
    pub fn sample_tokens(
        &self,
        logits: &Matrix,
        t: usize,
        mode: SamplingMode,
        rng: &mut Rng,
    ) -> Result<TokenMap> {
        let (h, w) = self.config.schedule.grid(t);
        if logits.rows() != h * w || logits.cols() != self.config.vocab_size {
            return Err(NovaError::InvalidInput(format!(
                "logit shape {}x{} does not match scale {t} ({}x{} tokens, vocab {})",
                logits.rows(),
                logits.cols(),
                h,
                w,
                self.config.vocab_size
            )));
        }
        let ids = match mode {
            SamplingMode::Argmax => (0..logits.rows())
                .map(|r| {
                    let row = logits.row(r);
                    let mut best = 0usize;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect(),
            SamplingMode::Categorical => {
                let probs = softmax_rows(logits);
                (0..probs.rows())
                    .map(|r| {
                        let draw = rng.next_f64();
                        let row = probs.row(r);
                        let mut cumulative = 0.0;
                        for (i, &p) in row.iter().enumerate() {
                            cumulative += p;
                            if draw < cumulative {
                                return i;
                            }
                        }
                        row.len() - 1
                    })
                    .collect()
            }
        };
        Ok(TokenMap {
            scale: t,
            height: h,
            width: w,
            ids,
        })
    }

    /// Add a scale's looked-up token grid, upsampled to the final grid, onto
    /// the accumulator.
    pub fn accumulate_feature(&self, acc: &Grid2D, tokens: &TokenMap) -> Result<Grid2D> {
        let (fh, fw) = self.config.schedule.final_grid();
        if acc.height() != fh || acc.width() != fw {
            return Err(NovaError::InvalidInput(format!(
                "accumulator is {}x{} but the final grid is {fh}x{fw}",
                acc.height(),
                acc.width()
            )));
        }
        let lookup = self.codebook.lookup_grid(tokens)?;
        let upsampled = bilinear_resize(&lookup, fh, fw)?;
        let sum = acc.to_matrix().add(&upsampled.to_matrix())?;
        Grid2D::from_matrix(&sum, fh, fw)
    }

    /// Serialize all weights as a flat little-endian f64 blob plus a JSON
    /// sidecar listing each tensor's name and shape in storage order.
    pub fn export_weights(&self) -> (Vec<u8>, String) {
        let mut bytes = Vec::new();
        let mut manifest = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, data: &[f64]| {
            manifest.push(serde_json::json!({
                "name": name,
                "rows": rows,
                "cols": cols,
            }));
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(
            "codebook".into(),
            self.codebook.vectors.rows(),
            self.codebook.vectors.cols(),
            self.codebook.vectors.data(),
        );
        push("start_embedding".into(), 1, self.start_embedding.len(), &self.start_embedding);
        push(
            "readout_weight".into(),
            self.readout_weight.rows(),
            self.readout_weight.cols(),
            self.readout_weight.data(),
        );
        push("readout_bias".into(), 1, self.readout_bias.len(), &self.readout_bias);
        for (i, layer) in self.layer_weights.iter().enumerate() {
            let j = i + 1;
            push(format!("layer{j}.ln1_gain"), 1, layer.ln1_gain.len(), &layer.ln1_gain);
            push(format!("layer{j}.ln1_bias"), 1, layer.ln1_bias.len(), &layer.ln1_bias);
            for (name, m) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
            ] {
                push(format!("layer{j}.{name}"), m.rows(), m.cols(), m.data());
            }
            push(format!("layer{j}.ln2_gain"), 1, layer.ln2_gain.len(), &layer.ln2_gain);
            push(format!("layer{j}.ln2_bias"), 1, layer.ln2_bias.len(), &layer.ln2_bias);
            push(format!("layer{j}.w1"), layer.w1.rows(), layer.w1.cols(), layer.w1.data());
            push(format!("layer{j}.w2"), layer.w2.rows(), layer.w2.cols(), layer.w2.data());
        }
        push(
            "embedding_anchors".into(),
            self.embedding_anchors.rows(),
            self.embedding_anchors.cols(),
            self.embedding_anchors.data(),
        );
        push(
            "position_anchor".into(),
            self.position_anchor.height() * self.position_anchor.width(),
            self.position_anchor.channels(),
            self.position_anchor.data(),
        );
        let sidecar = serde_json::to_string_pretty(&serde_json::json!({
            "dtype": "f64-le",
            "tensors": manifest,
        }))
        .expect("sidecar serialization cannot fail");
        (bytes, sidecar)
    }

    /// Rebuild a model from an exported blob, validating the sidecar against
    /// the config's expected tensor list.
    pub fn import_weights(config: &ModelConfig, bytes: &[u8], sidecar: &str) -> Result<Model> {
        config.validate()?;
        let reference = build_model(config)?;
        let (expected_bytes, expected_sidecar) = reference.export_weights();
        let parsed: serde_json::Value = serde_json::from_str(sidecar)
            .map_err(|e| NovaError::InvalidInput(format!("unreadable weight sidecar: {e}")))?;
        let expected: serde_json::Value =
            serde_json::from_str(&expected_sidecar).expect("own sidecar parses");
        if parsed.get("tensors") != expected.get("tensors") {
            return Err(NovaError::InvalidInput(
                "weight sidecar does not match the config's tensor shapes".to_string(),
            ));
        }
        if bytes.len() != expected_bytes.len() {
            return Err(NovaError::InvalidInput(format!(
                "weight blob holds {} bytes, config expects {}",
                bytes.len(),
                expected_bytes.len()
            )));
        }
        let mut model = reference;
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")));
        let mut take = |len: usize| -> Vec<f64> { values.by_ref().take(len).collect() };
        let d = config.model_dim;
        let v = config.vocab_size;
        model.codebook.vectors = Matrix::from_vec(v, d, take(v * d))?;
        model.start_embedding = take(d);
        model.readout_weight = Matrix::from_vec(d, v, take(d * v))?;
        model.readout_bias = take(v);
        for layer in &mut model.layer_weights {
            layer.ln1_gain = take(d);
            layer.ln1_bias = take(d);
            layer.wq = Matrix::from_vec(d, d, take(d * d))?;
            layer.wk = Matrix::from_vec(d, d, take(d * d))?;
            layer.wv = Matrix::from_vec(d, d, take(d * d))?;
            layer.wo = Matrix::from_vec(d, d, take(d * d))?;
            layer.ln2_gain = take(d);
            layer.ln2_bias = take(d);
            layer.w1 = Matrix::from_vec(d, 4 * d, take(d * 4 * d))?;
            layer.w2 = Matrix::from_vec(4 * d, d, take(4 * d * d))?;
        }
        model.embedding_anchors =
            Matrix::from_vec(SCALE_EMBEDDING_ANCHORS, d, take(SCALE_EMBEDDING_ANCHORS * d))?;
        model.scale_embeddings = derive_scale_embeddings(&model.embedding_anchors, config.schedule.len());
        let anchors = POSITION_ANCHORS;
        model.position_anchor = Grid2D::from_matrix(
            &Matrix::from_vec(anchors * anchors, d, take(anchors * anchors * d))?,
            anchors,
            anchors,
        )?;
        for t in 1..=config.schedule.len() {
            let (h, w) = config.schedule.grid(t);
            model.position_embeddings[t - 1] =
                bilinear_resize(&model.position_anchor, h, w)?.to_matrix();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defaults;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            schedule: ScaleSchedule::from_sides(&[1, 2, 2, 3]).unwrap(),
            vocab_size: 8,
            model_dim: 8,
            layers: 2,
            heads: 2,
            seed: 5,
        }
    }

    #[test]
    fn schedule_invariants_enforced() {
        assert!(ScaleSchedule::from_sides(&[1, 2, 3, 4]).is_ok());
        assert!(ScaleSchedule::from_sides(&[2, 3, 4, 5]).is_err()); // no 1x1 start
        assert!(ScaleSchedule::from_sides(&[1, 3, 2, 4]).is_err()); // decreasing
        assert!(ScaleSchedule::from_sides(&[1, 2, 3]).is_err()); // too short
    }

    #[test]
    fn schedule_prefix_counts() {
        let s = ScaleSchedule::from_sides(&[1, 2, 3, 4]).unwrap();
        assert_eq!(s.prefix_len(1), 1);
        assert_eq!(s.prefix_len(2), 2);
        assert_eq!(s.prefix_len(3), 6);
        assert_eq!(s.prefix_len(4), 15);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let config = ModelConfig {
            model_dim: 8,
            heads: 3,
            ..tiny_config()
        };
        let err = build_model(&config).unwrap_err();
        assert!(matches!(err, NovaError::Config { ref field, .. } if field == "heads"));
    }

    #[test]
    fn same_config_builds_identical_model() {
        let a = build_model(&tiny_config()).unwrap();
        let b = build_model(&tiny_config()).unwrap();
        assert_eq!(a, b);
        let input = a.first_scale_input();
        let logits_a = a.readout_logits(&input).unwrap();
        let logits_b = b.readout_logits(&input).unwrap();
        assert_eq!(logits_a, logits_b);
    }

    #[test]
    fn default_desk_config_builds() {
        let config = defaults::default_model_config(0);
        let model = build_model(&config).unwrap();
        assert_eq!(model.config().schedule.len(), 10);
        assert_eq!(model.config().schedule.final_grid(), (16, 16));
    }

    #[test]
    fn next_scale_input_shapes_sweep() {
        let config = defaults::default_model_config(1);
        let model = build_model(&config).unwrap();
        let acc = model.new_accumulator().unwrap();
        for t in 2..=config.schedule.len() {
            let input = model.next_scale_input(&acc, t).unwrap();
            assert_eq!(input.rows(), config.schedule.tokens(t));
            assert_eq!(input.cols(), config.model_dim);
        }
        assert!(model.next_scale_input(&acc, 1).is_err());
        assert!(model.next_scale_input(&acc, 11).is_err());
    }

    #[test]
    fn constant_feature_gives_equal_rows_before_embeddings() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let (fh, fw) = config.schedule.final_grid();
        let constant =
            Grid2D::from_vec(fh, fw, config.model_dim, vec![0.3; fh * fw * config.model_dim])
                .unwrap();
        let resized = model.resized_feature(&constant, 2).unwrap();
        let first = resized.row(0).to_vec();
        for r in 1..resized.rows() {
            assert_eq!(resized.row(r), &first[..]);
        }
    }

    #[test]
    fn readout_of_zero_row_is_bias() {
        let model = build_model(&tiny_config()).unwrap();
        let zero = Matrix::zeros(1, 8);
        let logits = model.readout_logits(&zero).unwrap();
        for (a, b) in logits.row(0).iter().zip(&model.readout_bias) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn readout_shape_sweep() {
        let config = defaults::default_model_config(2);
        let model = build_model(&config).unwrap();
        for t in 1..=config.schedule.len() {
            let n = config.schedule.tokens(t);
            let hidden = Matrix::zeros(n, config.model_dim);
            let logits = model.readout_logits(&hidden).unwrap();
            assert_eq!((logits.rows(), logits.cols()), (n, config.vocab_size));
        }
        assert!(model.readout_logits(&Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn argmax_and_tie_break() {
        let model = build_model(&tiny_config()).unwrap();
        let logits = Matrix::from_vec(
            1,
            8,
            vec![3.0, 3.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let map = model
            .sample_tokens(&logits, 1, SamplingMode::Argmax, &mut Rng::new(0))
            .unwrap();
        assert_eq!(map.ids, vec![0]); // tie resolves to the lower id

        let logits = Matrix::from_vec(1, 8, vec![0.0, 5.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let map = model
            .sample_tokens(&logits, 1, SamplingMode::Argmax, &mut Rng::new(0))
            .unwrap();
        assert_eq!(map.ids, vec![1]);
    }

    #[test]
    fn categorical_sampling_reproducible() {
        let model = build_model(&tiny_config()).unwrap();
        let logits = Matrix::from_vec(4, 8, (0..32).map(|i| (i % 7) as f64 * 0.5).collect())
            .unwrap();
        let a = model
            .sample_tokens(&logits, 2, SamplingMode::Categorical, &mut Rng::new(9))
            .unwrap();
        let b = model
            .sample_tokens(&logits, 2, SamplingMode::Categorical, &mut Rng::new(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_codebook_leaves_accumulator_unchanged() {
        let config = tiny_config();
        let mut model = build_model(&config).unwrap();
        model.codebook.vectors = Matrix::zeros(config.vocab_size, config.model_dim);
        let acc = model.new_accumulator().unwrap();
        let tokens = TokenMap {
            scale: 2,
            height: 2,
            width: 2,
            ids: vec![1, 2, 3, 4],
        };
        let out = model.accumulate_feature(&acc, &tokens).unwrap();
        assert_eq!(out, acc);
    }

    #[test]
    fn single_scale_accumulation_broadcasts_codebook_vector() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let acc = model.new_accumulator().unwrap();
        let tokens = TokenMap {
            scale: 1,
            height: 1,
            width: 1,
            ids: vec![5],
        };
        let out = model.accumulate_feature(&acc, &tokens).unwrap();
        let expect = model.codebook.vector(5);
        for y in 0..out.height() {
            for x in 0..out.width() {
                for (a, b) in out.site(y, x).iter().zip(expect) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn accumulation_is_order_independent() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let maps: Vec<TokenMap> = (1..=4)
            .map(|t| {
                let (h, w) = config.schedule.grid(t);
                TokenMap {
                    scale: t,
                    height: h,
                    width: w,
                    ids: (0..h * w).map(|i| (i + t) % config.vocab_size).collect(),
                }
            })
            .collect();
        let mut acc = model.new_accumulator().unwrap();
        for map in &maps {
            acc = model.accumulate_feature(&acc, map).unwrap();
        }
        // independent route: sum the upsampled lookups directly
        let (fh, fw) = config.schedule.final_grid();
        let mut expect = Matrix::zeros(fh * fw, config.model_dim);
        for map in &maps {
            let up = bilinear_resize(&model.codebook.lookup_grid(map).unwrap(), fh, fw).unwrap();
            expect = expect.add(&up.to_matrix()).unwrap();
        }
        for (a, b) in acc.to_matrix().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_vocab_token_rejected() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let acc = model.new_accumulator().unwrap();
        let tokens = TokenMap {
            scale: 1,
            height: 1,
            width: 1,
            ids: vec![8],
        };
        assert!(model.accumulate_feature(&acc, &tokens).is_err());
    }

    #[test]
    fn pruned_rows_pass_through_untouched() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let mut kv = model.new_kv_store().unwrap();
        // complete scale 1 so the store carries its prefix row
        for layer in 1..=config.layers {
            let (k, v) = model.project_kv(layer, &Matrix::zeros(1, 8)).unwrap();
            kv.append(layer, k, v).unwrap();
        }
        let acc = model.new_accumulator().unwrap();
        let input = model.next_scale_input(&acc, 2).unwrap();
        let state = LayerState {
            scale: 2,
            layer: 1,
            hidden: input.clone(),
        };
        let mask = KeepMask {
            scale: 2,
            layer: 1,
            kept: vec![0, 2],
        };
        let out = model.forward_layer(&state, &kv, &mask, false).unwrap();
        assert_eq!(out.state.hidden.row(1), input.row(1));
        assert_eq!(out.state.hidden.row(3), input.row(3));
        assert_ne!(out.state.hidden.row(0), input.row(0));
    }

    #[test]
    fn single_token_single_head_attention_matches_hand_oracle() {
        let config = ModelConfig {
            schedule: ScaleSchedule::from_sides(&[1, 2, 2, 3]).unwrap(),
            vocab_size: 4,
            model_dim: 4,
            layers: 2,
            heads: 1,
            seed: 11,
        };
        let model = build_model(&config).unwrap();
        let kv = model.new_kv_store().unwrap();
        let input = model.first_scale_input();
        let state = LayerState {
            scale: 1,
            layer: 1,
            hidden: input.clone(),
        };
        let out = model
            .forward_layer(&state, &kv, &KeepMask::all(1, 1, 1), false)
            .unwrap();

        // Hand-rolled single-query attention over [sos_kv; own_kv].
        let w = &model.layer_weights[0];
        let normed = layer_norm(&input, &w.ln1_gain, &w.ln1_bias);
        let q: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|k| normed.get(0, k) * w.wq.get(k, c)).sum::<f64>())
            .collect();
        let own_k: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|k| normed.get(0, k) * w.wk.get(k, c)).sum::<f64>())
            .collect();
        let own_v: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|k| normed.get(0, k) * w.wv.get(k, c)).sum::<f64>())
            .collect();
        let (sos_k, sos_v) = {
            let sos = Matrix::from_vec(1, 4, model.start_embedding.clone()).unwrap();
            let n = layer_norm(&sos, &w.ln1_gain, &w.ln1_bias);
            let k: Vec<f64> = (0..4)
                .map(|c| (0..4).map(|i| n.get(0, i) * w.wk.get(i, c)).sum::<f64>())
                .collect();
            let v: Vec<f64> = (0..4)
                .map(|c| (0..4).map(|i| n.get(0, i) * w.wv.get(i, c)).sum::<f64>())
                .collect();
            (k, v)
        };
        let scale = 1.0 / 2.0; // 1/sqrt(head_dim=4)
        let s0: f64 = q.iter().zip(&sos_k).map(|(a, b)| a * scale * b).sum();
        let s1: f64 = q.iter().zip(&own_k).map(|(a, b)| a * scale * b).sum();
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let z = e0 + e1;
        let ctx: Vec<f64> = (0..4)
            .map(|c| (e0 / z) * sos_v[c] + (e1 / z) * own_v[c])
            .collect();
        let attn: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|k| ctx[k] * w.wo.get(k, c)).sum::<f64>())
            .collect();
        let after_attn: Vec<f64> = (0..4).map(|c| input.get(0, c) + attn[c]).collect();
        let a_m = Matrix::from_vec(1, 4, after_attn.clone()).unwrap();
        let n2 = layer_norm(&a_m, &w.ln2_gain, &w.ln2_bias);
        let h: Vec<f64> = (0..16)
            .map(|c| {
                let pre: f64 = (0..4).map(|k| n2.get(0, k) * w.w1.get(k, c)).sum();
                pre / (1.0 + (-pre).exp())
            })
            .collect();
        let mlp: Vec<f64> = (0..4)
            .map(|c| (0..16).map(|k| h[k] * w.w2.get(k, c)).sum::<f64>())
            .collect();
        for c in 0..4 {
            let expect = after_attn[c] + mlp[c];
            assert!(
                (out.state.hidden.get(0, c) - expect).abs() < 1e-9,
                "column {c}: {} vs {expect}",
                out.state.hidden.get(0, c)
            );
        }
    }

    #[test]
    fn kv_store_length_mismatch_is_internal_error() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let kv = model.new_kv_store().unwrap();
        // scale 2 expects a prefix of 2 rows, store only has the start row
        let state = LayerState {
            scale: 2,
            layer: 1,
            hidden: Matrix::zeros(4, 8),
        };
        let err = model
            .forward_layer(&state, &kv, &KeepMask::all(2, 1, 4), false)
            .unwrap_err();
        assert!(matches!(err, NovaError::Internal(_)));
    }

    #[test]
    fn weight_export_import_roundtrip() {
        let config = tiny_config();
        let model = build_model(&config).unwrap();
        let (bytes, sidecar) = model.export_weights();
        let restored = Model::import_weights(&config, &bytes, &sidecar).unwrap();
        assert_eq!(model, restored);
        // truncated blob rejected
        assert!(Model::import_weights(&config, &bytes[..bytes.len() - 8], &sidecar).is_err());
    }
}
