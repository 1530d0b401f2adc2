//! A naive dense next-scale forward, written as a test oracle.
//!
//! This implementation deliberately has no keep masks, no residual cache and
//! no key/value store: every scale recomputes its full attention context from
//! saved layer inputs. Weights come from the engine's exported blob, so the
//! only shared code is the `nova::numerics` primitive layer (which has its
//! own oracles). Arithmetic follows the documented canonical order
//! (row-local layer norm, queries pre-scaled by `1/sqrt(d/heads)`, ascending
//! inner-sum accumulation), so results are expected to match the production
//! path bit for bit when nothing is pruned.

use std::collections::HashMap;

use nova::model::{
    build_model, ModelConfig, SamplingMode, TokenMap, FEATURE_INPUT_SCALE, LAYER_NORM_EPS,
    POSITION_ANCHORS, SCALE_EMBEDDING_ANCHORS,
};
use nova::numerics::{bilinear_resize, matmul, softmax_rows, Grid2D, Matrix, Rng};

pub struct DenseReference {
    config: ModelConfig,
    tensors: HashMap<String, Matrix>,
    scale_embeddings: Vec<Vec<f64>>,
    position_tables: Vec<Matrix>,
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

impl DenseReference {
    /// Parse the exported weight blob of the model a config describes.
    pub fn from_config(config: &ModelConfig) -> Self {
        let model = build_model(config).expect("reference builds from a valid config");
        let (bytes, sidecar) = model.export_weights();
        Self::from_export(config, &bytes, &sidecar)
    }

    pub fn from_export(config: &ModelConfig, bytes: &[u8], sidecar: &str) -> Self {
        let manifest: serde_json::Value = serde_json::from_str(sidecar).expect("valid sidecar");
        let mut tensors = HashMap::new();
        let mut offset = 0usize;
        for entry in manifest["tensors"].as_array().expect("tensor list") {
            let name = entry["name"].as_str().expect("name").to_string();
            let rows = entry["rows"].as_u64().expect("rows") as usize;
            let cols = entry["cols"].as_u64().expect("cols") as usize;
            let len = rows * cols;
            let data: Vec<f64> = bytes[offset..offset + len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += len * 8;
            tensors.insert(name, Matrix::from_vec(rows, cols, data).expect("tensor"));
        }
        assert_eq!(offset, bytes.len(), "blob fully consumed");

        // Re-derive the per-scale embedding and position tables from their
        // anchors with the documented interpolation rules.
        let anchors = &tensors["embedding_anchors"];
        assert_eq!(anchors.rows(), SCALE_EMBEDDING_ANCHORS);
        let scales = config.schedule.len();
        let mut scale_embeddings = Vec::with_capacity(scales);
        for t in 1..=scales {
            let u = (t - 1) as f64 / (scales - 1) as f64 * (anchors.rows() - 1) as f64;
            let lo = (u.floor() as usize).min(anchors.rows() - 1);
            let hi = (lo + 1).min(anchors.rows() - 1);
            let frac = u - lo as f64;
            scale_embeddings.push(
                anchors
                    .row(lo)
                    .iter()
                    .zip(anchors.row(hi))
                    .map(|(a, b)| a * (1.0 - frac) + b * frac)
                    .collect(),
            );
        }
        let anchor_grid = Grid2D::from_matrix(
            &tensors["position_anchor"],
            POSITION_ANCHORS,
            POSITION_ANCHORS,
        )
        .expect("anchor grid");
        let mut position_tables = Vec::with_capacity(scales);
        for t in 1..=scales {
            let (h, w) = config.schedule.grid(t);
            position_tables.push(bilinear_resize(&anchor_grid, h, w).unwrap().to_matrix());
        }
        DenseReference {
            config: config.clone(),
            tensors,
            scale_embeddings,
            position_tables,
        }
    }

    fn tensor(&self, name: &str) -> &Matrix {
        &self.tensors[name]
    }

    fn gain(&self, name: &str) -> &[f64] {
        self.tensor(name).data()
    }

    /// Dense generation over the first `limit` scales (the full schedule when
    /// `limit` covers it). Returns the token pyramid, the accumulated feature
    /// and the per-scale logits.
    pub fn generate(
        &self,
        sampling: SamplingMode,
        sample_seed: u64,
        limit: usize,
    ) -> (Vec<TokenMap>, Grid2D, Vec<Matrix>) {
        let d = self.config.model_dim;
        let vocab = self.config.vocab_size;
        let layers = self.config.layers;
        let heads = self.config.heads;
        let head_dim = d / heads;
        let (fh, fw) = self.config.schedule.final_grid();
        let scales = self.config.schedule.len().min(limit);
        let mut rng = Rng::new(sample_seed);
        let mut acc = Grid2D::zeros(fh, fw, d).unwrap();
        // Per layer: the raw start-embedding row followed by every completed
        // scale's layer-input rows.
        let mut past_inputs: Vec<Vec<Matrix>> = (0..layers)
            .map(|_| vec![self.tensor("start_embedding").clone()])
            .collect();
        let mut pyramid = Vec::new();
        let mut all_logits = Vec::new();

        for t in 1..=scales {
            let (h, w) = self.config.schedule.grid(t);
            // Embedding additions mirror the production order exactly: the
            // first scale adds emb onto the position rows; later scales add
            // (emb + pos) onto the damped feature in one summed term.
            let emb = &self.scale_embeddings[t - 1];
            let pos = &self.position_tables[t - 1];
            let mut x = if t == 1 {
                let mut m = pos.clone();
                for r in 0..m.rows() {
                    for (v, e) in m.row_mut(r).iter_mut().zip(emb) {
                        *v += e;
                    }
                }
                m
            } else {
                let mut m = bilinear_resize(&acc, h, w)
                    .unwrap()
                    .to_matrix()
                    .scale(FEATURE_INPUT_SCALE);
                for r in 0..m.rows() {
                    let prow = pos.row(r);
                    for (i, v) in m.row_mut(r).iter_mut().enumerate() {
                        *v += emb[i] + prow[i];
                    }
                }
                m
            };

            for j in 1..=layers {
                let ln1_gain = format!("layer{j}.ln1_gain");
                let ln1_bias = format!("layer{j}.ln1_bias");
                past_inputs[j - 1].push(x.clone());
                // context = sos + completed scales + current rows
                let mut context_rows = past_inputs[j - 1][0].clone();
                for block in &past_inputs[j - 1][1..] {
                    context_rows = context_rows.vstack(block).unwrap();
                }
                let context_norm =
                    layer_norm(&context_rows, self.gain(&ln1_gain), self.gain(&ln1_bias));
                let x_norm = layer_norm(&x, self.gain(&ln1_gain), self.gain(&ln1_bias));
                let queries = matmul(&x_norm, self.tensor(&format!("layer{j}.wq"))).unwrap();
                let keys = matmul(&context_norm, self.tensor(&format!("layer{j}.wk"))).unwrap();
                let values = matmul(&context_norm, self.tensor(&format!("layer{j}.wv"))).unwrap();
                let mut ctx = Matrix::zeros(x.rows(), d);
                for hd in 0..heads {
                    let q_h = queries
                        .select_cols(hd * head_dim, head_dim)
                        .scale(1.0 / (head_dim as f64).sqrt());
                    let k_h = keys.select_cols(hd * head_dim, head_dim);
                    let v_h = values.select_cols(hd * head_dim, head_dim);
                    let scores = matmul(&q_h, &k_h.transpose()).unwrap();
                    let weights = softmax_rows(&scores);
                    let ctx_h = matmul(&weights, &v_h).unwrap();
                    for r in 0..ctx_h.rows() {
                        ctx.row_mut(r)[hd * head_dim..(hd + 1) * head_dim]
                            .copy_from_slice(ctx_h.row(r));
                    }
                }
                let attn = matmul(&ctx, self.tensor(&format!("layer{j}.wo"))).unwrap();
                let after_attn = x.add(&attn).unwrap();
                let normed2 = layer_norm(
                    &after_attn,
                    self.gain(&format!("layer{j}.ln2_gain")),
                    self.gain(&format!("layer{j}.ln2_bias")),
                );
                let mut hidden = matmul(&normed2, self.tensor(&format!("layer{j}.w1"))).unwrap();
                for r in 0..hidden.rows() {
                    for v in hidden.row_mut(r) {
                        *v /= 1.0 + (-*v).exp();
                    }
                }
                let mlp = matmul(&hidden, self.tensor(&format!("layer{j}.w2"))).unwrap();
                x = after_attn.add(&mlp).unwrap();
            }

            let mut logits = matmul(&x, self.tensor("readout_weight")).unwrap();
            let bias = self.gain("readout_bias");
            for r in 0..logits.rows() {
                for (v, b) in logits.row_mut(r).iter_mut().zip(bias) {
                    *v += b;
                }
            }
            let ids: Vec<usize> = match sampling {
                SamplingMode::Argmax => (0..logits.rows())
                    .map(|r| {
                        let row = logits.row(r);
                        let mut best = 0;
                        for (i, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect(),
                SamplingMode::Categorical => {
                    let probs = softmax_rows(&logits);
                    (0..probs.rows())
                        .map(|r| {
                            let draw = rng.next_f64();
                            let mut cumulative = 0.0;
                            for (i, &p) in probs.row(r).iter().enumerate() {
                                cumulative += p;
                                if draw < cumulative {
                                    return i;
                                }
                            }
                            vocab - 1
                        })
                        .collect()
                }
            };
            let codebook = self.tensor("codebook");
            let mut lookup = Grid2D::zeros(h, w, d).unwrap();
            for (i, &id) in ids.iter().enumerate() {
                for c in 0..d {
                    lookup.set(i / w, i % w, c, codebook.get(id, c));
                }
            }
            let upsampled = bilinear_resize(&lookup, fh, fw).unwrap();
            acc = Grid2D::from_matrix(&acc.to_matrix().add(&upsampled.to_matrix()).unwrap(), fh, fw)
                .unwrap();
            pyramid.push(TokenMap {
                scale: t,
                height: h,
                width: w,
                ids,
            });
            all_logits.push(logits);
        }
        (pyramid, acc, all_logits)
    }
}
