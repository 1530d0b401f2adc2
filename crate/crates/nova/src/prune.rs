//! Token selection and residual cache reuse.
//!
//! A keep mask names the tokens that still receive full layer computation;
//! everything else is reconstructed from the residual cache. The cache stores
//! `output - input` per layer for the most recent completed scale, kept dense
//! at every spatial site (a site pruned at that scale holds the residual that
//! was reused there, which is exactly what plain subtraction of the final
//! states yields). Crossing to the next scale, the cache grids are bilinearly
//! resized to the new grid and added onto pruned rows' inputs in place of
//! running the layer.

use serde::{Deserialize, Serialize};

use crate::error::{NovaError, Result};
use crate::numerics::{bilinear_resize, Grid2D, Matrix};

/// Sorted, unique token indices that keep full computation at one
/// (scale, layer) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepMask {
    pub scale: usize,
    pub layer: usize,
    pub kept: Vec<usize>,
}

impl KeepMask {
    pub fn all(scale: usize, layer: usize, tokens: usize) -> Self {
        KeepMask {
            scale,
            layer,
            kept: (0..tokens).collect(),
        }
    }

    pub fn is_full(&self, tokens: usize) -> bool {
        self.kept.len() == tokens
    }

    /// Membership bitmap over `tokens` positions.
    pub fn bitmap(&self, tokens: usize) -> Vec<bool> {
        let mut keep = vec![false; tokens];
        for &i in &self.kept {
            keep[i] = true;
        }
        keep
    }
}

/// Indices of the `kept_count` highest-importance tokens, ties broken toward
/// the lower spatial index, returned sorted ascending.
pub fn select_kept(importance: &[f64], kept_count: usize, scale: usize, layer: usize) -> Result<KeepMask> {
    let n = importance.len();
    if kept_count == 0 || kept_count > n {
        return Err(NovaError::InvalidInput(format!(
            "kept_count {kept_count} out of range for {n} tokens"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending importance preserves index order on ties.
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
    let mut kept: Vec<usize> = order[..kept_count].to_vec();
    kept.sort_unstable();
    Ok(KeepMask { scale, layer, kept })
}

/// Per-layer grids of hidden-state residuals for one completed scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    pub scale: usize,
    /// One `(h, w, d)` grid per transformer layer, in layer order.
    pub layers: Vec<Grid2D>,
}

impl ResidualCache {
    /// `output - input` of one layer, reshaped onto the scale's grid.
    pub fn layer_residual(
        input: &Matrix,
        output: &Matrix,
        height: usize,
        width: usize,
    ) -> Result<Grid2D> {
        if input.rows() != output.rows() || input.cols() != output.cols() {
            return Err(NovaError::InvalidInput(format!(
                "residual shape mismatch: {}x{} vs {}x{}",
                input.rows(),
                input.cols(),
                output.rows(),
                output.cols()
            )));
        }
        let diff = output.sub(input)?;
        Grid2D::from_matrix(&diff, height, width)
    }

    /// Resize every layer grid to the next scale's dimensions.
    pub fn interpolate_to(&self, height: usize, width: usize) -> Result<ResidualCache> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for grid in &self.layers {
            layers.push(bilinear_resize(grid, height, width)?);
        }
        Ok(ResidualCache {
            scale: self.scale,
            layers,
        })
    }

    /// True when every stored residual value is finite.
    pub fn is_dense_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.data().iter().all(|v| v.is_finite()))
    }
}

/// Fill pruned rows of a layer state with `input + interpolated residual`.
///
/// `state` carries real layer outputs at masked rows and untouched inputs at
/// pruned rows (the layer-forward contract); only the pruned rows are
/// modified. The residual grid must already be at the current scale's
/// dimensions.
pub fn reconstruct_pruned(
    state: &mut Matrix,
    residual: &Grid2D,
    mask: &KeepMask,
) -> Result<()> {
    let tokens = state.rows();
    if residual.height() * residual.width() != tokens {
        return Err(NovaError::Internal(format!(
            "interpolated cache covers {} sites but the scale has {tokens} tokens",
            residual.height() * residual.width()
        )));
    }
    if residual.channels() != state.cols() {
        return Err(NovaError::Internal(format!(
            "cache channel count {} does not match hidden width {}",
            residual.channels(),
            state.cols()
        )));
    }
    let keep = mask.bitmap(tokens);
    let width = residual.width();
    for (i, kept) in keep.iter().enumerate() {
        if !kept {
            let site = residual.site(i / width, i % width);
            for (v, r) in state.row_mut(i).iter_mut().zip(site) {
                *v += r;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn select_highest_entropy_tokens() {
        let mask = select_kept(&[0.1, 0.9, 0.5, 0.7], 2, 1, 1).unwrap();
        assert_eq!(mask.kept, vec![1, 3]);
    }

    #[test]
    fn select_all_is_identity() {
        let mask = select_kept(&[0.3, 0.1, 0.2], 3, 1, 1).unwrap();
        assert_eq!(mask.kept, vec![0, 1, 2]);
    }

    #[test]
    fn ties_keep_lowest_indices() {
        let mask = select_kept(&[0.5, 0.5, 0.5, 0.5], 2, 1, 1).unwrap();
        assert_eq!(mask.kept, vec![0, 1]);
    }

    #[test]
    fn out_of_range_kept_count_rejected() {
        assert!(select_kept(&[0.1, 0.2], 0, 1, 1).is_err());
        assert!(select_kept(&[0.1, 0.2], 3, 1, 1).is_err());
    }

    // Independent oracle: repeatedly scan for the maximum, preferring lower
    // indices, removing each winner.
    fn selection_oracle(importance: &[f64], kept_count: usize) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..importance.len()).collect();
        let mut chosen = Vec::new();
        for _ in 0..kept_count {
            let mut best = 0;
            for (pos, &idx) in remaining.iter().enumerate() {
                if importance[idx] > importance[remaining[best]] {
                    best = pos;
                }
            }
            chosen.push(remaining.remove(best));
        }
        chosen.sort_unstable();
        chosen
    }

    #[test]
    fn selection_matches_scan_oracle_on_random_maps() {
        let mut rng = Rng::new(99);
        for _ in 0..1000 {
            let n = 1 + (rng.next_u64() % 64) as usize;
            // Coarse quantization forces frequent ties.
            let importance: Vec<f64> = (0..n)
                .map(|_| (rng.next_u64() % 8) as f64 / 8.0)
                .collect();
            let kept_count = 1 + (rng.next_u64() % n as u64) as usize;
            let mask = select_kept(&importance, kept_count, 1, 1).unwrap();
            assert_eq!(mask.kept, selection_oracle(&importance, kept_count));
        }
    }

    #[test]
    fn identity_layer_gives_zero_cache() {
        let m = Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let g = ResidualCache::layer_residual(&m, &m, 2, 2).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_is_plain_subtraction() {
        let input = Matrix::from_vec(1, 2, vec![0.5, 1.0]).unwrap();
        let output = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let g = ResidualCache::layer_residual(&input, &output, 1, 1).unwrap();
        assert_eq!(g.data(), &[0.5, 1.0]);
    }

    #[test]
    fn cache_plus_input_reproduces_output() {
        let mut rng = Rng::new(4);
        let input = crate::numerics::seeded_gaussian(&mut rng, 9, 5, 1.0).unwrap();
        let output = crate::numerics::seeded_gaussian(&mut rng, 9, 5, 1.0).unwrap();
        let g = ResidualCache::layer_residual(&input, &output, 3, 3).unwrap();
        let back = input.add(&g.to_matrix()).unwrap();
        for (a, b) in back.data().iter().zip(output.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolate_same_size_is_identity() {
        let mut rng = Rng::new(6);
        let grid = Grid2D::from_matrix(
            &crate::numerics::seeded_gaussian(&mut rng, 6, 4, 1.0).unwrap(),
            2,
            3,
        )
        .unwrap();
        let cache = ResidualCache {
            scale: 3,
            layers: vec![grid.clone()],
        };
        let out = cache.interpolate_to(2, 3).unwrap();
        assert_eq!(out.layers[0], grid);
    }

    #[test]
    fn interpolate_constant_field_stays_constant() {
        let grid = Grid2D::from_vec(2, 2, 3, vec![1.25; 12]).unwrap();
        let cache = ResidualCache {
            scale: 1,
            layers: vec![grid],
        };
        let out = cache.interpolate_to(5, 7).unwrap();
        assert!(out.layers[0].data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn interpolate_preserves_affine_fields() {
        // a*x + b*y + c is reproduced exactly at align-corner target coords
        let (h, w) = (3, 4);
        let (a, b, c) = (0.75, -1.5, 2.0);
        let mut grid = Grid2D::zeros(h, w, 1).unwrap();
        for y in 0..h {
            for x in 0..w {
                grid.set(y, x, 0, a * x as f64 + b * y as f64 + c);
            }
        }
        let cache = ResidualCache {
            scale: 2,
            layers: vec![grid],
        };
        let (oh, ow) = (7, 5);
        let out = cache.interpolate_to(oh, ow).unwrap();
        for y in 0..oh {
            for x in 0..ow {
                let sx = x as f64 * (w - 1) as f64 / (ow - 1) as f64;
                let sy = y as f64 * (h - 1) as f64 / (oh - 1) as f64;
                let expect = a * sx + b * sy + c;
                assert!((out.layers[0].get(y, x, 0) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_cache_reconstruction_is_identity() {
        let mut state = Matrix::from_vec(4, 2, vec![1.0; 8]).unwrap();
        let before = state.clone();
        let zero = Grid2D::zeros(2, 2, 2).unwrap();
        let mask = KeepMask {
            scale: 2,
            layer: 1,
            kept: vec![0, 2],
        };
        reconstruct_pruned(&mut state, &zero, &mask).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn full_mask_reconstruction_touches_nothing() {
        let mut rng = Rng::new(12);
        let mut state = crate::numerics::seeded_gaussian(&mut rng, 6, 3, 1.0).unwrap();
        let before = state.clone();
        let residual = Grid2D::from_matrix(
            &crate::numerics::seeded_gaussian(&mut rng, 6, 3, 1.0).unwrap(),
            2,
            3,
        )
        .unwrap();
        let mask = KeepMask::all(1, 1, 6);
        reconstruct_pruned(&mut state, &residual, &mask).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn single_pruned_row_gets_site_residual() {
        let mut rng = Rng::new(13);
        let mut state = crate::numerics::seeded_gaussian(&mut rng, 4, 3, 1.0).unwrap();
        let input_row: Vec<f64> = state.row(2).to_vec();
        let residual = Grid2D::from_matrix(
            &crate::numerics::seeded_gaussian(&mut rng, 4, 3, 1.0).unwrap(),
            2,
            2,
        )
        .unwrap();
        let mask = KeepMask {
            scale: 2,
            layer: 1,
            kept: vec![0, 1, 3],
        };
        reconstruct_pruned(&mut state, &residual, &mask).unwrap();
        // row 2 sits at grid site (1, 0)
        for c in 0..3 {
            let expect = input_row[c] + residual.get(1, 0, c);
            assert!((state.get(2, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_cache_dims_is_internal_error() {
        let mut state = Matrix::zeros(4, 2);
        let residual = Grid2D::zeros(3, 3, 2).unwrap();
        let mask = KeepMask::all(1, 1, 4);
        assert!(matches!(
            reconstruct_pruned(&mut state, &residual, &mask),
            Err(NovaError::Internal(_))
        ));
    }
}
