//! Byte-exact emitters for the portable output formats.
//!
//! PPM (P6) and PGM (P5) were chosen so every emitted byte is auditable
//! without a codec. The affine value-to-byte mappings are returned alongside
//! the bytes so reports can record them.

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyMap;
use crate::error::{NovaError, Result};
use crate::numerics::Grid2D;

/// Affine map applied when rendering grid values to bytes:
/// `byte = round((v - min) / (max - min) * 255)`. A degenerate range renders
/// as mid-gray 128.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueMapping {
    pub min: f64,
    pub max: f64,
    /// True when min == max and the sentinel value 128 was used.
    pub degenerate: bool,
}

fn to_byte(v: f64, min: f64, max: f64) -> u8 {
    if max <= min {
        return 128;
    }
    let scaled = (v - min) / (max - min) * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

/// Render the first three channels of a feature grid as a binary PPM (P6).
///
/// One shared affine range over the three selected channels keeps relative
/// intensities comparable; grids with fewer than three channels repeat the
/// last channel.
pub fn feature_to_ppm(grid: &Grid2D) -> (Vec<u8>, ValueMapping) {
    let channel = |c: usize| c.min(grid.channels() - 1);
    let channels = [channel(0), channel(1), channel(2)];
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            for &c in &channels {
                let v = grid.get(y, x, c);
                min = min.min(v);
                max = max.max(v);
            }
        }
    }
    let degenerate = !(max > min);
    let mut bytes = format!("P6\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            for &c in &channels {
                bytes.push(to_byte(grid.get(y, x, c), min, max));
            }
        }
    }
    (bytes, ValueMapping { min, max, degenerate })
}

/// Normalization rule for entropy heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Map `[0, ln V]` onto `[0, 255]`.
    Fixed,
    /// Map the map's own `[min, max]` onto `[0, 255]`; a constant map
    /// renders as 128.
    PerMap,
}

/// Render an entropy map as a binary PGM (P5) of exactly the map's grid.
pub fn entropy_map_to_pgm(
    map: &EntropyMap,
    norm: Normalization,
    vocab_size: usize,
) -> Result<(Vec<u8>, ValueMapping)> {
    if map.values.len() != map.height * map.width {
        return Err(NovaError::InvalidInput(format!(
            "entropy map holds {} values for a {}x{} grid",
            map.values.len(),
            map.height,
            map.width
        )));
    }
    let (min, max) = match norm {
        Normalization::Fixed => (0.0, (vocab_size as f64).ln()),
        Normalization::PerMap => {
            let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (min, max)
        }
    };
    let degenerate = !(max > min);
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.values {
        bytes.push(to_byte(v, min, max));
    }
    Ok((bytes, ValueMapping { min, max, degenerate }))
}
