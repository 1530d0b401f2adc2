//! Dense linear algebra and resampling primitives.
//!
//! Everything here is pure 64-bit float math with no hidden state (the one
//! exception is [`Rng`], which owns its stream). The module also hosts the
//! instrumented flop counter: [`matmul`] is the only routine that bumps it,
//! so a run's counter delta is exactly the matrix-multiply work it performed.
//! That is the hook the flop ledger is audited against.

use std::cell::Cell;

use crate::error::{NovaError, Result};

thread_local! {
    static MATMUL_FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate flops recorded by [`matmul`] on this thread so far.
///
/// A product of an `m x k` by a `k x n` matrix counts as `2*m*n*k` flops
/// (one multiply plus one add per inner step).
pub fn matmul_flop_count() -> u64 {
    MATMUL_FLOPS.with(|c| c.get())
}

/// Reset the thread-local matmul flop counter to zero.
pub fn reset_matmul_flop_count() {
    MATMUL_FLOPS.with(|c| c.set(0));
}

/// A dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data. Rejects length mismatches and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NovaError::InvalidInput(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NovaError::InvalidInput(
                "matrix data contains a non-finite value".to_string(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of the listed rows, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &r in indices {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy of the listed columns, in the order given.
    pub fn select_cols(&self, start: usize, len: usize) -> Matrix {
        debug_assert!(start + len <= self.cols);
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Matrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Stack `other` below `self`. Column counts must match.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(NovaError::InvalidInput(format!(
                "vstack column mismatch: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NovaError::InvalidInput(format!(
                "add shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NovaError::InvalidInput(format!(
                "sub shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Standard matrix product with 64-bit accumulation.
///
/// The i-k-j loop order is cache-friendly; for a fixed output cell the inner
/// sum still runs over `k` in ascending order, which pins the rounding
/// behaviour and keeps results bit-identical to a plain triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NovaError::InvalidInput(format!(
            "matmul dimension mismatch: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    MATMUL_FLOPS.with(|c| {
        c.set(c.get() + 2 * (a.rows as u64) * (a.cols as u64) * (b.cols as u64));
    });
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction for stability.
///
/// Each output row sums to 1 for any finite input, including rows with
/// magnitude well beyond exp overflow range.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// A dense row-major spatial grid: `height x width` sites, `channels` floats
/// per site.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(NovaError::InvalidInput(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Grid2D {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(NovaError::InvalidInput(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(NovaError::InvalidInput(format!(
                "grid data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Grid2D {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel vector at one spatial site.
    pub fn site(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Flatten to a `(height*width) x channels` matrix, row-major over sites.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data.clone(),
        }
    }

    /// Reinterpret an `(h*w) x c` matrix as an `h x w x c` grid.
    pub fn from_matrix(m: &Matrix, height: usize, width: usize) -> Result<Self> {
        if m.rows() != height * width {
            return Err(NovaError::InvalidInput(format!(
                "matrix rows {} do not match grid {height}x{width}",
                m.rows()
            )));
        }
        Grid2D::from_vec(height, width, m.cols(), m.data().to_vec())
    }
}

/// Align-corners bilinear resampling, per channel.
///
/// Output site `(i, j)` samples the source at
/// `(i*(h-1)/(out_h-1), j*(w-1)/(out_w-1))`; a target axis of length 1 samples
/// source coordinate 0. Each sample is the usual four-corner lerp
/// `v00*(1-fy)*(1-fx) + v01*(1-fy)*fx + v10*fy*(1-fx) + v11*fy*fx`, evaluated
/// in exactly that term order so results are reproducible bit for bit.
pub fn bilinear_resize(src: &Grid2D, out_h: usize, out_w: usize) -> Result<Grid2D> {
    if out_h == 0 || out_w == 0 {
        return Err(NovaError::InvalidInput(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == src.height && out_w == src.width {
        return Ok(src.clone());
    }
    let axis_scale = |src_len: usize, out_len: usize| -> f64 {
        if out_len > 1 {
            (src_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        }
    };
    let sy = axis_scale(src.height, out_h);
    let sx = axis_scale(src.width, out_w);
    let mut out = Grid2D::zeros(out_h, out_w, src.channels)?;
    for i in 0..out_h {
        let y = i as f64 * sy;
        let y0 = (y.floor() as usize).min(src.height - 1);
        let y1 = (y0 + 1).min(src.height - 1);
        let fy = y - y0 as f64;
        for j in 0..out_w {
            let x = j as f64 * sx;
            let x0 = (x.floor() as usize).min(src.width - 1);
            let x1 = (x0 + 1).min(src.width - 1);
            let fx = x - x0 as f64;
            for c in 0..src.channels {
                let v00 = src.get(y0, x0, c);
                let v01 = src.get(y0, x1, c);
                let v10 = src.get(y1, x0, c);
                let v11 = src.get(y1, x1, c);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set(i, j, c, v);
            }
        }
    }
    Ok(out)
}

/// Deterministic seedable generator (SplitMix64).
///
/// Each step is `state += 0x9E3779B97F4A7C15` followed by two xor-shift
/// multiplies (Steele, Lea & Flood's published finalizer). Pure 64-bit integer
/// arithmetic, so the stream is identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard-normal draw via Box-Muller.
    ///
    /// Each call consumes exactly two uniforms; the sine partner of the pair
    /// is discarded so the stream position is a pure function of call count.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // in (0, 1]: log argument never zero
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Matrix of independent `N(0, stddev^2)` draws, filled row-major.
pub fn seeded_gaussian(rng: &mut Rng, rows: usize, cols: usize, stddev: f64) -> Result<Matrix> {
    if !(stddev > 0.0) {
        return Err(NovaError::InvalidInput(format!(
            "stddev must be positive, got {stddev}"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(rng.next_gaussian() * stddev);
    }
    Ok(Matrix { rows, cols, data })
}
