use std::f64::consts::FRAC_PI_2;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Error, Result};
use crate::scalar::Real;

/// Shape of the 2D token map a sequence was flattened from.
///
/// Tokens are flattened row-major: the token at row `u`, column `r` has flat
/// index `u * cols + r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionGrid {
    rows: usize,
    cols: usize,
}

impl PositionGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(domain(format!("grid must be non-empty, got {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Sequence length `rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flatten_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.rows || col >= self.cols {
            return Err(domain(format!(
                "cell ({row}, {col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(row * self.cols + col)
    }

    pub fn unflatten_index(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.len() {
            return Err(domain(format!(
                "flat index {index} outside grid of {} tokens",
                self.len()
            )));
        }
        Ok((index / self.cols, index % self.cols))
    }
}

impl std::fmt::Display for PositionGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Per-token angles derived from grid position.
///
/// `row[i] = pi * u_i / (2 * rows)` and `col[i] = pi * r_i / (2 * cols)`, so
/// every angle lies in `[0, pi/2)` and any pairwise difference lies strictly
/// inside `(-pi/2, pi/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleCodes {
    pub row: Vec<f64>,
    pub col: Vec<f64>,
}

pub fn angle_encode(grid: &PositionGrid) -> AngleCodes {
    let n = grid.len();
    let mut row = Vec::with_capacity(n);
    let mut col = Vec::with_capacity(n);
    for u in 0..grid.rows {
        for r in 0..grid.cols {
            row.push(FRAC_PI_2 * u as f64 / grid.rows as f64);
            col.push(FRAC_PI_2 * r as f64 / grid.cols as f64);
        }
    }
    AngleCodes { row, col }
}

/// Angle used by the flattened (1D) locality ablation: `pi * i / (2 * N)`.
pub fn sequence_angle(index: usize, len: usize) -> f64 {
    FRAC_PI_2 * index as f64 / len as f64
}

/// The 2D locality weight `cos(a_i - a_j) + cos(b_i - b_j)`.
///
/// Symmetric, in `[0, 2]`, and exactly 2 on the diagonal.
pub fn reweight_factor(i: usize, j: usize, grid: &PositionGrid) -> Result<f64> {
    let (ui, ri) = grid.unflatten_index(i)?;
    let (uj, rj) = grid.unflatten_index(j)?;
    let da = FRAC_PI_2 * (ui as f64 - uj as f64) / grid.rows as f64;
    let db = FRAC_PI_2 * (ri as f64 - rj as f64) / grid.cols as f64;
    Ok(da.cos() + db.cos())
}

/// The flattened-sequence locality weight `cos(c_i - c_j)`.
pub fn sequence_reweight_factor(i: usize, j: usize, len: usize) -> Result<f64> {
    if i >= len || j >= len {
        return Err(domain(format!("index pair ({i}, {j}) outside sequence of {len}")));
    }
    Ok((sequence_angle(i, len) - sequence_angle(j, len)).cos())
}

/// A batch of token sequences together with the grid they were flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    /// Shape `(batch, N, channels)`.
    pub data: Array3<T>,
    pub grid: PositionGrid,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(data: Array3<T>, grid: PositionGrid) -> Result<Self> {
        if data.shape()[1] != grid.len() {
            return Err(shape(format!(
                "token axis has {} entries but grid {grid} holds {}",
                data.shape()[1],
                grid.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("token grid"));
        }
        Ok(Self { data, grid })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}
