use serde::{Deserialize, Serialize};

use crate::acoustics::{Environment, Point2D};
use crate::error::{Error, Result};

/// Tolerance for snapping coordinates that sit on a cell boundary but land
/// just below it after floating-point division.
const BOUNDARY_EPS: f64 = 1e-9;

/// Square-cell grid over the environment. Rows index y, columns index x;
/// cell `(0, 0)` has its low corner at `(-origin_offset, -origin_offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_cells_x: usize,
    pub n_cells_y: usize,
    pub cell_size: f64,
    pub origin_offset: f64,
}

impl GridSpec {
    /// 81 × 81 cells of 10 cm, centered on a 6 × 6 m environment.
    pub fn fine() -> Self {
        Self {
            n_cells_x: 81,
            n_cells_y: 81,
            cell_size: 0.1,
            origin_offset: 1.05,
        }
    }

    /// 6 × 6 cells of 1 m, no margin.
    pub fn coarse() -> Self {
        Self {
            n_cells_x: 6,
            n_cells_y: 6,
            cell_size: 1.0,
            origin_offset: 0.0,
        }
    }

    /// Grid of `n` cells per side centered on the environment.
    pub fn centered(env: &Environment, n: usize, cell_size: f64) -> Self {
        Self {
            n_cells_x: n,
            n_cells_y: n,
            cell_size,
            origin_offset: (n as f64 * cell_size - env.width) / 2.0,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells_x * self.n_cells_y
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        if self.n_cells_x == 0 || self.n_cells_y == 0 || !(self.cell_size > 0.0) || !(self.origin_offset >= 0.0) {
            return Err(Error::config("grid", "cell counts and cell size must be positive, margin non-negative"));
        }
        let span_x = self.n_cells_x as f64 * self.cell_size - self.origin_offset;
        let span_y = self.n_cells_y as f64 * self.cell_size - self.origin_offset;
        if span_x + BOUNDARY_EPS < env.width || span_y + BOUNDARY_EPS < env.height {
            return Err(Error::config("grid", "grid does not cover the environment"));
        }
        Ok(())
    }

    /// `(row, col)` of the cell containing `p`, using the floor convention.
    pub fn cell_of(&self, p: &Point2D) -> Result<(usize, usize)> {
        let fx = (p.x + self.origin_offset) / self.cell_size + BOUNDARY_EPS;
        let fy = (p.y + self.origin_offset) / self.cell_size + BOUNDARY_EPS;
        if !p.is_finite() || fx < 0.0 || fy < 0.0 {
            return Err(Error::OutsideGrid { x: p.x, y: p.y });
        }
        let (col, row) = (fx.floor() as usize, fy.floor() as usize);
        if col >= self.n_cells_x || row >= self.n_cells_y {
            return Err(Error::OutsideGrid { x: p.x, y: p.y });
        }
        Ok((row, col))
    }

    pub fn low_corner(&self, row: usize, col: usize) -> Point2D {
        Point2D::new(
            col as f64 * self.cell_size - self.origin_offset,
            row as f64 * self.cell_size - self.origin_offset,
        )
    }

    pub fn center(&self, row: usize, col: usize) -> Point2D {
        Point2D::new(
            (col as f64 + 0.5) * self.cell_size - self.origin_offset,
            (row as f64 + 0.5) * self.cell_size - self.origin_offset,
        )
    }
}

/// Per-cell activity map, row-major `[n_cells_y, n_cells_x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellActivity {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CellActivity {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            rows: grid.n_cells_y,
            cols: grid.n_cells_x,
            values: vec![0.0; grid.n_cells()],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("cell activity", &[rows, cols], &[values.len()]));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v;
    }
}

/// Per-cell relative source position within the cell, each axis in `[0, 1]`
/// from the low corner. Meaningful only where the activity is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePosition {
    pub dx: CellActivity,
    pub dy: CellActivity,
}
