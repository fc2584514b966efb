use super::grid::{CellActivity, GridSpec, RelativePosition};
use crate::acoustics::Point2D;
use crate::error::{Error, Result};

/// Binary occupancy: 1 for every cell that contains a source.
pub fn encode_tg(sources: &[Point2D], grid: &GridSpec) -> Result<CellActivity> {
    let mut map = CellActivity::zeros(grid);
    for s in sources {
        let (r, c) = grid.cell_of(s)?;
        map.set(r, c, 1.0);
    }
    Ok(map)
}

/// Maximum over sources of unit-peak Gaussians evaluated at cell centers.
pub fn encode_hm(sources: &[Point2D], grid: &GridSpec, sigma_sq: f64) -> Result<CellActivity> {
    for s in sources {
        grid.cell_of(s)?;
    }
    let mut map = CellActivity::zeros(grid);
    for row in 0..grid.n_cells_y {
        for col in 0..grid.n_cells_x {
            let c = grid.center(row, col);
            let v = sources
                .iter()
                .map(|s| {
                    let d2 = (c.x - s.x).powi(2) + (c.y - s.y).powi(2);
                    (-d2 / (2.0 * sigma_sq)).exp()
                })
                .fold(0.0, f64::max);
            map.set(row, col, v);
        }
    }
    Ok(map)
}

/// Coarse activity plus per-cell offsets from the cell's low corner.
pub fn encode_rg(sources: &[Point2D], grid: &GridSpec) -> Result<(CellActivity, RelativePosition)> {
    let mut act = CellActivity::zeros(grid);
    let mut rel = RelativePosition {
        dx: CellActivity::zeros(grid),
        dy: CellActivity::zeros(grid),
    };
    for s in sources {
        let (r, c) = grid.cell_of(s)?;
        if act.get(r, c) != 0.0 {
            return Err(Error::SharedCell { row: r, col: c });
        }
        act.set(r, c, 1.0);
        let low = grid.low_corner(r, c);
        rel.dx.set(r, c, ((s.x - low.x) / grid.cell_size).clamp(0.0, 1.0));
        rel.dy.set(r, c, ((s.y - low.y) / grid.cell_size).clamp(0.0, 1.0));
    }
    Ok((act, rel))
}
