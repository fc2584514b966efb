//! Keypoint retrieval from activity maps.

use serde::{Deserialize, Serialize};

use super::grid::{CellActivity, GridSpec, RelativePosition};
use crate::acoustics::Point2D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Point2D,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TgMode {
    /// Plain per-cell thresholding.
    Naive,
    /// Gaussian smoothing followed by NMS.
    #[default]
    Improved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub threshold: f64,
    pub tg_improved_threshold: f64,
    /// NMS radius in cells on fine (81 × 81) maps.
    pub nms_radius: usize,
    /// NMS radius in cells on the coarse refined grid.
    pub nms_radius_coarse: usize,
    /// Side of the square area, in cells, used for sub-cell averaging.
    pub subcell_window: usize,
    /// Variance (m²) of the smoothing Gaussian; matches the heatmap targets.
    pub smoothing_sigma_sq: f64,
    pub tg_mode: TgMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            tg_improved_threshold: 0.1,
            nms_radius: 3,
            nms_radius_coarse: 1,
            subcell_window: 10,
            smoothing_sigma_sq: 0.1,
            tg_mode: TgMode::Improved,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, t) in [("threshold", self.threshold), ("tg_improved_threshold", self.tg_improved_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config(format!("retrieval.{f}"), "must lie in (0, 1)"));
            }
        }
        if self.nms_radius == 0 || self.nms_radius_coarse == 0 {
            return Err(Error::config("retrieval.nms_radius", "must be at least 1"));
        }
        if self.subcell_window == 0 {
            return Err(Error::config("retrieval.subcell_window", "must be at least 1"));
        }
        if !(self.smoothing_sigma_sq > 0.0) {
            return Err(Error::config("retrieval.smoothing_sigma_sq", "must be positive"));
        }
        Ok(())
    }
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Normalized 1-D Gaussian truncated at 3σ.
pub fn gaussian_kernel(sigma_cells: f64) -> Vec<f64> {
    let r = (3.0 * sigma_cells).ceil().max(0.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|u| (-(u * u) as f64 / (2.0 * sigma_cells * sigma_cells)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filtering with reflective borders.
pub fn gaussian_smooth(map: &CellActivity, sigma_cells: f64) -> CellActivity {
    if !(sigma_cells > 0.0) {
        return map.clone();
    }
    let k = gaussian_kernel(sigma_cells);
    let r = (k.len() / 2) as isize;
    let (rows, cols) = (map.rows, map.cols);
    let mut tmp = vec![0.0; rows * cols];
    for row in 0..rows {
        for col in 0..cols {
            tmp[row * cols + col] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * map.values[row * cols + reflect(col as isize + t as isize - r, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for row in 0..rows {
        for col in 0..cols {
            out[row * cols + col] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(row as isize + t as isize - r, rows) * cols + col])
                .sum();
        }
    }
    CellActivity {
        rows,
        cols,
        values: out,
    }
}

/// Strict total order on cells: higher score first, then lower row-major
/// index.
fn outranks(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn nms_gated(locate: &CellActivity, gate: &CellActivity, threshold: f64, radius: usize) -> Vec<(usize, usize, f64)> {
    let (rows, cols) = (locate.rows, locate.cols);
    let r = radius.max(1);
    let mut candidates = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let idx = row * cols + col;
            if gate.values[idx] < threshold {
                continue;
            }
            let me = (locate.values[idx], idx);
            let mut is_max = true;
            'win: for rr in row.saturating_sub(r)..(row + r + 1).min(rows) {
                for cc in col.saturating_sub(r)..(col + r + 1).min(cols) {
                    let j = rr * cols + cc;
                    if j != idx && outranks((locate.values[j], j), me) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                candidates.push(me);
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for (score, idx) in candidates {
        let (row, col) = (idx / cols, idx % cols);
        let near = kept
            .iter()
            .any(|&(kr, kc, _)| kr.abs_diff(row) <= r && kc.abs_diff(col) <= r);
        if !near {
            kept.push((row, col, score));
        }
    }
    kept
}

/// Local maxima at or above `threshold` within a `(2r+1)²` window, ties
/// broken toward the lowest row-major index, greedily suppressed in
/// descending score order. Returns `(row, col, score)`.
pub fn nms(map: &CellActivity, threshold: f64, radius: usize) -> Vec<(usize, usize, f64)> {
    nms_gated(map, map, threshold, radius)
}

/// Cells at or above `threshold` with no strictly greater value within the
/// `(2r+1)²` window. Equal neighbours all survive.
pub fn plateau_maxima(map: &CellActivity, threshold: f64, radius: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for row in 0..map.rows {
        for col in 0..map.cols {
            let v = map.get(row, col);
            if v < threshold {
                continue;
            }
            let rows = row.saturating_sub(radius)..(row + radius + 1).min(map.rows);
            let dominated = rows
                .flat_map(|rr| (col.saturating_sub(radius)..(col + radius + 1).min(map.cols)).map(move |cc| (rr, cc)))
                .any(|(rr, cc)| map.get(rr, cc) > v);
            if !dominated {
                out.push((row, col, v));
            }
        }
    }
    out
}

fn sigma_cells(grid: &GridSpec, sigma_sq: f64) -> f64 {
    sigma_sq.sqrt() / grid.cell_size
}

pub fn decode_tg_naive(map: &CellActivity, grid: &GridSpec, threshold: f64) -> Vec<Keypoint> {
    let mut out = Vec::new();
    for row in 0..map.rows {
        for col in 0..map.cols {
            let v = map.get(row, col);
            if v >= threshold {
                out.push(Keypoint {
                    position: grid.center(row, col),
                    score: v,
                });
            }
        }
    }
    out
}

pub fn decode_tg_improved(map: &CellActivity, grid: &GridSpec, cfg: &RetrievalConfig) -> Vec<Keypoint> {
    let smooth = gaussian_smooth(map, sigma_cells(grid, cfg.smoothing_sigma_sq));
    nms(&smooth, cfg.tg_improved_threshold, cfg.nms_radius)
        .into_iter()
        .map(|(r, c, s)| Keypoint {
            position: grid.center(r, c),
            score: s,
        })
        .collect()
}

/// Weight of cell offset `u` within a centered window of `size` cells: full
/// weight inside, half weight on the two half-covered edge cells of an
/// even-sized window.
fn window_weight(u: isize, size: usize) -> f64 {
    let half = size as f64 / 2.0;
    let a = u.unsigned_abs() as f64;
    if a + 0.5 <= half {
        1.0
    } else if a - 0.5 < half {
        half - (a - 0.5)
    } else {
        0.0
    }
}

/// Maxima are located on the smoothed map and kept when the unsmoothed
/// probability at the maximum reaches the threshold. Each keypoint is the
/// smoothed-probability-weighted mean of cell centers over a window of
/// `subcell_window` cells centered on the maximum, clipped at the borders.
pub fn decode_hm(map: &CellActivity, grid: &GridSpec, cfg: &RetrievalConfig) -> Vec<Keypoint> {
    let smooth = gaussian_smooth(map, sigma_cells(grid, cfg.smoothing_sigma_sq));
    let reach = (cfg.subcell_window / 2) as isize;
    nms_gated(&smooth, map, cfg.threshold, cfg.nms_radius)
        .into_iter()
        .map(|(row, col, _)| {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for du in -reach..=reach {
                let rr = row as isize + du;
                if rr < 0 || rr >= map.rows as isize {
                    continue;
                }
                let wr = window_weight(du, cfg.subcell_window);
                for dv in -reach..=reach {
                    let cc = col as isize + dv;
                    if cc < 0 || cc >= map.cols as isize {
                        continue;
                    }
                    let w = wr * window_weight(dv, cfg.subcell_window) * smooth.get(rr as usize, cc as usize).max(0.0);
                    let c = grid.center(rr as usize, cc as usize);
                    sx += w * c.x;
                    sy += w * c.y;
                    sw += w;
                }
            }
            let position = if sw > 0.0 {
                Point2D::new(sx / sw, sy / sw)
            } else {
                grid.center(row, col)
            };
            Keypoint {
                position,
                score: map.get(row, col),
            }
        })
        .collect()
}

pub fn decode_rg(activity: &CellActivity, relpos: &RelativePosition, grid: &GridSpec, cfg: &RetrievalConfig) -> Vec<Keypoint> {
    plateau_maxima(activity, cfg.threshold, cfg.nms_radius_coarse)
        .into_iter()
        .map(|(r, c, s)| {
            let low = grid.low_corner(r, c);
            let dx = relpos.dx.get(r, c).clamp(0.0, 1.0);
            let dy = relpos.dy.get(r, c).clamp(0.0, 1.0);
            Keypoint {
                position: Point2D::new(low.x + dx * grid.cell_size, low.y + dy * grid.cell_size),
                score: s,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::encode::{encode_hm, encode_rg};
    use super::*;

    fn map_with(rows: usize, cols: usize, cells: &[(usize, usize, f64)]) -> CellActivity {
        let mut m = CellActivity::from_values(rows, cols, vec![0.0; rows * cols]).unwrap();
        for &(r, c, v) in cells {
            m.set(r, c, v);
        }
        m
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn smooth_oracle(map: &CellActivity, sigma: f64) -> CellActivity {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as isize;
        let mut out = map.clone();
        for row in 0..map.rows {
            for col in 0..map.cols {
                let mut acc = 0.0;
                for (a, wa) in k.iter().enumerate() {
                    for (b, wb) in k.iter().enumerate() {
                        let rr = reflect(row as isize + a as isize - r, map.rows);
                        let cc = reflect(col as isize + b as isize - r, map.cols);
                        acc += wa * wb * map.get(rr, cc);
                    }
                }
                out.set(row, col, acc);
            }
        }
        out
    }

    #[test]
    fn reflect_repeats_edge() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, [2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }

    #[test]
    fn smoothing_cases() {
        let zero = map_with(20, 20, &[]);
        assert!(gaussian_smooth(&zero, 3.162).values.iter().all(|v| *v == 0.0));

        let constant = CellActivity::from_values(20, 20, vec![0.37; 400]).unwrap();
        for v in gaussian_smooth(&constant, 3.162).values {
            assert!((v - 0.37).abs() < 1e-12);
        }

        let imp = map_with(41, 41, &[(20, 20, 1.0)]);
        let s = gaussian_smooth(&imp, 3.162);
        let oracle = smooth_oracle(&imp, 3.162);
        for (a, b) in s.values.iter().zip(&oracle.values) {
            assert!((a - b).abs() < 1e-14);
        }
        let k = gaussian_kernel(3.162);
        assert!((s.get(20, 20) - k[k.len() / 2].powi(2)).abs() < 1e-15);
        assert!(s.get(20, 20) < 0.02);
    }

    #[test]
    fn nms_cases() {
        let m = map_with(9, 9, &[(4, 4, 0.9)]);
        assert_eq!(nms(&m, 0.5, 1), vec![(4, 4, 0.9)]);

        let tie = map_with(9, 9, &[(4, 4, 0.8), (4, 5, 0.8)]);
        assert_eq!(nms(&tie, 0.5, 1), vec![(4, 4, 0.8)]);

        let low = map_with(9, 9, &[(4, 4, 0.3)]);
        assert!(nms(&low, 0.5, 1).is_empty());
    }

    #[test]
    fn tg_naive_cases() {
        let g = GridSpec::fine();
        assert!(decode_tg_naive(&CellActivity::zeros(&g), &g, 0.6).is_empty());
        let mut m = CellActivity::zeros(&g);
        m.set(10, 20, 0.9);
        let k = decode_tg_naive(&m, &g, 0.6);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].position, g.center(10, 20));
        m.set(10, 21, 0.9);
        m.set(11, 20, 0.7);
        assert_eq!(decode_tg_naive(&m, &g, 0.6).len(), 3);
    }

    fn blob(m: &mut CellActivity, row: usize, col: usize, r: usize) {
        for rr in row - r..=row + r {
            for cc in col - r..=col + r {
                m.set(rr, cc, 1.0);
            }
        }
    }

    #[test]
    fn tg_improved_cases() {
        let g = GridSpec::fine();
        let cfg = RetrievalConfig::default();
        assert!(decode_tg_improved(&CellActivity::zeros(&g), &g, &cfg).is_empty());
        let mut m = CellActivity::zeros(&g);
        blob(&mut m, 30, 30, 2);
        let k = decode_tg_improved(&m, &g, &cfg);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].position, g.center(30, 30));
        // Second blob 2 m (20 cells) away.
        blob(&mut m, 30, 50, 2);
        assert_eq!(decode_tg_improved(&m, &g, &cfg).len(), 2);
    }

    #[test]
    fn hm_centered_source_is_exact() {
        let g = GridSpec::fine();
        let cfg = RetrievalConfig::default();
        let src = g.center(40, 40);
        let k = decode_hm(&encode_hm(&[src], &g, 0.1).unwrap(), &g, &cfg);
        assert_eq!(k.len(), 1);
        assert!(k[0].position.distance(&src) < 1e-6);
        assert!(decode_hm(&CellActivity::zeros(&g), &g, &cfg).is_empty());
    }

    #[test]
    fn hm_offset_source_matches_numpy_oracle() {
        // Frozen from an independent numpy/scipy evaluation of the same
        // pipeline (scipy.ndimage.convolve, mode="reflect").
        let g = GridSpec::fine();
        let cfg = RetrievalConfig::default();
        let cases = [
            ((3.04, 3.0), (3.014_182_014_3, 3.0)),
            ((3.02, 2.97), (3.007_093_446_5, 2.989_361_355_3)),
            ((0.07, 0.13), (0.089_350_512_3, 0.110_632_170_9)),
            ((5.93, 0.31), (5.910_649_487_7, 0.303_546_982_9)),
        ];
        for ((sx, sy), (ox, oy)) in cases {
            let k = decode_hm(&encode_hm(&[Point2D::new(sx, sy)], &g, 0.1).unwrap(), &g, &cfg);
            assert_eq!(k.len(), 1);
            assert!((k[0].position.x - ox).abs() < 1e-6, "{:?}", k[0].position);
            assert!((k[0].position.y - oy).abs() < 1e-6, "{:?}", k[0].position);
            assert!(k[0].position.distance(&Point2D::new(sx, sy)) < 0.05);
        }
    }

    #[test]
    fn rg_inverse_of_encoding() {
        let g = GridSpec::coarse();
        let cfg = RetrievalConfig::default();
        let srcs = [Point2D::new(0.35, 4.2), Point2D::new(3.95, 1.05)];
        let (act, rel) = encode_rg(&srcs, &g).unwrap();
        let k = decode_rg(&act, &rel, &g, &cfg);
        assert_eq!(k.len(), 2);
        for s in &srcs {
            assert!(k.iter().any(|p| p.position.distance(s) < 1e-6));
        }
        let quiet = CellActivity::from_values(6, 6, vec![0.3; 36]).unwrap();
        assert!(decode_rg(&quiet, &rel, &g, &cfg).is_empty());
    }
}
