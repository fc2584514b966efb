//! Binary PPM overlays of a score map with ground-truth and predicted keypoints.

use std::path::Path;

use crate::acoustics::Point2D;
use crate::error::{Error, Result};
use crate::represent::GridSpec;

const GROUND_TRUTH: [u8; 3] = [40, 220, 60];
const PREDICTED: [u8; 3] = [230, 40, 40];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Renders `map` (row-major, rows = y) in grayscale, each cell `scale` pixels
/// wide, with y growing upward. Ground truth is drawn as crosses and
/// predictions as hollow squares.
pub fn overlay(
    map: &[f32],
    grid: &GridSpec,
    scale: usize,
    ground_truth: &[Point2D],
    predicted: &[Point2D],
) -> Result<Image> {
    let (rows, cols) = (grid.n_cells_y, grid.n_cells_x);
    if map.len() != rows * cols {
        return Err(Error::shape("overlay map", &[rows * cols], &[map.len()]));
    }
    let scale = scale.max(1);
    let (hi, lo) = map
        .iter()
        .fold((f32::MIN, f32::MAX), |(h, l), &v| (h.max(v), l.min(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = Image {
        width: cols * scale,
        height: rows * scale,
        rgb: vec![0; 3 * rows * cols * scale * scale],
    };
    for r in 0..rows {
        for c in 0..cols {
            let g = (((map[r * cols + c] - lo) / span) * 255.0).round() as u8;
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = (rows - 1 - r) * scale + dy;
                    img.put((c * scale + dx) as i64, y as i64, [g; 3]);
                }
            }
        }
    }
    let origin = grid.low_corner(0, 0);
    let height = img.height as f64;
    let to_px = |p: &Point2D| {
        let x = (p.x - origin.x) / grid.cell_size * scale as f64;
        let y = height - (p.y - origin.y) / grid.cell_size * scale as f64;
        (x.round() as i64, y.round() as i64)
    };
    let arm = (scale as i64 * 2).max(3);
    for p in ground_truth {
        let (x, y) = to_px(p);
        for d in -arm..=arm {
            img.put(x + d, y, GROUND_TRUTH);
            img.put(x, y + d, GROUND_TRUTH);
        }
    }
    for p in predicted {
        let (x, y) = to_px(p);
        for d in -arm..=arm {
            img.put(x + d, y - arm, PREDICTED);
            img.put(x + d, y + arm, PREDICTED);
            img.put(x - arm, y + d, PREDICTED);
            img.put(x + arm, y + d, PREDICTED);
        }
    }
    Ok(img)
}
