//! Output representations: target encoding, losses and keypoint retrieval.

mod decode;
mod encode;
mod grid;
mod loss;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustics::Point2D;
use crate::error::{Error, Result};
use crate::tensornet::Tensor;

pub use decode::{
    decode_hm, decode_rg, decode_tg_improved, decode_tg_naive, gaussian_kernel, gaussian_smooth, nms, plateau_maxima, Keypoint,
    RetrievalConfig, TgMode,
};
pub use encode::{encode_hm, encode_rg, encode_tg};
pub use grid::{CellActivity, GridSpec, RelativePosition};
pub use loss::{batch_loss, loss_hm, loss_rg, loss_tg, LossConfig, PROB_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Repr {
    /// Binary target grid.
    Tg,
    /// Gaussian heatmap.
    Hm,
    /// Coarse activity grid with per-cell offsets.
    Rg,
}

impl Repr {
    pub fn grid(self) -> GridSpec {
        match self {
            Repr::Tg | Repr::Hm => GridSpec::fine(),
            Repr::Rg => GridSpec::coarse(),
        }
    }

    /// Output tensor shape `[C, H, W]`.
    pub fn output_shape(self) -> [usize; 3] {
        let g = self.grid();
        let c = if self == Repr::Rg { 3 } else { 1 };
        [c, g.n_cells_y, g.n_cells_x]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Repr::Tg => "tg",
            Repr::Hm => "hm",
            Repr::Rg => "rg",
        }
    }
}

impl std::str::FromStr for Repr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tg" => Ok(Repr::Tg),
            "hm" => Ok(Repr::Hm),
            "rg" => Ok(Repr::Rg),
            _ => Err(Error::config("repr", format!("unknown representation `{s}`"))),
        }
    }
}

impl std::fmt::Display for Repr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training target for `sources`, shaped as [`Repr::output_shape`].
pub fn encode_target(repr: Repr, sources: &[Point2D], sigma_sq: f64) -> Result<Tensor<f32>> {
    let grid = repr.grid();
    let planes: Vec<CellActivity> = match repr {
        Repr::Tg => vec![encode_tg(sources, &grid)?],
        Repr::Hm => vec![encode_hm(sources, &grid, sigma_sq)?],
        Repr::Rg => {
            let (a, rel) = encode_rg(sources, &grid)?;
            vec![a, rel.dx, rel.dy]
        }
    };
    let data = planes
        .iter()
        .flat_map(|p| p.values.iter().map(|v| *v as f32))
        .collect();
    Tensor::from_vec(&repr.output_shape(), data)
}

fn plane(t: &Tensor<f32>, c: usize, rows: usize, cols: usize) -> CellActivity {
    let n = rows * cols;
    CellActivity {
        rows,
        cols,
        values: t.data()[c * n..(c + 1) * n].iter().map(|v| f64::from(*v)).collect(),
    }
}

/// Keypoints from one network output `[C, H, W]`.
pub fn decode_output(repr: Repr, output: &Tensor<f32>, cfg: &RetrievalConfig) -> Result<Vec<Keypoint>> {
    let shape = repr.output_shape();
    if output.shape() != shape {
        return Err(Error::shape("decode", &shape, output.shape()));
    }
    let grid = repr.grid();
    let (rows, cols) = (shape[1], shape[2]);
    Ok(match repr {
        Repr::Tg => {
            let map = plane(output, 0, rows, cols);
            match cfg.tg_mode {
                TgMode::Naive => decode_tg_naive(&map, &grid, cfg.threshold),
                TgMode::Improved => decode_tg_improved(&map, &grid, cfg),
            }
        }
        Repr::Hm => decode_hm(&plane(output, 0, rows, cols), &grid, cfg),
        Repr::Rg => {
            let rel = RelativePosition {
                dx: plane(output, 1, rows, cols),
                dy: plane(output, 2, rows, cols),
            };
            decode_rg(&plane(output, 0, rows, cols), &rel, &grid, cfg)
        }
    })
}

/// One line of a keypoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub sample_id: String,
    /// `[x, y, score]` triples.
    pub keypoints: Vec<[f64; 3]>,
}

impl KeypointRecord {
    pub fn new(sample_id: impl Into<String>, kps: &[Keypoint]) -> Self {
        Self {
            sample_id: sample_id.into(),
            keypoints: kps.iter().map(|k| [k.position.x, k.position.y, k.score]).collect(),
        }
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.keypoints
            .iter()
            .map(|k| Keypoint {
                position: Point2D::new(k[0], k[1]),
                score: k[2],
            })
            .collect()
    }
}

pub fn write_keypoints(path: &Path, records: &[KeypointRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_keypoints(path: &Path) -> Result<Vec<KeypointRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            what: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
