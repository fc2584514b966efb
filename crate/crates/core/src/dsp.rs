//! STFT feature extraction and microphone-pair channel rearrangement.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Divide each clip's features, across all arrays, by their joint RMS.
    #[serde(default)]
    pub normalize: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 512,
            hop: 256,
            normalize: false,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || !self.window_len.is_multiple_of(2) {
            return Err(Error::config("stft.window_len", "must be positive and even"));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::config("stft.hop", "must satisfy 0 < hop <= window_len"));
        }
        Ok(())
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Retained bins 1..=window_len/2 (DC dropped, Nyquist kept).
    pub fn n_freqs(&self) -> usize {
        self.window_len / 2
    }
}

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One array's features, shaped `[2·n_mics, n_frames, n_freqs]` with channel
/// order `[R_1..R_m, I_1..I_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    pub tensor: Tensor<f32>,
    pub n_mics: usize,
}

/// Pair-wise rearranged features, shaped `[4·C(m,2), n_frames, n_freqs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseFeatures {
    pub tensor: Tensor<f32>,
}

/// Reusable STFT with a cached FFT plan.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.window_len);
        Ok(Self {
            window: hamming(cfg.window_len),
            cfg,
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Features of one array given its microphone channels.
    pub fn features(&self, channels: &[Vec<f32>]) -> Result<SpectralFeatures> {
        let m = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if m == 0 || len < self.cfg.window_len {
            return Err(Error::ClipTooShort {
                len,
                need: self.cfg.window_len,
            });
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::config("clip", "channels have unequal lengths"));
        }
        let frames = self.cfg.n_frames(len);
        let freqs = self.cfg.n_freqs();
        let mut out = vec![0.0f32; 2 * m * frames * freqs];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.window_len];
        for (ch, signal) in channels.iter().enumerate() {
            for t in 0..frames {
                let start = t * self.cfg.hop;
                for (b, (s, w)) in buf
                    .iter_mut()
                    .zip(signal[start..start + self.cfg.window_len].iter().zip(&self.window))
                {
                    *b = Complex::new(f64::from(*s) * w, 0.0);
                }
                self.fft.process(&mut buf);
                let re = &mut out[(ch * frames + t) * freqs..][..freqs];
                for (r, z) in re.iter_mut().zip(&buf[1..=freqs]) {
                    *r = z.re as f32;
                }
                let im = &mut out[((m + ch) * frames + t) * freqs..][..freqs];
                for (i, z) in im.iter_mut().zip(&buf[1..=freqs]) {
                    *i = z.im as f32;
                }
            }
        }
        Ok(SpectralFeatures {
            tensor: Tensor::from_vec(&[2 * m, frames, freqs], out)?,
            n_mics: m,
        })
    }
}

/// Scales all arrays of one clip by the inverse RMS of their combined
/// features. Level and phase relations between channels are preserved; an
/// all-zero clip is left unchanged.
pub fn normalize_jointly(features: &mut [SpectralFeatures]) {
    let (ss, n) = features.iter().fold((0.0f64, 0usize), |(ss, n), f| {
        (ss + f.tensor.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>(), n + f.tensor.len())
    });
    if ss == 0.0 || n == 0 {
        return;
    }
    let k = (n as f64 / ss).sqrt() as f32;
    for f in features {
        f.tensor.data_mut().iter_mut().for_each(|v| *v *= k);
    }
}

pub fn stft_features(channels: &[Vec<f32>], cfg: &StftConfig) -> Result<SpectralFeatures> {
    Stft::new(*cfg)?.features(channels)
}

/// Source channel of every output slot of [`pairwise_rearrange`].
pub fn pairwise_channel_map(n_mics: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(2 * n_mics * (n_mics - 1));
    for block in 0..2 {
        for a in 0..n_mics {
            for b in a + 1..n_mics {
                map.push(block * n_mics + a);
                map.push(block * n_mics + b);
            }
        }
    }
    map
}

/// Duplicates channels so every unordered microphone pair sits side by side:
/// `[(R1,R2),(R1,R3),…,(R3,R4),(I1,I2),…,(I3,I4)]`.
pub fn pairwise_rearrange(f: &SpectralFeatures) -> Result<PairwiseFeatures> {
    let shape = f.tensor.shape();
    if shape.len() != 3 || !shape[0].is_multiple_of(2) || shape[0] / 2 != f.n_mics || f.n_mics < 2 {
        return Err(Error::shape("pairwise rearrange", &[2 * f.n_mics.max(2), 0, 0], shape));
    }
    let plane = shape[1] * shape[2];
    let map = pairwise_channel_map(f.n_mics);
    let mut data = Vec::with_capacity(map.len() * plane);
    for &src in &map {
        data.extend_from_slice(&f.tensor.data()[src * plane..(src + 1) * plane]);
    }
    Ok(PairwiseFeatures {
        tensor: Tensor::from_vec(&[map.len(), shape[1], shape[2]], data)?,
    })
}
