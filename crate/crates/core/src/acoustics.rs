//! Scene geometry and free-field multi-channel rendering.
//!
//! Propagation is direct-path only: every microphone receives each source
//! delayed by `d / c` seconds and attenuated by `1 / d` (unit gain at 1 m).
//! Multi-source scenes are the sample-wise sum of single-source renders,
//! accumulated in source list order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<(f64, f64)> for Point2D {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub width: f64,
    pub height: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            width: 6.0,
            height: 6.0,
        }
    }
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::config(
                "scene.environment",
                "width and height must be positive",
            ));
        }
        Ok(())
    }

    /// Inclusive bounds check.
    pub fn contains(&self, p: &Point2D) -> bool {
        p.is_finite() && (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicArray {
    pub id: u8,
    pub mic_positions: Vec<Point2D>,
}

impl MicArray {
    /// Linear array of `n_mics` microphones with uniform `spacing`, centered
    /// on `center` and laid out along the unit direction `(ux, uy)`.
    pub fn linear(id: u8, center: Point2D, direction: (f64, f64), n_mics: usize, spacing: f64) -> Self {
        let half = (n_mics as f64 - 1.0) / 2.0;
        let mic_positions = (0..n_mics)
            .map(|i| {
                let off = (i as f64 - half) * spacing;
                Point2D::new(center.x + off * direction.0, center.y + off * direction.1)
            })
            .collect();
        Self { id, mic_positions }
    }

    pub fn n_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let field = format!("scene.arrays[{}]", self.id);
        if self.mic_positions.len() < 2 {
            return Err(Error::config(field, "an array needs at least 2 microphones"));
        }
        for (i, a) in self.mic_positions.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::config(field, "microphone position is not finite"));
            }
            for b in &self.mic_positions[i + 1..] {
                if a.distance(b) == 0.0 {
                    return Err(Error::config(field, "microphone positions must be distinct"));
                }
            }
        }
        Ok(())
    }
}

/// Two 4-mic linear arrays at the midpoints of the bottom (y = 0) and left
/// (x = 0) walls, 0.1 m spacing.
pub fn default_arrays(env: &Environment) -> Vec<MicArray> {
    vec![
        MicArray::linear(0, Point2D::new(env.width / 2.0, 0.0), (1.0, 0.0), 4, 0.1),
        MicArray::linear(1, Point2D::new(0.0, env.height / 2.0), (0.0, 1.0), 4, 0.1),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// Delay rounded to the nearest whole sample.
    #[default]
    Integer,
    /// 21-tap Hann-windowed sinc fractional delay.
    Sinc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticsConfig {
    pub speed_of_sound: f64,
    pub sample_rate: u32,
    pub sample_len: usize,
    #[serde(default)]
    pub delay_mode: DelayMode,
}

impl Default for AcousticsConfig {
    fn default() -> Self {
        Self {
            speed_of_sound: 343.0,
            sample_rate: 16_000,
            sample_len: 2560,
            delay_mode: DelayMode::Integer,
        }
    }
}

impl AcousticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::config("scene.acoustics.speed_of_sound", "must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("scene.acoustics.sample_rate", "must be positive"));
        }
        if self.sample_len == 0 {
            return Err(Error::config("scene.acoustics.sample_len", "must be positive"));
        }
        Ok(())
    }

    /// Propagation delay in (fractional) samples for a distance in meters.
    pub fn delay_samples(&self, distance: f64) -> f64 {
        distance / self.speed_of_sound * self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEvent {
    pub position: Point2D,
    pub signal: Vec<f32>,
    pub gain: f32,
}

impl SourceEvent {
    pub fn new(position: Point2D, signal: Vec<f32>) -> Self {
        Self {
            position,
            signal,
            gain: 1.0,
        }
    }
}

/// Per-array, per-microphone waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelClip {
    pub arrays: Vec<Vec<Vec<f32>>>,
    pub sample_rate: u32,
}

impl MultiChannelClip {
    pub fn silent(layout: &[usize], len: usize, sample_rate: u32) -> Self {
        Self {
            arrays: layout.iter().map(|&m| vec![vec![0.0; len]; m]).collect(),
            sample_rate,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.arrays.iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.arrays
            .first()
            .and_then(|a| a.first())
            .map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> Vec<usize> {
        self.arrays.iter().map(Vec::len).collect()
    }

    /// All channels in array-major, microphone-minor order.
    pub fn channels(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.arrays.iter().flatten()
    }

    /// Rebuilds a clip from flat channels and an array layout.
    pub fn from_channels(mut channels: Vec<Vec<f32>>, layout: &[usize], sample_rate: u32) -> Result<Self> {
        let total: usize = layout.iter().sum();
        if channels.len() != total {
            return Err(Error::shape("channel layout", &[total], &[channels.len()]));
        }
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::config("clip", "channels have unequal lengths"));
        }
        let mut arrays = Vec::with_capacity(layout.len());
        for &m in layout.iter().rev() {
            let rest = channels.split_off(channels.len() - m);
            arrays.push(rest);
        }
        arrays.reverse();
        Ok(Self { arrays, sample_rate })
    }

    /// Sample-wise accumulation of `other` into `self`.
    pub fn add_assign(&mut self, other: &MultiChannelClip) -> Result<()> {
        if self.layout() != other.layout() || self.len() != other.len() {
            return Err(Error::shape("clip sum", &self.layout(), &other.layout()));
        }
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (ca, cb) in a.iter_mut().zip(b) {
                for (x, y) in ca.iter_mut().zip(cb) {
                    *x += *y;
                }
            }
        }
        Ok(())
    }
}

const SINC_HALF_TAPS: i64 = 10;

fn windowed_sinc(x: f64) -> f64 {
    let half = SINC_HALF_TAPS as f64 + 1.0;
    if x.abs() >= half {
        return 0.0;
    }
    let w = 0.5 + 0.5 * (std::f64::consts::PI * x / half).cos();
    let s = if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    };
    s * w
}

/// Free-field propagation of one source to one microphone.
pub fn propagate(src: &SourceEvent, mic: &Point2D, cfg: &AcousticsConfig) -> Result<Vec<f32>> {
    let len = cfg.sample_len;
    if src.signal.len() > len {
        return Err(Error::SignalTooLong {
            len: src.signal.len(),
            max: len,
        });
    }
    let d = src.position.distance(mic);
    if d == 0.0 {
        return Err(Error::CoincidentSource);
    }
    let amp = f64::from(src.gain) / d;
    let delay = cfg.delay_samples(d);
    let mut out = vec![0.0f32; len];
    match cfg.delay_mode {
        DelayMode::Integer => {
            let n = delay.round() as usize;
            for (o, &s) in out.iter_mut().skip(n).zip(&src.signal) {
                *o = (amp * f64::from(s)) as f32;
            }
        }
        DelayMode::Sinc => {
            let n0 = delay.round() as i64;
            let taps: Vec<(i64, f64)> = (-SINC_HALF_TAPS..=SINC_HALF_TAPS)
                .map(|k| (n0 + k, windowed_sinc((n0 + k) as f64 - delay)))
                .collect();
            for (t, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for &(shift, h) in &taps {
                    let idx = t as i64 - shift;
                    if idx >= 0 && (idx as usize) < src.signal.len() {
                        acc += h * f64::from(src.signal[idx as usize]);
                    }
                }
                *o = (amp * acc) as f32;
            }
        }
    }
    Ok(out)
}

/// Renders all sources onto every microphone of every array.
pub fn render_scene(
    sources: &[SourceEvent],
    arrays: &[MicArray],
    cfg: &AcousticsConfig,
) -> Result<MultiChannelClip> {
    let layout: Vec<usize> = arrays.iter().map(MicArray::n_mics).collect();
    let mut clip = MultiChannelClip::silent(&layout, cfg.sample_len, cfg.sample_rate);
    for (array, channels) in arrays.iter().zip(clip.arrays.iter_mut()) {
        for (mic, channel) in array.mic_positions.iter().zip(channels.iter_mut()) {
            for src in sources {
                let part = propagate(src, mic, cfg)?;
                for (c, p) in channel.iter_mut().zip(&part) {
                    *c += *p;
                }
            }
        }
    }
    Ok(clip)
}

/// True when the mean absolute amplitude reaches `threshold` (inclusive).
pub fn energy_gate(signal: &[f32], threshold: f32) -> bool {
    if signal.is_empty() {
        return false;
    }
    let mean = signal.iter().map(|x| f64::from(x.abs())).sum::<f64>() / signal.len() as f64;
    mean >= f64::from(threshold)
}
