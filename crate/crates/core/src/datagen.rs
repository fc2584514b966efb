//! Labeled dataset synthesis: source placement, excerpt slicing, scene
//! rendering, energy gating, WAV storage and JSON-lines manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::{energy_gate, render_scene, Environment, MultiChannelClip, Point2D, SourceEvent};
use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::par;

pub const MANIFEST_SCHEMA: &str = "ssl2d-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Placement attempts before a configuration is declared infeasible.
pub const PLACEMENT_TRIES: usize = 10_000;
/// Offset draws per clip before it is declared silent.
pub const EXCERPT_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    /// 32-bit float samples; no clipping of near-field sources.
    #[default]
    Float32,
    /// 16-bit PCM, clipped to full scale.
    Pcm16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub name: String,
    pub n_samples: usize,
    /// Source counts assigned round-robin over the split's samples.
    pub source_counts: Vec<usize>,
    /// Directory of mono WAV files; the synthetic bank when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_dir: Option<PathBuf>,
}

/// Procedural source material used when a split names no audio directory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub clips_per_split: usize,
    pub clip_samples: usize,
    /// RMS level of every generated clip.
    pub rms: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            clips_per_split: 48,
            clip_samples: 16_000,
            rms: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub placement_grid: f64,
    pub min_separation: f64,
    pub gate_threshold: f32,
    pub wav_format: WavFormat,
    pub bank: BankConfig,
    pub splits: Vec<SplitConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            placement_grid: 0.05,
            min_separation: 2.0,
            gate_threshold: 0.01,
            wav_format: WavFormat::Float32,
            bank: BankConfig::default(),
            splits: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        let env = &scene.environment;
        if !(self.placement_grid > 0.0) {
            return Err(Error::config("dataset.placement_grid", "must be positive"));
        }
        for (field, extent) in [("width", env.width), ("height", env.height)] {
            let cells = extent / self.placement_grid;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(Error::config("dataset.placement_grid", format!("must divide the environment {field}")));
            }
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("dataset.min_separation", "must be non-negative"));
        }
        if !(self.gate_threshold >= 0.0) {
            return Err(Error::config("dataset.gate_threshold", "must be non-negative"));
        }
        if self.bank.clips_per_split == 0 || self.bank.clip_samples < scene.acoustics.sample_len || !(self.bank.rms > 0.0) {
            return Err(Error::config(
                "dataset.bank",
                "needs at least one clip, clips no shorter than a sample, positive rms",
            ));
        }
        for (i, s) in self.splits.iter().enumerate() {
            let field = format!("dataset.splits[{i}]");
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::config(field, "split names must be non-empty [A-Za-z0-9_]"));
            }
            if self.splits[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::config(field, format!("duplicate split `{}`", s.name)));
            }
            if s.source_counts.is_empty() || s.source_counts.contains(&0) {
                return Err(Error::config(format!("{field}.source_counts"), "counts must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&SplitConfig> {
        self.splits.iter().find(|s| s.name == name)
    }
}

/// `k` placement-grid points strictly inside the environment, pairwise at
/// least `min_separation` apart, by rejection sampling.
pub fn sample_positions<R: Rng>(rng: &mut R, env: &Environment, k: usize, cfg: &DatasetConfig) -> Result<Vec<Point2D>> {
    let g = cfg.placement_grid;
    let nx = (env.width / g).round() as i64;
    let ny = (env.height / g).round() as i64;
    if k == 0 || nx < 2 || ny < 2 {
        return Err(Error::Infeasible {
            k,
            separation: cfg.min_separation,
            tries: 0,
        });
    }
    for _ in 0..PLACEMENT_TRIES {
        let pts: Vec<Point2D> = (0..k)
            .map(|_| Point2D::new(rng.gen_range(1..nx) as f64 * g, rng.gen_range(1..ny) as f64 * g))
            .collect();
        let ok = pts
            .iter()
            .enumerate()
            .all(|(i, a)| pts[i + 1..].iter().all(|b| a.distance(b) >= cfg.min_separation));
        if ok {
            return Ok(pts);
        }
    }
    Err(Error::Infeasible {
        k,
        separation: cfg.min_separation,
        tries: PLACEMENT_TRIES,
    })
}

/// A random `len`-sample segment passing the energy gate, with its offset.
pub fn slice_excerpt<R: Rng>(clip: &[f32], rng: &mut R, len: usize, threshold: f32) -> Result<(usize, Vec<f32>)> {
    if clip.len() < len || len == 0 {
        return Err(Error::ClipTooShort { len: clip.len(), need: len });
    }
    for _ in 0..EXCERPT_TRIES {
        let off = rng.gen_range(0..=clip.len() - len);
        let seg = &clip[off..off + len];
        if energy_gate(seg, threshold) {
            return Ok((off, seg.to_vec()));
        }
    }
    Err(Error::SilentClip { tries: EXCERPT_TRIES })
}

/// Mono source material for one split.
#[derive(Debug, Clone)]
pub struct SourceBank {
    /// `(clip id, samples)`.
    pub clips: Vec<(String, Vec<f32>)>,
}

fn stream_id(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn synth_clip<R: Rng>(rng: &mut R, n: usize, sample_rate: u32, rms: f64) -> Vec<f32> {
    let sr = f64::from(sample_rate);
    let mut out = vec![0.0f64; n];
    let mut t0 = 0usize;
    while t0 < n {
        let dur = rng.gen_range(sr as usize / 10..sr as usize / 3).min(n - t0);
        if rng.gen_bool(0.25) {
            // Percussive noise burst.
            let decay = rng.gen_range(5.0..30.0);
            for i in 0..dur {
                let env = (-(i as f64) / sr * decay).exp();
                out[t0 + i] += env * rng.gen_range(-1.0..1.0);
            }
        } else {
            // Harmonic note with a few overtones.
            let f0 = 110.0 * 2f64.powf(rng.gen_range(0.0..3.5));
            let n_harm = rng.gen_range(3..10);
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let attack = (0.01 * sr) as usize;
            for i in 0..dur {
                let t = i as f64 / sr;
                let env = (i as f64 / attack as f64).min(1.0) * (-t * 3.0).exp();
                let mut v = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f < sr / 2.0 {
                        v += (std::f64::consts::TAU * f * t + ph).sin() / (h + 1) as f64;
                    }
                }
                out[t0 + i] += env * v;
            }
        }
        t0 += dur;
    }
    let cur = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let gain = if cur > 0.0 { rms / cur } else { 0.0 };
    out.iter().map(|v| (v * gain) as f32).collect()
}

impl SourceBank {
    /// Deterministic procedural clips; different splits draw from disjoint
    /// random streams so no material is shared.
    pub fn synthetic(split: &str, seed: u64, cfg: &BankConfig, sample_rate: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id(&format!("bank/{split}")));
        let clips = (0..cfg.clips_per_split)
            .map(|i| (format!("synthetic:{split}/{i:04}"), synth_clip(&mut rng, cfg.clip_samples, sample_rate, cfg.rms)))
            .collect();
        Self { clips }
    }

    /// Every `.wav` under `dir` (sorted by path), first channel only.
    pub fn from_dir(dir: &Path, sample_rate: u32, min_len: usize) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let mut clips = Vec::new();
        for p in paths {
            let (channels, sr) = read_wav_channels(&p)?;
            if sr != sample_rate {
                return Err(Error::config(
                    "dataset.splits.audio_dir",
                    format!("{} is sampled at {sr} Hz, expected {sample_rate}", p.display()),
                ));
            }
            let mono = channels.into_iter().next().unwrap_or_default();
            if mono.len() >= min_len {
                clips.push((p.display().to_string(), mono));
            }
        }
        if clips.is_empty() {
            return Err(Error::config("dataset.splits.audio_dir", format!("no usable WAV clips in {}", dir.display())));
        }
        Ok(Self { clips })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRef {
    pub file: String,
    pub offset_samples: usize,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub schema: String,
    pub id: String,
    pub split: String,
    pub sources: Vec<[f64; 2]>,
    /// Path of the multi-channel WAV relative to the manifest directory.
    pub wav: String,
    pub clips: Vec<ClipRef>,
}

impl SampleRecord {
    pub fn positions(&self) -> Vec<Point2D> {
        self.sources.iter().map(|s| Point2D::new(s[0], s[1])).collect()
    }
}

pub fn write_wav(path: &Path, clip: &MultiChannelClip, format: WavFormat) -> Result<()> {
    let wav_err = |e| Error::Wav {
        path: path.to_path_buf(),
        source: e,
    };
    let spec = hound::WavSpec {
        channels: clip.n_channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: match format {
            WavFormat::Float32 => 32,
            WavFormat::Pcm16 => 16,
        },
        sample_format: match format {
            WavFormat::Float32 => hound::SampleFormat::Float,
            WavFormat::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = hound::WavWriter::new(BufWriter::new(file), spec).map_err(wav_err)?;
    let chans: Vec<&Vec<f32>> = clip.channels().collect();
    for i in 0..clip.len() {
        for c in &chans {
            match format {
                WavFormat::Float32 => w.write_sample(c[i]).map_err(wav_err)?,
                WavFormat::Pcm16 => {
                    let v = (c[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    w.write_sample(v).map_err(wav_err)?
                }
            }
        }
    }
    w.finalize().map_err(wav_err)
}

/// De-interleaved channels and the sample rate of a WAV file.
pub fn read_wav_channels(path: &Path) -> Result<(Vec<Vec<f32>>, u32)> {
    let wav_err = |e| Error::Wav {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    let n_ch = usize::from(spec.channels);
    let flat: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mut channels = vec![Vec::with_capacity(flat.len() / n_ch.max(1)); n_ch];
    for frame in flat.chunks_exact(n_ch) {
        for (c, v) in channels.iter_mut().zip(frame) {
            c.push(*v);
        }
    }
    Ok((channels, spec.sample_rate))
}

pub fn read_wav(path: &Path, layout: &[usize]) -> Result<MultiChannelClip> {
    let (channels, sr) = read_wav_channels(path)?;
    MultiChannelClip::from_channels(channels, layout, sr)
}

/// Per-sample random stream derived from the dataset seed and sample id.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(sample_id));
    rng
}

struct Rendered {
    record: SampleRecord,
    clip: MultiChannelClip,
}

fn render_sample(
    id: &str,
    split: &str,
    k: usize,
    bank: &SourceBank,
    cfg: &DatasetConfig,
    scene: &SceneConfig,
) -> Result<Rendered> {
    let mut rng = sample_rng(cfg.seed, id);
    let len = scene.acoustics.sample_len;
    for _ in 0..EXCERPT_TRIES {
        let positions = sample_positions(&mut rng, &scene.environment, k, cfg)?;
        let mut events = Vec::with_capacity(k);
        let mut clips = Vec::with_capacity(k);
        for p in &positions {
            let (clip_id, samples) = bank.clips.choose(&mut rng).expect("non-empty bank");
            let (offset, excerpt) = slice_excerpt(samples, &mut rng, len, cfg.gate_threshold)?;
            events.push(SourceEvent::new(*p, excerpt));
            clips.push(ClipRef {
                file: clip_id.clone(),
                offset_samples: offset,
            });
        }
        let clip = render_scene(&events, &scene.arrays, &scene.acoustics)?;
        let first = clip.channels().next().expect("at least one channel");
        if !energy_gate(first, cfg.gate_threshold) {
            continue;
        }
        return Ok(Rendered {
            record: SampleRecord {
                schema: MANIFEST_SCHEMA.to_string(),
                id: id.to_string(),
                split: split.to_string(),
                sources: positions.iter().map(|p| [p.x, p.y]).collect(),
                wav: format!("audio/{id}.wav"),
                clips,
            },
            clip,
        });
    }
    Err(Error::SilentClip { tries: EXCERPT_TRIES })
}

fn with_context(e: Error, id: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field,
            reason: format!("{reason} (sample {id})"),
        },
        other => other,
    }
}

/// Renders every split of `cfg` into `out_dir` (`audio/*.wav` plus the
/// manifest) and returns the records sorted by id.
pub fn build_dataset(cfg: &DatasetConfig, scene: &SceneConfig, out_dir: &Path) -> Result<Vec<SampleRecord>> {
    cfg.validate(scene)?;
    scene.validate()?;
    let audio = out_dir.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let mut records = Vec::new();
    for split in &cfg.splits {
        let bank = match &split.audio_dir {
            Some(dir) => SourceBank::from_dir(dir, scene.acoustics.sample_rate, scene.acoustics.sample_len)?,
            None => SourceBank::synthetic(&split.name, cfg.seed, &cfg.bank, scene.acoustics.sample_rate),
        };
        let rendered = par::map_indexed(split.n_samples, |i| -> Result<SampleRecord> {
            let id = format!("{}-{i:06}", split.name);
            let k = split.source_counts[i % split.source_counts.len()];
            let r = render_sample(&id, &split.name, k, &bank, cfg, scene).map_err(|e| with_context(e, &id))?;
            write_wav(&out_dir.join(&r.record.wav), &r.clip, cfg.wav_format)?;
            Ok(r.record)
        });
        for r in rendered {
            records.push(r?);
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Sums single-source clips into one multi-source sample with the union of
/// their labels. Sources closer than `min_separation` are rejected.
pub fn mix_records(
    parts: &[(&SampleRecord, &MultiChannelClip)],
    id: &str,
    min_separation: f64,
) -> Result<(SampleRecord, MultiChannelClip)> {
    let (first_rec, first_clip) = parts.first().ok_or_else(|| Error::config("mix", "nothing to mix"))?;
    let mut clip = (*first_clip).clone();
    let mut sources = first_rec.sources.clone();
    let mut clips = first_rec.clips.clone();
    for (rec, c) in &parts[1..] {
        clip.add_assign(c)?;
        sources.extend_from_slice(&rec.sources);
        clips.extend_from_slice(&rec.clips);
    }
    let pts: Vec<Point2D> = sources.iter().map(|s| Point2D::new(s[0], s[1])).collect();
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            let d = a.distance(b);
            if d < min_separation {
                return Err(Error::SeparationViolated {
                    distance: d,
                    min: min_separation,
                });
            }
        }
    }
    Ok((
        SampleRecord {
            schema: MANIFEST_SCHEMA.to_string(),
            id: id.to_string(),
            split: first_rec.split.clone(),
            sources,
            wav: format!("audio/{id}.wav"),
            clips,
        },
        clip,
    ))
}

/// Draws `k` distinct bank entries whose sources are pairwise separated and
/// mixes them.
pub fn mix_single_source_bank<R: Rng>(
    bank: &[(SampleRecord, MultiChannelClip)],
    rng: &mut R,
    k: usize,
    id: &str,
    min_separation: f64,
) -> Result<(SampleRecord, MultiChannelClip)> {
    if k == 0 || k > bank.len() {
        return Err(Error::Infeasible {
            k,
            separation: min_separation,
            tries: 0,
        });
    }
    let idx: Vec<usize> = (0..bank.len()).collect();
    for _ in 0..PLACEMENT_TRIES {
        let pick: Vec<usize> = idx.choose_multiple(rng, k).copied().collect();
        let parts: Vec<(&SampleRecord, &MultiChannelClip)> = pick.iter().map(|&i| (&bank[i].0, &bank[i].1)).collect();
        match mix_records(&parts, id, min_separation) {
            Err(Error::SeparationViolated { .. }) => continue,
            other => return other,
        }
    }
    Err(Error::Infeasible {
        k,
        separation: min_separation,
        tries: PLACEMENT_TRIES,
    })
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            what: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if rec.schema != MANIFEST_SCHEMA {
            return Err(malformed(format!("unsupported schema `{}`", rec.schema)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Sample counts per split and source count.
pub fn summarize(records: &[SampleRecord]) -> String {
    let mut table: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in records {
        *table.entry(&r.split).or_default().entry(r.sources.len()).or_default() += 1;
    }
    let mut out = format!("{:<12} {:>8}  by source count\n", "split", "samples");
    for (split, counts) in table {
        let total: usize = counts.values().sum();
        let detail: Vec<String> = counts.iter().map(|(k, n)| format!("{k}:{n}")).collect();
        out.push_str(&format!("{split:<12} {total:>8}  {}\n", detail.join(" ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DatasetConfig {
        DatasetConfig {
            splits: vec![SplitConfig {
                name: "train".into(),
                n_samples: 6,
                source_counts: vec![1, 2],
                audio_dir: None,
            }],
            bank: BankConfig {
                clips_per_split: 4,
                clip_samples: 8000,
                rms: 0.2,
            },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn positions_quantized_and_separated() {
        let env = Environment::default();
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_positions(&mut rng, &env, 2, &c).unwrap();
            assert!(p[0].distance(&p[1]) >= 2.0);
            for q in &p {
                for v in [q.x, q.y] {
                    assert!((v / 0.05 - (v / 0.05).round()).abs() < 1e-9);
                    assert!(v > 0.0 && v < 6.0);
                }
            }
        }
        assert!(matches!(
            sample_positions(&mut rng, &env, 10, &c),
            Err(Error::Infeasible { k: 10, .. })
        ));
    }

    #[test]
    fn excerpt_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tone: Vec<f32> = (0..5000).map(|i| (i as f32 * 0.1).sin() * 0.5).collect();
        assert!(slice_excerpt(&tone, &mut rng, 2560, 0.01).is_ok());
        assert!(matches!(
            slice_excerpt(&[0.0; 5000], &mut rng, 2560, 0.01),
            Err(Error::SilentClip { .. })
        ));
        let mut half = vec![0.0f32; 20_000];
        half[10_000..].iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 0.3 } else { -0.3 });
        let mut loud = 0;
        for _ in 0..1000 {
            let (off, _) = slice_excerpt(&half, &mut rng, 2560, 0.01).unwrap();
            // The gate needs mean |x| >= 0.01, i.e. at least ~86 loud samples.
            if off + 2560 > 10_000 + 80 {
                loud += 1;
            }
        }
        assert!(loud >= 990, "{loud}");
    }

    #[test]
    fn synthetic_banks_are_disjoint_and_deterministic() {
        let b = BankConfig::default();
        let a1 = SourceBank::synthetic("train", 3, &b, 16_000);
        let a2 = SourceBank::synthetic("train", 3, &b, 16_000);
        let t = SourceBank::synthetic("test", 3, &b, 16_000);
        assert_eq!(a1.clips, a2.clips);
        assert_ne!(a1.clips[0].1, t.clips[0].1);
        for (_, c) in &a1.clips {
            let rms = (c.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / c.len() as f64).sqrt();
            assert!((rms - 0.2).abs() < 1e-3);
        }
    }

    #[test]
    fn build_is_deterministic_and_round_robin() {
        let scene = SceneConfig::default();
        let c = cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = build_dataset(&c, &scene, d1.path()).unwrap();
        let r2 = build_dataset(&c, &scene, d2.path()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(
            std::fs::read(d1.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(d2.path().join(MANIFEST_FILE)).unwrap()
        );
        for r in &r1 {
            assert_eq!(
                std::fs::read(d1.path().join(&r.wav)).unwrap(),
                std::fs::read(d2.path().join(&r.wav)).unwrap()
            );
            let clip = read_wav(&d1.path().join(&r.wav), &scene.layout()).unwrap();
            assert!(energy_gate(clip.channels().next().unwrap(), c.gate_threshold));
        }
        assert_eq!(r1.iter().filter(|r| r.sources.len() == 1).count(), 3);
        assert_eq!(read_manifest(&d1.path().join(MANIFEST_FILE)).unwrap(), r1);
    }

    #[test]
    fn wav_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let layout = [2, 2];
        let ch: Vec<Vec<f32>> = (0..4).map(|c| (0..100).map(|i| ((i * (c + 1)) as f32 * 0.01).sin()).collect()).collect();
        let clip = MultiChannelClip::from_channels(ch, &layout, 16_000).unwrap();
        let p = d.path().join("a.wav");
        write_wav(&p, &clip, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p, &layout).unwrap(), clip);
        write_wav(&p, &clip, WavFormat::Pcm16).unwrap();
        let back = read_wav(&p, &layout).unwrap();
        for (a, b) in back.channels().zip(clip.channels()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-4);
            }
        }
        std::fs::write(&p, b"RIFFnope").unwrap();
        assert!(matches!(read_wav(&p, &layout), Err(Error::Wav { .. })));
    }

    #[test]
    fn mixing() {
        let scene = SceneConfig::default();
        let mk = |x: f64, y: f64, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sig: Vec<f32> = (0..2560).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let ev = SourceEvent::new(Point2D::new(x, y), sig);
            let clip = render_scene(std::slice::from_ref(&ev), &scene.arrays, &scene.acoustics).unwrap();
            let rec = SampleRecord {
                schema: MANIFEST_SCHEMA.into(),
                id: format!("s{seed}"),
                split: "bank".into(),
                sources: vec![[x, y]],
                wav: String::new(),
                clips: vec![],
            };
            (rec, clip, ev)
        };
        let (ra, ca, ea) = mk(1.0, 1.0, 1);
        let (rb, cb, eb) = mk(4.0, 4.0, 2);
        let (_, ab) = mix_records(&[(&ra, &ca), (&rb, &cb)], "m", 2.0).unwrap();
        let (_, ba) = mix_records(&[(&rb, &cb), (&ra, &ca)], "m", 2.0).unwrap();
        assert_eq!(ab, ba);
        let direct = render_scene(&[ea, eb], &scene.arrays, &scene.acoustics).unwrap();
        assert_eq!(ab, direct);
        let silent = MultiChannelClip::silent(&scene.layout(), 2560, 16_000);
        let (_, same) = mix_records(&[(&ra, &ca), (&rb, &silent)], "m", 2.0).unwrap();
        assert_eq!(same, ca);
        let (rc, cc, _) = mk(1.5, 1.5, 3);
        assert!(matches!(
            mix_records(&[(&ra, &ca), (&rc, &cc)], "m", 2.0),
            Err(Error::SeparationViolated { .. })
        ));
        let bank = vec![(ra, ca), (rb, cb)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rec, _) = mix_single_source_bank(&bank, &mut rng, 2, "m", 2.0).unwrap();
        assert_eq!(rec.sources.len(), 2);
    }
}
