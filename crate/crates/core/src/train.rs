//! Feature loading, the training loop with validation-based checkpoint
//! selection, and batched inference.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::{energy_gate, MultiChannelClip, Point2D};
use crate::config::RunConfig;
use crate::datagen::{read_manifest, read_wav, MANIFEST_FILE};
use crate::dsp::{normalize_jointly, pairwise_rearrange, SpectralFeatures, Stft};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricConfig, MetricsReport};
use crate::models::{build_model, ArchKind, Model, ModelSpec};
use crate::par;
use crate::represent::{batch_loss, decode_output, encode_target, KeypointRecord, RetrievalConfig};
use crate::tensornet::checkpoint::{decode, encode};
use crate::tensornet::{adam_step, Mode, ParamStore, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
const INFER_BATCH: usize = 32;

/// Checkpoint header: everything inference needs besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
}

pub fn save(path: &Path, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(store, &serde_json::to_string(meta)?);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks its tensors against the recorded model.
pub fn load(path: &Path) -> Result<(Model, ParamStore<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, stored) = decode(&bytes)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut store) = build_model::<f32, _>(&meta.model, &mut rng)?;
    store.assign_from(&stored)?;
    Ok((model, store, meta))
}

/// One clip ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub positions: Vec<Point2D>,
    /// Per-array `[2·n_mics, n_frames, n_freqs]` spectral features.
    pub features: Vec<SpectralFeatures>,
    /// Whether the first channel passes the energy gate.
    pub audible: bool,
}

pub fn clip_sample(id: &str, positions: Vec<Point2D>, clip: &MultiChannelClip, stft: &Stft, gate: f32) -> Result<Sample> {
    let mut features = clip.arrays.iter().map(|a| stft.features(a)).collect::<Result<Vec<_>>>()?;
    if stft.config().normalize {
        normalize_jointly(&mut features);
    }
    let audible = clip.channels().next().is_some_and(|c| energy_gate(c, gate));
    Ok(Sample {
        id: id.to_string(),
        positions,
        features,
        audible,
    })
}

/// Loads and featurizes every sample of `split` from the dataset in `data_dir`.
pub fn load_split(data_dir: &Path, split: &str, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let records = read_manifest(&data_dir.join(MANIFEST_FILE))?;
    let chosen: Vec<_> = records.into_iter().filter(|r| r.split == split).collect();
    let stft = Stft::new(cfg.stft)?;
    let layout = cfg.scene.layout();
    par::map_slice(&chosen, |r| {
        let clip = read_wav(&data_dir.join(&r.wav), &layout)?;
        clip_sample(&r.id, r.positions(), &clip, &stft, cfg.dataset.gate_threshold)
    })
    .into_iter()
    .collect()
}

/// Per-array `[N, C, T, F]` network inputs for a batch of samples.
pub fn model_inputs(arch: ArchKind, batch: &[&Sample]) -> Result<Vec<Tensor<f32>>> {
    let n_arrays = batch.first().map_or(0, |s| s.features.len());
    (0..n_arrays)
        .map(|a| {
            let per: Vec<Tensor<f32>> = batch
                .iter()
                .map(|s| match arch {
                    ArchKind::Combined => pairwise_rearrange(&s.features[a]).map(|p| p.tensor),
                    _ => Ok(s.features[a].tensor.clone()),
                })
                .collect::<Result<_>>()?;
            Tensor::stack(&per.iter().collect::<Vec<_>>())
        })
        .collect()
}

/// Raw network outputs `[C, H, W]`, one per sample, in eval mode.
pub fn predict_outputs(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFER_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (y, _) = model.forward(store, &model_inputs(model.spec.arch, &refs)?, Mode::Eval)?;
        out.extend((0..chunk.len()).map(|i| y.index_first(i)));
    }
    Ok(out)
}

/// Decoded keypoints per sample; inaudible clips yield none.
pub fn predict(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[Sample],
    retrieval: &RetrievalConfig,
) -> Result<Vec<KeypointRecord>> {
    let outputs = predict_outputs(model, store, samples)?;
    samples
        .iter()
        .zip(&outputs)
        .map(|(s, y)| {
            let kps = if s.audible {
                decode_output(model.spec.repr, y, retrieval)?
            } else {
                Vec::new()
            };
            Ok(KeypointRecord::new(s.id.clone(), &kps))
        })
        .collect()
}

pub fn ground_truths(samples: &[Sample]) -> Vec<(String, Vec<Point2D>)> {
    samples.iter().map(|s| (s.id.clone(), s.positions.clone())).collect()
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[Sample],
    retrieval: &RetrievalConfig,
    metrics: &MetricConfig,
) -> Result<MetricsReport> {
    let preds = predict(model, store, samples, retrieval)?;
    evaluate_dataset(&preds, &ground_truths(samples), metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
    pub val_rmse: Option<f64>,
    pub batch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Single worker thread.
    pub deterministic: bool,
}

/// Worker count for a run: 1 when deterministic, otherwise the configured
/// count capped by `SSL2D_THREADS` (0 leaves the default pool).
pub fn worker_threads(cfg: &RunConfig, deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    match (cfg.training.threads, par::env_thread_cap()) {
        (0, cap) => cap,
        (t, 0) => t,
        (t, cap) => t.min(cap),
    }
}

/// Trains the configured model on `data_dir`, writing `best.ckpt`,
/// `last.ckpt` and `train_log.jsonl` into `out_dir`.
pub fn train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    par::with_threads(worker_threads(cfg, opts.deterministic), || train_inner(cfg, data_dir, out_dir, opts))
}

fn train_inner(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<Vec<EpochLog>> {
    let spec = cfg.model_spec();
    let repr = spec.repr;
    let tc = &cfg.training;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let (model, mut store) = build_model::<f32, _>(&spec, &mut rng)?;
    let mut meta = CheckpointMeta {
        model: spec.clone(),
        config: cfg.clone(),
        epoch: 0,
        best_epoch: None,
        best_val_f1: None,
    };
    if let Some(path) = &opts.resume {
        let (_, stored, old) = load(path)?;
        if old.model != spec {
            return Err(Error::config("model", "checkpoint was trained with a different model"));
        }
        store.assign_from(&stored)?;
        meta.epoch = old.epoch;
        meta.best_epoch = old.best_epoch;
        meta.best_val_f1 = old.best_val_f1;
    }

    let train_set = load_split(data_dir, &tc.train_split, cfg)?;
    if train_set.is_empty() {
        return Err(Error::config("training.train_split", format!("split `{}` has no samples", tc.train_split)));
    }
    let val_set = load_split(data_dir, &tc.validation_split, cfg)?;
    let targets: Vec<Tensor<f32>> = train_set
        .iter()
        .map(|s| encode_target(repr, &s.positions, cfg.loss.sigma_sq_hm))
        .collect::<Result<_>>()?;
    let selection = MetricConfig {
        resolutions: vec![tc.selection_resolution],
        ..cfg.metrics.clone()
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut logs = Vec::new();
    for epoch in meta.epoch + 1..=tc.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(tc.seed);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);

        let mut batch_losses = Vec::new();
        for idx in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let inputs = model_inputs(spec.arch, &batch)?;
            let target = Tensor::stack(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
            let (y, tape) = model.forward(&store, &inputs, Mode::Train)?;
            let (loss, gy) = batch_loss(repr, &y, &target, &cfg.loss)?;
            let mut grads = store.zero_grads();
            model.backward(&store, &tape, &gy, &mut grads)?;
            let updates: Vec<_> = tape.running_updates().cloned().collect();
            let step = store.step + 1;
            adam_step(&mut store, &grads, &tc.adam, step)?;
            store.commit_running_stats(&updates);
            batch_losses.push(loss);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;

        let (val_f1, val_rmse) = if val_set.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, &store, &val_set, &cfg.retrieval, &selection)?;
            (Some(r.overall[0].f1), r.overall[0].rmse_tp)
        };
        meta.epoch = epoch;
        let improved = match (val_f1, meta.best_val_f1) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(f), Some(best)) => f > best,
        };
        if improved {
            meta.best_epoch = Some(epoch);
            meta.best_val_f1 = val_f1;
        }
        save(&out_dir.join(LAST_CHECKPOINT), &store, &meta)?;
        if improved {
            save(&out_dir.join(BEST_CHECKPOINT), &store, &meta)?;
        }

        let entry = EpochLog {
            epoch,
            step: store.step,
            train_loss,
            val_f1,
            val_rmse,
            batch_losses,
        };
        serde_json::to_writer(&mut log_file, &entry)?;
        log_file.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        logs.push(entry);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::datagen::build_dataset;
    use crate::models::ArchKind;
    use crate::represent::Repr;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::profile(Profile::Desk);
        cfg.model.width_divisor = 16;
        cfg.model.arch = ArchKind::ArrayEncoder;
        cfg.training.epochs = 2;
        cfg.training.batch_size = 4;
        for s in &mut cfg.dataset.splits {
            s.n_samples = 6;
        }
        cfg.dataset.bank.clips_per_split = 4;
        cfg.dataset.bank.clip_samples = 6000;
        cfg
    }

    #[test]
    fn train_resume_and_checkpoint_meta() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        build_dataset(&cfg.dataset, &cfg.scene, &data).unwrap();
        let out = dir.path().join("run");
        let logs = train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.train_loss.is_finite() && l.val_f1.is_some()));

        let (_, _, meta) = load(&out.join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(meta.epoch, 2);
        let mut more = cfg.clone();
        more.training.epochs = 3;
        let opts = TrainOptions {
            resume: Some(out.join(LAST_CHECKPOINT)),
            deterministic: true,
        };
        let logs = train(&more, &data, &out, &opts).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].epoch, 3);
        assert_eq!(logs[0].step, 3 * 2);
        let lines = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
        assert_eq!(lines.lines().count(), 3);

        let (model, store, _) = load(&out.join(BEST_CHECKPOINT)).unwrap();
        let test = load_split(&data, "test", &cfg).unwrap();
        let preds = predict(&model, &store, &test, &cfg.retrieval).unwrap();
        assert_eq!(preds.len(), 6);
    }

    #[test]
    fn combined_inputs_are_pairwise() {
        let cfg = tiny();
        let clip = MultiChannelClip::silent(&cfg.scene.layout(), 2560, 16_000);
        let stft = Stft::new(cfg.stft).unwrap();
        let s = clip_sample("x", vec![], &clip, &stft, 0.01).unwrap();
        assert!(!s.audible);
        let x = model_inputs(ArchKind::Combined, &[&s, &s]).unwrap();
        assert_eq!(x.len(), 2);
        assert_eq!(x[0].shape(), &[2, 24, 9, 256]);
        let y = model_inputs(ArchKind::SingleEncoder, &[&s]).unwrap();
        assert_eq!(y[1].shape(), &[1, 8, 9, 256]);
        let _ = Repr::Hm;
    }
}
