use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssl2d::config::{Profile, RunConfig};
use ssl2d::datagen::{build_dataset, read_manifest, read_wav, summarize, SampleRecord, MANIFEST_FILE};
use ssl2d::metrics::Averaging;
use ssl2d::models::ArchKind;
use ssl2d::plot::overlay;
use ssl2d::represent::{read_keypoints, write_keypoints, Repr, TgMode};
use ssl2d::train::{self, Sample, TrainOptions};
use ssl2d::{dsp::Stft, metrics::evaluate_dataset, par, Error, Result};

#[derive(Parser)]
#[command(name = "ssl2d", version, about = "2D localization of multiple sound sources from two microphone arrays")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML overrides applied on top of the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "paper")]
    profile: Profile,
    /// Seeds both dataset synthesis and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    arch: Option<ArchKind>,
    #[arg(long, global = true)]
    repr: Option<Repr>,
    /// Comma-separated association radii in meters.
    #[arg(long, global = true, value_delimiter = ',')]
    resolutions: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best.ckpt, last.ckpt and train_log.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict keypoints for a dataset split or for WAV files.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "audio")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// WAV files to localize instead of a dataset.
        #[arg(long, num_args = 1.., conflicts_with = "data")]
        audio: Vec<PathBuf>,
        /// Target-grid retrieval: `improved` or `naive`.
        #[arg(long)]
        tg_mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score keypoints against a dataset split.
    Eval {
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report JSON path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print the text table.
        #[arg(long)]
        table: bool,
        /// Average per-sample scores instead of pooling counts.
        #[arg(long = "macro")]
        macro_avg: bool,
        /// One-to-one assignment instead of nearest-prediction association.
        #[arg(long)]
        one_to_one: bool,
    },
    /// Render network output maps with ground truth and predictions as PPM images.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 6)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Global {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), self.profile)?;
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
            cfg.dataset.seed = seed;
        }
        if let Some(arch) = self.arch {
            cfg.model.arch = arch;
        }
        if let Some(repr) = self.repr {
            cfg.model.repr = repr;
        }
        if let Some(r) = &self.resolutions {
            cfg.metrics.resolutions = r.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_records(data: &Path, split: &str) -> Result<Vec<SampleRecord>> {
    let records: Vec<_> = read_manifest(&data.join(MANIFEST_FILE))?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    if records.is_empty() {
        return Err(Error::Malformed {
            what: "manifest".into(),
            line: 0,
            reason: format!("split `{split}` has no samples"),
        });
    }
    Ok(records)
}

fn audio_samples(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<Sample>> {
    let stft = Stft::new(cfg.stft)?;
    paths
        .iter()
        .map(|p| {
            let clip = read_wav(p, &cfg.scene.layout())?;
            let id = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            train::clip_sample(&id, Vec::new(), &clip, &stft, cfg.dataset.gate_threshold)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Generate { out } => {
            let cfg = g.run_config()?;
            let records = par::with_threads(train::worker_threads(&cfg, g.deterministic), || {
                build_dataset(&cfg.dataset, &cfg.scene, &out)
            })?;
            let cfg_path = out.join("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::Io {
                path: cfg_path,
                source: e,
            })?;
            print!("{}", summarize(&records));
        }
        Command::Train { data, out, checkpoint } => {
            let cfg = g.run_config()?;
            let opts = TrainOptions {
                resume: checkpoint,
                deterministic: g.deterministic,
            };
            for e in train::train(&cfg, &data, &out, &opts)? {
                let f1 = e.val_f1.map_or("-".into(), |v| format!("{v:.4}"));
                let rmse = e.val_rmse.map_or("-".into(), |v| format!("{v:.4}"));
                println!("epoch {:>4}  loss {:.6}  val_f1 {f1}  val_rmse {rmse}", e.epoch, e.train_loss);
            }
        }
        Command::Infer {
            checkpoint,
            data,
            split,
            audio,
            tg_mode,
            out,
        } => {
            let (model, store, meta) = train::load(&checkpoint)?;
            let mut cfg = meta.config;
            match tg_mode.as_deref() {
                None => {}
                Some("improved") => cfg.retrieval.tg_mode = TgMode::Improved,
                Some("naive") => cfg.retrieval.tg_mode = TgMode::Naive,
                Some(other) => {
                    return Err(Error::Config {
                        field: "tg_mode".into(),
                        reason: format!("unknown mode `{other}`"),
                    })
                }
            }
            let threads = train::worker_threads(&cfg, g.deterministic);
            let records = par::with_threads(threads, || {
                let samples = match &data {
                    Some(d) => {
                        split_records(d, &split)?;
                        train::load_split(d, &split, &cfg)?
                    }
                    None => audio_samples(&audio, &cfg)?,
                };
                train::predict(&model, &store, &samples, &cfg.retrieval)
            })?;
            write_keypoints(&out, &records)?;
            println!("{} keypoint records written to {}", records.len(), out.display());
        }
        Command::Eval {
            keypoints,
            data,
            split,
            out,
            table,
            macro_avg,
            one_to_one,
        } => {
            let cfg = g.run_config()?;
            let mut metrics = cfg.metrics.clone();
            if macro_avg {
                metrics.averaging = Averaging::Macro;
            }
            metrics.one_to_one |= one_to_one;
            let preds = read_keypoints(&keypoints)?;
            let gts: Vec<_> = split_records(&data, &split)?
                .iter()
                .map(|r| (r.id.clone(), r.positions()))
                .collect();
            let report = evaluate_dataset(&preds, &gts, &metrics)?;
            let json = serde_json::to_string_pretty(&report)?;
            match &out {
                Some(path) => std::fs::write(path, json + "\n").map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?,
                None => println!("{json}"),
            }
            if table {
                print!("{}", report.to_table());
            }
        }
        Command::Plot {
            checkpoint,
            data,
            split,
            limit,
            scale,
            out,
        } => {
            let (model, store, meta) = train::load(&checkpoint)?;
            let cfg = meta.config;
            split_records(&data, &split)?;
            let mut samples = train::load_split(&data, &split, &cfg)?;
            samples.truncate(limit);
            let outputs = train::predict_outputs(&model, &store, &samples)?;
            let preds = train::predict(&model, &store, &samples, &cfg.retrieval)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let grid = model.spec.repr.grid();
            for ((s, y), p) in samples.iter().zip(&outputs).zip(&preds) {
                let map = &y.data()[..grid.n_cells()];
                let pts: Vec<_> = p.keypoints().iter().map(|k| k.position).collect();
                let path = out.join(format!("{}.ppm", s.id));
                overlay(map, &grid, scale, &s.positions, &pts)?.write_ppm(&path)?;
            }
            println!("{} overlays written to {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
