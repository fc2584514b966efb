//! Encoder-decoder architectures.
//!
//! Every architecture ends in the same fusion block and decoder; they differ
//! in how per-array features reach the embedding:
//!
//! * `SingleEncoder`: arrays concatenated on the channel axis, one encoder.
//! * `ArrayEncoder`: one encoder with shared weights applied to each array,
//!   embeddings concatenated.
//! * `Combined`: pair-wise features per array, a pair extraction block that
//!   slides over microphone pairs, then the shared array encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::represent::Repr;
use crate::tensornet::{ConvGeom, Grads, LayerSpec, Mode, ParamStore, Real, Sequential, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "single", alias = "single_encoder")]
    SingleEncoder,
    #[serde(rename = "array", alias = "array_encoder")]
    ArrayEncoder,
    #[serde(rename = "combined")]
    Combined,
}

impl ArchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::SingleEncoder => "single",
            ArchKind::ArrayEncoder => "array",
            ArchKind::Combined => "combined",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" | "single_encoder" => Ok(ArchKind::SingleEncoder),
            "array" | "array_encoder" => Ok(ArchKind::ArrayEncoder),
            "combined" => Ok(ArchKind::Combined),
            _ => Err(Error::config("arch", format!("unknown architecture `{s}`"))),
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Complete description of a network, stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub repr: Repr,
    pub n_arrays: usize,
    pub n_mics: usize,
    pub n_frames: usize,
    pub n_freqs: usize,
    /// Applied to every frame of the pair-wise features (Combined only).
    pub pair_extraction: Vec<LayerSpec>,
    pub encoder: Vec<LayerSpec>,
    /// 1×1 reduction from the concatenated embeddings to `embedding_dim`.
    pub fusion: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub embedding_dim: usize,
}

const MIN_SCALED_WIDTH: usize = 16;

/// Activation after the last decoder convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    #[default]
    Relu,
    Sigmoid,
}

/// Narrowed width, never below `min(w, MIN_SCALED_WIDTH)`.
fn scale(w: usize, divisor: usize) -> usize {
    (w / divisor.max(1)).max(w.min(MIN_SCALED_WIDTH))
}

impl ModelSpec {
    /// Full-width network for two 4-microphone arrays and 9 × 256 features.
    pub fn new(arch: ArchKind, repr: Repr) -> Self {
        Self::scaled(arch, repr, 1)
    }

    /// Replaces the final decoder activation.
    pub fn with_head(mut self, head: OutputHead) -> Self {
        if let Some(last) = self.decoder.last_mut() {
            *last = match head {
                OutputHead::Relu => LayerSpec::Relu,
                OutputHead::Sigmoid => LayerSpec::Sigmoid,
            };
        }
        self
    }

    /// Replaces every decoder ReLU after the last transposed convolution with
    /// a leaky one, so the refinement convolutions cannot go silent.
    pub fn with_leaky_tail(mut self) -> Self {
        let last_dconv = self.decoder.iter().rposition(|l| matches!(l, LayerSpec::Dconv2d { .. }));
        let end = self.decoder.len().saturating_sub(1);
        if let Some(start) = last_dconv {
            for l in &mut self.decoder[start..end] {
                if *l == LayerSpec::Relu {
                    *l = LayerSpec::leaky();
                }
            }
        }
        self
    }

    /// Same topology with every hidden width divided by `divisor`.
    pub fn scaled(arch: ArchKind, repr: Repr, divisor: usize) -> Self {
        let s = |w| scale(w, divisor);
        let mut encoder = Vec::new();
        for _ in 0..5 {
            encoder.push(LayerSpec::conv(s(128), [1, 5], [1, 2], [0, 2]));
            encoder.push(LayerSpec::Batchnorm2d);
            encoder.push(LayerSpec::leaky());
        }
        encoder.push(LayerSpec::conv(s(64), [1, 3], [1, 1], [0, 1]));
        encoder.push(LayerSpec::leaky());
        encoder.push(LayerSpec::conv(s(32), [1, 3], [1, 1], [0, 1]));
        encoder.push(LayerSpec::leaky());
        encoder.push(LayerSpec::conv(s(64), [9, 1], [1, 1], [0, 0]));
        encoder.push(LayerSpec::leaky());
        let embedding_dim = s(64) * 8;

        let pair_extraction = if arch == ArchKind::Combined {
            vec![
                LayerSpec::conv(s(8), [2, 7], [2, 1], [0, 3]),
                LayerSpec::Batchnorm2d,
                LayerSpec::leaky(),
            ]
        } else {
            Vec::new()
        };

        let fusion = vec![LayerSpec::conv(embedding_dim, [1, 1], [1, 1], [0, 0]), LayerSpec::leaky()];

        let (second_kernel, third_stride, late_pad, out_ch) = match repr {
            Repr::Tg | Repr::Hm => (3, 3, 0, 1),
            Repr::Rg => (2, 1, 1, 3),
        };
        let mut decoder = vec![
            LayerSpec::dconv(s(256), [3, 3], [3, 3], [0, 0]),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
            LayerSpec::dconv(s(128), [second_kernel; 2], [second_kernel; 2], [0, 0]),
            LayerSpec::Batchnorm2d,
            LayerSpec::Relu,
        ];
        for w in [64, 32] {
            decoder.push(LayerSpec::dconv(s(w), [3, 3], [third_stride; 2], [late_pad; 2]));
            decoder.push(LayerSpec::Batchnorm2d);
            decoder.push(LayerSpec::Relu);
        }
        for w in [s(16), s(8), out_ch] {
            decoder.push(LayerSpec::conv(w, [3, 3], [1, 1], [1, 1]));
            decoder.push(LayerSpec::Relu);
        }

        Self {
            arch,
            repr,
            n_arrays: 2,
            n_mics: 4,
            n_frames: 9,
            n_freqs: 256,
            pair_extraction,
            encoder,
            fusion,
            decoder,
            embedding_dim,
        }
    }

    /// Channels of one array's input tensor.
    pub fn array_channels(&self) -> usize {
        match self.arch {
            ArchKind::Combined => 2 * self.n_mics * (self.n_mics - 1),
            _ => 2 * self.n_mics,
        }
    }

    fn encoder_in_channels(&self) -> Result<usize> {
        Ok(match self.arch {
            ArchKind::SingleEncoder => self.n_arrays * self.array_channels(),
            ArchKind::ArrayEncoder => self.array_channels(),
            ArchKind::Combined => {
                let [c, h, _] = infer_shape(&self.pair_extraction, [1, self.array_channels(), self.n_freqs], "pair_extraction")?;
                c * h
            }
        })
    }

    fn n_embeddings(&self) -> usize {
        match self.arch {
            ArchKind::SingleEncoder => 1,
            _ => self.n_arrays,
        }
    }

    /// Checks the schedule end to end by shape inference.
    pub fn validate(&self) -> Result<()> {
        if self.n_arrays == 0 || self.n_mics < 2 {
            return Err(Error::config("model", "need at least one array of two microphones"));
        }
        if (self.arch == ArchKind::Combined) == self.pair_extraction.is_empty() {
            return Err(Error::config(
                "model.pair_extraction",
                "required for the combined architecture and only for it",
            ));
        }
        let enc_in = self.encoder_in_channels()?;
        let [c, h, w] = infer_shape(&self.encoder, [enc_in, self.n_frames, self.n_freqs], "encoder")?;
        if h != 1 || c * w != self.embedding_dim {
            return Err(Error::config(
                "model.encoder",
                format!("encoder output {c}x{h}x{w} does not flatten to embedding_dim {}", self.embedding_dim),
            ));
        }
        let fused = infer_shape(&self.fusion, [self.n_embeddings() * self.embedding_dim, 1, 1], "fusion")?;
        if fused != [self.embedding_dim, 1, 1] {
            return Err(Error::config("model.fusion", "must map the embeddings to embedding_dim x 1 x 1"));
        }
        let out = infer_shape(&self.decoder, fused, "decoder")?;
        if out != self.repr.output_shape() {
            return Err(Error::config(
                "model.decoder",
                format!("decoder produces {out:?}, representation needs {:?}", self.repr.output_shape()),
            ));
        }
        Ok(())
    }
}

/// Output `[C, H, W]` of a layer chain applied to `[C, H, W]`.
pub fn infer_shape(specs: &[LayerSpec], input: [usize; 3], block: &str) -> Result<[usize; 3]> {
    let [mut c, mut h, mut w] = input;
    for (i, spec) in specs.iter().enumerate() {
        let (filters, geom, transposed) = match *spec {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => (filters, ConvGeom::new(kernel.into(), stride.into(), padding.into()), false),
            LayerSpec::Dconv2d {
                filters,
                kernel,
                stride,
                padding,
            } => (filters, ConvGeom::new(kernel.into(), stride.into(), padding.into()), true),
            _ => continue,
        };
        let out = if transposed {
            geom.dconv_out(h, w)
        } else {
            geom.conv_out(h, w)
        };
        let (oh, ow) = out.ok_or_else(|| Error::config(format!("model.{block}.{i}"), format!("does not fit a {c}x{h}x{w} input")))?;
        c = filters;
        h = oh;
        w = ow;
    }
    Ok([c, h, w])
}

/// Swaps axes 1 and 2 of a row-major `[a, b, c, d]` array.
fn swap_mid<T: Copy>(data: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..a {
        for k in 0..c {
            for j in 0..b {
                let off = ((i * b + j) * c + k) * d;
                out.extend_from_slice(&data[off..off + d]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pair: Option<Sequential>,
    encoder: Sequential,
    fusion: Sequential,
    decoder: Sequential,
}

/// Recorded forward pass of a [`Model`].
#[derive(Debug, Clone)]
pub struct ModelTape<T> {
    pair: Option<Tape<T>>,
    encoder: Tape<T>,
    fusion: Tape<T>,
    decoder: Tape<T>,
    batch: usize,
    enc_out: [usize; 3],
    pair_out: [usize; 3],
}

impl<T> ModelTape<T> {
    /// Batchnorm running-statistic updates in layer order.
    pub fn running_updates(&self) -> impl Iterator<Item = &crate::tensornet::params::RunningUpdate> {
        self.pair
            .iter()
            .chain([&self.encoder, &self.fusion, &self.decoder])
            .flat_map(|t| t.running.iter())
    }
}

/// Registers the parameters of `spec` in a fresh store.
pub fn build_model<T: Real, R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<(Model, ParamStore<T>)> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let pair = if spec.arch == ArchKind::Combined {
        Some(Sequential::build("pair", &spec.pair_extraction, 1, &mut store, rng)?)
    } else {
        None
    };
    let encoder = Sequential::build("encoder", &spec.encoder, spec.encoder_in_channels()?, &mut store, rng)?;
    let fusion = Sequential::build("fusion", &spec.fusion, spec.n_embeddings() * spec.embedding_dim, &mut store, rng)?;
    let decoder = Sequential::build("decoder", &spec.decoder, spec.embedding_dim, &mut store, rng)?;
    Ok((
        Model {
            spec: spec.clone(),
            pair,
            encoder,
            fusion,
            decoder,
        },
        store,
    ))
}

impl Model {
    /// Rebuilds the layer wiring of `spec` without keeping fresh weights.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (model, _) = build_model::<f32, _>(spec, &mut rng)?;
        Ok(model)
    }

    /// Names of the encoder parameters (one set whatever the array count).
    pub fn encoder_param_ids(&self) -> Vec<usize> {
        self.encoder.param_ids()
    }

    /// `inputs[a]` is the `[N, C, T, F]` feature batch of array `a`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        inputs: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(Tensor<T>, ModelTape<T>)> {
        let spec = &self.spec;
        if inputs.len() != spec.n_arrays {
            return Err(Error::shape("model input arrays", &[spec.n_arrays], &[inputs.len()]));
        }
        let want = [inputs[0].shape().first().copied().unwrap_or(0), spec.array_channels(), spec.n_frames, spec.n_freqs];
        for x in inputs {
            if x.shape() != want {
                return Err(Error::shape("model input", &want, x.shape()));
            }
        }
        let [n, ch, t, f] = want;
        let a = spec.n_arrays;

        let mut pair_tape = None;
        let mut pair_out = [0; 3];
        let enc_in = match spec.arch {
            ArchKind::SingleEncoder => Tensor::concat_channels(&inputs.iter().collect::<Vec<_>>())?,
            ArchKind::ArrayEncoder => Tensor::from_vec(&[a * n, ch, t, f], inputs.iter().flat_map(|x| x.data().iter().copied()).collect())?,
            ArchKind::Combined => {
                let pair = self.pair.as_ref().expect("combined model has a pair block");
                let stacked: Vec<T> = inputs.iter().flat_map(|x| x.data().iter().copied()).collect();
                let frames = Tensor::from_vec(&[a * n * t, 1, ch, f], swap_mid(&stacked, [a * n, ch, t, f]))?;
                let (y, tape) = pair.forward(store, &frames, mode)?;
                let (_, pc, ph, pw) = y.dims4("pair extraction")?;
                pair_out = [pc, ph, pw];
                pair_tape = Some(tape);
                Tensor::from_vec(&[a * n, pc * ph, t, pw], swap_mid(y.data(), [a * n, t, pc * ph, pw]))?
            }
        };

        let (emb, enc_tape) = self.encoder.forward(store, &enc_in, mode)?;
        let (_, ec, eh, ew) = emb.dims4("encoder")?;
        let e = ec * eh * ew;
        let k = spec.n_embeddings();
        let fused_in = Tensor::from_vec(&[n, k * e, 1, 1], swap_mid(emb.data(), [1, k, n, e]))?;
        let (z, fusion_tape) = self.fusion.forward(store, &fused_in, mode)?;
        let (out, dec_tape) = self.decoder.forward(store, &z, mode)?;
        Ok((
            out,
            ModelTape {
                pair: pair_tape,
                encoder: enc_tape,
                fusion: fusion_tape,
                decoder: dec_tape,
                batch: n,
                enc_out: [ec, eh, ew],
                pair_out,
            },
        ))
    }

    /// Accumulates parameter gradients of a recorded pass into `grads`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &ModelTape<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<()> {
        let spec = &self.spec;
        let n = tape.batch;
        let k = spec.n_embeddings();
        let [ec, eh, ew] = tape.enc_out;
        let e = ec * eh * ew;
        let gz = self
            .decoder
            .backward(store, &tape.decoder, gy, grads, true)?
            .ok_or(Error::UnrecordedGraph)?;
        let gf = self
            .fusion
            .backward(store, &tape.fusion, &gz, grads, true)?
            .ok_or(Error::UnrecordedGraph)?;
        let g_emb = Tensor::from_vec(&[k * n, ec, eh, ew], swap_mid(gf.data(), [1, n, k, e]))?;
        let need_dx = spec.arch == ArchKind::Combined;
        let g_in = self.encoder.backward(store, &tape.encoder, &g_emb, grads, need_dx)?;
        if let (Some(pair), Some(pair_tape), Some(g_in)) = (&self.pair, &tape.pair, g_in) {
            let (an, _, t, pw) = g_in.dims4("pair extraction grad")?;
            let [pc, ph, _] = tape.pair_out;
            let g_frames = Tensor::from_vec(&[an * t, pc, ph, pw], swap_mid(g_in.data(), [an, pc * ph, t, pw]))?;
            pair.backward(store, pair_tape, &g_frames, grads, false)?;
        }
        Ok(())
    }
}
