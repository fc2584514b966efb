//! Layer schedules and their recorded forward/backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, conv2d_forward, dconv2d_backward, dconv2d_forward, ConvGeom};
use super::norm::{
    batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, leaky_relu, leaky_relu_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, BnCache,
};
use super::params::{kaiming_uniform, BufferId, Grads, ParamId, ParamStore, RunningUpdate};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Dconv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Batchnorm2d,
    LeakyRelu {
        negative_slope: f64,
    },
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Self {
        Self::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        }
    }

    pub fn dconv(filters: usize, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Self {
        Self::Dconv2d {
            filters,
            kernel,
            stride,
            padding,
        }
    }

    pub fn leaky() -> Self {
        Self::LeakyRelu {
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                ..
            }
            | LayerSpec::Dconv2d {
                filters,
                kernel,
                stride,
                ..
            } => {
                if *filters == 0 || kernel.contains(&0) || stride.contains(&0) {
                    return Err(Error::config(field, "filters, kernel and stride must be positive"));
                }
            }
            LayerSpec::LeakyRelu { negative_slope } if !negative_slope.is_finite() => {
                return Err(Error::config(field, "negative_slope must be finite"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        name: String,
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    Dconv {
        name: String,
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    Bn {
        name: String,
        gamma: ParamId,
        beta: ParamId,
        mean: BufferId,
        var: BufferId,
    },
    Leaky(f64),
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Input(Tensor<T>),
    Bn(BnCache<T>),
}

/// Saved activations of one forward pass through a [`Sequential`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    pub running: Vec<RunningUpdate>,
    recorded: bool,
}

impl<T> Tape<T> {
    pub fn unrecorded() -> Self {
        Self {
            caches: Vec::new(),
            running: Vec::new(),
            recorded: false,
        }
    }

    pub fn is_recorded(&self) -> bool {
        self.recorded
    }
}

/// A chain of layers whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<Layer>,
    in_channels: usize,
    out_channels: usize,
}

impl Sequential {
    /// Registers parameters for `specs` under `prefix` and returns the chain.
    pub fn build<T: Real, R: Rng>(
        prefix: &str,
        specs: &[LayerSpec],
        in_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut ch = in_channels;
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            spec.validate(&name)?;
            let layer = match *spec {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = ch * kernel[0] * kernel[1];
                    let w = store.add_param(
                        &format!("{name}.weight"),
                        kaiming_uniform(&[filters, ch, kernel[0], kernel[1]], fan_in, rng),
                    )?;
                    let b = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[filters]))?;
                    ch = filters;
                    Layer::Conv {
                        name,
                        w,
                        b,
                        geom: ConvGeom::new((kernel[0], kernel[1]), (stride[0], stride[1]), (padding[0], padding[1])),
                    }
                }
                LayerSpec::Dconv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = (ch * kernel[0] * kernel[1] / (stride[0] * stride[1])).max(1);
                    let w = store.add_param(
                        &format!("{name}.weight"),
                        kaiming_uniform(&[ch, filters, kernel[0], kernel[1]], fan_in, rng),
                    )?;
                    let b = store.add_param(&format!("{name}.bias"), Tensor::zeros(&[filters]))?;
                    ch = filters;
                    Layer::Dconv {
                        name,
                        w,
                        b,
                        geom: ConvGeom::new((kernel[0], kernel[1]), (stride[0], stride[1]), (padding[0], padding[1])),
                    }
                }
                LayerSpec::Batchnorm2d => {
                    let gamma = store.add_param(&format!("{name}.gamma"), Tensor::full(&[ch], T::one()))?;
                    let beta = store.add_param(&format!("{name}.beta"), Tensor::zeros(&[ch]))?;
                    let mean = store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[ch]))?;
                    let var = store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[ch], T::one()))?;
                    Layer::Bn {
                        name,
                        gamma,
                        beta,
                        mean,
                        var,
                    }
                }
                LayerSpec::LeakyRelu { negative_slope } => Layer::Leaky(negative_slope),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
            };
            layers.push(layer);
        }
        Ok(Self {
            layers,
            in_channels,
            out_channels: ch,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Parameter ids owned by this chain.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { w, b, .. } | Layer::Dconv { w, b, .. } => vec![*w, *b],
                Layer::Bn { gamma, beta, .. } => vec![*gamma, *beta],
                _ => vec![],
            })
            .collect()
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let mut tape = Tape {
            caches: Vec::new(),
            running: Vec::new(),
            recorded: mode == Mode::Train,
        };
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = match layer {
                Layer::Conv { name, w, b, geom } => {
                    conv2d_forward(&cur, store.value(*w), store.value(*b), geom, name)?
                }
                Layer::Dconv { name, w, b, geom } => {
                    dconv2d_forward(&cur, store.value(*w), store.value(*b), geom, name)?
                }
                Layer::Bn {
                    name,
                    gamma,
                    beta,
                    mean,
                    var,
                } => match mode {
                    Mode::Train => {
                        let (y, cache, stats) = batchnorm2d_train(&cur, store.value(*gamma), store.value(*beta), name)?;
                        tape.running.push(RunningUpdate {
                            mean_buffer: *mean,
                            var_buffer: *var,
                            mean: stats.mean,
                            var: stats.var,
                        });
                        tape.caches.push(Cache::Bn(cache));
                        cur = y;
                        continue;
                    }
                    Mode::Eval => batchnorm2d_eval(
                        &cur,
                        store.value(*gamma),
                        store.value(*beta),
                        store.buffer(*mean),
                        store.buffer(*var),
                        name,
                    )?,
                },
                Layer::Leaky(s) => leaky_relu(&cur, *s),
                Layer::Relu => relu(&cur),
                Layer::Sigmoid => sigmoid(&cur),
            };
            if mode == Mode::Train {
                tape.caches.push(Cache::Input(cur));
            }
            cur = next;
        }
        debug_assert!(cur.all_finite(), "non-finite activation");
        Ok((cur, tape))
    }

    /// Back-propagates `gy`, accumulating parameter gradients into `grads`.
    /// Returns the input gradient when `need_dx` is set.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        gy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        if !tape.recorded || tape.caches.len() != self.layers.len() {
            return Err(Error::UnrecordedGraph);
        }
        let mut g = gy.clone();
        for (idx, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let want_dx = need_dx || idx > 0;
            g = match (layer, cache) {
                (Layer::Conv { name, w, b, geom }, Cache::Input(x)) => {
                    let (dx, dw, db) = conv2d_backward(x, store.value(*w), store.value(*b), &g, geom, want_dx, name)?;
                    grads.accumulate(*w, &dw)?;
                    grads.accumulate(*b, &db)?;
                    match dx {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                (Layer::Dconv { name, w, b, geom }, Cache::Input(x)) => {
                    let (dx, dw, db) = dconv2d_backward(x, store.value(*w), store.value(*b), &g, geom, want_dx, name)?;
                    grads.accumulate(*w, &dw)?;
                    grads.accumulate(*b, &db)?;
                    match dx {
                        Some(dx) => dx,
                        None => return Ok(None),
                    }
                }
                (
                    Layer::Bn {
                        name, gamma, beta, ..
                    },
                    Cache::Bn(c),
                ) => {
                    let (dx, dg, db) = batchnorm2d_backward(c, store.value(*gamma), &g, name)?;
                    grads.accumulate(*gamma, &dg)?;
                    grads.accumulate(*beta, &db)?;
                    dx
                }
                (Layer::Leaky(s), Cache::Input(x)) => leaky_relu_backward(x, &g, *s)?,
                (Layer::Relu, Cache::Input(x)) => relu_backward(x, &g)?,
                (Layer::Sigmoid, Cache::Input(x)) => sigmoid_backward(x, &g)?,
                _ => return Err(Error::UnrecordedGraph),
            };
        }
        Ok(need_dx.then_some(g))
    }
}
