//! Minimal layers, parameter storage and optimizer on top of candle tensors.
//!
//! Weights are created from the crate's seeded streams rather than candle's
//! own RNG so that initialization is reproducible bit for bit.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor_io::{HostTensor, TensorData};

pub const LN_EPS: f64 = 1e-6;

/// Named trainable parameters.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn num_parameters(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_host(&self) -> Result<BTreeMap<String, HostTensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), HostTensor::from_candle(v.as_tensor())?)))
            .collect()
    }

    /// Overwrite every parameter from a host map. Names and shapes must match.
    pub fn load_host(&self, values: &BTreeMap<String, HostTensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let host = values
                .get(name)
                .ok_or_else(|| Error::Container(format!("checkpoint lacks parameter `{name}`")))?;
            if host.shape != var.dims() {
                return Err(Error::ArchitectureMismatch {
                    field: name.clone(),
                    expected: format!("{:?}", var.dims()),
                    found: format!("{:?}", host.shape),
                });
            }
            var.set(&host.to_candle(&self.device)?.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Container(format!("checkpoint has unknown parameter `{extra}`")));
        }
        Ok(())
    }

    /// L2 norm of the gradients of every parameter whose name starts with `prefix`.
    /// Parameters absent from the graph contribute zero.
    pub fn grad_norm(&self, grads: &GradStore, prefix: &str) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in self.with_prefix(prefix) {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
}

/// Scoped parameter factory.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut RngStream,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut RngStream, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n).map(|_| self.rng.normal() * std).collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| (self.rng.uniform() * 2.0 - 1.0) * bound).collect()
            }
        };
        self.param_from(name, shape, data)
    }

    /// Register a parameter with explicit initial values.
    pub fn param_from(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.store.insert(format!("{}.{name}", self.prefix), t)
    }

    /// Draw a standard normal from the init stream.
    pub fn normal(&mut self) -> f64 {
        self.rng.normal()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, Init::FanIn(in_dim), Some(Init::Zeros))
    }

    pub fn with_init(b: &mut Builder, in_dim: usize, out_dim: usize, w: Init, bias: Option<Init>) -> Result<Self> {
        let weight = b.param("weight", &[in_dim, out_dim], w)?;
        let bias = match bias {
            Some(init) => Some(b.param("bias", &[out_dim], init)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::shape("linear input must have rank >= 1"))?;
        let rows = x.elem_count() / in_dim.max(1);
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// `x ⊙ (1 + scale) + shift` with per-sample `[B, d]` modulation on `[B, S, d]` tokens.
pub fn modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let scale = (scale.unsqueeze(1)? + 1.0)?;
    let shift = shift.unsqueeze(1)?;
    Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

/// Scaled dot-product attention on `[B, H, S, dh]` inputs. Returns output and probabilities.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let probs = softmax_last(&scores)?;
    Ok((probs.matmul(v)?, probs))
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, s, d) = x.dims3()?;
    Ok(x.reshape((b, s, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, s, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, s, h * dh))?)
}

/// Multi-head self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("model width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&mut b.sub("qkv"), dim, 3 * dim)?,
            out: Linear::new(&mut b.sub("out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward_with_probs(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let d = x.dim(D::Minus1)?;
        let qkv = self.qkv.forward(x)?;
        let q = split_heads(&qkv.narrow(D::Minus1, 0, d)?, self.heads)?;
        let k = split_heads(&qkv.narrow(D::Minus1, d, d)?, self.heads)?;
        let v = split_heads(&qkv.narrow(D::Minus1, 2 * d, d)?, self.heads)?;
        let (o, p) = attention(&q, &k, &v, mask)?;
        Ok((self.out.forward(&merge_heads(&o)?)?, p))
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_probs(x, mask)?.0)
    }
}

/// Multi-head attention from query tokens onto a context sequence.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q: Linear,
    kv: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new(b: &mut Builder, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut b.sub("q"), dim, dim)?,
            kv: Linear::new(&mut b.sub("kv"), ctx_dim, 2 * dim)?,
            out: Linear::new(&mut b.sub("out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let q = split_heads(&self.q.forward(x)?, self.heads)?;
        let kv = self.kv.forward(ctx)?;
        let k = split_heads(&kv.narrow(D::Minus1, 0, d)?, self.heads)?;
        let v = split_heads(&kv.narrow(D::Minus1, d, d)?, self.heads)?;
        let (o, _) = attention(&q, &k, &v, None)?;
        self.out.forward(&merge_heads(&o)?)
    }
}

/// Two-layer feedforward with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut b.sub("up"), dim, hidden)?,
            down: Linear::new(&mut b.sub("down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

/// Interleaved sinusoidal encoding `[sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), …]`.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    out
}

/// Batched sinusoidal encodings as a `[B, dim]` tensor.
pub fn sinusoidal_batch(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = ts.iter().flat_map(|&t| sinusoidal(t as f64, dim)).collect();
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate warm-up length in optimizer steps.
    pub lr_warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_warmup_steps: 100,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adaptive moment estimation with per-parameter step counts.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        let w = self.cfg.lr_warmup_steps;
        if w == 0 {
            self.cfg.learning_rate
        } else {
            self.cfg.learning_rate * ((self.steps as f64) / w as f64).min(1.0)
        }
    }

    /// One update over the parameters selected by `select` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, select: impl Fn(&str) -> bool) -> Result<()> {
        self.steps += 1;
        let lr = self.current_lr();
        let clip_scale = match self.cfg.grad_clip {
            Some(max) => {
                let mut sq = 0.0;
                for (name, var) in store.iter() {
                    if select(name) {
                        if let Some(g) = grads.get(var.as_tensor()) {
                            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                        }
                    }
                }
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (name, var) in store.iter() {
            if !select(name) {
                continue;
            }
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let g = if clip_scale != 1.0 { (g * clip_scale)? } else { g };
            let entry = match self.state.remove(name) {
                Some(m) => m,
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    t: 0,
                },
            };
            let t = entry.t + 1;
            let m = ((entry.m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((entry.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&m / (1.0 - b1.powi(t as i32)))?;
            let v_hat = (&v / (1.0 - b2.powi(t as i32)))?;
            let update = ((m_hat / (v_hat.sqrt()? + self.cfg.eps)?)? * lr)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.state.insert(name.clone(), Moments { m, v, t });
        }
        Ok(())
    }

    pub fn to_host(&self) -> Result<(u64, BTreeMap<String, HostTensor>)> {
        let mut out = BTreeMap::new();
        for (name, mo) in &self.state {
            out.insert(format!("{name}#m"), HostTensor::from_candle(&mo.m)?);
            out.insert(format!("{name}#v"), HostTensor::from_candle(&mo.v)?);
            out.insert(
                format!("{name}#t"),
                HostTensor::new(vec![], TensorData::I64(vec![mo.t as i64]))?,
            );
        }
        Ok((self.steps, out))
    }

    pub fn from_host(cfg: AdamConfig, steps: u64, host: &BTreeMap<String, HostTensor>) -> Result<Self> {
        let mut state = BTreeMap::new();
        for key in host.keys() {
            let Some(name) = key.strip_suffix("#m") else { continue };
            let get = |suffix: &str| {
                host.get(&format!("{name}{suffix}"))
                    .ok_or_else(|| Error::Container(format!("optimizer state for `{name}` lacks {suffix}")))
            };
            let t = match &get("#t")?.data {
                TensorData::I64(v) if v.len() == 1 => v[0] as u64,
                _ => return Err(Error::Container(format!("bad step count for `{name}`"))),
            };
            state.insert(
                name.to_string(),
                Moments {
                    m: get("#m")?.to_candle(&Device::Cpu)?,
                    v: get("#v")?.to_candle(&Device::Cpu)?,
                    t,
                },
            );
        }
        Ok(Self { cfg, steps, state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngStream};

    #[test]
    fn sinusoid_at_zero_alternates() {
        let e = sinusoidal(0.0, 8);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [-5.0, 0.0, 40.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for s in p {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = layer_norm(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn adam_minimizes_quadratic_and_zero_lr_is_inert() {
        for lr in [0.0, 0.1] {
            let mut store = ParamStore::new(DType::F64);
            let mut rng = RngStream::new(1, streams::INIT);
            let w = Builder::new(&mut store, &mut rng, "p").param("w", &[3], Init::Normal(1.0)).unwrap();
            let start = w.to_vec1::<f64>().unwrap();
            let mut opt = Adam::new(AdamConfig {
                learning_rate: lr,
                lr_warmup_steps: 0,
                ..AdamConfig::default()
            });
            for _ in 0..300 {
                let loss = w.sqr().unwrap().sum_all().unwrap();
                let g = loss.backward().unwrap();
                opt.step(&store, &g, |_| true).unwrap();
            }
            let end = w.to_vec1::<f64>().unwrap();
            if lr == 0.0 {
                assert_eq!(start, end);
            } else {
                assert!(end.iter().all(|v| v.abs() < 0.05), "{end:?}");
            }
        }
    }

    #[test]
    fn linear_warmup_ramps_learning_rate() {
        let mut opt = Adam::new(AdamConfig {
            learning_rate: 1.0,
            lr_warmup_steps: 4,
            ..AdamConfig::default()
        });
        let store = ParamStore::new(DType::F32);
        let x = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
        let g = Var::from_tensor(&x).unwrap().as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step(&store, &g, |_| true).unwrap();
        assert_eq!(opt.current_lr(), 0.25);
    }
}
