//! Minimal functional layers over candle tensors.
//!
//! Layers only carry parameter *names* and shapes. Parameter values live in a
//! [`Params`] store that is passed to every forward call, so the same network
//! can be evaluated with live training weights or with an EMA snapshot, and a
//! network can be described (and its parameters counted) without allocating
//! any weights.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Parameter initialiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated-normal variance scaling with scale 1 over `fan_in`.
    LecunNormal { fan_in: usize },
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn count_params(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}

/// Named parameter store.
#[derive(Debug, Clone)]
pub struct Params {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl Params {
    pub fn init(specs: &[ParamSpec], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars = BTreeMap::new();
        for spec in specs {
            let n = spec.numel();
            let values: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::LecunNormal { fan_in } => {
                    // Undo the variance lost by truncating at two standard deviations.
                    let std = (1.0 / fan_in as f64).sqrt() / 0.879_625_661_034_239_8;
                    (0..n).map(|_| truncated_normal(&mut rng) * std).collect()
                }
                Init::Normal { std } => (0..n)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x * std
                    })
                    .collect(),
            };
            let t = Tensor::from_vec(values, spec.shape.as_slice(), device)?.to_dtype(dtype)?;
            if vars.insert(spec.name.clone(), Var::from_tensor(&t)?).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter name {}",
                    spec.name
                )));
            }
        }
        Ok(Self {
            vars,
            dtype,
            device: device.clone(),
        })
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        let vars = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t.to_dtype(dtype)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype,
            device: device.clone(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Deep copy with fresh, independent variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Detached gradient for every parameter; parameters outside the graph
    /// get zeros.
    pub fn gradients(&self, grads: &GradStore) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = match grads.get(v.as_tensor()) {
                    Some(g) => g.detach(),
                    None => v.as_tensor().zeros_like()?,
                };
                Ok((k.clone(), g))
            })
            .collect()
    }

    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        var.set(value)?;
        Ok(())
    }
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        let m = params
            .iter()
            .map(|(k, v)| Ok((k.clone(), zeros(v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let v = m.clone();
        Ok(Self {
            config,
            step: 0,
            m,
            v,
        })
    }

    pub fn update(&mut self, params: &Params, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {name}")))?;
            let m = self.m.get_mut(name).expect("moments match params");
            *m = (m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?.detach();
            let v = self.v.get_mut(name).expect("moments match params");
            *v = (v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?.detach();
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let v_hat = v.affine(1.0 / bc2, 0.0)?;
            let mut step = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let p = var.as_tensor();
            if weight_decay != 0.0 {
                step = (step + p.affine(weight_decay, 0.0)?)?;
            }
            var.set(&(p - step.affine(lr, 0.0)?)?)?;
        }
        Ok(())
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Softplus, `log(1 + exp(x))`, computed stably.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + log(1 + exp(-|x|))
    let relu = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((relu + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Dropout with host-generated masks so runs are reproducible from a seed.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let rng = match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => rng,
            _ => return Ok(x.clone()),
        };
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { scale as f32 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Fully connected layer with kernel `(in, out)` and bias `(out)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub kernel: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
    zero_init: bool,
}

impl Dense {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kernel: format!("{prefix}.kernel"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
            zero_init: false,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::LecunNormal { fan_in: self.in_dim }
        };
        out.push(ParamSpec {
            name: self.kernel.clone(),
            shape: vec![self.in_dim, self.out_dim],
            init,
        });
        out.push(ParamSpec {
            name: self.bias.clone(),
            shape: vec![self.out_dim],
            init: Init::Zeros,
        });
    }

    /// Applies over the last axis of `x`.
    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::ShapeMismatch("scalar input to dense".into()))?;
        if last != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected last dim {}, got {last}",
                self.kernel, self.in_dim
            )));
        }
        let rows = x.elem_count() / last;
        let y = x
            .reshape((rows, last))?
            .matmul(p.get(&self.kernel)?)?
            .broadcast_add(p.get(&self.bias)?)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }

    /// Applies over the channel axis of an `(N, C, H, W)` map.
    pub fn forward_channels(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} channels, got {c}",
                self.kernel, self.in_dim
            )));
        }
        let k = p.get(&self.kernel)?.t()?;
        let y = k
            .broadcast_matmul(&x.reshape((n, c, h * w))?)?
            .broadcast_add(&p.get(&self.bias)?.reshape((self.out_dim, 1))?)?;
        Ok(y.reshape((n, self.out_dim, h, w))?)
    }
}

/// 3×3 convolution with SAME padding, kernel stored as `(out, 3, 3, in)`.
///
/// Implemented as an explicit im2col followed by one matrix product, which
/// keeps the backward pass on the fast matmul path.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    kernel: String,
    bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    zero_init: bool,
}

impl Conv3x3 {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kernel: format!("{prefix}.kernel"),
            bias: format!("{prefix}.bias"),
            in_ch,
            out_ch,
            stride: 1,
            zero_init: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::LecunNormal { fan_in: 9 * self.in_ch }
        };
        out.push(ParamSpec {
            name: self.kernel.clone(),
            shape: vec![self.out_ch, 3, 3, self.in_ch],
            init,
        });
        out.push(ParamSpec {
            name: self.bias.clone(),
            shape: vec![self.out_ch],
            init: Init::Zeros,
        });
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} channels, got {c}",
                self.kernel, self.in_ch
            )));
        }
        let s = self.stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}: {h}x{w} not divisible by stride {s}",
                self.kernel
            )));
        }
        let (oh, ow) = (h / s, w / s);
        // SAME padding: total = max((out - 1) * s + 3 - in, 0), low side gets the floor.
        let lo_h = ((oh - 1) * s + 3).saturating_sub(h) / 2;
        let lo_w = ((ow - 1) * s + 3).saturating_sub(w) / 2;
        // Extra high-side zeros so every tap can take a window of out*s rows;
        // only rows at multiples of s are kept, which stay inside SAME padding.
        let hi_h = (2 + oh * s).saturating_sub(h + lo_h);
        let hi_w = (2 + ow * s).saturating_sub(w + lo_w);
        let xp = x.pad_with_zeros(2, lo_h, hi_h)?.pad_with_zeros(3, lo_w, hi_w)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                let mut t = xp.narrow(2, dy, oh * s)?.narrow(3, dx, ow * s)?;
                if s > 1 {
                    t = t
                        .reshape((n, c, oh, s, ow, s))?
                        .narrow(3, 0, 1)?
                        .narrow(5, 0, 1)?
                        .reshape((n, c, oh, ow))?;
                }
                taps.push(t);
            }
        }
        let cols = Tensor::cat(&taps, 1)?.reshape((n, 9 * c, oh * ow))?;
        let k = p.get(&self.kernel)?;
        // (out, 3, 3, in) -> (out, tap, in) -> (out, in·tap) ordering must match cols = (tap, c).
        let k = k.reshape((self.out_ch, 9 * c))?;
        let y = k
            .broadcast_matmul(&cols)?
            .broadcast_add(&p.get(&self.bias)?.reshape((self.out_ch, 1))?)?;
        Ok(y.reshape((n, self.out_ch, oh, ow))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    scale: String,
    bias: String,
    pub channels: usize,
    pub groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(prefix: &str, channels: usize, groups: usize) -> Self {
        Self {
            scale: format!("{prefix}.scale"),
            bias: format!("{prefix}.bias"),
            channels,
            groups,
            eps: 1e-6,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec {
            name: self.scale.clone(),
            shape: vec![self.channels],
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: self.bias.clone(),
            shape: vec![self.channels],
            init: Init::Zeros,
        });
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels || c % self.groups != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}: {c} channels into {} groups (expected {})",
                self.scale, self.groups, self.channels
            )));
        }
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        let scale = p.get(&self.scale)?.reshape((1, c, 1, 1))?;
        let bias = p.get(&self.bias)?.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&bias)?)
    }
}
