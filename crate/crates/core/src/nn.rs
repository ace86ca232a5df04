//! Small neural-network building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] as named [`Var`]s. Layers hold tensor
//! handles that share storage and identity with those vars, so optimizer
//! updates through `Var::set` are visible to every layer and gradients can
//! be looked up by var.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Bound on exponent arguments so that `e^a` and its square stay finite in f32.
const EXP_ARG_LIMIT: f64 = 40.0;

/// Additive mask value for disallowed attention positions.
const MASKED_SCORE: f64 = -1e30;

/// Samples a standard normal tensor from a seeded generator.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Ordered collection of named trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self { dtype, device: device.clone(), params: Vec::new(), index: HashMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let data = trunc_normal(rng, shape.iter().product(), INIT_STD);
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, DType::F64, &self.device)?;
        self.insert(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, DType::F64, &self.device)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place, keeping its identity.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.get(name).ok_or_else(|| Error::arg(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!("{name} {:?}", var.dims()), format!("{:?}", value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Copies all parameter values from `tensors`; every name must be present.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, _) in self.iter() {
            let t = tensors.get(name).ok_or_else(|| Error::arg(format!("missing parameter {name}")))?;
            self.set(name, t)?;
        }
        Ok(())
    }

    /// Detached copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.iter().map(|(n, v)| Ok((n.to_string(), v.as_tensor().copy()?))).collect()
    }
}

/// `y = x W + b` with `W` stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weight = store.trunc_normal(&format!("{name}.weight"), &[input, output], rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[output])?;
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies the layer over the last axis of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::shape("rank >= 1", "scalar"))?;
        if last != self.input_dim() {
            return Err(Error::shape(format!("last axis {}", self.input_dim()), format!("{dims:?}")));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.output_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.gamma"), &[dim])?,
            beta: store.zeros(&format!("{name}.beta"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// tanh-approximated GELU built from differentiable primitives.
///
/// Uses `0.5 (1 + tanh z) = 1 / (1 + e^{-2z})`, which avoids the slow
/// elementwise `tanh` and `powf` kernels. The exponent is clamped so the
/// backward pass never divides infinities for large negative inputs.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = (x + ((x.sqr()? * x)? * 0.044715)?)?;
    let gate = ((inner * (-2.0 * c))?.clamp(-EXP_ARG_LIMIT, EXP_ARG_LIMIT)?.exp()? + 1.0)?;
    Ok((x / gate)?)
}

/// `x · sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok((x / (x.neg()?.clamp(-EXP_ARG_LIMIT, EXP_ARG_LIMIT)?.exp()? + 1.0)?)?)
}

/// Row-wise softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Additive (n, n) mask letting token `i` see token `j` iff `i / w == j / w`.
pub fn block_diagonal_mask(n: usize, window: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let w = window.max(1);
    let data: Vec<f64> = (0..n * n)
        .map(|k| if (k / n) / w == (k % n) / w { 0.0 } else { MASKED_SCORE })
        .collect();
    Ok(Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)?)
}

/// Sinusoidal encoding `[sin(p ω_0), cos(p ω_0), sin(p ω_1), …]` with
/// `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal_encoding(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let i = (k / 2) as f64;
            let angle = position / 10000f64.powf(2.0 * i / dim as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Multi-head scaled dot-product self-attention with fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x` is (B, N, d); `mask` an optional additive (N, N) tensor.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, counter: Option<&AtomicU64>) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, h, dh))?;
        let split = |k: usize| -> Result<Tensor> { Ok(qkv.narrow(2, k, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        if let Some(c) = counter {
            c.fetch_add((b * h * n * n) as u64, Ordering::Relaxed);
        }
        let probs = softmax_last(&scores)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&ctx)
    }
}

/// Pre-LayerNorm transformer block with a 4× GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, 4 * dim, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), 4 * dim, dim, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, counter: Option<&AtomicU64>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, None, counter)?)?;
        let hidden = gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?;
        Ok((&x + self.fc2.forward(&hidden)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encoding_entry_zero_is_sin_t() {
        for t in [1.0, 7.0, 999.0] {
            let pe = sinusoidal_encoding(t, 16);
            assert_eq!(pe[0], f64::sin(t));
            assert_eq!(pe[1], f64::cos(t));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, &[3, 5], DType::F64, &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gelu_matches_closed_form() {
        let x = Tensor::new(&[-2.0f64, -0.5, 0.0, 0.7, 3.0], &Device::Cpu).unwrap();
        let y = gelu(&x).unwrap().to_vec1::<f64>().unwrap();
        for (xi, yi) in [-2.0f64, -0.5, 0.0, 0.7, 3.0].iter().zip(y) {
            let expected = 0.5 * xi * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (xi + 0.044715 * xi.powi(3))).tanh());
            assert!((expected - yi).abs() < 1e-14);
        }
    }

    #[test]
    fn activations_have_finite_gradients_for_extreme_inputs() {
        let x = Var::new(&[-300.0f32, -60.0, -5.0, 0.0, 60.0, 300.0], &Device::Cpu).unwrap();
        for f in [gelu, silu] {
            let y = f(x.as_tensor()).unwrap();
            let g = y.sum_all().unwrap().backward().unwrap();
            let g = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
            assert!(g.iter().all(|v| v.is_finite()), "{g:?}");
            let y = y.to_vec1::<f32>().unwrap();
            assert!(y[0].abs() < 1e-6 && (y[5] - 300.0).abs() < 1e-3);
        }
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut store = ParamStore::new(DType::F32, &Device::Cpu);
        store.zeros("a", &[2]).unwrap();
        assert!(store.zeros("a", &[2]).is_err());
        assert_eq!(store.numel(), 2);
    }

    #[test]
    fn linear_handles_batched_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64, &Device::Cpu);
        let lin = Linear::new(&mut store, "l", 4, 3, &mut rng).unwrap();
        let x = randn(&mut rng, &[2, 5, 4], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 5, 3]);
        assert!(lin.forward(&x.narrow(2, 0, 3).unwrap()).is_err());
    }

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = trunc_normal(&mut rng, 10_000, INIT_STD);
        assert!(v.iter().all(|x| x.abs() <= 2.0 * INIT_STD));
    }
}
