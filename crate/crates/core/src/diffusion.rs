//! Diffusion schedule and process math for the x0-parameterized model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::conditions::CondBatch;
use crate::error::{Error, Result};
use crate::nn::randn;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Noise schedule indexed by `t = 1..=T`; vectors are stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::arg("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::arg(format!("invalid beta range {beta_start}..{beta_end}")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Schedule::from_betas(beta)
}

impl Default for Schedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

impl Schedule {
    /// Builds a schedule from explicit β values, each in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::arg("betas must be non-empty and lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::arg(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }

    /// `beta_start` / `beta_end` entries describing a linear schedule.
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("beta_start".to_string(), format!("{:?}", self.beta[0])),
            ("beta_end".to_string(), format!("{:?}", self.beta[self.steps() - 1])),
        ])
    }

    /// Rebuilds a linear schedule from [`Schedule::to_metadata`] entries,
    /// falling back to the default β range when they are absent.
    pub fn from_metadata(meta: &BTreeMap<String, String>, steps: usize) -> Result<Self> {
        let get = |key: &str, default: f64| -> Result<f64> {
            meta.get(key)
                .map(|v| v.parse().map_err(|e| Error::config(format!("{key}: {e}"))))
                .unwrap_or(Ok(default))
        };
        make_schedule(steps, get("beta_start", DEFAULT_BETA_START)?, get("beta_end", DEFAULT_BETA_END)?)
    }

    /// Three-column decimal table `t beta alpha_bar`, one line per step.
    pub fn to_table(&self) -> String {
        let mut out = String::from("t beta alpha_bar\n");
        for t in 1..=self.steps() {
            let _ = writeln!(out, "{t} {:.17e} {:.17e}", self.beta(t), self.alpha_bar(t));
        }
        out
    }

    /// Parses a table written by [`Schedule::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let mut beta = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            if cols.len() != 3 {
                return Err(parse_err(format!("expected 3 columns, got {}", cols.len())));
            }
            let t: usize = cols[0].parse().map_err(|e| parse_err(format!("{e}")))?;
            if t != beta.len() + 1 {
                return Err(parse_err(format!("expected step {}, got {t}", beta.len() + 1)));
            }
            beta.push(cols[1].parse::<f64>().map_err(|e| parse_err(format!("{e}")))?);
        }
        Self::from_betas(beta)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// Forward noising `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &Schedule) -> Result<Tensor> {
    schedule.check(t)?;
    check_same_shape(x0, eps)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Batched forward noising of `x0` (B, …) with one timestep per batch element.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &Schedule) -> Result<Tensor> {
    check_same_shape(x0, eps)?;
    let b = x0.dims().first().copied().unwrap_or(0);
    if ts.len() != b {
        return Err(Error::shape(format!("{b} timesteps"), ts.len()));
    }
    for &t in ts {
        schedule.check(t)?;
    }
    let mut coef_shape = vec![1; x0.rank()];
    coef_shape[0] = b;
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ts.iter().map(|&t| f(schedule.alpha_bar(t))).collect();
        Ok(Tensor::from_vec(v, coef_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
    };
    let signal = x0.broadcast_mul(&coef(&|ab| ab.sqrt())?)?;
    let noise = eps.broadcast_mul(&coef(&|ab| (1.0 - ab).sqrt())?)?;
    Ok((signal + noise)?)
}

/// Noise recovered from `x_t` and an x0 estimate.
pub fn eps_from_x0(x_t: &Tensor, x0: &Tensor, t: usize, schedule: &Schedule) -> Result<Tensor> {
    schedule.check(t)?;
    check_same_shape(x_t, x0)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x_t - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
}

/// Posterior mean of `x_{t−1}` given `x_t` and the x0 estimate.
pub fn posterior_mean(x_t: &Tensor, x0_hat: &Tensor, t: usize, schedule: &Schedule) -> Result<Tensor> {
    check_same_shape(x_t, x0_hat)?;
    let (c0, ct) = schedule.posterior_coefficients(t)?;
    Ok(((x0_hat * c0)? + (x_t * ct)?)?)
}

/// One reverse transition with variance `β_t`; no noise is added at `t = 1`.
pub fn posterior_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, x0_hat, t, schedule)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = randn(rng, x_t.dims(), x_t.dtype(), x_t.device())?;
    Ok((mean + (z * schedule.beta(t).sqrt())?)?)
}

/// A network reconstructing the clean sequence from a noised one.
pub trait Denoiser {
    /// `x_t` is (B, F, D) and `ts` holds one timestep per batch element.
    fn predict_x0(&self, x_t: &Tensor, ts: &[usize], cond: &CondBatch) -> Result<Tensor>;
}

/// Calls the denoiser and enforces that the estimate matches `x_t`'s shape.
pub fn predict_x0<D: Denoiser + ?Sized>(denoiser: &D, x_t: &Tensor, ts: &[usize], cond: &CondBatch) -> Result<Tensor> {
    let out = denoiser.predict_x0(x_t, ts, cond)?;
    check_same_shape(x_t, &out)?;
    Ok(out)
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn predict_x0(&self, x_t: &Tensor, _ts: &[usize], _cond: &CondBatch) -> Result<Tensor> {
        Ok(x_t.clone())
    }
}

/// Always predicts zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_x0(&self, x_t: &Tensor, _ts: &[usize], _cond: &CondBatch) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}
