//! Ancestral sampling and the 1:N scaling-aware accelerated sampler.
//!
//! The accelerated sampler runs the network only at anchor steps. Between
//! anchors, the previous x0 estimate is refreshed from the freshly sampled
//! `x_t` without a network call, shrinking the implied noise by `1/scale`.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::conditions::CondBatch;
use crate::diffusion::{posterior_step, predict_x0, Denoiser, Schedule};
use crate::error::{Error, Result};
use crate::gesture_data::FlatGesture;
use crate::nn::randn;

pub const DEFAULT_SKIP: usize = 20;
pub const DEFAULT_SCALE: f64 = 1.0005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Full,
    Accelerated,
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Full => "full",
            SamplerMode::Accelerated => "accel",
        })
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SamplerMode::Full),
            "accel" | "accelerated" => Ok(SamplerMode::Accelerated),
            _ => Err(Error::config(format!("mode: unknown sampler mode {s:?} (expected full or accel)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Network-free steps following each anchor.
    pub skip: usize,
    pub scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Accelerated, skip: DEFAULT_SKIP, scale: DEFAULT_SCALE }
    }
}

impl SamplerConfig {
    pub fn full() -> Self {
        Self { mode: SamplerMode::Full, ..Default::default() }
    }

    pub fn accelerated(skip: usize, scale: f64) -> Self {
        Self { mode: SamplerMode::Accelerated, skip, scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplerMode::Accelerated && self.skip == 0 {
            return Err(Error::config("N (skip) must be at least 1 in accelerated mode"));
        }
        if !(self.scale >= 1.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("scale ({}) must be finite and at least 1", self.scale)));
        }
        Ok(())
    }

    /// Short label such as `full` or `1:20`.
    pub fn label(&self) -> String {
        match self.mode {
            SamplerMode::Full => "full".into(),
            SamplerMode::Accelerated => format!("1:{}", self.skip),
        }
    }
}

/// Diagnostics of one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub network_eval_count: usize,
    pub wall_time: Duration,
    /// Frobenius norm of the x0 estimate used at each step, from `t = T` down.
    pub x0_norms: Vec<f64>,
}

/// Network-free x0 refresh: recover the noise implied by `(x_t_hat, x0_hat)`,
/// shrink it by `1/scale`, and re-solve for x0.
///
/// Evaluated in the cancelled form `x0/scale + (1 − 1/scale)·x_t/√ᾱ`, which
/// returns `x0_hat` unchanged at `scale = 1` instead of amplifying rounding
/// error by `1/√ᾱ` near `t = T`.
pub fn sas_refresh(x_t_hat: &Tensor, x0_hat: &Tensor, t: usize, scale: f64, schedule: &Schedule) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::arg(format!("timestep {t} outside [1, {}]", schedule.steps())));
    }
    if scale < 1.0 {
        return Err(Error::arg(format!("scale must be at least 1, got {scale}")));
    }
    let ab = schedule.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::arg(format!("alpha_bar at t={t} is 1; the implied noise is undefined")));
    }
    let shrunk = (x0_hat / scale)?;
    Ok((shrunk + (x_t_hat * ((1.0 - 1.0 / scale) / ab.sqrt()))?)?)
}

/// Steps (descending) at which the network runs: `T, T−(N+1), T−2(N+1), …`.
pub fn anchor_steps(steps: usize, skip: usize) -> Vec<usize> {
    (0..)
        .map(|k| steps as i64 - k * (skip as i64 + 1))
        .take_while(|&t| t >= 1)
        .map(|t| t as usize)
        .collect()
}

/// Per-step plan from `t = T` down to 1: `true` where the network runs.
pub fn step_plan(steps: usize, cfg: &SamplerConfig) -> Vec<bool> {
    match cfg.mode {
        SamplerMode::Full => vec![true; steps],
        SamplerMode::Accelerated => {
            let mut plan = vec![false; steps];
            for t in anchor_steps(steps, cfg.skip) {
                plan[steps - t] = true;
            }
            plan
        }
    }
}

fn norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)
}

/// Runs the reverse chain for a batch of condition bundles; returns the
/// final `(B, F, D)` sample.
pub fn sample_with<D: Denoiser + ?Sized>(
    model: &D,
    cond: &CondBatch,
    gesture_dim: usize,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, SampleTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let (b, f) = (cond.batch_size(), cond.frames());
    let big_t = schedule.steps();
    let plan = step_plan(big_t, cfg);
    let mut x = randn(rng, &[b, f, gesture_dim], cond.audio.dtype(), cond.audio.device())?;
    let mut x0: Option<Tensor> = None;
    let mut evals = 0;
    let mut norms = Vec::with_capacity(big_t);
    for (i, &anchor) in plan.iter().enumerate() {
        let t = big_t - i;
        let estimate = match (&x0, anchor) {
            (Some(prev), false) => sas_refresh(&x, prev, t, cfg.scale, schedule)?,
            _ => {
                evals += 1;
                // Inference only: drop the op history so the chain does not
                // keep every step's graph alive.
                predict_x0(model, &x, &vec![t; b], cond)?.detach()
            }
        };
        let n = norm(&estimate)?;
        if !n.is_finite() {
            return Err(Error::NonFinite { step: i, t, detail: "x0 estimate is not finite".into() });
        }
        norms.push(n);
        x = posterior_step(&x, &estimate, t, schedule, rng)?;
        x0 = Some(estimate);
    }
    let trace = SampleTrace { network_eval_count: evals, wall_time: start.elapsed(), x0_norms: norms };
    Ok((x, trace))
}

fn split(x: &Tensor) -> Result<Vec<FlatGesture>> {
    (0..x.dims()[0]).map(|i| FlatGesture::from_tensor(&x.get(i)?)).collect()
}

/// Standard ancestral sampling with one network evaluation per step.
pub fn sample_full<D: Denoiser + ?Sized>(
    model: &D,
    cond: &CondBatch,
    gesture_dim: usize,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FlatGesture>, SampleTrace)> {
    let (x, trace) = sample_with(model, cond, gesture_dim, schedule, &SamplerConfig::full(), rng)?;
    Ok((split(&x)?, trace))
}

/// 1:N accelerated sampling.
pub fn sample_accelerated<D: Denoiser + ?Sized>(
    model: &D,
    cond: &CondBatch,
    gesture_dim: usize,
    schedule: &Schedule,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FlatGesture>, SampleTrace)> {
    if cfg.mode != SamplerMode::Accelerated {
        return Err(Error::config("sample_accelerated needs an accelerated sampler config"));
    }
    let (x, trace) = sample_with(model, cond, gesture_dim, schedule, cfg, rng)?;
    Ok((split(&x)?, trace))
}

/// Timing summary of one sampler configuration.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub config: SamplerConfig,
    pub network_eval_count: usize,
    pub times: Vec<Duration>,
    /// Samples of the first run.
    pub samples: Vec<FlatGesture>,
}

impl BenchResult {
    fn secs(&self) -> Vec<f64> {
        self.times.iter().map(Duration::as_secs_f64).collect()
    }

    pub fn mean_secs(&self) -> f64 {
        let s = self.secs();
        s.iter().sum::<f64>() / s.len() as f64
    }

    pub fn std_secs(&self) -> f64 {
        let s = self.secs();
        if s.len() < 2 {
            return 0.0;
        }
        let m = self.mean_secs();
        (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt()
    }

    pub fn median_secs(&self) -> f64 {
        let mut s = self.secs();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }
}

/// Times each sampler configuration over `runs` runs. Every run of a
/// configuration starts from a clone of `rng`, so the samples are identical
/// across runs and only timing varies.
pub fn bench_sampler<D: Denoiser + ?Sized>(
    model: &D,
    cond: &CondBatch,
    gesture_dim: usize,
    schedule: &Schedule,
    configs: &[SamplerConfig],
    runs: usize,
    rng: &ChaCha8Rng,
) -> Result<Vec<BenchResult>> {
    if configs.len() < 2 || !configs.iter().any(|c| c.mode == SamplerMode::Full) {
        return Err(Error::config("bench needs at least two configs including full mode"));
    }
    if runs == 0 {
        return Err(Error::config("bench needs at least one run"));
    }
    configs
        .iter()
        .map(|cfg| {
            let mut times = Vec::with_capacity(runs);
            let mut first = None;
            let mut evals = 0;
            for _ in 0..runs {
                let mut r = rng.clone();
                let (x, trace) = sample_with(model, cond, gesture_dim, schedule, cfg, &mut r)?;
                times.push(trace.wall_time);
                evals = trace.network_eval_count;
                if first.is_none() {
                    first = Some(split(&x)?);
                }
            }
            Ok(BenchResult { config: *cfg, network_eval_count: evals, times, samples: first.unwrap_or_default() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, IdentityDenoiser};
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cond(b: usize, f: usize) -> CondBatch {
        let z = Tensor::zeros((b, f, 1), DType::F64, &Device::Cpu).unwrap();
        let one = Tensor::zeros((b, 1), DType::F64, &Device::Cpu).unwrap();
        CondBatch { audio: z.clone(), text: z, speaker: one.clone(), emotion: one }
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn first(t: &Tensor) -> f64 {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]
    }

    struct Oracle(Tensor);

    impl Denoiser for Oracle {
        fn predict_x0(&self, _x: &Tensor, _ts: &[usize], _c: &CondBatch) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let s = Schedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = randn(&mut rng, &[5, 3], DType::F64, &Device::Cpu).unwrap();
        let x0 = randn(&mut rng, &[5, 3], DType::F64, &Device::Cpu).unwrap();
        for t in [1, 10, 500, 1000] {
            let out = sas_refresh(&xt, &x0, t, 1.0, &s).unwrap();
            let err = (out - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-12, "t={t} err={err}");
        }
    }

    #[test]
    fn zero_implied_noise_is_fixed_point() {
        let s = Schedule::default();
        let x0 = scalar(0.7);
        let xt = (&x0 * s.alpha_bar(300).sqrt()).unwrap();
        for scale in [1.0, 1.0005, 1.5, 3.0] {
            assert!((first(&sas_refresh(&xt, &x0, 300, scale, &s).unwrap()) - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn refresh_plug_in_example() {
        // ᾱ_t = 0.25 exactly for a one-step schedule with β = 0.75.
        let s = Schedule::from_betas(vec![0.75]).unwrap();
        let got = first(&sas_refresh(&scalar(1.0), &scalar(0.5), 1, 1.0005, &s).unwrap());
        // ε̂ = (1 − 0.5·0.5)/√0.75; x0' = (1 − √0.75·ε̂/1.0005)/0.5
        let eps: f64 = 0.75 / 0.75f64.sqrt();
        let expected = (1.0 - 0.75f64.sqrt() * eps / 1.0005) / 0.5;
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!(sas_refresh(&scalar(1.0), &scalar(0.5), 1, 0.99, &s).is_err());
        assert!(sas_refresh(&scalar(1.0), &scalar(0.5), 2, 1.0, &s).is_err());
    }

    #[test]
    fn larger_scale_moves_towards_rescaled_input() {
        let s = Schedule::default();
        let (xt, x0) = (scalar(0.9), scalar(-0.4));
        let target = 0.9 / s.alpha_bar(200).sqrt();
        let mut last = (first(&x0) - target).abs();
        for scale in [1.001, 1.01, 1.1, 2.0, 10.0] {
            let d = (first(&sas_refresh(&xt, &x0, 200, scale, &s).unwrap()) - target).abs();
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn plan_examples() {
        assert_eq!(anchor_steps(10, 4), vec![10, 5]);
        assert_eq!(anchor_steps(1000, 20).len(), 48);
        assert_eq!(anchor_steps(1000, 25).len(), 39);
        assert_eq!(anchor_steps(1000, 1).len(), 500);
        assert!(SamplerConfig::accelerated(0, 1.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn plan_count_formula(t in 1usize..1000, n in 1usize..50) {
            let plan = step_plan(t, &SamplerConfig::accelerated(n, 1.0));
            prop_assert_eq!(plan.iter().filter(|&&a| a).count(), t.div_ceil(n + 1));
            prop_assert!(plan[0]);
        }
    }

    #[test]
    fn identity_denoiser_follows_closed_form_recursion() {
        let s = make_schedule(4, 0.1, 0.4).unwrap();
        let c = cond(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, trace) = sample_full(&IdentityDenoiser, &c, 3, &s, &mut rng).unwrap();
        assert_eq!(trace.network_eval_count, 4);

        let mut oracle = ChaCha8Rng::seed_from_u64(9);
        let mut x = randn(&mut oracle, &[1, 2, 3], DType::F64, &Device::Cpu).unwrap();
        for t in (1..=4).rev() {
            let (c0, ct) = s.posterior_coefficients(t).unwrap();
            let mean = (&x * (c0 + ct)).unwrap();
            x = if t > 1 {
                let z = randn(&mut oracle, &[1, 2, 3], DType::F64, &Device::Cpu).unwrap();
                (mean + (z * s.beta(t).sqrt()).unwrap()).unwrap()
            } else {
                mean
            };
        }
        let expected = x.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in out[0].values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let s = make_schedule(20, 1e-4, 0.02).unwrap();
        let c = cond(2, 3);
        let cfg = SamplerConfig::accelerated(3, 1.0005);
        let run = || sample_accelerated(&IdentityDenoiser, &c, 2, &s, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta.x0_norms, tb.x0_norms);
        assert_eq!(ta.network_eval_count, 5);
    }

    #[test]
    fn single_anchor_with_perfect_oracle_recovers_x0() {
        let s = Schedule::default();
        let x0 = Tensor::new(&[[[0.3f64, -0.2], [0.1, 0.5]]], &Device::Cpu).unwrap();
        let oracle = Oracle(x0.clone());
        let cfg = SamplerConfig::accelerated(s.steps() - 1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, trace) = sample_accelerated(&oracle, &cond(1, 2), 2, &s, &cfg, &mut rng).unwrap();
        assert_eq!(trace.network_eval_count, 1);
        // With scale 1 the refresh keeps x0 fixed, so the chain ends at the
        // posterior mean of t = 1, which is x0 itself.
        let got = &out[0].values;
        let want = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn bench_requires_full_mode() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let c = cond(1, 2);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let accel = SamplerConfig::accelerated(2, 1.0);
        assert!(bench_sampler(&IdentityDenoiser, &c, 2, &s, &[accel, accel], 2, &rng).is_err());
        let rows = bench_sampler(&IdentityDenoiser, &c, 2, &s, &[SamplerConfig::full(), accel], 3, &rng).unwrap();
        assert_eq!(rows[0].network_eval_count, 10);
        assert_eq!(rows[1].network_eval_count, 4);
        assert_eq!(rows[0].times.len(), 3);
    }
}
