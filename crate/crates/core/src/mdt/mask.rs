use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Width of the interval the wider ratio is drawn from: `[ρ, ρ + WIDER_SPAN)`.
pub const WIDER_SPAN: f64 = 0.2;

/// Which frame tokens of one sequence are hidden from the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// `true` marks a masked token.
    pub mask: Vec<bool>,
    /// Unmasked positions in increasing order.
    pub unmasked_indices: Vec<usize>,
    /// Fraction of tokens actually masked.
    pub rho_effective: f64,
}

impl MaskPlan {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let unmasked_indices: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let rho_effective = (mask.len() - unmasked_indices.len()) as f64 / mask.len().max(1) as f64;
        Self { mask, unmasked_indices, rho_effective }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.len() - self.unmasked_indices.len()
    }
}

/// Number of masked tokens for ratio `rho` over `n` tokens.
pub fn mask_count(rho: f64, n: usize) -> usize {
    (rho * n as f64).round() as usize
}

/// Draws one mask plan per sequence. The ratio is drawn once per call, so
/// every plan hides the same number of tokens; positions are independent.
///
/// Positions come from an in-place Fisher–Yates shuffle of `0..n` (swap
/// index `i` with `random_range(0..=i)` for `i = n-1` down to 1); the first
/// `count` entries of the shuffled order are masked.
pub fn draw_mask_plans(batch: usize, n: usize, rho_base: f64, wider: bool, rng: &mut ChaCha8Rng) -> Result<Vec<MaskPlan>> {
    if !(0.0..=0.8).contains(&rho_base) {
        return Err(Error::arg(format!("rho_base {rho_base} outside [0, 0.8]")));
    }
    if n < 2 {
        return Err(Error::arg(format!("masking needs at least 2 tokens, got {n}")));
    }
    if mask_count(rho_base, n) >= n {
        return Err(Error::arg(format!("ratio {rho_base} would mask all {n} tokens")));
    }
    let rho = if wider { rho_base + WIDER_SPAN * rng.random::<f64>() } else { rho_base };
    let count = mask_count(rho, n).min(n - 1);
    let plans = (0..batch)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut mask = vec![false; n];
            for &p in &order[..count] {
                mask[p] = true;
            }
            MaskPlan::from_mask(mask)
        })
        .collect();
    Ok(plans)
}

/// Gathers the unmasked rows of `x` (B, N, d) into (B, N̂, d).
pub fn gather_unmasked(x: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    if plans.len() != b || plans.iter().any(|p| p.len() != n) {
        return Err(Error::shape(format!("{b} plans of length {n}"), format!("{} plans", plans.len())));
    }
    let kept = plans[0].unmasked_indices.len();
    if plans.iter().any(|p| p.unmasked_indices.len() != kept) {
        return Err(Error::arg("mask plans in a batch must keep the same number of tokens"));
    }
    let idx: Vec<u32> = plans
        .iter()
        .enumerate()
        .flat_map(|(bi, p)| p.unmasked_indices.iter().map(move |&i| (bi * n + i) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, b * kept, x.device())?;
    Ok(x.reshape((b * n, d))?.index_select(&idx, 0)?.reshape((b, kept, d))?)
}

/// Masks tokens of `x_fuse` (B, N, d) and returns the visible rows with the plans.
pub fn apply_mask(x_fuse: &Tensor, rho_base: f64, wider: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<MaskPlan>)> {
    let (b, n, _) = x_fuse.dims3()?;
    let plans = draw_mask_plans(b, n, rho_base, wider, rng)?;
    Ok((gather_unmasked(x_fuse, &plans)?, plans))
}
