use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MdtConfig;
use super::mask::{apply_mask, gather_unmasked, MaskPlan};
use crate::checkpoint::{self, Container};
use crate::conditions::{embed_time, fuse, CondBatch, DataDims, FusionParams, FusionWidths};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_encoding, Linear, ParamStore, TransformerBlock};

/// Running totals of attention-score entries computed per stage.
#[derive(Debug, Default)]
pub struct AttentionCounters {
    pub encoder: AtomicU64,
    pub side: AtomicU64,
    pub decoder: AtomicU64,
}

impl AttentionCounters {
    pub fn reset(&self) {
        for c in [&self.encoder, &self.side, &self.decoder] {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// `(encoder, side, decoder)` totals.
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.encoder.load(Ordering::Relaxed),
            self.side.load(Ordering::Relaxed),
            self.decoder.load(Ordering::Relaxed),
        )
    }
}

#[derive(Debug, Clone)]
pub struct MdtModel {
    pub config: MdtConfig,
    pub dims: DataDims,
    pub num_steps: usize,
    store: ParamStore,
    fusion: FusionParams,
    encoder: Vec<TransformerBlock>,
    side: Vec<TransformerBlock>,
    decoder: Vec<TransformerBlock>,
    mask_token: Tensor,
    head: Linear,
    counters: Arc<AttentionCounters>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::config(format!("dtype: unsupported {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::config(format!("dtype: unsupported {s:?}"))),
    }
}

impl MdtModel {
    /// Builds a freshly initialized model; the init is a pure function of `seed`.
    pub fn new(config: MdtConfig, dims: DataDims, num_steps: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate_structure()?;
        dtype_name(dtype)?;
        if num_steps == 0 {
            return Err(Error::config("num_steps must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device);
        let d = config.width;
        let widths = FusionWidths::for_model_width(d)?;
        let fusion = FusionParams::new(&mut store, dims, widths, config.window_size, &mut rng)?;
        let mut blocks = |prefix: &str, count: usize, store: &mut ParamStore| -> Result<Vec<TransformerBlock>> {
            (0..count)
                .map(|i| TransformerBlock::new(store, &format!("{prefix}.{i}"), d, config.heads, &mut rng))
                .collect()
        };
        let encoder = blocks("encoder", config.encoder_depth, &mut store)?;
        let side = blocks("side", config.si_blocks, &mut store)?;
        let decoder = blocks("decoder", config.decoder_depth, &mut store)?;
        let mask_token = store.trunc_normal("mask_token", &[d], &mut rng)?;
        let head = Linear::new(&mut store, "head", d, dims.gesture, &mut rng)?;
        Ok(Self {
            config,
            dims,
            num_steps,
            store,
            fusion,
            encoder,
            side,
            decoder,
            mask_token,
            head,
            counters: Arc::new(AttentionCounters::default()),
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    pub fn counters(&self) -> &AttentionCounters {
        &self.counters
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Fused condition/gesture tokens plus frame-position encodings, (B, N, d).
    pub fn tokens(&self, x_t: &Tensor, ts: &[usize], cond: &CondBatch) -> Result<Tensor> {
        let (b, n, _) = x_t.dims3()?;
        if ts.len() != b {
            return Err(Error::shape(format!("{b} timesteps"), ts.len()));
        }
        let t_emb = embed_time(ts, self.num_steps, &self.fusion)?;
        let fused = fuse(x_t, cond, &t_emb, &self.fusion)?;
        let d = self.config.width;
        let pe: Vec<f64> = (0..n).flat_map(|f| sinusoidal_encoding(f as f64, d)).collect();
        let pe = Tensor::from_vec(pe, (n, d), x_t.device())?.to_dtype(x_t.dtype())?;
        Ok(fused.broadcast_add(&pe)?)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.forward(&h, Some(&self.counters.encoder))?;
        }
        Ok(h)
    }

    /// Restores a full-length sequence from encoder latents: latents go to
    /// unmasked slots, the shared mask token to masked slots, then the
    /// side blocks run over all `N` tokens. With the shortcut on, unmasked
    /// slots are replaced by the pre-encoder tokens `x_full`.
    pub fn side_interpolate(&self, latent: &Tensor, plans: &[MaskPlan], x_full: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x_full.dims3()?;
        let (lb, kept, ld) = latent.dims3()?;
        if lb != b || ld != d || plans.len() != b {
            return Err(Error::shape(format!("batch {b}, width {d}"), format!("latent {:?}", latent.dims())));
        }
        let mut index = Vec::with_capacity(b * n);
        for (bi, plan) in plans.iter().enumerate() {
            if plan.len() != n || plan.unmasked_indices.len() != kept {
                return Err(Error::arg("mask plan does not match the latent sequence"));
            }
            let mut next = 0;
            for &masked in &plan.mask {
                let slot = if masked {
                    kept
                } else {
                    next += 1;
                    next - 1
                };
                index.push((bi * (kept + 1) + slot) as u32);
            }
        }
        let token = self.mask_token.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let pool = Tensor::cat(&[latent, &token], 1)?.reshape((b * (kept + 1), d))?;
        let index = Tensor::from_vec(index, b * n, x_full.device())?;
        let mut h = pool.index_select(&index, 0)?.reshape((b, n, d))?;
        for block in &self.side {
            h = block.forward(&h, Some(&self.counters.side))?;
        }
        if !self.config.shortcut {
            return Ok(h);
        }
        let mask: Vec<u8> = plans.iter().flat_map(|p| p.mask.iter().map(|&m| m as u8)).collect();
        let mask = Tensor::from_vec(mask, (b, n, 1), x_full.device())?.broadcast_as((b, n, d))?;
        Ok(mask.where_cond(&h, x_full)?)
    }

    pub fn decode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.decoder {
            h = block.forward(&h, Some(&self.counters.decoder))?;
        }
        self.head.forward(&h)
    }

    /// Inference structure: every token through encoder and decoder.
    pub fn forward_full(&self, x_t: &Tensor, ts: &[usize], cond: &CondBatch) -> Result<Tensor> {
        self.decode(&self.encode(&self.tokens(x_t, ts, cond)?)?)
    }

    /// Masked training structure with freshly drawn mask plans.
    pub fn forward_masked(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        cond: &CondBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<MaskPlan>)> {
        let tokens = self.tokens(x_t, ts, cond)?;
        let (visible, plans) = apply_mask(&tokens, self.config.rho_base, self.config.wider, rng)?;
        let out = self.decode(&self.side_interpolate(&self.encode(&visible)?, &plans, &tokens)?)?;
        Ok((out, plans))
    }

    /// Masked training structure with caller-supplied plans.
    pub fn forward_masked_with_plans(&self, x_t: &Tensor, ts: &[usize], cond: &CondBatch, plans: &[MaskPlan]) -> Result<Tensor> {
        let tokens = self.tokens(x_t, ts, cond)?;
        let visible = gather_unmasked(&tokens, plans)?;
        self.decode(&self.side_interpolate(&self.encode(&visible)?, plans, &tokens)?)
    }

    /// Metadata describing this model inside a checkpoint.
    pub fn metadata(&self) -> Result<BTreeMap<String, String>> {
        let mut meta = self.config.to_kv();
        let d = &self.dims;
        for (k, v) in [
            ("gesture_dim", d.gesture),
            ("audio_dim", d.audio),
            ("text_dim", d.text),
            ("n_speakers", d.speakers),
            ("n_emotions", d.emotions),
            ("num_steps", self.num_steps),
        ] {
            meta.insert(k.into(), v.to_string());
        }
        meta.insert("dtype".into(), dtype_name(self.dtype())?.into());
        meta.insert("kind".into(), "mdt".into());
        Ok(meta)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, v)| (n.to_string(), v.as_tensor().clone())).collect()
    }

    /// Writes parameters plus optional extra tensors and metadata.
    pub fn save(&self, path: &Path, extra: &[(String, Tensor)], extra_meta: &BTreeMap<String, String>) -> Result<()> {
        let mut tensors = self.named_parameters();
        tensors.extend(extra.iter().cloned());
        let mut meta = self.metadata()?;
        meta.extend(extra_meta.iter().map(|(k, v)| (k.clone(), v.clone())));
        checkpoint::save(path, &tensors, &meta)
    }

    /// Rebuilds a model from a checkpoint, returning the raw container too.
    pub fn load(path: &Path, device: &Device) -> Result<(Self, Container)> {
        let c = checkpoint::load(path, device)?;
        Ok((Self::from_container(&c, device)?, c))
    }

    pub fn from_container(c: &Container, device: &Device) -> Result<Self> {
        if c.meta("kind")? != "mdt" {
            return Err(Error::config("checkpoint does not hold a denoiser model"));
        }
        let config = MdtConfig::from_kv(&c.metadata)?;
        let dims = DataDims {
            gesture: c.meta_parse("gesture_dim")?,
            audio: c.meta_parse("audio_dim")?,
            text: c.meta_parse("text_dim")?,
            speakers: c.meta_parse("n_speakers")?,
            emotions: c.meta_parse("n_emotions")?,
        };
        let model = Self::new(config, dims, c.meta_parse("num_steps")?, parse_dtype(c.meta("dtype")?)?, device, 0)?;
        model.store.load(&c.tensors)?;
        Ok(model)
    }
}

impl Denoiser for MdtModel {
    fn predict_x0(&self, x_t: &Tensor, ts: &[usize], cond: &CondBatch) -> Result<Tensor> {
        self.forward_full(x_t, ts, cond)
    }
}

#[cfg(test)]
mod tests;
