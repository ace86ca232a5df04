use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gesture_data::FlatGesture;
use crate::nn::{gelu, Linear, ParamStore};
use crate::training::{AdamW, AdamWConfig};

const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    /// Frames per window.
    pub window: usize,
    /// Window hop when cutting sequences into feature samples.
    pub stride: usize,
    pub feature_dim: usize,
    pub hidden: [usize; 2],
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Reconstruction MSE (on normalized windows) the training run should reach.
    pub loss_threshold: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            window: 30,
            stride: 5,
            feature_dim: 64,
            hidden: [256, 128],
            steps: 600,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            loss_threshold: 0.1,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("window", self.window),
            ("stride", self.stride),
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden[0].min(self.hidden[1])),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("extractor {name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("extractor learning_rate must be positive"));
        }
        Ok(())
    }

    fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("window", self.window.to_string()),
            ("stride", self.stride.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("hidden0", self.hidden[0].to_string()),
            ("hidden1", self.hidden[1].to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("loss_threshold", self.loss_threshold.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("extractor.{k}"), v))
        .collect()
    }

    fn from_container(c: &checkpoint::Container) -> Result<Self> {
        let p = |k: &str| format!("extractor.{k}");
        Ok(Self {
            window: c.meta_parse(&p("window"))?,
            stride: c.meta_parse(&p("stride"))?,
            feature_dim: c.meta_parse(&p("feature_dim"))?,
            hidden: [c.meta_parse(&p("hidden0"))?, c.meta_parse(&p("hidden1"))?],
            steps: c.meta_parse(&p("steps"))?,
            batch_size: c.meta_parse(&p("batch_size"))?,
            learning_rate: c.meta_parse(&p("learning_rate"))?,
            seed: c.meta_parse(&p("seed"))?,
            loss_threshold: c.meta_parse(&p("loss_threshold"))?,
        })
    }
}

/// Frozen window autoencoder whose bottleneck activations serve as gesture features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    pub input_dim: usize,
    /// Reconstruction MSE on the training windows after training.
    pub final_loss: f64,
    store: ParamStore,
    mean: Tensor,
    std: Tensor,
    encoder: [Linear; 3],
    decoder: [Linear; 3],
}

/// Cuts every sequence into windows of `window` frames with hop `stride`.
pub(crate) fn windows(set: &[FlatGesture], window: usize, stride: usize) -> Result<(Vec<f32>, usize)> {
    let dim = set.first().map(|s| s.dim).ok_or_else(|| Error::arg("empty gesture set"))?;
    let mut out = Vec::new();
    let mut count = 0;
    for s in set {
        if s.dim != dim {
            return Err(Error::shape(format!("feature width {dim}"), s.dim));
        }
        if s.frames < window {
            return Err(Error::arg(format!("sequence of {} frames is shorter than the {window}-frame window", s.frames)));
        }
        for start in (0..=s.frames - window).step_by(stride) {
            out.extend(s.values[start * dim..(start + window) * dim].iter().map(|&v| v as f32));
            count += 1;
        }
    }
    Ok((out, count))
}

impl FeatureExtractor {
    fn build(config: ExtractorConfig, input_dim: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(DType::F32, device);
        let [h1, h2] = config.hidden;
        let df = config.feature_dim;
        let encoder = [
            Linear::new(&mut store, "enc.0", input_dim, h1, &mut rng)?,
            Linear::new(&mut store, "enc.1", h1, h2, &mut rng)?,
            Linear::new(&mut store, "enc.2", h2, df, &mut rng)?,
        ];
        let decoder = [
            Linear::new(&mut store, "dec.0", df, h2, &mut rng)?,
            Linear::new(&mut store, "dec.1", h2, h1, &mut rng)?,
            Linear::new(&mut store, "dec.2", h1, input_dim, &mut rng)?,
        ];
        let mean = store.zeros("norm.mean", &[input_dim])?;
        let std = store.ones("norm.std", &[input_dim])?;
        Ok(Self { config, input_dim, final_loss: f64::NAN, store, mean, std, encoder, decoder })
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    fn encode_normalized(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.encoder[0].forward(x)?)?;
        let h = gelu(&self.encoder[1].forward(&h)?)?;
        self.encoder[2].forward(&h)
    }

    fn reconstruct_normalized(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode_normalized(x)?;
        let h = gelu(&self.decoder[0].forward(&z)?)?;
        let h = gelu(&self.decoder[1].forward(&h)?)?;
        self.decoder[2].forward(&h)
    }

    /// Mean squared reconstruction error of `windows` (n, input_dim) in normalized units.
    pub fn reconstruction_mse(&self, windows: &Tensor) -> Result<f64> {
        let x = self.normalize(windows)?;
        let r = self.reconstruct_normalized(&x)?;
        Ok((r - x)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    fn window_tensor(&self, set: &[FlatGesture]) -> Result<Tensor> {
        let (data, n) = windows(set, self.config.window, self.config.stride)?;
        if n > 0 && data.len() / n != self.input_dim {
            return Err(Error::shape(format!("window width {}", self.input_dim), data.len() / n));
        }
        Ok(Tensor::from_vec(data, (n, self.input_dim), self.store.device())?)
    }

    /// Features of raw windows (n, window · dim).
    pub fn features(&self, windows: &Tensor) -> Result<Vec<Vec<f64>>> {
        let z = self.encode_normalized(&self.normalize(windows)?)?;
        Ok(z.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Features of every window of every sequence in `set`.
    pub fn features_of_set(&self, set: &[FlatGesture]) -> Result<Vec<Vec<f64>>> {
        self.features(&self.window_tensor(set)?)
    }

    /// SHA-256 over configuration, parameter names, shapes and values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in self.config.to_kv() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.update(self.input_dim.to_le_bytes());
        for (name, var) in self.store.iter() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Trains the autoencoder on windows cut from `data`, then freezes it.
    pub fn train(data: &[FlatGesture], config: ExtractorConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let (raw, n) = windows(data, config.window, config.stride)?;
        if n < 16 {
            return Err(Error::arg(format!("extractor training needs at least 16 windows, got {n}")));
        }
        let input_dim = raw.len() / n;
        let mut ex = Self::build(config, input_dim, device)?;
        let all = Tensor::from_vec(raw, (n, input_dim), device)?;
        let mean = all.mean_keepdim(0)?.squeeze(0)?;
        let var = all.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?.squeeze(0)?;
        let std = var.sqrt()?.maximum(STD_FLOOR)?;
        ex.store.set("norm.mean", &mean)?;
        ex.store.set("norm.std", &std)?;

        let normalized = ex.normalize(&all)?;
        let opt_cfg = AdamWConfig { learning_rate: ex.config.learning_rate, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(opt_cfg, &ex.store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ex.config.seed);
        let batch = ex.config.batch_size.min(n);
        for _ in 0..ex.config.steps {
            let idx: Vec<u32> = sample_indices(&mut rng, n, batch).into_iter().map(|i| i as u32).collect();
            let idx = Tensor::from_vec(idx, batch, device)?;
            let x = normalized.index_select(&idx, 0)?;
            let loss = (ex.reconstruct_normalized(&x)? - &x)?.sqr()?.mean(D::Minus1)?.mean_all()?;
            let mut grads = loss.backward()?;
            for name in ["norm.mean", "norm.std"] {
                if let Some(v) = ex.store.get(name) {
                    grads.remove(v.as_tensor());
                }
            }
            opt.step(&ex.store, &grads)?;
        }
        ex.final_loss = ex.reconstruction_mse(&all)?;
        log::info!("feature extractor trained on {n} windows; reconstruction MSE {:.5}", ex.final_loss);
        if ex.final_loss > ex.config.loss_threshold {
            log::warn!(
                "feature extractor reconstruction MSE {:.4} is above the threshold {:.4}",
                ex.final_loss,
                ex.config.loss_threshold
            );
        }
        Ok(ex)
    }

    pub fn threshold_met(&self) -> bool {
        self.final_loss <= self.config.loss_threshold
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.config.to_kv();
        meta.insert("kind".into(), "extractor".into());
        meta.insert("input_dim".into(), self.input_dim.to_string());
        meta.insert("final_loss".into(), format!("{:?}", self.final_loss));
        meta.insert("checksum".into(), self.checksum()?);
        let tensors: Vec<(String, Tensor)> = self.store.iter().map(|(n, v)| (n.to_string(), v.as_tensor().clone())).collect();
        checkpoint::save(path, &tensors, &meta)
    }

    /// Loads an extractor and verifies its stored checksum.
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let c = checkpoint::load(path, device)?;
        if c.meta("kind")? != "extractor" {
            return Err(Error::config("checkpoint does not hold a feature extractor"));
        }
        let config = ExtractorConfig::from_container(&c)?;
        let mut ex = Self::build(config, c.meta_parse("input_dim")?, device)?;
        ex.store.load(&c.tensors)?;
        ex.final_loss = c.meta_parse("final_loss")?;
        let sum = ex.checksum()?;
        if sum != c.meta("checksum")? {
            return Err(Error::Checkpoint { path: path.to_path_buf(), msg: "extractor checksum mismatch".into() });
        }
        Ok(ex)
    }
}
