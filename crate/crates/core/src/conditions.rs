//! Conditioning: condition bundles, timestep embedding, condition dropout,
//! and the composite multi-modal fusion with cross-local attention.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gesture_data::{read_matrix, FlatGesture};
use crate::nn::{block_diagonal_mask, silu, sinusoidal_encoding, softmax_last, Linear, ParamStore};

/// Per-sequence conditions: frame-aligned audio and text features plus
/// speaker and emotion one-hots (all-zero when dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub audio: FlatGesture,
    pub text: FlatGesture,
    pub speaker: Vec<f64>,
    pub emotion: Vec<f64>,
}

fn check_one_hot(name: &str, v: &[f64]) -> Result<()> {
    let ones = v.iter().filter(|&&x| x == 1.0).count();
    let zeros = v.iter().filter(|&&x| x == 0.0).count();
    if ones + zeros != v.len() || ones > 1 || v.is_empty() {
        return Err(Error::arg(format!("{name} must be a one-hot or all-zero vector")));
    }
    Ok(())
}

impl ConditionBundle {
    pub fn new(audio: FlatGesture, text: FlatGesture, speaker: Vec<f64>, emotion: Vec<f64>) -> Result<Self> {
        if audio.frames != text.frames {
            return Err(Error::shape(format!("{} text frames", audio.frames), text.frames));
        }
        check_one_hot("speaker", &speaker)?;
        check_one_hot("emotion", &emotion)?;
        Ok(Self { audio, text, speaker, emotion })
    }

    /// Loads audio/text matrices from native matrix files plus one-hot indices.
    pub fn load(
        audio_path: &Path,
        text_path: &Path,
        speaker: (usize, usize),
        emotion: (usize, usize),
    ) -> Result<Self> {
        let (audio, _) = read_matrix(&std::fs::read_to_string(audio_path)?)?;
        let (text, _) = read_matrix(&std::fs::read_to_string(text_path)?)?;
        let hot = |(i, n): (usize, usize)| -> Result<Vec<f64>> {
            if i >= n {
                return Err(Error::arg(format!("one-hot index {i} out of range {n}")));
            }
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            Ok(v)
        };
        Self::new(audio, text, hot(speaker)?, hot(emotion)?)
    }

    pub fn frames(&self) -> usize {
        self.audio.frames
    }
}

/// Independently zeroes the speaker and emotion one-hots with probability `p`.
pub fn condition_dropout(bundle: &ConditionBundle, p: f64, rng: &mut ChaCha8Rng) -> Result<ConditionBundle> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::arg(format!("dropout probability must be in [0, 1), got {p}")));
    }
    let mut out = bundle.clone();
    if rng.random::<f64>() < p {
        out.speaker.iter_mut().for_each(|v| *v = 0.0);
    }
    if rng.random::<f64>() < p {
        out.emotion.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// A batch of bundles as tensors: audio (B, F, Da), text (B, F, Dt),
/// speaker (B, S), emotion (B, E).
#[derive(Debug, Clone)]
pub struct CondBatch {
    pub audio: Tensor,
    pub text: Tensor,
    pub speaker: Tensor,
    pub emotion: Tensor,
}

impl CondBatch {
    pub fn from_bundles(bundles: &[&ConditionBundle], dtype: DType, device: &Device) -> Result<Self> {
        let first = bundles.first().ok_or_else(|| Error::arg("empty condition batch"))?;
        let (f, da, dt) = (first.frames(), first.audio.dim, first.text.dim);
        let (s, e) = (first.speaker.len(), first.emotion.len());
        for b in bundles {
            if b.frames() != f || b.audio.dim != da || b.text.dim != dt || b.speaker.len() != s || b.emotion.len() != e {
                return Err(Error::config("condition bundles in a batch must share frame count and widths"));
            }
        }
        let gather = |get: &dyn Fn(&ConditionBundle) -> &[f64]| -> Vec<f64> {
            bundles.iter().flat_map(|b| get(b).iter().copied()).collect()
        };
        let n = bundles.len();
        let t = |data: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            audio: t(gather(&|b| &b.audio.values), &[n, f, da])?,
            text: t(gather(&|b| &b.text.values), &[n, f, dt])?,
            speaker: t(gather(&|b| &b.speaker), &[n, s])?,
            emotion: t(gather(&|b| &b.emotion), &[n, e])?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.audio.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.audio.dims()[1]
    }
}

/// Widths of the embedded streams; they sum to the model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionWidths {
    pub gesture: usize,
    pub audio: usize,
    pub text: usize,
    pub speaker: usize,
    pub emotion: usize,
}

impl FusionWidths {
    /// Splits `d` as d/2, d/4, d/8, d/16, d/16 (gesture, audio, text, speaker,
    /// emotion); `d = 256` gives 128/64/32/16/16.
    pub fn for_model_width(d: usize) -> Result<Self> {
        if d == 0 || d % 16 != 0 {
            return Err(Error::config(format!("model width {d} must be a positive multiple of 16")));
        }
        Ok(Self { gesture: d / 2, audio: d / 4, text: d / 8, speaker: d / 16, emotion: d / 16 })
    }

    pub fn total(&self) -> usize {
        self.gesture + self.audio + self.text + self.speaker + self.emotion
    }
}

/// Raw input widths of the streams entering the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub gesture: usize,
    pub audio: usize,
    pub text: usize,
    pub speakers: usize,
    pub emotions: usize,
}

/// Learnable weights of the fusion stage.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub dims: DataDims,
    pub widths: FusionWidths,
    pub window_size: usize,
    pub gesture_embed: Linear,
    pub speaker_embed: Linear,
    pub emotion_embed: Linear,
    pub text_embed: Linear,
    pub audio_embed: Linear,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub attention: LocalAttention,
}

/// Single-head attention restricted to non-overlapping frame windows.
#[derive(Debug, Clone)]
pub struct LocalAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl LocalAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
        })
    }

    /// Softmax attention weights (B, F, F).
    pub fn probabilities(&self, x: &Tensor, window_size: usize) -> Result<Tensor> {
        if window_size == 0 {
            return Err(Error::arg("window_size must be at least 1"));
        }
        let (_, f, d) = x.dims3()?;
        let q = self.query.forward(x)?;
        let k = self.key.forward(x)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let mask = block_diagonal_mask(f, window_size, x.dtype(), x.device())?;
        softmax_last(&scores.broadcast_add(&mask)?)
    }

    pub fn forward(&self, x: &Tensor, window_size: usize) -> Result<Tensor> {
        let probs = self.probabilities(x, window_size)?;
        let v = self.value.forward(x)?;
        self.out.forward(&probs.matmul(&v)?)
    }
}

/// Windowed self-attention over frames of `x` (B, F, d).
pub fn cross_local_attention(x: &Tensor, window_size: usize, weights: &LocalAttention) -> Result<Tensor> {
    weights.forward(x, window_size)
}

impl FusionParams {
    pub fn new(
        store: &mut ParamStore,
        dims: DataDims,
        widths: FusionWidths,
        window_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.speaker != widths.emotion {
            return Err(Error::config("speaker and emotion widths must match the time-embedding width"));
        }
        if window_size == 0 {
            return Err(Error::config("window_size must be at least 1"));
        }
        let tw = widths.speaker;
        Ok(Self {
            dims,
            widths,
            window_size,
            gesture_embed: Linear::new(store, "fusion.gesture", dims.gesture, widths.gesture, rng)?,
            speaker_embed: Linear::new(store, "fusion.speaker", dims.speakers, widths.speaker, rng)?,
            emotion_embed: Linear::new(store, "fusion.emotion", dims.emotions, widths.emotion, rng)?,
            text_embed: Linear::new(store, "fusion.text", dims.text, widths.text, rng)?,
            audio_embed: Linear::new(store, "fusion.audio", dims.audio, widths.audio, rng)?,
            time_fc1: Linear::new(store, "fusion.time.fc1", tw, 4 * tw, rng)?,
            time_fc2: Linear::new(store, "fusion.time.fc2", 4 * tw, tw, rng)?,
            attention: LocalAttention::new(store, "fusion.attn", widths.total(), rng)?,
        })
    }

    pub fn time_width(&self) -> usize {
        self.widths.speaker
    }
}

/// Timestep features `t̂ = PE(t) + MLP(PE(t))`, one row per entry of `ts`.
///
/// The residual form means zeroed MLP output weights reduce `t̂` to the raw
/// sinusoidal encoding.
pub fn embed_time(ts: &[usize], num_steps: usize, params: &FusionParams) -> Result<Tensor> {
    if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > num_steps) {
        return Err(Error::arg(format!("timestep {bad} outside [1, {num_steps}]")));
    }
    let w = params.time_width();
    let pe: Vec<f64> = ts.iter().flat_map(|&t| sinusoidal_encoding(t as f64, w)).collect();
    let weight = &params.time_fc1.weight;
    let pe = Tensor::from_vec(pe, (ts.len(), w), weight.device())?.to_dtype(weight.dtype())?;
    let hidden = silu(&params.time_fc1.forward(&pe)?)?;
    Ok((&pe + params.time_fc2.forward(&hidden)?)?)
}

/// Pre-attention concatenation `[E_g(x_t), E_s(s)+t̂, E_e(e)+t̂, E_txt(txt), E_a(a)]`.
pub fn fuse_streams(x_t: &Tensor, cond: &CondBatch, t_emb: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let (b, f, dg) = x_t.dims3()?;
    let d = &params.dims;
    let check = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
        if got != want {
            return Err(Error::config(format!("{name} has shape {got:?}, expected {want:?}")));
        }
        Ok(())
    };
    check("x_t", &[b, f, dg], &[b, f, d.gesture])?;
    check("audio", cond.audio.dims(), &[b, f, d.audio])?;
    check("text", cond.text.dims(), &[b, f, d.text])?;
    check("speaker", cond.speaker.dims(), &[b, d.speakers])?;
    check("emotion", cond.emotion.dims(), &[b, d.emotions])?;
    check("time embedding", t_emb.dims(), &[b, params.time_width()])?;

    let per_frame = |v: Tensor| -> Result<Tensor> {
        let w = v.dims()[1];
        Ok(v.unsqueeze(1)?.broadcast_as((b, f, w))?)
    };
    let gesture = params.gesture_embed.forward(x_t)?;
    let speaker = per_frame((params.speaker_embed.forward(&cond.speaker)? + t_emb)?)?;
    let emotion = per_frame((params.emotion_embed.forward(&cond.emotion)? + t_emb)?)?;
    let text = params.text_embed.forward(&cond.text)?;
    let audio = params.audio_embed.forward(&cond.audio)?;
    Ok(Tensor::cat(&[&gesture, &speaker, &emotion, &text, &audio], 2)?)
}

/// Full fusion: concatenated streams followed by cross-local attention.
pub fn fuse(x_t: &Tensor, cond: &CondBatch, t_emb: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let concat = fuse_streams(x_t, cond, t_emb, params)?;
    params.attention.forward(&concat, params.window_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;

    const DIMS: DataDims = DataDims { gesture: 18, audio: 5, text: 3, speakers: 4, emotions: 3 };

    fn setup(dtype: DType, window: usize, seed: u64) -> (ParamStore, FusionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, &Device::Cpu);
        let widths = FusionWidths::for_model_width(32).unwrap();
        let params = FusionParams::new(&mut store, DIMS, widths, window, &mut rng).unwrap();
        (store, params)
    }

    fn bundle(frames: usize, seed: u64) -> ConditionBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |cols: usize| {
            FlatGesture::new(frames, cols, (0..frames * cols).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
        };
        let audio = mat(DIMS.audio);
        let text = mat(DIMS.text);
        ConditionBundle::new(audio, text, vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        Tensor::eye(n, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn bundle_validation() {
        let b = bundle(4, 0);
        assert!(ConditionBundle::new(b.audio.clone(), FlatGesture::zeros(3, 3), b.speaker.clone(), b.emotion.clone()).is_err());
        assert!(ConditionBundle::new(b.audio.clone(), b.text.clone(), vec![1.0, 1.0], b.emotion.clone()).is_err());
        assert!(ConditionBundle::new(b.audio.clone(), b.text.clone(), vec![0.5, 0.0], b.emotion.clone()).is_err());
        assert!(ConditionBundle::new(b.audio, b.text, vec![0.0, 0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn dropout_zero_probability_is_noop() {
        let b = bundle(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(condition_dropout(&b, 0.0, &mut rng).unwrap(), b);
        }
        assert!(condition_dropout(&b, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_near_one_drops_almost_always() {
        let b = bundle(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let both = (0..1000)
            .filter(|_| {
                let d = condition_dropout(&b, 0.999, &mut rng).unwrap();
                d.speaker.iter().all(|&v| v == 0.0) && d.emotion.iter().all(|&v| v == 0.0)
            })
            .count();
        assert!(both >= 990, "{both}");
    }

    #[test]
    fn dropout_rate_is_bernoulli() {
        let b = bundle(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 10_000;
        let (mut s, mut e) = (0, 0);
        for _ in 0..trials {
            let d = condition_dropout(&b, 0.5, &mut rng).unwrap();
            s += d.speaker.iter().all(|&v| v == 0.0) as usize;
            e += d.emotion.iter().all(|&v| v == 0.0) as usize;
            assert_eq!(d.audio, b.audio);
            assert_eq!(d.text, b.text);
        }
        for count in [s, e] {
            let rate = count as f64 / trials as f64;
            assert!((rate - 0.5).abs() <= 0.02, "{rate}");
        }
    }

    #[test]
    fn time_embedding_is_deterministic_and_checked() {
        let (_, params) = setup(DType::F64, 8, 0);
        let a = embed_time(&[1], 1000, &params).unwrap().to_vec2::<f64>().unwrap();
        let b = embed_time(&[1], 1000, &params).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert!(embed_time(&[0], 1000, &params).is_err());
        assert!(embed_time(&[1001], 1000, &params).is_err());
    }

    #[test]
    fn zeroed_time_mlp_output_gives_raw_encoding() {
        let (store, params) = setup(DType::F64, 8, 0);
        let w = params.time_width();
        store.set("fusion.time.fc2.weight", &Tensor::zeros((4 * w, w), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let got = embed_time(&[37], 1000, &params).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(got[0], sinusoidal_encoding(37.0, w));
    }

    #[test]
    fn identity_attention_returns_concatenation() {
        let (store, params) = setup(DType::F64, 1, 5);
        let d = params.widths.total();
        store.set("fusion.attn.value.weight", &identity(d)).unwrap();
        store.set("fusion.attn.out.weight", &identity(d)).unwrap();
        let bundles = [bundle(4, 2)];
        let cond = CondBatch::from_bundles(&bundles.iter().collect::<Vec<_>>(), DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_t = randn(&mut rng, &[1, 4, DIMS.gesture], DType::F64, &Device::Cpu).unwrap();
        let t_emb = embed_time(&[10], 1000, &params).unwrap();
        let concat = fuse_streams(&x_t, &cond, &t_emb, &params).unwrap();
        let fused = fuse(&x_t, &cond, &t_emb, &params).unwrap();
        let diff = (concat - fused).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-15, "{diff}");
    }

    #[test]
    fn zero_inputs_give_zero_concat() {
        let (_, params) = setup(DType::F64, 8, 5);
        let zero = ConditionBundle::new(FlatGesture::zeros(4, DIMS.audio), FlatGesture::zeros(4, DIMS.text), vec![0.0; 4], vec![0.0; 3]).unwrap();
        let cond = CondBatch::from_bundles(&[&zero], DType::F64, &Device::Cpu).unwrap();
        let x_t = Tensor::zeros((1, 4, DIMS.gesture), DType::F64, &Device::Cpu).unwrap();
        let t_emb = Tensor::zeros((1, params.time_width()), DType::F64, &Device::Cpu).unwrap();
        let concat = fuse_streams(&x_t, &cond, &t_emb, &params).unwrap();
        assert_eq!(concat.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let (_, params) = setup(DType::F64, 8, 5);
        let cond = CondBatch::from_bundles(&[&bundle(4, 0)], DType::F64, &Device::Cpu).unwrap();
        let x_t = Tensor::zeros((1, 4, DIMS.gesture + 1), DType::F64, &Device::Cpu).unwrap();
        let t_emb = embed_time(&[3], 10, &params).unwrap();
        assert!(matches!(fuse(&x_t, &cond, &t_emb, &params), Err(Error::Config(_))));
    }

    /// Dense attention with an explicit window mask, evaluated with plain loops.
    fn dense_oracle(x: &[Vec<f64>], w: &LocalAttention, window: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mat = |t: &Tensor| t.to_vec2::<f64>().unwrap();
        let vec = |t: &Tensor| t.to_vec1::<f64>().unwrap();
        let lin = |l: &Linear, row: &[f64]| -> Vec<f64> {
            let (wm, b) = (mat(&l.weight), vec(&l.bias));
            (0..b.len()).map(|o| b[o] + row.iter().enumerate().map(|(i, r)| r * wm[i][o]).sum::<f64>()).collect()
        };
        let n = x.len();
        let d = x[0].len();
        let q: Vec<_> = x.iter().map(|r| lin(&w.query, r)).collect();
        let k: Vec<_> = x.iter().map(|r| lin(&w.key, r)).collect();
        let v: Vec<_> = x.iter().map(|r| lin(&w.value, r)).collect();
        let mut probs = vec![vec![0.0; n]; n];
        let mut out = Vec::new();
        for i in 0..n {
            let allowed: Vec<usize> = (0..n).filter(|&j| i / window == j / window).collect();
            let s: Vec<f64> = allowed
                .iter()
                .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            let mut ctx = vec![0.0; d];
            for (a, &j) in allowed.iter().enumerate() {
                probs[i][j] = (s[a] - m).exp() / z;
                for c in 0..d {
                    ctx[c] += probs[i][j] * v[j][c];
                }
            }
            out.push(lin(&w.out, &ctx));
        }
        (probs, out)
    }

    #[test]
    fn windowed_attention_matches_dense_oracle() {
        for (frames, window, seed) in [(4, 2, 11u64), (6, 3, 12), (5, 8, 13), (5, 1, 14)] {
            let (_, params) = setup(DType::F64, window, seed);
            let d = params.widths.total();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, &[1, frames, d], DType::F64, &Device::Cpu).unwrap();
            let rows = x.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            let (probs, out) = dense_oracle(&rows, &params.attention, window);
            let got_p = params.attention.probabilities(&x, window).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            let got = cross_local_attention(&x, window, &params.attention).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            for i in 0..frames {
                let sum: f64 = got_p[i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for j in 0..frames {
                    assert!((got_p[i][j] - probs[i][j]).abs() < 1e-12);
                    if i / window != j / window {
                        assert_eq!(got_p[i][j], 0.0);
                    }
                }
                for c in 0..d {
                    assert!((got[i][c] - out[i][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn window_one_returns_value_projection() {
        let (_, params) = setup(DType::F64, 1, 21);
        let d = params.widths.total();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(&mut rng, &[2, 5, d], DType::F64, &Device::Cpu).unwrap();
        let got = cross_local_attention(&x, 1, &params.attention).unwrap();
        let expected = params.attention.out.forward(&params.attention.value.forward(&x).unwrap()).unwrap();
        let diff = (got - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn speaker_change_shifts_every_frame_equally() {
        let (_, params) = setup(DType::F64, 8, 31);
        let a = bundle(6, 3);
        let mut b = a.clone();
        b.speaker = vec![0.0, 0.0, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_t = randn(&mut rng, &[1, 6, DIMS.gesture], DType::F64, &Device::Cpu).unwrap();
        let t_emb = embed_time(&[5], 100, &params).unwrap();
        let ca = CondBatch::from_bundles(&[&a], DType::F64, &Device::Cpu).unwrap();
        let cb = CondBatch::from_bundles(&[&b], DType::F64, &Device::Cpu).unwrap();
        let delta = (fuse_streams(&x_t, &cb, &t_emb, &params).unwrap() - fuse_streams(&x_t, &ca, &t_emb, &params).unwrap())
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for row in &delta[1..] {
            assert_eq!(row, &delta[0]);
        }
        assert!(delta[0].iter().any(|&v| v != 0.0));
    }
}
