use super::*;
use crate::conditions::ConditionBundle;
use crate::gesture_data::FlatGesture;
use crate::mdt::{make_variant, InputMode};
use crate::nn::randn;
use rand::Rng;

const DIMS: DataDims = DataDims { gesture: 12, audio: 4, text: 3, speakers: 2, emotions: 2 };

fn xs() -> MdtConfig {
    make_variant("XS").unwrap()
}

fn model(config: MdtConfig, seed: u64) -> MdtModel {
    MdtModel::new(config, DIMS, 100, DType::F64, &Device::Cpu, seed).unwrap()
}

fn cond(batch: usize, frames: usize, seed: u64) -> CondBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundles: Vec<ConditionBundle> = (0..batch)
        .map(|b| {
            let mut mat = |c: usize| FlatGesture::new(frames, c, (0..frames * c).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
            let (audio, text) = (mat(DIMS.audio), mat(DIMS.text));
            let mut speaker = vec![0.0; DIMS.speakers];
            speaker[b % DIMS.speakers] = 1.0;
            ConditionBundle::new(audio, text, speaker, vec![1.0, 0.0]).unwrap()
        })
        .collect();
    CondBatch::from_bundles(&bundles.iter().collect::<Vec<_>>(), DType::F64, &Device::Cpu).unwrap()
}

fn noise(shape: &[usize], seed: u64) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape, DType::F64, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.squeeze(0).unwrap().to_vec2::<f64>().unwrap()
}

// Straight-line reference implementation over plain vectors.
mod naive {
    use super::*;

    pub fn param(m: &MdtModel, name: &str) -> Tensor {
        m.store().get(name).unwrap_or_else(|| panic!("{name}")).as_tensor().clone()
    }

    pub fn linear(m: &MdtModel, name: &str, x: &[f64]) -> Vec<f64> {
        let w = param(m, &format!("{name}.weight")).to_vec2::<f64>().unwrap();
        let b = param(m, &format!("{name}.bias")).to_vec1::<f64>().unwrap();
        (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| x[i] * w[i][o]).sum::<f64>()).collect()
    }

    pub fn layer_norm(m: &MdtModel, name: &str, x: &[f64]) -> Vec<f64> {
        let g = param(m, &format!("{name}.gamma")).to_vec1::<f64>().unwrap();
        let b = param(m, &format!("{name}.beta")).to_vec1::<f64>().unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (0..x.len()).map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
        let n = q.len();
        let dh = q[0].len();
        (0..n)
            .map(|i| {
                let js: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
                let s: Vec<f64> = js.iter().map(|&j| (0..dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                let mut out = vec![0.0; v[0].len()];
                for (a, &j) in js.iter().enumerate() {
                    let p = (s[a] - mx).exp() / z;
                    for c in 0..out.len() {
                        out[c] += p * v[j][c];
                    }
                }
                out
            })
            .collect()
    }

    pub fn block(m: &MdtModel, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = x[0].len();
        let h = m.config.heads;
        let dh = d / h;
        let normed: Vec<_> = x.iter().map(|r| layer_norm(m, &format!("{name}.norm1"), r)).collect();
        let qkv: Vec<_> = normed.iter().map(|r| linear(m, &format!("{name}.attn.qkv"), r)).collect();
        let mut ctx = vec![vec![0.0; d]; x.len()];
        for head in 0..h {
            let part = |k: usize| -> Vec<Vec<f64>> { qkv.iter().map(|r| r[k * d + head * dh..k * d + (head + 1) * dh].to_vec()).collect() };
            let out = attention(&part(0), &part(1), &part(2), |_, _| true);
            for (i, r) in out.iter().enumerate() {
                ctx[i][head * dh..(head + 1) * dh].copy_from_slice(r);
            }
        }
        x.iter()
            .zip(&ctx)
            .map(|(xi, ci)| {
                let a = linear(m, &format!("{name}.attn.out"), ci);
                let y: Vec<f64> = xi.iter().zip(&a).map(|(p, q)| p + q).collect();
                let hid: Vec<f64> = linear(m, &format!("{name}.mlp.fc1"), &layer_norm(m, &format!("{name}.norm2"), &y)).into_iter().map(gelu).collect();
                let o = linear(m, &format!("{name}.mlp.fc2"), &hid);
                y.iter().zip(&o).map(|(p, q)| p + q).collect()
            })
            .collect()
    }

    /// Inference forward for a single sequence.
    pub fn forward(m: &MdtModel, x_t: &[Vec<f64>], t: usize, audio: &[Vec<f64>], text: &[Vec<f64>], spk: &[f64], emo: &[f64]) -> Vec<Vec<f64>> {
        let tw = m.fusion.time_width();
        let pe_t = sinusoidal_encoding(t as f64, tw);
        let hidden: Vec<f64> = linear(m, "fusion.time.fc1", &pe_t).into_iter().map(|v| v / (1.0 + (-v).exp())).collect();
        let t_hat: Vec<f64> = pe_t.iter().zip(linear(m, "fusion.time.fc2", &hidden)).map(|(a, b)| a + b).collect();
        let add = |a: Vec<f64>, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let s = add(linear(m, "fusion.speaker", spk), &t_hat);
        let e = add(linear(m, "fusion.emotion", emo), &t_hat);
        let concat: Vec<Vec<f64>> = (0..x_t.len())
            .map(|f| {
                let mut r = linear(m, "fusion.gesture", &x_t[f]);
                r.extend(&s);
                r.extend(&e);
                r.extend(linear(m, "fusion.text", &text[f]));
                r.extend(linear(m, "fusion.audio", &audio[f]));
                r
            })
            .collect();
        let w = m.config.window_size;
        let q: Vec<_> = concat.iter().map(|r| linear(m, "fusion.attn.query", r)).collect();
        let k: Vec<_> = concat.iter().map(|r| linear(m, "fusion.attn.key", r)).collect();
        let v: Vec<_> = concat.iter().map(|r| linear(m, "fusion.attn.value", r)).collect();
        let fused = attention(&q, &k, &v, |i, j| i / w == j / w);
        let d = m.config.width;
        let mut x: Vec<Vec<f64>> = fused
            .iter()
            .enumerate()
            .map(|(f, r)| add(linear(m, "fusion.attn.out", r), &sinusoidal_encoding(f as f64, d)))
            .collect();
        for i in 0..m.config.encoder_depth {
            x = block(m, &format!("encoder.{i}"), &x);
        }
        for i in 0..m.config.decoder_depth {
            x = block(m, &format!("decoder.{i}"), &x);
        }
        x.iter().map(|r| linear(m, "head", r)).collect()
    }
}

#[test]
fn inference_matches_naive_reference() {
    let mut cfg = xs();
    cfg.window_size = 2;
    let m = model(cfg, 7);
    let c = cond(1, 4, 1);
    let x_t = noise(&[1, 4, DIMS.gesture], 2);
    let got = rows(&m.forward_full(&x_t, &[17], &c).unwrap());
    let expected = naive::forward(
        &m,
        &rows(&x_t),
        17,
        &rows(&c.audio),
        &rows(&c.text),
        &c.speaker.squeeze(0).unwrap().to_vec1::<f64>().unwrap(),
        &c.emotion.squeeze(0).unwrap().to_vec1::<f64>().unwrap(),
    );
    for (g, e) in got.iter().zip(&expected) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_depth_encoder_is_identity() {
    let mut cfg = xs();
    cfg.encoder_depth = 0;
    let m = model(cfg, 0);
    let x = noise(&[2, 5, 64], 1);
    assert_eq!(max_abs_diff(&m.encode(&x).unwrap(), &x), 0.0);
}

#[test]
fn single_token_encoder_matches_dense_oracle() {
    let mut cfg = xs();
    cfg.encoder_depth = 1;
    let m = model(cfg, 3);
    let x = noise(&[1, 1, 64], 4);
    let got = rows(&m.encode(&x).unwrap());
    let expected = naive::block(&m, "encoder.0", &rows(&x));
    for (a, b) in got[0].iter().zip(&expected[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let m = model(xs(), 5);
    let x = noise(&[1, 6, 64], 6);
    let perm = [3u32, 0, 5, 1, 4, 2];
    let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
    let a = m.encode(&x.index_select(&idx, 1).unwrap()).unwrap();
    let b = m.encode(&x).unwrap().index_select(&idx, 1).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn empty_mask_side_interpolation_is_pure_shortcut() {
    let m = model(xs(), 8);
    let x = noise(&[2, 5, 64], 9);
    let latent = noise(&[2, 5, 64], 10);
    let plans = vec![MaskPlan::from_mask(vec![false; 5]); 2];
    let out = m.side_interpolate(&latent, &plans, &x).unwrap();
    assert_eq!(out.to_vec3::<f64>().unwrap(), x.to_vec3::<f64>().unwrap());
}

fn side_oracle(m: &MdtModel, latent: &Tensor, plan: &MaskPlan) -> Vec<Vec<f64>> {
    let lat = rows(latent);
    let token = naive::param(m, "mask_token").to_vec1::<f64>().unwrap();
    let mut next = 0;
    let mut seq = Vec::new();
    for &masked in &plan.mask {
        if masked {
            seq.push(token.clone());
        } else {
            seq.push(lat[next].clone());
            next += 1;
        }
    }
    for i in 0..m.config.si_blocks {
        seq = naive::block(m, &format!("side.{i}"), &seq);
    }
    seq
}

#[test]
fn full_mask_side_interpolation_is_interpolator_output() {
    let m = model(xs(), 11);
    let x = noise(&[1, 4, 64], 12);
    let latent = Tensor::zeros((1, 0, 64), DType::F64, &Device::Cpu).unwrap();
    let plan = MaskPlan::from_mask(vec![true; 4]);
    let out = rows(&m.side_interpolate(&latent, std::slice::from_ref(&plan), &x).unwrap());
    let expected = side_oracle(&m, &latent, &plan);
    for (g, e) in out.iter().zip(&expected) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn partial_mask_combines_shortcut_and_interpolator() {
    let m = model(xs(), 13);
    let x = noise(&[1, 4, 64], 14);
    let latent = noise(&[1, 2, 64], 15);
    let plan = MaskPlan::from_mask(vec![false, true, false, true]);
    let out = rows(&m.side_interpolate(&latent, std::slice::from_ref(&plan), &x).unwrap());
    let input = rows(&x);
    let sa = side_oracle(&m, &latent, &plan);
    assert_eq!(out[0], input[0]);
    assert_eq!(out[2], input[2]);
    for r in [1, 3] {
        for (a, b) in out[r].iter().zip(&sa[r]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn disabled_shortcut_routes_everything_through_interpolator() {
    let mut cfg = xs();
    cfg.shortcut = false;
    let m = model(cfg, 13);
    let x = noise(&[1, 4, 64], 14);
    let latent = noise(&[1, 2, 64], 15);
    let plan = MaskPlan::from_mask(vec![false, true, false, true]);
    let out = rows(&m.side_interpolate(&latent, std::slice::from_ref(&plan), &x).unwrap());
    let sa = side_oracle(&m, &latent, &plan);
    for (g, e) in out.iter().zip(&sa) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_head_gives_zero_output() {
    let m = model(xs(), 16);
    m.store().set("head.weight", &Tensor::zeros((64, DIMS.gesture), DType::F64, &Device::Cpu).unwrap()).unwrap();
    let out = m.decode(&noise(&[1, 6, 64], 17)).unwrap();
    assert_eq!(out.dims(), &[1, 6, DIMS.gesture]);
    assert_eq!(out.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap(), 0.0);
}

#[test]
fn zero_ratio_masked_path_decodes_pre_encoder_tokens() {
    let mut cfg = xs();
    cfg.rho_base = 0.0;
    cfg.wider = false;
    let m = model(cfg, 18);
    let c = cond(2, 6, 3);
    let x_t = noise(&[2, 6, DIMS.gesture], 19);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (masked, plans) = m.forward_masked(&x_t, &[5, 9], &c, &mut rng).unwrap();
    assert!(plans.iter().all(|p| p.masked_count() == 0));
    let direct = m.decode(&m.tokens(&x_t, &[5, 9], &c).unwrap()).unwrap();
    assert_eq!(max_abs_diff(&masked, &direct), 0.0);
}

#[test]
fn encoder_attention_cost_scales_with_visible_tokens() {
    let cfg = xs();
    let (heads, depth) = (cfg.heads as u64, cfg.encoder_depth as u64);
    let m = model(cfg, 20);
    let c = cond(2, 10, 4);
    let x_t = noise(&[2, 10, DIMS.gesture], 21);
    m.counters().reset();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, plans) = m.forward_masked(&x_t, &[3, 4], &c, &mut rng).unwrap();
    let kept = plans[0].unmasked_indices.len() as u64;
    assert!(kept < 10);
    let (enc, side, dec) = m.counters().snapshot();
    assert_eq!(enc, 2 * heads * kept * kept * depth);
    assert_eq!(side, 2 * heads * 100);
    assert_eq!(dec, 2 * heads * 100);
    m.counters().reset();
    m.forward_full(&x_t, &[3, 4], &c).unwrap();
    assert_eq!(m.counters().snapshot().0, 2 * heads * 100 * depth);
}

#[test]
fn parameter_count_grows_with_variant() {
    let xs = model(make_variant("XS").unwrap(), 0).parameter_count();
    let s = model(make_variant("S").unwrap(), 0).parameter_count();
    assert!(xs < s);
    assert_eq!(model(make_variant("XS").unwrap(), 1).parameter_count(), xs);
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = make_variant("B").unwrap();
    let c = cond(1, 8, 5);
    let x_t = noise(&[1, 8, DIMS.gesture], 22);
    let a = model(cfg.clone(), 42).forward_full(&x_t, &[50], &c).unwrap();
    let b = model(cfg.clone(), 42).forward_full(&x_t, &[50], &c).unwrap();
    let other = model(cfg, 43).forward_full(&x_t, &[50], &c).unwrap();
    assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
    assert!(max_abs_diff(&a, &other) > 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = xs();
    cfg.input_mode = InputMode::Full;
    let m = model(cfg, 23);
    let path = dir.path().join("m.safetensors");
    m.save(&path, &[], &BTreeMap::new()).unwrap();
    let (back, _) = MdtModel::load(&path, &Device::Cpu).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.dims, m.dims);
    let c = cond(1, 5, 6);
    let x_t = noise(&[1, 5, DIMS.gesture], 24);
    let a = m.forward_full(&x_t, &[7], &c).unwrap();
    let b = back.forward_full(&x_t, &[7], &c).unwrap();
    assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
}

#[test]
fn timestep_count_must_match_batch() {
    let m = model(xs(), 0);
    let c = cond(2, 4, 0);
    let x_t = noise(&[2, 4, DIMS.gesture], 0);
    assert!(m.forward_full(&x_t, &[1], &c).is_err());
}
