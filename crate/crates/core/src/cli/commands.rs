use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::dataset::{read_dataset, read_gestures, write_dataset, write_gestures, Dataset};
use super::settings::{format_kv, Settings};
use super::svg::{line_chart, Series};
use super::{
    BenchArgs, Common, EvalArgs, Failure, GenDataArgs, ModelFlags, SampleArgs, SamplerFlags, TrainArgs, UsageExt,
};
use crate::conditions::{CondBatch, ConditionBundle};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::gesture_data::{synth_dataset_with, FlatGesture, GestureSequence, SkeletonLayout, SynthConfig, SynthSample};
use crate::mdt::{make_variant, MdtModel};
use crate::metrics::{evaluate, FeatureExtractor, MetricReport};
use crate::sampling::{bench_sampler, sample_with, SamplerConfig, SamplerMode};
use crate::training::{curve_csv, data_dims, CurvePoint, TrainExample, Trainer};

pub(super) const DEFAULT_LAYOUT: &str = "generic8";

/// Reference timings (seconds) for the full-scale sampler comparison.
fn reference_secs(cfg: &SamplerConfig) -> Option<f64> {
    match (cfg.mode, cfg.skip) {
        (SamplerMode::Full, _) => Some(8.711),
        (SamplerMode::Accelerated, 20) => Some(1.984),
        (SamplerMode::Accelerated, 25) => Some(1.567),
        _ => None,
    }
}

pub(super) fn begin(common: &Common) -> std::result::Result<Settings, Failure> {
    let mut s = Settings::from_file(common.config.as_deref()).usage()?;
    s.flag("seed", &common.seed);
    Ok(s)
}

pub(super) fn finish(s: &mut Settings, common: &Common) -> std::result::Result<(), Failure> {
    s.overrides(&common.set).usage()?;
    s.check_known().usage()
}

pub(super) fn model_flags(s: &mut Settings, m: &ModelFlags) {
    s.flag("variant", &m.variant);
    s.flag("rho_base", &m.rho);
    s.flag("wider", &m.wider);
    s.flag("shortcut", &m.shortcut);
    s.flag("input_mode", &m.input_mode);
    s.flag("si_blocks", &m.si_blocks);
    s.flag("encoder_depth", &m.encoder_depth);
    s.flag("decoder_depth", &m.decoder_depth);
}

pub(super) fn sampler_flags(s: &mut Settings, f: &SamplerFlags) {
    s.flag("mode", &f.mode);
    s.flag("skip", &f.skip);
    s.flag("scale", &f.scale);
}

pub(super) fn synth_config(s: &Settings) -> Result<SynthConfig> {
    let d = SynthConfig::default();
    Ok(SynthConfig {
        n_speakers: s.get("n_speakers", d.n_speakers)?,
        n_emotions: s.get("n_emotions", d.n_emotions)?,
        audio_dim: s.get("audio_dim", d.audio_dim)?,
        text_dim: s.get("text_dim", d.text_dim)?,
        fps: s.get("fps", d.fps)?,
        lowpass_width: d.lowpass_width,
    })
}

/// Synthesizes a dataset from the `n`, `sequence_frames` and `layout` settings.
pub(super) fn synthesize(s: &Settings, n: usize, frames: usize) -> Result<Dataset> {
    let layout_name = s.get("layout", DEFAULT_LAYOUT.to_string())?;
    let layout = Arc::new(SkeletonLayout::by_name(&layout_name)?);
    let samples = synth_dataset_with(s.get("n", n)?, s.get("sequence_frames", frames)?, &layout, s.seed()?, &synth_config(s)?)?;
    Ok(Dataset { layout_name, samples })
}

pub(super) fn examples(ds: &Dataset) -> Vec<TrainExample> {
    ds.samples.iter().map(TrainExample::from).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, text)?)
}

pub(super) fn gen_data(a: GenDataArgs) -> std::result::Result<(), Failure> {
    let mut s = begin(&a.common)?;
    s.flag("n", &a.n);
    s.flag("sequence_frames", &a.frames);
    s.flag("layout", &a.layout);
    finish(&mut s, &a.common)?;
    synth_config(&s).usage()?;
    let ds = synthesize(&s, 8, 60).usage()?;
    let mut extra = BTreeMap::new();
    extra.insert("seed".to_string(), s.seed().usage()?.to_string());
    write_dataset(&a.out, &ds, &extra)?;
    println!("wrote {} sequences to {}", ds.samples.len(), a.out.display());
    Ok(())
}

fn step_checkpoint(out: &Path, step: usize) -> PathBuf {
    out.with_extension(format!("step{step:06}.safetensors"))
}

pub(super) fn loss_svg(curve: &[CurvePoint], title: &str) -> String {
    let pts = |f: &dyn Fn(&CurvePoint) -> Option<f64>| curve.iter().filter_map(|p| f(p).map(|v| (p.step as f64, v))).collect();
    let series = [
        Series { name: "combined", points: pts(&|p| Some(p.combined)) },
        Series { name: "full", points: pts(&|p| p.loss_full) },
        Series { name: "masked", points: pts(&|p| p.loss_masked) },
    ];
    line_chart(title, "step", &series)
}

pub(super) fn train(a: TrainArgs) -> std::result::Result<(), Failure> {
    let mut s = begin(&a.common)?;
    model_flags(&mut s, &a.model);
    s.flag("steps", &a.steps);
    s.flag("batch_size", &a.batch_size);
    s.flag("frames", &a.frames);
    s.flag("learning_rate", &a.lr);
    s.flag("log_every", &a.log_every);
    s.flag("checkpoint_every", &a.checkpoint_every);
    finish(&mut s, &a.common)?;
    let train_cfg = s.train().usage()?;
    let mdt_cfg = s.mdt().usage()?;
    let schedule = s.schedule().usage()?;

    let ds = read_dataset(&a.data)?;
    let data = examples(&ds);
    let device = Device::Cpu;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(path, Some(train_cfg.clone()), &device)?,
        None => {
            let model = MdtModel::new(mdt_cfg, data_dims(&data)?, schedule.steps(), DType::F32, &device, train_cfg.seed)?;
            Trainer::new(model, train_cfg.clone(), schedule)?
        }
    };
    let out = a.out.clone();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    trainer.run_until(&data, train_cfg.steps, |t| t.save(&step_checkpoint(&out, t.step)))?;
    trainer.save(&out)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| out.with_extension("loss.csv"));
    write_text(&csv_path, &curve_csv(&trainer.curve))?;
    if let Some(svg) = &a.svg {
        write_text(svg, &loss_svg(&trainer.curve, "training loss"))?;
    }
    match trainer.curve.last() {
        Some(p) => println!("trained to step {}; combined loss {:.6}", trainer.step, p.combined),
        None => println!("trained to step {}", trainer.step),
    }
    Ok(())
}

fn load_model(path: &Path, device: &Device) -> Result<(MdtModel, Schedule)> {
    let (model, container) = MdtModel::load(path, device)?;
    let schedule = Schedule::from_metadata(&container.metadata, model.num_steps)?;
    Ok((model, schedule))
}

/// Runs the sampler over all bundles in one batch and returns rotation-projected sequences.
pub(super) fn generate(
    model: &MdtModel,
    schedule: &Schedule,
    bundles: &[&ConditionBundle],
    layout: &Arc<SkeletonLayout>,
    fps: f64,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<(Vec<GestureSequence>, usize)> {
    let cond = CondBatch::from_bundles(bundles, model.dtype(), model.device())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, trace) = sample_with(model, &cond, model.dims.gesture, schedule, cfg, &mut rng)?;
    let seqs = (0..bundles.len())
        .map(|i| {
            let flat = FlatGesture::from_tensor(&x.get(i)?)?;
            Ok(GestureSequence::from_flat(&flat, layout.clone(), fps)?.project_to_rotations())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((seqs, trace.network_eval_count))
}

pub(super) fn sample(a: SampleArgs) -> std::result::Result<(), Failure> {
    let mut s = begin(&a.common)?;
    sampler_flags(&mut s, &a.sampler);
    finish(&mut s, &a.common)?;
    let cfg = s.sampler().usage()?;
    let seed = s.seed().usage()?;
    let device = Device::Cpu;
    let (model, schedule) = load_model(&a.checkpoint, &device)?;
    let ds = read_dataset(&a.data)?;
    let limit = a.limit.unwrap_or(ds.samples.len()).min(ds.samples.len());
    if limit == 0 {
        return Err(Failure::Usage(Error::Argument("limit must be at least 1".into())));
    }
    let layout = ds.samples[0].gesture.layout().clone();
    let fps = ds.samples[0].gesture.fps();
    let bundles: Vec<&ConditionBundle> = ds.samples[..limit].iter().map(|x| &x.bundle).collect();
    let start = std::time::Instant::now();
    let (seqs, evals) = generate(&model, &schedule, &bundles, &layout, fps, &cfg, seed)?;
    write_gestures(&a.out, &seqs)?;
    let meta: BTreeMap<String, String> = [
        ("mode", cfg.mode.to_string()),
        ("skip", cfg.skip.to_string()),
        ("scale", cfg.scale.to_string()),
        ("seed", seed.to_string()),
        ("network_evals", evals.to_string()),
        ("count", seqs.len().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_text(&a.out.join("sample.meta"), &format_kv(&meta))?;
    println!(
        "wrote {} sequences to {} ({} sampler, {} network evaluations, {:.3}s)",
        seqs.len(),
        a.out.display(),
        cfg.label(),
        evals,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Loads the extractor at `path`, or trains one on `truth` (saving it when a path is given).
pub(super) fn extractor_for(
    s: &Settings,
    path: Option<&Path>,
    truth: &[GestureSequence],
) -> std::result::Result<FeatureExtractor, Failure> {
    let device = Device::Cpu;
    if let Some(p) = path.filter(|p| p.exists()) {
        return Ok(FeatureExtractor::load(p, &device)?);
    }
    let cfg = s.extractor().usage()?;
    let flats: Vec<FlatGesture> = truth.iter().map(GestureSequence::to_flat).collect();
    let ex = FeatureExtractor::train(&flats, cfg, &device)?;
    if let Some(p) = path {
        ex.save(p)?;
    }
    Ok(ex)
}

pub(super) fn eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let mut s = begin(&a.common)?;
    finish(&mut s, &a.common)?;
    let eval_cfg = s.eval().usage()?;
    let ds = read_dataset(&a.truth)?;
    let layout = ds.samples[0].gesture.layout().clone();
    let generated = read_gestures(&a.generated, &layout)?;
    if generated.len() != ds.samples.len() {
        return Err(Failure::Runtime(Error::Argument(format!(
            "{} generated sequences for {} ground-truth sequences",
            generated.len(),
            ds.samples.len()
        ))));
    }
    let truth: Vec<GestureSequence> = ds.samples.iter().map(|x| x.gesture.clone()).collect();
    let beats: Vec<Vec<f64>> = ds.samples.iter().map(|x| x.audio_beats.clone()).collect();
    let extractor = extractor_for(&s, a.extractor.as_deref(), &truth)?;
    let label = a.label.clone().unwrap_or_else(|| "generated".into());
    let row = evaluate(&label, &truth, &generated, &beats, &extractor, &eval_cfg)?;
    let report = MetricReport { extractor_checksum: extractor.checksum()?, rows: vec![row] };
    if let Some(out) = &a.out {
        write_text(out, &report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(name: &str, list: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    list.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|e| Error::config(format!("{name}: cannot parse {x:?}: {e}"))))
        .collect()
}

fn crop(m: &FlatGesture, frames: usize) -> Result<FlatGesture> {
    if m.frames < frames {
        return Err(Error::arg(format!("sequence has {} frames, {frames} requested", m.frames)));
    }
    FlatGesture::new(frames, m.dim, m.values[..frames * m.dim].to_vec())
}

fn samples_checksum(samples: &[FlatGesture]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for v in &s.values {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub const BENCH_COLUMNS: &str =
    "label,mode,skip,scale,network_evals,runs,median_secs,mean_secs,std_secs,speedup,reference_secs,sample_sha256";

pub(super) fn bench(a: BenchArgs) -> std::result::Result<(), Failure> {
    let mut s = begin(&a.common)?;
    s.flag("variant", &a.variant);
    s.flag("scale", &a.scale);
    s.flag("runs", &a.runs);
    s.flag("bench_frames", &a.frames);
    s.flag("bench_batch", &a.batch);
    s.flag("layout", &a.layout);
    finish(&mut s, &a.common)?;
    let modes: Vec<SamplerMode> = parse_list("modes", &a.modes).usage()?;
    let skips: Vec<usize> = parse_list("N", &a.skips).usage()?;
    let scale = s.get("scale", crate::sampling::DEFAULT_SCALE).usage()?;
    let mut configs = Vec::new();
    for m in &modes {
        match m {
            SamplerMode::Full => configs.push(SamplerConfig::full()),
            SamplerMode::Accelerated => configs.extend(skips.iter().map(|&n| SamplerConfig::accelerated(n, scale))),
        }
    }
    for c in &configs {
        c.validate().usage()?;
    }
    let runs: usize = s.get("runs", 5).usage()?;
    let frames: usize = s.get("bench_frames", 16).usage()?;
    let batch: usize = s.get("bench_batch", 1).usage()?;
    if runs == 0 || frames < 2 || batch == 0 {
        return Err(Failure::Usage(Error::Config("runs, bench_batch must be positive and bench_frames at least 2".into())));
    }
    let seed = s.seed().usage()?;
    let device = Device::Cpu;

    let (model, schedule) = match &a.checkpoint {
        Some(p) => load_model(p, &device)?,
        None => {
            let cfg = make_variant(&s.get("variant", "B".to_string()).usage()?).usage()?;
            let probe = synthesize(&s, 1, frames.max(8)).usage()?;
            let dims = data_dims(&examples(&probe))?;
            let schedule = s.schedule().usage()?;
            (MdtModel::new(cfg, dims, schedule.steps(), DType::F32, &device, seed)?, schedule)
        }
    };
    let bundles: Vec<ConditionBundle> = match &a.data {
        Some(dir) => read_dataset(dir)?.samples.into_iter().take(batch).map(|x| x.bundle).collect(),
        None => {
            let d = model.dims;
            let cfg = SynthConfig {
                n_speakers: d.speakers,
                n_emotions: d.emotions,
                audio_dim: d.audio,
                text_dim: d.text,
                ..synth_config(&s).usage()?
            };
            let layout = Arc::new(SkeletonLayout::generic(d.gesture / 9)?);
            synth_dataset_with(batch, frames.max(8), &layout, seed, &cfg)?.into_iter().map(|x: SynthSample| x.bundle).collect()
        }
    };
    let bundles = bundles
        .iter()
        .map(|b| ConditionBundle::new(crop(&b.audio, frames)?, crop(&b.text, frames)?, b.speaker.clone(), b.emotion.clone()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ConditionBundle> = bundles.iter().collect();
    let cond = CondBatch::from_bundles(&refs, model.dtype(), model.device())?;
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let results = bench_sampler(&model, &cond, model.dims.gesture, &schedule, &configs, runs, &rng).usage()?;

    let full_median = results.iter().find(|r| r.config.mode == SamplerMode::Full).map(|r| r.median_secs());
    let mut csv = format!("{BENCH_COLUMNS}\n");
    let mut table = format!("{:<8} {:>8} {:>12} {:>10} {:>9}\n", "sampler", "evals", "median (s)", "std (s)", "speedup");
    for r in &results {
        let speedup = full_median.map(|f| f / r.median_secs()).unwrap_or(f64::NAN);
        let reference = reference_secs(&r.config).map(|v| v.to_string()).unwrap_or_default();
        let (skip, scale) = match r.config.mode {
            SamplerMode::Full => (String::new(), String::new()),
            SamplerMode::Accelerated => (r.config.skip.to_string(), r.config.scale.to_string()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config.label(),
            r.config.mode,
            skip,
            scale,
            r.network_eval_count,
            runs,
            r.median_secs(),
            r.mean_secs(),
            r.std_secs(),
            speedup,
            reference,
            samples_checksum(&r.samples)
        );
        let _ = writeln!(
            table,
            "{:<8} {:>8} {:>12.4} {:>10.4} {:>8.2}x",
            r.config.label(),
            r.network_eval_count,
            r.median_secs(),
            r.std_secs(),
            speedup
        );
    }
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    print!("{table}");
    Ok(())
}
