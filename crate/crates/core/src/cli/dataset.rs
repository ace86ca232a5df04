//! Dataset directories: one native gesture file, two condition matrices and
//! a small `key=value` meta file per sequence, plus a `dataset.meta` index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::settings::{format_kv, parse_kv};
use crate::conditions::ConditionBundle;
use crate::error::{Error, Result};
use crate::gesture_data::{read_gesture, write_gesture, write_matrix, GestureSequence, SkeletonLayout, SynthSample};

pub const INDEX_FILE: &str = "dataset.meta";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout_name: String,
    pub samples: Vec<SynthSample>,
}

fn stem(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("seq_{i:04}"))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    stem.with_extension(ext)
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_floats(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|e| Error::arg(format!("bad float {x:?}: {e}"))))
        .collect()
}

fn meta_value<'a>(kv: &'a BTreeMap<String, String>, key: &str, file: &Path) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::arg(format!("{}: missing key {key}", file.display())))
}

fn meta_parse<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, file: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = meta_value(kv, key, file)?;
    v.parse().map_err(|e| Error::arg(format!("{}: {key}: cannot parse {v:?}: {e}", file.display())))
}

fn create(path: &Path) -> Result<fs::File> {
    Ok(fs::File::create(path)?)
}

/// Writes `samples` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &Dataset, extra: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let first = ds.samples.first().ok_or_else(|| Error::arg("refusing to write an empty dataset"))?;
    let mut index = extra.clone();
    index.insert("count".into(), ds.samples.len().to_string());
    index.insert("layout".into(), ds.layout_name.clone());
    index.insert("n_speakers".into(), first.bundle.speaker.len().to_string());
    index.insert("n_emotions".into(), first.bundle.emotion.len().to_string());
    fs::write(dir.join(INDEX_FILE), format_kv(&index))?;
    for (i, s) in ds.samples.iter().enumerate() {
        let stem = stem(dir, i);
        let fps = s.gesture.fps();
        write_gesture(&mut create(&with_ext(&stem, "gesture"))?, &s.gesture)?;
        write_matrix(&mut create(&with_ext(&stem, "audio"))?, &s.bundle.audio, fps)?;
        write_matrix(&mut create(&with_ext(&stem, "text"))?, &s.bundle.text, fps)?;
        let meta: BTreeMap<String, String> = [
            ("speaker", s.speaker.to_string()),
            ("emotion", s.emotion.to_string()),
            ("audio_beats", join_floats(&s.audio_beats)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        fs::write(with_ext(&stem, "meta"), format_kv(&meta))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::arg(format!("{} is not a dataset directory: {e}", dir.display())))?;
    let index = parse_kv(&text)?;
    let count: usize = meta_parse(&index, "count", &index_path)?;
    let layout_name = meta_value(&index, "layout", &index_path)?.to_string();
    let layout = Arc::new(SkeletonLayout::by_name(&layout_name)?);
    let n_speakers: usize = meta_parse(&index, "n_speakers", &index_path)?;
    let n_emotions: usize = meta_parse(&index, "n_emotions", &index_path)?;
    let samples = (0..count)
        .map(|i| {
            let stem = stem(dir, i);
            let gesture = read_gesture(&fs::read_to_string(with_ext(&stem, "gesture"))?, Some(layout.clone()))?;
            let meta_path = with_ext(&stem, "meta");
            let meta = parse_kv(&fs::read_to_string(&meta_path)?)?;
            let speaker = meta_parse(&meta, "speaker", &meta_path)?;
            let emotion = meta_parse(&meta, "emotion", &meta_path)?;
            let bundle = ConditionBundle::load(
                &with_ext(&stem, "audio"),
                &with_ext(&stem, "text"),
                (speaker, n_speakers),
                (emotion, n_emotions),
            )?;
            if bundle.frames() != gesture.frames() {
                return Err(Error::shape(format!("{} condition frames", gesture.frames()), bundle.frames()));
            }
            let audio_beats = split_floats(meta_value(&meta, "audio_beats", &meta_path)?)?;
            Ok(SynthSample { gesture, bundle, speaker, emotion, audio_beats })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { layout_name, samples })
}

/// Writes sequences as `seq_XXXX.gesture`.
pub fn write_gestures(dir: &Path, seqs: &[GestureSequence]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in seqs.iter().enumerate() {
        write_gesture(&mut create(&with_ext(&stem(dir, i), "gesture"))?, s)?;
    }
    Ok(())
}

/// Reads every `*.gesture` file in `dir` in file-name order.
pub fn read_gestures(dir: &Path, layout: &Arc<SkeletonLayout>) -> Result<Vec<GestureSequence>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::arg(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gesture"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_gesture(&fs::read_to_string(p)?, Some(layout.clone()))).collect()
}
