//! Flat `key=value` settings shared by every subcommand.
//!
//! Values come from an optional config file, then from named flags, then
//! from repeated `--set key=value` overrides. Module configs are built from
//! the merged map and validated before any work starts.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::diffusion::{make_schedule, Schedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::mdt::{make_variant, MdtConfig};
use crate::metrics::{EvalConfig, ExtractorConfig};
use crate::sampling::{SamplerConfig, SamplerMode, DEFAULT_SCALE, DEFAULT_SKIP};
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "MDTA2G_SEED";

/// Keys read outside the training and model configs.
const CLI_KEYS: &[&str] = &[
    "variant",
    "diffusion_steps",
    "beta_start",
    "beta_end",
    "mode",
    "skip",
    "scale",
    "layout",
    "n",
    "sequence_frames",
    "n_speakers",
    "n_emotions",
    "audio_dim",
    "text_dim",
    "fps",
    "runs",
    "bench_frames",
    "bench_batch",
    "extractor_window",
    "extractor_stride",
    "extractor_feature_dim",
    "extractor_hidden0",
    "extractor_hidden1",
    "extractor_steps",
    "extractor_batch_size",
    "extractor_learning_rate",
    "extractor_seed",
    "extractor_loss_threshold",
    "diversity_pairs",
    "beat_sigma",
    "beat_smoothing",
    "srgr_delta",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got {line:?}") })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate key {k}") });
        }
    }
    Ok(kv)
}

pub fn format_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    kv: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| Error::arg(format!("config {}: {e}", p.display())))?)?,
            None => BTreeMap::new(),
        };
        Ok(Self { kv })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.kv.insert(key.to_string(), value.to_string());
    }

    /// Sets `key` unless a value is already present.
    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.kv.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    /// Sets `key` when the flag was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.set(key, v.to_string());
        }
    }

    /// Applies `--set key=value` overrides.
    pub fn overrides(&mut self, items: &[String]) -> Result<()> {
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("--set expects key=value, got {item:?}")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    /// Rejects keys no module reads.
    pub fn check_known(&self) -> Result<()> {
        let train = TrainConfig::default().to_kv();
        let mdt = make_variant("XS")?.to_kv();
        for k in self.kv.keys() {
            if !(train.contains_key(k) || mdt.contains_key(k) || CLI_KEYS.contains(&k.as_str())) {
                return Err(Error::config(format!("{k}: unknown setting")));
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.kv.get(key) {
            Some(v) => v.parse().map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}"))),
            None => Ok(default),
        }
    }

    pub fn raw(&self) -> &BTreeMap<String, String> {
        &self.kv
    }

    /// The seed: `seed` setting, else the environment default, else 0.
    pub fn seed(&self) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| Error::config(format!("{SEED_ENV}: cannot parse {v:?}: {e}")))?,
            Err(_) => 0,
        };
        self.get("seed", env)
    }

    pub fn mdt(&self) -> Result<MdtConfig> {
        let mut cfg = make_variant(&self.get("variant", "XS".to_string())?)?;
        cfg.apply_kv(&self.kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig { seed: self.seed()?, ..Default::default() };
        cfg.apply_kv(&self.kv)?;
        cfg.seed = self.seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(
            self.get("diffusion_steps", DEFAULT_STEPS)?,
            self.get("beta_start", DEFAULT_BETA_START)?,
            self.get("beta_end", DEFAULT_BETA_END)?,
        )
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let cfg = SamplerConfig {
            mode: self.get("mode", SamplerMode::Accelerated)?,
            skip: self.get("skip", DEFAULT_SKIP)?,
            scale: self.get("scale", DEFAULT_SCALE)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn extractor(&self) -> Result<ExtractorConfig> {
        let d = ExtractorConfig::default();
        let cfg = ExtractorConfig {
            window: self.get("extractor_window", d.window)?,
            stride: self.get("extractor_stride", d.stride)?,
            feature_dim: self.get("extractor_feature_dim", d.feature_dim)?,
            hidden: [self.get("extractor_hidden0", d.hidden[0])?, self.get("extractor_hidden1", d.hidden[1])?],
            steps: self.get("extractor_steps", d.steps)?,
            batch_size: self.get("extractor_batch_size", d.batch_size)?,
            learning_rate: self.get("extractor_learning_rate", d.learning_rate)?,
            seed: self.get("extractor_seed", self.seed()?)?,
            loss_threshold: self.get("extractor_loss_threshold", d.loss_threshold)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let d = EvalConfig::default();
        let cfg = EvalConfig {
            diversity_pairs: self.get("diversity_pairs", d.diversity_pairs)?,
            beat_sigma: self.get("beat_sigma", d.beat_sigma)?,
            beat_smoothing: self.get("beat_smoothing", d.beat_smoothing)?,
            srgr_delta: self.get("srgr_delta", d.srgr_delta)?,
            seed: self.seed()?,
        };
        if cfg.diversity_pairs == 0 {
            return Err(Error::config("diversity_pairs must be at least 1"));
        }
        if !(cfg.beat_sigma > 0.0) {
            return Err(Error::config(format!("beat_sigma ({}) must be positive", cfg.beat_sigma)));
        }
        if !(cfg.srgr_delta > 0.0) {
            return Err(Error::config(format!("srgr_delta ({}) must be positive", cfg.srgr_delta)));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse_kv("# header\nsteps = 10\n\nrho_base=0.3 # trailing\n").unwrap();
        assert_eq!(kv.get("steps").unwrap(), "10");
        assert_eq!(kv.get("rho_base").unwrap(), "0.3");
        assert_eq!(parse_kv(&format_kv(&kv)).unwrap(), kv);
    }

    #[test]
    fn reports_bad_lines_with_numbers() {
        match parse_kv("a=1\nnonsense\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_kv("a=1\na=2\n").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "steps=10\nseed=3\n").unwrap();
        let mut s = Settings::from_file(Some(&path)).unwrap();
        s.flag("steps", &Some(25));
        s.flag::<u64>("seed", &None);
        let cfg = s.train().unwrap();
        assert_eq!((cfg.steps, cfg.seed), (25, 3));
        s.overrides(&["steps=7".into()]).unwrap();
        assert_eq!(s.train().unwrap().steps, 7);
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut s = Settings::default();
        s.set("rho_base", 0.95);
        assert!(s.mdt().unwrap_err().to_string().contains("rho_base"));
        let mut s = Settings::default();
        s.set("no_such_key", 1);
        assert!(s.check_known().unwrap_err().to_string().contains("no_such_key"));
        let mut s = Settings::default();
        s.set("scale", 0.5);
        assert!(s.sampler().unwrap_err().to_string().contains("scale"));
    }
}
