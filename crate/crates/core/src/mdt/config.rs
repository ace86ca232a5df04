use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which training paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Both the full-sequence path and the masked path.
    FullUnmasked,
    /// Only the full-sequence path.
    Full,
    /// Only the masked path.
    Unmasked,
}

impl InputMode {
    pub fn uses_full(self) -> bool {
        matches!(self, InputMode::FullUnmasked | InputMode::Full)
    }

    pub fn uses_masked(self) -> bool {
        matches!(self, InputMode::FullUnmasked | InputMode::Unmasked)
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::FullUnmasked => "full+unmasked",
            InputMode::Full => "full",
            InputMode::Unmasked => "unmasked",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full+unmasked" => Ok(InputMode::FullUnmasked),
            "full" => Ok(InputMode::Full),
            "unmasked" => Ok(InputMode::Unmasked),
            _ => Err(Error::config(format!("input_mode: unknown value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdtConfig {
    pub width: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub si_blocks: usize,
    pub heads: usize,
    pub rho_base: f64,
    pub wider: bool,
    pub shortcut: bool,
    pub input_mode: InputMode,
    /// Frame window of the cross-local attention in the fusion stage.
    pub window_size: usize,
}

/// Named model sizes: XS, S, B, L.
pub fn make_variant(name: &str) -> Result<MdtConfig> {
    let (width, encoder_depth, decoder_depth, heads) = match name {
        "XS" => (64, 2, 1, 4),
        "S" => (128, 4, 2, 4),
        "B" => (256, 8, 2, 8),
        "L" => (384, 12, 2, 8),
        _ => return Err(Error::config(format!("variant: unknown name {name:?} (expected XS, S, B or L)"))),
    };
    Ok(MdtConfig {
        width,
        encoder_depth,
        decoder_depth,
        si_blocks: 1,
        heads,
        rho_base: 0.4,
        wider: true,
        shortcut: true,
        input_mode: InputMode::FullUnmasked,
        window_size: 8,
    })
}

impl MdtConfig {
    /// Checks every invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.decoder_depth >= self.encoder_depth {
            return Err(Error::config(format!(
                "decoder_depth ({}) must be smaller than encoder_depth ({})",
                self.decoder_depth, self.encoder_depth
            )));
        }
        if !(0.0..=0.8).contains(&self.rho_base) {
            return Err(Error::config(format!("rho_base ({}) must lie in [0, 0.8]", self.rho_base)));
        }
        Ok(())
    }

    /// The subset of checks required to build a model at all.
    pub fn validate_structure(&self) -> Result<()> {
        if self.width == 0 || self.width % 16 != 0 {
            return Err(Error::config(format!("width ({}) must be a positive multiple of 16", self.width)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!("heads ({}) must divide width ({})", self.heads, self.width)));
        }
        if self.window_size == 0 {
            return Err(Error::config("window_size must be at least 1"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("width", self.width.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("si_blocks", self.si_blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("rho_base", self.rho_base.to_string()),
            ("wider", self.wider.to_string()),
            ("shortcut", self.shortcut.to_string()),
            ("input_mode", self.input_mode.to_string()),
            ("window_size", self.window_size.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies `key=value` overrides; unknown keys are ignored so the same
    /// map can carry other modules' settings.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "width" => self.width = parse(k, v)?,
                "encoder_depth" => self.encoder_depth = parse(k, v)?,
                "decoder_depth" => self.decoder_depth = parse(k, v)?,
                "si_blocks" => self.si_blocks = parse(k, v)?,
                "heads" => self.heads = parse(k, v)?,
                "rho_base" => self.rho_base = parse(k, v)?,
                "wider" => self.wider = parse(k, v)?,
                "shortcut" => self.shortcut = parse(k, v)?,
                "input_mode" => self.input_mode = v.parse()?,
                "window_size" => self.window_size = parse(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = make_variant("XS")?;
        for key in cfg.to_kv().keys() {
            if !kv.contains_key(key) {
                return Err(Error::config(format!("{key}: missing")));
            }
        }
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }
}
