//! The ablation grid: one train/sample/evaluate cell per axis value.

use std::fmt::Write as _;
use std::str::FromStr;

use candle_core::{DType, Device};

use super::commands::{begin, examples, extractor_for, finish, generate, sampler_flags, synthesize};
use super::dataset::read_dataset;
use super::{AblateArgs, Failure, UsageExt};
use crate::conditions::ConditionBundle;
use crate::error::{Error, Result};
use crate::gesture_data::GestureSequence;
use crate::mdt::{InputMode, MdtConfig};
use crate::metrics::evaluate;
use crate::training::fit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    MaskRatio,
    Wider,
    DecoderDepth,
    SiBlocks,
    Shortcut,
    InputMode,
}

impl Axis {
    pub const ALL: [Axis; 6] =
        [Axis::MaskRatio, Axis::Wider, Axis::DecoderDepth, Axis::SiBlocks, Axis::Shortcut, Axis::InputMode];

    pub fn name(self) -> &'static str {
        match self {
            Axis::MaskRatio => "mask_ratio",
            Axis::Wider => "wider",
            Axis::DecoderDepth => "decoder_depth",
            Axis::SiBlocks => "si_blocks",
            Axis::Shortcut => "shortcut",
            Axis::InputMode => "input_mode",
        }
    }

    pub fn default_values(self) -> &'static [&'static str] {
        match self {
            Axis::MaskRatio => &["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8"],
            Axis::Wider | Axis::Shortcut => &["true", "false"],
            Axis::DecoderDepth => &["2", "4"],
            Axis::SiBlocks => &["0", "1", "2", "3"],
            Axis::InputMode => &["full+unmasked", "full", "unmasked"],
        }
    }

    /// Sets the axis on `cfg`. A decoder deeper than the encoder allows
    /// raises the encoder depth to one more than the decoder.
    pub fn apply(self, cfg: &mut MdtConfig, value: &str) -> Result<()> {
        fn parse<T: FromStr>(axis: Axis, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("{}: cannot parse value {v:?}", axis.name())))
        }
        match self {
            Axis::MaskRatio => cfg.rho_base = parse(self, value)?,
            Axis::Wider => cfg.wider = parse(self, value)?,
            Axis::DecoderDepth => {
                cfg.decoder_depth = parse(self, value)?;
                cfg.encoder_depth = cfg.encoder_depth.max(cfg.decoder_depth + 1);
            }
            Axis::SiBlocks => cfg.si_blocks = parse(self, value)?,
            Axis::Shortcut => cfg.shortcut = parse(self, value)?,
            Axis::InputMode => cfg.input_mode = value.parse::<InputMode>()?,
        }
        cfg.validate()
    }

    /// Full-scale FGD reported for this cell, kept as reference metadata.
    pub fn reference_fgd(self, value: &str) -> Option<f64> {
        let table: &[(&str, f64)] = match self {
            Axis::MaskRatio => &[
                ("0.1", 49.54),
                ("0.2", 48.38),
                ("0.3", 47.74),
                ("0.4", 46.42),
                ("0.5", 48.47),
                ("0.6", 50.46),
                ("0.7", 49.38),
                ("0.8", 52.28),
            ],
            Axis::Wider => &[("true", 46.42), ("false", 47.75)],
            Axis::DecoderDepth => &[("2", 46.42), ("4", 46.69)],
            Axis::SiBlocks => &[("0", 54.08), ("1", 46.42), ("2", 46.85), ("3", 55.28)],
            Axis::Shortcut => &[("true", 46.42), ("false", 49.77)],
            Axis::InputMode => &[("full+unmasked", 46.42), ("full", 55.08), ("unmasked", 96.63)],
        };
        let canonical = |v: &str| match self {
            Axis::MaskRatio => v.parse::<f64>().map(|x| x.to_string()).unwrap_or_default(),
            _ => v.to_string(),
        };
        table.iter().find(|(k, _)| canonical(k) == canonical(value)).map(|&(_, fgd)| fgd)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("axis: unknown axis {s:?}")))
    }
}

pub const ABLATION_COLUMNS: &str = "axis,value,encoder_depth,decoder_depth,si_blocks,rho_base,wider,shortcut,input_mode,\
steps,final_loss,fgd,diversity,srgr,beat_align,reference_fgd";

pub(super) fn ablate(a: AblateArgs) -> std::result::Result<(), Failure> {
    let mut s = begin(&a.common)?;
    // Desk-scale defaults; the config file and flags take precedence.
    s.set_default("steps", 50);
    s.set_default("batch_size", 8);
    s.set_default("frames", 32);
    s.set_default("extractor_stride", 1);
    s.flag("n", &a.n);
    s.flag("sequence_frames", &a.frames);
    s.flag("layout", &a.layout);
    s.flag("steps", &a.steps);
    s.flag("variant", &a.variant);
    sampler_flags(&mut s, &a.sampler);
    finish(&mut s, &a.common)?;

    let cells: Vec<(Axis, String)> = if a.axis == "all" {
        if a.values.is_some() {
            return Err(Failure::Usage(Error::Config("values: not allowed with --axis all".into())));
        }
        Axis::ALL.iter().flat_map(|&ax| ax.default_values().iter().map(move |v| (ax, v.to_string()))).collect()
    } else {
        let axis: Axis = a.axis.parse().usage()?;
        let values: Vec<String> = match &a.values {
            Some(list) => list.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect(),
            None => axis.default_values().iter().map(|v| v.to_string()).collect(),
        };
        if values.is_empty() {
            return Err(Failure::Usage(Error::Config("values: empty list".into())));
        }
        values.into_iter().map(|v| (axis, v)).collect()
    };
    let base = s.mdt().usage()?;
    let configs = cells
        .iter()
        .map(|(axis, v)| {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v).map(|_| cfg)
        })
        .collect::<Result<Vec<MdtConfig>>>()
        .usage()?;
    let train_cfg = s.train().usage()?;
    let sampler = s.sampler().usage()?;
    let eval_cfg = s.eval().usage()?;
    let schedule = s.schedule().usage()?;
    let seed = s.seed().usage()?;
    let ds = match &a.data {
        Some(dir) => read_dataset(dir)?,
        None => synthesize(&s, 8, 40).usage()?,
    };
    let data = examples(&ds);
    let truth: Vec<GestureSequence> = ds.samples.iter().map(|x| x.gesture.clone()).collect();
    let beats: Vec<Vec<f64>> = ds.samples.iter().map(|x| x.audio_beats.clone()).collect();
    let bundles: Vec<&ConditionBundle> = ds.samples.iter().map(|x| &x.bundle).collect();
    let layout = truth[0].layout().clone();
    let fps = truth[0].fps();
    let extractor = extractor_for(&s, None, &truth)?;
    let device = Device::Cpu;

    let mut csv = format!("{ABLATION_COLUMNS}\n");
    let mut table = format!(
        "{:<14} {:<14} {:>10} {:>10} {:>10} {:>7} {:>9} {:>9}\n",
        "axis", "value", "loss", "FGD", "Diversity", "SRGR", "BeatAlign", "ref FGD"
    );
    for ((axis, value), cfg) in cells.iter().zip(&configs) {
        log::info!("ablation cell {}={}", axis.name(), value);
        let out = fit(&data, &train_cfg, cfg, &schedule, DType::F32, &device)?;
        let final_loss = out.curve.last().map(|p| p.combined).unwrap_or(f64::NAN);
        let (generated, _) = generate(&out.model, &schedule, &bundles, &layout, fps, &sampler, seed)?;
        let label = format!("{}={}", axis.name(), value);
        let row = evaluate(&label, &truth, &generated, &beats, &extractor, &eval_cfg)?;
        let reference = axis.reference_fgd(value);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            axis.name(),
            value,
            cfg.encoder_depth,
            cfg.decoder_depth,
            cfg.si_blocks,
            cfg.rho_base,
            cfg.wider,
            cfg.shortcut,
            cfg.input_mode,
            train_cfg.steps,
            final_loss,
            row.csv_values(),
            reference.map(|v| v.to_string()).unwrap_or_default()
        );
        let _ = writeln!(
            table,
            "{:<14} {:<14} {:>10.4} {:>10.3} {:>10.3} {:>7.4} {:>9.4} {:>9}",
            axis.name(),
            value,
            final_loss,
            row.fgd,
            row.diversity,
            row.srgr,
            row.beat_align,
            reference.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
        );
    }
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, &csv)?;
    }
    print!("{table}");
    println!("extractor {}", extractor.checksum()?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdt::make_variant;

    #[test]
    fn every_default_value_applies_to_the_toy_model() {
        for axis in Axis::ALL {
            for v in axis.default_values() {
                let mut cfg = make_variant("XS").unwrap();
                axis.apply(&mut cfg, v).unwrap();
                assert!(axis.reference_fgd(v).is_some(), "{} {v}", axis.name());
            }
        }
    }

    #[test]
    fn deep_decoder_raises_encoder_depth() {
        let mut cfg = make_variant("XS").unwrap();
        Axis::DecoderDepth.apply(&mut cfg, "4").unwrap();
        assert_eq!((cfg.encoder_depth, cfg.decoder_depth), (5, 4));
    }

    #[test]
    fn mask_ratio_reference_ignores_formatting() {
        assert_eq!(Axis::MaskRatio.reference_fgd("0.40"), Some(46.42));
        assert_eq!(Axis::MaskRatio.reference_fgd("0.45"), None);
        assert!(Axis::MaskRatio.apply(&mut make_variant("XS").unwrap(), "0.9").is_err());
        assert!("depth".parse::<Axis>().is_err());
    }
}
