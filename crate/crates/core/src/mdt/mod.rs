//! Masked diffusion transformer denoiser.
//!
//! Training runs tokens through masking, an encoder over the visible tokens,
//! a side-interpolator that restores the full sequence with a shared mask
//! token, and a shallow decoder. Inference skips masking and the
//! side-interpolator entirely.

mod config;
mod mask;
mod model;

pub use config::{make_variant, InputMode, MdtConfig};
pub use mask::{apply_mask, draw_mask_plans, gather_unmasked, mask_count, MaskPlan, WIDER_SPAN};
pub use model::{AttentionCounters, MdtModel};
