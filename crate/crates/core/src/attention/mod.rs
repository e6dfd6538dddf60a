//! Attention fusion kernels: plain self-attention, style-cross attention,
//! externally mixed (simple addition) attention, and the rearranged form
//! where style and content logits share one softmax.
//!
//! Everything here runs in `f64` over [`FeatureMap`]s and is pure.

mod control;
mod feature;
mod hook;
mod kernels;

pub use control::{apply_region_control, ControlMode, GradientAxis, RegionControl};
pub use feature::FeatureMap;
pub use hook::{AttentionHook, NoHook, Qkv};
pub use kernels::{
    addition_as_rearranged, apply_weights, correction_term, mixing_as_rearranged_from_logits,
    mixing_weights_from_logits, naive_style_cross, rearranged_attention,
    rearranged_attention_balanced, rearranged_from_logits, self_attention, self_attention_weights,
    simple_addition, simple_addition_weights, style_mass, AttentionInputs, AttentionWeights,
    BlockLabel, KvBlock, ScaledLogits, WeightBlock,
};
