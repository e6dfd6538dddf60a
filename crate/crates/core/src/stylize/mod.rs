//! Dual-path style transfer: the content and style images are inverted,
//! the style path is reconstructed while its attention keys/values are
//! recorded, and the content path is denoised with fused attention at the
//! configured layers and steps.

mod ablation;
mod config;
mod pipeline;

pub use ablation::{
    ablation_sweep, expand_grid, parse_window, AblationAxis, AblationRow, AblationTable,
    ABLATION_CSV,
};
pub use config::{ContentSource, FusionMode, InjectionConfig, RegionShape, RegionSpec};
pub use pipeline::{
    dual_path_transfer, regional_transfer, LayerStepDiagnostic, StylePath, StyleTransferResult,
    TaggedKv, TransferSession,
};

#[cfg(test)]
mod tests;
