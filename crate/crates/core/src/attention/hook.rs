use super::FeatureMap;
use crate::error::Result;

/// Projected query/key/value features of one attention layer.
#[derive(Debug, Clone)]
pub struct Qkv {
    pub q: FeatureMap,
    pub k: FeatureMap,
    pub v: FeatureMap,
    pub dim_scale: f64,
}

/// Observes or replaces attention computations inside a denoiser pass.
///
/// `step` is the denoising step index the caller is on (0-based, in
/// execution order); `layer` indexes the model's attention registry.
pub trait AttentionHook {
    /// Whether `attend` should be called for this layer. Layers that return
    /// false skip the feature export entirely.
    fn wants(&self, step: usize, layer: usize) -> bool;

    /// Return `Some(output)` to replace the layer's attention output, or
    /// `None` to keep the layer's own result.
    fn attend(&mut self, step: usize, layer: usize, qkv: &Qkv) -> Result<Option<FeatureMap>>;
}

/// Hook that never fires.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl AttentionHook for NoHook {
    fn wants(&self, _: usize, _: usize) -> bool {
        false
    }

    fn attend(&mut self, _: usize, _: usize, _: &Qkv) -> Result<Option<FeatureMap>> {
        Ok(None)
    }
}

impl<H: AttentionHook + ?Sized> AttentionHook for &mut H {
    fn wants(&self, step: usize, layer: usize) -> bool {
        (**self).wants(step, layer)
    }

    fn attend(&mut self, step: usize, layer: usize, qkv: &Qkv) -> Result<Option<FeatureMap>> {
        (**self).attend(step, layer, qkv)
    }
}
