//! The toy attention U-Net, its reverse-mode trainer and checkpoints.

mod checkpoint;
mod kernels;
mod tape;
mod tensor;
mod unet;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointManifest, MANIFEST_FILE,
};
pub use tensor::Tensor;
pub use unet::{
    build_toy_unet, Architecture, AttentionLayerInfo, DenoiserModel, LayerCapture, Stage,
    IMAGE_CHANNELS, IMAGE_SIZE,
};
mod train;

pub use train::{train, validation_loss, TrainConfig, TrainOutcome};

#[cfg(test)]
mod tests;
