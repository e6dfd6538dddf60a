//! Synthetic content/style datasets and PNG I/O.
//!
//! Content images are grey, high-contrast shapes (structure); style images
//! are saturated, low-contrast textures (palette and pattern). Images are
//! stored as 8-bit PNGs and mapped to `[-1, 1]` on load.

mod io;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::ImageTensor;
use crate::error::{invalid, Error, Result};

pub use io::{load_image, rgb_from_tensor, save_image, tensor_from_rgb, to_model_range, to_u8};
pub use synth::{
    image_rng, render, render_content, render_style, sample_content, sample_style, ContentParams,
    Family, ImageParams, Pattern, Shape, StyleParams,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// Images per family.
    pub count: usize,
    pub seed: u64,
    pub resolution: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 8000,
            seed: 0,
            resolution: 32,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid!("dataset count must be positive"));
        }
        if self.resolution != 32 {
            return Err(invalid!(
                "only 32x32 images are supported, got {}",
                self.resolution
            ));
        }
        Ok(())
    }

    pub fn params(&self, family: Family, index: usize) -> ImageParams {
        match family {
            Family::Content => {
                ImageParams::Content(sample_content(self.seed, index, self.resolution))
            }
            Family::Style => ImageParams::Style(sample_style(self.seed, index)),
        }
    }

    pub fn image(&self, family: Family, index: usize) -> ImageTensor {
        tensor_from_rgb(&render(&self.params(family, index), self.resolution))
    }

    /// All images of one family, generated in memory.
    pub fn images(&self, family: Family) -> Vec<ImageTensor> {
        (0..self.count).map(|i| self.image(family, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Path relative to the dataset root.
    pub file: PathBuf,
    pub index: usize,
    pub params: ImageParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn family(&self, family: Family) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| {
            matches!(
                (&e.params, family),
                (ImageParams::Content(_), Family::Content) | (ImageParams::Style(_), Family::Style)
            )
        })
    }
}

/// Renders both families under `out/{content,style}/NNNNN.png` and writes
/// `manifest.json` with the generator parameters of every image.
pub fn generate(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(2 * spec.count);
    for family in [Family::Content, Family::Style] {
        let dir = out.join(family.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..spec.count {
            let params = spec.params(family, index);
            let file = PathBuf::from(family.dir_name()).join(format!("{index:05}.png"));
            let path = out.join(&file);
            render(&params, spec.resolution)
                .save(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            entries.push(DatasetEntry {
                file,
                index,
                params,
            });
        }
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A generated dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub content: Vec<ImageTensor>,
    pub style: Vec<ImageTensor>,
}

impl Dataset {
    /// Both families, content first: what the denoiser trains on.
    pub fn union(&self) -> Vec<ImageTensor> {
        self.content.iter().chain(&self.style).cloned().collect()
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let load = |family| {
        manifest
            .family(family)
            .map(|e| load_image(&root.join(&e.file)))
            .collect::<Result<Vec<_>>>()
    };
    let content = load(Family::Content)?;
    let style = load(Family::Style)?;
    Ok(Dataset {
        manifest,
        content,
        style,
    })
}
