use serde::{Deserialize, Serialize};

use crate::attention::{ControlMode, RegionControl};
use crate::error::{invalid, shape_err, Result};

/// How injected layers combine content and style keys/values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// No injection: the content path is a plain reconstruction.
    None,
    /// Content queries attend to style keys/values only.
    NaiveCross,
    /// `mix·cross + (1−mix)·self` with two separate softmaxes.
    SimpleAddition,
    /// Style and content keys share one softmax, style logits scaled by λ.
    /// With several style images each style block enters at prior `1/N`.
    Rearranged,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::NaiveCross,
        FusionMode::SimpleAddition,
        FusionMode::Rearranged,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::NaiveCross => "naive_cross",
            FusionMode::SimpleAddition => "simple_addition",
            FusionMode::Rearranged => "rearranged",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown mode {s:?}"))
    }
}

/// Where the content keys/values of an injected layer come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentSource {
    /// The stylized path being denoised.
    Running,
    /// The stored inversion trajectory of the content image.
    Trajectory,
}

/// Pixel-level region shape, reduced to each layer's token grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionShape {
    Full,
    Empty,
    /// Pixel columns `x >= width/2`.
    RightHalf,
    LeftHalf,
    /// Explicit row-major pixel mask.
    Pixels {
        height: usize,
        width: usize,
        mask: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub shape: RegionShape,
    #[serde(default = "hard")]
    pub mode: ControlMode,
}

fn hard() -> ControlMode {
    ControlMode::Hard
}

impl RegionSpec {
    pub fn hard(shape: RegionShape) -> Self {
        Self {
            shape,
            mode: ControlMode::Hard,
        }
    }

    /// The pixel mask at `size x size`.
    pub fn pixel_mask(&self, size: usize) -> Result<(usize, usize, Vec<bool>)> {
        let half = |right: bool| {
            (0..size * size)
                .map(|p| (p % size >= size / 2) == right)
                .collect()
        };
        Ok(match &self.shape {
            RegionShape::Full => (size, size, vec![true; size * size]),
            RegionShape::Empty => (size, size, vec![false; size * size]),
            RegionShape::RightHalf => (size, size, half(true)),
            RegionShape::LeftHalf => (size, size, half(false)),
            RegionShape::Pixels {
                height,
                width,
                mask,
            } => {
                if mask.len() != height * width {
                    return Err(shape_err!(
                        "pixel mask of {} entries for {height}x{width}",
                        mask.len()
                    ));
                }
                (*height, *width, mask.clone())
            }
        })
    }

    /// Nearest-neighbour reduction of the pixel mask to a `grid` of query
    /// tokens, repeated for `keys` style keys.
    pub fn control_for(
        &self,
        image_size: usize,
        grid: (usize, usize),
        keys: usize,
    ) -> Result<RegionControl> {
        let (ph, pw, mask) = self.pixel_mask(image_size)?;
        let (gh, gw) = grid;
        if gh == 0 || gw == 0 || ph % gh != 0 || pw % gw != 0 {
            return Err(shape_err!(
                "a {ph}x{pw} mask does not reduce to a {gh}x{gw} token grid"
            ));
        }
        let (sy, sx) = (ph / gh, pw / gw);
        let tokens: Vec<bool> = (0..gh * gw)
            .map(|t| {
                let (i, j) = (t / gw, t % gw);
                mask[(i * sy + sy / 2) * pw + j * sx + sx / 2]
            })
            .collect();
        RegionControl::from_query_mask(grid, &tokens, keys, self.mode)
    }
}

/// Everything that selects a transfer variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub mode: FusionMode,
    /// λ multiplying the style logits of rearranged attention.
    pub lambda_style: f64,
    /// Weight of the cross term in simple addition.
    pub mix: f64,
    /// Registry indices of the injected attention layers.
    pub layers: Vec<usize>,
    /// Half-open range of denoising steps with injection.
    pub window: (usize, usize),
    /// DDIM steps `T`.
    pub steps: usize,
    pub content_source: ContentSource,
    pub region: Option<RegionSpec>,
    /// Keep the full attention weights of every injected layer and step.
    pub dump_weights: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Rearranged,
            lambda_style: 1.2,
            mix: 0.5,
            layers: vec![4, 5],
            window: (5, 30),
            steps: 30,
            content_source: ContentSource::Running,
            region: None,
            dump_weights: false,
        }
    }
}

impl InjectionConfig {
    pub fn with_mode(mode: FusionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self, registry_len: usize) -> Result<()> {
        if self.steps < 2 {
            return Err(invalid!(
                "need at least 2 denoising steps, got {}",
                self.steps
            ));
        }
        let (start, end) = self.window;
        if start >= end || end > self.steps {
            return Err(invalid!(
                "window [{start}, {end}) must satisfy start < end <= steps ({})",
                self.steps
            ));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= registry_len) {
            return Err(invalid!(
                "layer {bad} outside the registry (0..{registry_len})"
            ));
        }
        if !(self.lambda_style >= 0.0 && self.lambda_style.is_finite()) {
            return Err(invalid!(
                "lambda_style {} must be finite and >= 0",
                self.lambda_style
            ));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(invalid!("mix {} outside [0, 1]", self.mix));
        }
        if self.region.is_some() && self.mode != FusionMode::Rearranged {
            return Err(invalid!("region control needs mode rearranged"));
        }
        Ok(())
    }

    /// Whether `layer` is replaced at denoising step `step`.
    pub fn is_active(&self, step: usize, layer: usize) -> bool {
        self.mode != FusionMode::None
            && (self.window.0..self.window.1).contains(&step)
            && self.layers.contains(&layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_operating_point() {
        let c = InjectionConfig::default();
        assert_eq!(c.steps, 30);
        assert_eq!(c.window, (5, 30));
        assert_eq!(c.lambda_style, 1.2);
        assert_eq!(c.layers, vec![4, 5]);
        assert_eq!(c.content_source, ContentSource::Running);
        c.validate(6).unwrap();
        assert!(!c.is_active(4, 4));
        assert!(c.is_active(5, 4) && c.is_active(29, 5));
        assert!(!c.is_active(10, 3));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = InjectionConfig::default();
        for bad in [
            InjectionConfig {
                window: (5, 5),
                ..base.clone()
            },
            InjectionConfig {
                window: (0, 31),
                ..base.clone()
            },
            InjectionConfig {
                layers: vec![6],
                ..base.clone()
            },
            InjectionConfig {
                lambda_style: -0.1,
                ..base.clone()
            },
            InjectionConfig {
                mix: 1.5,
                ..base.clone()
            },
            InjectionConfig {
                mode: FusionMode::NaiveCross,
                region: Some(RegionSpec::hard(RegionShape::RightHalf)),
                ..base.clone()
            },
        ] {
            assert!(bad.validate(6).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let c = InjectionConfig {
            region: Some(RegionSpec::hard(RegionShape::RightHalf)),
            ..InjectionConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<InjectionConfig>(&text).unwrap(), c);
        let partial: InjectionConfig = serde_json::from_str(r#"{"mode":"naive_cross"}"#).unwrap();
        assert_eq!(partial.mode, FusionMode::NaiveCross);
        assert_eq!(partial.window, (5, 30));
    }

    #[test]
    fn right_half_reduces_to_the_token_rule() {
        let spec = RegionSpec::hard(RegionShape::RightHalf);
        for side in [8, 16, 32] {
            let c = spec.control_for(32, (side, side), 3).unwrap();
            assert_eq!(c, RegionControl::right_half((side, side), 3));
        }
        assert!(spec.control_for(32, (12, 12), 3).is_err());
    }

    #[test]
    fn pixel_masks_sample_block_centres() {
        let mut mask = vec![false; 16];
        mask[3 * 4 + 3] = true; // pixel (3, 3) samples token (1, 1)
        let spec = RegionSpec::hard(RegionShape::Pixels {
            height: 4,
            width: 4,
            mask,
        });
        let c = spec.control_for(32, (2, 2), 1).unwrap();
        let inside: Vec<bool> = (0..4).map(|q| c.is_inside(q, 0)).collect();
        assert_eq!(inside, [false, false, false, true]);
    }
}
