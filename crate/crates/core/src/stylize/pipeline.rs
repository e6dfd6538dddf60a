use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ContentSource, FusionMode, InjectionConfig};
use crate::attention::{
    apply_weights, naive_style_cross, rearranged_attention_balanced, simple_addition_weights,
    style_mass, AttentionHook, AttentionInputs, FeatureMap, KvBlock, NoHook, Qkv, RegionControl,
};
use crate::data::save_image;
use crate::denoiser::{DenoiserModel, IMAGE_SIZE};
use crate::diffusion::{
    ddim_invert, ddim_sample, make_linear_schedule, ImageTensor, NoisePredictor, NoiseSchedule,
    Timestep, Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::numerics::tensor_file::{TensorData, TensorFile};
use crate::numerics::Matrix;

/// Keys and values captured at one layer, tagged with the denoising step
/// that produced them.
#[derive(Debug, Clone)]
pub struct TaggedKv {
    pub step: usize,
    pub keys: FeatureMap,
    pub values: FeatureMap,
}

/// Records keys/values at a fixed layer set for every step.
struct KvRecorder<'a> {
    layers: &'a [usize],
    captures: Vec<BTreeMap<usize, TaggedKv>>,
}

impl AttentionHook for KvRecorder<'_> {
    fn wants(&self, _: usize, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    fn attend(&mut self, step: usize, layer: usize, qkv: &Qkv) -> Result<Option<FeatureMap>> {
        if self.captures.len() <= step {
            self.captures.resize_with(step + 1, BTreeMap::new);
        }
        self.captures[step].insert(
            layer,
            TaggedKv {
                step,
                keys: qkv.k.clone(),
                values: qkv.v.clone(),
            },
        );
        Ok(None)
    }
}

/// The style path: inversion, then a plain reconstruction whose attention
/// keys/values are recorded at every step.
#[derive(Debug, Clone)]
pub struct StylePath {
    pub image: ImageTensor,
    pub trajectory: Trajectory,
    pub reconstruction: ImageTensor,
    captures: Vec<BTreeMap<usize, TaggedKv>>,
}

impl StylePath {
    pub fn compute(
        model: &DenoiserModel,
        image: &ImageTensor,
        schedule: &NoiseSchedule,
        layers: &[usize],
    ) -> Result<Self> {
        let trajectory = ddim_invert(image, schedule, model)?;
        let mut rec = KvRecorder {
            layers,
            captures: Vec::new(),
        };
        let reconstruction = ddim_sample(trajectory.x_t(), schedule, model, &mut rec)?;
        Ok(Self {
            image: image.clone(),
            trajectory,
            reconstruction,
            captures: rec.captures,
        })
    }

    pub fn features(&self, step: usize, layer: usize) -> Result<&TaggedKv> {
        self.captures
            .get(step)
            .and_then(|m| m.get(&layer))
            .ok_or_else(|| invalid!("no style features captured at step {step}, layer {layer}"))
    }
}

/// Attention statistics of one injected layer at one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStepDiagnostic {
    pub step: usize,
    pub layer: usize,
    /// Step tag of the style features that were consumed.
    pub style_step: usize,
    pub grid: (usize, usize),
    pub mean_style_mass: f64,
    /// Style mass of each query token, row-major over `grid`.
    pub token_style_mass: Vec<f64>,
    #[serde(skip)]
    pub weights: Option<Matrix>,
}

impl LayerStepDiagnostic {
    /// Mean style mass over query tokens whose column satisfies `keep`.
    pub fn mean_mass_where(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let w = self.grid.1;
        let (sum, n) = self
            .token_style_mass
            .iter()
            .enumerate()
            .filter(|(t, _)| keep(t % w))
            .fold((0.0, 0usize), |(s, n), (_, &m)| (s + m, n + 1));
        sum / n.max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct StyleTransferResult {
    pub image: ImageTensor,
    pub diagnostics: Vec<LayerStepDiagnostic>,
    pub config: InjectionConfig,
    pub seconds: f64,
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    config: &'a InjectionConfig,
    seconds: f64,
    mean_style_mass: BTreeMap<usize, f64>,
    diagnostics: &'a [LayerStepDiagnostic],
}

impl StyleTransferResult {
    /// Mean style mass per injected layer, over all injected steps.
    pub fn mean_style_mass_by_layer(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for d in &self.diagnostics {
            let e = acc.entry(d.layer).or_default();
            e.0 += d.mean_style_mass;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(l, (s, n))| (l, s / n as f64))
            .collect()
    }

    /// Writes `stylized.png`, `diagnostics.json` and, when weights were
    /// kept, `weights/step{S}_layer{L}.zstr`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_image(&self.image, &dir.join("stylized.png"))?;
        let file = DiagnosticsFile {
            config: &self.config,
            seconds: self.seconds,
            mean_style_mass: self.mean_style_mass_by_layer(),
            diagnostics: &self.diagnostics,
        };
        let path = dir.join("diagnostics.json");
        fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
        let with_weights: Vec<_> = self
            .diagnostics
            .iter()
            .filter_map(|d| d.weights.as_ref().map(|w| (d, w)))
            .collect();
        if !with_weights.is_empty() {
            let wdir = dir.join("weights");
            fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
            for (d, w) in with_weights {
                TensorFile::new(vec![w.rows(), w.cols()], TensorData::F64(w.data().to_vec()))?
                    .write(&wdir.join(format!("step{:02}_layer{}.zstr", d.step, d.layer)))?;
            }
        }
        Ok(())
    }
}

/// Replaces attention at the configured layers and steps of the content
/// path with the configured fusion.
struct FusionHook<'a> {
    config: &'a InjectionConfig,
    styles: &'a [StylePath],
    content_kv: Option<&'a [BTreeMap<usize, TaggedKv>]>,
    controls: BTreeMap<usize, RegionControl>,
    diagnostics: Vec<LayerStepDiagnostic>,
}

impl FusionHook<'_> {
    fn control(
        &mut self,
        layer: usize,
        grid: (usize, usize),
        keys: usize,
    ) -> Result<Option<&RegionControl>> {
        let Some(region) = &self.config.region else {
            return Ok(None);
        };
        if let std::collections::btree_map::Entry::Vacant(slot) = self.controls.entry(layer) {
            slot.insert(region.control_for(IMAGE_SIZE, grid, keys)?);
        }
        Ok(self.controls.get(&layer))
    }
}

impl AttentionHook for FusionHook<'_> {
    fn wants(&self, step: usize, layer: usize) -> bool {
        self.config.is_active(step, layer)
    }

    fn attend(&mut self, step: usize, layer: usize, qkv: &Qkv) -> Result<Option<FeatureMap>> {
        let (kc, vc) = match self.content_kv {
            None => (&qkv.k, &qkv.v),
            Some(kv) => {
                let t = kv
                    .get(step)
                    .and_then(|m| m.get(&layer))
                    .ok_or_else(|| invalid!("no trajectory features at step {step}"))?;
                (&t.keys, &t.values)
            }
        };
        let mut style_blocks = Vec::with_capacity(self.styles.len());
        let mut style_step = step;
        for (i, s) in self.styles.iter().enumerate() {
            let f = s.features(step, layer)?;
            if f.step != step {
                return Err(invalid!(
                    "style features from step {} consumed at step {step}",
                    f.step
                ));
            }
            style_step = f.step;
            style_blocks.push(KvBlock::style(i, f.keys.clone(), f.values.clone()));
        }
        let q = &qkv.q;
        let grid = q.spatial();
        let (out, weights) = match self.config.mode {
            FusionMode::None => return Ok(None),
            FusionMode::NaiveCross => {
                let keys: Vec<&Matrix> = style_blocks.iter().map(|b| b.keys.values()).collect();
                let values: Vec<&Matrix> = style_blocks.iter().map(|b| b.values.values()).collect();
                let ks = FeatureMap::flat(Matrix::vcat(&keys)?)?;
                let vs = FeatureMap::flat(Matrix::vcat(&values)?)?;
                let out = naive_style_cross(q, &ks, &vs, qkv.dim_scale)?;
                let mass = vec![1.0; q.tokens()];
                self.push(step, layer, style_step, grid, mass, None);
                return Ok(Some(out));
            }
            FusionMode::SimpleAddition => {
                let mut blocks = style_blocks;
                blocks.push(KvBlock::content(kc.clone(), vc.clone()));
                let inputs = AttentionInputs::new(q.clone(), blocks, qkv.dim_scale)?;
                let weights = simple_addition_weights(&inputs, self.config.mix)?;
                let values: Vec<&Matrix> =
                    inputs.blocks.iter().map(|b| b.values.values()).collect();
                let out = q.with_values(apply_weights(&weights, &values)?)?;
                (out, weights)
            }
            FusionMode::Rearranged => {
                let keys = style_blocks[0].keys.tokens();
                let mut blocks = style_blocks;
                blocks.push(KvBlock::content(kc.clone(), vc.clone()));
                let inputs = AttentionInputs::new(q.clone(), blocks, qkv.dim_scale)?;
                let lambda = self.config.lambda_style;
                let control = self.control(layer, grid, keys)?;
                rearranged_attention_balanced(&inputs, lambda, control)?
            }
        };
        let mass = style_mass(&weights);
        let kept = self.config.dump_weights.then(|| weights.matrix.clone());
        self.push(step, layer, style_step, grid, mass, kept);
        Ok(Some(out))
    }
}

impl FusionHook<'_> {
    fn push(
        &mut self,
        step: usize,
        layer: usize,
        style_step: usize,
        grid: (usize, usize),
        token_style_mass: Vec<f64>,
        weights: Option<Matrix>,
    ) {
        let mean = token_style_mass.iter().sum::<f64>() / token_style_mass.len() as f64;
        self.diagnostics.push(LayerStepDiagnostic {
            step,
            layer,
            style_step,
            grid,
            mean_style_mass: mean,
            token_style_mass,
            weights,
        });
    }
}

/// Inversions and style-path features for one (content, styles) pair,
/// reusable across injection configs with the same step count.
pub struct TransferSession<'m> {
    model: &'m DenoiserModel,
    schedule: NoiseSchedule,
    content: ImageTensor,
    content_trajectory: Trajectory,
    styles: Vec<StylePath>,
    layers: Vec<usize>,
    reconstruction: OnceCell<ImageTensor>,
    trajectory_kv: OnceCell<Vec<BTreeMap<usize, TaggedKv>>>,
    pub precompute_seconds: f64,
}

impl<'m> TransferSession<'m> {
    /// Inverts the content and every style image with `steps` DDIM steps
    /// and records style keys/values at `layers` along each style
    /// reconstruction.
    pub fn new(
        model: &'m DenoiserModel,
        content: &ImageTensor,
        styles: &[ImageTensor],
        steps: usize,
        layers: &[usize],
    ) -> Result<Self> {
        let start = Instant::now();
        if styles.is_empty() {
            return Err(invalid!("at least one style image is required"));
        }
        for &l in layers {
            model.check_layer(l)?;
        }
        for img in std::iter::once(content).chain(styles) {
            check_image(img)?;
        }
        let schedule = make_linear_schedule(steps)?;
        let content_trajectory = ddim_invert(content, &schedule, model)?;
        let styles = styles
            .iter()
            .map(|s| StylePath::compute(model, s, &schedule, layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            schedule,
            content: content.clone(),
            content_trajectory,
            styles,
            layers: layers.to_vec(),
            reconstruction: OnceCell::new(),
            trajectory_kv: OnceCell::new(),
            precompute_seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn content(&self) -> &ImageTensor {
        &self.content
    }

    pub fn content_trajectory(&self) -> &Trajectory {
        &self.content_trajectory
    }

    pub fn styles(&self) -> &[StylePath] {
        &self.styles
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Plain DDIM sampling from the content inversion.
    pub fn reconstruction(&self) -> Result<&ImageTensor> {
        if let Some(r) = self.reconstruction.get() {
            return Ok(r);
        }
        let r = ddim_sample(
            self.content_trajectory.x_t(),
            &self.schedule,
            self.model,
            &mut NoHook,
        )?;
        Ok(self.reconstruction.get_or_init(|| r))
    }

    /// Keys/values of the content inversion latents, step-aligned with
    /// the sampler (step `k` reads latent `T − k`).
    fn trajectory_kv(&self) -> Result<&[BTreeMap<usize, TaggedKv>]> {
        if let Some(kv) = self.trajectory_kv.get() {
            return Ok(kv);
        }
        let steps = self.schedule.steps();
        let mut rec = KvRecorder {
            layers: &self.layers,
            captures: Vec::new(),
        };
        for k in 0..steps {
            let t = steps - k;
            let at = Timestep::of(&self.schedule, t);
            self.model
                .predict(&self.content_trajectory.latents[t], at, k, &mut rec)?;
        }
        Ok(self.trajectory_kv.get_or_init(|| rec.captures))
    }

    pub fn run(&self, config: &InjectionConfig) -> Result<StyleTransferResult> {
        let start = Instant::now();
        config.validate(self.model.registry().len())?;
        if config.steps != self.schedule.steps() {
            return Err(invalid!(
                "config asks for {} steps, session was prepared with {}",
                config.steps,
                self.schedule.steps()
            ));
        }
        if config.mode != FusionMode::None {
            if let Some(&l) = config.layers.iter().find(|l| !self.layers.contains(l)) {
                return Err(invalid!("layer {l} was not captured by this session"));
            }
        }
        let x_t = self.content_trajectory.x_t();
        let (image, diagnostics) = if config.mode == FusionMode::None {
            (self.reconstruction()?.clone(), Vec::new())
        } else {
            let content_kv = match config.content_source {
                ContentSource::Running => None,
                ContentSource::Trajectory => Some(self.trajectory_kv()?),
            };
            let mut hook = FusionHook {
                config,
                styles: &self.styles,
                content_kv,
                controls: BTreeMap::new(),
                diagnostics: Vec::new(),
            };
            let image = ddim_sample(x_t, &self.schedule, self.model, &mut hook)?;
            (image, hook.diagnostics)
        };
        if !image.is_finite() {
            return Err(Error::NonFinite("stylized image".into()));
        }
        Ok(StyleTransferResult {
            image,
            diagnostics,
            config: config.clone(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn check_image(img: &ImageTensor) -> Result<()> {
    if img.shape() != (3, IMAGE_SIZE, IMAGE_SIZE) {
        return Err(invalid!("images must be 3x32x32, got {:?}", img.shape()));
    }
    let (lo, hi) = img.min_max();
    if lo < -1.0 || hi > 1.0 {
        return Err(invalid!(
            "image values must lie in [-1, 1], got [{lo}, {hi}]"
        ));
    }
    Ok(())
}

/// Inverts content and styles, denoises them in lockstep and injects the
/// configured attention fusion into the content path.
pub fn dual_path_transfer(
    content: &ImageTensor,
    styles: &[ImageTensor],
    model: &DenoiserModel,
    config: &InjectionConfig,
) -> Result<StyleTransferResult> {
    config.validate(model.registry().len())?;
    TransferSession::new(model, content, styles, config.steps, &config.layers)?.run(config)
}

/// [`dual_path_transfer`] with a region mask on the style logits.
pub fn regional_transfer(
    content: &ImageTensor,
    style: &ImageTensor,
    model: &DenoiserModel,
    config: &InjectionConfig,
) -> Result<StyleTransferResult> {
    if config.region.is_none() {
        return Err(invalid!("regional transfer needs a region in the config"));
    }
    dual_path_transfer(content, std::slice::from_ref(style), model, config)
}
