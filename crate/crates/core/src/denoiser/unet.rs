use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kernels::sinusoidal_embedding;
use super::tape::{Tape, Var};
use super::Tensor;
use crate::attention::{AttentionHook, FeatureMap, NoHook, Qkv};
use crate::diffusion::{ImageTensor, NoisePredictor, Timestep, TRAIN_STEPS};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Image side length the U-Net is built for.
pub const IMAGE_SIZE: usize = 32;
/// Colour channels in and out.
pub const IMAGE_CHANNELS: usize = 3;

/// Width knobs of the toy U-Net. Everything else is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Channel width at 32²; the 16² and 8² stages use twice this.
    pub base_channels: usize,
    /// Group count of every group norm.
    pub groups: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            base_channels: 32,
            groups: 8,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || !c.is_multiple_of(2) || self.groups == 0 || !c.is_multiple_of(self.groups) {
            return Err(invalid!(
                "base_channels {c} must be even and divisible by groups {}",
                self.groups
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Bottleneck,
    Decoder,
}

/// One entry of the attention registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayerInfo {
    pub index: usize,
    pub name: &'static str,
    pub stage: Stage,
    /// Side length of the square token grid.
    pub resolution: usize,
    pub channels: usize,
}

impl AttentionLayerInfo {
    pub fn tokens(&self) -> usize {
        self.resolution * self.resolution
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// Uniform in `±1/√fan_in`.
    Fan(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinP {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResP {
    norm1: NormP,
    conv1: ConvP,
    temb: LinP,
    norm2: NormP,
    conv2: ConvP,
    skip: Option<ConvP>,
}

#[derive(Debug, Clone, Copy)]
struct AttnP {
    layer: usize,
    norm: NormP,
    q: ConvP,
    k: ConvP,
    v: ConvP,
    out: ConvP,
    channels: usize,
}

/// Parameter indices of every block, in forward order.
#[derive(Debug, Clone)]
struct Layout {
    temb1: LinP,
    temb2: LinP,
    conv_in: ConvP,
    res_in: ResP,
    down1: ConvP,
    res_enc16: ResP,
    attn_enc16: AttnP,
    down2: ConvP,
    res_enc8: ResP,
    attn_enc8: AttnP,
    res_mid: ResP,
    attn_mid: AttnP,
    res_dec8: ResP,
    attn_dec8: AttnP,
    up1: ConvP,
    res_dec16: ResP,
    attn_dec16: AttnP,
    res_dec16b: ResP,
    attn_dec16b: AttnP,
    up2: ConvP,
    res_dec32: ResP,
    norm_out: NormP,
    conv_out: ConvP,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    temb_dim: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvP {
        let w = self.param(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            Init::Fan(cin * k * k),
        );
        let b = self.param(format!("{name}.bias"), vec![cout], Init::Zeros);
        ConvP {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            g: self.param(format!("{name}.gamma"), vec![c], Init::Ones),
            b: self.param(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinP {
        LinP {
            w: self.param(format!("{name}.weight"), vec![o, i], Init::Fan(i)),
            b: self.param(format!("{name}.bias"), vec![o], Init::Zeros),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> ResP {
        let temb_dim = self.temb_dim;
        ResP {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
            temb: self.linear(&format!("{name}.temb"), temb_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn attn(&mut self, layer: usize, name: &str, c: usize) -> AttnP {
        AttnP {
            layer,
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.conv(&format!("{name}.q"), c, c, 1, 1),
            k: self.conv(&format!("{name}.k"), c, c, 1, 1),
            v: self.conv(&format!("{name}.v"), c, c, 1, 1),
            out: self.conv(&format!("{name}.out"), c, c, 1, 1),
            channels: c,
        }
    }
}

fn build_layout(arch: Architecture) -> (Layout, Vec<ParamSpec>) {
    let c = arch.base_channels;
    let c2 = 2 * c;
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        temb_dim: 4 * c,
    };
    let layout = Layout {
        temb1: b.linear("temb.lin1", c, 4 * c),
        temb2: b.linear("temb.lin2", 4 * c, 4 * c),
        conv_in: b.conv("conv_in", IMAGE_CHANNELS, c, 3, 1),
        res_in: b.res("enc32.res", c, c),
        down1: b.conv("down16", c, c, 3, 2),
        res_enc16: b.res("enc16.res", c, c2),
        attn_enc16: b.attn(0, "enc16.attn", c2),
        down2: b.conv("down8", c2, c2, 3, 2),
        res_enc8: b.res("enc8.res", c2, c2),
        attn_enc8: b.attn(1, "enc8.attn", c2),
        res_mid: b.res("mid8.res", c2, c2),
        attn_mid: b.attn(2, "mid8.attn", c2),
        res_dec8: b.res("dec8.res", 2 * c2, c2),
        attn_dec8: b.attn(3, "dec8.attn", c2),
        up1: b.conv("up16", c2, c2, 3, 1),
        res_dec16: b.res("dec16.res", 2 * c2, c2),
        attn_dec16: b.attn(4, "dec16.attn", c2),
        res_dec16b: b.res("dec16b.res", c2, c2),
        attn_dec16b: b.attn(5, "dec16b.attn", c2),
        up2: b.conv("up32", c2, c2, 3, 1),
        res_dec32: b.res("dec32.res", c2 + c, c),
        norm_out: b.norm("out.norm", c),
        conv_out: b.conv("out.conv", c, IMAGE_CHANNELS, 3, 1),
    };
    (layout, b.specs)
}

fn registry(arch: Architecture) -> Vec<AttentionLayerInfo> {
    let c2 = 2 * arch.base_channels;
    [
        ("enc16", Stage::Encoder, 16),
        ("enc8", Stage::Encoder, 8),
        ("mid8", Stage::Bottleneck, 8),
        ("dec8", Stage::Decoder, 8),
        ("dec16", Stage::Decoder, 16),
        ("dec16b", Stage::Decoder, 16),
    ]
    .into_iter()
    .enumerate()
    .map(|(index, (name, stage, resolution))| AttentionLayerInfo {
        index,
        name,
        stage,
        resolution,
        channels: c2,
    })
    .collect()
}

/// Captured projections and the layer's own attention output.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub qkv: Qkv,
    /// Attention output before the output projection, `[tokens x channels]`.
    pub output: FeatureMap,
}

/// Per-pass hook state threaded through the attention blocks.
struct HookCtx<'a> {
    step: usize,
    hook: &'a mut dyn AttentionHook,
    record: Option<&'a mut BTreeMap<usize, LayerCapture>>,
}

/// The toy noise predictor: parameters plus the attention registry.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    arch: Architecture,
    seed: u64,
    params: Vec<Tensor>,
    specs: Vec<ParamSpec>,
    layout: Layout,
    registry: Vec<AttentionLayerInfo>,
}

/// Builds the default-width U-Net with seeded initialization.
pub fn build_toy_unet(seed: u64) -> DenoiserModel {
    DenoiserModel::new(Architecture::default(), seed).expect("default architecture is valid")
}

impl DenoiserModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = build_layout(arch);
        let root = SeededRng::new(seed);
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Fan(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        let mut rng = root.split(i as u64);
                        (0..n)
                            .map(|_| rng.uniform_in(-bound, bound) as f32)
                            .collect()
                    }
                };
                Tensor::new(spec.shape.clone(), data).expect("spec shape")
            })
            .collect();
        Ok(Self {
            arch,
            seed,
            params,
            specs,
            layout,
            registry: registry(arch),
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub(crate) fn from_params(arch: Architecture, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::new(arch, seed)?;
        if params.len() != model.params.len() {
            return Err(shape_err!(
                "{} tensors for {} parameters",
                params.len(),
                model.params.len()
            ));
        }
        for (spec, p) in model.specs.iter().zip(&params) {
            if p.shape() != spec.shape.as_slice() {
                return Err(shape_err!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                ));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(spec.name.clone()));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// Seed the parameters were initialised from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn registry(&self) -> &[AttentionLayerInfo] {
        &self.registry
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Hash of the architecture descriptor and every parameter name/shape.
    pub fn arch_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.arch).as_bytes());
        for s in &self.specs {
            h.update(format!("{}{:?};", s.name, s.shape).as_bytes());
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Hash of the parameter bits.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.registry.len() {
            return Err(invalid!(
                "attention layer {layer} out of range (model has {})",
                self.registry.len()
            ));
        }
        Ok(())
    }

    /// `ε̂(x_t, t)` for one image at training-grid timestep `t`.
    pub fn predict_noise(&self, x: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self.run_single(x, t, 0, &mut NoHook, None)
    }

    /// Like [`predict_noise`](Self::predict_noise) but also returns the
    /// projections and attention output of each requested layer.
    pub fn predict_noise_with_capture(
        &self,
        x: &ImageTensor,
        t: usize,
        layers: &[usize],
    ) -> Result<(ImageTensor, BTreeMap<usize, LayerCapture>)> {
        for &l in layers {
            self.check_layer(l)?;
        }
        let mut hook = Select(layers);
        let mut record = BTreeMap::new();
        let eps = self.run_single(x, t, 0, &mut hook, Some(&mut record))?;
        Ok((eps, record))
    }

    /// Runs with `hook` allowed to replace attention outputs.
    pub fn predict_noise_with_injection(
        &self,
        x: &ImageTensor,
        t: usize,
        step: usize,
        hook: &mut dyn AttentionHook,
    ) -> Result<ImageTensor> {
        self.run_single(x, t, step, hook, None)
    }

    /// Activations of the first convolution, `[pixels x base_channels]`.
    /// That layer sees the image before any timestep conditioning.
    pub fn encoder_features(&self, x: &ImageTensor) -> Result<Matrix> {
        self.check_input(x, 0)?;
        let input = Tensor::new(
            vec![1, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            x.data().iter().map(|&v| v as f32).collect(),
        )?;
        let mut tape = Tape::new(&self.params);
        let xv = tape.leaf(input);
        let f = self.conv(&mut tape, xv, self.layout.conv_in);
        let t = tape.value(f);
        let (_, c, h, w) = t.nchw();
        let hw = h * w;
        Ok(Matrix::from_fn(hw, c, |i, ch| t.data()[ch * hw + i] as f64))
    }

    fn check_input(&self, x: &ImageTensor, t: usize) -> Result<()> {
        if x.shape() != (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(shape_err!(
                "denoiser input {:?}, expected ({IMAGE_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE})",
                x.shape()
            ));
        }
        if t > TRAIN_STEPS {
            return Err(invalid!("timestep {t} outside 0..={TRAIN_STEPS}"));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        Ok(())
    }

    fn run_single(
        &self,
        x: &ImageTensor,
        t: usize,
        step: usize,
        hook: &mut dyn AttentionHook,
        record: Option<&mut BTreeMap<usize, LayerCapture>>,
    ) -> Result<ImageTensor> {
        self.check_input(x, t)?;
        let input = Tensor::new(
            vec![1, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
            x.data().iter().map(|&v| v as f32).collect(),
        )?;
        let mut tape = Tape::new(&self.params);
        let mut ctx = HookCtx { step, hook, record };
        let out = self.forward(&mut tape, input, &[t as f32], &mut ctx)?;
        let data = tape.value(out).data().iter().map(|&v| v as f64).collect();
        let eps = ImageTensor::new(IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE, data)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!("noise prediction at t={t}")));
        }
        Ok(eps)
    }

    /// Batched forward for training: `x` is `[n, 3, 32, 32]`.
    pub(crate) fn forward_batch(&self, tape: &mut Tape<'_>, x: Tensor, t: &[f32]) -> Result<Var> {
        let mut hook = NoHook;
        let mut ctx = HookCtx {
            step: 0,
            hook: &mut hook,
            record: None,
        };
        self.forward(tape, x, t, &mut ctx)
    }

    fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Tensor,
        t: &[f32],
        ctx: &mut HookCtx<'_>,
    ) -> Result<Var> {
        let l = &self.layout;
        let c = self.arch.base_channels;
        let mut emb = Vec::with_capacity(t.len() * c);
        for &ti in t {
            emb.extend(sinusoidal_embedding(ti, c));
        }
        let emb = tape.leaf(Tensor::new(vec![t.len(), c], emb)?);
        let emb = self.linear(tape, emb, l.temb1);
        let emb = tape.silu(emb);
        let temb = self.linear(tape, emb, l.temb2);
        let temb = tape.silu(temb);

        let x = tape.leaf(x);
        let h = self.conv(tape, x, l.conv_in);
        let s32 = self.res(tape, h, temb, l.res_in);
        let h = self.conv(tape, s32, l.down1);
        let h = self.res(tape, h, temb, l.res_enc16);
        let s16 = self.attn(tape, h, l.attn_enc16, ctx)?;
        let h = self.conv(tape, s16, l.down2);
        let h = self.res(tape, h, temb, l.res_enc8);
        let s8 = self.attn(tape, h, l.attn_enc8, ctx)?;
        let h = self.res(tape, s8, temb, l.res_mid);
        let h = self.attn(tape, h, l.attn_mid, ctx)?;

        let h = tape.concat(h, s8);
        let h = self.res(tape, h, temb, l.res_dec8);
        let h = self.attn(tape, h, l.attn_dec8, ctx)?;
        let h = tape.upsample(h);
        let h = self.conv(tape, h, l.up1);
        let h = tape.concat(h, s16);
        let h = self.res(tape, h, temb, l.res_dec16);
        let h = self.attn(tape, h, l.attn_dec16, ctx)?;
        let h = self.res(tape, h, temb, l.res_dec16b);
        let h = self.attn(tape, h, l.attn_dec16b, ctx)?;
        let h = tape.upsample(h);
        let h = self.conv(tape, h, l.up2);
        let h = tape.concat(h, s32);
        let h = self.res(tape, h, temb, l.res_dec32);
        let h = self.norm(tape, h, l.norm_out);
        let h = tape.silu(h);
        Ok(self.conv(tape, h, l.conv_out))
    }

    fn conv(&self, tape: &mut Tape<'_>, x: Var, p: ConvP) -> Var {
        let (w, b) = (tape.param(p.w), tape.param(p.b));
        tape.conv(x, w, b, p.stride, p.pad)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, p: NormP) -> Var {
        let (g, b) = (tape.param(p.g), tape.param(p.b));
        tape.group_norm(x, g, b, self.arch.groups)
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, p: LinP) -> Var {
        let (w, b) = (tape.param(p.w), tape.param(p.b));
        tape.linear(x, w, b)
    }

    fn res(&self, tape: &mut Tape<'_>, x: Var, temb: Var, p: ResP) -> Var {
        let h = self.norm(tape, x, p.norm1);
        let h = tape.silu(h);
        let h = self.conv(tape, h, p.conv1);
        let shift = self.linear(tape, temb, p.temb);
        let h = tape.add_channel(h, shift);
        let h = self.norm(tape, h, p.norm2);
        let h = tape.silu(h);
        let h = self.conv(tape, h, p.conv2);
        let skip = match p.skip {
            Some(s) => self.conv(tape, x, s),
            None => x,
        };
        tape.add(skip, h)
    }

    fn attn(&self, tape: &mut Tape<'_>, x: Var, p: AttnP, ctx: &mut HookCtx<'_>) -> Result<Var> {
        let h = self.norm(tape, x, p.norm);
        let q = self.conv(tape, h, p.q);
        let k = self.conv(tape, h, p.k);
        let v = self.conv(tape, h, p.v);
        let scale = 1.0 / (p.channels as f64).sqrt();
        let wants = ctx.hook.wants(ctx.step, p.layer);
        let a = if wants {
            let (step, layer) = (ctx.step, p.layer);
            let qkv = Qkv {
                q: to_feature_map(tape.value(q))?,
                k: to_feature_map(tape.value(k))?,
                v: to_feature_map(tape.value(v))?,
                dim_scale: scale,
            };
            let replaced = ctx
                .hook
                .attend(step, layer, &qkv)
                .map_err(|e| e.at_layer(step, layer))?;
            match replaced {
                Some(fm) => {
                    let shape = tape.value(q).shape().to_vec();
                    let t = from_feature_map(&fm, &shape).map_err(|e| e.at_layer(step, layer))?;
                    tape.leaf(t)
                }
                None => {
                    let a = tape.attention(q, k, v, scale);
                    if let Some(record) = ctx.record.as_deref_mut() {
                        let output = to_feature_map(tape.value(a))?;
                        record.insert(layer, LayerCapture { qkv, output });
                    }
                    a
                }
            }
        } else {
            tape.attention(q, k, v, scale)
        };
        let o = self.conv(tape, a, p.out);
        Ok(tape.add(x, o))
    }
}

/// Hook that asks for a fixed layer set and never overrides.
struct Select<'a>(&'a [usize]);

impl AttentionHook for Select<'_> {
    fn wants(&self, _: usize, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    fn attend(&mut self, _: usize, _: usize, _: &Qkv) -> Result<Option<FeatureMap>> {
        Ok(None)
    }
}

/// `[1, d, h, w]` planar tensor to a token-major `[h·w x d]` map.
fn to_feature_map(t: &Tensor) -> Result<FeatureMap> {
    let (n, d, h, w) = t.nchw();
    if n != 1 {
        return Err(invalid!("attention hooks need batch size 1, got {n}"));
    }
    let hw = h * w;
    let data = t.data();
    let m = Matrix::from_fn(hw, d, |i, c| data[c * hw + i] as f64);
    FeatureMap::new(m, h, w)
}

fn from_feature_map(fm: &FeatureMap, shape: &[usize]) -> Result<Tensor> {
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    if fm.tokens() != h * w || fm.channels() != d {
        return Err(shape_err!(
            "attention override is {}x{}, layer expects {}x{}",
            fm.tokens(),
            fm.channels(),
            h * w,
            d
        ));
    }
    let hw = h * w;
    let mut data = vec![0.0; d * hw];
    for i in 0..hw {
        for (c, &v) in fm.values().row(i).iter().enumerate() {
            data[c * hw + i] = v as f32;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

impl NoisePredictor for DenoiserModel {
    fn predict(
        &self,
        x: &ImageTensor,
        at: Timestep,
        step: usize,
        hook: &mut dyn AttentionHook,
    ) -> Result<ImageTensor> {
        self.run_single(x, at.grid, step, hook, None)
    }
}
