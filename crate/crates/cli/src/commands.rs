use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use zstar::analysis::{logit_histogram, similarity_heatmap, MetricReport};
use zstar::attention::{naive_style_cross, self_attention, ControlMode, GradientAxis};
use zstar::data::{generate, load_dataset, load_image, save_image, DatasetSpec};
use zstar::denoiser::{
    load_checkpoint, save_checkpoint, train, Architecture, DenoiserModel, TrainConfig,
};
use zstar::diffusion::{ddim_invert, ddim_sample, make_linear_schedule, ImageTensor, Trajectory};
use zstar::numerics::SeededRng;
use zstar::stylize::{
    ablation_sweep, parse_window, AblationAxis, AblationTable, ContentSource, FusionMode,
    InjectionConfig, RegionShape, RegionSpec, TransferSession, ABLATION_CSV,
};

use crate::error::{io_err, CliError};
use crate::verify;
use crate::Global;

type Result<T> = std::result::Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_err(path, e))
}

fn load_model(dir: &Path) -> Result<DenoiserModel> {
    if !dir.join(zstar::denoiser::MANIFEST_FILE).exists() {
        return Err(invalid(format!("{} holds no checkpoint", dir.display())));
    }
    Ok(load_checkpoint(dir)?.0)
}

fn image(path: &Path) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(invalid(format!("{} does not exist", path.display())));
    }
    Ok(load_image(path)?)
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Images per family.
    #[arg(long, default_value_t = 8000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    resolution: u32,
}

impl GenData {
    pub fn run(&self, g: &Global) -> Result<()> {
        let spec = DatasetSpec {
            count: self.count,
            seed: g.seed,
            resolution: self.resolution,
        };
        spec.validate()?;
        let manifest = generate(&spec, &g.out)?;
        println!(
            "wrote {} images to {}",
            manifest.entries.len(),
            g.out.display()
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Train {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Base channel width of the U-Net.
    #[arg(long, default_value_t = Architecture::default().base_channels)]
    width: usize,
    /// GroupNorm groups.
    #[arg(long, default_value_t = Architecture::default().groups)]
    groups: usize,
}

impl Train {
    pub fn run(&self, g: &Global) -> Result<()> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        cfg.seed = g.seed;
        cfg.dataset = Some(self.data.clone());
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.ema_decay {
            cfg.ema_decay = v;
        }
        cfg.validate()?;
        let arch = Architecture {
            base_channels: self.width,
            groups: self.groups,
        };
        arch.validate()?;
        let data = load_dataset(&self.data)?.union();
        let model = DenoiserModel::new(arch, g.seed)?;
        log::info!(
            "training {} parameters on {} images",
            model.parameter_count(),
            data.len()
        );
        let outcome = train(model, &cfg, &data)?;
        let dir = g.out.join("model");
        save_checkpoint(&outcome.ema, &dir, Some(&cfg))?;
        let losses: Vec<String> = outcome
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| format!("{e},{l}"))
            .collect();
        let path = g.out.join("losses.csv");
        fs::write(&path, format!("epoch,loss\n{}\n", losses.join("\n")))
            .map_err(|e| io_err(&path, e))?;
        println!(
            "final loss {:.5}; checkpoint in {}",
            outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
            dir.display()
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Invert {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 30)]
    steps: usize,
}

impl Invert {
    pub fn run(&self, g: &Global) -> Result<()> {
        let schedule = make_linear_schedule(self.steps)?;
        let x = image(&self.image)?;
        let model = load_model(&self.model)?;
        let traj = ddim_invert(&x, &schedule, &model)?;
        let dir = g.out.join("trajectory");
        traj.save(&dir)?;
        println!("trajectory of {} steps in {}", self.steps, dir.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    model: PathBuf,
    /// Trajectory directory from `invert`; without it sampling starts
    /// from Gaussian noise drawn with `--seed`.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    steps: usize,
}

impl Sample {
    pub fn run(&self, g: &Global) -> Result<()> {
        let model = load_model(&self.model)?;
        let (x_t, schedule) = match &self.trajectory {
            Some(dir) => {
                let t = Trajectory::load(dir)?;
                (t.x_t().clone(), t.schedule)
            }
            None => {
                let mut rng = SeededRng::new(g.seed);
                let s = zstar::denoiser::IMAGE_SIZE;
                (
                    ImageTensor::noise(zstar::denoiser::IMAGE_CHANNELS, s, s, &mut rng),
                    make_linear_schedule(self.steps)?,
                )
            }
        };
        let x = ddim_sample(&x_t, &schedule, &model, &mut zstar::attention::NoHook)?;
        let path = g.out.join("sample.png");
        save_image(&x.map(|v| v.clamp(-1.0, 1.0)), &path)?;
        println!("{}", path.display());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    NaiveCross,
    SimpleAddition,
    Rearranged,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => FusionMode::None,
            ModeArg::NaiveCross => FusionMode::NaiveCross,
            ModeArg::SimpleAddition => FusionMode::SimpleAddition,
            ModeArg::Rearranged => FusionMode::Rearranged,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Running,
    Trajectory,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GradientArg {
    Hard,
    Horizontal,
    Vertical,
}

/// Injection flags shared by `transfer` and `ablate`.
#[derive(Debug, Args)]
struct InjectionArgs {
    /// Injection config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Style logit scale λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Cross weight of simple addition.
    #[arg(long)]
    mix: Option<f64>,
    /// Denoising steps `T`.
    #[arg(long)]
    steps: Option<usize>,
    /// Injected steps as a half-open range `start:end` of denoising step
    /// indices, counted from the noisiest step (0) to the last (T-1).
    #[arg(long, value_parser = parse_window_arg)]
    window: Option<(usize, usize)>,
    /// Comma-separated attention registry indices.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    content_source: Option<SourceArg>,
    /// Region `right_half`, `left_half`, `full`, `empty`, or a PNG mask
    /// whose non-black pixels are inside.
    #[arg(long)]
    region: Option<String>,
    /// How style logits inside the region are treated.
    #[arg(long, value_enum, default_value = "hard")]
    region_mode: GradientArg,
    /// Keep every injected attention matrix as a ZSTR file.
    #[arg(long)]
    dump_weights: bool,
}

fn parse_window_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_window(s).map_err(|e| e.to_string())
}

impl InjectionArgs {
    fn config(&self) -> Result<InjectionConfig> {
        let mut c: InjectionConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => InjectionConfig::default(),
        };
        if let Some(m) = self.mode {
            c.mode = m.into();
        }
        if let Some(v) = self.lambda {
            c.lambda_style = v;
        }
        if let Some(v) = self.mix {
            c.mix = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
            if self.window.is_none() && c.window.1 > v {
                c.window.1 = v;
            }
        }
        if let Some(w) = self.window {
            c.window = w;
        }
        if let Some(l) = &self.layers {
            c.layers = l.clone();
        }
        if let Some(s) = self.content_source {
            c.content_source = match s {
                SourceArg::Running => ContentSource::Running,
                SourceArg::Trajectory => ContentSource::Trajectory,
            };
        }
        if let Some(r) = &self.region {
            let mode = match self.region_mode {
                GradientArg::Hard => ControlMode::Hard,
                GradientArg::Horizontal => ControlMode::full_gradient(GradientAxis::Horizontal),
                GradientArg::Vertical => ControlMode::full_gradient(GradientAxis::Vertical),
            };
            c.region = Some(RegionSpec {
                shape: region_shape(r)?,
                mode,
            });
        }
        c.dump_weights |= self.dump_weights;
        Ok(c)
    }
}

fn region_shape(s: &str) -> Result<RegionShape> {
    Ok(match s {
        "right_half" => RegionShape::RightHalf,
        "left_half" => RegionShape::LeftHalf,
        "full" => RegionShape::Full,
        "empty" => RegionShape::Empty,
        path => {
            let m = image(Path::new(path))?;
            let (_, h, w) = m.shape();
            let mask = (0..h * w)
                .map(|p| (0..3).any(|c| m.get(c, p / w, p % w) > -1.0))
                .collect();
            RegionShape::Pixels {
                height: h,
                width: w,
                mask,
            }
        }
    })
}

#[derive(Debug, Args)]
pub struct Transfer {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    content: PathBuf,
    /// Style image; repeat for several styles.
    #[arg(long, required = true)]
    style: Vec<PathBuf>,
    #[command(flatten)]
    injection: InjectionArgs,
}

impl Transfer {
    pub fn run(&self, g: &Global) -> Result<()> {
        let config = self.injection.config()?;
        let content = image(&self.content)?;
        let styles = self
            .style
            .iter()
            .map(|p| image(p))
            .collect::<Result<Vec<_>>>()?;
        let model = load_model(&self.model)?;
        config.validate(model.registry().len())?;
        let session =
            TransferSession::new(&model, &content, &styles, config.steps, &config.layers)?;
        let result = session.run(&config)?;
        result.write(&g.out)?;
        let report = MetricReport::compute(
            &model,
            &result.image,
            &content,
            &styles[0],
            result.mean_style_mass_by_layer(),
        )?;
        write_json(&g.out.join("metrics.json"), &report)?;
        println!(
            "content_preservation {:.4}, style_affinity {:.4}; results in {}",
            report.content_preservation,
            report.style_affinity,
            g.out.display()
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: PathBuf,
    /// Swept axis `name=v1,v2,...` with name one of lambda, mix, start,
    /// end, window (`a:b` values), layers (`4+5` values) or mode. Repeat
    /// for a cartesian product.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[command(flatten)]
    injection: InjectionArgs,
}

impl Ablate {
    pub fn run(&self, g: &Global) -> Result<()> {
        let base = self.injection.config()?;
        let axes = self
            .grid
            .iter()
            .map(|s| AblationAxis::parse(s))
            .collect::<zstar::Result<Vec<_>>>()?;
        let content = image(&self.content)?;
        let style = image(&self.style)?;
        let model = load_model(&self.model)?;
        let table = ablation_sweep(&model, &content, &style, &base, &axes, Some(&g.out))?;
        println!(
            "{} cells ({} failed); table in {}",
            table.rows.len(),
            table.failures(),
            g.out.join(ABLATION_CSV).display()
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Verify {
    /// Random instances per algebraic check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

impl Verify {
    pub fn run(&self, g: &Global) -> Result<()> {
        let rows = verify::run_suite(g.seed, self.instances);
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut failed = 0;
        for r in &rows {
            let status = if r.passed { "PASS" } else { "FAIL" };
            println!("{status}  {:width$}  {}", r.name, r.detail);
            failed += usize::from(!r.passed);
        }
        write_json(&g.out.join("verify.json"), &rows)?;
        if failed > 0 {
            return Err(CliError::Runtime(format!(
                "{failed} of {} checks failed",
                rows.len()
            )));
        }
        println!("all {} checks passed", rows.len());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Analyze {
    /// Ablation table to check: style affinity should not fall as λ
    /// grows and content preservation should not fall as the window
    /// start grows.
    #[arg(long, conflicts_with_all = ["model"])]
    table: Option<PathBuf>,
    /// Largest tolerated drop between neighbouring sweep values.
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    /// Exit with status 2 when an ordering check fails.
    #[arg(long)]
    strict: bool,
    /// Checkpoint for attention diagnostics.
    #[arg(long, requires_all = ["content", "style"])]
    model: Option<PathBuf>,
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    style: Option<PathBuf>,
    /// Stylized output to score against `--content` and `--style`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layer: usize,
    /// Denoising step whose latents are probed.
    #[arg(long, default_value_t = 10)]
    step: usize,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

/// Ordering of one metric along one swept axis.
#[derive(Debug, serde::Serialize)]
struct Ordering {
    axis: &'static str,
    metric: &'static str,
    points: Vec<(f64, f64)>,
    inversions: usize,
    largest_drop: f64,
    holds: bool,
}

fn ordering(
    table: &AblationTable,
    axis: &'static str,
    metric: &'static str,
    key: impl Fn(&InjectionConfig) -> f64,
    value: impl Fn(&MetricReport) -> f64,
    tolerance: f64,
) -> Option<Ordering> {
    let mut groups: Vec<(f64, f64, usize)> = Vec::new();
    for row in &table.rows {
        let Some(m) = &row.metrics else { continue };
        let k = key(&row.config);
        match groups.iter_mut().find(|g| g.0 == k) {
            Some(g) => {
                g.1 += value(m);
                g.2 += 1;
            }
            None => groups.push((k, value(m), 1)),
        }
    }
    if groups.len() < 2 {
        return None;
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let points: Vec<(f64, f64)> = groups.iter().map(|g| (g.0, g.1 / g.2 as f64)).collect();
    let drops: Vec<f64> = points
        .windows(2)
        .map(|w| w[0].1 - w[1].1)
        .filter(|&d| d > 0.0)
        .collect();
    let largest_drop = drops.iter().copied().fold(0.0, f64::max);
    Some(Ordering {
        axis,
        metric,
        inversions: drops.len(),
        holds: drops.len() <= 1 && largest_drop <= tolerance,
        largest_drop,
        points,
    })
}

impl Analyze {
    pub fn run(&self, g: &Global) -> Result<()> {
        if let Some(t) = &self.table {
            return self.check_table(t, g);
        }
        let (Some(m), Some(c), Some(s)) = (&self.model, &self.content, &self.style) else {
            return Err(invalid(
                "analyze needs --table, or --model with --content and --style",
            ));
        };
        self.diagnostics(m, c, s, g)
    }

    fn check_table(&self, path: &Path, g: &Global) -> Result<()> {
        let table = AblationTable::read_csv(path)?;
        let checks: Vec<Ordering> = [
            ordering(
                &table,
                "lambda_style",
                "style_affinity",
                |c| c.lambda_style,
                |m| m.style_affinity,
                self.tolerance,
            ),
            ordering(
                &table,
                "window_start",
                "content_preservation",
                |c| c.window.0 as f64,
                |m| m.content_preservation,
                self.tolerance,
            ),
        ]
        .into_iter()
        .flatten()
        .collect();
        if checks.is_empty() {
            return Err(invalid(
                "the table sweeps neither lambda nor the window start",
            ));
        }
        for c in &checks {
            let pts: Vec<String> = c
                .points
                .iter()
                .map(|(k, v)| format!("{k}:{v:.4}"))
                .collect();
            println!(
                "{} vs {}: {} ({} inversions, largest drop {:.4}) [{}]",
                c.metric,
                c.axis,
                if c.holds {
                    "non-decreasing"
                } else {
                    "NOT non-decreasing"
                },
                c.inversions,
                c.largest_drop,
                pts.join(" ")
            );
        }
        write_json(&g.out.join("analysis.json"), &checks)?;
        if self.strict && checks.iter().any(|c| !c.holds) {
            return Err(CliError::Runtime("ordering check failed".into()));
        }
        Ok(())
    }

    fn diagnostics(&self, model: &Path, content: &Path, style: &Path, g: &Global) -> Result<()> {
        if self.step >= self.steps {
            return Err(invalid(format!(
                "step {} outside 0..{}",
                self.step, self.steps
            )));
        }
        let c = image(content)?;
        let s = image(style)?;
        let model = load_model(model)?;
        model.check_layer(self.layer)?;
        let schedule = make_linear_schedule(self.steps)?;
        let index = self.steps - self.step;
        let grid_t = schedule.timestep(index);
        let capture = |x: &ImageTensor| -> Result<zstar::attention::Qkv> {
            let traj = ddim_invert(x, &schedule, &model)?;
            let (_, mut caps) =
                model.predict_noise_with_capture(&traj.latents[index], grid_t, &[self.layer])?;
            Ok(caps.remove(&self.layer).expect("captured layer").qkv)
        };
        let (qc, qs) = (capture(&c)?, capture(&s)?);
        let own = self_attention(&qc.q, &qc.k, &qc.v, qc.dim_scale)?;
        let cross = naive_style_cross(&qc.q, &qs.k, &qs.v, qc.dim_scale)?;
        fs::create_dir_all(&g.out).map_err(|e| io_err(&g.out, e))?;
        let heat = similarity_heatmap(&cross, &own)?;
        heat.write_png(&g.out.join("heatmap.png"), 8)?;
        let hist = logit_histogram(&qc.q, &qs.k, qc.dim_scale, self.bins)?;
        hist.write_csv(&g.out.join("logit_histogram.csv"))?;
        let mut summary = json!({
            "layer": self.layer,
            "step": self.step,
            "heatmap_mean": heat.mean(),
            "heatmap_min": heat.min(),
        });
        if let Some(out) = &self.output {
            let o = image(out)?;
            let report = MetricReport::compute(&model, &o, &c, &s, Default::default())?;
            summary["metrics"] = serde_json::to_value(&report)?;
        }
        write_json(&g.out.join("analysis.json"), &summary)?;
        println!(
            "heatmap mean {:.4}, min {:.4}; outputs in {}",
            heat.mean(),
            heat.min(),
            g.out.display()
        );
        Ok(())
    }
}
